use super::gae::gae;
use crate::diffusion::NoiseStack;
use crate::error::{Error, Result};
use crate::policy::Action;

/// One policy decision as stored during a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub noise: NoiseStack,
    /// Deterministic network output the head was centered on.
    pub f_out: Vec<f64>,
    /// Sampled interactive action.
    pub action: Action,
    pub log_prob: f64,
    pub reward: f64,
    pub done: bool,
    pub value: f64,
}

/// Transitions per parallel environment in time order, plus per-env
/// bootstrap values and, once computed, flattened advantages and returns.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub trajectories: Vec<Vec<Transition>>,
    /// `V` of the state following each trajectory's last transition.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
    pub env_steps: usize,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.trajectories.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Transitions flattened environment-major.
    pub fn flat(&self) -> Vec<&Transition> {
        self.trajectories.iter().flatten().collect()
    }

    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        if self.bootstrap.len() != self.trajectories.len() {
            return Err(Error::invalid(format!(
                "{} bootstrap values for {} trajectories",
                self.bootstrap.len(),
                self.trajectories.len()
            )));
        }
        self.advantages.clear();
        self.returns.clear();
        for (traj, &boot) in self.trajectories.iter().zip(&self.bootstrap) {
            let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
            let dones: Vec<bool> = traj.iter().map(|t| t.done).collect();
            let values: Vec<f64> = traj
                .iter()
                .map(|t| t.value)
                .chain(std::iter::once(boot))
                .collect();
            let (a, r) = gae(&rewards, &values, &dones, gamma, lambda)?;
            self.advantages.extend(a);
            self.returns.extend(r);
        }
        Ok(())
    }

    pub fn mean_episode_return(&self) -> f64 {
        mean_or_nan(&self.episode_returns)
    }

    pub fn success_rate(&self) -> f64 {
        let s: Vec<f64> = self
            .episode_successes
            .iter()
            .map(|&b| f64::from(u8::from(b)))
            .collect();
        mean_or_nan(&s)
    }
}

pub(crate) fn mean_or_nan(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
