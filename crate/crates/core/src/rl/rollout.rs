use rand::{Rng, SeedableRng};

use super::actor::Actor;
use super::buffer::{mean_or_nan, RolloutBuffer, Transition};
use super::derive_seed;
use crate::autodiff::Tensor;
use crate::envs::{step_chunk, Env, EnvRng, EnvSpec};
use crate::error::{Error, Result};
use crate::nets::CriticNet;
use crate::policy::Action;

/// `(return, success)` of an episode that just ended.
type Finished = (f64, bool);

/// Parallel environment instances, each with its own reset stream. Finished
/// episodes reset automatically.
pub struct VecEnv {
    pub envs: Vec<Box<dyn Env>>,
    pub chunk: usize,
    rngs: Vec<EnvRng>,
    obs: Vec<Vec<f64>>,
    ep_return: Vec<f64>,
    ep_success: Vec<bool>,
    steps: usize,
}

impl VecEnv {
    /// `count` fresh instances; instance `i` resets from stream `(seed, i)`.
    pub fn new(spec: &EnvSpec, count: usize, chunk: usize, seed: u64) -> Result<Self> {
        if count == 0 || chunk == 0 {
            return Err(Error::invalid(
                "need at least one environment and chunk >= 1",
            ));
        }
        let mut envs = Vec::with_capacity(count);
        let mut rngs = Vec::with_capacity(count);
        let mut obs = Vec::with_capacity(count);
        for i in 0..count {
            let mut env = spec.build()?;
            let mut rng = EnvRng::seed_from_u64(derive_seed(seed, &[i as u64]));
            obs.push(env.reset(&mut rng));
            envs.push(env);
            rngs.push(rng);
        }
        Ok(Self {
            envs,
            chunk,
            rngs,
            obs,
            ep_return: vec![0.0; count],
            ep_success: vec![false; count],
            steps: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn states(&self) -> Tensor {
        Tensor::from_rows(&self.obs).expect("observations share one width")
    }

    /// Environment steps taken so far (chunk sub-steps counted individually).
    pub fn env_steps(&self) -> usize {
        self.steps
    }

    /// Step instance `i`; on episode end, record its outcome and reset.
    /// Returns `(reward, done, finished episode (return, success))`.
    pub(crate) fn step(
        &mut self,
        i: usize,
        step: usize,
        action: &Action,
    ) -> Result<(f64, bool, Option<Finished>)> {
        let (r, n) =
            step_chunk(self.envs[i].as_mut(), action, self.chunk).map_err(|e| Error::EnvStep {
                env: i,
                step,
                detail: e.to_string(),
            })?;
        self.steps += n;
        self.ep_return[i] += r.reward;
        self.ep_success[i] |= r.success;
        let finished = if r.done {
            let out = (self.ep_return[i], self.ep_success[i]);
            self.ep_return[i] = 0.0;
            self.ep_success[i] = false;
            self.obs[i] = self.envs[i].reset(&mut self.rngs[i]);
            Some(out)
        } else {
            self.obs[i] = r.observation;
            None
        };
        Ok((r.reward, r.done, finished))
    }
}

/// Collect `steps_per_env` decisions from every environment. Each decision
/// draws a fresh noise stack, runs the deterministic network, samples the
/// head and stores the full transition with the critic's value.
pub fn collect_rollout<R: Rng + ?Sized>(
    actor: &Actor,
    critic: &CriticNet,
    venv: &mut VecEnv,
    steps_per_env: usize,
    rng: &mut R,
) -> Result<RolloutBuffer> {
    let n = venv.len();
    let start_steps = venv.env_steps();
    let mut buf = RolloutBuffer {
        trajectories: (0..n).map(|_| Vec::with_capacity(steps_per_env)).collect(),
        ..Default::default()
    };
    for step in 0..steps_per_env {
        let states = venv.states();
        let samples = actor.act(&states, rng)?;
        let values = critic.values(&states)?;
        for (i, (sample, value)) in samples.into_iter().zip(values).enumerate() {
            let (reward, done, finished) = venv.step(i, step, &sample.output.action)?;
            if let Some((ret, success)) = finished {
                buf.episode_returns.push(ret);
                buf.episode_successes.push(success);
            }
            buf.trajectories[i].push(Transition {
                obs: states.row_slice(i).to_vec(),
                noise: sample.noise,
                f_out: sample.output.mean_or_logits,
                action: sample.output.action,
                log_prob: sample.output.log_prob,
                reward,
                done,
                value,
            });
        }
    }
    buf.bootstrap = critic.values(&venv.states())?;
    buf.env_steps = venv.env_steps() - start_steps;
    Ok(buf)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub success_rate: f64,
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
}

/// Run `episodes` complete episodes in parallel, one per instance.
/// Deterministic acting uses the head mean or argmax.
pub fn evaluate(
    actor: &Actor,
    spec: &EnvSpec,
    chunk: usize,
    episodes: usize,
    seed: u64,
    deterministic: bool,
) -> Result<EvalResult> {
    let mut venv = VecEnv::new(spec, episodes, chunk, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
    let mut returns = vec![None; episodes];
    let mut successes = vec![false; episodes];
    let mut step = 0;
    while returns.iter().any(Option::is_none) {
        let states = venv.states();
        let actions = if deterministic {
            actor.act_deterministic(&states, &mut rng)?
        } else {
            actor
                .act(&states, &mut rng)?
                .into_iter()
                .map(|s| s.output.action)
                .collect()
        };
        for (i, a) in actions.iter().enumerate() {
            if returns[i].is_some() {
                continue;
            }
            if let (_, _, Some((ret, success))) = venv.step(i, step, a)? {
                returns[i] = Some(ret);
                successes[i] = success;
            }
        }
        step += 1;
    }
    let returns: Vec<f64> = returns.into_iter().map(Option::unwrap).collect();
    let rate: Vec<f64> = successes.iter().map(|&b| f64::from(u8::from(b))).collect();
    Ok(EvalResult {
        mean_return: mean_or_nan(&returns),
        success_rate: mean_or_nan(&rate),
        returns,
        successes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::envs::RewardMode;
    use crate::nets::DenoisingNet;
    use crate::policy::{GaussianHead, Head};
    use crate::rl::actor::ActorNet;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Actor, CriticNet, EnvSpec) {
        let spec = EnvSpec::point_mass(RewardMode::Dense).with_horizon(8);
        let net = DenoisingNet::new(2, 7, 16, 2, false, 3)
            .unwrap()
            .with_x0_clip(Some(1.0));
        let schedule = make_schedule(3, ScheduleKind::default_linear(3)).unwrap();
        let actor = Actor::new(
            ActorNet::Diffusion { net, schedule },
            Head::Gaussian(GaussianHead::new(2, -1.0)),
            7,
        )
        .unwrap();
        (actor, CriticNet::new(7, 16, 2, 4).unwrap(), spec)
    }

    #[test]
    fn counts_and_determinism() {
        let (actor, critic, spec) = setup();
        let collect = || {
            let mut venv = VecEnv::new(&spec, 3, 1, 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            collect_rollout(&actor, &critic, &mut venv, 20, &mut rng).unwrap()
        };
        let a = collect();
        let b = collect();
        assert_eq!(a.len(), 60);
        assert_eq!(a.env_steps, 60);
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.bootstrap, b.bootstrap);
        // Horizon 8 over 20 steps: two complete episodes per environment.
        assert_eq!(a.episode_returns.len(), 6);
        assert_eq!(a.trajectories[0].iter().filter(|t| t.done).count(), 2);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let (actor, _, spec) = setup();
        let a = evaluate(&actor, &spec, 1, 4, 3, true).unwrap();
        assert_eq!(a, evaluate(&actor, &spec, 1, 4, 3, true).unwrap());
        assert_eq!(a.returns.len(), 4);
        assert!(a.returns.iter().all(|r| *r <= 0.0));
    }
}
