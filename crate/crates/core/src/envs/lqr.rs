use rand::Rng;

use super::{ActionSpace, Env, EnvRng, EnvSpec, StepResult};
use crate::error::{Error, Result};
use crate::policy::Action;

/// Scalar regulator `s' = s + a`, reward `-(s^2 + a^2)`, fixed horizon.
/// The initial state is uniform on `[-1, 1]`.
///
/// Observation: `[s, t / H]`.
#[derive(Clone, Debug)]
pub struct LqrEnv {
    pub horizon: usize,
    pub state: f64,
    t: usize,
    done: bool,
}

impl LqrEnv {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            state: 0.0,
            t: 0,
            done: true,
        }
    }

    pub fn reset_to(&mut self, s0: f64) -> Vec<f64> {
        self.state = s0;
        self.t = 0;
        self.done = false;
        self.observation()
    }

    pub fn time(&self) -> usize {
        self.t
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.state, self.t as f64 / self.horizon as f64]
    }
}

impl Env for LqrEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec::Lqr {
            horizon: self.horizon,
        }
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: 1 }
    }

    fn reset(&mut self, rng: &mut EnvRng) -> Vec<f64> {
        let s0 = rng.random_range(-1.0..1.0);
        self.reset_to(s0)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let a = match action.continuous() {
            Some([a]) if a.is_finite() => *a,
            _ => {
                return Err(Error::invalid(format!(
                    "LQR expects one finite action, got {action:?}"
                )))
            }
        };
        let reward = -(self.state * self.state + a * a);
        self.state += a;
        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done,
            success: false,
        })
    }
}

/// Backward Riccati recursion. Returns `(P_0..P_H, K_0..K_{H-1})` with the
/// optimal value `V_t(s) = -P_t s^2` and optimal action `a_t = -K_t s`.
pub fn lqr_gains(horizon: usize, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; horizon + 1];
    let mut k = vec![0.0; horizon];
    for t in (0..horizon).rev() {
        let q = gamma * p[t + 1];
        k[t] = q / (1.0 + q);
        p[t] = 1.0 + q - q * q / (1.0 + q);
    }
    (p, k)
}

/// Optimal discounted return from `s0` over `horizon` steps.
pub fn lqr_optimal_return(horizon: usize, gamma: f64, s0: f64) -> f64 {
    -lqr_gains(horizon, gamma).0[0] * s0 * s0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point() {
        let mut env = LqrEnv::new(10);
        env.reset_to(0.0);
        let r = env.step(&Action::Continuous(vec![0.0])).unwrap();
        assert_eq!((r.reward, r.observation[0]), (0.0, 0.0));
        for h in 1..20 {
            assert_eq!(lqr_optimal_return(h, 1.0, 0.0), 0.0);
        }
    }

    #[test]
    fn one_step_optimum() {
        assert_eq!(lqr_optimal_return(1, 1.0, 1.0), -1.0);
        assert_eq!(lqr_gains(1, 1.0).1, vec![0.0]);
    }

    /// Grid search over discretized action sequences, one coordinate at a
    /// time with a shrinking grid, against the recursion.
    #[test]
    fn riccati_matches_grid_search() {
        let rollout = |actions: &[f64]| {
            let mut env = LqrEnv::new(actions.len());
            env.reset_to(1.0);
            actions
                .iter()
                .map(|&a| env.step(&Action::Continuous(vec![a])).unwrap().reward)
                .sum::<f64>()
        };
        let h = 10;
        let mut seq = vec![0.0; h];
        let mut width = 1.0;
        for _ in 0..60 {
            for t in 0..h {
                let center = seq[t];
                let mut best = (f64::NEG_INFINITY, center);
                for i in 0..=40 {
                    seq[t] = center + width * (i as f64 / 20.0 - 1.0);
                    let v = rollout(&seq);
                    if v > best.0 {
                        best = (v, seq[t]);
                    }
                }
                seq[t] = best.1;
            }
            width = (width * 0.8).max(1e-4);
        }
        let best = rollout(&seq);
        assert!(
            (best - lqr_optimal_return(h, 1.0, 1.0)).abs() < 1e-3,
            "{best}"
        );
        assert!(best <= lqr_optimal_return(h, 1.0, 1.0) + 1e-12);
    }

    #[test]
    fn gains_achieve_optimal_return() {
        for (h, gamma, s0) in [(10, 1.0, 1.0), (10, 0.99, -0.6), (4, 0.9, 0.3)] {
            let (_, k) = lqr_gains(h, gamma);
            let mut env = LqrEnv::new(h);
            let mut s = s0;
            env.reset_to(s0);
            let mut ret = 0.0;
            for (t, kt) in k.iter().enumerate() {
                let r = env.step(&Action::Continuous(vec![-kt * s])).unwrap();
                ret += gamma.powi(t as i32) * r.reward;
                s = r.observation[0];
            }
            assert!((ret - lqr_optimal_return(h, gamma, s0)).abs() < 1e-12);
        }
        // Perturbing any single action can only lower the return.
        let (_, k) = lqr_gains(10, 1.0);
        for t in 0..10 {
            for d in [-0.05, 0.05] {
                let mut env = LqrEnv::new(10);
                let mut s = 1.0;
                env.reset_to(1.0);
                let mut ret = 0.0;
                for (u, ku) in k.iter().enumerate() {
                    let a = -ku * s + if u == t { d } else { 0.0 };
                    let r = env.step(&Action::Continuous(vec![a])).unwrap();
                    ret += r.reward;
                    s = r.observation[0];
                }
                assert!(ret < lqr_optimal_return(10, 1.0, 1.0));
            }
        }
    }

    #[test]
    fn step_after_done_rejected() {
        let mut env = LqrEnv::new(1);
        env.reset_to(0.5);
        assert!(env.step(&Action::Continuous(vec![0.0])).unwrap().done);
        assert!(matches!(
            env.step(&Action::Continuous(vec![0.0])),
            Err(Error::EpisodeDone)
        ));
    }
}
