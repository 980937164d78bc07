use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{ActionSpace, Env, EnvRng, EnvSpec, StepResult};
use crate::error::{Error, Result};
use crate::policy::Action;

/// Distance to the goal under which the mass counts as arrived.
pub const GOAL_RADIUS: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardMode {
    /// `-||pos - goal||` every step.
    Dense,
    /// 1 on arrival (which ends the episode), 0 otherwise.
    Sparse,
}

impl RewardMode {
    pub fn name(self) -> &'static str {
        match self {
            RewardMode::Dense => "dense",
            RewardMode::Sparse => "sparse",
        }
    }
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(RewardMode::Dense),
            "sparse" => Ok(RewardMode::Sparse),
            other => Err(Error::Format(format!("unknown reward mode {other:?}"))),
        }
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Double integrator in the plane. Start and goal are uniform on `[-1, 1]^2`.
///
/// Observation: `[px, py, vx, vy, gx - px, gy - py, t / H]`.
#[derive(Clone, Debug)]
pub struct PointMassEnv {
    pub reward_mode: RewardMode,
    pub horizon: usize,
    pub dt: f64,
    pub accel_limit: f64,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
    t: usize,
    done: bool,
}

impl PointMassEnv {
    pub fn new(reward_mode: RewardMode, horizon: usize, dt: f64, accel_limit: f64) -> Self {
        Self {
            reward_mode,
            horizon,
            dt,
            accel_limit,
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.0; 2],
            t: 0,
            done: true,
        }
    }

    /// Place the mass explicitly; the episode restarts at `t = 0`.
    pub fn reset_to(&mut self, pos: [f64; 2], vel: [f64; 2], goal: [f64; 2]) -> Vec<f64> {
        self.pos = pos;
        self.vel = vel;
        self.goal = goal;
        self.t = 0;
        self.done = false;
        self.observation()
    }

    pub fn distance(&self) -> f64 {
        ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt()
    }

    fn observation(&self) -> Vec<f64> {
        vec![
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.goal[0] - self.pos[0],
            self.goal[1] - self.pos[1],
            self.t as f64 / self.horizon as f64,
        ]
    }
}

impl Env for PointMassEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec::PointMass {
            reward: self.reward_mode,
            horizon: self.horizon,
            dt: self.dt,
            accel_limit: self.accel_limit,
        }
    }

    fn obs_dim(&self) -> usize {
        7
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: 2 }
    }

    fn action_bound(&self) -> Option<f64> {
        Some(self.accel_limit)
    }

    fn reset(&mut self, rng: &mut EnvRng) -> Vec<f64> {
        let mut draw = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let pos = draw();
        let goal = draw();
        self.reset_to(pos, [0.0; 2], goal)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let a = action
            .continuous()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| {
                Error::invalid(format!("point mass expects a 2-D action, got {action:?}"))
            })?;
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("action {a:?}")));
        }
        for (d, &ad) in a.iter().enumerate() {
            let acc = ad.clamp(-self.accel_limit, self.accel_limit);
            self.vel[d] += acc * self.dt;
            self.pos[d] += self.vel[d] * self.dt;
        }
        self.t += 1;
        let dist = self.distance();
        let success = dist < GOAL_RADIUS;
        let reward = match self.reward_mode {
            RewardMode::Dense => -dist,
            RewardMode::Sparse => f64::from(u8::from(success)),
        };
        self.done = self.t >= self.horizon || (success && self.reward_mode == RewardMode::Sparse);
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done,
            success,
        })
    }
}
