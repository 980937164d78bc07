//! Desk-scale environments: a 2-D point mass with dense or sparse reward, a
//! scalar linear-quadratic regulator with an analytic optimum, and a
//! discrete multi-agent coordination line world.

mod demos;
mod grid_coord;
mod lqr;
mod point_mass;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::Action;

pub use demos::{
    demonstrator, load_dataset, make_demonstrations, random_action, rollout_returns, save_dataset,
    Dataset, Demonstrator, LqrController, MixtureDemonstrator, PdController, Quality, RandomPolicy,
};
pub use grid_coord::{GridCoordEnv, GridRouter, Routing};
pub use lqr::{lqr_gains, lqr_optimal_return, LqrEnv};
pub use point_mass::{PointMassEnv, RewardMode};

pub type EnvRng = ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    Continuous { dim: usize },
    Discrete { agents: usize, actions: usize },
}

impl ActionSpace {
    /// Width of one environment action as seen by a policy network.
    pub fn flat_dim(&self) -> usize {
        match *self {
            ActionSpace::Continuous { dim } => dim,
            ActionSpace::Discrete { agents, actions } => agents * actions,
        }
    }

    /// Number of entries of one step of an [`Action`].
    pub fn action_len(&self) -> usize {
        match *self {
            ActionSpace::Continuous { dim } => dim,
            ActionSpace::Discrete { agents, .. } => agents,
        }
    }
}

pub trait Env: Send {
    fn spec(&self) -> EnvSpec;

    fn obs_dim(&self) -> usize;

    fn action_space(&self) -> ActionSpace;

    fn reset(&mut self, rng: &mut EnvRng) -> Vec<f64>;

    /// Advance one environment step. Rejected once the episode is done.
    fn step(&mut self, action: &Action) -> Result<StepResult>;

    /// Per-component clamp applied to continuous actions before stepping.
    fn action_bound(&self) -> Option<f64> {
        None
    }
}

/// Serializable description of an environment; its canonical text form keys
/// demonstration files and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvSpec {
    PointMass {
        reward: RewardMode,
        horizon: usize,
        dt: f64,
        accel_limit: f64,
    },
    Lqr {
        horizon: usize,
    },
    GridCoord {
        agents: usize,
        cells: usize,
        horizon: usize,
    },
}

impl EnvSpec {
    pub fn point_mass(reward: RewardMode) -> Self {
        EnvSpec::PointMass {
            reward,
            horizon: 64,
            dt: 0.1,
            accel_limit: 1.0,
        }
    }

    pub fn lqr() -> Self {
        EnvSpec::Lqr { horizon: 10 }
    }

    pub fn grid_coord() -> Self {
        EnvSpec::GridCoord {
            agents: 3,
            cells: 5,
            horizon: 32,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EnvSpec::PointMass {
                reward: RewardMode::Dense,
                ..
            } => "point_mass_dense",
            EnvSpec::PointMass {
                reward: RewardMode::Sparse,
                ..
            } => "point_mass_sparse",
            EnvSpec::Lqr { .. } => "lqr",
            EnvSpec::GridCoord { .. } => "grid_coord",
        }
    }

    pub fn horizon(&self) -> usize {
        match *self {
            EnvSpec::PointMass { horizon, .. }
            | EnvSpec::Lqr { horizon }
            | EnvSpec::GridCoord { horizon, .. } => horizon,
        }
    }

    pub fn with_horizon(mut self, h: usize) -> Self {
        match &mut self {
            EnvSpec::PointMass { horizon, .. }
            | EnvSpec::Lqr { horizon }
            | EnvSpec::GridCoord { horizon, .. } => *horizon = h,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EnvSpec::PointMass {
                horizon,
                dt,
                accel_limit,
                ..
            } => horizon > 0 && dt > 0.0 && accel_limit > 0.0,
            EnvSpec::Lqr { horizon } => horizon > 0,
            EnvSpec::GridCoord {
                agents,
                cells,
                horizon,
            } => horizon > 0 && agents > 0 && cells >= agents,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid environment spec {self}")))
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn build(&self) -> Result<Box<dyn Env>> {
        self.validate()?;
        Ok(match *self {
            EnvSpec::PointMass {
                reward,
                horizon,
                dt,
                accel_limit,
            } => Box::new(PointMassEnv::new(reward, horizon, dt, accel_limit)),
            EnvSpec::Lqr { horizon } => Box::new(LqrEnv::new(horizon)),
            EnvSpec::GridCoord {
                agents,
                cells,
                horizon,
            } => Box::new(GridCoordEnv::new(agents, cells, horizon)),
        })
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvSpec::PointMass {
                reward,
                horizon,
                dt,
                accel_limit,
            } => write!(
                f,
                "point_mass reward={} horizon={horizon} dt={dt} accel_limit={accel_limit}",
                reward.name()
            ),
            EnvSpec::Lqr { horizon } => write!(f, "lqr horizon={horizon}"),
            EnvSpec::GridCoord {
                agents,
                cells,
                horizon,
            } => {
                write!(
                    f,
                    "grid_coord agents={agents} cells={cells} horizon={horizon}"
                )
            }
        }
    }
}

impl FromStr for EnvSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let kind = words
            .next()
            .ok_or_else(|| Error::Format("empty environment spec".into()))?;
        let mut spec = match kind {
            "point_mass" => EnvSpec::point_mass(RewardMode::Dense),
            "lqr" => EnvSpec::lqr(),
            "grid_coord" => EnvSpec::grid_coord(),
            other => return Err(Error::Format(format!("unknown environment kind {other:?}"))),
        };
        for w in words {
            let (key, value) = w
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key=value, got {w:?}")))?;
            let bad = || Error::Format(format!("bad value for {key}: {value:?}"));
            let int = || value.parse::<usize>().map_err(|_| bad());
            let real = || value.parse::<f64>().map_err(|_| bad());
            if key == "horizon" {
                spec = spec.with_horizon(int()?);
                continue;
            }
            match (&mut spec, key) {
                (EnvSpec::PointMass { reward, .. }, "reward") => *reward = value.parse()?,
                (EnvSpec::PointMass { dt, .. }, "dt") => *dt = real()?,
                (EnvSpec::PointMass { accel_limit, .. }, "accel_limit") => *accel_limit = real()?,
                (EnvSpec::GridCoord { agents, .. }, "agents") => *agents = int()?,
                (EnvSpec::GridCoord { cells, .. }, "cells") => *cells = int()?,
                _ => return Err(Error::Format(format!("unknown key {key:?} for {kind}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Execute a chunk of `chunk` consecutive environment actions packed into
/// one policy action. Rewards are summed; stepping stops at the first done.
/// Returns the combined result and the number of environment steps taken.
pub fn step_chunk(env: &mut dyn Env, action: &Action, chunk: usize) -> Result<(StepResult, usize)> {
    let len = env.action_space().action_len();
    let total = match action {
        Action::Continuous(v) => v.len(),
        Action::Discrete(v) => v.len(),
    };
    if chunk == 0 || total != len * chunk {
        return Err(Error::invalid(format!(
            "action of length {total} for chunk {chunk} of width {len}"
        )));
    }
    let mut reward = 0.0;
    let mut success = false;
    let mut last = None;
    let mut steps = 0;
    for c in 0..chunk {
        let piece = match action {
            Action::Continuous(v) => Action::Continuous(v[c * len..(c + 1) * len].to_vec()),
            Action::Discrete(v) => Action::Discrete(v[c * len..(c + 1) * len].to_vec()),
        };
        let r = env.step(&piece)?;
        steps += 1;
        reward += r.reward;
        success |= r.success;
        let done = r.done;
        last = Some(r);
        if done {
            break;
        }
    }
    let last = last.expect("chunk >= 1");
    Ok((
        StepResult {
            observation: last.observation,
            reward,
            done: last.done,
            success,
        },
        steps,
    ))
}
