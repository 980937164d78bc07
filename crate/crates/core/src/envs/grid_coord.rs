use rand::seq::index::sample;
use rand::Rng;

use super::{ActionSpace, Demonstrator, Env, EnvRng, EnvSpec, StepResult};
use crate::error::{Error, Result};
use crate::policy::Action;

pub const LEFT: usize = 0;
pub const STAY: usize = 1;
pub const RIGHT: usize = 2;

/// `N` agents on a line of `L` cells must jointly cover `N` fixed, evenly
/// spaced target cells. Each agent moves left, stays, or moves right;
/// positions are clipped to the line. Reward 1 (ending the episode) on the
/// first step at which the occupied cells are exactly the targets.
///
/// Observation: `[x_1..x_N, g_1..g_N, t / H]` with cells scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct GridCoordEnv {
    pub agents: usize,
    pub cells: usize,
    pub horizon: usize,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
    t: usize,
    done: bool,
}

impl GridCoordEnv {
    pub fn new(agents: usize, cells: usize, horizon: usize) -> Self {
        let targets = if agents == 1 {
            vec![(cells - 1) / 2]
        } else {
            (0..agents)
                .map(|j| (j * (cells - 1) + (agents - 1) / 2) / (agents - 1))
                .collect()
        };
        Self {
            agents,
            cells,
            horizon,
            positions: vec![0; agents],
            targets,
            t: 0,
            done: true,
        }
    }

    pub fn reset_to(&mut self, positions: Vec<usize>) -> Result<Vec<f64>> {
        if positions.len() != self.agents || positions.iter().any(|&p| p >= self.cells) {
            return Err(Error::invalid(format!(
                "positions {positions:?} on {} cells",
                self.cells
            )));
        }
        self.positions = positions;
        self.t = 0;
        self.done = false;
        Ok(self.observation())
    }

    pub fn covers_targets(&self) -> bool {
        let mut p = self.positions.clone();
        p.sort_unstable();
        p == self.targets
    }

    fn observation(&self) -> Vec<f64> {
        let scale = (self.cells - 1).max(1) as f64;
        self.positions
            .iter()
            .chain(&self.targets)
            .map(|&c| c as f64 / scale)
            .chain(std::iter::once(self.t as f64 / self.horizon as f64))
            .collect()
    }

    /// Decode cell indices from an observation.
    pub fn decode(obs: &[f64], agents: usize, cells: usize) -> (Vec<usize>, Vec<usize>) {
        let scale = (cells - 1).max(1) as f64;
        let cell = |v: &f64| (v * scale).round() as usize;
        (
            obs[..agents].iter().map(cell).collect(),
            obs[agents..2 * agents].iter().map(cell).collect(),
        )
    }
}

impl Env for GridCoordEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec::GridCoord {
            agents: self.agents,
            cells: self.cells,
            horizon: self.horizon,
        }
    }

    fn obs_dim(&self) -> usize {
        2 * self.agents + 1
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete {
            agents: self.agents,
            actions: 3,
        }
    }

    /// Distinct random start cells that do not already cover the targets.
    fn reset(&mut self, rng: &mut EnvRng) -> Vec<f64> {
        loop {
            self.positions = sample(rng, self.cells, self.agents).into_vec();
            if !self.covers_targets() || self.cells == self.agents {
                break;
            }
        }
        self.t = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let a = action
            .discrete()
            .filter(|a| a.len() == self.agents && a.iter().all(|&x| x < 3))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "grid expects {} moves in 0..3, got {action:?}",
                    self.agents
                ))
            })?;
        for (p, &m) in self.positions.iter_mut().zip(a) {
            *p = match m {
                LEFT => p.saturating_sub(1),
                RIGHT => (*p + 1).min(self.cells - 1),
                _ => *p,
            };
        }
        self.t += 1;
        let success = self.covers_targets();
        self.done = success || self.t >= self.horizon;
        Ok(StepResult {
            observation: self.observation(),
            reward: f64::from(u8::from(success)),
            done: self.done,
            success,
        })
    }
}

/// Assignment rule of a scripted router, applied to agents ranked by their
/// start cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// The `i`-th leftmost agent goes to the `i`-th target.
    OrderPreserving,
    /// The `i`-th leftmost agent goes to target `(i + 1) mod N`.
    Cyclic,
}

/// Scripted demonstrator: commits to an assignment at episode start, then
/// walks each agent toward its target, replacing each move by a uniformly
/// random one with probability `noise`.
#[derive(Clone, Debug)]
pub struct GridRouter {
    pub routing: Routing,
    pub noise: f64,
    pub agents: usize,
    pub cells: usize,
    assignment: Vec<usize>,
}

impl GridRouter {
    pub fn new(routing: Routing, noise: f64, agents: usize, cells: usize) -> Self {
        Self {
            routing,
            noise,
            agents,
            cells,
            assignment: Vec::new(),
        }
    }

    /// Target cell of each agent for the given start.
    pub fn assign(&self, positions: &[usize], targets: &[usize]) -> Vec<usize> {
        let n = positions.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (positions[i], i));
        let mut out = vec![0; n];
        for (rank, &agent) in order.iter().enumerate() {
            let j = match self.routing {
                Routing::OrderPreserving => rank,
                Routing::Cyclic => (rank + 1) % n,
            };
            out[agent] = targets[j];
        }
        out
    }

    pub fn greedy_moves(&self, positions: &[usize]) -> Vec<usize> {
        positions
            .iter()
            .zip(&self.assignment)
            .map(|(&p, &g)| match p.cmp(&g) {
                std::cmp::Ordering::Less => RIGHT,
                std::cmp::Ordering::Greater => LEFT,
                std::cmp::Ordering::Equal => STAY,
            })
            .collect()
    }
}

impl Demonstrator for GridRouter {
    fn begin(&mut self, obs: &[f64], _rng: &mut EnvRng) {
        let (positions, targets) = GridCoordEnv::decode(obs, self.agents, self.cells);
        self.assignment = self.assign(&positions, &targets);
    }

    fn act(&mut self, obs: &[f64], rng: &mut EnvRng) -> Action {
        let (positions, _) = GridCoordEnv::decode(obs, self.agents, self.cells);
        let moves = self
            .greedy_moves(&positions)
            .into_iter()
            .map(|m| {
                if rng.random::<f64>() < self.noise {
                    rng.random_range(0..3)
                } else {
                    m
                }
            })
            .collect();
        Action::Discrete(moves)
    }
}
