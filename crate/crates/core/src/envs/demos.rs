//! Scripted demonstrators and the demonstration dataset file.
//!
//! File layout: UTF-8 header lines `key value`, terminated by a line `data`,
//! followed by `count` records of `obs_dim + action_dim` little-endian `f64`
//! values each (observation first, then the flattened action chunk).
//! Discrete actions are stored as their indices.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::grid_coord::{GridRouter, Routing};
use super::lqr::lqr_gains;
use super::{ActionSpace, Env, EnvRng, EnvSpec};
use crate::error::{Error, Result};
use crate::policy::Action;

const MAGIC: &str = "ncdpo-demos 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quality {
    Expert,
    Medium,
    Mixture,
}

impl Quality {
    pub fn name(self) -> &'static str {
        match self {
            Quality::Expert => "expert",
            Quality::Medium => "medium",
            Quality::Mixture => "mixture",
        }
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Quality::Expert),
            "medium" => Ok(Quality::Medium),
            "mixture" => Ok(Quality::Mixture),
            other => Err(Error::invalid(format!(
                "unknown demonstration quality {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scripted policy acting from observations. `begin` is called with the
/// first observation of every episode.
pub trait Demonstrator {
    fn begin(&mut self, obs: &[f64], rng: &mut EnvRng);
    fn act(&mut self, obs: &[f64], rng: &mut EnvRng) -> Action;
}

/// PD controller toward the goal with optional Gaussian action noise and
/// random detours toward a decoy point early in the episode.
#[derive(Clone, Debug)]
pub struct PdController {
    pub kp: f64,
    pub kd: f64,
    pub noise: f64,
    pub detour_prob: f64,
    pub detour_steps: usize,
    detour: Option<[f64; 2]>,
    t: usize,
}

impl PdController {
    pub fn expert() -> Self {
        Self {
            kp: 2.0,
            kd: 2.0 * 2f64.sqrt(),
            noise: 0.0,
            detour_prob: 0.0,
            detour_steps: 0,
            detour: None,
            t: 0,
        }
    }

    pub fn medium() -> Self {
        Self {
            noise: 0.5,
            detour_prob: 0.5,
            detour_steps: 24,
            ..Self::expert()
        }
    }
}

impl Demonstrator for PdController {
    fn begin(&mut self, _obs: &[f64], rng: &mut EnvRng) {
        self.t = 0;
        self.detour = (rng.random::<f64>() < self.detour_prob)
            .then(|| [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]);
    }

    fn act(&mut self, obs: &[f64], rng: &mut EnvRng) -> Action {
        let (pos, vel) = ([obs[0], obs[1]], [obs[2], obs[3]]);
        let goal = match self.detour {
            Some(d) if self.t < self.detour_steps => d,
            _ => [obs[0] + obs[4], obs[1] + obs[5]],
        };
        self.t += 1;
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).unwrap();
        Action::Continuous(
            (0..2)
                .map(|d| {
                    let a = self.kp * (goal[d] - pos[d]) - self.kd * vel[d];
                    let a = if self.noise > 0.0 {
                        a + normal.sample(rng)
                    } else {
                        a
                    };
                    a.clamp(-1.0, 1.0)
                })
                .collect(),
        )
    }
}

/// Linear feedback `a = -gain_scale * K_t * s + noise` with the optimal
/// finite-horizon gains `K_t`.
#[derive(Clone, Debug)]
pub struct LqrController {
    pub gains: Vec<f64>,
    pub gain_scale: f64,
    pub noise: f64,
}

impl LqrController {
    pub fn new(horizon: usize, gain_scale: f64, noise: f64) -> Self {
        Self {
            gains: lqr_gains(horizon, 1.0).1,
            gain_scale,
            noise,
        }
    }
}

impl Demonstrator for LqrController {
    fn begin(&mut self, _obs: &[f64], _rng: &mut EnvRng) {}

    fn act(&mut self, obs: &[f64], rng: &mut EnvRng) -> Action {
        let h = self.gains.len();
        let t = ((obs[1] * h as f64).round() as usize).min(h - 1);
        let mut a = -self.gain_scale * self.gains[t] * obs[0];
        if self.noise > 0.0 {
            a += Normal::new(0.0, self.noise).unwrap().sample(rng);
        }
        Action::Continuous(vec![a])
    }
}

/// Picks one of its members uniformly at the start of every episode.
pub struct MixtureDemonstrator {
    pub members: Vec<Box<dyn Demonstrator>>,
    active: usize,
}

impl MixtureDemonstrator {
    pub fn new(members: Vec<Box<dyn Demonstrator>>) -> Self {
        Self { members, active: 0 }
    }
}

impl Demonstrator for MixtureDemonstrator {
    fn begin(&mut self, obs: &[f64], rng: &mut EnvRng) {
        self.active = rng.random_range(0..self.members.len());
        self.members[self.active].begin(obs, rng);
    }

    fn act(&mut self, obs: &[f64], rng: &mut EnvRng) -> Action {
        self.members[self.active].act(obs, rng)
    }
}

/// Uniformly random actions (continuous components on `[-1, 1]`).
pub struct RandomPolicy {
    pub space: ActionSpace,
}

impl Demonstrator for RandomPolicy {
    fn begin(&mut self, _obs: &[f64], _rng: &mut EnvRng) {}

    fn act(&mut self, _obs: &[f64], rng: &mut EnvRng) -> Action {
        random_action(self.space, rng)
    }
}

pub fn random_action(space: ActionSpace, rng: &mut EnvRng) -> Action {
    match space {
        ActionSpace::Continuous { dim } => {
            Action::Continuous((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        }
        ActionSpace::Discrete { agents, actions } => {
            Action::Discrete((0..agents).map(|_| rng.random_range(0..actions)).collect())
        }
    }
}

/// The scripted demonstrator for an environment and quality level.
pub fn demonstrator(spec: &EnvSpec, quality: Quality) -> Box<dyn Demonstrator> {
    match (spec, quality) {
        (EnvSpec::PointMass { .. }, Quality::Expert) => Box::new(PdController::expert()),
        (EnvSpec::PointMass { .. }, Quality::Medium) => Box::new(PdController::medium()),
        (EnvSpec::PointMass { .. }, Quality::Mixture) => Box::new(MixtureDemonstrator::new(vec![
            Box::new(PdController::expert()),
            Box::new(PdController::medium()),
        ])),
        (&EnvSpec::Lqr { horizon }, Quality::Expert) => {
            Box::new(LqrController::new(horizon, 1.0, 0.0))
        }
        (&EnvSpec::Lqr { horizon }, Quality::Medium) => {
            Box::new(LqrController::new(horizon, 0.5, 0.1))
        }
        (&EnvSpec::Lqr { horizon }, Quality::Mixture) => Box::new(MixtureDemonstrator::new(vec![
            Box::new(LqrController::new(horizon, 1.0, 0.0)),
            Box::new(LqrController::new(horizon, 0.5, 0.1)),
        ])),
        (&EnvSpec::GridCoord { agents, cells, .. }, Quality::Expert) => Box::new(GridRouter::new(
            Routing::OrderPreserving,
            0.0,
            agents,
            cells,
        )),
        (&EnvSpec::GridCoord { agents, cells, .. }, Quality::Medium) => Box::new(GridRouter::new(
            Routing::OrderPreserving,
            0.3,
            agents,
            cells,
        )),
        (&EnvSpec::GridCoord { agents, cells, .. }, Quality::Mixture) => {
            Box::new(MixtureDemonstrator::new(vec![
                Box::new(GridRouter::new(
                    Routing::OrderPreserving,
                    0.05,
                    agents,
                    cells,
                )),
                Box::new(GridRouter::new(Routing::Cyclic, 0.1, agents, cells)),
            ]))
        }
    }
}

/// Run `episodes` episodes of `demo` and return per-episode returns and
/// success flags.
pub fn rollout_returns(
    spec: &EnvSpec,
    demo: &mut dyn Demonstrator,
    episodes: usize,
    rng: &mut EnvRng,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut env = spec.build()?;
    let mut returns = Vec::with_capacity(episodes);
    let mut successes = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (_, ret, success) = run_episode(env.as_mut(), demo, rng)?;
        returns.push(ret);
        successes.push(success);
    }
    Ok((returns, successes))
}

type Trajectory = Vec<(Vec<f64>, Action)>;

fn run_episode(
    env: &mut dyn Env,
    demo: &mut dyn Demonstrator,
    rng: &mut EnvRng,
) -> Result<(Trajectory, f64, bool)> {
    let mut obs = env.reset(rng);
    demo.begin(&obs, rng);
    let mut traj = Vec::new();
    let mut ret = 0.0;
    let mut success = false;
    loop {
        let a = demo.act(&obs, rng);
        let r = env.step(&a)?;
        traj.push((obs, a));
        ret += r.reward;
        success |= r.success;
        obs = r.observation;
        if r.done {
            return Ok((traj, ret, success));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: EnvSpec,
    pub quality: Quality,
    pub chunk: usize,
    pub obs_dim: usize,
    /// Width of one stored action chunk.
    pub action_dim: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Per-episode returns of the generating rollouts (not serialized).
    pub episode_returns: Vec<f64>,
    /// Per-episode success flags of the generating rollouts (not serialized).
    pub episode_successes: Vec<bool>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Roll out the scripted demonstrator for `episodes` episodes. Every step
/// yields one record pairing its observation with the next `chunk` actions
/// (the final action repeats past the end of the episode).
pub fn make_demonstrations(
    spec: &EnvSpec,
    quality: Quality,
    episodes: usize,
    chunk: usize,
    rng: &mut EnvRng,
) -> Result<Dataset> {
    if episodes == 0 || chunk == 0 {
        return Err(Error::invalid(
            "demonstrations need at least one episode and chunk >= 1",
        ));
    }
    let mut env = spec.build()?;
    let mut demo = demonstrator(spec, quality);
    let space = env.action_space();
    let mut ds = Dataset {
        env: spec.clone(),
        quality,
        chunk,
        obs_dim: env.obs_dim(),
        action_dim: chunk * space.action_len(),
        observations: Vec::new(),
        actions: Vec::new(),
        episode_returns: Vec::with_capacity(episodes),
        episode_successes: Vec::with_capacity(episodes),
    };
    for _ in 0..episodes {
        let (traj, ret, success) = run_episode(env.as_mut(), demo.as_mut(), rng)?;
        for t in 0..traj.len() {
            let mut a = Vec::with_capacity(ds.action_dim);
            for c in 0..chunk {
                match &traj[(t + c).min(traj.len() - 1)].1 {
                    Action::Continuous(v) => a.extend_from_slice(v),
                    Action::Discrete(v) => a.extend(v.iter().map(|&i| i as f64)),
                }
            }
            ds.observations.push(traj[t].0.clone());
            ds.actions.push(a);
        }
        ds.episode_returns.push(ret);
        ds.episode_successes.push(success);
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "env {}", ds.env)?;
    writeln!(out, "spec_hash {}", ds.env.hash())?;
    writeln!(out, "quality {}", ds.quality)?;
    writeln!(out, "chunk {}", ds.chunk)?;
    writeln!(out, "count {}", ds.len())?;
    writeln!(out, "obs_dim {}", ds.obs_dim)?;
    writeln!(out, "action_dim {}", ds.action_dim)?;
    writeln!(out, "data")?;
    for (o, a) in ds.observations.iter().zip(&ds.actions) {
        for v in o.iter().chain(a) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a dataset, checking the stored hash against its environment spec
/// and, when given, against `expected`.
pub fn load_dataset(path: &Path, expected: Option<&EnvSpec>) -> Result<Dataset> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    let mut fields = std::collections::BTreeMap::new();
    let mut first = true;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format(
                "demonstration header ends before `data`".into(),
            ));
        }
        let l = line.trim_end_matches('\n');
        if first {
            if l != MAGIC {
                return Err(Error::Format(format!(
                    "not a demonstration file (first line {l:?})"
                )));
            }
            first = false;
            continue;
        }
        if l == "data" {
            break;
        }
        let (k, v) = l
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("bad header line {l:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .ok_or_else(|| Error::Format(format!("missing header field {k}")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad {k}")))
    };
    let env: EnvSpec = get("env")?.parse()?;
    let hash = get("spec_hash")?;
    if *hash != env.hash() {
        return Err(Error::Format(format!(
            "spec hash {hash} does not match environment {env}"
        )));
    }
    if let Some(exp) = expected {
        if exp.hash() != *hash {
            return Err(Error::invalid(format!(
                "demonstrations were generated for `{env}` (hash {hash}), expected `{exp}` (hash {})",
                exp.hash()
            )));
        }
    }
    let (count, obs_dim, action_dim) = (int("count")?, int("obs_dim")?, int("action_dim")?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let width = obs_dim + action_dim;
    if bytes.len() != count * width * 8 {
        return Err(Error::Format(format!(
            "expected {count} records of {width} values, found {} bytes",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let (observations, actions) = values
        .chunks_exact(width.max(1))
        .take(count)
        .map(|r| (r[..obs_dim].to_vec(), r[obs_dim..].to_vec()))
        .unzip();
    Ok(Dataset {
        env,
        quality: get("quality")?.parse()?,
        chunk: int("chunk")?,
        obs_dim,
        action_dim,
        observations,
        actions,
        episode_returns: Vec::new(),
        episode_successes: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::RewardMode;
    use rand::SeedableRng;
    use std::collections::HashMap;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn expert_point_mass_reaches_goal() {
        let mut rng = EnvRng::seed_from_u64(1);
        for mode in [RewardMode::Dense, RewardMode::Sparse] {
            let ds = make_demonstrations(
                &EnvSpec::point_mass(mode),
                Quality::Expert,
                200,
                1,
                &mut rng,
            )
            .unwrap();
            let rate = ds.episode_successes.iter().filter(|&&s| s).count() as f64 / 200.0;
            assert!(rate >= 0.95, "{mode}: {rate}");
        }
    }

    #[test]
    fn medium_lies_between_random_and_expert() {
        for spec in [
            EnvSpec::point_mass(RewardMode::Dense),
            EnvSpec::lqr(),
            EnvSpec::grid_coord().with_horizon(8),
        ] {
            let mut rng = EnvRng::seed_from_u64(2);
            let space = spec.build().unwrap().action_space();
            let mut avg = |d: &mut dyn Demonstrator| {
                mean(&rollout_returns(&spec, d, 100, &mut rng).unwrap().0)
            };
            let random = avg(&mut RandomPolicy { space });
            let medium = avg(demonstrator(&spec, Quality::Medium).as_mut());
            let expert = avg(demonstrator(&spec, Quality::Expert).as_mut());
            assert!(
                random < medium && medium < expert,
                "{spec}: {random} {medium} {expert}"
            );
        }
    }

    #[test]
    fn grid_mixture_is_bimodal_at_shared_start() {
        let spec = EnvSpec::grid_coord().with_horizon(8);
        let mut rng = EnvRng::seed_from_u64(3);
        let ds = make_demonstrations(&spec, Quality::Mixture, 2000, 1, &mut rng).unwrap();
        let mut by_start: HashMap<Vec<u64>, Vec<Vec<u64>>> = HashMap::new();
        for (o, a) in ds.observations.iter().zip(&ds.actions) {
            if o[6] == 0.0 {
                let key = o.iter().map(|v| v.to_bits()).collect();
                by_start
                    .entry(key)
                    .or_default()
                    .push(a.iter().map(|v| v.to_bits()).collect());
            }
        }
        let (_, acts) = by_start
            .iter()
            .max_by_key(|(k, v)| (v.len(), (*k).clone()))
            .unwrap();
        let mut counts: HashMap<&Vec<u64>, usize> = HashMap::new();
        for a in acts {
            *counts.entry(a).or_default() += 1;
        }
        let mut freq: Vec<f64> = counts
            .values()
            .map(|&c| c as f64 / acts.len() as f64)
            .collect();
        freq.sort_by(|a, b| b.total_cmp(a));
        assert!(acts.len() >= 30);
        assert!(freq[0] >= 0.25 && freq[1] >= 0.25, "{freq:?}");
    }

    #[test]
    fn chunked_records_pad_with_last_action() {
        let mut rng = EnvRng::seed_from_u64(4);
        let spec = EnvSpec::lqr().with_horizon(3);
        let ds = make_demonstrations(&spec, Quality::Expert, 1, 2, &mut rng).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.action_dim, 2);
        assert_eq!(ds.actions[0][1], ds.actions[1][0]);
        assert_eq!(ds.actions[2][0], ds.actions[2][1]);
    }

    #[test]
    fn dataset_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.bin");
        let mut rng = EnvRng::seed_from_u64(5);
        let spec = EnvSpec::grid_coord();
        let mut ds = make_demonstrations(&spec, Quality::Mixture, 5, 2, &mut rng).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path, Some(&spec)).unwrap();
        ds.episode_returns.clear();
        ds.episode_successes.clear();
        assert_eq!(back, ds);
        assert!(load_dataset(&path, Some(&spec.clone().with_horizon(9))).is_err());

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(&path, None), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_quality_rejected() {
        assert!("legendary".parse::<Quality>().is_err());
        assert_eq!("mixture".parse::<Quality>().unwrap(), Quality::Mixture);
    }
}
