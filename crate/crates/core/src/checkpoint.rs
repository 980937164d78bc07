//! Checkpoint directories: `manifest.txt` holds `key = value` lines
//! describing every network, schedule, head and optimizer, and
//! `params.bin` holds the listed blocks as one little-endian `f64` array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nets::{Activation, CriticNet, DenoisingNet, Mlp, MlpSpec};
use crate::policy::{GaussianHead, Head, SoftmaxHead};
use crate::rl::{Actor, ActorNet, Adam, Algo, TrainConfig, Trainer};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        let mut c = Self::default();
        c.set("format_version", FORMAT_VERSION);
        c
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.manifest.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks '{key}'")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key)?;
        v.parse()
            .map_err(|e| Error::Format(format!("manifest '{key} = {v}': {e}")))
    }

    pub fn block(&self, name: &str) -> Result<&Tensor> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks block '{name}'")))
    }

    fn push_blocks<'a>(&mut self, prefix: &str, tensors: impl IntoIterator<Item = &'a Tensor>) {
        for (i, t) in tensors.into_iter().enumerate() {
            self.blocks.push((format!("{prefix}.{i}"), t.clone()));
        }
    }

    fn take_blocks(&self, prefix: &str, count: usize) -> Result<Vec<Tensor>> {
        (0..count)
            .map(|i| self.block(&format!("{prefix}.{i}")).cloned())
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = String::new();
        for (k, v) in &self.manifest {
            text.push_str(&format!("{k} = {v}\n"));
        }
        text.push_str(&format!("blocks = {}\n", self.blocks.len()));
        let mut bytes = Vec::new();
        for (i, (name, t)) in self.blocks.iter().enumerate() {
            text.push_str(&format!("block.{i} = {name} {} {}\n", t.rows(), t.cols()));
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(MANIFEST_FILE), text)?;
        fs::write(dir.join(PARAMS_FILE), bytes)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let mut manifest = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| {
                Error::Format(format!("manifest line {}: expected 'key = value'", n + 1))
            })?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let mut c = Self {
            manifest,
            blocks: Vec::new(),
        };
        let version: u32 = c.parse("format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count: usize = c.parse("blocks")?;
        let bytes = fs::read(dir.join(PARAMS_FILE))?;
        let mut offset = 0;
        for i in 0..count {
            let desc = c.get(&format!("block.{i}"))?.to_string();
            let parts: Vec<&str> = desc.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(Error::Format(format!(
                    "block.{i} = {desc}: expected 'name rows cols'"
                )));
            };
            let dims: Vec<usize> = [rows, cols]
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Format(format!("block.{i}: bad size '{s}'")))
                })
                .collect::<Result<_>>()?;
            let n = dims[0] * dims[1];
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(Error::Format(format!(
                    "{PARAMS_FILE} truncated in block '{name}'"
                )));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            offset = end;
            c.blocks
                .push((name.to_string(), Tensor::matrix(dims[0], dims[1], data)));
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!(
                "{PARAMS_FILE} has {} trailing bytes",
                bytes.len() - offset
            )));
        }
        for i in 0..count {
            c.manifest.remove(&format!("block.{i}"));
        }
        c.manifest.remove("blocks");
        Ok(c)
    }
}

fn put_mlp(c: &mut Checkpoint, prefix: &str, mlp: &Mlp) {
    let s = &mlp.spec;
    c.set(&format!("{prefix}.input_dim"), s.input_dim);
    c.set(&format!("{prefix}.hidden_width"), s.hidden_width);
    c.set(&format!("{prefix}.num_layers"), s.num_layers);
    c.set(&format!("{prefix}.residual"), s.residual);
    c.set(&format!("{prefix}.output_dim"), s.output_dim);
    c.set(&format!("{prefix}.activation"), s.activation.name());
    c.push_blocks(&format!("{prefix}.param"), &mlp.params);
}

fn get_mlp(c: &Checkpoint, prefix: &str) -> Result<Mlp> {
    let spec = MlpSpec::new(
        c.parse(&format!("{prefix}.input_dim"))?,
        c.parse(&format!("{prefix}.hidden_width"))?,
        c.parse(&format!("{prefix}.num_layers"))?,
        c.parse(&format!("{prefix}.output_dim"))?,
    )
    .with_residual(c.parse(&format!("{prefix}.residual"))?)
    .with_activation(Activation::parse(c.get(&format!("{prefix}.activation"))?)?);
    let n = spec.param_shapes().len();
    Mlp::from_params(spec, c.take_blocks(&format!("{prefix}.param"), n)?)
}

fn put_schedule(c: &mut Checkpoint, s: &NoiseSchedule) {
    c.set("schedule.k", s.steps());
    c.set("schedule.kind", s.kind.name());
    match s.kind {
        ScheduleKind::Linear { beta_min, beta_max } => {
            c.set("schedule.beta_min", beta_min);
            c.set("schedule.beta_max", beta_max);
        }
        ScheduleKind::Cosine { s } => c.set("schedule.s", s),
        ScheduleKind::Constant { beta } => c.set("schedule.beta", beta),
    }
    c.set("schedule.eta", s.eta);
    c.set("schedule.beta_base", s.beta_base);
}

fn get_schedule(c: &Checkpoint) -> Result<NoiseSchedule> {
    let kind = match c.get("schedule.kind")? {
        "linear" => ScheduleKind::Linear {
            beta_min: c.parse("schedule.beta_min")?,
            beta_max: c.parse("schedule.beta_max")?,
        },
        "cosine" => ScheduleKind::Cosine {
            s: c.parse("schedule.s")?,
        },
        "constant" => ScheduleKind::Constant {
            beta: c.parse("schedule.beta")?,
        },
        other => return Err(Error::Format(format!("unknown schedule kind '{other}'"))),
    };
    make_schedule(c.parse("schedule.k")?, kind)?
        .apply_eta_with_base(c.parse("schedule.eta")?, c.parse("schedule.beta_base")?)
}

pub fn put_actor(c: &mut Checkpoint, actor: &Actor) {
    c.set("actor.obs_dim", actor.obs_dim);
    match &actor.net {
        ActorNet::Diffusion { net, schedule } => {
            c.set("actor.kind", "diffusion");
            c.set(
                "actor.x0_clip",
                net.x0_clip.map_or("none".to_string(), |v| v.to_string()),
            );
            put_schedule(c, schedule);
            put_mlp(c, "actor", &net.mlp);
        }
        ActorNet::Mlp(m) => {
            c.set("actor.kind", "mlp");
            put_mlp(c, "actor", m);
        }
    }
    match &actor.head {
        Head::Gaussian(g) => {
            c.set("head.kind", "gaussian");
            c.set("head.dim", g.dim());
            c.blocks
                .push(("head.log_sigma".into(), g.log_sigma.clone()));
        }
        Head::Softmax(s) => {
            c.set("head.kind", "softmax");
            c.set("head.agents", s.num_agents);
            c.set("head.actions", s.num_actions);
            c.set("head.inv_temperature", s.inv_temperature);
        }
    }
}

pub fn get_actor(c: &Checkpoint) -> Result<Actor> {
    let obs_dim: usize = c.parse("actor.obs_dim")?;
    let mlp = get_mlp(c, "actor")?;
    let net = match c.get("actor.kind")? {
        "diffusion" => {
            let clip = match c.get("actor.x0_clip")? {
                "none" => None,
                _ => Some(c.parse("actor.x0_clip")?),
            };
            ActorNet::Diffusion {
                net: DenoisingNet::from_mlp(mlp, obs_dim)?.with_x0_clip(clip),
                schedule: get_schedule(c)?,
            }
        }
        "mlp" => ActorNet::Mlp(mlp),
        other => return Err(Error::Format(format!("unknown actor kind '{other}'"))),
    };
    let head = match c.get("head.kind")? {
        "gaussian" => {
            let mut g = GaussianHead::new(c.parse("head.dim")?, 0.0);
            let ls = c.block("head.log_sigma")?;
            if ls.shape() != g.log_sigma.shape() {
                return Err(Error::Format(format!(
                    "head.log_sigma has shape {:?}",
                    ls.shape()
                )));
            }
            g.log_sigma = ls.clone();
            Head::Gaussian(g)
        }
        "softmax" => Head::Softmax(SoftmaxHead::new(
            c.parse("head.agents")?,
            c.parse("head.actions")?,
            c.parse("head.inv_temperature")?,
        )?),
        other => return Err(Error::Format(format!("unknown head kind '{other}'"))),
    };
    Actor::new(net, head, obs_dim)
}

fn put_opt(c: &mut Checkpoint, name: &str, opt: &Adam) {
    let p = format!("opt.{name}");
    c.set(&format!("{p}.lr"), opt.lr);
    c.set(&format!("{p}.beta1"), opt.beta1);
    c.set(&format!("{p}.beta2"), opt.beta2);
    c.set(&format!("{p}.eps"), opt.eps);
    c.set(&format!("{p}.weight_decay"), opt.weight_decay);
    c.set(&format!("{p}.t"), opt.t);
    c.set(&format!("{p}.slots"), opt.m.len());
    c.push_blocks(&format!("{p}.m"), &opt.m);
    c.push_blocks(&format!("{p}.v"), &opt.v);
}

fn get_opt(c: &Checkpoint, name: &str) -> Result<Adam> {
    let p = format!("opt.{name}");
    let slots: usize = c.parse(&format!("{p}.slots"))?;
    Ok(Adam {
        lr: c.parse(&format!("{p}.lr"))?,
        beta1: c.parse(&format!("{p}.beta1"))?,
        beta2: c.parse(&format!("{p}.beta2"))?,
        eps: c.parse(&format!("{p}.eps"))?,
        weight_decay: c.parse(&format!("{p}.weight_decay"))?,
        t: c.parse(&format!("{p}.t"))?,
        m: c.take_blocks(&format!("{p}.m"), slots)?,
        v: c.take_blocks(&format!("{p}.v"), slots)?,
    })
}

/// A standalone policy checkpoint (e.g. after pretraining).
pub fn save_actor(dir: &Path, actor: &Actor, env: &EnvSpec, chunk: usize, seed: u64) -> Result<()> {
    let mut c = Checkpoint::new();
    c.set("env", env);
    c.set("chunk", chunk);
    c.set("seed", seed);
    put_actor(&mut c, actor);
    c.write(dir)
}

/// Actor, environment and chunk size stored in any checkpoint.
pub fn load_actor(dir: &Path) -> Result<(Actor, EnvSpec, usize)> {
    let c = Checkpoint::read(dir)?;
    Ok((get_actor(&c)?, c.parse("env")?, c.parse("chunk")?))
}

pub fn save_trainer(dir: &Path, t: &Trainer) -> Result<()> {
    let mut c = Checkpoint::new();
    c.set("algo", t.config.algo);
    c.set("env", &t.config.env);
    c.set("chunk", t.config.chunk);
    c.set("seed", t.seed);
    c.set("iteration", t.iteration);
    c.set("env_steps", t.env_steps);
    c.set("dppo_min_std", t.config.dppo_min_std);
    put_actor(&mut c, &t.actor);
    put_mlp(&mut c, "critic", &t.critic.mlp);
    put_opt(&mut c, "actor", &t.actor_opt);
    put_opt(&mut c, "critic", &t.critic_opt);
    put_opt(&mut c, "clone", &t.clone_opt);
    c.write(dir)
}

/// Restore a trainer saved by [`save_trainer`] under `config`, which must
/// name the same algorithm, environment and chunk size.
pub fn load_trainer(dir: &Path, config: TrainConfig) -> Result<Trainer> {
    let c = Checkpoint::read(dir)?;
    let algo: Algo = c.parse("algo")?;
    let env: EnvSpec = c.parse("env")?;
    let chunk: usize = c.parse("chunk")?;
    if algo != config.algo || env != config.env || chunk != config.chunk {
        return Err(Error::invalid(format!(
            "checkpoint is {algo} on '{env}' with chunk {chunk}; config asks for {} on '{}' with chunk {}",
            config.algo, config.env, config.chunk
        )));
    }
    config.validate()?;
    Ok(Trainer {
        seed: c.parse("seed")?,
        actor: get_actor(&c)?,
        critic: CriticNet {
            mlp: get_mlp(&c, "critic")?,
        },
        actor_opt: get_opt(&c, "actor")?,
        critic_opt: get_opt(&c, "critic")?,
        clone_opt: get_opt(&c, "clone")?,
        iteration: c.parse("iteration")?,
        env_steps: c.parse("env_steps")?,
        config,
    })
}
