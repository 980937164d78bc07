//! TOML run configuration. Every section and field is optional; missing
//! values take the library defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ncdpo::diffusion::ScheduleKind;
use ncdpo::envs::{EnvSpec, Quality, RewardMode};
use ncdpo::nets::Activation;
use ncdpo::rl::{ActorConfig, Algo, PpoConfig, PretrainConfig, SelfImitationConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Minimum number of episodes in the final evaluation of a run.
pub const MIN_EVAL_EPISODES: usize = 50;

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub env: EnvSection,
    pub actor: ActorSection,
    pub critic: CriticSection,
    pub ppo: PpoSection,
    pub self_imitation: SelfImitationSection,
    pub train: TrainSection,
    pub pretrain: PretrainSection,
    pub demos: DemosSection,
    pub ablate: AblateSection,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    /// `point_mass`, `lqr` or `grid_coord`.
    pub kind: String,
    /// PointMass only: `dense` or `sparse`.
    pub reward: String,
    /// Defaults per kind when absent.
    pub horizon: Option<usize>,
    pub dt: f64,
    pub accel_limit: f64,
    pub agents: usize,
    pub cells: usize,
    /// Environment actions per policy decision.
    pub chunk: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            kind: "point_mass".into(),
            reward: "dense".into(),
            horizon: None,
            dt: 0.1,
            accel_limit: 1.0,
            agents: 3,
            cells: 5,
            chunk: 1,
        }
    }
}

impl EnvSection {
    pub fn spec(&self) -> Result<EnvSpec> {
        let spec = match self.kind.as_str() {
            "point_mass" => {
                let reward: RewardMode = self.reward.parse()?;
                let horizon = EnvSpec::point_mass(reward).horizon();
                EnvSpec::PointMass {
                    reward,
                    horizon,
                    dt: self.dt,
                    accel_limit: self.accel_limit,
                }
            }
            "lqr" => EnvSpec::lqr(),
            "grid_coord" => EnvSpec::GridCoord {
                agents: self.agents,
                cells: self.cells,
                horizon: 32,
            },
            other => bail!("env.kind: unknown environment {other:?}"),
        };
        let spec = match self.horizon {
            Some(h) => spec.with_horizon(h),
            None => spec,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActorSection {
    pub hidden_width: usize,
    pub num_layers: usize,
    pub residual: bool,
    /// `mish` or `tanh`.
    pub activation: String,
    pub steps: usize,
    /// `linear`, `cosine` or `constant`.
    pub schedule: String,
    /// Linear endpoints; absent means the 1000-step default rescaled to `steps`.
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub cosine_s: f64,
    pub constant_beta: f64,
    pub eta: f64,
    pub beta_base: f64,
    /// Clamp on the clean-action estimate; zero disables it.
    pub x0_clip: f64,
    pub init_log_sigma: f64,
    pub inv_temperature: f64,
}

impl Default for ActorSection {
    fn default() -> Self {
        let d = ActorConfig::default();
        Self {
            hidden_width: d.hidden_width,
            num_layers: d.num_layers,
            residual: d.residual,
            activation: d.activation.name().into(),
            steps: d.steps,
            schedule: "linear".into(),
            beta_min: None,
            beta_max: None,
            cosine_s: 0.008,
            constant_beta: 0.1,
            eta: d.eta,
            beta_base: d.beta_base,
            x0_clip: d.x0_clip.unwrap_or(0.0),
            init_log_sigma: d.init_log_sigma,
            inv_temperature: d.inv_temperature,
        }
    }
}

impl ActorSection {
    pub fn actor_config(&self) -> Result<ActorConfig> {
        let schedule = match self.schedule.as_str() {
            "linear" => match (self.beta_min, self.beta_max) {
                (None, None) => None,
                (Some(beta_min), Some(beta_max)) => {
                    Some(ScheduleKind::Linear { beta_min, beta_max })
                }
                _ => bail!("actor: beta_min and beta_max must be given together"),
            },
            "cosine" => Some(ScheduleKind::Cosine { s: self.cosine_s }),
            "constant" => Some(ScheduleKind::Constant {
                beta: self.constant_beta,
            }),
            other => bail!("actor.schedule: unknown schedule {other:?}"),
        };
        if self.x0_clip < 0.0 {
            bail!("actor.x0_clip must be non-negative");
        }
        Ok(ActorConfig {
            hidden_width: self.hidden_width,
            num_layers: self.num_layers,
            residual: self.residual,
            activation: Activation::parse(&self.activation)?,
            steps: self.steps,
            schedule,
            eta: self.eta,
            beta_base: self.beta_base,
            x0_clip: (self.x0_clip > 0.0).then_some(self.x0_clip),
            init_log_sigma: self.init_log_sigma,
            inv_temperature: self.inv_temperature,
        })
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticSection {
    pub hidden_width: usize,
    pub num_layers: usize,
}

impl Default for CriticSection {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            num_layers: 3,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoSection {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    pub minibatch_count: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub critic_weight_decay: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoSection {
    fn default() -> Self {
        let d = PpoConfig::default();
        Self {
            gamma: d.gamma,
            lambda: d.lambda,
            clip_eps: d.clip_eps,
            ppo_epochs: d.ppo_epochs,
            minibatch_count: d.minibatch_count,
            actor_lr: d.actor_lr,
            critic_lr: d.critic_lr,
            critic_weight_decay: d.critic_weight_decay,
            value_coef: d.value_coef,
            entropy_coef: d.entropy_coef,
            max_grad_norm: d.max_grad_norm,
        }
    }
}

impl From<&PpoSection> for PpoConfig {
    fn from(s: &PpoSection) -> Self {
        PpoConfig {
            gamma: s.gamma,
            lambda: s.lambda,
            clip_eps: s.clip_eps,
            ppo_epochs: s.ppo_epochs,
            minibatch_count: s.minibatch_count,
            actor_lr: s.actor_lr,
            critic_lr: s.critic_lr,
            critic_weight_decay: s.critic_weight_decay,
            value_coef: s.value_coef,
            entropy_coef: s.entropy_coef,
            max_grad_norm: s.max_grad_norm,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfImitationSection {
    pub clone_epochs: usize,
    pub clone_lr: f64,
}

impl Default for SelfImitationSection {
    fn default() -> Self {
        let d = SelfImitationConfig::default();
        Self {
            clone_epochs: d.clone_epochs,
            clone_lr: d.clone_lr,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// `ncdpo`, `mlp_ppo` or `dppo`.
    pub algo: String,
    pub num_envs: usize,
    pub steps_per_env: usize,
    pub iterations: usize,
    /// Save a numbered checkpoint every this many iterations; zero keeps
    /// only the final one.
    pub checkpoint_every: usize,
    pub eval_episodes: usize,
    pub dppo_min_std: f64,
    pub record_wall_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::new(Algo::Ncdpo, EnvSpec::lqr());
        Self {
            algo: d.algo.name().into(),
            num_envs: d.num_envs,
            steps_per_env: d.steps_per_env,
            iterations: d.iterations,
            checkpoint_every: 10,
            eval_episodes: MIN_EVAL_EPISODES,
            dppo_min_std: d.dppo_min_std,
            record_wall_time: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Demonstration file; relative paths resolve against the config file.
    pub demos: Option<PathBuf>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub max_grad_norm: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            demos: None,
            max_epochs: d.max_epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            patience: d.patience,
            min_delta: d.min_delta,
            max_grad_norm: d.max_grad_norm,
        }
    }
}

impl From<&PretrainSection> for PretrainConfig {
    fn from(s: &PretrainSection) -> Self {
        PretrainConfig {
            max_epochs: s.max_epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            patience: s.patience,
            min_delta: s.min_delta,
            max_grad_norm: s.max_grad_norm,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemosSection {
    /// `expert`, `medium` or `mixture`.
    pub quality: String,
    pub episodes: usize,
}

impl Default for DemosSection {
    fn default() -> Self {
        Self {
            quality: "expert".into(),
            episodes: 100,
        }
    }
}

impl DemosSection {
    pub fn quality(&self) -> Result<Quality> {
        Ok(self.quality.parse()?)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub k_list: Vec<usize>,
    /// Empty means the run seed only.
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            k_list: vec![5, 10, 20],
            seeds: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Parse a config file. Relative demonstration paths are made relative
    /// to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        if let Some(d) = &cfg.pretrain.demos {
            if d.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.pretrain.demos = Some(base.join(d));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn algo(&self) -> Result<Algo> {
        self.train.algo.parse().with_context(|| "train.algo")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let env = self.env.spec()?;
        let mut c = TrainConfig::new(self.algo()?, env);
        c.chunk = self.env.chunk;
        c.num_envs = self.train.num_envs;
        c.steps_per_env = self.train.steps_per_env;
        c.iterations = self.train.iterations;
        c.actor = self.actor.actor_config()?;
        c.critic_width = self.critic.hidden_width;
        c.critic_layers = self.critic.num_layers;
        c.ppo = (&self.ppo).into();
        c.self_imitation = SelfImitationConfig {
            clone_epochs: self.self_imitation.clone_epochs,
            clone_lr: self.self_imitation.clone_lr,
        };
        c.dppo_min_std = self.train.dppo_min_std;
        c.record_wall_time = self.train.record_wall_time;
        c.validate()?;
        if self.train.eval_episodes < MIN_EVAL_EPISODES {
            bail!("train.eval_episodes must be at least {MIN_EVAL_EPISODES}");
        }
        Ok(c)
    }
}
