use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::actor::{Actor, ActorNet};
use super::derive_seed;
use super::dppo::{DppoAgent, DEFAULT_MIN_STD};
use super::optim::Adam;
use super::ppo::{bc_probe, ppo_update, self_imitation_update, PpoConfig, SelfImitationConfig};
use super::rollout::{collect_rollout, evaluate, EvalResult, VecEnv};
use crate::autodiff::{Tape, Tensor};
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind, DEFAULT_BETA_BASE};
use crate::envs::{ActionSpace, EnvSpec};
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::nets::{Activation, CriticNet, DenoisingNet, Mlp, MlpSpec, TIMESTEP_EMBED_DIM};
use crate::policy::{Action, GaussianHead, Head, SoftmaxHead, DEFAULT_INV_TEMPERATURE};

const STREAM_ENV: u64 = 1;
const STREAM_POLICY: u64 = 2;
const STREAM_PROBE: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    Ncdpo,
    MlpPpo,
    Dppo,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Ncdpo => "ncdpo",
            Algo::MlpPpo => "mlp_ppo",
            Algo::Dppo => "dppo",
        }
    }

    pub fn is_diffusion(self) -> bool {
        self != Algo::MlpPpo
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncdpo" => Ok(Algo::Ncdpo),
            "mlp_ppo" | "mlp-ppo" => Ok(Algo::MlpPpo),
            "dppo" => Ok(Algo::Dppo),
            _ => Err(Error::invalid(format!(
                "unknown algorithm '{s}' (expected ncdpo, mlp_ppo or dppo)"
            ))),
        }
    }
}

/// Actor architecture and head settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorConfig {
    pub hidden_width: usize,
    pub num_layers: usize,
    pub residual: bool,
    pub activation: Activation,
    /// Denoising steps `K` (ignored by MLP actors).
    pub steps: usize,
    /// `None` selects the default linear schedule rescaled to `steps`.
    pub schedule: Option<ScheduleKind>,
    pub eta: f64,
    pub beta_base: f64,
    pub x0_clip: Option<f64>,
    pub init_log_sigma: f64,
    pub inv_temperature: f64,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            num_layers: 3,
            residual: false,
            activation: Activation::Mish,
            steps: 5,
            schedule: None,
            eta: 1.0,
            beta_base: DEFAULT_BETA_BASE,
            x0_clip: Some(1.0),
            init_log_sigma: -0.8,
            inv_temperature: DEFAULT_INV_TEMPERATURE,
        }
    }
}

impl ActorConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let kind = self
            .schedule
            .unwrap_or_else(|| ScheduleKind::default_linear(self.steps));
        make_schedule(self.steps, kind)?.apply_eta_with_base(self.eta, self.beta_base)
    }

    /// Freshly initialized actor for `env` with `chunk` actions per decision.
    pub fn build(&self, diffusion: bool, env: &EnvSpec, chunk: usize, seed: u64) -> Result<Actor> {
        if chunk == 0 {
            return Err(Error::invalid("chunk must be at least 1"));
        }
        let probe = env.build()?;
        let obs_dim = probe.obs_dim();
        let head = match probe.action_space() {
            ActionSpace::Continuous { dim } => {
                Head::Gaussian(GaussianHead::new(dim * chunk, self.init_log_sigma))
            }
            ActionSpace::Discrete { agents, actions } => Head::Softmax(SoftmaxHead::new(
                agents * chunk,
                actions,
                self.inv_temperature,
            )?),
        };
        let out = head.input_dim();
        let net = if diffusion {
            let spec = DenoisingNet::spec_for(
                out,
                obs_dim,
                self.hidden_width,
                self.num_layers,
                self.residual,
            )
            .with_activation(self.activation);
            let net = DenoisingNet::from_mlp(Mlp::init(spec, seed, 0.01)?, obs_dim)?
                .with_x0_clip(self.x0_clip);
            ActorNet::Diffusion {
                net,
                schedule: self.schedule()?,
            }
        } else {
            let spec = MlpSpec::new(obs_dim, self.hidden_width, self.num_layers, out)
                .with_residual(self.residual)
                .with_activation(self.activation);
            ActorNet::Mlp(Mlp::init(spec, seed, 0.01)?)
        };
        Actor::new(net, head, obs_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algo: Algo,
    pub env: EnvSpec,
    pub chunk: usize,
    pub num_envs: usize,
    /// Policy decisions per environment per iteration.
    pub steps_per_env: usize,
    pub iterations: usize,
    pub actor: ActorConfig,
    pub critic_width: usize,
    pub critic_layers: usize,
    pub ppo: PpoConfig,
    pub self_imitation: SelfImitationConfig,
    pub dppo_min_std: f64,
    /// Fill `wall_time_s`; off keeps metric files reproducible.
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(algo: Algo, env: EnvSpec) -> Self {
        Self {
            algo,
            env,
            chunk: 1,
            num_envs: 32,
            steps_per_env: 64,
            iterations: 100,
            actor: ActorConfig::default(),
            critic_width: 256,
            critic_layers: 3,
            ppo: PpoConfig::default(),
            self_imitation: SelfImitationConfig::default(),
            dppo_min_std: DEFAULT_MIN_STD,
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        if self.chunk == 0 || self.num_envs == 0 || self.steps_per_env == 0 {
            return Err(Error::invalid(
                "chunk, num_envs and steps_per_env must be positive",
            ));
        }
        if self.algo.is_diffusion() && self.actor.steps == 0 {
            return Err(Error::invalid(
                "diffusion actors need at least one denoising step",
            ));
        }
        if self.algo == Algo::Dppo
            && !matches!(
                self.env.build()?.action_space(),
                ActionSpace::Continuous { .. }
            )
        {
            return Err(Error::invalid(
                "the two-level baseline supports continuous actions only",
            ));
        }
        if !(self.dppo_min_std >= 0.0) {
            return Err(Error::invalid("dppo_min_std must be non-negative"));
        }
        Ok(())
    }

    /// Environment steps consumed by one iteration (upper bound with chunks
    /// cut short by episode ends).
    pub fn steps_per_iteration(&self) -> usize {
        self.num_envs * self.steps_per_env * self.chunk
    }
}

/// Complete training state: resuming from it continues exactly as an
/// uninterrupted run, since every iteration reseeds from
/// `(seed, iteration)`.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub seed: u64,
    pub actor: Actor,
    pub critic: CriticNet,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub clone_opt: Adam,
    pub iteration: usize,
    pub env_steps: usize,
}

impl Trainer {
    /// Random initialization of actor and critic from `seed`.
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let diffusion = config.algo.is_diffusion();
        let actor = config.actor.build(
            diffusion,
            &config.env,
            config.chunk,
            derive_seed(seed, &[0, 1]),
        )?;
        Self::with_actor(config, seed, actor)
    }

    /// Start from a given (e.g. pretrained) actor with a fresh critic.
    pub fn with_actor(config: TrainConfig, seed: u64, actor: Actor) -> Result<Self> {
        config.validate()?;
        if actor.is_diffusion() != config.algo.is_diffusion() {
            return Err(Error::invalid(format!(
                "actor type does not match algorithm {}",
                config.algo
            )));
        }
        let critic_in = match config.algo {
            Algo::Dppo => actor.obs_dim + TIMESTEP_EMBED_DIM + actor.out_dim(),
            _ => actor.obs_dim,
        };
        let critic = CriticNet::new(
            critic_in,
            config.critic_width,
            config.critic_layers,
            derive_seed(seed, &[0, 2]),
        )?;
        Ok(Self {
            actor_opt: Adam::new(config.ppo.actor_lr),
            critic_opt: Adam::adamw(config.ppo.critic_lr, config.ppo.critic_weight_decay),
            clone_opt: Adam::new(config.self_imitation.clone_lr),
            config,
            seed,
            actor,
            critic,
            iteration: 0,
            env_steps: 0,
        })
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// One collect, advantage, update (and self-imitation) cycle. On a
    /// non-finite loss the state is rolled back and the error returned.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let snapshot = self.clone();
        let out = self.step_inner();
        if out.is_err() {
            *self = snapshot;
        }
        out
    }

    fn step_inner(&mut self) -> Result<MetricsRow> {
        let start = Instant::now();
        let it = self.iteration as u64;
        let cfg = &self.config;
        let mut venv = VecEnv::new(
            &cfg.env,
            cfg.num_envs,
            cfg.chunk,
            derive_seed(self.seed, &[it, STREAM_ENV]),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[it, STREAM_POLICY]));
        let probe_seed = derive_seed(self.seed, &[it, STREAM_PROBE]);
        let (stats, mean_return, success_rate, steps, bc_loss) = match cfg.algo {
            Algo::Ncdpo | Algo::MlpPpo => {
                let mut buf = collect_rollout(
                    &self.actor,
                    &self.critic,
                    &mut venv,
                    cfg.steps_per_env,
                    &mut rng,
                )?;
                buf.compute_advantages(cfg.ppo.gamma, cfg.ppo.lambda)?;
                let stats = ppo_update(
                    &mut self.actor,
                    &mut self.critic,
                    &mut self.actor_opt,
                    &mut self.critic_opt,
                    &buf,
                    &cfg.ppo,
                    &mut rng,
                )?;
                let bc = bc_probe(&self.actor, &buf, probe_seed)?;
                self_imitation_update(
                    &mut self.actor,
                    &mut self.clone_opt,
                    &buf,
                    &cfg.self_imitation,
                    cfg.ppo.minibatch_count,
                    cfg.ppo.max_grad_norm,
                    &mut rng,
                )?;
                (
                    stats,
                    buf.mean_episode_return(),
                    buf.success_rate(),
                    buf.env_steps,
                    bc,
                )
            }
            Algo::Dppo => {
                let mut agent = DppoAgent {
                    actor: self.actor.clone(),
                    critic: self.critic.clone(),
                    min_std: cfg.dppo_min_std,
                };
                let mut buf = agent.collect(&mut venv, cfg.steps_per_env, &mut rng)?;
                buf.compute_advantages(cfg.ppo.gamma, cfg.ppo.lambda)?;
                let stats = agent.update(
                    &mut self.actor_opt,
                    &mut self.critic_opt,
                    &buf,
                    &cfg.ppo,
                    &mut rng,
                )?;
                let (obs, actions) = buf.executed();
                let bc = bc_probe_pairs(&agent.actor, &obs, &actions, probe_seed)?;
                self.actor = agent.actor;
                self.critic = agent.critic;
                (
                    stats,
                    buf.mean_episode_return(),
                    buf.success_rate(),
                    buf.env_steps,
                    bc,
                )
            }
        };
        for (name, v) in [
            ("actor loss", stats.actor_loss),
            ("value loss", stats.value_loss),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} {v} at iteration {it}")));
            }
        }
        self.env_steps += steps;
        let row = MetricsRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_return,
            success_rate,
            actor_loss: stats.actor_loss,
            value_loss: stats.value_loss,
            bc_loss,
            mean_ratio: stats.mean_ratio,
            clip_fraction: stats.clip_fraction,
            entropy: stats.entropy,
            wall_time_s: if self.config.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.iteration += 1;
        Ok(row)
    }

    /// Run the remaining iterations, calling `on_row` after each.
    pub fn run(
        &mut self,
        mut on_row: impl FnMut(&Trainer, &MetricsRow) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while !self.finished() {
            let row = self.step()?;
            on_row(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Deterministic-action evaluation of the current actor.
    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<EvalResult> {
        evaluate(
            &self.actor,
            &self.config.env,
            self.config.chunk,
            episodes,
            seed,
            true,
        )
    }
}

/// Behavior-cloning loss on `(state, action)` pairs with a fixed noise draw.
pub fn bc_probe_pairs(
    actor: &Actor,
    obs: &[Vec<f64>],
    actions: &[Action],
    seed: u64,
) -> Result<f64> {
    if obs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars = actor.bind(&mut tape);
    let loss = actor.bc_loss(
        &mut tape,
        &vars,
        &Tensor::from_rows(obs)?,
        actions,
        &mut rng,
    )?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::RewardMode;

    fn small(algo: Algo, env: EnvSpec) -> TrainConfig {
        let mut c = TrainConfig::new(algo, env);
        c.num_envs = 4;
        c.steps_per_env = 8;
        c.iterations = 3;
        c.actor.hidden_width = 16;
        c.actor.num_layers = 2;
        c.actor.steps = 3;
        c.critic_width = 16;
        c.critic_layers = 2;
        c.ppo.ppo_epochs = 2;
        c.self_imitation = SelfImitationConfig {
            clone_epochs: 1,
            clone_lr: 1e-4,
        };
        c
    }

    fn pm() -> EnvSpec {
        EnvSpec::point_mass(RewardMode::Dense).with_horizon(8)
    }

    #[test]
    fn every_algorithm_runs_and_is_deterministic() {
        for (algo, env) in [
            (Algo::Ncdpo, pm()),
            (Algo::MlpPpo, pm()),
            (Algo::Dppo, pm()),
            (Algo::Ncdpo, EnvSpec::grid_coord().with_horizon(8)),
            (Algo::MlpPpo, EnvSpec::lqr()),
        ] {
            let run = || {
                Trainer::new(small(algo, env.clone()), 7)
                    .unwrap()
                    .run(|_, _| Ok(()))
                    .unwrap()
            };
            let a = run();
            assert_eq!(a.len(), 3);
            assert_eq!(a[2].env_steps, 3 * 4 * 8);
            let fmt = |rows: &[MetricsRow]| {
                rows.iter()
                    .map(|r| r.to_record().join(","))
                    .collect::<Vec<_>>()
            };
            assert_eq!(fmt(&a), fmt(&run()), "{algo}");
        }
    }

    #[test]
    fn split_run_matches_uninterrupted_run() {
        let cfg = small(Algo::Ncdpo, pm());
        let full = Trainer::new(cfg.clone(), 3)
            .unwrap()
            .run(|_, _| Ok(()))
            .unwrap();
        let mut t = Trainer::new(cfg, 3).unwrap();
        let mut rows = vec![t.step().unwrap()];
        let mut resumed = t.clone();
        rows.extend(resumed.run(|_, _| Ok(())).unwrap());
        assert_eq!(rows, full);
    }

    #[test]
    fn chunked_actions_count_sub_steps() {
        let mut cfg = small(Algo::Ncdpo, pm());
        cfg.chunk = 4;
        cfg.iterations = 1;
        let rows = Trainer::new(cfg, 1).unwrap().run(|_, _| Ok(())).unwrap();
        // Horizon 8 in chunks of 4: 8 decisions per env span 4 episodes.
        assert_eq!(rows[0].env_steps, 4 * 8 * 4);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small(Algo::Dppo, EnvSpec::grid_coord());
        assert!(Trainer::new(cfg.clone(), 0).is_err());
        cfg.algo = Algo::Ncdpo;
        cfg.ppo.clip_eps = 1.5;
        assert!(Trainer::new(cfg, 0).is_err());
        assert!("sac".parse::<Algo>().is_err());
        assert_eq!("mlp_ppo".parse::<Algo>().unwrap(), Algo::MlpPpo);
    }

    #[test]
    fn zero_iterations_is_evaluation_only() {
        let mut cfg = small(Algo::Ncdpo, pm());
        cfg.iterations = 0;
        let mut t = Trainer::new(cfg, 2).unwrap();
        let before: Vec<Tensor> = t.actor.params().into_iter().cloned().collect();
        assert!(t.run(|_, _| Ok(())).unwrap().is_empty());
        assert_eq!(
            t.actor.params().into_iter().cloned().collect::<Vec<_>>(),
            before
        );
        assert_eq!(t.evaluate(5, 0).unwrap().returns.len(), 5);
    }
}
