//! Two-level baseline: every denoising step is a low-level MDP transition
//! over augmented states `(s, a^k, k)` with a Gaussian per-step policy.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::actor::{Actor, ActorNet};
use super::buffer::mean_or_nan;
use super::gae::gae_with_discounts;
use super::optim::{clip_grad_norm, Adam};
use super::ppo::{clipped_surrogate, critic_step, minibatches, normalize, PpoConfig, PpoStats};
use super::rollout::VecEnv;
use crate::autodiff::{Tape, Tensor, Var};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nets::{denoise_mean, timestep_embedding, CriticNet, DenoisingNet, TIMESTEP_EMBED_DIM};
use crate::policy::{Action, GaussianHead, Head, HeadVars};

/// Floor on the per-step exploration std.
pub const DEFAULT_MIN_STD: f64 = 0.1;

/// One environment decision expanded into its `K` denoising transitions.
/// Index `j` runs over `k = K - j`, so `chain[j]` is `a^{K-j}` and
/// `chain[K]` is the executed `a^0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainTransition {
    pub obs: Vec<f64>,
    pub chain: Vec<Vec<f64>>,
    /// `log N(a^{k-1}; mu(a^k, k, s), sigma'_k^2 I)`.
    pub log_probs: Vec<f64>,
    /// `V(s, a^k, k)`.
    pub values: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, Default)]
pub struct DppoBuffer {
    pub trajectories: Vec<Vec<ChainTransition>>,
    pub bootstrap: Vec<f64>,
    /// Per low-level step, ordered environment, decision, then `j`.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
    pub env_steps: usize,
}

impl DppoBuffer {
    pub fn decisions(&self) -> usize {
        self.trajectories.iter().map(Vec::len).sum()
    }

    /// Number of low-level transitions, `K` per decision.
    pub fn low_level_len(&self) -> usize {
        self.trajectories
            .iter()
            .flatten()
            .map(|t| t.log_probs.len())
            .sum()
    }

    /// GAE over the flattened low-level sequence. Rewards arrive on the last
    /// denoising step of a decision; `gamma` applies only across decisions
    /// while `lambda` decays per low-level step.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        if self.bootstrap.len() != self.trajectories.len() {
            return Err(Error::invalid(
                "one bootstrap value per trajectory required",
            ));
        }
        self.advantages.clear();
        self.returns.clear();
        for (traj, &boot) in self.trajectories.iter().zip(&self.bootstrap) {
            let (mut r, mut v, mut d, mut g) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for t in traj {
                let k = t.log_probs.len();
                for j in 0..k {
                    let last = j + 1 == k;
                    r.push(if last { t.reward } else { 0.0 });
                    d.push(last && t.done);
                    g.push(if last { gamma } else { 1.0 });
                    v.push(t.values[j]);
                }
            }
            v.push(boot);
            let (a, ret) = gae_with_discounts(&r, &v, &d, &g, lambda)?;
            self.advantages.extend(a);
            self.returns.extend(ret);
        }
        Ok(())
    }

    pub fn mean_episode_return(&self) -> f64 {
        mean_or_nan(&self.episode_returns)
    }

    pub fn success_rate(&self) -> f64 {
        mean_or_nan(
            &self
                .episode_successes
                .iter()
                .map(|&b| f64::from(u8::from(b)))
                .collect::<Vec<_>>(),
        )
    }

    /// `(state, executed action)` pairs.
    pub fn executed(&self) -> (Vec<Vec<f64>>, Vec<Action>) {
        self.trajectories
            .iter()
            .flatten()
            .map(|t| {
                (
                    t.obs.clone(),
                    Action::Continuous(t.chain.last().unwrap().clone()),
                )
            })
            .unzip()
    }
}

/// Diffusion actor trained as a two-level MDP, with a critic over
/// `[s, embed(k), a^k]`.
#[derive(Clone, Debug)]
pub struct DppoAgent {
    pub actor: Actor,
    pub critic: CriticNet,
    pub min_std: f64,
}

impl DppoAgent {
    pub fn new(
        actor: Actor,
        critic_width: usize,
        critic_layers: usize,
        seed: u64,
        min_std: f64,
    ) -> Result<Self> {
        let (net, _) = diffusion_parts(&actor)?;
        let critic = CriticNet::new(
            net.obs_dim + TIMESTEP_EMBED_DIM + net.action_dim,
            critic_width,
            critic_layers,
            seed,
        )?;
        Ok(Self {
            actor,
            critic,
            min_std,
        })
    }

    pub fn steps(&self) -> usize {
        self.actor.steps()
    }

    pub fn step_std(&self, k: usize) -> Result<f64> {
        let (_, schedule) = diffusion_parts(&self.actor)?;
        Ok(schedule.sigma(k).max(self.min_std))
    }

    /// Per-row `log N(target; mu(a^k, k, s), sigma'_k^2 I)` for rows sharing
    /// one step `k`, as an `(n, 1)` node.
    fn step_log_prob(
        &self,
        tape: &mut Tape,
        params: &[Var],
        states: &Tensor,
        a_k: &Tensor,
        target: &[Vec<f64>],
        k: usize,
    ) -> Result<Var> {
        let (net, schedule) = diffusion_parts(&self.actor)?;
        let s = tape.leaf(states.clone());
        let a = tape.leaf(a_k.clone());
        let mu = denoise_mean(net, net.x0_clip, tape, params, a, k, s, schedule)?;
        let head = Head::Gaussian(GaussianHead::new(net.action_dim, self.step_std(k)?.ln()));
        let ls = tape.leaf(head.params()[0].clone());
        let actions: Vec<Action> = target
            .iter()
            .map(|t| Action::Continuous(t.clone()))
            .collect();
        head.log_prob_tape(
            tape,
            HeadVars {
                log_sigma: Some(ls),
            },
            mu,
            &actions,
        )
    }

    fn critic_inputs(obs: &[f64], a_k: &[f64], k: usize) -> Vec<f64> {
        let mut row = obs.to_vec();
        row.extend(timestep_embedding(k, TIMESTEP_EMBED_DIM));
        row.extend_from_slice(a_k);
        row
    }

    fn values(&self, obs: &Tensor, a_k: &Tensor, k: usize) -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = (0..obs.rows())
            .map(|i| Self::critic_inputs(obs.row_slice(i), a_k.row_slice(i), k))
            .collect();
        self.critic.values(&Tensor::from_rows(&rows)?)
    }

    /// Run the stochastic chain on a batch of states. Returns per row the
    /// chain, per-step log-probs and per-step values.
    #[allow(clippy::type_complexity)]
    pub fn sample_chains<R: Rng + ?Sized>(
        &self,
        states: &Tensor,
        rng: &mut R,
    ) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (net, schedule) = diffusion_parts(&self.actor)?;
        let (n, d, kmax) = (states.rows(), net.action_dim, schedule.steps());
        let mut a = Tensor::matrix(
            n,
            d,
            (0..n * d).map(|_| StandardNormal.sample(rng)).collect(),
        );
        let mut chains: Vec<Vec<Vec<f64>>> =
            (0..n).map(|i| vec![a.row_slice(i).to_vec()]).collect();
        let mut lps = vec![Vec::with_capacity(kmax); n];
        let mut vals = vec![Vec::with_capacity(kmax); n];
        for k in (1..=kmax).rev() {
            let v = self.values(states, &a, k)?;
            let mut tape = Tape::new();
            let params = net.mlp.bind(&mut tape);
            let s = tape.leaf(states.clone());
            let ak = tape.leaf(a.clone());
            let mu = denoise_mean(net, net.x0_clip, &mut tape, &params, ak, k, s, schedule)?;
            let std = self.step_std(k)?;
            let mu = tape.value(mu);
            if !mu.all_finite() {
                return Err(Error::NonFinite(format!("denoising mean at step {k}")));
            }
            let next: Vec<f64> = mu
                .data()
                .iter()
                .map(|m| {
                    m + std * {
                        let xi: f64 = StandardNormal.sample(rng);
                        xi
                    }
                })
                .collect();
            let next = Tensor::matrix(n, d, next);
            let targets: Vec<Vec<f64>> = (0..n).map(|i| next.row_slice(i).to_vec()).collect();
            let mut tape = Tape::new();
            let params = net.mlp.bind(&mut tape);
            let lp = self.step_log_prob(&mut tape, &params, states, &a, &targets, k)?;
            let lp = tape.value(lp).data().to_vec();
            for i in 0..n {
                chains[i].push(targets[i].clone());
                lps[i].push(lp[i]);
                vals[i].push(v[i]);
            }
            a = next;
        }
        Ok((chains, lps, vals))
    }

    /// Collect `steps_per_env` decisions per environment.
    pub fn collect<R: Rng + ?Sized>(
        &self,
        venv: &mut VecEnv,
        steps_per_env: usize,
        rng: &mut R,
    ) -> Result<DppoBuffer> {
        let n = venv.len();
        let start = venv.env_steps();
        let mut buf = DppoBuffer {
            trajectories: vec![Vec::with_capacity(steps_per_env); n],
            ..Default::default()
        };
        for step in 0..steps_per_env {
            let states = venv.states();
            let (chains, lps, vals) = self.sample_chains(&states, rng)?;
            for (i, ((chain, log_probs), values)) in
                chains.into_iter().zip(lps).zip(vals).enumerate()
            {
                let action = Action::Continuous(chain.last().unwrap().clone());
                let (reward, done, finished) = venv.step(i, step, &action)?;
                if let Some((ret, success)) = finished {
                    buf.episode_returns.push(ret);
                    buf.episode_successes.push(success);
                }
                buf.trajectories[i].push(ChainTransition {
                    obs: states.row_slice(i).to_vec(),
                    chain,
                    log_probs,
                    values,
                    reward,
                    done,
                });
            }
        }
        // The successor of each tail is a fresh chain start at step K.
        let states = venv.states();
        let (net, _) = diffusion_parts(&self.actor)?;
        let d = net.action_dim;
        let a = Tensor::matrix(
            n,
            d,
            (0..n * d).map(|_| StandardNormal.sample(rng)).collect(),
        );
        buf.bootstrap = self.values(&states, &a, self.steps())?;
        buf.env_steps = venv.env_steps() - start;
        Ok(buf)
    }

    /// PPO over low-level transitions. Rows of a minibatch are grouped by
    /// denoising step; the surrogate is the row-weighted mean over groups.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        actor_opt: &mut Adam,
        critic_opt: &mut Adam,
        buffer: &DppoBuffer,
        config: &PpoConfig,
        rng: &mut R,
    ) -> Result<PpoStats> {
        // (transition, j) for every low-level step, in advantage order.
        let index: Vec<(&ChainTransition, usize)> = buffer
            .trajectories
            .iter()
            .flatten()
            .flat_map(|t| (0..t.log_probs.len()).map(move |j| (t, j)))
            .collect();
        if index.is_empty() || index.len() != buffer.advantages.len() {
            return Err(Error::invalid(
                "DPPO update needs a non-empty buffer with computed advantages",
            ));
        }
        let kmax = self.steps();
        let mut order: Vec<usize> = (0..index.len()).collect();
        let mut stats = PpoStats::default();
        let mut updates = 0usize;
        let entropy = (1..=kmax)
            .map(|k| {
                let d = self.actor.out_dim() as f64;
                Ok(d * (0.5 + 0.5 * (2.0 * std::f64::consts::PI).ln() + self.step_std(k)?.ln()))
            })
            .sum::<Result<f64>>()?
            / kmax as f64;
        for _ in 0..config.ppo_epochs {
            order.shuffle(rng);
            for mb in minibatches(&order, config.minibatch_count) {
                let adv = normalize(&mb.iter().map(|&i| buffer.advantages[i]).collect::<Vec<_>>());
                let n = mb.len() as f64;
                let mut tape = Tape::new();
                let (net, _) = diffusion_parts(&self.actor)?;
                let params = net.mlp.bind(&mut tape);
                let mut loss: Option<Var> = None;
                let (mut ratio_sum, mut clip_sum) = (0.0, 0.0);
                for k in 1..=kmax {
                    let rows: Vec<usize> = (0..mb.len())
                        .filter(|&r| kmax - index[mb[r]].1 == k)
                        .collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let pick = |r: &usize| index[mb[*r]];
                    let states = Tensor::from_rows(
                        &rows
                            .iter()
                            .map(|r| pick(r).0.obs.clone())
                            .collect::<Vec<_>>(),
                    )?;
                    let a_k = Tensor::from_rows(
                        &rows
                            .iter()
                            .map(|r| pick(r).0.chain[pick(r).1].clone())
                            .collect::<Vec<_>>(),
                    )?;
                    let targets: Vec<Vec<f64>> = rows
                        .iter()
                        .map(|r| pick(r).0.chain[pick(r).1 + 1].clone())
                        .collect();
                    let old: Vec<f64> = rows
                        .iter()
                        .map(|r| pick(r).0.log_probs[pick(r).1])
                        .collect();
                    let group_adv: Vec<f64> = rows.iter().map(|&r| adv[r]).collect();
                    let lp = self.step_log_prob(&mut tape, &params, &states, &a_k, &targets, k)?;
                    let (l, s) =
                        clipped_surrogate(&mut tape, lp, &old, &group_adv, config.clip_eps)?;
                    let w = rows.len() as f64 / n;
                    let l = tape.scale(l, w);
                    loss = Some(match loss {
                        Some(acc) => tape.add(acc, l)?,
                        None => l,
                    });
                    ratio_sum += s.mean_ratio * w;
                    clip_sum += s.clip_fraction * w;
                }
                let loss = loss.expect("minibatch is non-empty");
                let lv = tape.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::NonFinite(format!("DPPO actor loss {lv}")));
                }
                let g = tape.backward(loss)?;
                let mut grads: Vec<Tensor> = params.iter().map(|&p| g.get(p)).collect();
                if grads.iter().any(|t| !t.all_finite()) {
                    return Err(Error::NonFinite("DPPO actor gradient".into()));
                }
                clip_grad_norm(&mut grads, config.max_grad_norm);
                let net_params = match &mut self.actor.net {
                    ActorNet::Diffusion { net, .. } => &mut net.mlp.params,
                    ActorNet::Mlp(_) => unreachable!("checked by diffusion_parts"),
                };
                actor_opt.step(&mut net_params.iter_mut().collect::<Vec<_>>(), &grads)?;

                let inputs: Vec<Vec<f64>> = mb
                    .iter()
                    .map(|&i| {
                        let (t, j) = index[i];
                        Self::critic_inputs(&t.obs, &t.chain[j], kmax - j)
                    })
                    .collect();
                let returns: Vec<f64> = mb.iter().map(|&i| buffer.returns[i]).collect();
                let value_loss = critic_step(
                    &mut self.critic,
                    critic_opt,
                    Tensor::from_rows(&inputs)?,
                    &returns,
                    config.value_coef,
                    config.max_grad_norm,
                )?;

                stats.actor_loss += lv;
                stats.value_loss += value_loss;
                stats.mean_ratio += ratio_sum;
                stats.clip_fraction += clip_sum;
                stats.entropy += entropy;
                updates += 1;
            }
        }
        if updates > 0 {
            let n = updates as f64;
            stats.actor_loss /= n;
            stats.value_loss /= n;
            stats.mean_ratio /= n;
            stats.clip_fraction /= n;
            stats.entropy /= n;
        }
        Ok(stats)
    }
}

fn diffusion_parts(actor: &Actor) -> Result<(&DenoisingNet, &NoiseSchedule)> {
    match &actor.net {
        ActorNet::Diffusion { net, schedule } => Ok((net, schedule)),
        ActorNet::Mlp(_) => Err(Error::invalid(
            "the two-level baseline needs a diffusion actor",
        )),
    }
}
