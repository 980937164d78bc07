use rand::seq::SliceRandom;
use rand::Rng;

use super::actor::Actor;
use super::buffer::{RolloutBuffer, Transition};
use super::optim::{clip_grad_norm, Adam};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::CriticNet;
use crate::policy::Action;

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
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

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            ppo_epochs: 5,
            minibatch_count: 4,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            critic_weight_decay: 1e-5,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!(
                "gamma {} outside (0, 1]",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::invalid(format!(
                "clip_eps {} outside (0, 1)",
                self.clip_eps
            )));
        }
        if self.minibatch_count == 0 {
            return Err(Error::invalid("minibatch_count must be at least 1"));
        }
        for (name, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("critic_weight_decay", self.critic_weight_decay),
            ("value_coef", self.value_coef),
            ("entropy_coef", self.entropy_coef),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfImitationConfig {
    /// Passes over the previous buffer; 0 disables the regularizer.
    pub clone_epochs: usize,
    pub clone_lr: f64,
}

impl Default for SelfImitationConfig {
    fn default() -> Self {
        Self {
            clone_epochs: 0,
            clone_lr: 1e-4,
        }
    }
}

/// Averages over every minibatch of one [`ppo_update`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub actor_loss: f64,
    pub value_loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateStats {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Negated clipped objective `-mean(min(r A, clip(r, 1-eps, 1+eps) A))` with
/// `r = exp(new_log_prob - old_log_prob)`. `new_log_prob` is `(n, 1)`.
pub fn clipped_surrogate(
    tape: &mut Tape,
    new_log_prob: Var,
    old_log_prob: &[f64],
    advantages: &[f64],
    clip_eps: f64,
) -> Result<(Var, SurrogateStats)> {
    let n = old_log_prob.len();
    if tape.shape(new_log_prob) != [n, 1] || advantages.len() != n || n == 0 {
        return Err(Error::Shape {
            op: "clipped_surrogate",
            detail: format!(
                "log-probs {:?}, {n} old, {} advantages",
                tape.shape(new_log_prob),
                advantages.len()
            ),
        });
    }
    let old = tape.leaf(Tensor::matrix(n, 1, old_log_prob.to_vec()));
    let diff = tape.sub(new_log_prob, old)?;
    let ratio = tape.exp(diff);
    let rv = tape.value(ratio).data().to_vec();
    if let Some(i) = rv.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!(
            "PPO ratio {} at row {i} (new log-prob {}, old {})",
            rv[i],
            tape.value(new_log_prob).data()[i],
            old_log_prob[i]
        )));
    }
    let adv = tape.leaf(Tensor::matrix(n, 1, advantages.to_vec()));
    let clipped = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let unclipped_term = tape.mul(ratio, adv)?;
    let clipped_term = tape.mul(clipped, adv)?;
    let term = tape.minimum(unclipped_term, clipped_term)?;
    let objective = tape.mean(term)?;
    let stats = SurrogateStats {
        mean_ratio: rv.iter().sum::<f64>() / n as f64,
        clip_fraction: rv.iter().filter(|r| (*r - 1.0).abs() > clip_eps).count() as f64 / n as f64,
    };
    Ok((tape.neg(objective), stats))
}

/// Actor loss on a minibatch: the network is re-run on each stored noise
/// stack, the head re-scores the stored interactive action, and the clipped
/// surrogate is formed. Returns `(loss, network output, stats)`.
pub fn ncdpo_loss(
    actor: &Actor,
    tape: &mut Tape,
    vars: &super::actor::ActorVars,
    batch: &[&Transition],
    advantages: &[f64],
    clip_eps: f64,
) -> Result<(Var, Var, SurrogateStats)> {
    let states = stack_obs(batch)?;
    let s = tape.leaf(states);
    let noises: Vec<_> = batch.iter().map(|t| &t.noise).collect();
    let f = actor.forward(tape, vars, s, &noises)?;
    let actions: Vec<Action> = batch.iter().map(|t| t.action.clone()).collect();
    let lp = actor.head.log_prob_tape(tape, vars.head, f, &actions)?;
    let old: Vec<f64> = batch.iter().map(|t| t.log_prob).collect();
    let (loss, stats) = clipped_surrogate(tape, lp, &old, advantages, clip_eps)?;
    Ok((loss, f, stats))
}

pub(crate) fn stack_obs(batch: &[&Transition]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = batch.iter().map(|t| t.obs.clone()).collect();
    Tensor::from_rows(&rows)
}

/// Zero mean, unit standard deviation (floor `1e-8`).
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    v.iter().map(|x| (x - mean) / std).collect()
}

/// Split `0..n` into `count` nearly equal contiguous chunks of `order`.
pub(crate) fn minibatches(order: &[usize], count: usize) -> Vec<&[usize]> {
    let n = order.len();
    let count = count.clamp(1, n.max(1));
    (0..count)
        .map(|i| &order[i * n / count..(i + 1) * n / count])
        .filter(|b| !b.is_empty())
        .collect()
}

/// Value regression `mean((V(s) - target)^2)` scaled by `coef`, followed by
/// one clipped optimizer step. Returns the unscaled loss.
pub(crate) fn critic_step(
    critic: &mut CriticNet,
    opt: &mut Adam,
    states: Tensor,
    targets: &[f64],
    coef: f64,
    max_grad_norm: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = critic.bind(&mut tape);
    let s = tape.leaf(states);
    let v = critic.value(&mut tape, &params, s)?;
    let t = tape.leaf(Tensor::matrix(targets.len(), 1, targets.to_vec()));
    let d = tape.sub(v, t)?;
    let sq = tape.square(d);
    let loss = tape.mean(sq)?;
    let lv = tape.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::NonFinite(format!("value loss {lv}")));
    }
    if coef == 0.0 {
        return Ok(lv);
    }
    let scaled = tape.scale(loss, coef);
    let g = tape.backward(scaled)?;
    let mut grads: Vec<Tensor> = params.iter().map(|&p| g.get(p)).collect();
    clip_grad_norm(&mut grads, max_grad_norm);
    opt.step(
        &mut critic.mlp.params.iter_mut().collect::<Vec<_>>(),
        &grads,
    )?;
    Ok(lv)
}

/// `N_PPO` epochs over shuffled minibatches of a buffer whose advantages are
/// already computed. Actor and critic are stepped by their own optimizers.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<R: Rng + ?Sized>(
    actor: &mut Actor,
    critic: &mut CriticNet,
    actor_opt: &mut Adam,
    critic_opt: &mut Adam,
    buffer: &RolloutBuffer,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    let flat = buffer.flat();
    if flat.is_empty() || buffer.advantages.len() != flat.len() {
        return Err(Error::invalid(
            "PPO update needs a non-empty buffer with computed advantages",
        ));
    }
    let mut order: Vec<usize> = (0..flat.len()).collect();
    let mut stats = PpoStats::default();
    let mut updates = 0usize;
    for _ in 0..config.ppo_epochs {
        order.shuffle(rng);
        for mb in minibatches(&order, config.minibatch_count) {
            let batch: Vec<&Transition> = mb.iter().map(|&i| flat[i]).collect();
            let adv = normalize(&mb.iter().map(|&i| buffer.advantages[i]).collect::<Vec<_>>());

            let mut tape = Tape::new();
            let vars = actor.bind(&mut tape);
            let (surrogate, f, s) =
                ncdpo_loss(actor, &mut tape, &vars, &batch, &adv, config.clip_eps)?;
            let entropy = actor.head.entropy_tape(&mut tape, vars.head, f)?;
            let ent_v = tape.value(entropy).item();
            let loss = if config.entropy_coef != 0.0 {
                let bonus = tape.scale(entropy, -config.entropy_coef);
                tape.add(surrogate, bonus)?
            } else {
                surrogate
            };
            let actor_loss = tape.value(surrogate).item();
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite(format!(
                    "actor loss {}",
                    tape.value(loss).item()
                )));
            }
            let g = tape.backward(loss)?;
            let mut grads = actor.grads(&g, &vars);
            if grads.iter().any(|t| !t.all_finite()) {
                return Err(Error::NonFinite("actor gradient".into()));
            }
            clip_grad_norm(&mut grads, config.max_grad_norm);
            actor_opt.step(&mut actor.params_mut(), &grads)?;
            actor.project();

            let returns: Vec<f64> = mb.iter().map(|&i| buffer.returns[i]).collect();
            let value_loss = critic_step(
                critic,
                critic_opt,
                stack_obs(&batch)?,
                &returns,
                config.value_coef,
                config.max_grad_norm,
            )?;

            stats.actor_loss += actor_loss;
            stats.value_loss += value_loss;
            stats.mean_ratio += s.mean_ratio;
            stats.clip_fraction += s.clip_fraction;
            stats.entropy += ent_v;
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

/// Behavior cloning on the buffer's own states and interactive actions.
/// Returns the mean loss of each epoch; empty when `clone_epochs == 0`.
pub fn self_imitation_update<R: Rng + ?Sized>(
    actor: &mut Actor,
    opt: &mut Adam,
    buffer: &RolloutBuffer,
    config: &SelfImitationConfig,
    minibatch_count: usize,
    max_grad_norm: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let flat = buffer.flat();
    let mut trace = Vec::with_capacity(config.clone_epochs);
    if config.clone_epochs == 0 || flat.is_empty() {
        return Ok(trace);
    }
    opt.lr = config.clone_lr;
    let mut order: Vec<usize> = (0..flat.len()).collect();
    for _ in 0..config.clone_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0.0;
        for mb in minibatches(&order, minibatch_count) {
            let batch: Vec<&Transition> = mb.iter().map(|&i| flat[i]).collect();
            let states = stack_obs(&batch)?;
            let actions: Vec<Action> = batch.iter().map(|t| t.action.clone()).collect();
            let mut tape = Tape::new();
            let vars = actor.bind(&mut tape);
            let loss = actor.bc_loss(&mut tape, &vars, &states, &actions, rng)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("self-imitation loss {lv}")));
            }
            let g = tape.backward(loss)?;
            let mut grads = actor.grads(&g, &vars);
            clip_grad_norm(&mut grads, max_grad_norm);
            opt.step(&mut actor.params_mut(), &grads)?;
            actor.project();
            total += lv * batch.len() as f64;
            count += batch.len() as f64;
        }
        trace.push(total / count);
    }
    Ok(trace)
}

/// Behavior-cloning loss of the current actor on a buffer, with a fixed
/// noise draw derived from `seed` and no parameter change.
pub fn bc_probe(actor: &Actor, buffer: &RolloutBuffer, seed: u64) -> Result<f64> {
    let flat = buffer.flat();
    let obs: Vec<Vec<f64>> = flat.iter().map(|t| t.obs.clone()).collect();
    let actions: Vec<Action> = flat.iter().map(|t| t.action.clone()).collect();
    super::train::bc_probe_pairs(actor, &obs, &actions, seed)
}
