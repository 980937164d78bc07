use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::actor::Actor;
use super::optim::{clip_grad_norm, Adam};
use crate::autodiff::{Tape, Tensor};
use crate::envs::Dataset;
use crate::error::{Error, Result};
use crate::policy::Action;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop after this many epochs without a relative improvement of
    /// `min_delta` over the best epoch loss.
    pub patience: usize,
    pub min_delta: f64,
    pub max_grad_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            patience: 20,
            min_delta: 1e-3,
            max_grad_norm: 1.0,
        }
    }
}

/// Behavior cloning on a demonstration set. Returns the mean loss of each
/// epoch run; `max_epochs == 0` leaves the actor untouched.
pub fn pretrain(
    actor: &mut Actor,
    dataset: &Dataset,
    config: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if dataset.observations.is_empty() {
        return Err(Error::invalid("empty demonstration set"));
    }
    if dataset.obs_dim != actor.obs_dim {
        return Err(Error::invalid(format!(
            "dataset obs dim {} != actor obs dim {}",
            dataset.obs_dim, actor.obs_dim
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let actions: Vec<Action> = dataset
        .actions
        .iter()
        .map(|a| actor.action_from_record(a))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..actions.len()).collect();
    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let states = Tensor::from_rows(
                &batch
                    .iter()
                    .map(|&i| dataset.observations[i].clone())
                    .collect::<Vec<_>>(),
            )?;
            let acts: Vec<Action> = batch.iter().map(|&i| actions[i].clone()).collect();
            let mut tape = Tape::new();
            let vars = actor.bind(&mut tape);
            let loss = actor.bc_loss(&mut tape, &vars, &states, &acts, &mut rng)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("pretraining loss {lv}")));
            }
            let g = tape.backward(loss)?;
            let mut grads = actor.grads(&g, &vars);
            clip_grad_norm(&mut grads, config.max_grad_norm);
            opt.step(&mut actor.params_mut(), &grads)?;
            actor.project();
            total += lv * batch.len() as f64;
            count += batch.len() as f64;
        }
        let epoch_loss = total / count;
        trace.push(epoch_loss);
        if !best.is_finite() || epoch_loss < best - config.min_delta * best.abs() {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(trace)
}
