//! Stochastic heads turning the deterministic denoised output into a policy:
//! a diagonal Gaussian with learnable `log_sigma` for continuous control and
//! a per-agent temperature softmax for discrete joint actions.
//!
//! Log-probabilities are always evaluated on a tape, so the value stored at
//! sampling time and the value recomputed during optimization share one
//! arithmetic path.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{softmax_rows, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LOG_SIGMA_MIN: f64 = -5.0;
pub const LOG_SIGMA_MAX: f64 = 1.0;

/// Initial `log_sigma` for locomotion-style tasks.
pub const LOG_SIGMA_INIT_LOCOMOTION: f64 = -2.0;
/// Initial `log_sigma` for manipulation-style tasks.
pub const LOG_SIGMA_INIT_MANIPULATION: f64 = -2.3;
/// Default inverse temperature of the discrete head.
pub const DEFAULT_INV_TEMPERATURE: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    /// `(1, D)` learnable log standard deviations.
    pub log_sigma: Tensor,
}

impl GaussianHead {
    pub fn new(dim: usize, init: f64) -> Self {
        Self {
            log_sigma: Tensor::full(&[1, dim], init),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_sigma.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.data().iter().map(|l| l.exp()).collect()
    }

    pub fn clamp_log_sigma(&mut self) {
        for l in self.log_sigma.data_mut() {
            *l = l.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxHead {
    pub inv_temperature: f64,
    pub num_agents: usize,
    pub num_actions: usize,
}

impl SoftmaxHead {
    pub fn new(num_agents: usize, num_actions: usize, inv_temperature: f64) -> Result<Self> {
        if !(inv_temperature > 0.0) || num_agents == 0 || num_actions == 0 {
            return Err(Error::invalid(format!(
                "softmax head with {num_agents} agents, {num_actions} actions, 1/T = {inv_temperature}"
            )));
        }
        Ok(Self {
            inv_temperature,
            num_agents,
            num_actions,
        })
    }

    /// Per-agent action probabilities for one output row.
    pub fn probabilities(&self, f_out: &[f64]) -> Vec<Vec<f64>> {
        let logits = Tensor::matrix(self.num_agents, self.num_actions, f_out.to_vec());
        let p = softmax_rows(&logits, self.inv_temperature);
        p.data()
            .chunks(self.num_actions)
            .map(|c| c.to_vec())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Gaussian(GaussianHead),
    Softmax(SoftmaxHead),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(Vec<usize>),
}

impl Action {
    pub fn continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(a) => Some(a),
            Action::Discrete(_) => None,
        }
    }

    pub fn discrete(&self) -> Option<&[usize]> {
        match self {
            Action::Discrete(a) => Some(a),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    /// Deterministic network output: Gaussian mean or logits.
    pub mean_or_logits: Vec<f64>,
    pub action: Action,
    pub log_prob: f64,
}

/// Tape handles for the head's learnable parameters.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub log_sigma: Option<Var>,
}

impl Head {
    /// Width of the network output feeding this head.
    pub fn input_dim(&self) -> usize {
        match self {
            Head::Gaussian(g) => g.dim(),
            Head::Softmax(s) => s.num_agents * s.num_actions,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        match self {
            Head::Gaussian(g) => HeadVars {
                log_sigma: Some(tape.leaf(g.log_sigma.clone())),
            },
            Head::Softmax(_) => HeadVars { log_sigma: None },
        }
    }

    /// Learnable parameters (empty for the softmax head).
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Head::Gaussian(g) => vec![&g.log_sigma],
            Head::Softmax(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::Gaussian(g) => vec![&mut g.log_sigma],
            Head::Softmax(_) => Vec::new(),
        }
    }

    /// Project parameters back into their admissible range after an update.
    pub fn project(&mut self) {
        if let Head::Gaussian(g) = self {
            g.clamp_log_sigma();
        }
    }

    fn check_action(&self, a: &Action) -> Result<()> {
        match (self, a) {
            (Head::Gaussian(g), Action::Continuous(v)) if v.len() == g.dim() => Ok(()),
            (Head::Softmax(s), Action::Discrete(v)) if v.len() == s.num_agents => {
                match v.iter().find(|&&i| i >= s.num_actions) {
                    Some(i) => Err(Error::invalid(format!(
                        "discrete action {i} out of range 0..{}",
                        s.num_actions
                    ))),
                    None => Ok(()),
                }
            }
            _ => Err(Error::invalid(format!(
                "action {a:?} does not match head {self:?}"
            ))),
        }
    }

    /// Per-row log-probability `(n, 1)` of `actions` under the head centered
    /// on `f_out: (n, input_dim)`. Differentiable in `f_out` and the head
    /// parameters.
    pub fn log_prob_tape(
        &self,
        tape: &mut Tape,
        vars: HeadVars,
        f_out: Var,
        actions: &[Action],
    ) -> Result<Var> {
        let n = tape.value(f_out).rows();
        if actions.len() != n {
            return Err(Error::invalid(format!(
                "{} actions for {n} outputs",
                actions.len()
            )));
        }
        for a in actions {
            self.check_action(a)?;
        }
        match self {
            Head::Gaussian(g) => {
                let d = g.dim();
                let data = actions
                    .iter()
                    .flat_map(|a| a.continuous().unwrap().iter().copied())
                    .collect();
                let a = tape.leaf(Tensor::matrix(n, d, data));
                let ls_row = vars
                    .log_sigma
                    .ok_or_else(|| Error::invalid("unbound log_sigma"))?;
                let diff = tape.sub(a, f_out)?;
                let ls = tape.broadcast_rows(ls_row, n)?;
                let neg = tape.neg(ls);
                let inv_sigma = tape.exp(neg);
                let z = tape.mul(diff, inv_sigma)?;
                let sq = tape.square(z);
                let quad = tape.scale(sq, -0.5);
                let t = tape.sub(quad, ls)?;
                let t = tape.add_scalar(t, -0.5 * (2.0 * PI).ln());
                Ok(tape.row_sum(t))
            }
            Head::Softmax(s) => {
                let (na, nc) = (s.num_agents, s.num_actions);
                let mut onehot = vec![0.0; n * na * nc];
                for (i, a) in actions.iter().enumerate() {
                    for (agent, &j) in a.discrete().unwrap().iter().enumerate() {
                        onehot[(i * na + agent) * nc + j] = 1.0;
                    }
                }
                let logits = tape.reshape(f_out, &[n * na, nc])?;
                let lp = tape.log_softmax(logits, s.inv_temperature)?;
                let mask = tape.leaf(Tensor::matrix(n * na, nc, onehot));
                let picked = tape.mul(lp, mask)?;
                let per_agent = tape.row_sum(picked);
                let per_agent = tape.reshape(per_agent, &[n, na])?;
                Ok(tape.row_sum(per_agent))
            }
        }
    }

    /// Mean over rows of the per-sample entropy, as a scalar node.
    pub fn entropy_tape(&self, tape: &mut Tape, vars: HeadVars, f_out: Var) -> Result<Var> {
        match self {
            Head::Gaussian(_) => {
                let ls = vars
                    .log_sigma
                    .ok_or_else(|| Error::invalid("unbound log_sigma"))?;
                let t = tape.add_scalar(ls, 0.5 + 0.5 * (2.0 * PI).ln());
                Ok(tape.sum(t))
            }
            Head::Softmax(s) => {
                let n = tape.value(f_out).rows();
                let logits = tape.reshape(f_out, &[n * s.num_agents, s.num_actions])?;
                let p = tape.softmax(logits, s.inv_temperature)?;
                let lp = tape.log_softmax(logits, s.inv_temperature)?;
                let plp = tape.mul(p, lp)?;
                let total = tape.sum(plp);
                Ok(tape.scale(total, -1.0 / n as f64))
            }
        }
    }

    /// Sample one action per output row and record its log-probability.
    pub fn act<R: Rng + ?Sized>(&self, f_out: &Tensor, rng: &mut R) -> Result<Vec<PolicyOutput>> {
        if f_out.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "act",
                detail: format!(
                    "output {:?} for head of width {}",
                    f_out.shape(),
                    self.input_dim()
                ),
            });
        }
        let actions: Vec<Action> = (0..f_out.rows())
            .map(|i| {
                let row = f_out.row_slice(i);
                match self {
                    Head::Gaussian(g) => Action::Continuous(
                        row.iter()
                            .zip(g.sigma())
                            .map(|(&m, s)| {
                                let xi: f64 = StandardNormal.sample(rng);
                                m + s * xi
                            })
                            .collect(),
                    ),
                    Head::Softmax(s) => Action::Discrete(
                        s.probabilities(row)
                            .iter()
                            .map(|p| {
                                let u: f64 = rng.random();
                                sample_index(p, u)
                            })
                            .collect(),
                    ),
                }
            })
            .collect();
        let log_probs = self.log_probs(f_out, &actions)?;
        Ok(actions
            .into_iter()
            .zip(log_probs)
            .enumerate()
            .map(|(i, (action, log_prob))| PolicyOutput {
                mean_or_logits: f_out.row_slice(i).to_vec(),
                action,
                log_prob,
            })
            .collect())
    }

    /// Value-only batch log-probabilities.
    pub fn log_probs(&self, f_out: &Tensor, actions: &[Action]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let f = tape.leaf(f_out.clone());
        let lp = self.log_prob_tape(&mut tape, vars, f, actions)?;
        Ok(tape.value(lp).data().to_vec())
    }

    pub fn log_prob(&self, f_out: &[f64], action: &Action) -> Result<f64> {
        Ok(self.log_probs(&Tensor::row(f_out.to_vec()), std::slice::from_ref(action))?[0])
    }

    pub fn entropy(&self, f_out: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let f = tape.leaf(Tensor::row(f_out.to_vec()));
        let e = self.entropy_tape(&mut tape, vars, f)?;
        Ok(tape.value(e).item())
    }

    /// Mean action (continuous) or per-agent argmax (discrete).
    pub fn deterministic_action(&self, f_out: &[f64]) -> Action {
        match self {
            Head::Gaussian(_) => Action::Continuous(f_out.to_vec()),
            Head::Softmax(s) => Action::Discrete(
                f_out
                    .chunks(s.num_actions)
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                                if v > best.1 {
                                    (i, v)
                                } else {
                                    best
                                }
                            })
                            .0
                    })
                    .collect(),
            ),
        }
    }
}

fn sample_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

pub fn act_continuous<R: Rng + ?Sized>(
    head: &GaussianHead,
    f_out: &[f64],
    rng: &mut R,
) -> Result<PolicyOutput> {
    let h = Head::Gaussian(head.clone());
    Ok(h.act(&Tensor::row(f_out.to_vec()), rng)?.remove(0))
}

pub fn act_discrete<R: Rng + ?Sized>(
    head: &SoftmaxHead,
    f_out: &[f64],
    rng: &mut R,
) -> Result<PolicyOutput> {
    let h = Head::Softmax(head.clone());
    Ok(h.act(&Tensor::row(f_out.to_vec()), rng)?.remove(0))
}
