use rand::Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::diffusion::{
    bc_loss, denoise_deterministic, sample_noise_stack, NoiseSchedule, NoiseStack,
};
use crate::error::{Error, Result};
use crate::nets::{DenoisingNet, Mlp, NoisePredictor};
use crate::policy::{Action, Head, HeadVars, PolicyOutput};

/// Deterministic part of a policy: the denoising chain `f(s, a^K, z)` or a
/// plain MLP `f(s)`.
#[derive(Clone, Debug)]
pub enum ActorNet {
    Diffusion {
        net: DenoisingNet,
        schedule: NoiseSchedule,
    },
    Mlp(Mlp),
}

/// Network plus stochastic head.
#[derive(Clone, Debug)]
pub struct Actor {
    pub net: ActorNet,
    pub head: Head,
    pub obs_dim: usize,
}

pub struct ActorVars {
    pub net: Vec<Var>,
    pub head: HeadVars,
}

/// One sampled decision: the noise that fixed the chain and the head output.
#[derive(Clone, Debug, PartialEq)]
pub struct ActSample {
    pub noise: NoiseStack,
    pub output: PolicyOutput,
}

impl Actor {
    pub fn new(net: ActorNet, head: Head, obs_dim: usize) -> Result<Self> {
        let out = match &net {
            ActorNet::Diffusion { net, .. } => {
                if net.obs_dim != obs_dim {
                    return Err(Error::invalid(format!(
                        "denoiser obs dim {} != {obs_dim}",
                        net.obs_dim
                    )));
                }
                net.action_dim
            }
            ActorNet::Mlp(m) => {
                if m.spec.input_dim != obs_dim {
                    return Err(Error::invalid(format!(
                        "MLP input {} != obs dim {obs_dim}",
                        m.spec.input_dim
                    )));
                }
                m.spec.output_dim
            }
        };
        if out != head.input_dim() {
            return Err(Error::invalid(format!(
                "network output {out} does not match head width {}",
                head.input_dim()
            )));
        }
        Ok(Self { net, head, obs_dim })
    }

    /// Denoising steps, 0 for a plain MLP.
    pub fn steps(&self) -> usize {
        match &self.net {
            ActorNet::Diffusion { schedule, .. } => schedule.steps(),
            ActorNet::Mlp(_) => 0,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.head.input_dim()
    }

    pub fn is_diffusion(&self) -> bool {
        matches!(self.net, ActorNet::Diffusion { .. })
    }

    pub fn bind(&self, tape: &mut Tape) -> ActorVars {
        let net = match &self.net {
            ActorNet::Diffusion { net, .. } => net.bind(tape),
            ActorNet::Mlp(m) => m.bind(tape),
        };
        ActorVars {
            net,
            head: self.head.bind(tape),
        }
    }

    /// Parameter views carved from one flat `(1, P)` leaf, in the order of
    /// [`Actor::params`].
    pub fn vars_from_flat(&self, tape: &mut Tape, flat: Var) -> Result<ActorVars> {
        let shapes: Vec<[usize; 2]> = self.params().iter().map(|t| [t.rows(), t.cols()]).collect();
        let mut vars = crate::autodiff::unflatten(tape, flat, &shapes)?;
        let head = match self.head {
            Head::Gaussian(_) => HeadVars {
                log_sigma: vars.pop(),
            },
            Head::Softmax(_) => HeadVars { log_sigma: None },
        };
        Ok(ActorVars { net: vars, head })
    }

    /// Network output `(n, out_dim)` for states `s: (n, obs_dim)`. Diffusion
    /// actors need one noise stack per row; MLP actors ignore `noises`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ActorVars,
        s: Var,
        noises: &[&NoiseStack],
    ) -> Result<Var> {
        match &self.net {
            ActorNet::Diffusion { net, schedule } => {
                denoise_deterministic(net, net.x0_clip, tape, &vars.net, schedule, s, noises)
            }
            ActorNet::Mlp(m) => m.forward(tape, &vars.net, s),
        }
    }

    pub fn forward_values(&self, states: &Tensor, noises: &[&NoiseStack]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let s = tape.leaf(states.clone());
        let f = self.forward(&mut tape, &vars, s, noises)?;
        Ok(tape.value(f).clone())
    }

    /// Fresh noise stack for one decision (empty for MLP actors).
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseStack {
        match &self.net {
            ActorNet::Diffusion { net, schedule } => {
                sample_noise_stack(schedule.steps(), net.action_dim(), rng)
            }
            ActorNet::Mlp(_) => NoiseStack {
                a_k: Vec::new(),
                z: Vec::new(),
            },
        }
    }

    /// Sample noise for every row, run the network, then sample the head.
    pub fn act<R: Rng + ?Sized>(&self, states: &Tensor, rng: &mut R) -> Result<Vec<ActSample>> {
        let noises: Vec<NoiseStack> = (0..states.rows()).map(|_| self.sample_noise(rng)).collect();
        let f = self.forward_values(states, &noises.iter().collect::<Vec<_>>())?;
        if !f.all_finite() {
            return Err(Error::NonFinite("policy output during acting".into()));
        }
        let outputs = self.head.act(&f, rng)?;
        Ok(noises
            .into_iter()
            .zip(outputs)
            .map(|(noise, output)| ActSample { noise, output })
            .collect())
    }

    /// Head mean (continuous) or per-agent argmax (discrete) of the network
    /// output. Diffusion actors still draw a fresh noise stack per row.
    pub fn act_deterministic<R: Rng + ?Sized>(
        &self,
        states: &Tensor,
        rng: &mut R,
    ) -> Result<Vec<Action>> {
        let noises: Vec<NoiseStack> = (0..states.rows()).map(|_| self.sample_noise(rng)).collect();
        let f = self.forward_values(states, &noises.iter().collect::<Vec<_>>())?;
        Ok((0..f.rows())
            .map(|i| self.head.deterministic_action(f.row_slice(i)))
            .collect())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = match &self.net {
            ActorNet::Diffusion { net, .. } => net.mlp.params.iter().collect(),
            ActorNet::Mlp(m) => m.params.iter().collect(),
        };
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = match &mut self.net {
            ActorNet::Diffusion { net, .. } => net.mlp.params.iter_mut().collect(),
            ActorNet::Mlp(m) => m.params.iter_mut().collect(),
        };
        out.extend(self.head.params_mut());
        out
    }

    /// Gradients in the order of [`Actor::params`].
    pub fn grads(&self, g: &Gradients, vars: &ActorVars) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = vars.net.iter().map(|&v| g.get(v)).collect();
        if let Some(ls) = vars.head.log_sigma {
            out.push(g.get(ls));
        }
        out
    }

    /// Interpret a stored action record (continuous values or discrete
    /// indices) as an [`Action`] of this actor's head.
    pub fn action_from_record(&self, record: &[f64]) -> Result<Action> {
        match &self.head {
            Head::Gaussian(g) if record.len() == g.dim() => Ok(Action::Continuous(record.to_vec())),
            Head::Softmax(s) if record.len() == s.num_agents => record
                .iter()
                .map(|&v| {
                    let i = v as usize;
                    if v >= 0.0 && v.fract() == 0.0 && i < s.num_actions {
                        Ok(i)
                    } else {
                        Err(Error::invalid(format!(
                            "{v} is not an action index below {}",
                            s.num_actions
                        )))
                    }
                })
                .collect::<Result<_>>()
                .map(Action::Discrete),
            _ => Err(Error::invalid(format!(
                "action record of width {} does not fit the head",
                record.len()
            ))),
        }
    }

    /// Regression target for the denoising network: the continuous action
    /// (clamped to the clean-action clip) or a `+-1` one-hot code.
    pub fn bc_target(&self, action: &Action) -> Vec<f64> {
        match (action, &self.head) {
            (Action::Continuous(v), _) => {
                let clip = match &self.net {
                    ActorNet::Diffusion { net, .. } => net.x0_clip,
                    ActorNet::Mlp(_) => None,
                };
                v.iter()
                    .map(|&x| clip.map_or(x, |c| x.clamp(-c, c)))
                    .collect()
            }
            (Action::Discrete(idx), Head::Softmax(s)) => {
                let mut out = vec![-1.0; s.num_agents * s.num_actions];
                for (agent, &j) in idx.iter().enumerate() {
                    out[agent * s.num_actions + j] = 1.0;
                }
                out
            }
            (Action::Discrete(idx), Head::Gaussian(_)) => idx.iter().map(|&i| i as f64).collect(),
        }
    }

    /// Behavior-cloning loss on `(state, action)` pairs: the denoising loss
    /// for diffusion actors, squared error for continuous MLPs and
    /// cross-entropy for discrete MLPs.
    pub fn bc_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ActorVars,
        states: &Tensor,
        actions: &[Action],
        rng: &mut R,
    ) -> Result<Var> {
        if actions.is_empty() {
            return Err(Error::invalid("behavior cloning on an empty batch"));
        }
        match &self.net {
            ActorNet::Diffusion { net, schedule } => {
                let d = net.action_dim();
                let targets: Vec<f64> = actions.iter().flat_map(|a| self.bc_target(a)).collect();
                if targets.len() != actions.len() * d {
                    return Err(Error::invalid("action does not match the denoiser width"));
                }
                let targets = Tensor::matrix(actions.len(), d, targets);
                bc_loss(net, tape, &vars.net, schedule, states, &targets, rng)
            }
            ActorNet::Mlp(m) => {
                let s = tape.leaf(states.clone());
                let f = m.forward(tape, &vars.net, s)?;
                match &self.head {
                    Head::Gaussian(g) => {
                        let t: Vec<f64> = actions.iter().flat_map(|a| self.bc_target(a)).collect();
                        if t.len() != actions.len() * g.dim() {
                            return Err(Error::invalid("action does not match the MLP width"));
                        }
                        let t = tape.leaf(Tensor::matrix(actions.len(), g.dim(), t));
                        let diff = tape.sub(f, t)?;
                        let sq = tape.square(diff);
                        let rows = tape.row_sum(sq);
                        tape.mean(rows)
                    }
                    Head::Softmax(_) => {
                        let lp = self.head.log_prob_tape(tape, vars.head, f, actions)?;
                        let m = tape.mean(lp)?;
                        Ok(tape.neg(m))
                    }
                }
            }
        }
    }

    /// Clamp head parameters back into range after an update.
    pub fn project(&mut self) {
        self.head.project();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::nets::MlpSpec;
    use crate::policy::{GaussianHead, SoftmaxHead};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diffusion_actor() -> Actor {
        let net = DenoisingNet::new(2, 3, 16, 2, false, 1)
            .unwrap()
            .with_x0_clip(Some(1.0));
        let schedule = make_schedule(4, ScheduleKind::default_linear(4)).unwrap();
        Actor::new(
            ActorNet::Diffusion { net, schedule },
            Head::Gaussian(GaussianHead::new(2, -1.0)),
            3,
        )
        .unwrap()
    }

    #[test]
    fn stored_outputs_replay_exactly() {
        let actor = diffusion_actor();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let states = Tensor::matrix(5, 3, (0..15).map(|i| (i as f64 * 0.37).sin()).collect());
        let samples = actor.act(&states, &mut rng).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let row = Tensor::row(states.row_slice(i).to_vec());
            let f = actor.forward_values(&row, &[&s.noise]).unwrap();
            assert_eq!(f.data(), s.output.mean_or_logits.as_slice());
            assert_eq!(
                actor.head.log_prob(f.data(), &s.output.action).unwrap(),
                s.output.log_prob
            );
        }
    }

    #[test]
    fn mismatched_head_rejected() {
        let net = DenoisingNet::new(2, 3, 8, 1, false, 1).unwrap();
        let schedule = make_schedule(2, ScheduleKind::default_linear(2)).unwrap();
        let head = Head::Softmax(SoftmaxHead::new(1, 3, 1.0).unwrap());
        assert!(Actor::new(ActorNet::Diffusion { net, schedule }, head, 3).is_err());
    }

    #[test]
    fn discrete_records_and_targets() {
        let mlp = Mlp::init(MlpSpec::new(4, 8, 1, 6), 0, 0.01).unwrap();
        let actor = Actor::new(
            ActorNet::Mlp(mlp),
            Head::Softmax(SoftmaxHead::new(2, 3, 1.0).unwrap()),
            4,
        )
        .unwrap();
        let a = actor.action_from_record(&[2.0, 0.0]).unwrap();
        assert_eq!(a, Action::Discrete(vec![2, 0]));
        assert_eq!(actor.bc_target(&a), vec![-1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        assert!(actor.action_from_record(&[3.0, 0.0]).is_err());
        assert!(actor.action_from_record(&[0.5, 0.0]).is_err());
        assert_eq!(actor.steps(), 0);
        assert!(actor
            .sample_noise(&mut ChaCha8Rng::seed_from_u64(0))
            .a_k
            .is_empty());
    }

    #[test]
    fn mlp_cross_entropy_matches_log_prob() {
        let mlp = Mlp::init(MlpSpec::new(4, 8, 1, 3), 2, 1.0).unwrap();
        let actor = Actor::new(
            ActorNet::Mlp(mlp),
            Head::Softmax(SoftmaxHead::new(1, 3, 1.0).unwrap()),
            4,
        )
        .unwrap();
        let s = Tensor::row(vec![0.1, -0.2, 0.3, 0.4]);
        let a = Action::Discrete(vec![1]);
        let mut tape = Tape::new();
        let vars = actor.bind(&mut tape);
        let loss = actor
            .bc_loss(
                &mut tape,
                &vars,
                &s,
                std::slice::from_ref(&a),
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        let f = actor.forward_values(&s, &[]).unwrap();
        assert!(
            (tape.value(loss).item() + actor.head.log_prob(f.data(), &a).unwrap()).abs() < 1e-14
        );
    }
}
