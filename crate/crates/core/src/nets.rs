//! Multilayer perceptrons: the noise-prediction network, the critic and the
//! plain Gaussian-MLP actor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Mish,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Mish => "mish",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mish" => Ok(Activation::Mish),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::invalid(format!("unknown activation '{s}'"))),
        }
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Mish => tape.mish(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Layout of a fully connected network.
///
/// `num_layers` counts hidden layers. The first maps the input to
/// `hidden_width`; with `residual` set, every later hidden layer adds its
/// activation to the incoming hidden stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub num_layers: usize,
    pub residual: bool,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_width: usize,
        num_layers: usize,
        output_dim: usize,
    ) -> Self {
        Self {
            input_dim,
            hidden_width,
            num_layers,
            residual: false,
            output_dim,
            activation: Activation::Mish,
        }
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.output_dim == 0 {
            return Err(Error::invalid(format!("zero-sized layer in {self:?}")));
        }
        if self.num_layers == 0 {
            return Err(Error::invalid("an MLP needs at least one hidden layer"));
        }
        Ok(())
    }

    /// Weight and bias shapes in declaration order.
    pub fn param_shapes(&self) -> Vec<[usize; 2]> {
        let mut shapes = Vec::with_capacity(2 * (self.num_layers + 1));
        let mut fan_in = self.input_dim;
        for _ in 0..self.num_layers {
            shapes.push([fan_in, self.hidden_width]);
            shapes.push([1, self.hidden_width]);
            fan_in = self.hidden_width;
        }
        shapes.push([fan_in, self.output_dim]);
        shapes.push([1, self.output_dim]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s[0] * s[1]).sum()
    }
}

/// Semi-orthogonal `(rows, cols)` matrix via Gram-Schmidt on Gaussian draws,
/// rescaled so entries have standard deviation `1/sqrt(rows)`.
fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (long, short) = if rows >= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    // `short` orthonormal vectors of length `long`.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    // Unit vectors have entry std 1/sqrt(long); rescale to 1/sqrt(fan_in).
    let gain = (long as f64 / rows as f64).sqrt();
    let mut data = vec![0.0; rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            let (r, c) = if rows >= cols { (i, j) } else { (j, i) };
            data[r * cols + c] = gain * x;
        }
    }
    Tensor::matrix(rows, cols, data)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<Tensor>,
}

impl Mlp {
    /// Orthogonal hidden weights, zero biases, output weights multiplied by
    /// `output_scale`. Deterministic in `seed`.
    pub fn init(spec: MlpSpec, seed: u64, output_scale: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = spec.param_shapes();
        let last_w = shapes.len() - 2;
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i % 2 == 1 {
                    Tensor::zeros(s)
                } else {
                    let mut w = orthogonal(s[0], s[1], &mut rng);
                    if i == last_w {
                        w.scale_in_place(output_scale);
                    }
                    w
                }
            })
            .collect();
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if params.len() != shapes.len()
            || params
                .iter()
                .zip(&shapes)
                .any(|(p, s)| p.shape() != s.as_slice())
        {
            return Err(Error::Shape {
                op: "mlp params",
                detail: format!("expected {shapes:?}"),
            });
        }
        Ok(Self { spec, params })
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Forward pass `(n, input_dim) -> (n, output_dim)` using parameter
    /// handles previously bound on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        mlp_forward(&self.spec, tape, params, x)
    }

    /// Hidden-layer activations, input first, for layer-wise inspection.
    pub fn hidden_states(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let mut h = tape.leaf(x.clone());
        let mut out = vec![x.clone()];
        for l in 0..self.spec.num_layers {
            h = hidden_layer(
                &self.spec,
                &mut tape,
                params[2 * l],
                params[2 * l + 1],
                h,
                l,
            )?;
            out.push(tape.value(h).clone());
        }
        Ok(out)
    }
}

fn hidden_layer(
    spec: &MlpSpec,
    tape: &mut Tape,
    w: Var,
    b: Var,
    h: Var,
    layer: usize,
) -> Result<Var> {
    let z = tape.matmul(h, w)?;
    let z = tape.add_row(z, b)?;
    let a = spec.activation.apply(tape, z);
    if spec.residual && layer > 0 {
        tape.add(h, a)
    } else {
        Ok(a)
    }
}

pub fn mlp_forward(spec: &MlpSpec, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
    if params.len() != 2 * (spec.num_layers + 1) {
        return Err(Error::invalid(format!(
            "MLP with {} hidden layers needs {} parameter tensors, got {}",
            spec.num_layers,
            2 * (spec.num_layers + 1),
            params.len()
        )));
    }
    let mut h = x;
    for l in 0..spec.num_layers {
        h = hidden_layer(spec, tape, params[2 * l], params[2 * l + 1], h, l)?;
    }
    let n = params.len();
    let y = tape.matmul(h, params[n - 2])?;
    tape.add_row(y, params[n - 1])
}

/// Sinusoidal embedding of a denoising step: `[sin(k w_i), cos(k w_i)]`
/// pairs with `w_i = 10000^(-2i/dim)`.
pub fn timestep_embedding(k: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let x = k as f64 * w;
        out.push(x.sin());
        out.push(x.cos());
    }
    out
}

pub const TIMESTEP_EMBED_DIM: usize = 16;

/// Noise-prediction network `eps(a^k, k, s)`.
pub trait NoisePredictor {
    fn action_dim(&self) -> usize;

    fn bind(&self, tape: &mut Tape) -> Vec<Var>;

    /// `a_k: (n, action_dim)`, `s: (n, obs_dim)`, one step index per row.
    fn predict_eps(
        &self,
        tape: &mut Tape,
        params: &[Var],
        a_k: Var,
        steps: &[usize],
        s: Var,
    ) -> Result<Var>;
}

/// MLP over `[a^k, embed(k), s]` predicting the injected noise.
#[derive(Clone, Debug)]
pub struct DenoisingNet {
    pub mlp: Mlp,
    pub action_dim: usize,
    pub obs_dim: usize,
    /// When set, the predicted clean action is clamped to `[-c, c]` before
    /// the posterior mean is formed.
    pub x0_clip: Option<f64>,
}

impl DenoisingNet {
    pub fn new(
        action_dim: usize,
        obs_dim: usize,
        hidden_width: usize,
        num_layers: usize,
        residual: bool,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self::spec_for(action_dim, obs_dim, hidden_width, num_layers, residual);
        Ok(Self {
            mlp: Mlp::init(spec, seed, 0.01)?,
            action_dim,
            obs_dim,
            x0_clip: None,
        })
    }

    pub fn spec_for(
        action_dim: usize,
        obs_dim: usize,
        hidden_width: usize,
        num_layers: usize,
        residual: bool,
    ) -> MlpSpec {
        MlpSpec::new(
            action_dim + TIMESTEP_EMBED_DIM + obs_dim,
            hidden_width,
            num_layers,
            action_dim,
        )
        .with_residual(residual)
    }

    pub fn from_mlp(mlp: Mlp, obs_dim: usize) -> Result<Self> {
        let action_dim = mlp.spec.output_dim;
        if mlp.spec.input_dim != action_dim + TIMESTEP_EMBED_DIM + obs_dim {
            return Err(Error::invalid(format!(
                "denoiser input {} != action {action_dim} + embed {TIMESTEP_EMBED_DIM} + obs {obs_dim}",
                mlp.spec.input_dim
            )));
        }
        Ok(Self {
            mlp,
            action_dim,
            obs_dim,
            x0_clip: None,
        })
    }

    pub fn with_x0_clip(mut self, clip: Option<f64>) -> Self {
        self.x0_clip = clip;
        self
    }
}

impl NoisePredictor for DenoisingNet {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.mlp.bind(tape)
    }

    fn predict_eps(
        &self,
        tape: &mut Tape,
        params: &[Var],
        a_k: Var,
        steps: &[usize],
        s: Var,
    ) -> Result<Var> {
        let rows = tape.value(a_k).rows();
        if steps.len() != rows {
            return Err(Error::invalid(format!(
                "{} step indices for {rows} rows",
                steps.len()
            )));
        }
        let emb: Vec<f64> = steps
            .iter()
            .flat_map(|&k| timestep_embedding(k, TIMESTEP_EMBED_DIM))
            .collect();
        let emb = tape.leaf(Tensor::matrix(rows, TIMESTEP_EMBED_DIM, emb));
        let x = tape.concat(&[a_k, emb, s])?;
        self.mlp.forward(tape, params, x)
    }
}

/// Posterior mean `mu(a^k, k, s)` of one reverse step, reconstructed from the
/// predicted noise:
/// `mu = (a^k - beta_k / sqrt(1 - abar_k) * eps) / sqrt(alpha_k)`.
///
/// With `x0_clip`, the same mean is formed through the clamped clean-action
/// estimate, which agrees with the formula above whenever no clamping occurs.
#[allow(clippy::too_many_arguments)]
pub fn denoise_mean<N: NoisePredictor + ?Sized>(
    net: &N,
    x0_clip: Option<f64>,
    tape: &mut Tape,
    params: &[Var],
    a_k: Var,
    k: usize,
    s: Var,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    if k == 0 || k > schedule.steps() {
        return Err(Error::invalid(format!(
            "denoising step {k} outside 1..={}",
            schedule.steps()
        )));
    }
    let rows = tape.value(a_k).rows();
    let eps = net.predict_eps(tape, params, a_k, &vec![k; rows], s)?;
    let beta = schedule.beta(k);
    let alpha = 1.0 - beta;
    let abar = schedule.alpha_bar(k);
    match x0_clip {
        None => {
            let coef = if beta == 0.0 {
                0.0
            } else {
                beta / (1.0 - abar).sqrt()
            };
            let corr = tape.scale(eps, coef);
            let diff = tape.sub(a_k, corr)?;
            Ok(tape.scale(diff, 1.0 / alpha.sqrt()))
        }
        Some(c) => {
            let abar_prev = schedule.alpha_bar(k - 1);
            let noise = tape.scale(eps, (1.0 - abar).sqrt());
            let x0 = tape.sub(a_k, noise)?;
            let x0 = tape.scale(x0, 1.0 / abar.sqrt());
            let x0 = tape.clamp(x0, -c, c);
            let c1 = abar_prev.sqrt() * beta / (1.0 - abar);
            let c2 = alpha.sqrt() * (1.0 - abar_prev) / (1.0 - abar);
            let t1 = tape.scale(x0, c1);
            let t2 = tape.scale(a_k, c2);
            tape.add(t1, t2)
        }
    }
}

/// State-value network `V(s)`.
#[derive(Clone, Debug)]
pub struct CriticNet {
    pub mlp: Mlp,
}

impl CriticNet {
    pub fn new(obs_dim: usize, hidden_width: usize, num_layers: usize, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(obs_dim, hidden_width, num_layers, 1);
        Ok(Self {
            mlp: Mlp::init(spec, seed, 1.0)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.mlp.bind(tape)
    }

    /// `(n, obs_dim) -> (n, 1)`.
    pub fn value(&self, tape: &mut Tape, params: &[Var], s: Var) -> Result<Var> {
        self.mlp.forward(tape, params, s)
    }

    pub fn values(&self, states: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let s = tape.leaf(states.clone());
        let v = self.value(&mut tape, &params, s)?;
        Ok(tape.value(v).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, flatten, unflatten};
    use crate::diffusion::{make_schedule, ScheduleKind};

    #[test]
    fn init_is_deterministic() {
        let spec = MlpSpec::new(5, 16, 3, 2);
        let a = Mlp::init(spec.clone(), 9, 1.0).unwrap();
        let b = Mlp::init(spec, 9, 1.0).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn zero_width_rejected() {
        assert!(Mlp::init(MlpSpec::new(5, 0, 2, 2), 0, 1.0).is_err());
        assert!(Mlp::init(MlpSpec::new(5, 8, 0, 2), 0, 1.0).is_err());
    }

    #[test]
    fn init_std_tracks_fan_in() {
        // Empirical oracle: sample std of each weight matrix over 10 seeds.
        let spec = MlpSpec::new(24, 64, 3, 8);
        let shapes = spec.param_shapes();
        for (i, s) in shapes.iter().enumerate().step_by(2) {
            let mut vals = Vec::new();
            for seed in 0..10 {
                let m = Mlp::init(spec.clone(), seed, 1.0).unwrap();
                vals.extend_from_slice(m.params[i].data());
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let target = 1.0 / (s[0] as f64).sqrt();
            assert!(
                (std / target - 1.0).abs() < 0.2,
                "layer {i} {s:?}: std {std} vs {target}"
            );
        }
    }

    #[test]
    fn residual_with_zero_branch_is_identity() {
        let spec = MlpSpec::new(3, 8, 4, 2).with_residual(true);
        let mut m = Mlp::init(spec, 1, 1.0).unwrap();
        for l in 1..4 {
            m.params[2 * l] = Tensor::zeros(m.params[2 * l].shape());
        }
        let x = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7]);
        let h = m.hidden_states(&x).unwrap();
        for l in 2..=4 {
            assert_eq!(h[l].data(), h[1].data(), "layer {l}");
        }
    }

    #[test]
    fn embedding_pairs_are_unit() {
        let e = timestep_embedding(7, 16);
        assert_eq!(e.len(), 16);
        for p in e.chunks(2) {
            assert!((p[0] * p[0] + p[1] * p[1] - 1.0).abs() < 1e-12);
        }
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= (8.0f64).sqrt() + 1e-12);
    }

    /// Predictor that always outputs zero noise.
    struct ZeroEps(usize);

    impl NoisePredictor for ZeroEps {
        fn action_dim(&self) -> usize {
            self.0
        }
        fn bind(&self, _: &mut Tape) -> Vec<Var> {
            Vec::new()
        }
        fn predict_eps(
            &self,
            tape: &mut Tape,
            _: &[Var],
            a_k: Var,
            _: &[usize],
            _: Var,
        ) -> Result<Var> {
            let shape = tape.shape(a_k).to_vec();
            Ok(tape.leaf(Tensor::zeros(&shape)))
        }
    }

    #[test]
    fn denoise_mean_with_zero_eps() {
        let a = Tensor::matrix(1, 2, vec![0.9, -1.8]);
        for (beta, expected) in [(0.0, [0.9, -1.8]), (0.19, [1.0, -2.0])] {
            let schedule = make_schedule(1, ScheduleKind::Constant { beta }).unwrap_or_else(|_| {
                // beta = 0 is outside the schedule invariants; build it directly
                NoiseSchedule::from_betas(vec![beta], ScheduleKind::Constant { beta })
            });
            let mut tape = Tape::new();
            let ak = tape.leaf(a.clone());
            let s = tape.leaf(Tensor::zeros(&[1, 1]));
            let mu = denoise_mean(&ZeroEps(2), None, &mut tape, &[], ak, 1, s, &schedule).unwrap();
            for (x, y) in tape.value(mu).data().iter().zip(expected) {
                assert!((x - y).abs() < 1e-12, "beta {beta}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn denoise_mean_rejects_bad_step() {
        let schedule = make_schedule(3, ScheduleKind::Constant { beta: 0.1 }).unwrap();
        let mut tape = Tape::new();
        let ak = tape.leaf(Tensor::zeros(&[1, 1]));
        let s = tape.leaf(Tensor::zeros(&[1, 1]));
        assert!(denoise_mean(&ZeroEps(1), None, &mut tape, &[], ak, 0, s, &schedule).is_err());
        assert!(denoise_mean(&ZeroEps(1), None, &mut tape, &[], ak, 4, s, &schedule).is_err());
    }

    #[test]
    fn clipped_mean_matches_plain_when_inactive() {
        let schedule = make_schedule(5, ScheduleKind::default_linear(5)).unwrap();
        let net = DenoisingNet::new(2, 3, 16, 2, false, 4).unwrap();
        let a = Tensor::matrix(2, 2, vec![0.1, -0.05, 0.02, 0.08]);
        let s = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.3, 0.0, 0.5]);
        let run = |clip| {
            let mut tape = Tape::new();
            let p = net.bind(&mut tape);
            let ak = tape.leaf(a.clone());
            let sv = tape.leaf(s.clone());
            let mu = denoise_mean(&net, clip, &mut tape, &p, ak, 2, sv, &schedule).unwrap();
            tape.value(mu).clone()
        };
        let (plain, clipped) = (run(None), run(Some(10.0)));
        for (x, y) in plain.data().iter().zip(clipped.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn denoise_mean_gradient_matches_fd() {
        let schedule = make_schedule(5, ScheduleKind::default_linear(5)).unwrap();
        let mut net = DenoisingNet::new(2, 3, 8, 2, true, 5).unwrap();
        // Larger output layer so the gradient is not dominated by the identity path.
        let n = net.mlp.params.len();
        net.mlp.params[n - 2].scale_in_place(50.0);
        let shapes = net.mlp.spec.param_shapes();
        let theta = flatten(&net.mlp.params);
        let a = Tensor::matrix(2, 2, vec![0.4, -0.2, 1.1, 0.3]);
        let s = Tensor::matrix(2, 3, vec![0.5, -0.5, 0.2, 0.0, 1.0, -1.0]);
        let err = finite_diff_check(
            |tape, flat| {
                let p = unflatten(tape, flat, &shapes)?;
                let ak = tape.leaf(a.clone());
                let sv = tape.leaf(s.clone());
                let mu = denoise_mean(&net, None, tape, &p, ak, 3, sv, &schedule)?;
                let sq = tape.square(mu);
                Ok(tape.sum(sq))
            },
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn critic_zero_output_layer_and_gradient() {
        let mut critic = CriticNet::new(3, 16, 2, 2).unwrap();
        let s = Tensor::matrix(3, 3, vec![0.1, 0.2, 0.3, 1.0, -1.0, 0.5, 2.0, 0.0, -2.0]);
        let v1 = critic.values(&s).unwrap();
        assert_eq!(v1, critic.values(&s).unwrap());

        let shapes = critic.mlp.spec.param_shapes();
        let theta = flatten(&critic.mlp.params);
        let err = finite_diff_check(
            |tape, flat| {
                let p = unflatten(tape, flat, &shapes)?;
                let sv = tape.leaf(s.clone());
                let v = mlp_forward(&critic.mlp.spec, tape, &p, sv)?;
                let sq = tape.square(v);
                tape.mean(sq)
            },
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");

        let n = critic.mlp.params.len();
        critic.mlp.params[n - 2] = Tensor::zeros(critic.mlp.params[n - 2].shape());
        assert!(critic.values(&s).unwrap().iter().all(|&v| v == 0.0));
    }
}
