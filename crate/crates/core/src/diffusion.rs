//! Noise schedules, the forward (noising) process, the behavior-cloning
//! objective and the noise-conditioned denoising chain.
//!
//! Given a state and a pre-sampled [`NoiseStack`], the reverse chain
//! `a^{k-1} = mu(a^k, k, s) + sigma_k z^k` is a deterministic, differentiable
//! function of the network parameters.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{denoise_mean, NoisePredictor};

/// Default `beta_base` of the exploration transform.
pub const DEFAULT_BETA_BASE: f64 = 0.7;

/// Largest forward variance any schedule may produce.
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    Linear { beta_min: f64, beta_max: f64 },
    Cosine { s: f64 },
    Constant { beta: f64 },
}

impl ScheduleKind {
    /// The 1000-step `[1e-4, 0.02]` linear schedule rescaled to `k` steps
    /// (both ends multiplied by `1000 / k`, capped below one).
    pub fn default_linear(k: usize) -> Self {
        let scale = 1000.0 / k.max(1) as f64;
        ScheduleKind::Linear {
            beta_min: (1e-4 * scale).min(MAX_BETA),
            beta_max: (0.02 * scale).min(MAX_BETA),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear { .. } => "linear",
            ScheduleKind::Cosine { .. } => "cosine",
            ScheduleKind::Constant { .. } => "constant",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Betas before the eta transform.
    base_betas: Vec<f64>,
    betas: Vec<f64>,
    /// `alpha_bars[0] = 1`, `alpha_bars[k] = prod_{j<=k} (1 - beta_j)`.
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    pub eta: f64,
    pub beta_base: f64,
}

impl NoiseSchedule {
    /// Build directly from forward variances without range checks.
    pub fn from_betas(betas: Vec<f64>, kind: ScheduleKind) -> Self {
        let mut s = Self {
            kind,
            base_betas: betas.clone(),
            betas,
            alpha_bars: Vec::new(),
            sigmas: Vec::new(),
            eta: 1.0,
            beta_base: DEFAULT_BETA_BASE,
        };
        s.recompute();
        s
    }

    fn recompute(&mut self) {
        self.alpha_bars = std::iter::once(1.0)
            .chain(self.betas.iter().scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            }))
            .collect();
        self.sigmas = (1..=self.betas.len())
            .map(|k| {
                let prev = self.alpha_bars[k - 1];
                let cur = self.alpha_bars[k];
                let var = (1.0 - prev) / (1.0 - cur) * self.betas[k - 1];
                if var.is_finite() && var > 0.0 {
                    var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_k` for `k` in `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn base_betas(&self) -> &[f64] {
        &self.base_betas
    }

    /// `alpha_bar_k` for `k` in `0..=K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    /// Reverse-step standard deviation `sigma_k` for `k` in `1..=K`.
    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k - 1]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Exploration transform `beta'_k = beta_base (beta_k / beta_base)^eta`,
    /// applied to the untransformed schedule.
    pub fn apply_eta(&self, eta: f64) -> Result<Self> {
        self.apply_eta_with_base(eta, self.beta_base)
    }

    pub fn apply_eta_with_base(&self, eta: f64, beta_base: f64) -> Result<Self> {
        if !(eta >= 0.0) || !(beta_base > 0.0) {
            return Err(Error::invalid(format!(
                "eta {eta} and beta_base {beta_base}"
            )));
        }
        let mut out = self.clone();
        out.eta = eta;
        out.beta_base = beta_base;
        out.betas = if eta == 1.0 {
            self.base_betas.clone()
        } else {
            self.base_betas
                .iter()
                .map(|&b| (beta_base * (b / beta_base).powf(eta)).min(MAX_BETA))
                .collect()
        };
        out.recompute();
        Ok(out)
    }
}

pub fn make_schedule(k: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if k < 1 {
        return Err(Error::invalid(
            "a schedule needs at least one denoising step",
        ));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear { beta_min, beta_max } => (0..k)
            .map(|i| {
                if k == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (k - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine { s } => {
            let f = |t: f64| {
                (((t / k as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=k)
                .map(|i| (1.0 - f(i as f64) / f(i as f64 - 1.0)).min(MAX_BETA))
                .collect()
        }
        ScheduleKind::Constant { beta } => vec![beta; k],
    };
    if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
        return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
    }
    Ok(NoiseSchedule::from_betas(betas, kind))
}

/// Closed-form forward sample `sqrt(abar_k) a0 + sqrt(1 - abar_k) eps`.
pub fn q_sample(schedule: &NoiseSchedule, a0: &Tensor, k: usize, eps: &Tensor) -> Result<Tensor> {
    if k == 0 || k > schedule.steps() {
        return Err(Error::invalid(format!(
            "step {k} outside 1..={}",
            schedule.steps()
        )));
    }
    if a0.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "q_sample",
            detail: format!("{:?} vs {:?}", a0.shape(), eps.shape()),
        });
    }
    let (ca, ce) = (
        schedule.alpha_bar(k).sqrt(),
        (1.0 - schedule.alpha_bar(k)).sqrt(),
    );
    let data = a0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| ca * a + ce * e)
        .collect();
    Tensor::new(a0.shape().to_vec(), data)
}

/// Denoising-loss `mean_i ||eps_i - eps_theta(q_sample(a0_i, k_i, eps_i), k_i, s_i)||^2`
/// with `k_i` uniform on `1..=K`. Returns the scalar loss node.
pub fn bc_loss<N: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &N,
    tape: &mut Tape,
    params: &[Var],
    schedule: &NoiseSchedule,
    states: &Tensor,
    actions: &Tensor,
    rng: &mut R,
) -> Result<Var> {
    let n = actions.rows();
    if n == 0 {
        return Err(Error::invalid("behavior cloning on an empty batch"));
    }
    if states.rows() != n {
        return Err(Error::Shape {
            op: "bc_loss",
            detail: format!("{n} actions for {} states", states.rows()),
        });
    }
    let d = actions.cols();
    let kmax = schedule.steps();
    let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=kmax)).collect();
    let eps: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    let mut noisy = Vec::with_capacity(n * d);
    for (i, &k) in steps.iter().enumerate() {
        let (ca, ce) = (
            schedule.alpha_bar(k).sqrt(),
            (1.0 - schedule.alpha_bar(k)).sqrt(),
        );
        for j in 0..d {
            noisy.push(ca * actions.get(i, j) + ce * eps[i * d + j]);
        }
    }
    let a_k = tape.leaf(Tensor::matrix(n, d, noisy));
    let s = tape.leaf(states.clone());
    let target = tape.leaf(Tensor::matrix(n, d, eps));
    let pred = net.predict_eps(tape, params, a_k, &steps, s)?;
    let diff = tape.sub(target, pred)?;
    let sq = tape.square(diff);
    let per_row = tape.row_sum(sq);
    tape.mean(per_row)
}

/// Pre-sampled Gaussians `(a^K, z^1..z^K)` that fix one denoising chain.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseStack {
    pub a_k: Vec<f64>,
    /// `z[k - 1]` is `z^k`.
    pub z: Vec<Vec<f64>>,
}

impl NoiseStack {
    pub fn steps(&self) -> usize {
        self.z.len()
    }

    pub fn dim(&self) -> usize {
        self.a_k.len()
    }
}

pub fn sample_noise_stack<R: Rng + ?Sized>(k: usize, dim: usize, rng: &mut R) -> NoiseStack {
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let a_k = draw();
    let z = (0..k).map(|_| draw()).collect();
    NoiseStack { a_k, z }
}

/// `a^0 = f_theta(s, a^K, z^{1:K})` for a batch of states, one noise stack per
/// row. `s` has shape `(n, obs_dim)`; the result is `(n, action_dim)`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_deterministic<N: NoisePredictor + ?Sized>(
    net: &N,
    x0_clip: Option<f64>,
    tape: &mut Tape,
    params: &[Var],
    schedule: &NoiseSchedule,
    s: Var,
    stacks: &[&NoiseStack],
) -> Result<Var> {
    let kmax = schedule.steps();
    let d = net.action_dim();
    let n = stacks.len();
    if tape.value(s).rows() != n {
        return Err(Error::invalid(format!(
            "{n} noise stacks for {} states",
            tape.value(s).rows()
        )));
    }
    for st in stacks {
        if st.steps() != kmax || st.dim() != d {
            return Err(Error::invalid(format!(
                "noise stack with {} steps of dim {} for a {kmax}-step chain of dim {d}",
                st.steps(),
                st.dim()
            )));
        }
    }
    let start: Vec<f64> = stacks
        .iter()
        .flat_map(|st| st.a_k.iter().copied())
        .collect();
    let mut a = tape.leaf(Tensor::matrix(n, d, start));
    for k in (1..=kmax).rev() {
        let mu = denoise_mean(net, x0_clip, tape, params, a, k, s, schedule)?;
        let sigma = schedule.sigma(k);
        a = if sigma > 0.0 {
            let z: Vec<f64> = stacks
                .iter()
                .flat_map(|st| st.z[k - 1].iter().map(|v| sigma * v))
                .collect();
            let z = tape.leaf(Tensor::matrix(n, d, z));
            tape.add(mu, z)?
        } else {
            mu
        };
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, flatten, unflatten};
    use crate::nets::DenoisingNet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_schedule_products() {
        let s = make_schedule(2, ScheduleKind::Constant { beta: 0.1 }).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn single_step_has_zero_sigma() {
        for kind in [
            ScheduleKind::default_linear(1),
            ScheduleKind::Cosine { s: 0.008 },
            ScheduleKind::Constant { beta: 0.3 },
        ] {
            let s = make_schedule(1, kind).unwrap();
            assert_eq!(s.sigma(1), 0.0);
        }
    }

    #[test]
    fn linear_alpha_bar_matches_direct_product() {
        let s = make_schedule(
            5,
            ScheduleKind::Linear {
                beta_min: 1e-4,
                beta_max: 0.02,
            },
        )
        .unwrap();
        // Oracle: betas written out by hand, product taken directly.
        let betas = [
            1e-4,
            1e-4 + 0.25 * 0.0199,
            1e-4 + 0.5 * 0.0199,
            1e-4 + 0.75 * 0.0199,
            0.02,
        ];
        let direct: f64 = betas.iter().map(|b| 1.0 - b).product();
        assert!((s.alpha_bar(5) - direct).abs() < 1e-12);
    }

    #[test]
    fn schedule_invariants() {
        for k in [1, 2, 5, 10, 20] {
            for kind in [
                ScheduleKind::default_linear(k),
                ScheduleKind::Cosine { s: 0.008 },
            ] {
                let s = make_schedule(k, kind).unwrap();
                assert_eq!(s.sigma(1), 0.0);
                for i in 1..=k {
                    assert!(s.beta(i) > 0.0 && s.beta(i) < 1.0);
                    assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
                    let var = (1.0 - s.alpha_bar(i - 1)) / (1.0 - s.alpha_bar(i)) * s.beta(i);
                    assert!((s.sigma(i).powi(2) - var).abs() < 1e-14);
                }
            }
        }
        assert!(make_schedule(0, ScheduleKind::Constant { beta: 0.1 }).is_err());
    }

    #[test]
    fn eta_transform_identities() {
        let s = make_schedule(5, ScheduleKind::default_linear(5)).unwrap();
        assert_eq!(s.apply_eta(1.0).unwrap().betas(), s.betas());
        assert!(s.apply_eta(0.0).unwrap().betas().iter().all(|&b| b == 0.7));
        let fixed = make_schedule(3, ScheduleKind::Constant { beta: 0.7 }).unwrap();
        for eta in [0.0, 0.03, 0.5, 2.0] {
            for &b in fixed.apply_eta(eta).unwrap().betas() {
                assert!((b - 0.7).abs() < 1e-15);
            }
        }
        // Monotone in beta for eta > 0.
        let t = s.apply_eta(0.3).unwrap();
        for w in t.betas().windows(2) {
            assert!(w[0] < w[1]);
        }
        assert_eq!(t.sigma(1), 0.0);
    }

    #[test]
    fn q_sample_cases() {
        let a0 = Tensor::row(vec![0.5, -2.0]);
        let eps = Tensor::row(vec![1.0, 0.3]);
        let flat = NoiseSchedule::from_betas(vec![0.0, 0.0], ScheduleKind::Constant { beta: 0.0 });
        assert_eq!(q_sample(&flat, &a0, 2, &eps).unwrap().data(), a0.data());
        let s = make_schedule(2, ScheduleKind::Constant { beta: 0.1 }).unwrap();
        let zero = Tensor::zeros(&[1, 2]);
        let out = q_sample(&s, &zero, 2, &eps).unwrap();
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert!((o - 0.19f64.sqrt() * e).abs() < 1e-15);
        }
        assert!(q_sample(&s, &a0, 3, &eps).is_err());
    }

    #[test]
    fn q_sample_moments() {
        let s = make_schedule(4, ScheduleKind::default_linear(4)).unwrap();
        let k = 2;
        let a0 = 0.8;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let out = q_sample(
            &s,
            &Tensor::matrix(n, 1, vec![a0; n]),
            k,
            &Tensor::matrix(n, 1, eps),
        )
        .unwrap();
        let mean = out.sum() / n as f64;
        let var = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let (m_true, v_true) = (s.alpha_bar(k).sqrt() * a0, 1.0 - s.alpha_bar(k));
        let se_mean = (v_true / n as f64).sqrt();
        let se_var = v_true * (2.0 / n as f64).sqrt();
        assert!((mean - m_true).abs() < 3.0 * se_mean, "{mean} vs {m_true}");
        assert!((var - v_true).abs() < 3.0 * se_var, "{var} vs {v_true}");
    }

    struct ZeroEps;

    impl NoisePredictor for ZeroEps {
        fn action_dim(&self) -> usize {
            3
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

    /// Recovers the exact injected noise from `a^k` given the clean actions,
    /// which it looks up by the state's first coordinate.
    struct OracleEps {
        schedule: NoiseSchedule,
        actions: Tensor,
    }

    impl NoisePredictor for OracleEps {
        fn action_dim(&self) -> usize {
            self.actions.cols()
        }
        fn bind(&self, _: &mut Tape) -> Vec<Var> {
            Vec::new()
        }
        fn predict_eps(
            &self,
            tape: &mut Tape,
            _: &[Var],
            a_k: Var,
            steps: &[usize],
            s: Var,
        ) -> Result<Var> {
            let ak = tape.value(a_k).clone();
            let sv = tape.value(s).clone();
            let d = ak.cols();
            let mut out = Vec::new();
            for (i, &k) in steps.iter().enumerate() {
                let idx = sv.get(i, 0) as usize;
                let abar = self.schedule.alpha_bar(k);
                for j in 0..d {
                    out.push(
                        (ak.get(i, j) - abar.sqrt() * self.actions.get(idx, j))
                            / (1.0 - abar).sqrt(),
                    );
                }
            }
            Ok(tape.leaf(Tensor::matrix(steps.len(), d, out)))
        }
    }

    #[test]
    fn bc_loss_zero_predictor_expectation() {
        let s = make_schedule(5, ScheduleKind::default_linear(5)).unwrap();
        let n = 20_000;
        let states = Tensor::zeros(&[n, 2]);
        let actions = Tensor::full(&[n, 3], 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let loss = bc_loss(&ZeroEps, &mut tape, &[], &s, &states, &actions, &mut rng).unwrap();
        let loss = tape.value(loss).item();
        // ||eps||^2 ~ chi^2_3: mean 3, variance 6.
        let se = (6.0 / n as f64).sqrt();
        assert!((loss - 3.0).abs() < 3.0 * se, "{loss}");
    }

    #[test]
    fn bc_loss_oracle_is_zero_and_empty_rejected() {
        let s = make_schedule(5, ScheduleKind::default_linear(5)).unwrap();
        let actions = Tensor::matrix(4, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.0]);
        let states = Tensor::matrix(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let oracle = OracleEps {
            schedule: s.clone(),
            actions: actions.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let loss = bc_loss(&oracle, &mut tape, &[], &s, &states, &actions, &mut rng).unwrap();
        assert!(tape.value(loss).item() < 1e-20);
        let empty = Tensor::zeros(&[0, 2]);
        assert!(bc_loss(
            &oracle,
            &mut tape,
            &[],
            &s,
            &Tensor::zeros(&[0, 1]),
            &empty,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn bc_loss_gradient_matches_fd() {
        let s = make_schedule(5, ScheduleKind::default_linear(5)).unwrap();
        let net = DenoisingNet::new(2, 3, 8, 2, false, 3).unwrap();
        let shapes = net.mlp.spec.param_shapes();
        let states = Tensor::matrix(3, 3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0, 0.5, 0.5, -0.5]);
        let actions = Tensor::matrix(3, 2, vec![0.3, -0.3, 0.9, 0.1, -0.5, 0.2]);
        let err = finite_diff_check(
            |tape, flat| {
                let p = unflatten(tape, flat, &shapes)?;
                let mut rng = ChaCha8Rng::seed_from_u64(42);
                bc_loss(&net, tape, &p, &s, &states, &actions, &mut rng)
            },
            &flatten(&net.mlp.params),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn noise_stack_sampling() {
        let a = sample_noise_stack(5, 3, &mut ChaCha8Rng::seed_from_u64(8));
        let b = sample_noise_stack(5, 3, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
        assert_eq!(
            sample_noise_stack(1, 2, &mut ChaCha8Rng::seed_from_u64(0))
                .z
                .len(),
            1
        );

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut vals = Vec::new();
        while vals.len() < 100_000 {
            let st = sample_noise_stack(4, 5, &mut rng);
            vals.extend(st.a_k);
            vals.extend(st.z.into_iter().flatten());
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 / n.sqrt(), "{mean}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "{var}");
    }

    fn chain(
        net: &DenoisingNet,
        s: &NoiseSchedule,
        states: &Tensor,
        stacks: &[NoiseStack],
    ) -> Tensor {
        let refs: Vec<&NoiseStack> = stacks.iter().collect();
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let sv = tape.leaf(states.clone());
        let a0 = denoise_deterministic(net, net.x0_clip, &mut tape, &p, s, sv, &refs).unwrap();
        tape.value(a0).clone()
    }

    #[test]
    fn single_step_chain_is_the_mean() {
        let s = make_schedule(1, ScheduleKind::default_linear(1)).unwrap();
        let net = DenoisingNet::new(2, 3, 8, 2, false, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = sample_noise_stack(1, 2, &mut rng);
        let states = Tensor::matrix(1, 3, vec![0.2, 0.1, -0.4]);
        let a0 = chain(&net, &s, &states, std::slice::from_ref(&stack));

        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let ak = tape.leaf(Tensor::row(stack.a_k.clone()));
        let sv = tape.leaf(states.clone());
        let mu = denoise_mean(&net, None, &mut tape, &p, ak, 1, sv, &s).unwrap();
        assert_eq!(tape.value(mu).data(), a0.data());
    }

    #[test]
    fn chain_is_deterministic_and_batch_independent() {
        let s = make_schedule(5, ScheduleKind::default_linear(5)).unwrap();
        let net = DenoisingNet::new(2, 3, 16, 3, true, 1)
            .unwrap()
            .with_x0_clip(Some(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stacks: Vec<_> = (0..6).map(|_| sample_noise_stack(5, 2, &mut rng)).collect();
        let states = Tensor::matrix(6, 3, (0..18).map(|i| (i as f64 * 0.37).sin()).collect());
        let a = chain(&net, &s, &states, &stacks);
        let b = chain(&net, &s, &states, &stacks);
        assert_eq!(a.data(), b.data());
        // Row 4 alone reproduces its batched value exactly.
        let alone = chain(
            &net,
            &s,
            &Tensor::row(states.row_slice(4).to_vec()),
            &stacks[4..5],
        );
        assert_eq!(alone.data(), a.row_slice(4));
    }

    #[test]
    fn chain_rejects_mismatched_stack() {
        let s = make_schedule(5, ScheduleKind::default_linear(5)).unwrap();
        let net = DenoisingNet::new(2, 3, 8, 1, false, 1).unwrap();
        let stack = sample_noise_stack(4, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let sv = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(denoise_deterministic(&net, None, &mut tape, &p, &s, sv, &[&stack]).is_err());
    }

    #[test]
    fn fresh_noise_gives_spread() {
        let s = make_schedule(5, ScheduleKind::default_linear(5)).unwrap();
        let net = DenoisingNet::new(1, 2, 8, 2, false, 2)
            .unwrap()
            .with_x0_clip(Some(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stacks: Vec<_> = (0..200)
            .map(|_| sample_noise_stack(5, 1, &mut rng))
            .collect();
        let out = chain(&net, &s, &Tensor::zeros(&[200, 2]), &stacks);
        let mean = out.sum() / 200.0;
        let var = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 200.0;
        assert!(var > 1e-3, "{var}");
    }

    #[test]
    fn chain_gradient_through_five_steps() {
        let s = make_schedule(5, ScheduleKind::default_linear(5)).unwrap();
        let mut net = DenoisingNet::new(2, 3, 8, 2, false, 6).unwrap();
        let n = net.mlp.params.len();
        net.mlp.params[n - 2].scale_in_place(30.0);
        let shapes = net.mlp.spec.param_shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stacks: Vec<_> = (0..3).map(|_| sample_noise_stack(5, 2, &mut rng)).collect();
        let refs: Vec<&NoiseStack> = stacks.iter().collect();
        let states = Tensor::matrix(3, 3, vec![0.3, -0.1, 0.2, 1.0, 0.5, -0.5, 0.0, 0.0, 0.9]);
        let err = finite_diff_check(
            |tape, flat| {
                let p = unflatten(tape, flat, &shapes)?;
                let sv = tape.leaf(states.clone());
                let a0 = denoise_deterministic(&net, None, tape, &p, &s, sv, &refs)?;
                let sq = tape.square(a0);
                Ok(tape.sum(sq))
            },
            &flatten(&net.mlp.params),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
