use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Adaptive moment estimation. With `weight_decay > 0` the decay is applied
/// directly to the parameters before the moment step (decoupled weight
/// decay), otherwise this is plain Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::new(lr)
        }
    }

    /// One update: `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`,
    /// `p -= lr * m_hat / (sqrt(v_hat) + eps)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    detail: format!(
                        "param {:?}, grad {:?}, state {:?}",
                        p.shape(),
                        g.shape(),
                        m.shape()
                    ),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let p = params[i].data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                if self.weight_decay > 0.0 {
                    p[j] -= self.lr * self.weight_decay * p[j];
                }
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients so their joint L2 norm is at most `max_norm`. Returns the
/// norm before scaling.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        // Bias correction makes the first step exactly lr * g / (|g| + eps).
        let mut p = Tensor::row(vec![1.0, -2.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p], &[Tensor::row(vec![3.0, -0.5])])
            .unwrap();
        assert!((p.data()[0] - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((p.data()[1] - (-2.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_recurrence() {
        let grads = [0.5, -1.0, 0.25, 2.0, 0.0];
        let (lr, b1, b2, eps, wd) = (0.01, 0.9, 0.999, 1e-8, 0.1);
        for decay in [0.0, wd] {
            let mut p = Tensor::scalar(0.7);
            let mut opt = Adam::adamw(lr, decay);
            let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
            for (t, g) in grads.iter().enumerate() {
                opt.step(&mut [&mut p], &[Tensor::scalar(*g)]).unwrap();
                x *= 1.0 - lr * decay;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let k = (t + 1) as i32;
                x -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
                assert!((p.item() - x).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = Tensor::scalar(2.0);
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut p], &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.item(), 2.0);
        let mut adamw = Adam::adamw(0.1, 0.5);
        adamw.step(&mut [&mut p], &[Tensor::scalar(0.0)]).unwrap();
        assert!((p.item() - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn grad_clipping() {
        let mut g = vec![Tensor::row(vec![3.0]), Tensor::row(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].item(), 3.0);
        clip_grad_norm(&mut g, 1.0);
        let n = (g[0].item().powi(2) + g[1].item().powi(2)).sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}
