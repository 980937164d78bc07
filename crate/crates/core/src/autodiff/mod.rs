//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod tape;
mod tensor;

pub(crate) use tape::softmax_rows;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Compare the tape gradient of a scalar function against central
/// differences.
///
/// `f` builds the scalar on a fresh tape from the leaf holding `theta`.
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, theta: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!(
            "finite difference step must be positive, got {step}"
        )));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone());
        let y = f(&mut tape, x)?;
        let v = tape.value(y);
        if !v.is_scalar() {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("f(theta) = {v}")));
        }
        Ok(v)
    };

    eval(theta)?;
    let mut tape = Tape::new();
    let x = tape.leaf(theta.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.get(x);

    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Split a `(1, P)` flat parameter vector into 2-D views of the given
/// shapes, in order.
pub fn unflatten(tape: &mut Tape, flat: Var, shapes: &[[usize; 2]]) -> Result<Vec<Var>> {
    let total: usize = shapes.iter().map(|s| s[0] * s[1]).sum();
    let flat = if tape.shape(flat) == [1, total] {
        flat
    } else {
        tape.reshape(flat, &[1, total])?
    };
    let mut offset = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for s in shapes {
        let n = s[0] * s[1];
        let piece = tape.slice_cols(flat, offset, offset + n)?;
        out.push(tape.reshape(piece, s)?);
        offset += n;
    }
    Ok(out)
}

/// Concatenate tensors into a single `(1, P)` row.
pub fn flatten(tensors: &[Tensor]) -> Tensor {
    Tensor::row(
        tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
    }

    #[test]
    fn tanh_of_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.tanh(x);
        assert_eq!(t.value(y).item(), 0.0);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let i = t.leaf(Tensor::identity(3));
        let xv = random(&mut rng, 3, 4);
        let x = t.leaf(xv.clone());
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), &xv);
    }

    #[test]
    fn softmax_equal_logits() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 1.0, 1.0]));
        let p = t.softmax(x, 1.0).unwrap();
        for &v in t.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x);
        assert_eq!(t.backward(y).unwrap().get(x).item(), 6.0);
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let c = t.leaf(Tensor::scalar(5.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0]);
        assert_eq!(g.get(c).item(), 1.0);
    }

    #[test]
    fn errors_are_reported() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]"), "{err}");
        assert!(t.matmul(a, a).is_err());
        assert!(matches!(t.log(a), Err(Error::Domain { op: "log", .. })));
        assert!(matches!(t.backward(a), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn outer_product_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 4, 1);
        let w = random(&mut rng, 3, 4);
        let err = finite_diff_check(
            |t, w| {
                let w = t.reshape(w, &[3, 4])?;
                let xv = t.leaf(x.clone());
                let y = t.matmul(w, xv)?;
                Ok(t.sum(y))
            },
            &w,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");

        // Structure: d/dW_ij sum(Wx) = x_j.
        let mut t = Tape::new();
        let wv = t.leaf(w.clone());
        let xv = t.leaf(x.clone());
        let y = t.matmul(wv, xv).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap().get(wv);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(g.get(i, j), x.data()[j]);
            }
        }
    }

    #[test]
    fn fd_check_examples() {
        let theta = Tensor::row(vec![2.0]);
        let err = finite_diff_check(|t, x| Ok(t.square(x)), &theta, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
        let err = finite_diff_check(|t, _| Ok(t.leaf(Tensor::scalar(4.0))), &theta, 1e-5).unwrap();
        assert_eq!(err, 0.0);
        let bad = finite_diff_check(|t, x| t.log(x).map(|y| t.scale(y, f64::NAN)), &theta, 1e-5);
        assert!(bad.is_err());
        assert!(finite_diff_check(|t, x| Ok(t.square(x)), &theta, 0.0).is_err());
    }

    type Unary = fn(&mut Tape, Var) -> Result<Var>;

    /// Every primitive reduced to a scalar through a random linear functional.
    fn primitives() -> Vec<(&'static str, Unary)> {
        vec![
            ("tanh", |t, x| Ok(t.tanh(x))),
            ("mish", |t, x| Ok(t.mish(x))),
            ("exp", |t, x| Ok(t.exp(x))),
            ("log", |t, x| {
                let y = t.square(x);
                let y = t.add_scalar(y, 0.5);
                t.log(y)
            }),
            ("square", |t, x| Ok(t.square(x))),
            ("scale", |t, x| Ok(t.scale(x, -1.7))),
            ("add", |t, x| {
                let y = t.tanh(x);
                t.add(x, y)
            }),
            ("sub", |t, x| {
                let y = t.exp(x);
                t.sub(x, y)
            }),
            ("mul", |t, x| {
                let y = t.tanh(x);
                t.mul(x, y)
            }),
            ("matmul", |t, x| {
                let a = t.slice_cols(x, 0, 3)?;
                let a = t.tanh(a);
                t.matmul(a, x)
            }),
            ("softmax", |t, x| t.softmax(x, 2.5)),
            ("log_softmax", |t, x| t.log_softmax(x, 0.7)),
            ("row_sum", |t, x| Ok(t.row_sum(x))),
            ("mean", |t, x| {
                let y = t.square(x);
                let m = t.mean(y)?;
                t.broadcast_rows(m, 2)
            }),
            ("concat_slice", |t, x| {
                let a = t.slice_cols(x, 1, 3)?;
                let b = t.tanh(x);
                t.concat(&[a, b, a])
            }),
            ("add_row", |t, x| {
                let r = t.slice_cols(x, 0, 1)?;
                let r = t.reshape(r, &[1, 3])?;
                let y = t.reshape(x, &[3, 4])?;
                let y = t.slice_cols(y, 0, 3)?;
                t.add_row(y, r)
            }),
            ("clamp", |t, x| Ok(t.clamp(x, -0.5, 0.6))),
            ("minimum", |t, x| {
                let y = t.scale(x, 0.3);
                let y = t.add_scalar(y, 0.1);
                t.minimum(x, y)
            }),
        ]
    }

    #[test]
    fn primitive_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, f) in primitives() {
            for _ in 0..5 {
                let theta = random(&mut rng, 3, 4);
                let err = finite_diff_check(
                    |t, x| {
                        let y = f(t, x)?;
                        let shape = t.shape(y).to_vec();
                        let n: usize = shape.iter().product();
                        let mut r = ChaCha8Rng::seed_from_u64(n as u64);
                        let w = Tensor::new(
                            shape,
                            (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
                        )?;
                        let w = t.leaf(w);
                        let y = t.mul(y, w)?;
                        Ok(t.sum(y))
                    },
                    &theta,
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-5, "{name}: {err}");
            }
        }
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.leaf(random(&mut rng, 4, 4));
        let y = t.mish(x);
        let y = t.matmul(y, x).unwrap();
        let y = t.log_softmax(y, 3.0).unwrap();
        let s = t.sum(y);
        let g1 = t.backward(s).unwrap().get(x);
        let g2 = t.backward(s).unwrap().get(x);
        assert_eq!(g1.data(), g2.data());
    }

    proptest! {
        #[test]
        fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xv = random(&mut rng, 2, 3);
            let grad = |coef_f: f64, coef_g: f64| {
                let mut t = Tape::new();
                let x = t.leaf(xv.clone());
                let f = t.mish(x);
                let f = t.sum(f);
                let g = t.square(x);
                let g = t.exp(g);
                let g = t.mean(g).unwrap();
                let f = t.scale(f, coef_f);
                let g = t.scale(g, coef_g);
                let h = t.add(f, g).unwrap();
                t.backward(h).unwrap().get(x)
            };
            let combined = grad(a, b);
            let gf = grad(1.0, 0.0);
            let gg = grad(0.0, 1.0);
            for i in 0..xv.len() {
                let expected = a * gf.data()[i] + b * gg.data()[i];
                prop_assert!((combined.data()[i] - expected).abs() < 1e-12 * (1.0 + expected.abs()));
            }
        }
    }
}
