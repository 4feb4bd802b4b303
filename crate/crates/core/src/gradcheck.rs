//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::TensorError;
use crate::module::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so coordinates whose true
/// derivative is ~0 are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate (or `parameter[index]`) where the worst relative error occurred.
    pub worst: String,
    pub checked: usize,
    /// Worst relative and absolute error per parameter (module checks only).
    pub per_param: Vec<(String, f64, f64)>,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: String::new(),
            checked: 0,
            per_param: Vec::new(),
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.checked == 0 {
            self.max_rel_error = rel.max(self.max_rel_error);
            self.worst = label();
        }
        self.checked += 1;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval_scalar<T, F>(f: &F, x: &Tensor<T>) -> Result<T, TensorError>
where
    T: Scalar,
    F: for<'t> Fn(&mut Tape<'t, T>, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::Contract(
            "checked function must be scalar-valued".into(),
        ));
    }
    Ok(tape.scalar(out))
}

/// Compares the tape gradient of scalar `f` at `x` against
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    F: for<'t> Fn(&mut Tape<'t, T>, Var) -> Result<Var, TensorError>,
{
    let base = eval_scalar(&f, x)?;
    if eval_scalar(&f, x)? != base {
        return Err(TensorError::Contract(
            "function is not deterministic (dropout enabled?)".into(),
        ));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().trainable());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = match grads.wrt(v) {
        Some(g) => g.iter().map(|g| g.as_f64()).collect(),
        None => vec![0.0; x.numel()],
    };

    let mut report = GradCheckReport::new();
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate().take(x.numel()) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of(h);
        let plus = eval_scalar(&f, &probe)?.as_f64();
        probe.data_mut()[i] = orig - T::of(h);
        let minus = eval_scalar(&f, &probe)?.as_f64();
        probe.data_mut()[i] = orig;
        report.record(|| format!("[{i}]"), a, (plus - minus) / (2.0 * h));
    }
    Ok(report)
}

/// Central difference formula used for the numeric derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    #[default]
    ThreePoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error O(h⁴). Allows a
    /// larger `h`, which keeps rounding noise down on deep compositions.
    FivePoint,
}

impl Stencil {
    fn derivative(
        self,
        h: f64,
        mut f: impl FnMut(f64) -> Result<f64, TensorError>,
    ) -> Result<f64, TensorError> {
        match self {
            Stencil::ThreePoint => Ok((f(h)? - f(-h)?) / (2.0 * h)),
            Stencil::FivePoint => {
                let (p1, m1, p2, m2) = (f(h)?, f(-h)?, f(2.0 * h)?, f(-2.0 * h)?);
                Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
            }
        }
    }
}

/// Which parameter coordinates a module check visits.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// Every `stride`-th coordinate of each parameter, starting at `offset`.
    Strided {
        stride: usize,
        offset: usize,
    },
}

/// Finite-difference check of every parameter of `model` under the scalar
/// loss built by `f`.
pub fn check_module<T, M, F>(
    model: &mut M,
    f: F,
    h: f64,
    stencil: Stencil,
    coverage: Coverage,
) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    M: Module<T>,
    F: for<'a> Fn(&'a M, &mut Tape<'a, T>) -> Result<Var, TensorError>,
{
    let eval = |m: &M| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let out = f(m, &mut tape)?;
        if tape.value(out).len() != 1 {
            return Err(TensorError::Contract(
                "checked function must be scalar-valued".into(),
            ));
        }
        Ok(tape.scalar(out).as_f64())
    };
    let base = eval(model)?;
    if eval(model)? != base {
        return Err(TensorError::Contract(
            "function is not deterministic (dropout enabled?)".into(),
        ));
    }

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    let mut originals: Vec<Vec<T>> = Vec::new();
    {
        let mut tape = Tape::new();
        let out = f(model, &mut tape)?;
        let grads = tape.backward(out)?;
        model.visit("", &mut |name, t| {
            let g = match grads.for_param(t) {
                Some(g) => g.iter().map(|v| v.as_f64()).collect(),
                None => vec![0.0; t.numel()],
            };
            analytic.push((name.to_string(), g));
            originals.push(t.data().to_vec());
        });
    }

    let mut report = GradCheckReport::new();
    for (p, (name, grad)) in analytic.iter().enumerate() {
        let (stride, offset) = match coverage {
            Coverage::All => (1, 0),
            Coverage::Strided { stride, offset } => (stride.max(1), offset % stride.max(1)),
        };
        let mut i = offset.min(grad.len().saturating_sub(1));
        let mut worst = (0.0f64, 0.0f64);
        while i < grad.len() {
            let orig = originals[p][i];
            let numeric = stencil.derivative(h, |d| {
                set_coordinate(model, p, i, orig + T::of(d));
                eval(model)
            });
            set_coordinate(model, p, i, orig);
            let numeric = numeric?;
            let abs = (grad[i] - numeric).abs();
            worst = (
                worst.0.max(relative_error(grad[i], numeric)),
                worst.1.max(abs),
            );
            report.record(|| format!("{name}[{i}]"), grad[i], numeric);
            i += stride;
        }
        report.per_param.push((name.clone(), worst.0, worst.1));
    }
    Ok(report)
}

fn set_coordinate<T: Scalar, M: Module<T>>(model: &mut M, param: usize, index: usize, value: T) {
    let mut k = 0;
    model.for_each_param_mut(&mut |t| {
        if k == param {
            t.data_mut()[index] = value;
        }
        k += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::from_f64(&[2], &[1., 2.]).unwrap();
        let r = finite_diff_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn softmax_then_pick() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(&[5], -1., 1., &mut rng);
        let r = finite_diff_check(
            |tape, v| {
                let s = tape.softmax(v, 0)?;
                tape.pick(s, &[3])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn layer_norm_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(&[2, 4], -1., 1., &mut rng);
        let w = Tensor::<f64>::uniform(&[2, 4], -1., 1., &mut rng);
        let r = finite_diff_check(
            move |tape, v| {
                let g = tape.leaf(Tensor::from_f64(&[4], &[1.0, 0.5, -0.3, 2.0])?);
                let b = tape.leaf(Tensor::from_f64(&[4], &[0.1, 0.0, 0.2, -0.1])?);
                let y = tape.layer_norm(v, g, b, 1e-12)?;
                let wv = tape.leaf(w.clone());
                tape.dot(y, wv)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn rejects_nondeterministic_function() {
        use std::cell::Cell;
        let calls = Cell::new(0u64);
        let x = Tensor::<f64>::uniform(&[64], 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(8));
        let err = finite_diff_check(
            |tape, v| {
                calls.set(calls.get() + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(calls.get());
                let d = tape.dropout(v, 0.5, &mut rng)?;
                Ok(tape.sum(d))
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }
}
