//! Gradient suites shared by the `gradients` and `acceptance` targets.

use okt_core::autodiff::{Tape, Var};
use okt_core::error::TensorError;
use okt_core::gradcheck::{check_module, finite_diff_check, Coverage, GradCheckReport, Stencil};
use okt_core::model::ForwardOptions;
use okt_core::tensor::Tensor;
use okt_core::transformer::{Dropout, Encoder};
use okt_core::OkEncoder64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{descriptions, rng, small_config, text_seq, uniform};

pub const H: f64 = 1e-5;
/// Step for whole-model checks, with the five-point stencil. A three-point
/// difference has no good step here: near 1e-5 the rounding noise of a
/// model-sized loss swamps parameters whose true gradient is exactly zero
/// (attention key biases), near 1e-4 truncation error shows on the FFN.
pub const H_MODEL: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

/// `Σ op(x) ⊙ w` with a fixed random `w`, so every output coordinate matters.
fn weighted<'t>(tape: &mut Tape<'t, f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    let w = uniform(&mut rng(seed ^ 0xabcd), &shape);
    let w = tape.leaf(w);
    tape.dot(y, w)
}

fn check<F>(
    out: &mut Vec<(&'static str, GradCheckReport)>,
    name: &'static str,
    shape: &[usize],
    seed: u64,
    f: F,
) where
    F: for<'t> Fn(&mut Tape<'t, f64>, Var) -> Result<Var, TensorError>,
{
    let x = uniform(&mut rng(seed), shape);
    let r = finite_diff_check(
        |tape, v| {
            let y = f(tape, v)?;
            if tape.value(y).len() == 1 {
                Ok(y)
            } else {
                weighted(tape, y, seed)
            }
        },
        &x,
        H,
    )
    .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
    out.push((name, r));
}

fn other(seed: u64, shape: &[usize]) -> Tensor<f64> {
    uniform(&mut rng(seed.wrapping_mul(31).wrapping_add(7)), shape)
}

/// Checks every differentiable tape operation on random inputs drawn from
/// `seed`; one report per operation and argument.
pub fn op_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let s = seed;
    let mut out = Vec::new();
    check(&mut out, "matmul lhs", &[3, 4], s, |t, x| {
        let b = t.leaf(other(s, &[4, 2]));
        t.matmul(x, b)
    });
    check(&mut out, "matmul rhs", &[4, 2], s, |t, x| {
        let a = t.leaf(other(s, &[3, 4]));
        t.matmul(a, x)
    });
    check(&mut out, "matmul square", &[3, 3], s, |t, x| t.matmul(x, x));
    check(&mut out, "matmul_nt lhs", &[3, 4], s, |t, x| {
        let b = t.leaf(other(s, &[5, 4]));
        t.matmul_nt(x, b)
    });
    check(&mut out, "matmul_nt rhs", &[5, 4], s, |t, x| {
        let a = t.leaf(other(s, &[3, 4]));
        t.matmul_nt(a, x)
    });
    check(&mut out, "matmul_nt self", &[3, 4], s, |t, x| {
        t.matmul_nt(x, x)
    });
    check(&mut out, "add", &[2, 3], s, |t, x| {
        let b = t.leaf(other(s, &[2, 3]));
        t.add(b, x)
    });
    check(&mut out, "sub", &[2, 3], s, |t, x| {
        let b = t.leaf(other(s, &[2, 3]));
        t.sub(b, x)
    });
    check(&mut out, "mul", &[2, 3], s, |t, x| {
        let b = t.leaf(other(s, &[2, 3]));
        let p = t.mul(x, b)?;
        t.mul(p, x)
    });
    check(&mut out, "add_row matrix", &[3, 4], s, |t, x| {
        let b = t.leaf(other(s, &[4]));
        t.add_row(x, b)
    });
    check(&mut out, "add_row bias", &[4], s, |t, x| {
        let a = t.leaf(other(s, &[3, 4]));
        t.add_row(a, x)
    });
    check(&mut out, "add_at_row matrix", &[3, 4], s, |t, x| {
        let v = t.leaf(other(s, &[1, 4]));
        t.add_at_row(x, 1, v)
    });
    check(&mut out, "add_at_row vector", &[1, 4], s, |t, x| {
        let a = t.leaf(other(s, &[3, 4]));
        t.add_at_row(a, 2, x)
    });
    check(&mut out, "scale", &[5], s, |t, x| Ok(t.scale(x, -1.7)));
    check(&mut out, "gelu", &[2, 5], s, |t, x| Ok(t.gelu(x)));
    check(&mut out, "softmax axis 0", &[3, 4], s, |t, x| {
        t.softmax(x, 0)
    });
    check(&mut out, "softmax axis 1", &[3, 4], s, |t, x| {
        t.softmax(x, 1)
    });
    check(&mut out, "masked_softmax", &[2, 4], s, |t, x| {
        t.masked_softmax(x, &[true, false, true, true])
    });
    check(&mut out, "log_softmax", &[3, 4], s, |t, x| {
        Ok(t.log_softmax(x))
    });
    check(&mut out, "layer_norm x", &[3, 5], s, |t, x| {
        let g = t.leaf(other(s, &[5]));
        let b = t.leaf(other(s + 1, &[5]));
        t.layer_norm(x, g, b, 1e-12)
    });
    check(&mut out, "layer_norm gamma", &[5], s, |t, g| {
        let x = t.leaf(other(s, &[3, 5]));
        let b = t.leaf(other(s + 1, &[5]));
        t.layer_norm(x, g, b, 1e-12)
    });
    check(&mut out, "layer_norm beta", &[5], s, |t, b| {
        let x = t.leaf(other(s, &[3, 5]));
        let g = t.leaf(other(s + 1, &[5]));
        t.layer_norm(x, g, b, 1e-12)
    });
    check(&mut out, "gather", &[4, 3], s, |t, x| {
        t.gather(x, &[2, 0, 2, 3])
    });
    check(&mut out, "concat_rows", &[2, 3], s, |t, x| {
        let b = t.leaf(other(s, &[1, 3]));
        t.concat_rows(&[x, b, x])
    });
    check(&mut out, "slice_rows", &[4, 3], s, |t, x| {
        t.slice_rows(x, 1, 2)
    });
    check(&mut out, "concat_cols", &[2, 3], s, |t, x| {
        let b = t.leaf(other(s, &[2, 2]));
        t.concat_cols(&[b, x, x])
    });
    check(&mut out, "slice_cols", &[3, 5], s, |t, x| {
        t.slice_cols(x, 2, 2)
    });
    check(&mut out, "sum", &[2, 3], s, |t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    });
    check(&mut out, "mean", &[2, 3], s, |t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.mean(sq))
    });
    check(&mut out, "dot", &[6], s, |t, x| {
        let b = t.leaf(other(s, &[6]));
        let p = t.mul(x, x)?;
        t.dot(p, b)
    });
    check(&mut out, "cross_entropy", &[3, 4], s, |t, x| {
        t.cross_entropy(x, &[1, 3, 0])
    });
    check(&mut out, "pick", &[3, 4], s, |t, x| {
        let sq = t.mul(x, x)?;
        let p = t.pick(sq, &[0, 5, 11, 5])?;
        Ok(t.sum(p))
    });
    check(&mut out, "dropout", &[4, 4], s, |t, x| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        t.dropout(x, 0.3, &mut r)
    });
    check(&mut out, "reshape", &[2, 6], s, |t, x| {
        t.reshape(x, &[3, 4])
    });
    check(&mut out, "transpose", &[2, 5], s, |t, x| {
        let y = t.transpose(x)?;
        let b = t.leaf(other(s, &[2, 3]));
        t.matmul(y, b)
    });
    out
}

fn to_tensor_err(e: okt_core::error::ModelError) -> TensorError {
    TensorError::Contract(e.to_string())
}

/// Finite-difference check of every parameter of a full knowledge-enhanced
/// model (2 layers, d = 16, 2 heads, up to 4 candidate descriptions).
pub fn ok_model_gradcheck(seed: u64) -> GradCheckReport {
    let config = small_config(seed);
    let mut model = OkEncoder64::init(&config).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let words = 2 + seed as usize % 4;
    let text = text_seq(&mut r, &config, words, 0);
    let descs = descriptions(&mut r, &config, 1 + seed as usize % config.n_max);
    let out_w = uniform(&mut r, &[text.len(), config.hidden]);
    check_module(
        &mut model,
        |m, tape| {
            let out = m
                .ok_encode(
                    tape,
                    &text,
                    &descs,
                    &mut Dropout::off(),
                    ForwardOptions::default(),
                )
                .map_err(to_tensor_err)?;
            let w = tape.leaf(out_w.clone());
            tape.dot(out.last(), w)
        },
        H_MODEL,
        Stencil::FivePoint,
        // Half of every parameter per seed, alternating, so 20 seeds visit
        // each coordinate ten times within the time budget.
        Coverage::Strided {
            stride: 2,
            offset: seed as usize % 2,
        },
    )
    .unwrap()
}

/// Full check of a vanilla encoder with padding positions.
pub fn encoder_gradcheck(seed: u64) -> GradCheckReport {
    let config = small_config(seed);
    let mut enc = Encoder::<f64>::init(&config, &mut rng(seed)).unwrap();
    let mut r = rng(seed + 100);
    let seq = text_seq(&mut r, &config, 4, 2);
    let out_w = uniform(&mut r, &[seq.len(), config.hidden]);
    check_module(
        &mut enc,
        |m, tape| {
            let acts = m
                .encode(tape, &seq, &config, &mut Dropout::off())
                .map_err(to_tensor_err)?;
            let w = tape.leaf(out_w.clone());
            tape.dot(*acts.last().unwrap(), w)
        },
        H_MODEL,
        Stencil::FivePoint,
        Coverage::All,
    )
    .unwrap()
}
