//! Multi-head attention, feed-forward and encoder-layer building blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::TensorError;
use crate::impl_module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dropout settings threaded through a forward pass.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn off() -> Self {
        use rand::SeedableRng;
        Self {
            rate: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn seeded(rate: f64, seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, TensorError> {
        tape.dropout(x, self.rate, &mut self.rng)
    }
}

/// `x · W + b`
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl_module!(Linear { weight => "weight", bias => "bias" });

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[d_in, d_out], std, rng).trainable(),
            bias: Tensor::zeros(&[d_out]).trainable(),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]).trainable(),
            bias: Tensor::zeros(&[d_out]).trainable(),
        }
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl_module!(LayerNormParams { gamma => "gamma", beta => "beta" });

impl<T: Scalar> LayerNormParams<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[d]).trainable(),
            beta: Tensor::zeros(&[d]).trainable(),
        }
    }

    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        x: Var,
        eps: T,
    ) -> Result<Var, TensorError> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Query/key/value/output projections. Head `h` owns columns
/// `h·d_h .. (h+1)·d_h` of the query, key and value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

impl_module!(AttentionParams {
    query => "wq",
    key => "wk",
    value => "wv",
    output => "wo",
});

/// Attention output plus the per-head weight matrices (`queries × keys`).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Self {
        Self {
            query: Linear::init(d, d, std, rng),
            key: Linear::init(d, d, std, rng),
            value: Linear::init(d, d, std, rng),
            output: Linear::init(d, d, std, rng),
        }
    }

    /// Scaled dot-product attention with `heads` heads. `keep[j]` marks key
    /// `j` as attendable; masked keys receive weight exactly zero.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        queries: Var,
        keys: Var,
        keep: &[bool],
        heads: usize,
    ) -> Result<AttentionOutput, TensorError> {
        let d = tape.shape(queries)[1];
        if !d.is_multiple_of(heads) {
            return Err(TensorError::Contract(format!(
                "{heads} heads do not divide width {d}"
            )));
        }
        let dh = d / heads;
        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, keys)?;
        let v = self.value.forward(tape, keys)?;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let w = tape.masked_softmax(scores, keep)?;
            outs.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        let output = self.output.forward(tape, joined)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// One vanilla encoder layer: post-LN self-attention then a GELU FFN whose
/// input projection is `ffn_in` (W_I) and output projection `ffn_out` (W_O).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub attn: AttentionParams<T>,
    pub ln1: LayerNormParams<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ln2: LayerNormParams<T>,
}

impl_module!(EncoderLayerParams {
    attn => "attn",
    ln1 => "ln1",
    ffn_in => "ffn.w_i",
    ffn_out => "ffn.w_o",
    ln2 => "ln2",
});

impl<T: Scalar> EncoderLayerParams<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, d_ff: usize, std: f64, rng: &mut R) -> Self {
        Self {
            attn: AttentionParams::init(d, std, rng),
            ln1: LayerNormParams::new(d),
            ffn_in: Linear::init(d, d_ff, std, rng),
            ffn_out: Linear::init(d_ff, d, std, rng),
            ln2: LayerNormParams::new(d),
        }
    }

    /// All-zero projections with unit LayerNorm gains.
    pub fn zeroed(d: usize, d_ff: usize) -> Self {
        Self {
            attn: AttentionParams {
                query: Linear::zeros(d, d),
                key: Linear::zeros(d, d),
                value: Linear::zeros(d, d),
                output: Linear::zeros(d, d),
            },
            ln1: LayerNormParams::new(d),
            ffn_in: Linear::zeros(d, d_ff),
            ffn_out: Linear::zeros(d_ff, d),
            ln2: LayerNormParams::new(d),
        }
    }

    pub fn ffn<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var, TensorError> {
        let h = self.ffn_in.forward(tape, x)?;
        let h = tape.gelu(h);
        self.ffn_out.forward(tape, h)
    }

    /// `LN2(h + FFN(h))` with `h = LN1(x + MHA(x, x, x))`.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        x: Var,
        keep: &[bool],
        heads: usize,
        eps: T,
        drop: &mut Dropout,
    ) -> Result<Var, TensorError> {
        self.forward_injected(tape, x, keep, heads, eps, drop, None)
    }

    /// Like [`forward`](Self::forward), but `inject = Some((row, v))` adds `v`
    /// to that row inside the second residual, before the final LayerNorm.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_injected<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        x: Var,
        keep: &[bool],
        heads: usize,
        eps: T,
        drop: &mut Dropout,
        inject: Option<(usize, Var)>,
    ) -> Result<Var, TensorError> {
        let a = self.attn.forward(tape, x, x, keep, heads)?.output;
        let a = drop.apply(tape, a)?;
        let h = tape.add(x, a)?;
        let h = self.ln1.forward(tape, h, eps)?;
        let f = self.ffn(tape, h)?;
        let f = drop.apply(tape, f)?;
        let mut r = tape.add(h, f)?;
        if let Some((row, v)) = inject {
            r = tape.add_at_row(r, row, v)?;
        }
        self.ln2.forward(tape, r, eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn two_key_attention_matches_hand_computation() {
        let d = 4;
        let mut p = AttentionParams::<f64> {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        };
        for l in [&mut p.query, &mut p.key, &mut p.value, &mut p.output] {
            l.weight = Tensor::identity(d);
        }
        let mut tape = Tape::new();
        // orthogonal keys with |k|² = d_h; the query equals the first key
        let q = tape.leaf(Tensor::from_f64(&[1, 4], &[1., 1., 1., 1.]).unwrap());
        let k = tape.leaf(Tensor::from_f64(&[2, 4], &[1., 1., 1., 1., 1., -1., 1., -1.]).unwrap());
        let out = p.forward(&mut tape, q, k, &[true, true], 1).unwrap();
        let w = tape.value(out.weights[0]).to_vec();
        // scores = [q·k₀, q·k₁] / √d_h = [√d_h, 0]
        let s = (d as f64).sqrt();
        let expect0 = s.exp() / (s.exp() + 1.0);
        assert!((w[0] - expect0).abs() < 1e-15);
        assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn masked_key_weight_exactly_zero_and_identical_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::<f64>::init(4, 0.5, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(&[3, 4], -1., 1., &mut rng));
        let out = p.forward(&mut tape, x, x, &[true, false, true], 2).unwrap();
        for &w in &out.weights {
            let v = tape.value(w);
            for r in 0..3 {
                assert_eq!(v[r * 3 + 1], 0.0);
                assert!((v[r * 3] + v[r * 3 + 2] - 1.0).abs() < 1e-12);
            }
        }

        // identical value rows: attention output is that row whatever the query
        let mut p1 = AttentionParams::<f64>::init(4, 0.5, &mut rng);
        p1.value.weight = Tensor::identity(4);
        p1.output.weight = Tensor::identity(4);
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::uniform(&[2, 4], -1., 1., &mut rng));
        let row = [0.3, -0.2, 0.9, 0.1];
        let kv = tape.leaf(Tensor::from_f64(&[3, 4], &[row, row, row].concat()).unwrap());
        let out = p1.forward(&mut tape, q, kv, &[true; 3], 2).unwrap();
        for r in 0..2 {
            for (c, &v) in row.iter().enumerate() {
                assert!((tape.value(out.output)[r * 4 + c] - v).abs() < 1e-12);
            }
        }
    }
}
