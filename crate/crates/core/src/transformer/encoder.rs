//! Embedding tables and the L-layer vanilla encoder stack.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::ModelError;
use crate::impl_module;
use crate::module::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::layers::{Dropout, EncoderLayerParams};
use super::vocab::{TokenSequence, KNOWLEDGE};

/// Token, learned absolute position and segment embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<T> {
    pub token: Tensor<T>,
    pub position: Tensor<T>,
    pub segment: Tensor<T>,
}

impl_module!(Embeddings {
    token => "tok",
    position => "pos",
    segment => "seg",
});

impl<T: Scalar> Embeddings<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.hidden;
        let std = config.init_std;
        Self {
            token: Tensor::randn(&[config.vocab_size, d], std, rng).trainable(),
            position: Tensor::randn(&[config.max_len, d], std, rng).trainable(),
            segment: Tensor::randn(&[2, d], std, rng).trainable(),
        }
    }

    /// `token + position + segment` for every position. When `knowledge` is
    /// given, positions holding `[k]` use that vector instead of the table row.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        seq: &TokenSequence,
        knowledge: Option<&'p Tensor<T>>,
    ) -> Result<Var, ModelError> {
        let n = seq.len();
        let max_len = self.position.rows();
        if n > max_len {
            return Err(ModelError::SequenceTooLong { len: n, max_len });
        }
        if n == 0 {
            return Err(ModelError::Config("cannot embed an empty sequence".into()));
        }
        let table = tape.param(&self.token);
        let tokens = match knowledge {
            Some(k) if seq.ids.contains(&KNOWLEDGE) => {
                let kv = tape.param(k);
                let mut parts = Vec::new();
                let mut run: Vec<usize> = Vec::new();
                for &id in &seq.ids {
                    if id == KNOWLEDGE {
                        if !run.is_empty() {
                            parts.push(tape.gather(table, &run)?);
                            run.clear();
                        }
                        parts.push(kv);
                    } else {
                        run.push(id);
                    }
                }
                if !run.is_empty() {
                    parts.push(tape.gather(table, &run)?);
                }
                tape.concat_rows(&parts)?
            }
            _ => tape.gather(table, &seq.ids)?,
        };
        let pos_table = tape.param(&self.position);
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather(pos_table, &positions)?;
        let seg_table = tape.param(&self.segment);
        let segs: Vec<usize> = seq.segment_ids.iter().map(|&s| s as usize).collect();
        let seg = tape.gather(seg_table, &segs)?;
        let x = tape.add(tokens, pos)?;
        Ok(tape.add(x, seg)?)
    }
}

/// Vanilla Transformer encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub embeddings: Embeddings<T>,
    pub layers: Vec<EncoderLayerParams<T>>,
}

impl_module!(Encoder {
    embeddings => "embeddings",
    layers => "layers",
});

impl<T: Scalar> Encoder<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let embeddings = Embeddings::init(config, rng);
        let layers = (0..config.layers)
            .map(|_| EncoderLayerParams::init(config.hidden, config.ffn, config.init_std, rng))
            .collect();
        Ok(Self { embeddings, layers })
    }

    pub fn hidden(&self) -> usize {
        self.embeddings.token.cols()
    }

    /// Embeds `seq` and runs every layer; returns `L + 1` activations, the
    /// embeddings first.
    pub fn encode<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        seq: &TokenSequence,
        config: &ModelConfig,
        drop: &mut Dropout,
    ) -> Result<Vec<Var>, ModelError> {
        self.encode_with(tape, seq, config, drop, None)
    }

    pub fn encode_with<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        seq: &TokenSequence,
        config: &ModelConfig,
        drop: &mut Dropout,
        knowledge: Option<&'p Tensor<T>>,
    ) -> Result<Vec<Var>, ModelError> {
        let keep = seq.keep();
        let eps = T::of(config.layer_norm_eps);
        let x = self.embeddings.forward(tape, seq, knowledge)?;
        let mut x = drop.apply(tape, x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            x = layer.forward(tape, x, &keep, config.heads, eps, drop)?;
            acts.push(x);
        }
        Ok(acts)
    }

    /// Checks every tensor against the shapes implied by `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let reference = Encoder::<T>::shape_template(config);
        if reference.layers.len() != self.layers.len() {
            return Err(ModelError::Config(format!(
                "expected {} layers, found {}",
                reference.layers.len(),
                self.layers.len()
            )));
        }
        let expected: Vec<(String, Vec<usize>)> = reference
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), (_, t)) in expected.iter().zip(self.named_params()) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParameterShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Zero-filled encoder with the right shapes.
    pub fn shape_template(config: &ModelConfig) -> Self {
        let d = config.hidden;
        Self {
            embeddings: Embeddings {
                token: Tensor::zeros(&[config.vocab_size, d]).trainable(),
                position: Tensor::zeros(&[config.max_len, d]).trainable(),
                segment: Tensor::zeros(&[2, d]).trainable(),
            },
            layers: (0..config.layers)
                .map(|_| EncoderLayerParams::zeroed(d, config.ffn))
                .collect(),
        }
    }
}
