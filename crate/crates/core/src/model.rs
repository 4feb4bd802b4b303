//! The knowledge-enhanced encoder.
//!
//! Three stacks cooperate layer by layer:
//!
//! * the **text stack** encodes `[CLS] [k] w… [SEP]`; row 1 carries the
//!   knowledge token,
//! * the **commonsense stack** encodes every candidate description
//!   `[CLS] c_j [SEP]` independently; the `[CLS]` activation of layer `i` is
//!   that description's embedding at layer `i`,
//! * one **integration block** per layer lets the knowledge token from the
//!   previous layer attend over `[null_i, emb_1, …, emb_n]`:
//!
//! ```text
//! cs_i      = LN(k_{i-1} + MHA(k_{i-1}, emb_i, emb_i))
//! k', H'    = LN([k, H]_{i-1} + MHA([k, H]_{i-1}))
//! H_i       = LN(H' + FFN(H'))
//! k_i       = LN(k' + FFN(k') + cs_i)
//! ```
//!
//! Only the knowledge token reads commonsense directly; words see it through
//! self-attention in later layers.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::ModelError;
use crate::impl_module;
use crate::module::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::layers::{AttentionParams, Dropout, LayerNormParams};
use crate::transformer::vocab::{TokenSequence, KNOWLEDGE};
use crate::transformer::Encoder;

/// Row of the knowledge token in a text sequence.
pub const K_ROW: usize = 1;

/// Per-layer integration block: attention with the knowledge token as the
/// only query, then one residual + LayerNorm. No feed-forward sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationParams<T> {
    pub attn: AttentionParams<T>,
    pub ln: LayerNormParams<T>,
}

impl_module!(IntegrationParams { attn => "attn", ln => "ln" });

impl<T: Scalar> IntegrationParams<T> {
    pub fn init<R: rand::Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Self {
        Self {
            attn: AttentionParams::init(d, std, rng),
            ln: LayerNormParams::new(d),
        }
    }
}

/// Switches for diagnostic forward passes.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace every `cs_emb` by the zero vector.
    pub zero_integration: bool,
}

/// Tape handles produced by one knowledge-enhanced forward pass.
#[derive(Debug, Clone)]
pub struct OkOutput {
    /// `L + 1` text-stack activations (embeddings first); row [`K_ROW`] is `k_i`.
    pub layers: Vec<Var>,
    /// `cs_emb` fed into each layer.
    pub cs_emb: Vec<Var>,
    /// Integration attention per layer and head, each `1 × (n + 1)` with the
    /// null commonsense in column 0.
    pub attention: Vec<Vec<Var>>,
}

impl OkOutput {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least the embedding layer")
    }

    /// Integration weights copied off the tape: `[layer][head][slot]`.
    pub fn attention_values<T: Scalar>(&self, tape: &Tape<'_, T>) -> Vec<Vec<Vec<T>>> {
        self.attention
            .iter()
            .map(|heads| heads.iter().map(|&w| tape.value(w).to_vec()).collect())
            .collect()
    }
}

/// Memo of commonsense-stack encodings within one tape, keyed by description.
pub type CommonsenseCache = HashMap<TokenSequence, Vec<Var>>;

#[derive(Debug, Clone, PartialEq)]
pub struct OkEncoder<T> {
    pub config: ModelConfig,
    pub text: Encoder<T>,
    pub commonsense: Encoder<T>,
    pub integration: Vec<IntegrationParams<T>>,
    /// Embedding of the `[k]` token (replaces the text table's `[k]` row).
    pub knowledge: Tensor<T>,
    /// Learned null commonsense embedding for each layer, `1 × d`.
    pub null: Vec<Tensor<T>>,
}

impl<T: Scalar> Module<T> for OkEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        use crate::module::join;
        self.text.visit(&join(prefix, "text"), f);
        self.commonsense.visit(&join(prefix, "commonsense"), f);
        self.integration.visit(&join(prefix, "integration"), f);
        self.knowledge.visit(&join(prefix, "k_embedding"), f);
        self.null.visit(&join(prefix, "null"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        use crate::module::join;
        self.text.visit_mut(&join(prefix, "text"), f);
        self.commonsense.visit_mut(&join(prefix, "commonsense"), f);
        self.integration.visit_mut(&join(prefix, "integration"), f);
        self.knowledge.visit_mut(&join(prefix, "k_embedding"), f);
        self.null.visit_mut(&join(prefix, "null"), f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        self.text.for_each_param_mut(f);
        self.commonsense.for_each_param_mut(f);
        self.integration.for_each_param_mut(f);
        self.knowledge.for_each_param_mut(f);
        self.null.for_each_param_mut(f);
    }
}

impl<T: Scalar> OkEncoder<T> {
    /// Fresh model: a randomly initialized vanilla encoder adapted with the
    /// same seed.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vanilla = Encoder::init(config, &mut rng)?;
        adapt_from_pretrained(&vanilla, config, config.seed.wrapping_add(1))
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Encodes each real description with the commonsense stack and returns,
    /// for layers `1..=L`, the `(n + 1) × d` matrix `[null_i; emb_1,i; …]`.
    pub fn encode_commonsense<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        descriptions: &[TokenSequence],
        drop: &mut Dropout,
        cache: &mut CommonsenseCache,
    ) -> Result<Vec<Var>, ModelError> {
        if descriptions.len() > self.config.n_max {
            return Err(ModelError::TooManyCandidates {
                count: descriptions.len(),
                n_max: self.config.n_max,
            });
        }
        let layers = self.config.layers;
        let mut rows: Vec<Vec<Var>> = (0..layers)
            .map(|i| vec![tape.param(&self.null[i])])
            .collect();
        for desc in descriptions {
            let cls = match cache.get(desc).filter(|_| !drop.is_active()) {
                Some(c) => c.clone(),
                None => {
                    let acts = self.commonsense.encode(tape, desc, &self.config, drop)?;
                    let mut cls = Vec::with_capacity(layers);
                    for &a in &acts[1..] {
                        cls.push(tape.slice_rows(a, 0, 1)?);
                    }
                    if !drop.is_active() {
                        cache.insert(desc.clone(), cls.clone());
                    }
                    cls
                }
            };
            for (i, c) in cls.into_iter().enumerate() {
                rows[i].push(c);
            }
        }
        rows.into_iter()
            .map(|r| tape.concat_rows(&r).map_err(ModelError::from))
            .collect()
    }

    /// `LN(k_prev + MHA(k_prev, emb, emb))` for `layer`; also returns the
    /// per-head attention weights over the rows of `emb`.
    pub fn integrate<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        k_prev: Var,
        emb: Var,
        layer: usize,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let rows = tape.shape(emb)[0];
        if rows == 0 {
            return Err(ModelError::Config(
                "integration needs at least one row".into(),
            ));
        }
        let block = &self.integration[layer];
        let keep = vec![true; rows];
        let att = block
            .attn
            .forward(tape, k_prev, emb, &keep, self.config.heads)?;
        let r = tape.add(k_prev, att.output)?;
        let out = block
            .ln
            .forward(tape, r, T::of(self.config.layer_norm_eps))?;
        Ok((out, att.weights))
    }

    /// One text-stack layer with `cs_emb` added to the knowledge row inside
    /// the second residual.
    pub fn t1_layer_forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        x: Var,
        keep: &[bool],
        cs_emb: Var,
        layer: usize,
        drop: &mut Dropout,
    ) -> Result<Var, ModelError> {
        let eps = T::of(self.config.layer_norm_eps);
        Ok(self.text.layers[layer].forward_injected(
            tape,
            x,
            keep,
            self.config.heads,
            eps,
            drop,
            Some((K_ROW, cs_emb)),
        )?)
    }

    /// Full forward pass over `text` (which must carry `[k]` at row 1) and its
    /// candidate descriptions (null excluded; it is always added).
    pub fn ok_encode<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        text: &TokenSequence,
        descriptions: &[TokenSequence],
        drop: &mut Dropout,
        options: ForwardOptions,
    ) -> Result<OkOutput, ModelError> {
        let mut cache = CommonsenseCache::new();
        self.ok_encode_cached(tape, text, descriptions, drop, options, &mut cache)
    }

    pub fn ok_encode_cached<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        text: &TokenSequence,
        descriptions: &[TokenSequence],
        drop: &mut Dropout,
        options: ForwardOptions,
        cache: &mut CommonsenseCache,
    ) -> Result<OkOutput, ModelError> {
        if !text.has_knowledge_token() {
            return Err(ModelError::Config(
                "text sequence must start with [CLS] [k]".into(),
            ));
        }
        let emb = self.encode_commonsense(tape, descriptions, drop, cache)?;
        let keep = text.keep();
        let x0 = self
            .text
            .embeddings
            .forward(tape, text, Some(&self.knowledge))?;
        let mut x = drop.apply(tape, x0)?;
        let mut layers = vec![x];
        let mut cs_embs = Vec::with_capacity(self.config.layers);
        let mut attention = Vec::with_capacity(self.config.layers);
        for (i, &emb_i) in emb.iter().enumerate() {
            let k_prev = tape.slice_rows(x, K_ROW, 1)?;
            let (cs, weights) = self.integrate(tape, k_prev, emb_i, i)?;
            let cs = if options.zero_integration {
                tape.zeros(&[1, self.config.hidden])
            } else {
                cs
            };
            x = self.t1_layer_forward(tape, x, &keep, cs, i, drop)?;
            layers.push(x);
            cs_embs.push(cs);
            attention.push(weights);
        }
        Ok(OkOutput {
            layers,
            cs_emb: cs_embs,
            attention,
        })
    }

    /// The text stack as a standalone vanilla encoder whose `[k]` table row is
    /// the knowledge embedding.
    pub fn text_as_vanilla(&self) -> Encoder<T> {
        let mut enc = self.text.clone();
        let d = self.config.hidden;
        let row = self.knowledge.data().to_vec();
        enc.embeddings.token.data_mut()[KNOWLEDGE * d..(KNOWLEDGE + 1) * d].copy_from_slice(&row);
        enc
    }

    /// Zero-filled model with the right shapes, used when loading checkpoints.
    pub fn shape_template(config: &ModelConfig) -> Self {
        let d = config.hidden;
        Self {
            config: config.clone(),
            text: Encoder::shape_template(config),
            commonsense: Encoder::shape_template(config),
            integration: (0..config.layers)
                .map(|_| IntegrationParams {
                    attn: AttentionParams {
                        query: crate::transformer::Linear::zeros(d, d),
                        key: crate::transformer::Linear::zeros(d, d),
                        value: crate::transformer::Linear::zeros(d, d),
                        output: crate::transformer::Linear::zeros(d, d),
                    },
                    ln: LayerNormParams::new(d),
                })
                .collect(),
            knowledge: Tensor::zeros(&[1, d]).trainable(),
            null: (0..config.layers)
                .map(|_| Tensor::zeros(&[1, d]).trainable())
                .collect(),
        }
    }
}

/// Builds a knowledge-enhanced model from a vanilla encoder: both the text
/// and commonsense stacks become independent copies of `vanilla`; the
/// integration blocks, `[k]` embedding and null embeddings are drawn from
/// `N(0, init_std²)` with `seed`.
pub fn adapt_from_pretrained<T: Scalar>(
    vanilla: &Encoder<T>,
    config: &ModelConfig,
    seed: u64,
) -> Result<OkEncoder<T>, ModelError> {
    config.validate()?;
    if vanilla.layers.len() != config.layers {
        return Err(ModelError::Adaptation {
            layer: vanilla.layers.len().min(config.layers),
            message: format!(
                "checkpoint has {} layers, config expects {}",
                vanilla.layers.len(),
                config.layers
            ),
        });
    }
    if let Err(e) = vanilla.check_shapes(config) {
        let (layer, message) = match &e {
            ModelError::ParameterShape { name, .. } => (layer_of(name).unwrap_or(0), e.to_string()),
            other => (0, other.to_string()),
        };
        return Err(ModelError::Adaptation { layer, message });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.hidden;
    let std = config.init_std;
    let integration = (0..config.layers)
        .map(|_| IntegrationParams::init(d, std, &mut rng))
        .collect();
    let knowledge = Tensor::randn(&[1, d], std, &mut rng).trainable();
    let null = (0..config.layers)
        .map(|_| Tensor::randn(&[1, d], std, &mut rng).trainable())
        .collect();
    Ok(OkEncoder {
        config: config.clone(),
        text: vanilla.clone(),
        commonsense: vanilla.clone(),
        integration,
        knowledge,
        null,
    })
}

/// Layer index embedded in a parameter path such as `text.layers.3.ffn.w_i.weight`.
pub fn layer_of(name: &str) -> Option<usize> {
    let parts: Vec<&str> = name.split('.').collect();
    parts
        .windows(2)
        .find(|w| w[0] == "layers" || w[0] == "integration" || w[0] == "null")
        .and_then(|w| w[1].parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_of_parses_paths() {
        assert_eq!(layer_of("text.layers.3.ffn.w_i.weight"), Some(3));
        assert_eq!(layer_of("integration.1.attn.wq.weight"), Some(1));
        assert_eq!(layer_of("k_embedding"), None);
    }
}
