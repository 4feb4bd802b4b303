#![allow(dead_code)]

pub mod gradsuite;
pub mod retrieval;

use okt_core::tensor::Tensor;
use okt_core::transformer::vocab::{CLS, KNOWLEDGE, SEP};
use okt_core::transformer::TokenSequence;
use okt_core::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The 2-layer, d = 16, two-head model used by the property suites.
pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab_size: 24,
        max_len: 10,
        n_max: 4,
        seed,
        init_std: 0.2,
        ..ModelConfig::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn word<R: Rng>(rng: &mut R, vocab: usize) -> usize {
    rng.random_range(KNOWLEDGE + 1..vocab)
}

/// `[CLS] [k] w… [SEP]` followed by `pad` padding positions.
pub fn text_seq<R: Rng>(
    rng: &mut R,
    config: &ModelConfig,
    words: usize,
    pad: usize,
) -> TokenSequence {
    let mut ids = vec![CLS, KNOWLEDGE];
    ids.extend((0..words).map(|_| word(rng, config.vocab_size)));
    ids.push(SEP);
    let n = ids.len();
    TokenSequence::from_ids(ids, vec![0; n]).padded(pad)
}

/// `[CLS] w… [SEP]`.
pub fn description<R: Rng>(rng: &mut R, config: &ModelConfig, words: usize) -> TokenSequence {
    let mut ids = vec![CLS];
    ids.extend((0..words).map(|_| word(rng, config.vocab_size)));
    ids.push(SEP);
    let n = ids.len();
    TokenSequence::from_ids(ids, vec![0; n])
}

pub fn descriptions<R: Rng>(rng: &mut R, config: &ModelConfig, n: usize) -> Vec<TokenSequence> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=4);
            description(rng, config, len)
        })
        .collect()
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
