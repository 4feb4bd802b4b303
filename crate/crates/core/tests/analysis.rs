mod common;

use std::collections::BTreeSet;

use common::rng;
use okt_core::analysis::{
    euclidean, influence, low_resource_split, module_drift, param_drift, Coverage,
    DEFAULT_DRIFT_PATTERN,
};
use okt_core::autodiff::Tape;
use okt_core::kb::{CandidateSet, KnowledgeBase, Templates};
use okt_core::model::ForwardOptions;
use okt_core::module::Module;
use okt_core::task::{
    build_vocab, mini_dataset, Backbone, Example, Featurized, Featurizer, TaskKind,
};
use okt_core::transformer::vocab::Vocabulary;
use okt_core::transformer::Dropout;
use okt_core::{ModelConfig, TaskModel, TaskSpec};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::Rng;

fn config(vocab: &Vocabulary, seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab_size: vocab.len(),
        max_len: 24,
        n_max: 4,
        seed,
        init_std: 0.2,
        ..ModelConfig::default()
    }
}

fn model(vocab: &Vocabulary, seed: u64) -> TaskModel<f64> {
    TaskModel::knowledge(TaskSpec::classification(2), &config(vocab, seed)).unwrap()
}

fn perturb(m: &mut TaskModel<f64>, name: &str, index: usize, delta: f64) -> f64 {
    let mut before = f64::NAN;
    m.visit_mut("", &mut |n, t| {
        if n == name {
            before = t.data()[index];
            t.data_mut()[index] += delta;
        }
    });
    before
}

#[test]
fn drift_of_a_model_against_itself_is_zero() {
    let vocab = build_vocab(&mini_dataset(), Some(&KnowledgeBase::mini()));
    let m = model(&vocab, 1);
    let ck = m.to_checkpoint(&vocab);
    let r = param_drift(&ck, &ck, DEFAULT_DRIFT_PATTERN).unwrap();
    assert_eq!(r.per_layer.len(), 2);
    assert!(r.per_layer.values().all(|&d| d == 0.0));
    assert_eq!(r.total(), 0.0);
}

#[test]
fn single_entry_perturbation_localizes() {
    let vocab = build_vocab(&mini_dataset(), Some(&KnowledgeBase::mini()));
    let a = model(&vocab, 2);
    for (stack, layer) in [("text", 0), ("text", 1), ("commonsense", 1)] {
        let name = format!("encoder.{stack}.layers.{layer}.ffn.w_i.weight");
        let mut b = a.clone();
        let x = perturb(&mut b, &name, 37, 0.01);
        let step = ((x + 0.01) - x).abs();
        let pattern = format!("encoder.{stack}.*ffn.w_i.weight");
        let r = module_drift(&a, &b, &pattern).unwrap();
        for (&l, &d) in &r.per_layer {
            assert_eq!(d, if l == layer { step } else { 0.0 }, "{name} layer {l}");
        }
        assert!((step - 0.01).abs() < 1e-15);
        // Through f32 checkpoints the step is the f32 rounding of the same change.
        let (ca, cb) = (a.to_checkpoint(&vocab), b.to_checkpoint(&vocab));
        let r = param_drift(&ca, &cb, &pattern).unwrap();
        let xa = ca.get(&name).unwrap().data()[37];
        let xb = cb.get(&name).unwrap().data()[37];
        let step32 = (xb as f64 - xa as f64).abs();
        for (&l, &d) in &r.per_layer {
            assert_eq!(d, if l == layer { step32 } else { 0.0 });
        }
        assert!((step32 - 0.01).abs() < 1e-8);
        // Other matrix families do not see the change.
        assert_eq!(
            module_drift(&a, &b, "*ffn.w_o.weight").unwrap().total(),
            0.0
        );
    }
}

#[test]
fn drift_rejects_structure_mismatch() {
    let vocab = build_vocab(&mini_dataset(), Some(&KnowledgeBase::mini()));
    let a = model(&vocab, 3).to_checkpoint(&vocab);
    let mut cfg = config(&vocab, 3);
    cfg.ffn = 24;
    let b = TaskModel::<f64>::knowledge(TaskSpec::classification(2), &cfg)
        .unwrap()
        .to_checkpoint(&vocab);
    let err = param_drift(&a, &b, DEFAULT_DRIFT_PATTERN).unwrap_err();
    assert!(
        err.to_string()
            .contains("encoder.text.layers.0.ffn.w_i.weight"),
        "{err}"
    );
    assert!(param_drift(&a, &a, "no.such.*").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn drift_is_a_metric(seed in 0u64..1000) {
        let vocab = build_vocab(&mini_dataset(), None);
        let base = model(&vocab, 5);
        let mut r = rng(seed);
        let mut draw = || {
            let mut m = base.clone();
            m.visit_mut("", &mut |_, t| {
                for x in t.data_mut() {
                    if r.random_bool(0.1) {
                        *x += r.random_range(-1.0..1.0);
                    }
                }
            });
            m.to_checkpoint(&vocab)
        };
        let (a, b, c) = (draw(), draw(), draw());
        let d = |x, y| param_drift(x, y, "*").unwrap();
        let (ab, ba) = (d(&a, &b), d(&b, &a));
        prop_assert_eq!(&ab, &ba);
        let (bc, ac) = (d(&b, &c), d(&a, &c));
        for (l, v) in &ac.per_layer {
            prop_assert!(*v <= ab.per_layer[l] + bc.per_layer[l] + 1e-9);
            prop_assert!(*v >= 0.0);
        }
    }
}

struct InfluenceSetup {
    kb: KnowledgeBase,
    vocab: Vocabulary,
}

impl InfluenceSetup {
    fn new(kb: KnowledgeBase) -> Self {
        let vocab = build_vocab(&mini_dataset(), Some(&kb));
        Self { kb, vocab }
    }

    fn featurize(&self, cfg: &ModelConfig, ex: &Example) -> Featurized {
        Featurizer::new(&self.vocab, Some(&self.kb), cfg, true)
            .featurize(ex, TaskKind::Classification, 0)
            .unwrap()
    }
}

fn promise() -> Example {
    Example::classification(
        "John promised Bill to leave, so an hour later John left.",
        1,
    )
}

#[test]
fn leave_one_out_matches_re_forward_oracle() {
    let s = InfluenceSetup::new(KnowledgeBase::mini());
    for seed in 0..5 {
        let cfg = config(&s.vocab, seed);
        let m = TaskModel::<f64>::knowledge(TaskSpec::classification(2), &cfg).unwrap();
        let ex = promise();
        let f = s.featurize(&cfg, &ex);
        let ids = f.real_ids();
        assert!(ids.len() >= 3);
        let full = m.probabilities(&f).unwrap();
        let records = influence(&m, &f).unwrap();
        let ranks: BTreeSet<usize> = records.iter().map(|r| r.rank).collect();
        assert_eq!(ranks, (1..=ids.len()).collect());
        for r in &records {
            // Rebuild the candidate set from scratch without `r.id`.
            let rest: Vec<usize> = ids.iter().copied().filter(|&i| i != r.id).collect();
            let ex2 = Example {
                cs: Some(rest),
                ..ex.clone()
            };
            let p = m.probabilities(&s.featurize(&cfg, &ex2)).unwrap();
            let dist = full
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(
                (r.influence - dist).abs() < 1e-10,
                "{} vs {dist}",
                r.influence
            );
            assert!(r.influence > 0.0);
        }
        assert!(records.windows(2).all(|w| w[0].influence >= w[1].influence));
    }
}

#[test]
fn zero_attention_entry_has_exactly_zero_influence() {
    let s = InfluenceSetup::new(KnowledgeBase::mini());
    let cfg = config(&s.vocab, 7);
    let mut m = TaskModel::<f64>::knowledge(TaskSpec::classification(2), &cfg).unwrap();
    // Huge keys make every non-maximal score underflow to weight 0.
    let Backbone::Knowledge(enc) = &mut m.backbone else {
        unreachable!()
    };
    for block in &mut enc.integration {
        block
            .attn
            .key
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w *= 1e5);
    }
    let f = s.featurize(&cfg, &promise());
    let input = &f.inputs[0];
    let mut tape = Tape::new();
    let out = enc_of(&m)
        .ok_encode(
            &mut tape,
            &input.seq,
            &input.descriptions,
            &mut Dropout::off(),
            ForwardOptions::default(),
        )
        .unwrap();
    let weights = out.attention_values(&tape);
    let silent: Vec<usize> = input
        .cs
        .real()
        .iter()
        .enumerate()
        .filter(|(slot, _)| weights.iter().flatten().all(|w| w[slot + 1] == 0.0))
        .map(|(_, &id)| id)
        .collect();
    assert!(!silent.is_empty(), "{weights:?}");
    assert!(silent.len() < input.cs.real().len(), "{weights:?}");
    for r in influence(&m, &f).unwrap() {
        if silent.contains(&r.id) {
            assert_eq!(r.influence, 0.0);
        } else {
            assert!(r.influence >= 0.0);
        }
    }
}

fn enc_of(m: &TaskModel<f64>) -> &okt_core::OkEncoder64 {
    match &m.backbone {
        Backbone::Knowledge(e) => e,
        Backbone::Vanilla(_) => unreachable!(),
    }
}

#[test]
fn duplicate_entries_have_equal_influence() {
    let tsv = "PersonX promises PersonY\txWant\tto keep it\n\
               PersonX leaves\txEffect\tgoes home\n\
               PersonX promises PersonY\txWant\tto keep it\n\
               PersonX promises PersonY\txAttr\tkind\n";
    let s =
        InfluenceSetup::new(KnowledgeBase::parse_tsv(tsv, &Templates::builtin(), "dup").unwrap());
    let cfg = config(&s.vocab, 8);
    let m = TaskModel::<f64>::knowledge(TaskSpec::classification(2), &cfg).unwrap();
    let f = s.featurize(
        &cfg,
        &Example::classification("Ann promises Bob that she leaves", 0),
    );
    assert_eq!(f.real_ids(), vec![0, 1, 2, 3]);
    let recs = influence(&m, &f).unwrap();
    let by_id = |id| recs.iter().find(|r| r.id == id).unwrap().influence;
    assert_eq!(by_id(0), by_id(2));
    assert_ne!(by_id(0), by_id(3));
}

#[test]
fn influence_ignores_entry_order() {
    let lines: Vec<&str> = vec![
        "PersonX promises PersonY\txWant\tto keep it",
        "PersonX leaves\txEffect\tgoes home",
        "PersonX promises PersonY\txAttr\tkind",
        "an hour\tisAfter\tsome time passes",
    ];
    let order = [2usize, 0, 3, 1];
    let a = InfluenceSetup::new(
        KnowledgeBase::parse_tsv(&lines.join("\n"), &Templates::builtin(), "a").unwrap(),
    );
    let permuted: Vec<&str> = order.iter().map(|&i| lines[i]).collect();
    let b = InfluenceSetup::new(
        KnowledgeBase::parse_tsv(&permuted.join("\n"), &Templates::builtin(), "b").unwrap(),
    );
    let mut vocab = a.vocab.clone();
    for t in b.vocab.tokens() {
        vocab.insert(t);
    }
    let a = InfluenceSetup {
        vocab: vocab.clone(),
        ..a
    };
    let b = InfluenceSetup { vocab, ..b };
    let cfg = config(&a.vocab, 9);
    let m = TaskModel::<f64>::knowledge(TaskSpec::classification(2), &cfg).unwrap();
    let ex = Example::classification("Ann promises Bob she leaves in an hour", 0);
    let (fa, fb) = (a.featurize(&cfg, &ex), b.featurize(&cfg, &ex));
    assert_eq!(fa.real_ids().len(), 4);
    assert!((m.probabilities(&fa).unwrap()[0] - m.probabilities(&fb).unwrap()[0]).abs() < 1e-10);
    let (ra, rb) = (influence(&m, &fa).unwrap(), influence(&m, &fb).unwrap());
    // Entry i of `a` is entry order⁻¹(i) of `b`.
    for r in &ra {
        let j = order.iter().position(|&i| i == r.id).unwrap();
        let other = rb.iter().find(|x| x.id == j).unwrap();
        assert!((r.influence - other.influence).abs() < 1e-10);
    }
}

#[test]
fn removing_and_re_adding_restores_prediction_bitwise() {
    let s = InfluenceSetup::new(KnowledgeBase::mini());
    let cfg = config(&s.vocab, 10);
    let m = TaskModel::<f64>::knowledge(TaskSpec::classification(2), &cfg).unwrap();
    let f = s.featurize(&cfg, &promise());
    let full = m.probabilities(&f).unwrap();
    for id in f.real_ids() {
        let mut g = f.without(id);
        let input = &mut g.inputs[0];
        let pos = f.inputs[0].cs.real().iter().position(|&i| i == id).unwrap();
        input
            .descriptions
            .insert(pos, f.inputs[0].descriptions[pos].clone());
        input.cs = CandidateSet::from_ids(input.cs.real().iter().copied().chain([id]), usize::MAX);
        assert_eq!(g, f);
        assert_eq!(m.probabilities(&g).unwrap(), full);
    }
}

#[test]
fn influence_contract_errors() {
    let s = InfluenceSetup::new(KnowledgeBase::mini());
    let cfg = config(&s.vocab, 11);
    let m = TaskModel::<f64>::knowledge(TaskSpec::classification(2), &cfg).unwrap();
    let none = s.featurize(&cfg, &Example::classification("nothing matches here", 0));
    assert!(influence(&m, &none).is_err());
    let v = TaskModel::<f64>::vanilla(TaskSpec::classification(2), &cfg).unwrap();
    assert!(influence(&v, &s.featurize(&cfg, &promise())).is_err());
    assert_eq!(euclidean(&[3.0f64, 0.0], &[0.0, 4.0]), 5.0);
}

fn random_sets<R: Rng>(r: &mut R, n: usize, ids: usize) -> Vec<CandidateSet> {
    (0..n)
        .map(|_| {
            let k = r.random_range(0..=3);
            CandidateSet::from_ids(sample(r, ids, k), usize::MAX)
        })
        .collect()
}

/// Set-containment recheck with plain loops.
fn split_oracle(
    train: &[CandidateSet],
    picked: &[usize],
    test: &[CandidateSet],
    any: bool,
) -> Vec<usize> {
    let mut seen: Vec<usize> = Vec::new();
    for &i in picked {
        for &id in train[i].real() {
            if !seen.contains(&id) {
                seen.push(id);
            }
        }
    }
    let mut out = Vec::new();
    for (j, cs) in test.iter().enumerate() {
        let ids = cs.real();
        let hit = ids.iter().filter(|id| seen.contains(id)).count();
        let ok = if any {
            hit > 0
        } else {
            !ids.is_empty() && hit == ids.len()
        };
        if ok {
            out.push(j);
        }
    }
    out
}

#[test]
fn low_resource_split_matches_set_containment() {
    let mut r = rng(12);
    let train = random_sets(&mut r, 200, 60);
    let test = random_sets(&mut r, 150, 60);
    for k in [8, 16, 32, 64] {
        for seed in 0..5 {
            let s = low_resource_split(&train, &test, k, seed, Coverage::Subset).unwrap();
            assert_eq!(
                s,
                low_resource_split(&train, &test, k, seed, Coverage::Subset).unwrap()
            );
            assert_eq!(s.train.len(), k);
            assert!(
                s.train.windows(2).all(|w| w[0] < w[1]) && s.train.iter().all(|&i| i < train.len())
            );
            assert_eq!(s.test, split_oracle(&train, &s.train, &test, false));
            let any = low_resource_split(&train, &test, k, seed, Coverage::AnyOverlap).unwrap();
            assert_eq!(any.train, s.train);
            assert_eq!(any.test, split_oracle(&train, &s.train, &test, true));
            assert!(s.test.iter().all(|i| any.test.contains(i)));
        }
        assert_ne!(
            low_resource_split(&train, &test, k, 0, Coverage::Subset)
                .unwrap()
                .train,
            low_resource_split(&train, &test, k, 1, Coverage::Subset)
                .unwrap()
                .train
        );
    }
}

#[test]
fn low_resource_split_edge_cases() {
    let mut r = rng(13);
    let train = random_sets(&mut r, 40, 10);
    let test = random_sets(&mut r, 30, 10);
    // Everything seen: every matched test example whose ids all occur in training.
    let all = low_resource_split(&train, &test, train.len(), 0, Coverage::Subset).unwrap();
    assert_eq!(all.train, (0..train.len()).collect::<Vec<_>>());
    assert_eq!(all.test, split_oracle(&train, &all.train, &test, false));
    let blank = vec![CandidateSet::null_only(); 20];
    assert!(low_resource_split(&blank, &test, 8, 0, Coverage::Subset)
        .unwrap()
        .test
        .is_empty());
}
