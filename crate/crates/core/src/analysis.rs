//! Diagnostics: parameter drift between checkpoints, leave-one-out influence
//! of commonsense entries, and the low-resource train/test protocol.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::AnalysisError;
use crate::kb::{CandidateSet, KnowledgeBase};
use crate::model::layer_of;
use crate::module::Module;
use crate::scalar::Scalar;
use crate::task::{EncodedInput, Example, Featurized, TaskModel};

/// Default matrix family for drift: the feed-forward input projection.
pub const DEFAULT_DRIFT_PATTERN: &str = "*ffn.w_i.weight";

/// Glob match where `*` spans any (possibly empty) substring.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

/// L1 distance per layer for the parameters selected by a name pattern.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftReport {
    pub pattern: String,
    pub per_layer: BTreeMap<usize, f64>,
    /// Selected parameters without a layer index, by name.
    pub unlayered: BTreeMap<String, f64>,
}

impl DriftReport {
    pub fn total(&self) -> f64 {
        self.per_layer.values().sum::<f64>() + self.unlayered.values().sum::<f64>()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("layer\tl1\n");
        for (l, d) in &self.per_layer {
            s.push_str(&format!("{l}\t{d:.9e}\n"));
        }
        for (n, d) in &self.unlayered {
            s.push_str(&format!("{n}\t{d:.9e}\n"));
        }
        s
    }
}

type Flat = Vec<(String, Vec<usize>, Vec<f64>)>;

fn drift_of(a: Flat, b: Flat, pattern: &str) -> Result<DriftReport, AnalysisError> {
    let mut a = a.into_iter();
    let mut b = b.into_iter();
    let mut report = DriftReport {
        pattern: pattern.to_string(),
        ..DriftReport::default()
    };
    let mut matched = 0;
    loop {
        match (a.next(), b.next()) {
            (None, None) => break,
            (Some((n, ..)), None) | (None, Some((n, ..))) => {
                return Err(AnalysisError::StructureMismatch(n))
            }
            (Some((na, sa, va)), Some((nb, sb, vb))) => {
                if na != nb || sa != sb || va.len() != vb.len() {
                    return Err(AnalysisError::StructureMismatch(na));
                }
                if !glob_match(pattern, &na) {
                    continue;
                }
                matched += 1;
                let d: f64 = va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).sum();
                match layer_of(&na) {
                    Some(l) => *report.per_layer.entry(l).or_default() += d,
                    None => *report.unlayered.entry(na).or_default() += d,
                }
            }
        }
    }
    if matched == 0 {
        return Err(AnalysisError::Contract(format!(
            "no parameter matches `{pattern}`"
        )));
    }
    Ok(report)
}

/// Drift between two checkpoints with identical parameter structure.
pub fn param_drift(
    before: &Checkpoint,
    after: &Checkpoint,
    pattern: &str,
) -> Result<DriftReport, AnalysisError> {
    let flat = |c: &Checkpoint| -> Flat {
        c.params
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    t.shape().to_vec(),
                    t.data().iter().map(|&x| x as f64).collect::<Vec<_>>(),
                )
            })
            .collect()
    };
    drift_of(flat(before), flat(after), pattern)
}

/// Drift between two in-memory models, at full precision.
pub fn module_drift<T: Scalar, M: Module<T>>(
    before: &M,
    after: &M,
    pattern: &str,
) -> Result<DriftReport, AnalysisError> {
    let flat = |m: &M| -> Flat {
        m.named_params()
            .into_iter()
            .map(|(n, t)| {
                (
                    n,
                    t.shape().to_vec(),
                    t.data().iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
                )
            })
            .collect()
    };
    drift_of(flat(before), flat(after), pattern)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub id: usize,
    pub influence: f64,
    /// 1 is the most influential.
    pub rank: usize,
}

pub fn influence_tsv(records: &[InfluenceRecord]) -> String {
    let mut s = String::from("rank\tid\tinfluence\n");
    for r in records {
        s.push_str(&format!("{}\t{}\t{:.9e}\n", r.rank, r.id, r.influence));
    }
    s
}

impl EncodedInput {
    /// This input with commonsense entry `id` removed (and its description).
    pub fn without(&self, id: usize) -> Self {
        let mut out = self.clone();
        if let Some(pos) = self.cs.real().iter().position(|&i| i == id) {
            out.descriptions.remove(pos);
            out.cs = self.cs.without(id);
        }
        out
    }
}

impl Featurized {
    /// Real entry ids over all inputs, ascending.
    pub fn real_ids(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .inputs
            .iter()
            .flat_map(|i| i.cs.real().iter().copied())
            .collect();
        set.into_iter().collect()
    }

    pub fn without(&self, id: usize) -> Self {
        Self {
            inputs: self.inputs.iter().map(|i| i.without(id)).collect(),
            label: self.label,
        }
    }
}

pub fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Leave-one-out influence of every real commonsense entry of `ex`: the
/// Euclidean distance between the prediction vector with the full candidate
/// set and with that entry removed. Sorted by influence (descending), ties by
/// id; the null slot is never removed.
pub fn influence<T: Scalar>(
    model: &TaskModel<T>,
    ex: &Featurized,
) -> Result<Vec<InfluenceRecord>, AnalysisError> {
    if !model.uses_knowledge() {
        return Err(AnalysisError::Contract(
            "influence needs a knowledge-enhanced model".into(),
        ));
    }
    let ids = ex.real_ids();
    if ids.is_empty() {
        return Err(AnalysisError::Contract(
            "candidate set holds only the null commonsense".into(),
        ));
    }
    let full = model.probabilities(ex)?;
    let mut records = ids
        .iter()
        .map(|&id| {
            let p = model.probabilities(&ex.without(id))?;
            Ok(InfluenceRecord {
                id,
                influence: euclidean(&full, &p),
                rank: 0,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    rank_records(&mut records);
    Ok(records)
}

/// Sorts by influence (descending), ties by id, and assigns ranks `1..=n`.
pub fn rank_records(records: &mut [InfluenceRecord]) {
    records.sort_by(|a, b| b.influence.total_cmp(&a.influence).then(a.id.cmp(&b.id)));
    for (i, r) in records.iter_mut().enumerate() {
        r.rank = i + 1;
    }
}

/// Real candidates of an example: precomputed ids when present, otherwise
/// retrieval over the text and the optional pair.
pub fn example_candidates(
    ex: &Example,
    kb: &KnowledgeBase,
    window: usize,
    n_max: usize,
) -> CandidateSet {
    match &ex.cs {
        Some(ids) => CandidateSet::from_ids(ids.iter().copied(), n_max),
        None => {
            let mut ids: Vec<usize> = kb.retrieve(&ex.text, window, usize::MAX).real().to_vec();
            if let Some(p) = &ex.text_pair {
                ids.extend(kb.retrieve(p, window, usize::MAX).real());
            }
            CandidateSet::from_ids(ids, n_max)
        }
    }
}

/// How a test example's knowledge must relate to what training saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    /// Every real candidate occurred in the sampled training examples.
    #[default]
    Subset,
    /// At least one real candidate occurred.
    AnyOverlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowResourceSplit {
    /// Indices into the training set, ascending.
    pub train: Vec<usize>,
    /// Indices into the test set, ascending.
    pub test: Vec<usize>,
}

/// Samples `k` training examples uniformly with `seed` and keeps the test
/// examples whose nonempty real candidate set is covered by the union of the
/// sample's candidates.
pub fn low_resource_split(
    train: &[CandidateSet],
    test: &[CandidateSet],
    k: usize,
    seed: u64,
    coverage: Coverage,
) -> Result<LowResourceSplit, AnalysisError> {
    if k > train.len() {
        return Err(AnalysisError::Contract(format!(
            "k = {k} exceeds the {} training examples",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, train.len(), k).into_vec();
    picked.sort_unstable();
    let seen: BTreeSet<usize> = picked
        .iter()
        .flat_map(|&i| train[i].real().iter().copied())
        .collect();
    let kept = test
        .iter()
        .enumerate()
        .filter(|(_, cs)| {
            cs.has_real()
                && match coverage {
                    Coverage::Subset => cs.real().iter().all(|id| seen.contains(id)),
                    Coverage::AnyOverlap => cs.real().iter().any(|id| seen.contains(id)),
                }
        })
        .map(|(i, _)| i)
        .collect();
    Ok(LowResourceSplit {
        train: picked,
        test: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob() {
        assert!(glob_match(
            "*ffn.w_i.weight",
            "text.layers.0.ffn.w_i.weight"
        ));
        assert!(glob_match("text.*.w_i.*", "text.layers.3.ffn.w_i.bias"));
        assert!(!glob_match("*ffn.w_i.weight", "layers.0.ffn.w_o.weight"));
        assert!(glob_match("exact", "exact"));
        assert!(!glob_match("a*a", "a"));
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        let mut r = vec![
            InfluenceRecord {
                id: 7,
                influence: 0.5,
                rank: 0,
            },
            InfluenceRecord {
                id: 2,
                influence: 0.5,
                rank: 0,
            },
            InfluenceRecord {
                id: 4,
                influence: 0.9,
                rank: 0,
            },
        ];
        rank_records(&mut r);
        let order: Vec<(usize, usize)> = r.iter().map(|r| (r.id, r.rank)).collect();
        assert_eq!(order, vec![(4, 1), (2, 2), (7, 3)]);
    }

    #[test]
    fn split_rejects_large_k() {
        let train = vec![CandidateSet::null_only(); 3];
        assert!(low_resource_split(&train, &[], 4, 0, Coverage::Subset).is_err());
    }
}
