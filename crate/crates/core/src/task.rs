//! Task heads on top of a vanilla or knowledge-enhanced encoder, plus the
//! featurization of raw examples into token sequences and candidate sets.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{ModelError, TrainError};
use crate::kb::{CandidateSet, KnowledgeBase, DEFAULT_WINDOW};
use crate::model::{CommonsenseCache, ForwardOptions, OkEncoder};
use crate::module::{join, Module};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::layers::{Dropout, Linear};
use crate::transformer::vocab::{tokenize, TokenSequence, Vocabulary, CLS, KNOWLEDGE, MASK, SEP};
use crate::transformer::Encoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    MultipleChoice,
    MlmScoring,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classification" => Ok(Self::Classification),
            "multiple_choice" | "mc" => Ok(Self::MultipleChoice),
            "mlm_scoring" | "mlm" => Ok(Self::MlmScoring),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Classes for classification, choices for the other kinds.
    pub num_labels: usize,
}

impl TaskSpec {
    pub fn classification(num_classes: usize) -> Self {
        Self {
            kind: TaskKind::Classification,
            num_labels: num_classes,
        }
    }

    pub fn multiple_choice(num_choices: usize) -> Self {
        Self {
            kind: TaskKind::MultipleChoice,
            num_labels: num_choices,
        }
    }

    pub fn mlm_scoring(num_choices: usize) -> Self {
        Self {
            kind: TaskKind::MlmScoring,
            num_labels: num_choices,
        }
    }

    /// Width of the linear head over `[CLS]`; MLM scoring has none.
    pub fn head_outputs(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.num_labels,
            TaskKind::MultipleChoice => 1,
            TaskKind::MlmScoring => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Backbone<T> {
    Vanilla(Encoder<T>),
    Knowledge(OkEncoder<T>),
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        match self {
            Backbone::Vanilla(e) => e.visit(prefix, f),
            Backbone::Knowledge(e) => e.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            Backbone::Vanilla(e) => e.visit_mut(prefix, f),
            Backbone::Knowledge(e) => e.visit_mut(prefix, f),
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        match self {
            Backbone::Vanilla(e) => e.for_each_param_mut(f),
            Backbone::Knowledge(e) => e.for_each_param_mut(f),
        }
    }
}

impl<T: Scalar> Backbone<T> {
    pub fn uses_knowledge(&self) -> bool {
        matches!(self, Backbone::Knowledge(_))
    }

    /// Token table used for tied MLM output embeddings.
    pub fn token_table(&self) -> &Tensor<T> {
        match self {
            Backbone::Vanilla(e) => &e.embeddings.token,
            Backbone::Knowledge(e) => &e.text.embeddings.token,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Backbone::Vanilla(_) => "vanilla",
            Backbone::Knowledge(_) => "knowledge",
        }
    }
}

/// One tokenized model input with its commonsense.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub seq: TokenSequence,
    pub cs: CandidateSet,
    /// Tokenized real descriptions, aligned with `cs.real()`.
    pub descriptions: Vec<TokenSequence>,
    /// `(position, target token)` pairs for MLM scoring.
    pub mask_targets: Vec<(usize, usize)>,
}

/// A featurized example: one input for classification, one per candidate
/// for the choice tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    pub inputs: Vec<EncodedInput>,
    pub label: usize,
}

/// Classification head and optional MLM bias over an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel<T> {
    pub spec: TaskSpec,
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub head: Option<Linear<T>>,
    pub mlm_bias: Option<Tensor<T>>,
}

impl<T: Scalar> Module<T> for TaskModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.backbone.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.mlm_bias.visit(&join(prefix, "mlm_bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.backbone.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.mlm_bias.visit_mut(&join(prefix, "mlm_bias"), f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        self.backbone.for_each_param_mut(f);
        self.head.for_each_param_mut(f);
        self.mlm_bias.for_each_param_mut(f);
    }
}

/// Metadata stored in a task checkpoint header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMeta {
    pub spec: TaskSpec,
    pub backbone: String,
    #[serde(default)]
    pub vocab: Vec<String>,
}

impl<T: Scalar> TaskModel<T> {
    /// Wraps `backbone` with a fresh head drawn with `seed`.
    pub fn new(
        spec: TaskSpec,
        backbone: Backbone<T>,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if spec.num_labels == 0 || (spec.kind != TaskKind::Classification && spec.num_labels < 2) {
            return Err(ModelError::Config(format!("bad task spec {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let head = match spec.head_outputs() {
            0 => None,
            k => Some(Linear::init(d, k, config.init_std, &mut rng)),
        };
        let mlm_bias = (spec.kind == TaskKind::MlmScoring)
            .then(|| Tensor::zeros(&[config.vocab_size]).trainable());
        Ok(Self {
            spec,
            config: config.clone(),
            backbone,
            head,
            mlm_bias,
        })
    }

    /// Randomly initialized vanilla encoder plus head.
    pub fn vanilla(spec: TaskSpec, config: &ModelConfig) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc = Encoder::init(config, &mut rng)?;
        Self::new(
            spec,
            Backbone::Vanilla(enc),
            config,
            config.seed.wrapping_add(2),
        )
    }

    /// Randomly initialized knowledge-enhanced encoder plus head.
    pub fn knowledge(spec: TaskSpec, config: &ModelConfig) -> Result<Self, ModelError> {
        let enc = OkEncoder::init(config)?;
        Self::new(
            spec,
            Backbone::Knowledge(enc),
            config,
            config.seed.wrapping_add(2),
        )
    }

    pub fn uses_knowledge(&self) -> bool {
        self.backbone.uses_knowledge()
    }

    pub fn meta(&self, vocab: &Vocabulary) -> TaskMeta {
        TaskMeta {
            spec: self.spec,
            backbone: self.backbone.kind_name().to_string(),
            vocab: vocab.tokens().to_vec(),
        }
    }

    pub fn to_checkpoint(&self, vocab: &Vocabulary) -> Checkpoint {
        let meta = serde_json::to_value(self.meta(vocab)).expect("meta serializes");
        Checkpoint::from_module("task", &self.config, meta, self)
    }

    /// Rebuilds a task model (and its vocabulary) from a task checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Vocabulary), ModelError> {
        if ck.kind != "task" {
            return Err(ModelError::Config(format!(
                "expected a task checkpoint, got `{}`",
                ck.kind
            )));
        }
        let meta: TaskMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| ModelError::Config(format!("task metadata: {e}")))?;
        let config = &ck.config;
        let backbone = match meta.backbone.as_str() {
            "vanilla" => Backbone::Vanilla(Encoder::shape_template(config)),
            "knowledge" => Backbone::Knowledge(OkEncoder::shape_template(config)),
            other => return Err(ModelError::Config(format!("unknown backbone `{other}`"))),
        };
        let mut model = Self::new(meta.spec, backbone, config, 0)?;
        ck.apply_to(&mut model)?;
        let vocab = Vocabulary::from_text(&meta.vocab.join("\n"))?;
        Ok((model, vocab))
    }

    /// Final-layer activations of one input.
    pub fn encode<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        input: &EncodedInput,
        drop: &mut Dropout,
        cache: &mut CommonsenseCache,
    ) -> Result<Var, ModelError> {
        match &self.backbone {
            Backbone::Vanilla(e) => {
                let acts = e.encode(tape, &input.seq, &self.config, drop)?;
                Ok(*acts.last().expect("embedding layer"))
            }
            Backbone::Knowledge(e) => {
                let out = e.ok_encode_cached(
                    tape,
                    &input.seq,
                    &input.descriptions,
                    drop,
                    ForwardOptions::default(),
                    cache,
                )?;
                Ok(out.last())
            }
        }
    }

    /// `W · H_L[CLS] + b` for one input.
    pub fn head_logits<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        input: &EncodedInput,
        drop: &mut Dropout,
        cache: &mut CommonsenseCache,
    ) -> Result<Var, ModelError> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| ModelError::Config("task has no linear head".into()))?;
        let h = self.encode(tape, input, drop, cache)?;
        let cls = tape.slice_rows(h, 0, 1)?;
        Ok(head.forward(tape, cls)?)
    }

    /// Sum over masked positions of the log-probability of the target token,
    /// with the output layer tied to the token embeddings.
    pub fn mlm_log_prob<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        input: &EncodedInput,
        drop: &mut Dropout,
        cache: &mut CommonsenseCache,
    ) -> Result<Var, ModelError> {
        let bias = self
            .mlm_bias
            .as_ref()
            .ok_or_else(|| ModelError::Config("task has no MLM bias".into()))?;
        if input.mask_targets.is_empty() {
            return Err(ModelError::Config("input has no masked positions".into()));
        }
        let h = self.encode(tape, input, drop, cache)?;
        let d = self.config.hidden;
        let vocab = self.backbone.token_table().rows();
        let rows: Vec<Var> = input
            .mask_targets
            .iter()
            .map(|&(p, _)| tape.slice_rows(h, p, 1))
            .collect::<Result<_, _>>()?;
        let hm = tape.concat_rows(&rows)?;
        let table = tape.param(self.backbone.token_table());
        let logits = tape.matmul_nt(hm, table)?;
        let b = tape.param(bias);
        let logits = tape.add_row(logits, b)?;
        let lp = tape.log_softmax(logits);
        let flat: Vec<usize> = input
            .mask_targets
            .iter()
            .enumerate()
            .map(|(i, &(_, tok))| i * vocab + tok)
            .collect();
        debug_assert_eq!(tape.shape(hm)[1], d);
        let picked = tape.pick(lp, &flat)?;
        Ok(tape.sum(picked))
    }

    /// Unnormalized scores of one example as a `1 × K` row: class logits,
    /// per-choice logits, or per-choice MLM log-probabilities.
    pub fn scores<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        ex: &Featurized,
        drop: &mut Dropout,
        cache: &mut CommonsenseCache,
    ) -> Result<Var, ModelError> {
        match self.spec.kind {
            TaskKind::Classification => {
                let [input] = ex.inputs.as_slice() else {
                    return Err(ModelError::Config(
                        "classification takes exactly one input".into(),
                    ));
                };
                self.head_logits(tape, input, drop, cache)
            }
            TaskKind::MultipleChoice | TaskKind::MlmScoring => {
                if ex.inputs.len() < 2 {
                    return Err(ModelError::Config(
                        "choice tasks need at least two candidates".into(),
                    ));
                }
                let mut cols = Vec::with_capacity(ex.inputs.len());
                for input in &ex.inputs {
                    cols.push(match self.spec.kind {
                        TaskKind::MultipleChoice => self.head_logits(tape, input, drop, cache)?,
                        _ => {
                            let s = self.mlm_log_prob(tape, input, drop, cache)?;
                            tape.reshape(s, &[1, 1])?
                        }
                    });
                }
                Ok(tape.concat_cols(&cols)?)
            }
        }
    }

    /// Per-example loss: cross-entropy over the scores for classification and
    /// multiple choice, negative log-likelihood of the answer for MLM scoring.
    pub fn loss<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        ex: &Featurized,
        drop: &mut Dropout,
        cache: &mut CommonsenseCache,
    ) -> Result<Var, ModelError> {
        let s = self.scores(tape, ex, drop, cache)?;
        let k = tape.shape(s)[1];
        if ex.label >= k {
            return Err(ModelError::Config(format!(
                "label {} out of range for {k} outputs",
                ex.label
            )));
        }
        match self.spec.kind {
            TaskKind::MlmScoring => {
                let lp = tape.pick(s, &[ex.label])?;
                Ok(tape.scale(lp, -T::one()))
            }
            _ => Ok(tape.cross_entropy(s, &[ex.label])?),
        }
    }

    /// Prediction vector: softmax of the scores (dropout off).
    pub fn probabilities(&self, ex: &Featurized) -> Result<Vec<T>, ModelError> {
        let mut tape = Tape::new();
        let mut cache = CommonsenseCache::new();
        let s = self.scores(&mut tape, ex, &mut Dropout::off(), &mut cache)?;
        let p = tape.softmax(s, 1)?;
        Ok(tape.value(p).to_vec())
    }

    /// Raw scores (dropout off).
    pub fn score_values(&self, ex: &Featurized) -> Result<Vec<T>, ModelError> {
        let mut tape = Tape::new();
        let mut cache = CommonsenseCache::new();
        let s = self.scores(&mut tape, ex, &mut Dropout::off(), &mut cache)?;
        Ok(tape.value(s).to_vec())
    }

    /// Argmax of the scores; ties go to the lowest index.
    pub fn predict(&self, ex: &Featurized) -> Result<usize, ModelError> {
        Ok(argmax(&self.score_values(ex)?))
    }

    /// Loss of one example with dropout off.
    pub fn example_loss(&self, ex: &Featurized) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let mut cache = CommonsenseCache::new();
        let l = self.loss(&mut tape, ex, &mut Dropout::off(), &mut cache)?;
        Ok(tape.scalar(l).as_f64())
    }
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_pair: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
    /// Whitespace-word range `[start, end)` replaced by each candidate; when
    /// absent the first `_` word is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<[usize; 2]>,
    /// Precomputed candidate entry ids; overrides retrieval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cs: Option<Vec<usize>>,
}

impl Example {
    pub fn classification(text: &str, label: usize) -> Self {
        Self {
            text: text.to_string(),
            label: Some(label),
            ..Self::default()
        }
    }

    /// Every string that may be tokenized for this example.
    pub fn all_text(&self) -> Vec<&str> {
        let mut out = vec![self.text.as_str()];
        out.extend(self.text_pair.as_deref());
        if let Some(c) = &self.candidates {
            out.extend(c.iter().map(String::as_str));
        }
        out
    }

    /// Word range replaced by candidates.
    pub fn resolve_span(&self) -> Result<(usize, usize), String> {
        let n = self.text.split_whitespace().count();
        let (s, e) = match self.span {
            Some([s, e]) => (s, e),
            None => {
                let s = self
                    .text
                    .split_whitespace()
                    .position(|w| w == "_")
                    .ok_or("no span given and no `_` placeholder in text")?;
                (s, s + 1)
            }
        };
        if s >= e || e > n {
            return Err(format!("span [{s}, {e}) out of bounds for {n} words"));
        }
        Ok((s, e))
    }

    /// The text with the span replaced by `candidate`.
    pub fn substitute(&self, candidate: &str) -> Result<String, String> {
        let (s, e) = self.resolve_span()?;
        let ws: Vec<&str> = self.text.split_whitespace().collect();
        let mut out: Vec<&str> = ws[..s].to_vec();
        out.push(candidate);
        out.extend(&ws[e..]);
        Ok(out.join(" "))
    }
}

/// The bundled mini dataset (JSON lines) used for coverage statistics.
pub const MINI_DATASET: &str = include_str!("../data/mini_dataset.jsonl");

pub fn mini_dataset() -> Vec<Example> {
    parse_jsonl(MINI_DATASET, "mini_dataset.jsonl").expect("bundled dataset is valid")
}

/// Reads a JSON-lines dataset; blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>, TrainError> {
    let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn parse_jsonl(text: &str, source: &str) -> Result<Vec<Example>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(line).map_err(|e| TrainError::Data {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn to_jsonl(examples: &[Example]) -> String {
    examples
        .iter()
        .map(|e| serde_json::to_string(e).expect("examples serialize") + "\n")
        .collect()
}

/// Turns raw examples into model inputs: tokenization, retrieval and
/// description encoding.
#[derive(Debug, Clone)]
pub struct Featurizer<'a> {
    pub vocab: &'a Vocabulary,
    pub kb: Option<&'a KnowledgeBase>,
    pub max_len: usize,
    pub window: usize,
    pub n_max: usize,
    /// Insert `[k]` and attach commonsense (knowledge backbone).
    pub knowledge: bool,
}

impl<'a> Featurizer<'a> {
    pub fn new(
        vocab: &'a Vocabulary,
        kb: Option<&'a KnowledgeBase>,
        config: &ModelConfig,
        knowledge: bool,
    ) -> Self {
        Self {
            vocab,
            kb,
            max_len: config.max_len,
            window: DEFAULT_WINDOW,
            n_max: config.n_max,
            knowledge,
        }
    }

    fn candidates(&self, texts: &[&str], precomputed: Option<&[usize]>) -> CandidateSet {
        if !self.knowledge {
            return CandidateSet::null_only();
        }
        match (precomputed, self.kb) {
            (Some(ids), _) => CandidateSet::from_ids(ids.iter().copied(), self.n_max),
            (None, Some(kb)) => {
                let ids: Vec<usize> = texts
                    .iter()
                    .flat_map(|t| kb.retrieve(t, self.window, usize::MAX).real().to_vec())
                    .collect();
                CandidateSet::from_ids(ids, self.n_max)
            }
            (None, None) => CandidateSet::null_only(),
        }
    }

    fn describe(&self, cs: &CandidateSet) -> Result<Vec<TokenSequence>, ModelError> {
        let Some(kb) = self.kb else {
            if cs.has_real() {
                return Err(ModelError::Config(
                    "candidate ids given but no knowledge base".into(),
                ));
            }
            return Ok(Vec::new());
        };
        cs.real()
            .iter()
            .map(|&id| {
                let e = kb
                    .entry(id)
                    .ok_or_else(|| ModelError::Config(format!("unknown commonsense id {id}")))?;
                Ok(tokenize(self.vocab, &e.rendered, None, self.max_len, false)?.trimmed())
            })
            .collect()
    }

    fn input(
        &self,
        text: &str,
        pair: Option<&str>,
        precomputed: Option<&[usize]>,
    ) -> Result<EncodedInput, ModelError> {
        let seq = tokenize(self.vocab, text, pair, self.max_len, self.knowledge)?.trimmed();
        let mut texts = vec![text];
        texts.extend(pair);
        let cs = self.candidates(&texts, precomputed);
        let descriptions = self.describe(&cs)?;
        Ok(EncodedInput {
            seq,
            cs,
            descriptions,
            mask_targets: Vec::new(),
        })
    }

    /// `[CLS] ([k]) left [MASK]… right [SEP]` with one mask per candidate word.
    fn masked_input(&self, ex: &Example, candidate: &str) -> Result<EncodedInput, String> {
        let (s, e) = ex.resolve_span()?;
        let ws: Vec<&str> = ex.text.split_whitespace().collect();
        let left = self.vocab.encode_words(&ws[..s].join(" "));
        let right = self.vocab.encode_words(&ws[e..].join(" "));
        let targets = self.vocab.encode_words(candidate);
        if targets.is_empty() {
            return Err(format!("candidate `{candidate}` has no word tokens"));
        }
        let mut ids = vec![CLS];
        if self.knowledge {
            ids.push(KNOWLEDGE);
        }
        ids.extend(&left);
        let start = ids.len();
        ids.extend(std::iter::repeat_n(MASK, targets.len()));
        ids.extend(&right);
        ids.push(SEP);
        if ids.len() > self.max_len {
            return Err(format!(
                "masked sentence needs {} tokens, max_len is {}",
                ids.len(),
                self.max_len
            ));
        }
        let n = ids.len();
        let seq = TokenSequence::from_ids(ids, vec![0; n]);
        let substituted = ex.substitute(candidate)?;
        let cs = self.candidates(&[substituted.as_str()], ex.cs.as_deref());
        let descriptions = self.describe(&cs).map_err(|e| e.to_string())?;
        Ok(EncodedInput {
            seq,
            cs,
            descriptions,
            mask_targets: targets
                .iter()
                .enumerate()
                .map(|(i, &t)| (start + i, t))
                .collect(),
        })
    }

    pub fn featurize(
        &self,
        ex: &Example,
        kind: TaskKind,
        index: usize,
    ) -> Result<Featurized, TrainError> {
        let bad = |message: String| TrainError::Example { index, message };
        match kind {
            TaskKind::Classification => {
                let label = ex.label.ok_or_else(|| bad("missing `label`".into()))?;
                let input = self
                    .input(&ex.text, ex.text_pair.as_deref(), ex.cs.as_deref())
                    .map_err(|e| bad(e.to_string()))?;
                Ok(Featurized {
                    inputs: vec![input],
                    label,
                })
            }
            TaskKind::MultipleChoice | TaskKind::MlmScoring => {
                let cands = ex
                    .candidates
                    .as_ref()
                    .filter(|c| c.len() >= 2)
                    .ok_or_else(|| bad("need at least two `candidates`".into()))?;
                let answer = ex.answer.ok_or_else(|| bad("missing `answer`".into()))?;
                if answer >= cands.len() {
                    return Err(bad(format!("answer {answer} out of range")));
                }
                let inputs = cands
                    .iter()
                    .map(|c| {
                        if kind == TaskKind::MlmScoring {
                            self.masked_input(ex, c)
                        } else {
                            let sent = ex.substitute(c)?;
                            self.input(&sent, ex.text_pair.as_deref(), ex.cs.as_deref())
                                .map_err(|e| e.to_string())
                        }
                    })
                    .collect::<Result<Vec<_>, String>>()
                    .map_err(bad)?;
                Ok(Featurized {
                    inputs,
                    label: answer,
                })
            }
        }
    }

    pub fn featurize_all(
        &self,
        examples: &[Example],
        kind: TaskKind,
    ) -> Result<Vec<Featurized>, TrainError> {
        examples
            .iter()
            .enumerate()
            .map(|(i, e)| self.featurize(e, kind, i))
            .collect()
    }
}

/// Vocabulary over the dataset texts and every knowledge-base description.
pub fn build_vocab<'a>(
    examples: impl IntoIterator<Item = &'a Example>,
    kb: Option<&KnowledgeBase>,
) -> Vocabulary {
    let mut texts: Vec<&str> = examples.into_iter().flat_map(Example::all_text).collect();
    if let Some(kb) = kb {
        texts.extend(kb.entries().iter().map(|e| e.rendered.as_str()));
    }
    Vocabulary::build(texts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_resolution() {
        let ex = Example {
            text: "The trophy does not fit because _ is too big".into(),
            ..Example::default()
        };
        assert_eq!(ex.resolve_span().unwrap(), (6, 7));
        assert_eq!(
            ex.substitute("the trophy").unwrap(),
            "The trophy does not fit because the trophy is too big"
        );
        let bad = Example {
            span: Some([3, 30]),
            ..ex
        };
        assert!(bad.resolve_span().is_err());
    }

    #[test]
    fn jsonl_errors_have_line_numbers() {
        let err = parse_jsonl("{\"text\":\"a\",\"label\":0}\n\nnot json\n", "d.jsonl").unwrap_err();
        assert!(err.to_string().starts_with("d.jsonl:3:"), "{err}");
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
