mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use okt_core::analysis::{
    example_candidates, influence, low_resource_split, param_drift, Coverage, DEFAULT_DRIFT_PATTERN,
};
use okt_core::kb::{kb_stats, IndexFile, KnowledgeBase, Templates, DEFAULT_N_MAX, DEFAULT_WINDOW};
use okt_core::model::adapt_from_pretrained;
use okt_core::synth::synth_generate;
use okt_core::task::{
    build_vocab, load_jsonl, to_jsonl, Backbone, Example, Featurized, Featurizer, TaskKind,
};
use okt_core::train::{metrics_tsv, train_with, EvalReport};
use okt_core::transformer::vocab::Vocabulary;
use okt_core::{Checkpoint, ModelConfig, TaskModel64, TaskSpec};
use rayon::prelude::*;
use serde_json::json;

use config::{BackboneKind, RunConfig};
use manifest::Recorder;

#[derive(Parser)]
#[command(
    name = "okt",
    version,
    about = "Knowledge-enhanced Transformer experiments"
)]
struct Cli {
    /// Write the run manifest here instead of beside the main output.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a head/relation/tail TSV and write a retrieval index.
    Ingest {
        #[arg(long)]
        kb: PathBuf,
        /// `relation<TAB>pattern` lines; the bundled ATOMIC templates by default.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the candidate commonsense of a text as JSON.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = DEFAULT_N_MAX)]
        nmax: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a task model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// `index<TAB>prediction<TAB>label` per example.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer L1 distance between matching matrices of two checkpoints.
    Drift {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long, default_value = DEFAULT_DRIFT_PATTERN)]
        pattern: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-out influence of each retrieved description.
    Influence {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Only this example (0-based line among non-blank lines).
        #[arg(long)]
        example: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Knowledge coverage of a dataset: matched ratio, |cs(x)|, description length, size.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        /// Column header; the data file stem by default.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Low-resource split: k sampled training examples and the test examples
    /// whose commonsense they cover.
    Split {
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = CoverageArg::Subset)]
        coverage: CoverageArg,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = DEFAULT_N_MAX)]
        nmax: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic knowledge task: kb.tsv, train.jsonl, test.jsonl.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2200)]
        kb_size: usize,
        #[arg(long, default_value_t = 16000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CoverageArg {
    Subset,
    Any,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Task checkpoint to start from; a vanilla one is adapted layer-wise
    /// when a knowledge backbone is requested.
    #[arg(long)]
    from_pretrained: Option<PathBuf>,
    /// Per-epoch accuracy on this set; its words join the vocabulary.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Defaults to `<out>.metrics.tsv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    num_labels: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let manifest = cli.manifest.as_deref();
    match cli.command {
        Command::Ingest { kb, templates, out } => {
            cmd_ingest(&kb, templates.as_deref(), &out, manifest)
        }
        Command::Retrieve {
            index,
            text,
            window,
            nmax,
            out,
        } => cmd_retrieve(&index, &text, window, nmax, out.as_deref(), manifest),
        Command::Train(args) => cmd_train(&args, manifest),
        Command::Eval {
            checkpoint,
            data,
            index,
            window,
            jobs,
            predictions,
            out,
        } => cmd_eval(
            &checkpoint,
            &data,
            index.as_deref(),
            window,
            jobs,
            predictions.as_deref(),
            out.as_deref(),
            manifest,
        ),
        Command::Drift {
            before,
            after,
            pattern,
            out,
        } => cmd_drift(&before, &after, &pattern, out.as_deref(), manifest),
        Command::Influence {
            checkpoint,
            data,
            index,
            example,
            window,
            jobs,
            out,
        } => cmd_influence(
            &checkpoint,
            &data,
            &index,
            example,
            window,
            jobs,
            out.as_deref(),
            manifest,
        ),
        Command::Stats {
            data,
            index,
            window,
            name,
            out,
        } => cmd_stats(&data, &index, window, name, out.as_deref(), manifest),
        Command::Split {
            train_data,
            test_data,
            index,
            k,
            seed,
            coverage,
            window,
            nmax,
            out,
        } => cmd_split(
            &train_data,
            &test_data,
            &index,
            k,
            seed,
            coverage,
            window,
            nmax,
            out.as_deref(),
            manifest,
        ),
        Command::Synth {
            seed,
            kb_size,
            train,
            test,
            out_dir,
        } => cmd_synth(seed, kb_size, train, test, &out_dir, manifest),
    }
}

/// Writes `data` to `out`, or to stdout when absent.
fn emit(data: &str, out: Option<&Path>, rec: &mut Recorder) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, data).with_context(|| format!("writing {}", path.display()))?;
            rec.output(path);
        }
        None => print!("{data}"),
    }
    Ok(())
}

fn load_index(path: &Path, rec: &mut Recorder) -> Result<KnowledgeBase> {
    rec.input(path)
        .with_context(|| format!("index {}", path.display()))?;
    let text = fs::read_to_string(path)?;
    let file: IndexFile =
        serde_json::from_str(&text).with_context(|| format!("parsing index {}", path.display()))?;
    Ok(KnowledgeBase::from_index_file(file))
}

fn load_data(path: &Path, rec: &mut Recorder) -> Result<Vec<Example>> {
    if !path.is_file() {
        bail!("data file {} does not exist", path.display());
    }
    rec.input(path)?;
    Ok(load_jsonl(path)?)
}

fn load_model(path: &Path, rec: &mut Recorder) -> Result<(TaskModel64, Vocabulary)> {
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    rec.input(path)?;
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    TaskModel64::from_checkpoint(&ck).with_context(|| format!("restoring {}", path.display()))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()?)
}

fn cmd_ingest(
    kb_path: &Path,
    templates: Option<&Path>,
    out: &Path,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut rec = Recorder::new("ingest");
    rec.input(kb_path)?;
    let templates = match templates {
        Some(p) => {
            rec.input(p)?;
            Templates::load(p)?
        }
        None => Templates::builtin(),
    };
    let kb = KnowledgeBase::ingest(kb_path, &templates)
        .with_context(|| format!("ingesting {}", kb_path.display()))?;
    if kb.is_empty() {
        eprintln!(
            "warning: {} holds no entries; the index is empty",
            kb_path.display()
        );
    }
    let json = serde_json::to_string(&kb.to_index_file())?;
    fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
    rec.output(out);
    rec.config(json!({ "templates": templates.0, "entries": kb.len() }));
    eprintln!("indexed {} entries", kb.len());
    rec.finish(manifest)
}

fn cmd_retrieve(
    index: &Path,
    text: &str,
    window: usize,
    nmax: usize,
    out: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut rec = Recorder::new("retrieve");
    let kb = load_index(index, &mut rec)?;
    let cs = kb.retrieve(text, window, nmax);
    let candidates: Vec<_> = cs
        .slots()
        .map(|slot| match slot {
            None => json!({ "id": null }),
            Some(id) => {
                let e = &kb.entries()[id];
                json!({
                    "id": id,
                    "head": e.head,
                    "relation": e.relation,
                    "tail": e.tail,
                    "description": e.rendered,
                })
            }
        })
        .collect();
    let doc = json!({ "text": text, "window": window, "n_max": nmax, "candidates": candidates });
    rec.config(json!({ "window": window, "n_max": nmax }));
    emit(&(serde_json::to_string_pretty(&doc)? + "\n"), out, &mut rec)?;
    rec.finish(manifest)
}

/// Classes (max label + 1) or choices (max candidate count) seen in `data`.
fn infer_labels(kind: TaskKind, data: &[Example]) -> usize {
    let n = match kind {
        TaskKind::Classification => data
            .iter()
            .filter_map(|e| e.label)
            .max()
            .map_or(0, |l| l + 1),
        _ => data
            .iter()
            .filter_map(|e| e.candidates.as_ref().map(Vec::len))
            .max()
            .unwrap_or(0),
    };
    n.max(2)
}

fn spec_for(kind: TaskKind, n: usize) -> TaskSpec {
    match kind {
        TaskKind::Classification => TaskSpec::classification(n),
        TaskKind::MultipleChoice => TaskSpec::multiple_choice(n),
        TaskKind::MlmScoring => TaskSpec::mlm_scoring(n),
    }
}

fn backbone_kind(m: &TaskModel64) -> BackboneKind {
    if m.uses_knowledge() {
        BackboneKind::Knowledge
    } else {
        BackboneKind::Vanilla
    }
}

/// The starting model: a pretrained checkpoint (adapted when it is vanilla
/// and a knowledge backbone is wanted) or a fresh initialization.
fn initial_model(
    args: &TrainArgs,
    cfg: &mut RunConfig,
    spec: TaskSpec,
    data: &[Example],
    eval: &[Example],
    kb: Option<&KnowledgeBase>,
    rec: &mut Recorder,
) -> Result<(TaskModel64, Vocabulary)> {
    let seed = cfg.model.seed;
    let Some(path) = &args.from_pretrained else {
        let vocab = build_vocab(data.iter().chain(eval), kb);
        cfg.model.vocab_size = vocab.len();
        let model = match cfg.backbone {
            BackboneKind::Knowledge => TaskModel64::knowledge(spec, &cfg.model)?,
            BackboneKind::Vanilla => TaskModel64::vanilla(spec, &cfg.model)?,
        };
        return Ok((model, vocab));
    };
    let (source, vocab) = load_model(path, rec)?;
    // Architecture and vocabulary come from the checkpoint.
    cfg.model = ModelConfig {
        seed,
        ..source.config.clone()
    };
    let from = backbone_kind(&source);
    let model = match (from, cfg.backbone) {
        (a, b) if a == b && source.spec == spec => source,
        (a, b) if a == b => TaskModel64::new(spec, source.backbone, &cfg.model, seed)?,
        (BackboneKind::Vanilla, BackboneKind::Knowledge) => {
            let Backbone::Vanilla(enc) = &source.backbone else {
                unreachable!()
            };
            let ok = adapt_from_pretrained(enc, &cfg.model, seed)?;
            TaskModel64::new(spec, Backbone::Knowledge(ok), &cfg.model, seed)?
        }
        (BackboneKind::Knowledge, BackboneKind::Vanilla) => {
            bail!(
                "{} is knowledge-enhanced; cannot train a vanilla model from it",
                path.display()
            )
        }
        _ => unreachable!(),
    };
    Ok((model, vocab))
}

fn cmd_train(args: &TrainArgs, manifest: Option<&Path>) -> Result<()> {
    let mut rec = Recorder::new("train");
    let mut cfg = RunConfig::resolve(args.config.as_deref())?;
    if let Some(p) = &args.config {
        rec.input(p)?;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(b) = args.backbone {
        cfg.backbone = b;
    }
    if let Some(n) = args.num_labels {
        cfg.num_labels = Some(n);
    }
    if let Some(w) = args.window {
        cfg.window = w;
    }
    cfg.train.validate()?;

    let data = load_data(&args.data, &mut rec)?;
    if data.is_empty() {
        bail!("{} holds no examples", args.data.display());
    }
    let eval = match &args.eval_data {
        Some(p) => load_data(p, &mut rec)?,
        None => Vec::new(),
    };
    let kb = match &args.index {
        Some(p) => Some(load_index(p, &mut rec)?),
        None if cfg.backbone == BackboneKind::Knowledge => {
            bail!("a knowledge backbone needs --index")
        }
        None => None,
    };
    let n = cfg
        .num_labels
        .unwrap_or_else(|| infer_labels(args.task, &data));
    cfg.num_labels = Some(n);
    let spec = spec_for(args.task, n);
    let (mut model, vocab) =
        initial_model(args, &mut cfg, spec, &data, &eval, kb.as_ref(), &mut rec)?;

    let mut f = Featurizer::new(&vocab, kb.as_ref(), &model.config, model.uses_knowledge());
    f.window = cfg.window;
    let train_set = f.featurize_all(&data, args.task)?;
    let eval_set = f.featurize_all(&eval, args.task)?;
    let eval_ref = (!eval_set.is_empty()).then_some(eval_set.as_slice());
    rec.config(&cfg);
    rec.seed(cfg.train.seed);

    let metrics = train_with(&mut model, &train_set, &cfg.train, eval_ref, |m| {
        let loss = m
            .train_loss
            .map_or_else(|| "NA".into(), |l| format!("{l:.5}"));
        let acc = m
            .eval_accuracy
            .map_or_else(|| "NA".into(), |a| format!("{a:.3}"));
        eprintln!(
            "epoch {}\tloss {loss}\trunning {:.5}\teval acc {acc}",
            m.epoch, m.running_loss
        );
    })?;

    model
        .to_checkpoint(&vocab)
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    rec.output(&args.out);
    let metrics_path = args.metrics.clone().unwrap_or_else(|| {
        let mut s = args.out.clone().into_os_string();
        s.push(".metrics.tsv");
        PathBuf::from(s)
    });
    fs::write(&metrics_path, metrics_tsv(&metrics))
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    rec.output(&metrics_path);
    rec.finish(manifest)
}

/// Featurizes and runs `per_example` on every example, `jobs` at a time.
/// Results keep the input order.
fn parallel_map<R: Send>(
    jobs: usize,
    n: usize,
    per_example: impl Fn(usize) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    pool(jobs)?.install(|| (0..n).into_par_iter().map(per_example).collect())
}

fn featurizer<'a>(
    model: &TaskModel64,
    vocab: &'a Vocabulary,
    kb: Option<&'a KnowledgeBase>,
    window: usize,
) -> Result<Featurizer<'a>> {
    if model.uses_knowledge() && kb.is_none() {
        bail!("the checkpoint is knowledge-enhanced; pass --index");
    }
    let mut f = Featurizer::new(vocab, kb, &model.config, model.uses_knowledge());
    f.window = window;
    Ok(f)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    index: Option<&Path>,
    window: usize,
    jobs: usize,
    predictions: Option<&Path>,
    out: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut rec = Recorder::new("eval");
    let (model, vocab) = load_model(checkpoint, &mut rec)?;
    let examples = load_data(data, &mut rec)?;
    let kb = index.map(|p| load_index(p, &mut rec)).transpose()?;
    let f = featurizer(&model, &vocab, kb.as_ref(), window)?;
    let kind = model.spec.kind;
    let rows: Vec<(usize, Featurized)> = parallel_map(jobs, examples.len(), |i| {
        let ex = f.featurize(&examples[i], kind, i)?;
        Ok((model.predict(&ex)?, ex))
    })?;
    let (preds, set): (Vec<usize>, Vec<Featurized>) = rows.into_iter().unzip();
    let report = EvalReport::from_predictions(preds, &set);
    if let Some(p) = predictions {
        let mut s = String::from("index\tprediction\tlabel\n");
        for (i, (pred, ex)) in report.predictions.iter().zip(&set).enumerate() {
            s.push_str(&format!("{i}\t{pred}\t{}\n", ex.label));
        }
        fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
        rec.output(p);
    }
    rec.config(json!({ "window": window, "jobs": jobs, "task": model.spec }));
    let doc =
        json!({ "accuracy": report.accuracy, "correct": report.correct, "total": report.total });
    emit(&(serde_json::to_string_pretty(&doc)? + "\n"), out, &mut rec)?;
    rec.finish(manifest)
}

fn cmd_drift(
    before: &Path,
    after: &Path,
    pattern: &str,
    out: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut rec = Recorder::new("drift");
    let mut load = |p: &Path| -> Result<Checkpoint> {
        rec.input(p)?;
        Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))
    };
    let (a, b) = (load(before)?, load(after)?);
    let report = param_drift(&a, &b, pattern)?;
    rec.config(json!({ "pattern": pattern }));
    emit(&report.to_tsv(), out, &mut rec)?;
    rec.finish(manifest)
}

#[allow(clippy::too_many_arguments)]
fn cmd_influence(
    checkpoint: &Path,
    data: &Path,
    index: &Path,
    example: Option<usize>,
    window: usize,
    jobs: usize,
    out: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut rec = Recorder::new("influence");
    let (model, vocab) = load_model(checkpoint, &mut rec)?;
    let examples = load_data(data, &mut rec)?;
    let kb = load_index(index, &mut rec)?;
    let f = featurizer(&model, &vocab, Some(&kb), window)?;
    let selected: Vec<usize> = match example {
        Some(i) if i < examples.len() => vec![i],
        Some(i) => bail!(
            "example {i} out of range; {} has {} examples",
            data.display(),
            examples.len()
        ),
        None => (0..examples.len()).collect(),
    };
    let kind = model.spec.kind;
    let results = parallel_map(jobs, selected.len(), |j| {
        let i = selected[j];
        let ex = f.featurize(&examples[i], kind, i)?;
        if ex.real_ids().is_empty() && example.is_none() {
            return Ok(None);
        }
        Ok(Some(influence(&model, &ex)?))
    })?;
    let mut s = String::from("example\trank\tid\tinfluence\tdescription\n");
    let mut skipped = 0;
    for (&i, r) in selected.iter().zip(&results) {
        let Some(records) = r else {
            skipped += 1;
            continue;
        };
        for r in records {
            let desc = &kb.entries()[r.id].rendered;
            s.push_str(&format!(
                "{i}\t{}\t{}\t{:.9e}\t{desc}\n",
                r.rank, r.id, r.influence
            ));
        }
    }
    if skipped > 0 {
        eprintln!("skipped {skipped} examples with no retrieved commonsense");
    }
    rec.config(json!({ "window": window, "jobs": jobs, "example": example }));
    emit(&s, out, &mut rec)?;
    rec.finish(manifest)
}

fn cmd_stats(
    data: &Path,
    index: &Path,
    window: usize,
    name: Option<String>,
    out: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut rec = Recorder::new("stats");
    let examples = load_data(data, &mut rec)?;
    let kb = load_index(index, &mut rec)?;
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let stats = kb_stats(&texts, &kb, window)?;
    let name = name.unwrap_or_else(|| {
        data.file_stem()
            .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
    });
    rec.config(json!({ "window": window, "name": name }));
    emit(&stats.to_tsv(&name), out, &mut rec)?;
    rec.finish(manifest)
}

#[allow(clippy::too_many_arguments)]
fn cmd_split(
    train_data: &Path,
    test_data: &Path,
    index: &Path,
    k: usize,
    seed: u64,
    coverage: CoverageArg,
    window: usize,
    nmax: usize,
    out: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut rec = Recorder::new("split");
    let train = load_data(train_data, &mut rec)?;
    let test = load_data(test_data, &mut rec)?;
    let kb = load_index(index, &mut rec)?;
    let cs = |d: &[Example]| {
        d.iter()
            .map(|e| example_candidates(e, &kb, window, nmax))
            .collect::<Vec<_>>()
    };
    let coverage = match coverage {
        CoverageArg::Subset => Coverage::Subset,
        CoverageArg::Any => Coverage::AnyOverlap,
    };
    let split = low_resource_split(&cs(&train), &cs(&test), k, seed, coverage)?;
    rec.config(json!({ "k": k, "coverage": coverage, "window": window, "n_max": nmax }));
    rec.seed(seed);
    emit(&(serde_json::to_string(&split)? + "\n"), out, &mut rec)?;
    rec.finish(manifest)
}

fn cmd_synth(
    seed: u64,
    kb_size: usize,
    train: usize,
    test: usize,
    dir: &Path,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut rec = Recorder::new("synth");
    let d = synth_generate(seed, kb_size, train, test);
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, body) in [
        ("kb.tsv", d.kb_tsv()),
        ("train.jsonl", to_jsonl(&d.train)),
        ("test.jsonl", to_jsonl(&d.test)),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        rec.output(&p);
    }
    rec.config(
        json!({ "kb_size": kb_size, "train": train, "test": test, "test_facts": d.test_facts }),
    );
    rec.seed(seed);
    rec.finish(Some(manifest.unwrap_or(&dir.join("manifest.json"))))
}
