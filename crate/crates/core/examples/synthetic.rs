//! Trains a vanilla and a knowledge-enhanced classifier on the synthetic
//! knowledge task and prints per-epoch metrics.
//!
//! `cargo run --release --example synthetic -- [seed] [train_n] [test_n] [hidden] [init_std] [lr] [train_facts]`

use std::time::Instant;

use okt_core::synth::synth_generate;
use okt_core::task::{build_vocab, Featurizer};
use okt_core::train::train_with;
use okt_core::{ModelConfig, TaskModel, TaskSpec, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let seed: u64 = arg(0, "0").parse().unwrap();
    let train_n: usize = arg(1, "400").parse().unwrap();
    let test_n: usize = arg(2, "100").parse().unwrap();
    let hidden: usize = arg(3, "16").parse().unwrap();
    let init_std: f64 = arg(4, "0.02").parse().unwrap();
    let lr: f64 = arg(5, "5e-6").parse().unwrap();
    let train_facts: usize = arg(6, &train_n.to_string()).parse().unwrap();

    let data = synth_generate(seed, train_facts + test_n, train_n, test_n);
    let vocab = build_vocab(data.train.iter().chain(&data.test), Some(&data.kb));
    let config = ModelConfig {
        layers: 2,
        hidden,
        heads: 2,
        ffn: 2 * hidden,
        vocab_size: vocab.len(),
        max_len: 16,
        n_max: 4,
        seed,
        init_std,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        lr,
        seed,
        ..TrainConfig::default()
    };
    let spec = TaskSpec::classification(2);
    for knowledge in [false, true] {
        let f = Featurizer::new(&vocab, Some(&data.kb), &config, knowledge);
        let train = f.featurize_all(&data.train, spec.kind).unwrap();
        let test = f.featurize_all(&data.test, spec.kind).unwrap();
        let mut model = if knowledge {
            TaskModel::<f64>::knowledge(spec, &config).unwrap()
        } else {
            TaskModel::<f64>::vanilla(spec, &config).unwrap()
        };
        let start = Instant::now();
        let label = if knowledge { "knowledge" } else { "vanilla" };
        train_with(&mut model, &train, &cfg, Some(&test), |m| {
            println!(
                "{label}\tepoch {}\tloss {:.5}\ttest acc {:.3}\t{:.1}s",
                m.epoch,
                m.train_loss.unwrap_or(f64::NAN),
                m.eval_accuracy.unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
        })
        .unwrap();
    }
}
