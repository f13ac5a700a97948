//! Prints per-fraction and per-strategy test F1 for the built-in presets.
//! Exploratory tool for picking experiment scales; not part of the test gate.

use finmrc::corpus::{resample_split, SplitSizes};
use finmrc::encoder::{Activation, EncoderConfig};
use finmrc::eval::mean_std;
use finmrc::presets;
use finmrc::query::Strategy;
use finmrc::synth::generate_synthetic;
use finmrc::trainer::{self, ModelKind, TrainConfig};

fn encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 0,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_len: 64,
        dropout_rate: 0.0,
        seed,
        activation: Activation::Gelu,
        use_segment: true,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("size");
    let count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let preset = if mode == "query" { "ambiguity" } else { "finance_basic" };
    let (synth, registry, queries) = presets::by_name(preset, count).unwrap();
    let sentences = generate_synthetic(&synth, 7).unwrap();
    let split = resample_split(&sentences, SplitSizes::Proportions(0.6, 0.2, 0.2), 7, 0, false).unwrap();

    let cfg = |model, strategy| TrainConfig {
        max_seq_len: 64,
        batch_size: 16,
        epochs,
        model,
        strategy,
        negative_keep: 0.3,
        early_stop_f1: Some(1.0),
        ..TrainConfig::default()
    };
    let seeds: Vec<u64> = vec![1, 2, 3];

    match mode {
        "query" => {
            for (label, model, strategy) in [
                ("definition", ModelKind::Mrc, Strategy::Definition),
                ("keyword", ModelKind::Mrc, Strategy::Keyword),
                ("tagger", ModelKind::Tagger, Strategy::Keyword),
            ] {
                let f1s: Vec<f64> = seeds
                    .iter()
                    .map(|&s| {
                        trainer::replicate(&cfg(model, strategy), &encoder(s), &split, &registry, &queries, &[s])
                            .unwrap()[0]
                            .2
                            .f1
                    })
                    .collect();
                let (m, _) = mean_std(&f1s);
                println!("{label}: mean {m:.4} {f1s:?}");
            }
        }
        _ => {
            for fraction in [0.25, 0.5, 1.0] {
                let sub = trainer::subsample_split(&split, fraction, 0).unwrap();
                for model in [ModelKind::Mrc, ModelKind::Tagger] {
                    let f1s: Vec<f64> = seeds
                        .iter()
                        .map(|&s| {
                            trainer::replicate(
                                &cfg(model, Strategy::Keyword),
                                &encoder(s),
                                &sub,
                                &registry,
                                &queries,
                                &[s],
                            )
                            .unwrap()[0]
                                .2
                                .f1
                        })
                        .collect();
                    let (m, _) = mean_std(&f1s);
                    println!("{fraction} {model}: mean {m:.4} {f1s:?}");
                }
            }
        }
    }
}
