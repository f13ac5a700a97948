//! Command-line surface: one binary with subcommands for conversion,
//! synthesis, training, evaluation, decoding, and ablations.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric divergence.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    self, corpus_stats, CorpusError, DatasetSplit, EntityTypeRegistry, SplitSizes, TaggedSentence,
    Tokenization,
};
use crate::encoder::EncoderConfig;
use crate::eval::{self, aggregate, EvalError, Metrics};
use crate::presets;
use crate::query::{QueryConfig, Strategy};
use crate::span::DecodedSentence;
use crate::synth::{self, SynthError, SynthSpec};
use crate::trainer::{self, ModelBundle, ModelKind, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Environment variable overriding the configured output directory.
pub const OUT_DIR_ENV: &str = "FINMRC_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Train(TrainError::Diverged { .. }) => EXIT_DIVERGED,
            CliError::Train(TrainError::Config(_)) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Bioe,
    Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateKind {
    Query,
    Size,
}

#[derive(Debug, Parser)]
#[command(
    name = "finmrc",
    version,
    about = "Financial NER via machine reading comprehension, with tagging baselines"
)]
pub struct Cli {
    /// Experiment config file (train, ablate).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replication seeds, comma separated; overrides the config.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Maximum parallel replication jobs (runs are serialized on one core).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Query strategy override for MRC training.
    #[arg(long, global = true, value_enum)]
    pub query_strategy: Option<Strategy>,
    /// Model kind override.
    #[arg(long, global = true, value_enum)]
    pub model: Option<ModelKind>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a tagged corpus to the canonical span JSONL format.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: DataFormat,
        #[arg(long)]
        output: PathBuf,
        /// JSON file mapping raw labels to canonical ones.
        #[arg(long)]
        merge_map: Option<PathBuf>,
    },
    /// Generate a synthetic corpus from a preset or a spec file.
    Synth {
        /// Built-in preset: finance_basic or ambiguity.
        #[arg(long)]
        preset: Option<String>,
        /// Synthesis spec JSON file (alternative to --preset).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        /// Also write the preset's registry JSON here.
        #[arg(long)]
        registry_out: Option<PathBuf>,
        /// Also write the preset's query config JSON here.
        #[arg(long)]
        queries_out: Option<PathBuf>,
    },
    /// Train one model per seed and write checkpoints, histories, and a summary.
    Train,
    /// Score a checkpoint against a labeled dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = DataFormat::Span)]
        format: DataFormat,
        /// Optional per-type CSV output path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Decode entities from raw text, one sentence per line, as JSONL.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the query-strategy or training-size ablation from a config.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblateKind,
    },
}

// ---------------------------------------------------------------------------
// Experiment config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// "span" (JSONL) or "bioe" (token<TAB>tag blocks).
    #[serde(default = "default_format")]
    pub format: String,
    /// Train/validation/test sizes; defaults to 60/20/20 proportions.
    #[serde(default)]
    pub split: Option<SplitSizes>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub drop_empty: bool,
}

fn default_format() -> String {
    "span".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AblationConfig {
    /// Strategies for the query ablation; defaults to all three.
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    /// Include the tagger baseline row in the query ablation.
    #[serde(default = "default_true")]
    pub include_tagger: bool,
    /// Training fractions for the size ablation.
    #[serde(default)]
    pub fractions: Vec<f64>,
    /// Model kinds for the size ablation; defaults to mrc and tagger.
    #[serde(default)]
    pub kinds: Vec<ModelKind>,
}

fn default_true() -> bool {
    true
}

/// Everything a `train` or `ablate` run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Entity type registry; derived from the corpus when absent.
    #[serde(default)]
    pub registry: Option<EntityTypeRegistry>,
    /// Per-type query specs; required for MRC training.
    #[serde(default)]
    pub queries: Option<QueryConfig>,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = read_file(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if cfg.seeds.is_empty() {
            return Err(CliError::Usage("config: seeds must be non-empty".into()));
        }
        if !cfg.dataset.path.exists() {
            return Err(CliError::Usage(format!(
                "config: dataset path {} does not exist",
                cfg.dataset.path.display()
            )));
        }
        Ok(cfg)
    }

    /// Output directory after the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_corpus(text: &str, format: &str) -> Result<Vec<TaggedSentence>, CliError> {
    match format {
        "bioe" => Ok(corpus::parse_bioe(text)?),
        "span" => Ok(corpus::parse_span_jsonl(text)?),
        other => Err(CliError::Usage(format!(
            "unknown dataset format {other:?} (expected \"bioe\" or \"span\")"
        ))),
    }
}

fn format_name(f: DataFormat) -> &'static str {
    match f {
        DataFormat::Bioe => "bioe",
        DataFormat::Span => "span",
    }
}

fn load_split(ds: &DatasetConfig) -> Result<(Vec<TaggedSentence>, DatasetSplit), CliError> {
    let text = read_file(&ds.path)?;
    let sentences = parse_corpus(&text, &ds.format)?;
    let sizes = ds
        .split
        .unwrap_or(SplitSizes::Proportions(0.6, 0.2, 0.2));
    let split = corpus::resample_split(&sentences, sizes, ds.split_seed, 0, ds.drop_empty)?;
    Ok((sentences, split))
}

fn metrics_line(m: &Metrics) -> String {
    format!(
        "P={:.4} R={:.4} F1={:.4} (tp={} pred={} gold={})",
        m.precision, m.recall, m.f1, m.counts.tp, m.counts.predicted, m.counts.gold
    )
}

fn per_type_csv(m: &Metrics) -> String {
    let mut out = String::from("type,tp,predicted,gold,precision,recall,f1\n");
    for (ty, c) in &m.per_type {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            ty,
            c.tp,
            c.predicted,
            c.gold,
            c.precision(),
            c.recall(),
            c.f1()
        ));
    }
    out.push_str(&format!(
        "ALL,{},{},{},{:.6},{:.6},{:.6}\n",
        m.counts.tp, m.counts.predicted, m.counts.gold, m.precision, m.recall, m.f1
    ));
    out
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Dispatches a parsed command line; errors map to exit codes via
/// [`CliError::exit_code`].
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Convert {
            input,
            format,
            output,
            merge_map,
        } => cmd_convert(input, *format, output, merge_map.as_deref()),
        Command::Synth {
            preset,
            spec,
            count,
            seed,
            output,
            registry_out,
            queries_out,
        } => cmd_synth(
            preset.as_deref(),
            spec.as_deref(),
            *count,
            *seed,
            output,
            registry_out.as_deref(),
            queries_out.as_deref(),
        ),
        Command::Train => cmd_train(cli),
        Command::Evaluate {
            checkpoint,
            dataset,
            format,
            output,
        } => cmd_evaluate(checkpoint, dataset, *format, output.as_deref()),
        Command::Decode {
            checkpoint,
            input,
            output,
        } => cmd_decode(checkpoint, input, output),
        Command::Ablate { kind } => cmd_ablate(cli, *kind),
    }
}

pub fn cmd_convert(
    input: &Path,
    format: DataFormat,
    output: &Path,
    merge_map: Option<&Path>,
) -> Result<(), CliError> {
    let text = read_file(input)?;
    let mut sentences = parse_corpus(&text, format_name(format))?;
    if let Some(map_path) = merge_map {
        let map_text = read_file(map_path)?;
        let map: std::collections::BTreeMap<String, String> = serde_json::from_str(&map_text)
            .map_err(|source| CliError::Json {
                path: map_path.to_path_buf(),
                source,
            })?;
        sentences = corpus::merge_entity_types(&sentences, &map)?;
    }
    for s in &sentences {
        s.validate()?;
    }
    write_file(output, &corpus::serialize_span_jsonl(&sentences))?;
    let entities: usize = sentences.iter().map(|s| s.entities.len()).sum();
    println!("{} sentences, {} entities", sentences.len(), entities);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_synth(
    preset: Option<&str>,
    spec_path: Option<&Path>,
    count: usize,
    seed: u64,
    output: &Path,
    registry_out: Option<&Path>,
    queries_out: Option<&Path>,
) -> Result<(), CliError> {
    let (spec, registry, queries): (SynthSpec, Option<EntityTypeRegistry>, Option<QueryConfig>) =
        match (preset, spec_path) {
            (Some(name), None) => {
                let (s, r, q) = presets::by_name(name, count).ok_or_else(|| {
                    CliError::Usage(format!(
                        "unknown preset {name:?} (expected finance_basic or ambiguity)"
                    ))
                })?;
                (s, Some(r), Some(q))
            }
            (None, Some(path)) => {
                let text = read_file(path)?;
                let mut s: SynthSpec =
                    serde_json::from_str(&text).map_err(|source| CliError::Json {
                        path: path.to_path_buf(),
                        source,
                    })?;
                s.sentence_count = count;
                (s, None, None)
            }
            _ => {
                return Err(CliError::Usage(
                    "synth: exactly one of --preset or --spec is required".into(),
                ))
            }
        };
    let sentences = synth::generate_synthetic(&spec, seed)?;
    write_file(output, &corpus::serialize_span_jsonl(&sentences))?;
    if let Some(path) = registry_out {
        let r = registry
            .unwrap_or_else(|| EntityTypeRegistry::from_corpus(&sentences));
        write_file(path, &serde_json::to_string_pretty(&r).unwrap())?;
    }
    if let Some(path) = queries_out {
        let q = queries.ok_or_else(|| {
            CliError::Usage("synth: --queries-out requires a preset".into())
        })?;
        write_file(path, &serde_json::to_string_pretty(&q).unwrap())?;
    }
    print!("{}", corpus_stats(&sentences).render());
    Ok(())
}

pub fn cmd_train(cli: &Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("train: --config is required".into()))?;
    let cfg = ExperimentConfig::load(config_path)?;
    let (_, split) = load_split(&cfg.dataset)?;
    let registry = cfg
        .registry
        .clone()
        .unwrap_or_else(|| EntityTypeRegistry::from_corpus(&split.train));
    let queries = cfg.queries.clone().unwrap_or_default();

    let mut train_cfg = cfg.train.clone();
    if let Some(model) = cli.model {
        train_cfg.model = model;
    }
    if let Some(strategy) = cli.query_strategy {
        train_cfg.strategy = strategy;
    }
    if train_cfg.model == ModelKind::Mrc && queries.is_empty() {
        return Err(CliError::Usage(
            "train: model mrc requires a query config".into(),
        ));
    }
    let seeds = cli.seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
    let out_dir = cfg.resolved_output_dir();

    let mut all_metrics = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let mut c = train_cfg.clone();
        c.seed = seed;
        let (bundle, history) = trainer::train(&c, &cfg.encoder, &split, &registry, &queries)?;
        let metrics = bundle.evaluate(&split.test)?;
        let tag = trainer::seed_suffix(seed);
        write_file(
            &out_dir.join(format!("model_{tag}.ckpt")),
            &bundle.serialize()?,
        )?;
        write_file(&out_dir.join(format!("history_{tag}.csv")), &history.to_csv())?;
        write_file(
            &out_dir.join(format!("metrics_{tag}.csv")),
            &history.metrics_csv(),
        )?;
        write_file(
            &out_dir.join(format!("test_{tag}.csv")),
            &per_type_csv(&metrics),
        )?;
        println!("seed {seed}: {}", metrics_line(&metrics));
        all_metrics.push(metrics);
    }
    let summary = aggregate(&all_metrics)?;
    write_file(&out_dir.join("summary.csv"), &summary.to_csv())?;
    write_file(&out_dir.join("summary.txt"), &summary.render())?;
    print!("{}", summary.render());
    Ok(())
}

pub fn cmd_evaluate(
    checkpoint: &Path,
    dataset: &Path,
    format: DataFormat,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let bundle = ModelBundle::load(checkpoint)?;
    let text = read_file(dataset)?;
    let sentences = parse_corpus(&text, format_name(format))?;
    let metrics = bundle.evaluate(&sentences)?;
    if let Some(path) = output {
        write_file(path, &per_type_csv(&metrics))?;
    }
    println!("{}", metrics_line(&metrics));
    Ok(())
}

pub fn cmd_decode(checkpoint: &Path, input: &Path, output: &Path) -> Result<(), CliError> {
    let bundle = ModelBundle::load(checkpoint)?;
    let text = read_file(input)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let sentence = TaggedSentence {
            tokens: corpus::tokenize(line, Tokenization::Character),
            entities: vec![],
            doc_id: format!("line{i}"),
        };
        let record = DecodedSentence {
            doc_id: sentence.doc_id.clone(),
            entities: bundle.decode_scored(&sentence)?,
        };
        out.push_str(&serde_json::to_string(&record).unwrap());
        out.push('\n');
    }
    write_file(output, &out)?;
    println!("decoded {} lines", text.lines().filter(|l| !l.is_empty()).count());
    Ok(())
}

pub fn cmd_ablate(cli: &Cli, kind: AblateKind) -> Result<(), CliError> {
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("ablate: --config is required".into()))?;
    let cfg = ExperimentConfig::load(config_path)?;
    let (_, split) = load_split(&cfg.dataset)?;
    let registry = cfg
        .registry
        .clone()
        .unwrap_or_else(|| EntityTypeRegistry::from_corpus(&split.train));
    let queries = cfg.queries.clone().unwrap_or_default();
    if queries.is_empty() {
        return Err(CliError::Usage(
            "ablate: a query config is required".into(),
        ));
    }
    let seeds = cli.seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
    let out_dir = cfg.resolved_output_dir();
    match kind {
        AblateKind::Query => {
            let strategies = if cfg.ablation.strategies.is_empty() {
                vec![Strategy::Keyword, Strategy::Template, Strategy::Definition]
            } else {
                cfg.ablation.strategies.clone()
            };
            let rows = eval::query_ablation(
                &strategies,
                cfg.ablation.include_tagger,
                &cfg.train,
                &cfg.encoder,
                &split,
                &registry,
                &queries,
                &seeds,
            )?;
            let csv = eval::ablation_csv(&rows);
            write_file(&out_dir.join("query_ablation.csv"), &csv)?;
            print!("{csv}");
        }
        AblateKind::Size => {
            let fractions = if cfg.ablation.fractions.is_empty() {
                vec![0.25, 0.5, 1.0]
            } else {
                cfg.ablation.fractions.clone()
            };
            let kinds = if cfg.ablation.kinds.is_empty() {
                vec![ModelKind::Mrc, ModelKind::Tagger]
            } else {
                cfg.ablation.kinds.clone()
            };
            let rows = eval::size_ablation(
                &fractions,
                &kinds,
                &cfg.train,
                &cfg.encoder,
                &split,
                &registry,
                &queries,
                &seeds,
            )?;
            let csv = eval::size_csv(&rows);
            write_file(&out_dir.join("size_ablation.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}
