//! Entity-level scoring, replication aggregation, and ablation harnesses.
//!
//! A predicted span counts as a true positive only when (start, end, type)
//! all match a gold span exactly. Precision over zero predictions is 0 by
//! convention, keeping F1 total.

use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DatasetSplit, EntitySpan, EntityTypeRegistry};
use crate::encoder::EncoderConfig;
use crate::query::{QueryConfig, Strategy};
use crate::trainer::{self, ModelKind, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sentence {index}: prediction doc_id {pred:?} does not match gold doc_id {gold:?}")]
    Unaligned {
        index: usize,
        pred: String,
        gold: String,
    },
    #[error("prediction/gold lists differ in length: {pred} vs {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("aggregate over an empty replication list")]
    EmptyReplications,
}

/// Raw true-positive / predicted / gold counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrfCounts {
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl PrfCounts {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.tp as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            self.tp as f64 / self.gold as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

/// Micro-averaged metrics plus a per-type breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: PrfCounts,
    pub per_type: BTreeMap<String, PrfCounts>,
}

/// Entity-level micro F1 over sentences aligned by doc_id.
pub fn entity_f1(
    predicted: &[(String, Vec<EntitySpan>)],
    gold: &[(String, Vec<EntitySpan>)],
) -> Result<Metrics, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            pred: predicted.len(),
            gold: gold.len(),
        });
    }
    let mut total = PrfCounts::default();
    let mut per_type: BTreeMap<String, PrfCounts> = BTreeMap::new();
    for (index, ((pid, pspans), (gid, gspans))) in predicted.iter().zip(gold).enumerate() {
        if pid != gid {
            return Err(EvalError::Unaligned {
                index,
                pred: pid.clone(),
                gold: gid.clone(),
            });
        }
        // multiset intersection on exact (start, end, type) triples
        let mut bag: HashMap<(usize, usize, &str), usize> = HashMap::new();
        for g in gspans {
            *bag.entry((g.start, g.end, g.entity_type.as_str())).or_default() += 1;
        }
        for g in gspans {
            total.gold += 1;
            per_type.entry(g.entity_type.clone()).or_default().gold += 1;
        }
        for p in pspans {
            total.predicted += 1;
            let t = per_type.entry(p.entity_type.clone()).or_default();
            t.predicted += 1;
            if let Some(c) = bag.get_mut(&(p.start, p.end, p.entity_type.as_str())) {
                if *c > 0 {
                    *c -= 1;
                    total.tp += 1;
                    t.tp += 1;
                }
            }
        }
    }
    Ok(Metrics {
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        counts: total,
        per_type,
    })
}

/// Mean and sample (n-1) standard deviation; std is absent for n < 2.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}

/// Per-measure mean and std over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub replications: usize,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub std_precision: Option<f64>,
    pub std_recall: Option<f64>,
    pub std_f1: Option<f64>,
}

pub fn aggregate(metrics: &[Metrics]) -> Result<ReplicationSummary, EvalError> {
    if metrics.is_empty() {
        return Err(EvalError::EmptyReplications);
    }
    let col = |f: fn(&Metrics) -> f64| -> Vec<f64> { metrics.iter().map(f).collect() };
    let (mp, sp) = mean_std(&col(|m| m.precision));
    let (mr, sr) = mean_std(&col(|m| m.recall));
    let (mf, sf) = mean_std(&col(|m| m.f1));
    Ok(ReplicationSummary {
        replications: metrics.len(),
        mean_precision: mp,
        mean_recall: mr,
        mean_f1: mf,
        std_precision: sp,
        std_recall: sr,
        std_f1: sf,
    })
}

/// "mean±std" in percent to two decimals; bare mean when std is absent.
pub fn format_mean_std(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{:.2}±{:.2}", mean * 100.0, s * 100.0),
        None => format!("{:.2}", mean * 100.0),
    }
}

impl ReplicationSummary {
    pub fn render(&self) -> String {
        format!(
            "n={} P={} R={} F1={}\n",
            self.replications,
            format_mean_std(self.mean_precision, self.std_precision),
            format_mean_std(self.mean_recall, self.std_recall),
            format_mean_std(self.mean_f1, self.std_f1),
        )
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "measure,mean,std\nprecision,{:.6},{}\nrecall,{:.6},{}\nf1,{:.6},{}\n",
            self.mean_precision,
            opt(self.std_precision),
            self.mean_recall,
            opt(self.std_recall),
            self.mean_f1,
            opt(self.std_f1),
        )
    }
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

/// One row of the query-strategy comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub f1s: Vec<f64>,
    pub mean_f1: f64,
    pub std_f1: Option<f64>,
}

fn row_from_f1s(label: String, f1s: Vec<f64>) -> AblationRow {
    let (mean_f1, std_f1) = mean_std(&f1s);
    AblationRow {
        label,
        f1s,
        mean_f1,
        std_f1,
    }
}

/// Trains one MRC model per (strategy, seed) plus a tagger baseline row and
/// reports test F1 per strategy.
#[allow(clippy::too_many_arguments)]
pub fn query_ablation(
    strategies: &[Strategy],
    include_tagger: bool,
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    split: &DatasetSplit,
    registry: &EntityTypeRegistry,
    queries: &QueryConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    for &strategy in strategies {
        let mut c = cfg.clone();
        c.model = ModelKind::Mrc;
        c.strategy = strategy;
        let runs = trainer::replicate(&c, enc, split, registry, queries, seeds)?;
        rows.push(row_from_f1s(
            strategy.to_string(),
            runs.iter().map(|(_, _, m, _)| m.f1).collect(),
        ));
    }
    if include_tagger {
        let mut c = cfg.clone();
        c.model = ModelKind::Tagger;
        let runs = trainer::replicate(&c, enc, split, registry, queries, seeds)?;
        rows.push(row_from_f1s(
            "tagger".to_string(),
            runs.iter().map(|(_, _, m, _)| m.f1).collect(),
        ));
    }
    Ok(rows)
}

/// One point of the training-size curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub fraction: f64,
    pub kind: ModelKind,
    pub f1s: Vec<f64>,
    pub mean_f1: f64,
    pub std_f1: Option<f64>,
}

/// Trains each model kind at each training fraction (validation/test fixed)
/// and reports mean test F1 per point.
#[allow(clippy::too_many_arguments)]
pub fn size_ablation(
    fractions: &[f64],
    kinds: &[ModelKind],
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    split: &DatasetSplit,
    registry: &EntityTypeRegistry,
    queries: &QueryConfig,
    seeds: &[u64],
) -> Result<Vec<SizeRow>, TrainError> {
    let mut rows = Vec::new();
    for &fraction in fractions {
        let sub = trainer::subsample_split(split, fraction, cfg.seed)?;
        for &kind in kinds {
            let mut c = cfg.clone();
            c.model = kind;
            let runs = trainer::replicate(&c, enc, &sub, registry, queries, seeds)?;
            let f1s: Vec<f64> = runs.iter().map(|(_, _, m, _)| m.f1).collect();
            let (mean_f1, std_f1) = mean_std(&f1s);
            rows.push(SizeRow {
                fraction,
                kind,
                f1s,
                mean_f1,
                std_f1,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy,mean_f1,std_f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{}\n",
            r.label,
            r.mean_f1,
            r.std_f1.map(|s| format!("{s:.6}")).unwrap_or_default()
        ));
    }
    out
}

pub fn size_csv(rows: &[SizeRow]) -> String {
    let mut out = String::from("fraction,model,mean_f1,std_f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            r.fraction,
            r.kind,
            r.mean_f1,
            r.std_f1.map(|s| format!("{s:.6}")).unwrap_or_default()
        ));
    }
    out
}
