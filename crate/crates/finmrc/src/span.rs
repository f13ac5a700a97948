//! Start/end span heads, the dual cross-entropy objective, and
//! nearest-matching span assembly.
//!
//! The heads act on context rows only; query and special-token rows are
//! sliced away before the projection, so every position here is
//! context-relative.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{BoundParams, ParamStore};
use crate::corpus::EntityTypeRegistry;
use crate::encoder::{self, EncoderConfig, EncoderError, Vocabulary};
use crate::query::{self, QueryConfig, QueryError, Strategy};
use crate::corpus::TaggedSentence;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SpanError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Query(#[from] QueryError),
}

/// Adds the two span-head projections to the store.
pub fn init_head_params(d_model: usize, seed: u64, store: &mut ParamStore) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_4ead);
    let normal = Normal::new(0.0, 0.02).unwrap();
    for side in ["start", "end"] {
        let w: Vec<f64> = (0..d_model * 2).map(|_| normal.sample(&mut rng)).collect();
        store.add(format!("head.{side}.w"), vec![d_model, 2], w);
        store.add(format!("head.{side}.b"), vec![2], vec![0.0, 0.0]);
    }
}

/// Row-stochastic start/end probabilities as graph tensors, for training.
pub fn predict_prob_tensors(
    e_context: &Tensor,
    params: &BoundParams,
) -> Result<(Tensor, Tensor), TensorError> {
    let p_start = e_context
        .matmul(params.get("head.start.w"))?
        .add_row(params.get("head.start.b"))?
        .softmax_rows();
    let p_end = e_context
        .matmul(params.get("head.end.w"))?
        .add_row(params.get("head.end.b"))?
        .softmax_rows();
    Ok((p_start, p_end))
}

/// Start/end probabilities per context position.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanProbabilities {
    pub p_start: Vec<[f64; 2]>,
    pub p_end: Vec<[f64; 2]>,
}

impl SpanProbabilities {
    pub fn from_tensors(p_start: &Tensor, p_end: &Tensor) -> SpanProbabilities {
        let rows = |t: &Tensor| -> Vec<[f64; 2]> {
            t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
        };
        SpanProbabilities {
            p_start: rows(p_start),
            p_end: rows(p_end),
        }
    }

    pub fn len(&self) -> usize {
        self.p_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_start.is_empty()
    }
}

/// Scalar view of a computed span loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_start: f64,
    pub l_end: f64,
    pub l_train: f64,
}

/// Span loss with live graph tensors for backward.
pub struct SpanLoss {
    pub l_start: Tensor,
    pub l_end: Tensor,
    pub l_train: Tensor,
}

impl SpanLoss {
    pub fn report(&self) -> LossReport {
        LossReport {
            l_start: self.l_start.value(),
            l_end: self.l_end.value(),
            l_train: self.l_train.value(),
        }
    }
}

/// Binary cross-entropy on both heads; the total objective is their sum.
pub fn span_loss(
    p_start: &Tensor,
    p_end: &Tensor,
    y_start: &[u8],
    y_end: &[u8],
    mask: &[u8],
) -> Result<SpanLoss, TensorError> {
    let l_start = p_start.cross_entropy_binary(y_start, mask)?;
    let l_end = p_end.cross_entropy_binary(y_end, mask)?;
    let l_train = l_start.add(&l_end)?;
    Ok(SpanLoss {
        l_start,
        l_end,
        l_train,
    })
}

/// Positions classified as start/end indexes, ascending and context-relative.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSets {
    pub starts: Vec<usize>,
    pub ends: Vec<usize>,
}

/// Argmax per row; a position is selected when the positive-class probability
/// strictly exceeds the negative one, so an exact tie is a non-index.
pub fn extract_index_sets(probs: &SpanProbabilities) -> IndexSets {
    let pick = |rows: &[[f64; 2]]| -> Vec<usize> {
        rows.iter()
            .enumerate()
            .filter(|(_, p)| p[1] > p[0])
            .map(|(i, _)| i)
            .collect()
    };
    IndexSets {
        starts: pick(&probs.p_start),
        ends: pick(&probs.p_end),
    }
}

/// Pairs start and end indexes by the nearest-matching principle.
///
/// Algorithm: scan ends left to right; for each end `e`, among unconsumed
/// starts `s <= e` choose the largest (nearest); emit `(s, e)` and consume
/// both. Unmatched indexes are dropped.
pub fn nearest_match(sets: &IndexSets) -> Vec<(usize, usize)> {
    debug_assert!(sets.starts.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(sets.ends.windows(2).all(|w| w[0] < w[1]));
    let mut used = vec![false; sets.starts.len()];
    let mut out = Vec::new();
    for &e in &sets.ends {
        let candidate = sets
            .starts
            .iter()
            .enumerate()
            .filter(|&(i, &s)| !used[i] && s <= e)
            .last();
        if let Some((i, &s)) = candidate {
            used[i] = true;
            out.push((s, e));
        }
    }
    out
}

/// One decoded entity with its boundary probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedSpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub entity_type: String,
    pub p_start: f64,
    pub p_end: f64,
}

/// One sentence of decoded output, the line unit of decode JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedSentence {
    pub doc_id: String,
    pub entities: Vec<DecodedSpan>,
}

/// Runs every type's query against a sentence and assembles spans. Positions
/// in the result are sentence-relative.
pub fn extract_entities(
    sentence: &TaggedSentence,
    registry: &EntityTypeRegistry,
    queries: &QueryConfig,
    strategy: Strategy,
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    params: &BoundParams,
) -> Result<Vec<DecodedSpan>, SpanError> {
    let mut out = Vec::new();
    for ty in &registry.types {
        let inst = query::build_instance(sentence, ty, queries, strategy, cfg.max_len)?;
        if inst.context_len == 0 {
            continue;
        }
        let ids = vocab.encode(&inst.combined_tokens);
        let segs = inst.segment_ids();
        let valid = vec![true; ids.len()];
        let e = encoder::encode(&ids, &segs, &valid, cfg, params, None)?;
        let e_ctx = e.slice_rows(inst.context_offset, inst.combined_tokens.len())?;
        let (ps, pe) = predict_prob_tensors(&e_ctx, params)?;
        let probs = SpanProbabilities::from_tensors(&ps, &pe);
        let sets = extract_index_sets(&probs);
        for (s, e) in nearest_match(&sets) {
            out.push(DecodedSpan {
                start: s,
                end: e,
                entity_type: ty.clone(),
                p_start: probs.p_start[s][1],
                p_end: probs.p_end[e][1],
            });
        }
    }
    Ok(out)
}
