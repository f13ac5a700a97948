//! Sequence-labeling baselines: per-token softmax tagging and a linear-chain
//! CRF head over the shared encoder.
//!
//! The CRF negative log-likelihood is one custom autodiff op: the forward
//! algorithm computes logZ in log space and the backward pass uses
//! forward-backward marginals, so gradients are exact and cheap.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::checkpoint::{BoundParams, ParamStore};
use crate::corpus::{EntitySpan, EntityTypeRegistry};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("gold tag id {id} out of range for {n_tags} tags")]
    BadTag { id: usize, n_tags: usize },
    #[error("empty tag sequence")]
    EmptySequence,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// BIOE tag inventory derived from a type registry: O first, then B/I/E per
/// type in registry order. Ids are dense from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    tags: Vec<String>,
}

impl TagSet {
    pub fn from_registry(registry: &EntityTypeRegistry) -> TagSet {
        let mut tags = vec!["O".to_string()];
        for ty in &registry.types {
            for prefix in ["B", "I", "E"] {
                tags.push(format!("{prefix}-{ty}"));
            }
        }
        TagSet { tags }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }

    pub fn encode(&self, tags: &[String]) -> Option<Vec<usize>> {
        tags.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tags[i].clone()).collect()
    }
}

/// Adds the tagger projection ("tag.w"/"tag.b") to the store.
pub fn init_tagger_params(d_model: usize, n_tags: usize, seed: u64, store: &mut ParamStore) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7a66_e4);
    let normal = Normal::new(0.0, 0.02).unwrap();
    let w: Vec<f64> = (0..d_model * n_tags).map(|_| normal.sample(&mut rng)).collect();
    store.add("tag.w", vec![d_model, n_tags], w);
    store.add("tag.b", vec![n_tags], vec![0.0; n_tags]);
}

/// Adds the CRF parameters ("crf.trans"/"crf.start"/"crf.end"), zero-initialized.
pub fn init_crf_params(n_tags: usize, store: &mut ParamStore) {
    store.add("crf.trans", vec![n_tags, n_tags], vec![0.0; n_tags * n_tags]);
    store.add("crf.start", vec![n_tags], vec![0.0; n_tags]);
    store.add("crf.end", vec![n_tags], vec![0.0; n_tags]);
}

/// Per-token tag logits: affine projection of context rows.
pub fn tag_logits(e_context: &Tensor, params: &BoundParams) -> Result<Tensor, TensorError> {
    e_context.matmul(params.get("tag.w"))?.add_row(params.get("tag.b"))
}

/// Per-row argmax with ties broken by the lower tag id (softmax tagger decode).
pub fn argmax_tags(logits: &Tensor) -> Vec<usize> {
    let (n, t) = (logits.rows(), logits.cols());
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * t..(i + 1) * t];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Negative log-likelihood of the gold path under the linear-chain CRF.
///
/// `NLL = logZ - score(gold)` where the path score sums unary logits,
/// transitions, and start/end scores; logZ comes from the forward algorithm.
/// Gradients flow to the logits and all three CRF parameters.
pub fn crf_nll(
    logits: &Tensor,
    trans: &Tensor,
    start: &Tensor,
    end: &Tensor,
    gold: &[usize],
) -> Result<Tensor, CrfError> {
    let (n, t) = (logits.rows(), logits.cols());
    if n == 0 {
        return Err(CrfError::EmptySequence);
    }
    if trans.shape() != [t, t] || start.data().len() != t || end.data().len() != t {
        return Err(CrfError::Tensor(TensorError::Shape(format!(
            "crf_nll: logits {:?}, trans {:?}, start {:?}, end {:?}",
            logits.shape(),
            trans.shape(),
            start.shape(),
            end.shape()
        ))));
    }
    if gold.len() != n {
        return Err(CrfError::Tensor(TensorError::Shape(format!(
            "crf_nll: {n} positions but {} gold tags",
            gold.len()
        ))));
    }
    if let Some(&bad) = gold.iter().find(|&&g| g >= t) {
        return Err(CrfError::BadTag {
            id: bad,
            n_tags: t,
        });
    }
    let u = logits.data();
    let tr = trans.data();
    let st = start.data();
    let en = end.data();

    // forward (alpha) and backward (beta) tables in log space
    let mut alpha = vec![0.0; n * t];
    for y in 0..t {
        alpha[y] = st[y] + u[y];
    }
    let mut scratch = vec![0.0; t];
    for i in 1..n {
        for y in 0..t {
            for (p, s) in scratch.iter_mut().enumerate() {
                *s = alpha[(i - 1) * t + p] + tr[p * t + y];
            }
            alpha[i * t + y] = log_sum_exp(&scratch) + u[i * t + y];
        }
    }
    for (y, s) in scratch.iter_mut().enumerate() {
        *s = alpha[(n - 1) * t + y] + en[y];
    }
    let log_z = log_sum_exp(&scratch);

    let mut beta = vec![0.0; n * t];
    for y in 0..t {
        beta[(n - 1) * t + y] = en[y];
    }
    for i in (0..n - 1).rev() {
        for y in 0..t {
            for (q, s) in scratch.iter_mut().enumerate() {
                *s = tr[y * t + q] + u[(i + 1) * t + q] + beta[(i + 1) * t + q];
            }
            beta[i * t + y] = log_sum_exp(&scratch);
        }
    }

    // gold path score
    let mut score = st[gold[0]] + en[gold[n - 1]];
    for (i, &g) in gold.iter().enumerate() {
        score += u[i * t + g];
    }
    for w in gold.windows(2) {
        score += tr[w[0] * t + w[1]];
    }
    let nll = log_z - score;

    // d logZ / d params via marginals, minus gold indicators
    let mut unary_grad = vec![0.0; n * t];
    for i in 0..n {
        for y in 0..t {
            unary_grad[i * t + y] = (alpha[i * t + y] + beta[i * t + y] - log_z).exp();
        }
        unary_grad[i * t + gold[i]] -= 1.0;
    }
    let mut trans_grad = vec![0.0; t * t];
    for i in 1..n {
        for a in 0..t {
            for b in 0..t {
                trans_grad[a * t + b] +=
                    (alpha[(i - 1) * t + a] + tr[a * t + b] + u[i * t + b] + beta[i * t + b]
                        - log_z)
                        .exp();
            }
        }
    }
    for w in gold.windows(2) {
        trans_grad[w[0] * t + w[1]] -= 1.0;
    }
    let mut start_grad = vec![0.0; t];
    let mut end_grad = vec![0.0; t];
    for y in 0..t {
        start_grad[y] = (alpha[y] + beta[y] - log_z).exp();
        end_grad[y] = (alpha[(n - 1) * t + y] + beta[(n - 1) * t + y] - log_z).exp();
    }
    start_grad[gold[0]] -= 1.0;
    end_grad[gold[n - 1]] -= 1.0;

    Ok(Tensor::from_op(
        vec![1],
        vec![nll],
        vec![logits.clone(), trans.clone(), start.clone(), end.clone()],
        Box::new(move |g, _, parents| {
            let gg = g[0];
            let scaled = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * gg).collect() };
            parents[0].acc_grad(&scaled(&unary_grad));
            parents[1].acc_grad(&scaled(&trans_grad));
            parents[2].acc_grad(&scaled(&start_grad));
            parents[3].acc_grad(&scaled(&end_grad));
        }),
    ))
}

/// Highest-scoring tag path under the CRF score. Ties break toward the lower
/// tag id at every step.
pub fn viterbi(logits: &Tensor, trans: &Tensor, start: &Tensor, end: &Tensor) -> Vec<usize> {
    let (n, t) = (logits.rows(), logits.cols());
    if n == 0 {
        return Vec::new();
    }
    let u = logits.data();
    let tr = trans.data();
    let mut delta = vec![0.0; n * t];
    let mut back = vec![0usize; n * t];
    for y in 0..t {
        delta[y] = start.data()[y] + u[y];
    }
    for i in 1..n {
        for y in 0..t {
            let mut best_p = 0;
            let mut best_v = delta[(i - 1) * t] + tr[y];
            for p in 1..t {
                let v = delta[(i - 1) * t + p] + tr[p * t + y];
                if v > best_v {
                    best_v = v;
                    best_p = p;
                }
            }
            delta[i * t + y] = best_v + u[i * t + y];
            back[i * t + y] = best_p;
        }
    }
    let mut last = 0;
    let mut best_v = delta[(n - 1) * t] + end.data()[0];
    for y in 1..t {
        let v = delta[(n - 1) * t + y] + end.data()[y];
        if v > best_v {
            best_v = v;
            last = y;
        }
    }
    let mut path = vec![0usize; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = back[i * t + path[i]];
    }
    path
}

/// Lenient BIOE decode for predicted tag sequences: maximal well-formed runs
/// (`B` alone, `B E`, `B I* E`) become entities; malformed fragments yield
/// nothing.
pub fn tags_to_entities(tags: &[String]) -> Vec<EntitySpan> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let Some(ty) = tags[i].strip_prefix("B-") else {
            i += 1;
            continue;
        };
        let inside = format!("I-{ty}");
        let close = format!("E-{ty}");
        let mut j = i + 1;
        while j < tags.len() && tags[j] == inside {
            j += 1;
        }
        if j < tags.len() && tags[j] == close {
            out.push(EntitySpan::new(i, j, ty));
            i = j + 1;
        } else if j == i + 1 {
            // lone B: single-token entity
            out.push(EntitySpan::new(i, i, ty));
            i = j;
        } else {
            // B I+ without a matching E: dropped
            i = j;
        }
    }
    out
}
