//! Compact trainable transformer encoder.
//!
//! Token, learned-position, and segment embeddings feed a stack of
//! self-attention + feed-forward layers with residuals and layer
//! normalization. Padding positions are masked out of attention.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{BoundParams, ParamStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    VocabRange { id: usize, vocab_size: usize },
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("input slices disagree in length")]
    LengthMismatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Gelu
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Filled in after vocabulary construction.
    #[serde(default)]
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub use_segment: bool,
}

fn default_true() -> bool {
    true
}

impl EncoderConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(format!("dropout_rate {} outside [0,1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Desk-scale default preserving the backbone's shape.
    pub fn desk_default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_len: 256,
            dropout_rate: 0.0,
            seed: 0,
            activation: Activation::Gelu,
            use_segment: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

/// Token unit to id map with reserved special tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    units: Vec<String>,
    index: std::collections::HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(units: Vec<String>) -> Self {
        let index = units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
        Vocabulary { units, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.units
    }
}

impl Vocabulary {
    /// Builds a vocabulary from corpus units in first-seen order.
    pub fn build<'a>(units: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut list: Vec<String> = vec![
            "[PAD]".to_string(),
            "[UNK]".to_string(),
            "[CLS]".to_string(),
            "[SEP]".to_string(),
        ];
        let mut seen: std::collections::HashSet<String> =
            list.iter().cloned().collect();
        for u in units {
            if !seen.contains(u) {
                list.push(u.to_string());
                seen.insert(u.to_string());
            }
        }
        Vocabulary::from(list)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Unit id, [UNK] for unseen units.
    pub fn id(&self, unit: &str) -> usize {
        self.index.get(unit).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

const INIT_STD: f64 = 0.02;

/// Adds all encoder parameters to the store, initialized BERT-style from the
/// config seed.
pub fn init_encoder_params(cfg: &EncoderConfig, store: &mut ParamStore) {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let randn = |n: usize, rng: &mut ChaCha20Rng| -> Vec<f64> {
        (0..n).map(|_| normal.sample(rng)).collect()
    };
    let d = cfg.d_model;
    let dk = cfg.d_k();
    store.add("emb.tok", vec![cfg.vocab_size, d], randn(cfg.vocab_size * d, &mut rng));
    store.add("emb.pos", vec![cfg.max_len, d], randn(cfg.max_len * d, &mut rng));
    store.add("emb.seg", vec![2, d], randn(2 * d, &mut rng));
    store.add("emb.ln.g", vec![d], vec![1.0; d]);
    store.add("emb.ln.b", vec![d], vec![0.0; d]);
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            store.add(format!("l{l}.att.q{h}"), vec![d, dk], randn(d * dk, &mut rng));
            store.add(format!("l{l}.att.k{h}"), vec![d, dk], randn(d * dk, &mut rng));
            store.add(format!("l{l}.att.v{h}"), vec![d, dk], randn(d * dk, &mut rng));
        }
        store.add(format!("l{l}.att.wo"), vec![d, d], randn(d * d, &mut rng));
        store.add(format!("l{l}.att.bo"), vec![d], vec![0.0; d]);
        store.add(format!("l{l}.att.ln.g"), vec![d], vec![1.0; d]);
        store.add(format!("l{l}.att.ln.b"), vec![d], vec![0.0; d]);
        store.add(format!("l{l}.ff.w1"), vec![d, cfg.d_ff], randn(d * cfg.d_ff, &mut rng));
        store.add(format!("l{l}.ff.b1"), vec![cfg.d_ff], vec![0.0; cfg.d_ff]);
        store.add(format!("l{l}.ff.w2"), vec![cfg.d_ff, d], randn(cfg.d_ff * d, &mut rng));
        store.add(format!("l{l}.ff.b2"), vec![d], vec![0.0; d]);
        store.add(format!("l{l}.ff.ln.g"), vec![d], vec![1.0; d]);
        store.add(format!("l{l}.ff.ln.b"), vec![d], vec![0.0; d]);
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

const MASK_BIAS: f64 = -1e9;
const LN_EPS: f64 = 1e-8;

/// Token + learned position + segment embeddings, layer-normalized.
pub fn embed(
    ids: &[usize],
    segments: &[u8],
    cfg: &EncoderConfig,
    params: &BoundParams,
) -> Result<Tensor, EncoderError> {
    if ids.len() != segments.len() {
        return Err(EncoderError::LengthMismatch);
    }
    if ids.len() > cfg.max_len {
        return Err(EncoderError::TooLong {
            len: ids.len(),
            max_len: cfg.max_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(EncoderError::VocabRange {
            id: bad,
            vocab_size: cfg.vocab_size,
        });
    }
    let tok = params.get("emb.tok").gather_rows(ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = params.get("emb.pos").gather_rows(&positions)?;
    let mut x = tok.add(&pos)?;
    if cfg.use_segment {
        let seg_ids: Vec<usize> = segments.iter().map(|&s| s as usize).collect();
        let seg = params.get("emb.seg").gather_rows(&seg_ids)?;
        x = x.add(&seg)?;
    }
    Ok(x.layer_norm(params.get("emb.ln.g"), params.get("emb.ln.b"), LN_EPS)?)
}

/// Scaled dot-product attention over projected queries/keys/values. Invalid
/// key positions receive a large negative logit before the softmax.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_valid: &[bool],
) -> Result<Tensor, EncoderError> {
    let d_k = q.cols();
    if k.cols() != d_k || k.rows() != v.rows() || key_valid.len() != k.rows() {
        return Err(EncoderError::Tensor(TensorError::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?}, mask {}",
            q.shape(),
            k.shape(),
            v.shape(),
            key_valid.len()
        ))));
    }
    if !key_valid.iter().any(|&m| m) {
        return Err(EncoderError::Tensor(TensorError::DegenerateAttention));
    }
    let scores = q.matmul_nt(k)?.scale(1.0 / (d_k as f64).sqrt());
    let (n, m) = (scores.rows(), scores.cols());
    let mut bias = vec![0.0; n * m];
    for j in 0..m {
        if !key_valid[j] {
            for i in 0..n {
                bias[i * m + j] = MASK_BIAS;
            }
        }
    }
    let masked = scores.add(&Tensor::constant(vec![n, m], bias))?;
    Ok(masked.softmax_rows().matmul(v)?)
}

/// Multi-head self-attention block: per-head projections, concatenation, and
/// the output projection. Residual and layer norm are applied by the caller.
pub fn multi_head(
    x: &Tensor,
    layer: usize,
    n_heads: usize,
    params: &BoundParams,
    key_valid: &[bool],
) -> Result<Tensor, EncoderError> {
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = x.matmul(params.get(&format!("l{layer}.att.q{h}")))?;
        let k = x.matmul(params.get(&format!("l{layer}.att.k{h}")))?;
        let v = x.matmul(params.get(&format!("l{layer}.att.v{h}")))?;
        heads.push(attention(&q, &k, &v, key_valid)?);
    }
    let concat = Tensor::concat_cols(&heads)?;
    Ok(concat
        .matmul(params.get(&format!("l{layer}.att.wo")))?
        .add_row(params.get(&format!("l{layer}.att.bo")))?)
}

/// Full encoder: embeddings then `n_layers` transformer layers. Returns all
/// rows; the caller selects context rows for the heads.
pub fn encode(
    ids: &[usize],
    segments: &[u8],
    valid: &[bool],
    cfg: &EncoderConfig,
    params: &BoundParams,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Tensor, EncoderError> {
    if valid.len() != ids.len() {
        return Err(EncoderError::LengthMismatch);
    }
    let mut x = embed(ids, segments, cfg, params)?;
    for l in 0..cfg.n_layers {
        let mut att = multi_head(&x, l, cfg.n_heads, params, valid)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            att = att.dropout(cfg.dropout_rate, rng);
        }
        x = att
            .add(&x)?
            .layer_norm(
                params.get(&format!("l{l}.att.ln.g")),
                params.get(&format!("l{l}.att.ln.b")),
                LN_EPS,
            )?;
        let hidden = x.matmul(params.get(&format!("l{l}.ff.w1")))?
            .add_row(params.get(&format!("l{l}.ff.b1")))?;
        let hidden = match cfg.activation {
            Activation::Gelu => hidden.gelu(),
            Activation::Relu => hidden.relu(),
        };
        let mut ff = hidden
            .matmul(params.get(&format!("l{l}.ff.w2")))?
            .add_row(params.get(&format!("l{l}.ff.b2")))?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            ff = ff.dropout(cfg.dropout_rate, rng);
        }
        x = ff
            .add(&x)?
            .layer_norm(
                params.get(&format!("l{l}.ff.ln.g")),
                params.get(&format!("l{l}.ff.ln.b")),
                LN_EPS,
            )?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;

    fn tiny_cfg(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            dropout_rate: 0.0,
            seed: 3,
            activation: Activation::Gelu,
            use_segment: true,
        }
    }

    fn store_for(cfg: &EncoderConfig) -> ParamStore {
        let mut s = ParamStore::new();
        init_encoder_params(cfg, &mut s);
        s
    }

    #[test]
    fn vocabulary_reserved_ids() {
        let v = Vocabulary::build(["a", "b", "a"]);
        assert_eq!(v.id("[PAD]"), PAD_ID);
        assert_eq!(v.id("[CLS]"), CLS_ID);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn embed_position_separates_identical_tokens() {
        let cfg = tiny_cfg(6);
        let store = store_for(&cfg);
        let p = store.bind();
        let e = embed(&[4, 4], &[0, 0], &cfg, &p).unwrap();
        let d = cfg.d_model;
        assert_ne!(&e.data()[..d], &e.data()[d..]);
    }

    #[test]
    fn embed_out_of_range_id() {
        let cfg = tiny_cfg(6);
        let store = store_for(&cfg);
        let p = store.bind();
        assert!(matches!(
            embed(&[6], &[0], &cfg, &p),
            Err(EncoderError::VocabRange { id: 6, .. })
        ));
    }

    #[test]
    fn attention_single_key_copies_value() {
        let q = Tensor::constant(vec![2, 3], vec![0.3, -0.1, 0.9, 0.0, 0.2, 0.5]);
        let k = Tensor::constant(vec![1, 3], vec![1.0, 2.0, 3.0]);
        let v = Tensor::constant(vec![1, 2], vec![7.0, -4.0]);
        let out = attention(&q, &k, &v, &[true]).unwrap();
        assert_eq!(out.data(), &[7.0, -4.0, 7.0, -4.0]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = Tensor::constant(vec![1, 2], vec![0.4, -1.2]);
        let k = Tensor::constant(vec![3, 2], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let v = Tensor::constant(vec![3, 1], vec![3.0, 6.0, 9.0]);
        let out = attention(&q, &k, &v, &[true, true, true]).unwrap();
        assert!((out.data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn attention_hand_example() {
        // d_k=1, Q=[[1]], K=[[0],[ln 3]], V=[[1],[5]] -> 0.25*1 + 0.75*5 = 4
        let q = Tensor::constant(vec![1, 1], vec![1.0]);
        let k = Tensor::constant(vec![2, 1], vec![0.0, 3.0f64.ln()]);
        let v = Tensor::constant(vec![2, 1], vec![1.0, 5.0]);
        let out = attention(&q, &k, &v, &[true, true]).unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn attention_masked_keys_get_no_weight() {
        let q = Tensor::constant(vec![1, 2], vec![0.1, 0.2]);
        let k = Tensor::constant(vec![3, 2], vec![0.0, 0.0, 5.0, 5.0, -1.0, 2.0]);
        let v = Tensor::constant(vec![3, 2], vec![1.0, 0.0, 100.0, 100.0, 0.0, 1.0]);
        // recompute the weights directly to bound the masked weight
        let scores = q.matmul_nt(&k).unwrap().scale(1.0 / 2.0f64.sqrt());
        let mut bias = vec![0.0, -1e9, 0.0];
        let masked = scores
            .add(&Tensor::constant(vec![1, 3], std::mem::take(&mut bias)))
            .unwrap();
        let w = masked.softmax_rows();
        assert!(w.data()[1] < 1e-30);
        let out = attention(&q, &k, &v, &[true, false, true]).unwrap();
        assert!(out.data()[0] < 2.0, "masked value must not leak: {:?}", out.data());
    }

    #[test]
    fn attention_all_masked_is_degenerate() {
        let q = Tensor::constant(vec![1, 1], vec![0.0]);
        let k = Tensor::constant(vec![1, 1], vec![0.0]);
        let v = Tensor::constant(vec![1, 1], vec![1.0]);
        assert!(matches!(
            attention(&q, &k, &v, &[false]),
            Err(EncoderError::Tensor(TensorError::DegenerateAttention))
        ));
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut mk = |r: usize, c: usize| {
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Tensor::constant(vec![r, c], data)
        };
        let q = mk(4, 3);
        let k = mk(5, 3);
        let weights = q
            .matmul_nt(&k)
            .unwrap()
            .scale(1.0 / 3.0f64.sqrt())
            .softmax_rows();
        for i in 0..4 {
            let row = &weights.data()[i * 5..(i + 1) * 5];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn multi_head_single_head_reduces_to_attention() {
        let cfg = EncoderConfig {
            n_heads: 1,
            ..tiny_cfg(6)
        };
        let d = cfg.d_model;
        let mut store = ParamStore::new();
        init_encoder_params(&cfg, &mut store);
        // identity projections, identity output, zero bias
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        for name in ["l0.att.q0", "l0.att.k0", "l0.att.v0", "l0.att.wo"] {
            store.at_mut(store_index(&store, name)).data = eye.clone();
        }
        let p = store.bind();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x_data: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::constant(vec![3, d], x_data);
        let valid = [true, true, true];
        let mh = multi_head(&x, 0, 1, &p, &valid).unwrap();
        let plain = attention(&x, &x, &x, &valid).unwrap();
        for (a, b) in mh.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn store_index(store: &ParamStore, name: &str) -> usize {
        (0..store.len()).find(|&i| store.at(i).name == name).unwrap()
    }

    #[test]
    fn multi_head_matches_straight_line_reimplementation() {
        let cfg = tiny_cfg(6);
        let store = store_for(&cfg);
        let p = store.bind();
        let d = cfg.d_model;
        let dk = cfg.d_k();
        let n = 4;
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x_data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::constant(vec![n, d], x_data.clone());
        let valid = vec![true; n];
        let ours = multi_head(&x, 0, cfg.n_heads, &p, &valid).unwrap();

        // independent straight-line computation over plain vectors
        let get = |name: &str| store.get(name).unwrap().data.clone();
        let matvec = |m: &[f64], rows: usize, cols: usize, x: &[f64], xr: usize| -> Vec<f64> {
            // x (xr x rows) . m (rows x cols)
            let mut out = vec![0.0; xr * cols];
            for i in 0..xr {
                for k in 0..rows {
                    for j in 0..cols {
                        out[i * cols + j] += x[i * rows + k] * m[k * cols + j];
                    }
                }
            }
            out
        };
        let mut concat = vec![0.0; n * d];
        for h in 0..cfg.n_heads {
            let q = matvec(&get(&format!("l0.att.q{h}")), d, dk, &x_data, n);
            let k = matvec(&get(&format!("l0.att.k{h}")), d, dk, &x_data, n);
            let v = matvec(&get(&format!("l0.att.v{h}")), d, dk, &x_data, n);
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for j in 0..n {
                    let mut s = 0.0;
                    for t in 0..dk {
                        s += q[i * dk + t] * k[j * dk + t];
                    }
                    logits[j] = s / (dk as f64).sqrt();
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for t in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / z * v[j * dk + t];
                    }
                    concat[i * d + h * dk + t] = acc;
                }
            }
        }
        let wo = get("l0.att.wo");
        let bo = get("l0.att.bo");
        let mut expect = matvec(&wo, d, d, &concat, n);
        for i in 0..n {
            for j in 0..d {
                expect[i * d + j] += bo[j];
            }
        }
        for (a, b) in ours.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn encode_zero_layers_is_embedding() {
        let cfg = EncoderConfig {
            n_layers: 0,
            ..tiny_cfg(6)
        };
        let store = store_for(&cfg);
        let p = store.bind();
        let ids = [2usize, 4, 5, 3];
        let segs = [0u8, 0, 0, 1];
        let e = encode(&ids, &segs, &[true; 4], &cfg, &p, None).unwrap();
        let emb = embed(&ids, &segs, &cfg, &p).unwrap();
        assert_eq!(e.data(), emb.data());
    }

    #[test]
    fn encode_deterministic() {
        let cfg = tiny_cfg(8);
        let store = store_for(&cfg);
        let run = || {
            let p = store.bind();
            encode(&[2, 4, 5, 6, 3], &[0; 5], &[true; 5], &cfg, &p, None)
                .unwrap()
                .data()
                .to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encode_permutation_equivariant_without_positions() {
        let cfg = EncoderConfig {
            use_segment: false,
            ..tiny_cfg(8)
        };
        let mut store = ParamStore::new();
        init_encoder_params(&cfg, &mut store);
        let pos_idx = store_index(&store, "emb.pos");
        for v in &mut store.at_mut(pos_idx).data {
            *v = 0.0;
        }
        let p = store.bind();
        let a = encode(&[4, 5, 6], &[0; 3], &[true; 3], &cfg, &p, None).unwrap();
        let b = encode(&[4, 6, 5], &[0; 3], &[true; 3], &cfg, &p, None).unwrap();
        let d = cfg.d_model;
        for j in 0..d {
            assert!((a.data()[j] - b.data()[j]).abs() < 1e-9);
            assert!((a.data()[d + j] - b.data()[2 * d + j]).abs() < 1e-9);
            assert!((a.data()[2 * d + j] - b.data()[d + j]).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_overlong_input_is_error() {
        let cfg = tiny_cfg(6);
        let store = store_for(&cfg);
        let p = store.bind();
        let n = cfg.max_len + 1;
        let ids = vec![4usize; n];
        assert!(matches!(
            encode(&ids, &vec![0; n], &vec![true; n], &cfg, &p, None),
            Err(EncoderError::TooLong { .. })
        ));
    }

    #[test]
    fn full_encoder_grad_check_tiny() {
        // L=2, d=8, H=2, n=6; gradient through a scalar readout of E
        let cfg = tiny_cfg(7);
        let store = store_for(&cfg);
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = store
            .iter()
            .map(|p| (p.shape.clone(), p.data.clone()))
            .collect();
        let ids = [2usize, 4, 5, 6, 4, 3];
        let segs = [0u8, 0, 0, 1, 1, 1];
        let valid = [true; 6];
        let cfg2 = cfg.clone();
        let f = move |leaves: &[Tensor]| -> Tensor {
            // rebuild a BoundParams view over the supplied leaves
            let bound = BoundParamsView::new(&names, leaves);
            let e = encode(&ids, &segs, &valid, &cfg2, bound.as_bound(), None).unwrap();
            let w: Vec<f64> = (0..e.data().len())
                .map(|i| ((i % 7) as f64 - 3.0) * 0.11)
                .collect();
            e.mul(&Tensor::constant(e.shape().to_vec(), w)).unwrap().sum_all()
        };
        let report = grad_check(f, &inputs, 1e-5, 1e-4);
        assert!(report.pass, "max rel err {:.3e}", report.max_rel_err);
    }

    // test-only adapter building a BoundParams from external leaves
    struct BoundParamsView {
        bound: BoundParams,
    }
    impl BoundParamsView {
        fn new(names: &[String], leaves: &[Tensor]) -> Self {
            BoundParamsView {
                bound: BoundParams::from_parts(names.to_vec(), leaves.to_vec()),
            }
        }
        fn as_bound(&self) -> &BoundParams {
            &self.bound
        }
    }
}
