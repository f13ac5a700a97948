//! Mini-batch training loop: Adam with warmup and clipping, deterministic
//! epoch shuffles, padding with masks, and validation-based model selection.
//!
//! One bind of the parameter store serves a whole batch; instance losses are
//! averaged into a single scalar and one backward pass produces the batch
//! gradient in a fixed summation order, so runs are bit-reproducible.

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{BoundParams, CheckpointError, ParamStore};
use crate::corpus::{spans_to_tags, DatasetSplit, EntitySpan, EntityTypeRegistry, TaggedSentence};
use crate::crf::{self, CrfError, TagSet};
use crate::encoder::{self, EncoderConfig, EncoderError, Vocabulary, PAD_ID};
use crate::eval::{self, EvalError, Metrics};
use crate::query::{self, MrcInstance, QueryConfig, QueryError, Strategy};
use crate::span::{self, DecodedSpan, SpanError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("training split is empty")]
    EmptySplit,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Span(#[from] SpanError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint meta: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mrc,
    Tagger,
    Crf,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Mrc => "mrc",
            ModelKind::Tagger => "tagger",
            ModelKind::Crf => "crf",
        })
    }
}

/// Optimization and loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_seq_len: usize,
    pub learning_rate: f64,
    /// Separate, larger rate for the CRF transition parameters.
    pub crf_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub model: ModelKind,
    pub strategy: Strategy,
    /// Stop after this many epochs without validation-F1 improvement.
    pub patience: Option<usize>,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Keep-probability for MRC instances that carry no gold span.
    pub negative_keep: f64,
    /// Stop once validation F1 reaches this value.
    pub early_stop_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_seq_len: 128,
            learning_rate: 1e-3,
            crf_learning_rate: 5e-3,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            model: ModelKind::Mrc,
            strategy: Strategy::Keyword,
            patience: None,
            warmup_frac: 0.05,
            negative_keep: 1.0,
            early_stop_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || self.crf_learning_rate <= 0.0 {
            return Err(TrainError::Config("learning rates must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_keep) {
            return Err(TrainError::Config("negative_keep must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Per-step mean batch losses, for convergence diagnostics.
    pub step_losses: Vec<f64>,
}

impl TrainHistory {
    /// CSV with columns epoch, loss, P, R, F1, seconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,precision,recall,f1,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
                r.epoch, r.train_loss, r.precision, r.recall, r.f1, r.seconds
            ));
        }
        out
    }

    /// CSV without wall-clock timings; identical across identical runs.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,loss,precision,recall,f1\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                r.epoch, r.train_loss, r.precision, r.recall, r.f1
            ));
        }
        out.push_str(&format!("best,{}\n", self.best_epoch));
        out
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Index batches with the padded length each batch will use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub pad_to: usize,
}

/// Deterministic epoch-dependent shuffle, then fixed-size chunks padded to
/// the longest member.
pub fn make_batches(lens: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    let mut rng =
        ChaCha20Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order
        .chunks(batch_size.max(1))
        .map(|chunk| Batch {
            indices: chunk.to_vec(),
            pad_to: chunk.iter().map(|&i| lens[i]).max().unwrap_or(0),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First/second moment estimates per parameter plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> AdamState {
        AdamState {
            m: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `lr_for` maps a parameter name to its
/// learning rate (already warmup-scaled by the caller).
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr_for: impl Fn(&str) -> f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), TrainError> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TrainError::Config(format!(
            "adam_step: {} params, {} grads, {} states",
            store.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != store.at(i).data.len() || state.m[i].len() != g.len() {
            return Err(TrainError::Config(format!(
                "adam_step: size mismatch for parameter {:?}",
                store.at(i).name
            )));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for (i, g) in grads.iter().enumerate() {
        let lr = lr_for(&store.at(i).name);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = &mut store.at_mut(i).data;
        for j in 0..g.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Instance losses
// ---------------------------------------------------------------------------

/// MRC instance loss at a padded length: encode, project both heads, binary
/// cross-entropy restricted to context positions.
pub fn mrc_instance_loss(
    inst: &MrcInstance,
    pad_to: usize,
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    params: &BoundParams,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Tensor, TrainError> {
    let real = inst.combined_tokens.len();
    let pad_to = pad_to.max(real);
    let mut ids = vocab.encode(&inst.combined_tokens);
    ids.resize(pad_to, PAD_ID);
    let mut segs = inst.segment_ids();
    segs.resize(pad_to, 1);
    let mut valid = vec![true; real];
    valid.resize(pad_to, false);
    let e = encoder::encode(&ids, &segs, &valid, cfg, params, dropout_rng)?;
    let (p_start, p_end) = span::predict_prob_tensors(&e, params)?;
    let mut y_start = inst.y_start.clone();
    y_start.resize(pad_to, 0);
    let mut y_end = inst.y_end.clone();
    y_end.resize(pad_to, 0);
    let mask: Vec<u8> = (0..pad_to)
        .map(|i| u8::from(i >= inst.context_offset && i < inst.context_offset + inst.context_len))
        .collect();
    let loss = span::span_loss(&p_start, &p_end, &y_start, &y_end, &mask)?;
    Ok(loss.l_train)
}

/// One sequence-labeling training sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct TagInstance {
    pub tokens: Vec<String>,
    pub gold: Vec<usize>,
    pub doc_id: String,
}

impl TagInstance {
    pub fn build(
        sentence: &TaggedSentence,
        tag_set: &TagSet,
        max_len: usize,
    ) -> TagInstance {
        let n = sentence.tokens.len().min(max_len);
        let tags = spans_to_tags(sentence);
        let gold: Vec<usize> = tags[..n]
            .iter()
            .map(|t| tag_set.id(t).unwrap_or(0))
            .collect();
        TagInstance {
            tokens: sentence.tokens[..n].to_vec(),
            gold,
            doc_id: sentence.doc_id.clone(),
        }
    }
}

/// Softmax-tagger or CRF loss for one sentence at a padded length.
pub fn tag_instance_loss(
    inst: &TagInstance,
    pad_to: usize,
    use_crf: bool,
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    params: &BoundParams,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Tensor, TrainError> {
    let real = inst.tokens.len();
    let pad_to = pad_to.max(real);
    let mut ids = vocab.encode(&inst.tokens);
    ids.resize(pad_to, PAD_ID);
    let segs = vec![0u8; pad_to];
    let mut valid = vec![true; real];
    valid.resize(pad_to, false);
    let e = encoder::encode(&ids, &segs, &valid, cfg, params, dropout_rng)?;
    if use_crf {
        let e_real = e.slice_rows(0, real)?;
        let logits = crf::tag_logits(&e_real, params)?;
        let nll = crf::crf_nll(
            &logits,
            params.get("crf.trans"),
            params.get("crf.start"),
            params.get("crf.end"),
            &inst.gold,
        )?;
        // mean over positions keeps magnitudes comparable across lengths
        Ok(nll.scale(1.0 / real as f64))
    } else {
        let logits = crf::tag_logits(&e, params)?;
        let probs = logits.softmax_rows();
        let mut gold = inst.gold.clone();
        gold.resize(pad_to, 0);
        let mut mask = vec![1u8; real];
        mask.resize(pad_to, 0);
        Ok(probs.nll_rows(&gold, &mask)?)
    }
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

/// Everything needed to run a trained model: config, vocabulary, registry,
/// queries, and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder: EncoderConfig,
    pub kind: ModelKind,
    pub strategy: Strategy,
    pub vocab: Vocabulary,
    pub registry: EntityTypeRegistry,
    pub queries: QueryConfig,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    encoder: EncoderConfig,
    kind: ModelKind,
    strategy: Strategy,
    vocab: Vocabulary,
    registry: EntityTypeRegistry,
    queries: QueryConfig,
}

impl ModelBundle {
    /// Decoded spans with boundary probabilities (MRC) or probability 1.0
    /// placeholders (tag models).
    pub fn decode_scored(&self, sentence: &TaggedSentence) -> Result<Vec<DecodedSpan>, TrainError> {
        match self.kind {
            ModelKind::Mrc => {
                let params = self.store.bind();
                Ok(span::extract_entities(
                    sentence,
                    &self.registry,
                    &self.queries,
                    self.strategy,
                    &self.encoder,
                    &self.vocab,
                    &params,
                )?)
            }
            ModelKind::Tagger | ModelKind::Crf => {
                let spans = self.decode_tags(sentence)?;
                Ok(spans
                    .into_iter()
                    .map(|e| DecodedSpan {
                        start: e.start,
                        end: e.end,
                        entity_type: e.entity_type,
                        p_start: 1.0,
                        p_end: 1.0,
                    })
                    .collect())
            }
        }
    }

    /// Decoded entity spans, sentence-relative.
    pub fn decode(&self, sentence: &TaggedSentence) -> Result<Vec<EntitySpan>, TrainError> {
        Ok(self
            .decode_scored(sentence)?
            .into_iter()
            .map(|d| EntitySpan::new(d.start, d.end, d.entity_type))
            .collect())
    }

    fn decode_tags(&self, sentence: &TaggedSentence) -> Result<Vec<EntitySpan>, TrainError> {
        let n = sentence.tokens.len().min(self.encoder.max_len);
        if n == 0 {
            return Ok(Vec::new());
        }
        let ids = self.vocab.encode(&sentence.tokens[..n]);
        let segs = vec![0u8; n];
        let valid = vec![true; n];
        let params = self.store.bind();
        let e = encoder::encode(&ids, &segs, &valid, &self.encoder, &params, None)?;
        let logits = crf::tag_logits(&e, &params)?;
        let tag_set = TagSet::from_registry(&self.registry);
        let path = match self.kind {
            ModelKind::Crf => crf::viterbi(
                &logits,
                params.get("crf.trans"),
                params.get("crf.start"),
                params.get("crf.end"),
            ),
            _ => crf::argmax_tags(&logits),
        };
        Ok(crf::tags_to_entities(&tag_set.decode(&path)))
    }

    /// Entity-level metrics of this model over a corpus.
    pub fn evaluate(&self, sentences: &[TaggedSentence]) -> Result<Metrics, TrainError> {
        let mut pred = Vec::with_capacity(sentences.len());
        let mut gold = Vec::with_capacity(sentences.len());
        for s in sentences {
            pred.push((s.doc_id.clone(), self.decode(s)?));
            let g: Vec<EntitySpan> = s
                .entities
                .iter()
                .filter(|e| self.registry.contains(&e.entity_type))
                .cloned()
                .collect();
            gold.push((s.doc_id.clone(), g));
        }
        Ok(eval::entity_f1(&pred, &gold)?)
    }

    pub fn serialize(&self) -> Result<String, TrainError> {
        let meta = BundleMeta {
            encoder: self.encoder.clone(),
            kind: self.kind,
            strategy: self.strategy,
            vocab: self.vocab.clone(),
            registry: self.registry.clone(),
            queries: self.queries.clone(),
        };
        Ok(self.store.serialize(&serde_json::to_string(&meta)?))
    }

    pub fn deserialize(text: &str) -> Result<ModelBundle, TrainError> {
        let (meta_json, store) = ParamStore::deserialize(text)?;
        let meta: BundleMeta = serde_json::from_str(&meta_json)?;
        Ok(ModelBundle {
            encoder: meta.encoder,
            kind: meta.kind,
            strategy: meta.strategy,
            vocab: meta.vocab,
            registry: meta.registry,
            queries: meta.queries,
            store,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TrainError> {
        std::fs::write(path, self.serialize()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<ModelBundle, TrainError> {
        ModelBundle::deserialize(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

enum Instances {
    Mrc(Vec<MrcInstance>),
    Tag(Vec<TagInstance>),
}

impl Instances {
    fn len(&self) -> usize {
        match self {
            Instances::Mrc(v) => v.len(),
            Instances::Tag(v) => v.len(),
        }
    }

    fn lens(&self) -> Vec<usize> {
        match self {
            Instances::Mrc(v) => v.iter().map(|i| i.combined_tokens.len()).collect(),
            Instances::Tag(v) => v.iter().map(|i| i.tokens.len()).collect(),
        }
    }
}

/// Trains a model on the split and returns the best-validation-F1 parameters
/// with the full history. Deterministic for a fixed config.
pub fn train(
    cfg: &TrainConfig,
    enc_template: &EncoderConfig,
    split: &DatasetSplit,
    registry: &EntityTypeRegistry,
    queries: &QueryConfig,
) -> Result<(ModelBundle, TrainHistory), TrainError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if cfg.model == ModelKind::Mrc {
        query::validate_query_config(queries, registry)?;
    }

    // vocabulary over training tokens plus (for MRC) all query texts
    let mut units: Vec<String> = Vec::new();
    for s in &split.train {
        units.extend(s.tokens.iter().cloned());
    }
    if cfg.model == ModelKind::Mrc {
        for ty in &registry.types {
            let q = query::build_query(ty, queries, cfg.strategy)?;
            units.extend(q);
        }
    }
    let vocab = Vocabulary::build(units.iter().map(String::as_str));

    let mut enc_cfg = enc_template.clone();
    enc_cfg.vocab_size = vocab.len();
    enc_cfg.max_len = enc_cfg.max_len.min(cfg.max_seq_len.max(4));
    enc_cfg.seed = cfg.seed;
    enc_cfg
        .validate()
        .map_err(TrainError::Config)?;

    let mut store = ParamStore::new();
    encoder::init_encoder_params(&enc_cfg, &mut store);
    let tag_set = TagSet::from_registry(registry);
    match cfg.model {
        ModelKind::Mrc => span::init_head_params(enc_cfg.d_model, cfg.seed, &mut store),
        ModelKind::Tagger => {
            crf::init_tagger_params(enc_cfg.d_model, tag_set.len(), cfg.seed, &mut store)
        }
        ModelKind::Crf => {
            crf::init_tagger_params(enc_cfg.d_model, tag_set.len(), cfg.seed, &mut store);
            crf::init_crf_params(tag_set.len(), &mut store);
        }
    }

    // training instances
    let instances = match cfg.model {
        ModelKind::Mrc => {
            let mut all = Vec::new();
            let mut keep_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6e65_6761_7469_7665);
            for s in &split.train {
                for inst in query::build_instances(s, registry, queries, cfg.strategy, enc_cfg.max_len)? {
                    let negative = inst.gold_spans.is_empty();
                    if negative && cfg.negative_keep < 1.0 && !keep_rng.gen_bool(cfg.negative_keep)
                    {
                        continue;
                    }
                    all.push(inst);
                }
            }
            Instances::Mrc(all)
        }
        ModelKind::Tagger | ModelKind::Crf => Instances::Tag(
            split
                .train
                .iter()
                .map(|s| TagInstance::build(s, &tag_set, enc_cfg.max_len))
                .collect(),
        ),
    };
    if instances.len() == 0 {
        return Err(TrainError::EmptySplit);
    }
    let lens = instances.lens();

    let steps_per_epoch = lens.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = ((total_steps as f64) * cfg.warmup_frac).ceil().max(1.0);

    let mut state = AdamState::for_store(&store);
    let mut history = TrainHistory::default();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_store = store.clone();
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut dropout_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x64726f70);
    let use_dropout = enc_cfg.dropout_rate > 0.0;

    'epochs: for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let batches = make_batches(&lens, cfg.batch_size, cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let params = store.bind();
            let mut total: Option<Tensor> = None;
            for &idx in &batch.indices {
                let rng: Option<&mut dyn RngCore> = if use_dropout {
                    Some(&mut dropout_rng)
                } else {
                    None
                };
                let loss = match &instances {
                    Instances::Mrc(v) => {
                        mrc_instance_loss(&v[idx], batch.pad_to, &enc_cfg, &vocab, &params, rng)?
                    }
                    Instances::Tag(v) => tag_instance_loss(
                        &v[idx],
                        batch.pad_to,
                        cfg.model == ModelKind::Crf,
                        &enc_cfg,
                        &vocab,
                        &params,
                        rng,
                    )?,
                };
                total = Some(match total {
                    Some(t) => t.add(&loss)?,
                    None => loss,
                });
            }
            let mean = total
                .expect("non-empty batch")
                .scale(1.0 / batch.indices.len() as f64);
            let loss_val = mean.value();
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged {
                    epoch: epoch + 1,
                    batch: bi + 1,
                });
            }
            mean.backward()?;
            let mut grads = params.grads();
            clip_global_norm(&mut grads, cfg.clip_norm);
            let warm = ((state.t + 1) as f64 / warmup_steps).min(1.0);
            adam_step(
                &mut store,
                &grads,
                &mut state,
                |name| {
                    let base = if name.starts_with("crf.") {
                        cfg.crf_learning_rate
                    } else {
                        cfg.learning_rate
                    };
                    base * warm
                },
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
            )?;
            epoch_loss += loss_val * batch.indices.len() as f64;
            seen += batch.indices.len();
            history.step_losses.push(loss_val);
        }
        let train_loss = epoch_loss / seen as f64;

        // validation metrics via the shared evaluator
        let snapshot = ModelBundle {
            encoder: enc_cfg.clone(),
            kind: cfg.model,
            strategy: cfg.strategy,
            vocab: vocab.clone(),
            registry: registry.clone(),
            queries: queries.clone(),
            store: store.clone(),
        };
        let val_set: &[TaggedSentence] = if split.validation.is_empty() {
            &split.train
        } else {
            &split.validation
        };
        let metrics = snapshot.evaluate(val_set)?;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            precision: metrics.precision,
            recall: metrics.recall,
            f1: metrics.f1,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if metrics.f1 > best_f1 {
            best_f1 = metrics.f1;
            best_store = store.clone();
            best_epoch = epoch + 1;
            stale = 0;
        } else {
            stale += 1;
        }
        if let Some(target) = cfg.early_stop_f1 {
            if metrics.f1 >= target {
                break 'epochs;
            }
        }
        if let Some(p) = cfg.patience {
            if stale > p {
                break 'epochs;
            }
        }
    }
    history.best_epoch = best_epoch;

    Ok((
        ModelBundle {
            encoder: enc_cfg,
            kind: cfg.model,
            strategy: cfg.strategy,
            vocab,
            registry: registry.clone(),
            queries: queries.clone(),
            store: best_store,
        },
        history,
    ))
}

/// Deterministic training-set subsample for size ablations; validation and
/// test are untouched.
pub fn subsample_split(
    split: &DatasetSplit,
    fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, TrainError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(TrainError::Config(format!(
            "fraction {fraction} outside (0,1]"
        )));
    }
    let keep = ((split.train.len() as f64) * fraction).floor() as usize;
    if keep == 0 {
        return Err(TrainError::Config(format!(
            "fraction {fraction} yields zero training sentences"
        )));
    }
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5155_4253_414d_504c);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
    chosen.sort_unstable();
    Ok(DatasetSplit {
        train: chosen.iter().map(|&i| split.train[i].clone()).collect(),
        validation: split.validation.clone(),
        test: split.test.clone(),
        seed: split.seed,
        replication_id: split.replication_id,
    })
}

/// Simple per-seed summary used by the CLI and acceptance experiments.
pub fn seed_suffix(seed: u64) -> String {
    format!("seed{seed}")
}

pub type RunResult = (u64, Metrics, TrainHistory);

/// Trains one model per seed and evaluates each on the test set.
pub fn replicate(
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    split: &DatasetSplit,
    registry: &EntityTypeRegistry,
    queries: &QueryConfig,
    seeds: &[u64],
) -> Result<Vec<(u64, ModelBundle, Metrics, TrainHistory)>, TrainError> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let (bundle, history) = train(&c, enc, split, registry, queries)?;
        let metrics = bundle.evaluate(&split.test)?;
        out.push((seed, bundle, metrics, history));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::QuerySpec;
    use std::collections::BTreeMap as Map;

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 0,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 48,
            dropout_rate: 0.0,
            seed: 0,
            activation: crate::encoder::Activation::Gelu,
            use_segment: true,
        }
    }

    fn digit_sentence(i: usize, label: bool) -> TaggedSentence {
        let digits = format!("{:03}", i % 1000);
        let text = format!("价格为{digits}元整");
        let tokens: Vec<String> = text.chars().map(|c| c.to_string()).collect();
        let entities = if label {
            vec![EntitySpan::new(3, 6, "Price")]
        } else {
            vec![]
        };
        TaggedSentence {
            tokens,
            entities,
            doc_id: format!("d{i}"),
        }
    }

    fn tiny_split(n: usize) -> DatasetSplit {
        let all: Vec<TaggedSentence> = (0..n).map(|i| digit_sentence(i, true)).collect();
        let k = n / 5;
        DatasetSplit {
            train: all[..n - 2 * k].to_vec(),
            validation: all[n - 2 * k..n - k].to_vec(),
            test: all[n - k..].to_vec(),
            seed: 0,
            replication_id: 0,
        }
    }

    fn price_queries() -> QueryConfig {
        let mut q = Map::new();
        q.insert(
            "Price".to_string(),
            QuerySpec {
                keyword: "价格".into(),
                template: "找出{}".into(),
                definition: "商品交易的金额数值".into(),
            },
        );
        q
    }

    #[test]
    fn batches_are_deterministic_and_padded() {
        let lens = vec![5, 9, 3, 7, 4];
        let a = make_batches(&lens, 2, 11, 0);
        let b = make_batches(&lens, 2, 11, 0);
        assert_eq!(a, b);
        let c = make_batches(&lens, 2, 11, 1);
        assert_ne!(a, c, "epoch must perturb order");
        for batch in &a {
            let max = batch.indices.iter().map(|&i| lens[i]).max().unwrap();
            assert_eq!(batch.pad_to, max);
        }
        let single = make_batches(&lens, 10, 0, 0);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].pad_to, 9);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::new();
        store.add("w", vec![2], vec![1.0, -2.0]);
        let mut state = AdamState::for_store(&store);
        adam_step(
            &mut store,
            &[vec![0.0, 0.0]],
            &mut state,
            |_| 0.1,
            0.9,
            0.999,
            1e-8,
        )
        .unwrap();
        assert_eq!(store.at(0).data, vec![1.0, -2.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias-corrected first step with g=1: m_hat=1, v_hat=1 -> step = lr/(1+eps)
        let mut store = ParamStore::new();
        store.add("w", vec![1], vec![5.0]);
        let mut state = AdamState::for_store(&store);
        adam_step(&mut store, &[vec![1.0]], &mut state, |_| 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!((store.at(0).data[0] - (5.0 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn adam_crf_group_uses_its_rate() {
        let mut store = ParamStore::new();
        store.add("enc.w", vec![1], vec![0.0]);
        store.add("crf.trans", vec![1], vec![0.0]);
        let mut state = AdamState::for_store(&store);
        adam_step(
            &mut store,
            &[vec![1.0], vec![1.0]],
            &mut state,
            |name| if name.starts_with("crf.") { 5e-3 } else { 5e-5 },
            0.9,
            0.999,
            1e-8,
        )
        .unwrap();
        assert!((store.at(0).data[0] + 5e-5).abs() < 1e-9);
        assert!((store.at(1).data[0] + 5e-3).abs() < 1e-7);
    }

    #[test]
    fn adam_state_shape_mismatch_is_error() {
        let mut store = ParamStore::new();
        store.add("w", vec![2], vec![0.0; 2]);
        let mut state = AdamState::for_store(&store);
        assert!(adam_step(&mut store, &[vec![0.0]], &mut state, |_| 0.1, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn clip_rescales_only_large_gradients() {
        let mut grads = vec![vec![3.0, 4.0]];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads[0][0] - 0.6).abs() < 1e-12);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn padding_does_not_change_losses() {
        let enc = tiny_encoder();
        let split = tiny_split(10);
        let registry = EntityTypeRegistry::from_types(["Price"]);
        let queries = price_queries();
        let sentence = &split.train[0];
        let inst = query::build_instance(sentence, "Price", &queries, Strategy::Keyword, enc.max_len)
            .unwrap();
        let vocab = Vocabulary::build(
            sentence
                .tokens
                .iter()
                .map(String::as_str)
                .chain(["价", "格"]),
        );
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            ..enc.clone()
        };
        let mut store = ParamStore::new();
        encoder::init_encoder_params(&cfg, &mut store);
        span::init_head_params(cfg.d_model, 0, &mut store);
        let params = store.bind();
        let tight = mrc_instance_loss(&inst, 0, &cfg, &vocab, &params, None)
            .unwrap()
            .value();
        let padded = mrc_instance_loss(&inst, inst.combined_tokens.len() + 7, &cfg, &vocab, &params, None)
            .unwrap()
            .value();
        assert!(
            (tight - padded).abs() < 1e-10,
            "padding changed loss: {tight} vs {padded}"
        );

        // same property for both tag losses
        let tag_set = TagSet::from_registry(&registry);
        let tinst = TagInstance::build(sentence, &tag_set, cfg.max_len);
        let mut store2 = ParamStore::new();
        encoder::init_encoder_params(&cfg, &mut store2);
        crf::init_tagger_params(cfg.d_model, tag_set.len(), 0, &mut store2);
        crf::init_crf_params(tag_set.len(), &mut store2);
        let p2 = store2.bind();
        for use_crf in [false, true] {
            let a = tag_instance_loss(&tinst, 0, use_crf, &cfg, &vocab, &p2, None)
                .unwrap()
                .value();
            let b = tag_instance_loss(&tinst, tinst.tokens.len() + 5, use_crf, &cfg, &vocab, &p2, None)
                .unwrap()
                .value();
            assert!((a - b).abs() < 1e-10, "crf={use_crf}: {a} vs {b}");
        }
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        let enc = tiny_encoder();
        let registry = EntityTypeRegistry::from_types(["Price"]);
        let queries = price_queries();
        let mut first = 0.0;
        let mut last = 0.0;
        for seed in [1u64, 2, 3] {
            let split = tiny_split(30);
            let cfg = TrainConfig {
                batch_size: 2,
                epochs: 6,
                seed,
                max_seq_len: enc.max_len,
                ..TrainConfig::default()
            };
            let (_, history) = train(&cfg, &enc, &split, &registry, &queries).unwrap();
            assert!(history.step_losses.len() >= 50);
            first += history.step_losses[0];
            last += history.step_losses[49];
        }
        assert!(
            last < first,
            "mean step-50 loss {last} not below step-1 loss {first}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let enc = tiny_encoder();
        let registry = EntityTypeRegistry::from_types(["Price"]);
        let queries = price_queries();
        let split = tiny_split(12);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            seed: 9,
            max_seq_len: enc.max_len,
            ..TrainConfig::default()
        };
        let (b1, h1) = train(&cfg, &enc, &split, &registry, &queries).unwrap();
        let (b2, h2) = train(&cfg, &enc, &split, &registry, &queries).unwrap();
        assert_eq!(h1, h2_without_time(h2.clone(), &h1));
        assert_eq!(b1.serialize().unwrap(), b2.serialize().unwrap());
        assert_eq!(h1.metrics_csv(), h2.metrics_csv());
    }

    // wall-clock seconds legitimately differ between runs; splice them over
    fn h2_without_time(mut h2: TrainHistory, h1: &TrainHistory) -> TrainHistory {
        for (a, b) in h2.epochs.iter_mut().zip(&h1.epochs) {
            a.seconds = b.seconds;
        }
        h2
    }

    #[test]
    fn checkpoint_round_trip_preserves_metrics() {
        let enc = tiny_encoder();
        let registry = EntityTypeRegistry::from_types(["Price"]);
        let queries = price_queries();
        let split = tiny_split(12);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            seed: 5,
            max_seq_len: enc.max_len,
            ..TrainConfig::default()
        };
        let (bundle, _) = train(&cfg, &enc, &split, &registry, &queries).unwrap();
        let m1 = bundle.evaluate(&split.test).unwrap();
        let text = bundle.serialize().unwrap();
        let back = ModelBundle::deserialize(&text).unwrap();
        let m2 = back.evaluate(&split.test).unwrap();
        assert_eq!(m1.f1, m2.f1);
        assert_eq!(m1.precision, m2.precision);
        assert_eq!(back.serialize().unwrap(), text);
    }

    #[test]
    fn tagger_and_crf_smoke_train() {
        let enc = tiny_encoder();
        let registry = EntityTypeRegistry::from_types(["Price"]);
        let split = tiny_split(10);
        for model in [ModelKind::Tagger, ModelKind::Crf] {
            let cfg = TrainConfig {
                batch_size: 4,
                epochs: 1,
                model,
                max_seq_len: enc.max_len,
                ..TrainConfig::default()
            };
            let (bundle, history) = train(&cfg, &enc, &split, &registry, &Map::new()).unwrap();
            assert_eq!(history.epochs.len(), 1);
            assert!(history.epochs[0].train_loss.is_finite());
            bundle.evaluate(&split.test).unwrap();
        }
    }

    #[test]
    fn empty_split_is_error() {
        let enc = tiny_encoder();
        let registry = EntityTypeRegistry::from_types(["Price"]);
        let split = DatasetSplit {
            train: vec![],
            validation: vec![],
            test: vec![],
            seed: 0,
            replication_id: 0,
        };
        assert!(matches!(
            train(&TrainConfig::default(), &enc, &split, &registry, &price_queries()),
            Err(TrainError::EmptySplit)
        ));
    }

    #[test]
    fn subsample_is_deterministic_and_errors_on_zero() {
        let split = tiny_split(20);
        let a = subsample_split(&split, 0.5, 3).unwrap();
        let b = subsample_split(&split, 0.5, 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.len(), split.train.len() / 2);
        assert_eq!(a.test.len(), split.test.len());
        assert!(subsample_split(&split, 0.0001, 3).is_err());
    }
}
