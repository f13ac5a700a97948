//! Deterministic synthetic corpus generation.
//!
//! A [`SynthSpec`] describes per-type surface grammars, sentence templates,
//! and a type-sparsity profile. Generation is a pure function of the spec
//! and the seed, which keeps replication runs reproducible.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntitySpan, TaggedSentence};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("sentence {index}: slot of type {entity_type:?} produced an empty surface form")]
    EmptySurface { index: usize, entity_type: String },
    #[error("sentence {index}: generated overlapping spans")]
    Overlap { index: usize },
    #[error("no surface pattern registered for type {0:?}")]
    MissingPattern(String),
    #[error("type profile is empty but a profile slot was used")]
    EmptyProfile,
    #[error("template list is empty")]
    NoTemplates,
}

/// One piece of a surface grammar.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternPart {
    /// Fixed text.
    Lit(String),
    /// One alternative chosen uniformly.
    Choice(Vec<String>),
    /// A digit string with length in `min..=max`.
    Digits { min: usize, max: usize },
    /// `len` units drawn uniformly from a pool, `len` in `min..=max`.
    Chars {
        pool: Vec<String>,
        min: usize,
        max: usize,
    },
}

/// Surface grammar for one entity type: the concatenation of its parts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfacePattern {
    pub parts: Vec<PatternPart>,
}

impl SurfacePattern {
    fn sample(&self, rng: &mut ChaCha20Rng) -> String {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                PatternPart::Lit(s) => out.push_str(s),
                PatternPart::Choice(opts) => {
                    if !opts.is_empty() {
                        out.push_str(&opts[rng.gen_range(0..opts.len())]);
                    }
                }
                PatternPart::Digits { min, max } => {
                    let len = rng.gen_range(*min..=*max);
                    for i in 0..len {
                        // leading digit nonzero so lengths stay as drawn
                        let d = if i == 0 {
                            rng.gen_range(1..=9u8)
                        } else {
                            rng.gen_range(0..=9u8)
                        };
                        out.push(char::from(b'0' + d));
                    }
                }
                PatternPart::Chars { pool, min, max } => {
                    if !pool.is_empty() {
                        let len = rng.gen_range(*min..=*max);
                        for _ in 0..len {
                            out.push_str(&pool[rng.gen_range(0..pool.len())]);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Which entity type fills a slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSpec {
    /// Always this type.
    Fixed(String),
    /// Sampled from the spec's type profile.
    Profile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    /// Literal connective text.
    Lit(String),
    /// One literal chosen uniformly (surface variety without new spans).
    LitChoice(Vec<String>),
    /// An entity slot.
    Slot(SlotSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub segments: Vec<Segment>,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

/// Declarative description of a synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub sentence_count: usize,
    pub patterns: BTreeMap<String, SurfacePattern>,
    pub templates: Vec<Template>,
    /// Target per-type proportions for `Profile` slots; weights need not sum
    /// to one.
    #[serde(default)]
    pub type_profile: Vec<(String, f64)>,
}

/// Generates `spec.sentence_count` character-tokenized sentences. Output is
/// identical for identical (spec, seed).
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<Vec<TaggedSentence>, SynthError> {
    if spec.sentence_count > 0 && spec.templates.is_empty() {
        return Err(SynthError::NoTemplates);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let total_weight: f64 = spec.templates.iter().map(|t| t.weight.max(0.0)).sum();
    let mut out = Vec::with_capacity(spec.sentence_count);
    for index in 0..spec.sentence_count {
        let template = pick_template(&spec.templates, total_weight, &mut rng);
        let mut text = String::new();
        let mut entities: Vec<EntitySpan> = Vec::new();
        for seg in &template.segments {
            match seg {
                Segment::Lit(s) => text.push_str(s),
                Segment::LitChoice(opts) => {
                    if !opts.is_empty() {
                        text.push_str(&opts[rng.gen_range(0..opts.len())]);
                    }
                }
                Segment::Slot(slot) => {
                    let ty = match slot {
                        SlotSpec::Fixed(t) => t.clone(),
                        SlotSpec::Profile => sample_profile(&spec.type_profile, &mut rng)?,
                    };
                    let pattern = spec
                        .patterns
                        .get(&ty)
                        .ok_or_else(|| SynthError::MissingPattern(ty.clone()))?;
                    let surface = pattern.sample(&mut rng);
                    if surface.is_empty() {
                        return Err(SynthError::EmptySurface {
                            index,
                            entity_type: ty,
                        });
                    }
                    let start = text.chars().count();
                    text.push_str(&surface);
                    let end = text.chars().count() - 1;
                    entities.push(EntitySpan::new(start, end, ty));
                }
            }
        }
        let sentence = TaggedSentence {
            tokens: text.chars().map(|c| c.to_string()).collect(),
            entities,
            doc_id: format!("synth{index:05}"),
        };
        if sentence.validate().is_err() {
            return Err(SynthError::Overlap { index });
        }
        out.push(sentence);
    }
    Ok(out)
}

fn pick_template<'a>(
    templates: &'a [Template],
    total_weight: f64,
    rng: &mut ChaCha20Rng,
) -> &'a Template {
    if total_weight <= 0.0 {
        return &templates[0];
    }
    let mut x = rng.gen_range(0.0..total_weight);
    for t in templates {
        let w = t.weight.max(0.0);
        if x < w {
            return t;
        }
        x -= w;
    }
    templates.last().expect("non-empty templates")
}

fn sample_profile(profile: &[(String, f64)], rng: &mut ChaCha20Rng) -> Result<String, SynthError> {
    let total: f64 = profile.iter().map(|(_, w)| w.max(0.0)).sum();
    if profile.is_empty() || total <= 0.0 {
        return Err(SynthError::EmptyProfile);
    }
    let mut x = rng.gen_range(0.0..total);
    for (ty, w) in profile {
        let w = w.max(0.0);
        if x < w {
            return Ok(ty.clone());
        }
        x -= w;
    }
    Ok(profile.last().expect("non-empty profile").0.clone())
}
