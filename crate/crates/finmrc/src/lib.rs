//! Financial named-entity recognition reformulated as machine reading
//! comprehension.
//!
//! The library converts sequence-tagged corpora into (question, context,
//! answer) triplets, trains a compact transformer encoder from scratch with
//! start/end span heads, decodes spans by the nearest-matching principle,
//! and benchmarks against softmax-tagger and linear-chain-CRF baselines over
//! the same encoder. Everything is deterministic given a seed: corpus
//! sampling, initialization, batching, dropout, and checkpoint bytes.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod eval;
pub mod presets;
pub mod query;
pub mod span;
pub mod synth;
pub mod tensor;
pub mod trainer;
