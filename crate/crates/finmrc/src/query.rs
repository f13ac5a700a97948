//! Query construction and MRC instance assembly.
//!
//! Each entity type gets a natural-language query under one of three
//! strategies; the query and the sentence are concatenated as
//! `[CLS] q_1..q_m [SEP] x_1..x_n` with binary start/end label vectors over
//! the combined positions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntityTypeRegistry, TaggedSentence};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("no query spec configured for entity type {0:?}")]
    MissingSpec(String),
    #[error("entity type {0:?} is not registered")]
    UnknownType(String),
    #[error("query for type {entity_type:?} plus special tokens ({needed}) exceeds max_len {max_len}")]
    QueryTooLong {
        entity_type: String,
        needed: usize,
        max_len: usize,
    },
    #[error("predicted span ({start},{end}) begins inside the query region (context offset {offset})")]
    SpanInQueryRegion {
        start: usize,
        end: usize,
        offset: usize,
    },
}

/// Per-type query source texts for the three strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    /// Short display name of the type, also the keyword query.
    pub keyword: String,
    /// Parameterized template with a `{}` slot for the display name.
    pub template: String,
    /// Encyclopedia-style explanation of the type.
    pub definition: String,
}

/// entity type -> query texts. BTreeMap keeps serialization deterministic.
pub type QueryConfig = BTreeMap<String, QuerySpec>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Keyword,
    Template,
    Definition,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Keyword => "keyword",
            Strategy::Template => "template",
            Strategy::Definition => "definition",
        };
        f.write_str(s)
    }
}

/// Builds the query text for one entity type under the given strategy.
pub fn build_query_text(
    entity_type: &str,
    config: &QueryConfig,
    strategy: Strategy,
) -> Result<String, QueryError> {
    let spec = config
        .get(entity_type)
        .ok_or_else(|| QueryError::MissingSpec(entity_type.to_string()))?;
    Ok(match strategy {
        Strategy::Keyword => spec.keyword.clone(),
        Strategy::Template => spec.template.replace("{}", &spec.keyword),
        Strategy::Definition => format!("找出{}：{}", spec.keyword, spec.definition),
    })
}

/// Builds the query as character tokens.
pub fn build_query(
    entity_type: &str,
    config: &QueryConfig,
    strategy: Strategy,
) -> Result<Vec<String>, QueryError> {
    Ok(build_query_text(entity_type, config, strategy)?
        .chars()
        .map(|c| c.to_string())
        .collect())
}

/// One (query, context) training/evaluation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcInstance {
    /// `[CLS] q_1..q_m [SEP] x_1..x_k` where `x` is the (possibly truncated)
    /// context.
    pub combined_tokens: Vec<String>,
    /// Binary start labels over combined positions.
    pub y_start: Vec<u8>,
    /// Binary end labels over combined positions.
    pub y_end: Vec<u8>,
    /// Index of the first context token (= m + 2).
    pub context_offset: usize,
    /// Number of context tokens retained after truncation.
    pub context_len: usize,
    pub entity_type: String,
    pub doc_id: String,
    /// Gold spans of this type inside the retained context, context-relative.
    pub gold_spans: Vec<(usize, usize)>,
    /// Gold entities of this type lost to truncation.
    pub truncated_gold: usize,
}

impl MrcInstance {
    pub fn segment_ids(&self) -> Vec<u8> {
        (0..self.combined_tokens.len())
            .map(|i| u8::from(i >= self.context_offset))
            .collect()
    }
}

/// Builds one instance per registered type for a sentence. The context is
/// truncated to `max_len - m - 2`; entities crossing the truncation boundary
/// are dropped from the labels (they stay in the evaluation reference).
pub fn build_instances(
    sentence: &TaggedSentence,
    registry: &EntityTypeRegistry,
    config: &QueryConfig,
    strategy: Strategy,
    max_len: usize,
) -> Result<Vec<MrcInstance>, QueryError> {
    let mut out = Vec::with_capacity(registry.types.len());
    for ty in &registry.types {
        out.push(build_instance(sentence, ty, config, strategy, max_len)?);
    }
    Ok(out)
}

/// Builds the instance for a single entity type.
pub fn build_instance(
    sentence: &TaggedSentence,
    entity_type: &str,
    config: &QueryConfig,
    strategy: Strategy,
    max_len: usize,
) -> Result<MrcInstance, QueryError> {
    let query = build_query(entity_type, config, strategy)?;
    let m = query.len();
    let needed = m + 3; // CLS + query + SEP + at least one context token
    if needed > max_len {
        return Err(QueryError::QueryTooLong {
            entity_type: entity_type.to_string(),
            needed,
            max_len,
        });
    }
    let context_offset = m + 2;
    let context_len = sentence.tokens.len().min(max_len - context_offset);

    let mut combined = Vec::with_capacity(context_offset + context_len);
    combined.push(CLS.to_string());
    combined.extend(query);
    combined.push(SEP.to_string());
    combined.extend(sentence.tokens.iter().take(context_len).cloned());

    let total = combined.len();
    let mut y_start = vec![0u8; total];
    let mut y_end = vec![0u8; total];
    let mut gold_spans = Vec::new();
    let mut truncated_gold = 0usize;
    for e in sentence.sorted_entities() {
        if e.entity_type != entity_type {
            continue;
        }
        if e.end < context_len {
            y_start[context_offset + e.start] = 1;
            y_end[context_offset + e.end] = 1;
            gold_spans.push((e.start, e.end));
        } else {
            truncated_gold += 1;
        }
    }
    Ok(MrcInstance {
        combined_tokens: combined,
        y_start,
        y_end,
        context_offset,
        context_len,
        entity_type: entity_type.to_string(),
        doc_id: sentence.doc_id.clone(),
        gold_spans,
        truncated_gold,
    })
}

/// Maps a span over combined positions back to context-relative positions.
pub fn map_span_to_context(
    combined_span: (usize, usize),
    context_offset: usize,
) -> Result<(usize, usize), QueryError> {
    let (i, j) = combined_span;
    if i < context_offset {
        return Err(QueryError::SpanInQueryRegion {
            start: i,
            end: j,
            offset: context_offset,
        });
    }
    Ok((i - context_offset, j - context_offset))
}

/// Checks that every query spec covers all registered types with non-empty
/// texts for all three strategies.
pub fn validate_query_config(
    config: &QueryConfig,
    registry: &EntityTypeRegistry,
) -> Result<(), QueryError> {
    for ty in &registry.types {
        let spec = config
            .get(ty)
            .ok_or_else(|| QueryError::MissingSpec(ty.clone()))?;
        if spec.keyword.is_empty() || spec.template.is_empty() || spec.definition.is_empty() {
            return Err(QueryError::MissingSpec(ty.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntitySpan;
    use proptest::prelude::*;
    use super::Strategy;

    fn config() -> QueryConfig {
        let mut c = QueryConfig::new();
        c.insert(
            "Date".to_string(),
            QuerySpec {
                keyword: "日期".to_string(),
                template: "找出文中提到的{}".to_string(),
                definition: "是一个在历法中特定的日子".to_string(),
            },
        );
        c.insert(
            "Price".to_string(),
            QuerySpec {
                keyword: "价格".to_string(),
                template: "找出文中提到的{}".to_string(),
                definition: "以货币为表现形式的价值数字".to_string(),
            },
        );
        c
    }

    fn sentence(len: usize, entities: Vec<EntitySpan>) -> TaggedSentence {
        TaggedSentence {
            tokens: (0..len).map(|i| format!("t{i}")).collect(),
            entities,
            doc_id: "d".into(),
        }
    }

    #[test]
    fn definition_query_matches_table_style() {
        let q = build_query_text("Date", &config(), Strategy::Definition).unwrap();
        assert_eq!(q, "找出日期：是一个在历法中特定的日子");
    }

    #[test]
    fn keyword_query_is_keyword_alone() {
        let q = build_query("Date", &config(), Strategy::Keyword).unwrap();
        assert_eq!(q.concat(), "日期");
    }

    #[test]
    fn template_query_fills_slot() {
        let q = build_query_text("Date", &config(), Strategy::Template).unwrap();
        assert_eq!(q, "找出文中提到的日期");
    }

    #[test]
    fn unknown_type_is_config_error() {
        assert!(matches!(
            build_query("UnknownType", &config(), Strategy::Keyword),
            Err(QueryError::MissingSpec(_))
        ));
    }

    #[test]
    fn instance_marks_gold_spans() {
        let s = sentence(
            12,
            vec![EntitySpan::new(1, 3, "Date"), EntitySpan::new(6, 6, "Date")],
        );
        let inst = build_instance(&s, "Date", &config(), Strategy::Definition, 128).unwrap();
        assert_eq!(inst.y_start.iter().map(|&x| x as usize).sum::<usize>(), 2);
        assert_eq!(inst.y_end.iter().map(|&x| x as usize).sum::<usize>(), 2);
        let off = inst.context_offset;
        assert_eq!(inst.y_start[off + 1], 1);
        assert_eq!(inst.y_end[off + 3], 1);
        assert_eq!(inst.y_start[off + 6], 1);
        assert_eq!(inst.y_end[off + 6], 1);
        // no labels inside query or specials
        assert!(inst.y_start[..off].iter().all(|&x| x == 0));
        assert!(inst.y_end[..off].iter().all(|&x| x == 0));
        assert_eq!(inst.gold_spans, vec![(1, 3), (6, 6)]);
    }

    #[test]
    fn absent_type_has_all_zero_labels() {
        let s = sentence(8, vec![EntitySpan::new(2, 4, "Date")]);
        let inst = build_instance(&s, "Price", &config(), Strategy::Definition, 128).unwrap();
        assert!(inst.y_start.iter().all(|&x| x == 0));
        assert!(inst.y_end.iter().all(|&x| x == 0));
    }

    #[test]
    fn one_instance_per_registered_type() {
        let mut reg = EntityTypeRegistry::from_types(["Date", "Price"]);
        let s = sentence(5, vec![]);
        let insts = build_instances(&s, &reg, &config(), Strategy::Keyword, 64).unwrap();
        assert_eq!(insts.len(), 2);
        // instance count tracks the registry size regardless of appearances
        reg.types.pop();
        let insts = build_instances(&s, &reg, &config(), Strategy::Keyword, 64).unwrap();
        assert_eq!(insts.len(), 1);
    }

    #[test]
    fn truncation_drops_boundary_entities() {
        // keyword "日期" -> m=2, offset=4; max_len 10 keeps 6 context tokens
        let s = sentence(
            12,
            vec![EntitySpan::new(1, 2, "Date"), EntitySpan::new(4, 7, "Date")],
        );
        let inst = build_instance(&s, "Date", &config(), Strategy::Keyword, 10).unwrap();
        assert_eq!(inst.context_len, 6);
        assert_eq!(inst.gold_spans, vec![(1, 2)]);
        assert_eq!(inst.truncated_gold, 1);
        assert_eq!(inst.y_start.iter().map(|&x| x as usize).sum::<usize>(), 1);
    }

    #[test]
    fn query_exceeding_max_len_is_error() {
        let s = sentence(4, vec![]);
        assert!(matches!(
            build_instance(&s, "Date", &config(), Strategy::Definition, 8),
            Err(QueryError::QueryTooLong { .. })
        ));
    }

    #[test]
    fn map_span_examples() {
        assert_eq!(map_span_to_context((12, 14), 10).unwrap(), (2, 4));
        assert_eq!(map_span_to_context((10, 10), 10).unwrap(), (0, 0));
        assert!(map_span_to_context((8, 12), 10).is_err());
    }

    #[test]
    fn strategy_changes_only_query_region() {
        let s = sentence(9, vec![EntitySpan::new(2, 5, "Date")]);
        let a = build_instance(&s, "Date", &config(), Strategy::Keyword, 128).unwrap();
        let b = build_instance(&s, "Date", &config(), Strategy::Definition, 128).unwrap();
        assert_ne!(a.context_offset, b.context_offset);
        assert_eq!(a.gold_spans, b.gold_spans);
        assert_eq!(
            &a.combined_tokens[a.context_offset..],
            &b.combined_tokens[b.context_offset..]
        );
    }

    proptest! {
        // start/end label positions, paired in order, reproduce the gold spans
        #[test]
        fn labels_reproduce_gold_geometry(len in 1usize..40, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let mut entities = Vec::new();
            let mut pos = 0usize;
            while pos < len {
                if rng.gen_bool(0.35) {
                    let elen = rng.gen_range(1..=(len - pos).min(5));
                    entities.push(EntitySpan::new(pos, pos + elen - 1, "Date"));
                    pos += elen + 1;
                } else {
                    pos += 1;
                }
            }
            let s = sentence(len, entities.clone());
            let inst = build_instance(&s, "Date", &config(), Strategy::Definition, 256).unwrap();
            let off = inst.context_offset;
            let starts: Vec<usize> = inst.y_start.iter().enumerate()
                .filter(|(_, &v)| v == 1).map(|(i, _)| i - off).collect();
            let ends: Vec<usize> = inst.y_end.iter().enumerate()
                .filter(|(_, &v)| v == 1).map(|(i, _)| i - off).collect();
            let paired: Vec<(usize, usize)> = starts.into_iter().zip(ends).collect();
            let gold: Vec<(usize, usize)> = entities.iter().map(|e| (e.start, e.end)).collect();
            prop_assert_eq!(paired, gold);
        }
    }
}
