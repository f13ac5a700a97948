//! Built-in synthetic corpus presets with matching registries and query
//! configurations.
//!
//! `finance_basic` is a seven-type corpus with distinct surface grammars.
//! `ambiguity` contains two types that share a surface form and differ only
//! in a contextual cue, which the definition queries quote; it also carries
//! long institution names that punish per-token exact-match decoding.

use std::collections::BTreeMap;

use crate::corpus::EntityTypeRegistry;
use crate::query::{QueryConfig, QuerySpec};
use crate::synth::{PatternPart, Segment, SlotSpec, SurfacePattern, SynthSpec, Template};

fn lit(s: &str) -> Segment {
    Segment::Lit(s.to_string())
}

fn slot(ty: &str) -> Segment {
    Segment::Slot(SlotSpec::Fixed(ty.to_string()))
}

fn choice(opts: &[&str]) -> PatternPart {
    PatternPart::Choice(opts.iter().map(|s| s.to_string()).collect())
}

fn digits(min: usize, max: usize) -> PatternPart {
    PatternPart::Digits { min, max }
}

fn chars(pool: &str, min: usize, max: usize) -> PatternPart {
    PatternPart::Chars {
        pool: pool.chars().map(|c| c.to_string()).collect(),
        min,
        max,
    }
}

fn pattern(parts: Vec<PatternPart>) -> SurfacePattern {
    SurfacePattern { parts }
}

fn template(segments: Vec<Segment>, weight: f64) -> Template {
    Template { segments, weight }
}

fn spec(ty: &str, keyword: &str, definition: &str) -> (String, QuerySpec) {
    (
        ty.to_string(),
        QuerySpec {
            keyword: keyword.to_string(),
            template: "找出文中提到的{}".to_string(),
            definition: definition.to_string(),
        },
    )
}

/// Seven-type financial corpus with unambiguous, learnable surface patterns.
pub fn finance_basic(sentence_count: usize) -> (SynthSpec, EntityTypeRegistry, QueryConfig) {
    let mut patterns = BTreeMap::new();
    patterns.insert(
        "Date".to_string(),
        pattern(vec![
            digits(4, 4),
            PatternPart::Lit("年".into()),
            digits(1, 2),
            PatternPart::Lit("月".into()),
            digits(1, 2),
            PatternPart::Lit("日".into()),
        ]),
    );
    patterns.insert(
        "Price".to_string(),
        pattern(vec![
            digits(1, 3),
            PatternPart::Lit(".".into()),
            digits(2, 2),
            PatternPart::Lit("元".into()),
        ]),
    );
    patterns.insert(
        "Shares".to_string(),
        pattern(vec![digits(2, 5), PatternPart::Lit("股".into())]),
    );
    patterns.insert(
        "Ratio".to_string(),
        pattern(vec![
            digits(1, 2),
            PatternPart::Lit(".".into()),
            digits(1, 2),
            PatternPart::Lit("%".into()),
        ]),
    );
    patterns.insert(
        "Code".to_string(),
        pattern(vec![choice(&["SH", "SZ"]), digits(6, 6)]),
    );
    patterns.insert(
        "Org".to_string(),
        pattern(vec![
            choice(&["华夏", "国泰", "南方", "嘉实", "易方"]),
            choice(&["银行", "证券", "基金", "信托"]),
        ]),
    );
    patterns.insert(
        "Amount".to_string(),
        pattern(vec![digits(1, 3), PatternPart::Lit("万元".into())]),
    );

    let templates = vec![
        template(
            vec![
                lit("公司于"),
                slot("Date"),
                lit("以"),
                slot("Price"),
                lit("收购"),
                slot("Org"),
                lit("。"),
            ],
            2.0,
        ),
        template(
            vec![
                lit("股东减持"),
                slot("Shares"),
                lit("，占比"),
                slot("Ratio"),
                lit("。"),
            ],
            2.0,
        ),
        template(
            vec![slot("Org"), lit("发布"), slot("Code"), lit("公告。")],
            2.0,
        ),
        template(
            vec![
                lit("交易金额为"),
                slot("Amount"),
                lit("，定于"),
                slot("Date"),
                lit("完成。"),
            ],
            2.0,
        ),
        template(
            vec![lit("今日"), slot("Code"), lit("报"), slot("Price"), lit("。")],
            2.0,
        ),
        template(
            vec![
                slot("Org"),
                lit("持有"),
                slot("Shares"),
                lit("，市值"),
                slot("Amount"),
                lit("。"),
            ],
            1.0,
        ),
        template(
            vec![lit("截至"), slot("Date"), lit("，持股比例为"), slot("Ratio"), lit("。")],
            1.0,
        ),
    ];

    let synth = SynthSpec {
        sentence_count,
        patterns,
        templates,
        type_profile: Vec::new(),
    };
    let registry = EntityTypeRegistry::from_types([
        "Date", "Price", "Shares", "Ratio", "Code", "Org", "Amount",
    ]);
    let queries: QueryConfig = [
        spec("Date", "日期", "是一个在历法中特定的日子"),
        spec("Price", "价格", "商品或证券交易时的金额数值"),
        spec("Shares", "股数", "持有或交易的股票数量"),
        spec("Ratio", "比例", "两个数量之间的百分比关系"),
        spec("Code", "代码", "交易所为证券分配的编号"),
        spec("Org", "机构", "银行证券基金等金融组织的名称"),
        spec("Amount", "金额", "以万元计的资金总数"),
    ]
    .into_iter()
    .collect();
    (synth, registry, queries)
}

/// Pool the long organization middles are drawn from; middles are near-unique
/// per sentence, so per-token tagging cannot memorize them.
const ORG_POOL: &str = "宏远安信创元启图华泰金鼎盛世恒通达博瑞祥";

/// Corpus where `Buy` and `Sell` prices share a surface form and differ only
/// by the 买入/卖出 cue before the span; the definition queries quote the cue,
/// the keyword queries are deliberately identical. Organization names are
/// long with randomized middles, so an entity hit costs the tagger ~18
/// consecutive correct tags but the span model only two boundary decisions.
pub fn ambiguity(sentence_count: usize) -> (SynthSpec, EntityTypeRegistry, QueryConfig) {
    let mut patterns = BTreeMap::new();
    let price = pattern(vec![digits(1, 3), PatternPart::Lit("元".into())]);
    patterns.insert("Buy".to_string(), price.clone());
    patterns.insert("Sell".to_string(), price);
    patterns.insert(
        "Org".to_string(),
        pattern(vec![
            choice(&["北京", "上海", "深圳", "广州"]),
            chars(ORG_POOL, 8, 8),
            choice(&["投资管理有限公司", "证券股份有限公司", "资产管理有限公司"]),
        ]),
    );
    patterns.insert(
        "Date".to_string(),
        pattern(vec![
            digits(4, 4),
            PatternPart::Lit("年".into()),
            digits(1, 2),
            PatternPart::Lit("月".into()),
            digits(1, 2),
            PatternPart::Lit("日".into()),
        ]),
    );
    // rare cued types whose surfaces collide with the common price surface;
    // the tagger must split them across its tag inventory from a handful of
    // examples, the span model reuses its shared boundary heads plus the
    // keyword cue present verbatim in the sentence
    patterns.insert(
        "Fee".to_string(),
        pattern(vec![digits(1, 2), PatternPart::Lit(".".into()), digits(2, 2), PatternPart::Lit("元".into())]),
    );
    patterns.insert(
        "Rate".to_string(),
        pattern(vec![digits(1, 2), PatternPart::Lit(".".into()), digits(1, 1), PatternPart::Lit("%".into())]),
    );
    patterns.insert(
        "Margin".to_string(),
        pattern(vec![digits(1, 3), PatternPart::Lit("万元".into())]),
    );
    patterns.insert(
        "Lot".to_string(),
        pattern(vec![digits(1, 3), PatternPart::Lit("手".into())]),
    );

    // weights keep Buy/Sell a minority so the identical-keyword handicap
    // caps but does not dominate keyword-strategy F1
    let templates = vec![
        template(
            vec![
                lit("客户买入"),
                slot("Buy"),
                lit("，随后卖出"),
                slot("Sell"),
                lit("。"),
            ],
            0.8,
        ),
        template(vec![lit("客户买入"), slot("Buy"), lit("。")], 0.4),
        template(vec![lit("客户卖出"), slot("Sell"), lit("。")], 0.4),
        template(
            vec![
                lit("相关机构"),
                slot("Org"),
                lit("于日期"),
                slot("Date"),
                lit("发布公告。"),
            ],
            5.0,
        ),
        template(
            vec![
                lit("经机构"),
                slot("Org"),
                lit("确认，客户卖出"),
                slot("Sell"),
                lit("。"),
            ],
            0.8,
        ),
        // entity-free distractor built from the same character pool
        template(
            vec![
                lit("备注："),
                Segment::LitChoice(
                    ["宏远恒通", "金鼎盛世", "博瑞祥达", "华泰创元", "安信启图"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                ),
                lit("项目待审。"),
            ],
            0.8,
        ),
        template(vec![lit("本次交易手续费为"), slot("Fee"), lit("。")], 0.45),
        template(vec![lit("债券票面利率为"), slot("Rate"), lit("。")], 0.45),
        template(vec![lit("账户保证金为"), slot("Margin"), lit("。")], 0.45),
        template(vec![lit("今日成交手数为"), slot("Lot"), lit("。")], 0.45),
    ];

    let synth = SynthSpec {
        sentence_count,
        patterns,
        templates,
        type_profile: Vec::new(),
    };
    let registry = EntityTypeRegistry::from_types([
        "Buy", "Sell", "Org", "Date", "Fee", "Rate", "Margin", "Lot",
    ]);
    let queries: QueryConfig = [
        // identical keywords: indistinguishable without query semantics
        spec("Buy", "价格", "在买入操作中成交的金额"),
        spec("Sell", "价格", "在卖出操作中成交的金额"),
        spec("Org", "机构", "是一家公司或组织的完整名称"),
        spec("Date", "日期", "是一个在历法中特定的日子"),
        spec("Fee", "手续费", "在交易中支付的手续费金额"),
        spec("Rate", "利率", "债券的票面利率数值"),
        spec("Margin", "保证金", "账户中存入的保证金金额"),
        spec("Lot", "手数", "本次成交的合约手数"),
    ]
    .into_iter()
    .collect();
    (synth, registry, queries)
}

/// Named preset lookup for the CLI.
pub fn by_name(name: &str, sentence_count: usize) -> Option<(SynthSpec, EntityTypeRegistry, QueryConfig)> {
    match name {
        "finance_basic" => Some(finance_basic(sentence_count)),
        "ambiguity" => Some(ambiguity(sentence_count)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::corpus_stats;
    use crate::query::validate_query_config;
    use crate::synth::generate_synthetic;

    #[test]
    fn finance_basic_generates_all_types() {
        let (synth, registry, queries) = finance_basic(300);
        validate_query_config(&queries, &registry).unwrap();
        let sents = generate_synthetic(&synth, 1).unwrap();
        assert_eq!(sents.len(), 300);
        let stats = corpus_stats(&sents);
        for ty in &registry.types {
            assert!(
                stats.per_type.iter().any(|t| &t.entity_type == ty && t.count > 0),
                "type {ty} never generated"
            );
        }
    }

    #[test]
    fn ambiguity_buy_sell_share_surface() {
        let (synth, registry, queries) = ambiguity(200);
        validate_query_config(&queries, &registry).unwrap();
        assert_eq!(queries["Buy"].keyword, queries["Sell"].keyword);
        assert_ne!(queries["Buy"].definition, queries["Sell"].definition);
        let sents = generate_synthetic(&synth, 2).unwrap();
        // every Buy/Sell surface ends in 元 and is digits before that
        for s in &sents {
            for e in &s.entities {
                if e.entity_type == "Buy" || e.entity_type == "Sell" {
                    assert_eq!(s.tokens[e.end], "元");
                    for t in &s.tokens[e.start..e.end] {
                        assert!(t.chars().all(|c| c.is_ascii_digit()));
                    }
                }
            }
        }
        // long Org entities exist (exact-match hard for per-token tagging)
        let max_org = sents
            .iter()
            .flat_map(|s| s.entities.iter())
            .filter(|e| e.entity_type == "Org")
            .map(|e| e.len())
            .max()
            .unwrap();
        assert!(max_org >= 12, "org length {max_org}");
    }

    #[test]
    fn preset_lookup() {
        assert!(by_name("finance_basic", 5).is_some());
        assert!(by_name("ambiguity", 5).is_some());
        assert!(by_name("nope", 5).is_none());
    }
}
