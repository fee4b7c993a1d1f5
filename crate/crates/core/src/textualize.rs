//! Item and behavior-sequence textualization.
//!
//! An item becomes a string of attribute segments in a fixed order, e.g.
//! `(category: Books) Dune (brand: Ace) (price: 9.99)`. A history becomes a
//! prompted sequence of item strings where masked items are replaced by
//! sentinel tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, Item};
use crate::error::{Error, Result};

pub const DEFAULT_PROMPT_PREFIX: &str = "Given the following purchase history of user: ";
pub const DEFAULT_PROMPT_SUFFIX: &str = ", predict masked item purchased by the user?";
pub const DEFAULT_DELIMITER: &str = ", ";
pub const DEFAULT_ITEM_TOKEN_CAP: usize = 40;
pub const DEFAULT_SEQUENCE_TOKEN_CAP: usize = 512;

pub fn sentinel(i: usize) -> String {
    format!("<extra_id_{i}>")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Category,
    Title,
    Brand,
    Price,
    Description,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Category,
        Attribute::Title,
        Attribute::Brand,
        Attribute::Price,
        Attribute::Description,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Category => "category",
            Attribute::Title => "title",
            Attribute::Brand => "brand",
            Attribute::Price => "price",
            Attribute::Description => "description",
        }
    }

    /// Rendered value of this attribute on `item`, if present. Prices use two decimals.
    pub fn value(self, item: &Item) -> Option<String> {
        match self {
            Attribute::Category => item.category.clone(),
            Attribute::Title => item.title.clone(),
            Attribute::Brand => item.brand.clone(),
            Attribute::Price => item.price.map(|p| format!("{p:.2}")),
            Attribute::Description => item.description.clone(),
        }
    }

    /// Default segment template; `{value}` is substituted.
    pub fn default_template(self) -> String {
        match self {
            Attribute::Title => "{value}".to_string(),
            other => format!("({}: {{value}})", other.name()),
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownAttribute(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    VeryLow,
    Low,
    Medium,
    High,
    VeryHigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Usage {
    PretrainAndTune,
    TuneOnly,
}

/// Qualitative indicator levels of an attribute plus its place in the
/// coarse-to-fine ordering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeProfile {
    pub attribute: Attribute,
    pub naturalness: Level,
    pub domain_consistency: Level,
    pub informativeness: Level,
    pub noise_ambiguity: Level,
    pub text_length: Level,
    /// Lower is coarser.
    pub granularity_rank: u32,
    pub usage: Usage,
}

pub fn default_profiles() -> Vec<AttributeProfile> {
    use Level::*;
    let p = |attribute, levels: [Level; 5], granularity_rank, usage| AttributeProfile {
        attribute,
        naturalness: levels[0],
        domain_consistency: levels[1],
        informativeness: levels[2],
        noise_ambiguity: levels[3],
        text_length: levels[4],
        granularity_rank,
        usage,
    };
    vec![
        p(Attribute::Category, [Medium, High, Medium, Medium, Low], 0, Usage::PretrainAndTune),
        p(Attribute::Title, [High, High, High, Medium, High], 1, Usage::PretrainAndTune),
        p(Attribute::Brand, [Medium, Medium, Medium, Low, Medium], 2, Usage::TuneOnly),
        p(Attribute::Price, [Low, Medium, Medium, VeryLow, Low], 3, Usage::TuneOnly),
        p(Attribute::Description, [High, Medium, High, High, VeryHigh], 4, Usage::TuneOnly),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingPolicy {
    /// Ascending granularity rank.
    #[default]
    Granularity,
    /// Keep the order the attributes were listed in.
    AsGiven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextualizationConfig {
    pub stage: Stage,
    pub attributes: Vec<Attribute>,
    pub templates: BTreeMap<Attribute, String>,
    pub delimiter: String,
    pub prompt_prefix: String,
    pub prompt_suffix: String,
    pub item_token_cap: usize,
    pub sequence_token_cap: usize,
}

/// Attributes whose profile allows use in `stage`, coarse to fine.
pub fn default_config(stage: Stage) -> TextualizationConfig {
    let profiles = default_profiles();
    let selected: Vec<Attribute> = profiles
        .iter()
        .filter(|p| stage == Stage::Finetune || p.usage == Usage::PretrainAndTune)
        .map(|p| p.attribute)
        .collect();
    let attributes = order_attributes(&selected, &profiles).expect("profiles cover every attribute");
    TextualizationConfig::new(stage, attributes)
}

impl TextualizationConfig {
    pub fn new(stage: Stage, attributes: Vec<Attribute>) -> Self {
        TextualizationConfig {
            stage,
            attributes,
            templates: Attribute::ALL.into_iter().map(|a| (a, a.default_template())).collect(),
            delimiter: DEFAULT_DELIMITER.to_string(),
            prompt_prefix: DEFAULT_PROMPT_PREFIX.to_string(),
            prompt_suffix: DEFAULT_PROMPT_SUFFIX.to_string(),
            item_token_cap: DEFAULT_ITEM_TOKEN_CAP,
            sequence_token_cap: DEFAULT_SEQUENCE_TOKEN_CAP,
        }
    }

    /// Builds a config from an attribute list, optionally reordering it coarse to fine.
    pub fn with_attributes(stage: Stage, attributes: &[Attribute], policy: OrderingPolicy) -> Result<Self> {
        let attributes = match policy {
            OrderingPolicy::Granularity => order_attributes(attributes, &default_profiles())?,
            OrderingPolicy::AsGiven => attributes.to_vec(),
        };
        Ok(TextualizationConfig::new(stage, attributes))
    }

    fn template(&self, attr: Attribute) -> String {
        self.templates.get(&attr).cloned().unwrap_or_else(|| attr.default_template())
    }
}

/// Sorts attributes by ascending granularity rank; duplicates are dropped.
pub fn order_attributes(attributes: &[Attribute], profiles: &[AttributeProfile]) -> Result<Vec<Attribute>> {
    let mut ranked = Vec::with_capacity(attributes.len());
    for &a in attributes {
        let profile = profiles
            .iter()
            .find(|p| p.attribute == a)
            .ok_or_else(|| Error::UnknownAttribute(a.name().to_string()))?;
        ranked.push((profile.granularity_rank, a));
    }
    ranked.sort();
    ranked.dedup();
    Ok(ranked.into_iter().map(|(_, a)| a).collect())
}

/// Renders the selected attributes of `item`, skipping absent ones.
pub fn item_text(item: &Item, config: &TextualizationConfig) -> Result<String> {
    let segments: Vec<String> = config
        .attributes
        .iter()
        .filter_map(|&attr| {
            attr.value(item)
                .map(|v| config.template(attr).replace("{value}", v.trim()))
        })
        .collect();
    if segments.is_empty() {
        return Err(Error::EmptyItemText(item.item_id.clone()));
    }
    Ok(segments.join(" ").trim().to_string())
}

/// Every item text under each config plus the prompt pieces, for building a
/// vocabulary that covers all stages. Items with no selected attribute are skipped.
pub fn vocabulary_texts(catalog: &Catalog, configs: &[&TextualizationConfig]) -> Vec<String> {
    let mut out = Vec::new();
    for cfg in configs {
        out.push(cfg.prompt_prefix.clone());
        out.push(cfg.prompt_suffix.clone());
        out.push(cfg.delimiter.clone());
        out.extend(catalog.values().filter_map(|item| item_text(item, cfg).ok()));
    }
    out
}

/// Recovers attribute values from a string rendered with the default
/// templates. Values must not contain parentheses.
pub fn parse_item_text(text: &str) -> BTreeMap<Attribute, String> {
    let mut out = BTreeMap::new();
    let mut rest = text.trim();
    while !rest.is_empty() {
        if let Some(inner) = rest.strip_prefix('(') {
            let close = match inner.find(')') {
                Some(c) => c,
                None => break,
            };
            let segment = &inner[..close];
            if let Some((name, value)) = segment.split_once(": ") {
                if let Ok(attr) = name.parse::<Attribute>() {
                    out.insert(attr, value.to_string());
                }
            }
            rest = inner[close + 1..].trim_start();
        } else {
            let end = rest.find(" (").unwrap_or(rest.len());
            out.insert(Attribute::Title, rest[..end].to_string());
            rest = rest[end..].trim_start();
        }
    }
    out
}

/// One position of a prompted sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Slot<'a> {
    Item(&'a str),
    Masked,
}

/// Replaces the texts at `masked` (0-based) positions with mask slots.
pub fn mask_slots<'a, S: AsRef<str>>(texts: &'a [S], masked: &[usize]) -> Vec<Slot<'a>> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if masked.contains(&i) {
                Slot::Masked
            } else {
                Slot::Item(t.as_ref())
            }
        })
        .collect()
}

/// Assembles the prompt; masked slots receive sentinels 0, 1, ... left to right.
pub fn sequence_text(slots: &[Slot<'_>], config: &TextualizationConfig) -> Result<String> {
    if slots.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut next_sentinel = 0;
    let parts: Vec<String> = slots
        .iter()
        .map(|slot| match slot {
            Slot::Item(text) => text.to_string(),
            Slot::Masked => {
                let s = sentinel(next_sentinel);
                next_sentinel += 1;
                s
            }
        })
        .collect();
    Ok(format!(
        "{}{}{}",
        config.prompt_prefix,
        parts.join(&config.delimiter),
        config.prompt_suffix
    ))
}
