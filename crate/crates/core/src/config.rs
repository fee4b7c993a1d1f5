//! Declarative run configuration shared by the CLI and the Python bindings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_KS, DEFAULT_N_NEGATIVES};
use crate::mitp::TrainConfig;
use crate::model::ModelConfig;
use crate::seed;
use crate::textualize::{
    default_config, Attribute, OrderingPolicy, Stage, TextualizationConfig, DEFAULT_DELIMITER, DEFAULT_ITEM_TOKEN_CAP,
    DEFAULT_PROMPT_PREFIX, DEFAULT_PROMPT_SUFFIX, DEFAULT_SEQUENCE_TOKEN_CAP,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization, training and negative sampling.
    pub seed: u64,
    pub paths: PathsConfig,
    pub synthetic: SyntheticConfig,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub model: ModelBlock,
    pub text: TextBlock,
    pub train: TrainBlock,
    pub pretrain: PretrainBlock,
    pub finetune: FinetuneBlock,
    pub eval: EvalBlock,
    pub ablate: AblateBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: PathsConfig::default(),
            synthetic: SyntheticConfig::default(),
            data: DataConfig::default(),
            vocab: VocabConfig::default(),
            model: ModelBlock::default(),
            text: TextBlock::default(),
            train: TrainBlock::default(),
            pretrain: PretrainBlock::default(),
            finetune: FinetuneBlock::default(),
            eval: EvalBlock::default(),
            ablate: AblateBlock::default(),
        }
    }
}

/// Unset paths resolve inside `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub items: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub finetuned: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs"),
            items: None,
            interactions: None,
            manifest: None,
            vocab: None,
            pretrained: None,
            finetuned: None,
        }
    }
}

impl PathsConfig {
    fn or_out(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn items(&self) -> PathBuf {
        self.or_out(&self.items, "items.jsonl")
    }

    pub fn interactions(&self) -> PathBuf {
        self.or_out(&self.interactions, "interactions.jsonl")
    }

    pub fn manifest(&self) -> PathBuf {
        self.or_out(&self.manifest, "manifest.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.or_out(&self.vocab, "vocab.txt")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.or_out(&self.pretrained, "pretrain.ckpt")
    }

    pub fn finetuned(&self) -> PathBuf {
        self.or_out(&self.finetuned, "finetune.ckpt")
    }

    pub fn reports(&self) -> PathBuf {
        self.out_dir.join("reports")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Minimum interactions per user and per item, applied per domain.
    pub kcore: usize,
    /// Domain for finetuning and evaluation; defaults to the first domain by name.
    pub target_domain: Option<String>,
    /// Domains used for pretraining; defaults to every domain.
    pub pretrain_domains: Option<Vec<String>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kcore: 5,
            target_domain: None,
            pretrain_domains: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_freq: 1,
            max_size: 16384,
        }
    }
}

/// Model shape; the vocabulary size comes from the vocabulary file and the
/// seed from the top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub init_std: f64,
}

impl Default for ModelBlock {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelBlock {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_ff: m.d_ff,
            max_positions: m.max_positions,
            dropout_rate: m.dropout_rate,
            init_std: m.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextBlock {
    pub pretrain_attributes: Vec<Attribute>,
    pub finetune_attributes: Vec<Attribute>,
    pub ordering: OrderingPolicy,
    pub templates: BTreeMap<Attribute, String>,
    pub delimiter: String,
    pub prompt_prefix: String,
    pub prompt_suffix: String,
    pub item_token_cap: usize,
    pub sequence_token_cap: usize,
}

impl Default for TextBlock {
    fn default() -> Self {
        TextBlock {
            pretrain_attributes: default_config(Stage::Pretrain).attributes,
            finetune_attributes: default_config(Stage::Finetune).attributes,
            ordering: OrderingPolicy::Granularity,
            templates: Attribute::ALL.into_iter().map(|a| (a, a.default_template())).collect(),
            delimiter: DEFAULT_DELIMITER.to_string(),
            prompt_prefix: DEFAULT_PROMPT_PREFIX.to_string(),
            prompt_suffix: DEFAULT_PROMPT_SUFFIX.to_string(),
            item_token_cap: DEFAULT_ITEM_TOKEN_CAP,
            sequence_token_cap: DEFAULT_SEQUENCE_TOKEN_CAP,
        }
    }
}

/// Optimization settings shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    pub mask_ratio: f64,
    pub last_only_fraction: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub domain_weights: Option<BTreeMap<String, f64>>,
    pub valid_max_instances: Option<usize>,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::pretrain();
        TrainBlock {
            mask_ratio: t.mask_ratio,
            last_only_fraction: t.last_only_fraction,
            lr: t.lr,
            weight_decay: t.weight_decay,
            patience: t.patience,
            domain_weights: None,
            valid_max_instances: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainBlock {
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for PretrainBlock {
    fn default() -> Self {
        let t = TrainConfig::pretrain();
        PretrainBlock {
            batch_size: t.batch_size,
            epochs: t.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneBlock {
    pub batch_size: usize,
    /// Upper bound; early stopping usually ends the run sooner.
    pub epochs: usize,
}

impl Default for FinetuneBlock {
    fn default() -> Self {
        let t = TrainConfig::finetune();
        FinetuneBlock {
            batch_size: t.batch_size,
            epochs: t.epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Model,
    Popularity,
    Markov,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    pub ks: Vec<usize>,
    pub n_negatives: usize,
    /// Drop test instances whose positive never occurs in the training split.
    pub filter_untrained: bool,
    /// Seeded subset of test instances; `None` keeps all.
    pub max_instances: Option<usize>,
    pub scorer: ScorerKind,
    pub retriever: ScorerKind,
    pub rerank_sizes: Vec<usize>,
    pub next_k: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            ks: DEFAULT_KS.to_vec(),
            n_negatives: DEFAULT_N_NEGATIVES,
            filter_untrained: true,
            max_instances: None,
            scorer: ScorerKind::Model,
            retriever: ScorerKind::Markov,
            rerank_sizes: vec![100, 200, 300],
            next_k: 3,
        }
    }
}

/// One textualization variant. Without `pretrain_attributes` the variant is
/// trained on the target domain from a fresh initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub pretrain_attributes: Option<Vec<Attribute>>,
    pub finetune_attributes: Vec<Attribute>,
    #[serde(default)]
    pub ordering: OrderingPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateBlock {
    pub variants: Vec<Variant>,
}

impl Default for AblateBlock {
    fn default() -> Self {
        use Attribute::*;
        let v = |name: &str, pre: &[Attribute], fine: &[Attribute]| Variant {
            name: name.to_string(),
            pretrain_attributes: Some(pre.to_vec()),
            finetune_attributes: fine.to_vec(),
            ordering: OrderingPolicy::Granularity,
        };
        AblateBlock {
            variants: vec![
                v("T", &[Title], &[Title]),
                v("T+C", &[Category, Title], &[Category, Title]),
                v("T+C+D", &[Category, Title], &[Category, Title, Brand, Price, Description]),
            ],
        }
    }
}

impl RunConfig {
    /// Parses JSON, naming the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.data.kcore == 0 {
            return bad("data.kcore must be at least 1".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must be non-empty and positive".into());
        }
        if self.eval.n_negatives == 0 {
            return bad("eval.n_negatives must be positive".into());
        }
        if self.eval.next_k == 0 {
            return bad("eval.next_k must be positive".into());
        }
        if !matches!(self.eval.retriever, ScorerKind::Markov | ScorerKind::Popularity) {
            return bad("eval.retriever must be `markov` or `popularity`".into());
        }
        if self.model.max_positions < self.text.sequence_token_cap {
            return bad(format!(
                "model.max_positions ({}) is below text.sequence_token_cap ({})",
                self.model.max_positions, self.text.sequence_token_cap
            ));
        }
        if self.text.item_token_cap == 0 || self.text.pretrain_attributes.is_empty() || self.text.finetune_attributes.is_empty() {
            return bad("text: attribute lists and item_token_cap must be non-empty".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for v in &self.ablate.variants {
            if !names.insert(&v.name) || v.name.is_empty() || v.name.contains(['/', '\\']) {
                return bad(format!("ablate: variant name `{}` is empty, repeated or contains a path separator", v.name));
            }
            if v.finetune_attributes.is_empty() || v.pretrain_attributes.as_ref().is_some_and(|p| p.is_empty()) {
                return bad(format!("ablate: variant `{}` selects no attributes", v.name));
            }
        }
        self.train_config(Stage::Pretrain).validate()?;
        self.train_config(Stage::Finetune).validate()?;
        self.model_config(1000).validate()
    }

    /// Hash of every setting except paths, so relocating a run keeps its fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        seed::fingerprint(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_ff: m.d_ff,
            vocab_size,
            max_positions: m.max_positions,
            dropout_rate: m.dropout_rate,
            seed: self.seed,
            init_std: m.init_std,
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let t = &self.train;
        let (batch_size, epochs) = match stage {
            Stage::Pretrain => (self.pretrain.batch_size, self.pretrain.epochs),
            Stage::Finetune => (self.finetune.batch_size, self.finetune.epochs),
        };
        TrainConfig {
            stage,
            mask_ratio: t.mask_ratio,
            last_only_fraction: t.last_only_fraction,
            batch_size,
            epochs,
            lr: t.lr,
            weight_decay: t.weight_decay,
            patience: t.patience,
            seed: self.seed,
            domain_weights: t.domain_weights.clone(),
            valid_max_instances: t.valid_max_instances,
        }
    }

    /// Textualization for `stage` with the configured attributes.
    pub fn text_config(&self, stage: Stage) -> Result<TextualizationConfig> {
        let attrs = match stage {
            Stage::Pretrain => &self.text.pretrain_attributes,
            Stage::Finetune => &self.text.finetune_attributes,
        };
        self.text_config_with(stage, attrs, self.text.ordering)
    }

    /// Textualization for `stage` with an explicit attribute list and ordering.
    pub fn text_config_with(&self, stage: Stage, attrs: &[Attribute], ordering: OrderingPolicy) -> Result<TextualizationConfig> {
        let mut c = TextualizationConfig::with_attributes(stage, attrs, ordering)?;
        let t = &self.text;
        c.templates.extend(t.templates.iter().map(|(a, s)| (*a, s.clone())));
        c.delimiter = t.delimiter.clone();
        c.prompt_prefix = t.prompt_prefix.clone();
        c.prompt_suffix = t.prompt_suffix.clone();
        c.item_token_cap = t.item_token_cap;
        c.sequence_token_cap = t.sequence_token_cap;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn default_constants_appear_once() {
        let json = RunConfig::default().to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["train"]["mask_ratio"], 0.1);
        assert_eq!(v["train"]["lr"], 3e-4);
        assert_eq!(v["pretrain"]["batch_size"], 128);
        assert_eq!(v["finetune"]["batch_size"], 64);
        assert_eq!(v["pretrain"]["epochs"], 20);
        assert_eq!(v["eval"]["n_negatives"], 100);
        assert_eq!(v["text"]["item_token_cap"], 40);
        assert_eq!(v["text"]["sequence_token_cap"], 512);
        assert_eq!(v["data"]["kcore"], 5);
        for key in [
            "\"mask_ratio\"",
            "\"last_only_fraction\"",
            "\"lr\"",
            "\"item_token_cap\"",
            "\"sequence_token_cap\"",
            "\"n_negatives\"",
            "\"kcore\"",
            "\"next_k\"",
        ] {
            assert_eq!(json.matches(key).count(), 1, "{key}");
        }
        assert_eq!(json.matches("\"batch_size\"").count(), 2);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"train": {"mask_ration": 0.2}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("mask_ration") && msg.contains("train"), "{msg}");
        let err = RunConfig::from_json(r#"{"seeed": 1}"#).unwrap_err();
        assert!(err.to_string().contains("seeed"));
    }

    #[test]
    fn partial_blocks_keep_other_defaults() {
        let cfg = RunConfig::from_json(r#"{"finetune": {"epochs": 3}, "synthetic": {"n_users": 30}}"#).unwrap();
        assert_eq!(cfg.finetune.batch_size, 64);
        assert_eq!(cfg.finetune.epochs, 3);
        assert_eq!(cfg.synthetic.n_items_per_domain, 2000);
        assert_eq!(cfg.synthetic.n_users, 30);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            r#"{"train": {"mask_ratio": 0}}"#,
            r#"{"eval": {"ks": []}}"#,
            r#"{"eval": {"retriever": "model"}}"#,
            r#"{"model": {"max_positions": 64}}"#,
            r#"{"text": {"finetune_attributes": ["colour"]}}"#,
            r#"{"ablate": {"variants": [{"name": "a", "finetune_attributes": ["title"]}, {"name": "a", "finetune_attributes": ["title"]}]}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn fingerprint_ignores_paths_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn stage_configs_carry_overrides() {
        let mut cfg = RunConfig::default();
        cfg.text.delimiter = " ; ".into();
        cfg.text.item_token_cap = 12;
        let t = cfg.text_config(Stage::Finetune).unwrap();
        assert_eq!(t.delimiter, " ; ");
        assert_eq!(t.item_token_cap, 12);
        assert_eq!(t.attributes, default_config(Stage::Finetune).attributes);
        assert_eq!(cfg.train_config(Stage::Pretrain).batch_size, 128);
        assert_eq!(cfg.model_config(777).vocab_size, 777);
    }
}
