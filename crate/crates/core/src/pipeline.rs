//! End-to-end commands: synthesis, ingestion, both training stages and every
//! evaluation protocol. Each command reads a [`RunConfig`] and writes its
//! artifacts under `paths.out_dir`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ScorerKind, Variant};
use crate::corpus::{
    generate_synthetic, kcore_filter, leave_one_out_split, load_interactions, load_items, next_k_split, zero_shot_instances,
    Dataset, Seedling,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, rerank_protocol, robustness_protocol, sample_all, EvalInstance, EvalOptions, MarkovScorer, MetricsReport,
    PopularityScorer, RandomScorer, Retriever, RobustnessReport, Scorer,
};
use crate::mitp::{self, RunLogEntry, TrainState};
use crate::model::{load_checkpoint_expecting, load_optimizer, save_checkpoint, save_optimizer, Model};
use crate::rank::ModelScorer;
use crate::seed;
use crate::textualize::{vocabulary_texts, Attribute, OrderingPolicy, Stage, TextualizationConfig};
use crate::tokenizer::Vocabulary;

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_log(path: &Path, log: &[RunLogEntry]) -> Result<()> {
    create_parent(path)?;
    let mut text = String::new();
    for entry in log {
        text += &serde_json::to_string(entry)?;
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<RunLogEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{what} `{}` not found; {hint}", path.display())))
    }
}

/// Seeded subset of at most `cap` elements, in their original order.
fn cap<T: Clone>(items: &[T], cap: Option<usize>, seed: u64, label: &str) -> Vec<T> {
    match cap {
        Some(c) if c < items.len() => {
            let mut idx: Vec<usize> = (0..items.len()).collect();
            idx.shuffle(&mut seed::rng(seed, &["eval-cap", label]));
            idx.truncate(c);
            idx.sort_unstable();
            idx.into_iter().map(|i| items[i].clone()).collect()
        }
        _ => items.to_vec(),
    }
}

fn stamp(mut report: MetricsReport, cfg: &RunConfig) -> MetricsReport {
    report.config_fingerprint = cfg.fingerprint();
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub items: PathBuf,
    pub interactions: PathBuf,
    pub manifest: PathBuf,
    pub n_items: usize,
    pub n_interactions: usize,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutput> {
    let corpus = generate_synthetic(&cfg.synthetic)?;
    let p = &cfg.paths;
    let (items, interactions, manifest) = (p.items(), p.interactions(), p.manifest());
    for path in [&items, &interactions, &manifest] {
        create_parent(path)?;
    }
    corpus.write(&items, &interactions, &manifest)?;
    Ok(SynthOutput {
        items,
        interactions,
        manifest,
        n_items: corpus.items.len(),
        n_interactions: corpus.interactions.len(),
    })
}

/// Loads the corpus files, splits them by domain and k-core filters each domain.
pub fn load_domains(cfg: &RunConfig) -> Result<BTreeMap<String, Dataset>> {
    let p = &cfg.paths;
    require(&p.items(), "item file", "run `synth` or set paths.items")?;
    require(&p.interactions(), "interaction file", "run `synth` or set paths.interactions")?;
    let catalog = Arc::new(load_items(p.items())?);
    let all = load_interactions(p.interactions(), catalog)?;
    let domains: BTreeMap<String, Dataset> = all
        .by_domain()
        .into_iter()
        .map(|(name, ds)| {
            let filtered = kcore_filter(&ds, cfg.data.kcore);
            log::info!(
                "domain {name}: {} users, {} items after {}-core ({} users, {} items before)",
                filtered.n_users(),
                filtered.catalog.len(),
                cfg.data.kcore,
                ds.n_users(),
                ds.catalog.len()
            );
            (name, filtered)
        })
        .collect();
    if domains.values().all(|d| d.is_empty()) {
        return Err(Error::Invalid("no interactions survive filtering".into()));
    }
    Ok(domains)
}

pub fn target_domain<'a>(cfg: &RunConfig, domains: &'a BTreeMap<String, Dataset>) -> Result<&'a Dataset> {
    match &cfg.data.target_domain {
        Some(name) => domains
            .get(name)
            .ok_or_else(|| Error::Config(format!("data.target_domain: unknown domain `{name}`"))),
        None => domains
            .values()
            .find(|d| !d.is_empty())
            .ok_or_else(|| Error::Invalid("corpus has no domains".into())),
    }
}

pub fn pretrain_domains<'a>(cfg: &RunConfig, domains: &'a BTreeMap<String, Dataset>) -> Result<Vec<&'a Dataset>> {
    match &cfg.data.pretrain_domains {
        Some(names) if names.is_empty() => Err(Error::Config("data.pretrain_domains is empty".into())),
        Some(names) => names
            .iter()
            .map(|n| {
                domains
                    .get(n)
                    .ok_or_else(|| Error::Config(format!("data.pretrain_domains: unknown domain `{n}`")))
            })
            .collect(),
        None => Ok(domains.values().collect()),
    }
}

/// Loads the vocabulary file, building it first if absent. The build covers
/// every attribute of every domain, so one vocabulary serves all stages.
pub fn load_or_build_vocab(cfg: &RunConfig, domains: &BTreeMap<String, Dataset>) -> Result<Vocabulary> {
    let path = cfg.paths.vocab();
    if path.exists() {
        return Vocabulary::load(&path);
    }
    let all = cfg.text_config_with(Stage::Finetune, &Attribute::ALL, OrderingPolicy::Granularity)?;
    let mut texts = Vec::new();
    for ds in domains.values() {
        texts.extend(vocabulary_texts(&ds.catalog, &[&all]));
    }
    let vocab = Vocabulary::build(&texts, cfg.vocab.min_freq, cfg.vocab.max_size)?;
    create_parent(&path)?;
    vocab.save(&path)?;
    log::info!("built vocabulary of {} tokens at {}", vocab.len(), path.display());
    Ok(vocab)
}

pub fn load_model(cfg: &RunConfig, vocab: &Vocabulary, path: &Path) -> Result<Model<f32>> {
    require(path, "checkpoint", "train it first")?;
    let mc = cfg.model_config(vocab.len());
    let params = load_checkpoint_expecting(path, &mc)?;
    Model::new(mc, params)
}

fn opt_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("opt")
}

fn log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub users_raw: usize,
    pub items_raw: usize,
    pub interactions_raw: usize,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// Users too short for a validation and a test target.
    pub train_only_users: usize,
    pub test_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub kcore: usize,
    pub domains: BTreeMap<String, DomainStats>,
    pub config_fingerprint: String,
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestReport> {
    let p = &cfg.paths;
    require(&p.items(), "item file", "set paths.items")?;
    let catalog = Arc::new(load_items(p.items())?);
    let raw = load_interactions(p.interactions(), catalog)?.by_domain();
    let mut domains = BTreeMap::new();
    for (name, ds) in raw {
        let f = kcore_filter(&ds, cfg.data.kcore);
        let split = leave_one_out_split(&f);
        domains.insert(
            name,
            DomainStats {
                users_raw: ds.n_users(),
                items_raw: ds.catalog.len(),
                interactions_raw: ds.n_interactions(),
                users: f.n_users(),
                items: f.catalog.len(),
                interactions: f.n_interactions(),
                train_only_users: split.train_only_users,
                test_instances: split.test.len(),
            },
        );
    }
    let report = IngestReport {
        kcore: cfg.data.kcore,
        domains,
        config_fingerprint: cfg.fingerprint(),
    };
    write_json(&p.reports().join("ingest.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: Vec<RunLogEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_valid_ndcg10: Option<f64>,
}

fn pretrain_into(
    cfg: &RunConfig,
    datasets: &[Dataset],
    vocab: &Vocabulary,
    text: &TextualizationConfig,
    ckpt: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    let mc = cfg.model_config(vocab.len());
    let train = cfg.train_config(Stage::Pretrain);
    let (opt, logp) = (opt_path(ckpt), log_path(ckpt));
    let state = if resume && ckpt.exists() && opt.exists() && logp.exists() {
        let model = Model::new(mc.clone(), load_checkpoint_expecting(ckpt, &mc)?)?;
        let optimizer = load_optimizer(&opt, &mc)?;
        let log = read_log(&logp)?;
        log::info!("resuming pretraining after epoch {}", log.len());
        TrainState { model, optimizer, log }
    } else {
        if resume {
            log::warn!("nothing to resume at {}; starting fresh", ckpt.display());
        }
        TrainState::fresh(Model::init(mc.clone())?)
    };
    create_parent(ckpt)?;
    let mut persist = |s: &TrainState| -> Result<()> {
        save_checkpoint(s.model.params(), &mc, ckpt)?;
        save_optimizer(&s.optimizer, &mc, &opt)?;
        write_log(&logp, &s.log)
    };
    let state = mitp::pretrain(state, datasets, text, vocab, &train, &mut persist)?;
    persist(&state)?;
    Ok(TrainSummary {
        checkpoint: ckpt.to_path_buf(),
        log: state.log,
        best_epoch: None,
        best_valid_ndcg10: None,
    })
}

/// Pretrains on the training part of every pretraining domain, so no
/// validation or test target is ever seen.
pub fn cmd_pretrain(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    let domains = load_domains(cfg)?;
    let vocab = load_or_build_vocab(cfg, &domains)?;
    let datasets: Vec<Dataset> = pretrain_domains(cfg, &domains)?
        .into_iter()
        .map(|d| leave_one_out_split(d).train)
        .collect();
    let text = cfg.text_config(Stage::Pretrain)?;
    pretrain_into(cfg, &datasets, &vocab, &text, &cfg.paths.pretrained(), resume)
}

fn initial_model(cfg: &RunConfig, vocab: &Vocabulary, pretrained: Option<&Path>) -> Result<Model<f32>> {
    match pretrained {
        Some(path) => {
            require(path, "pretrained checkpoint", "run `pretrain` first or pass --from-scratch")?;
            load_model(cfg, vocab, path)
        }
        None => Model::init(cfg.model_config(vocab.len())),
    }
}

/// Items that occur in `train`.
fn trained(train: &Dataset) -> BTreeSet<String> {
    train.item_counts().into_keys().map(String::from).collect()
}

fn instances(cfg: &RunConfig, seedlings: &[Seedling], domain: &Dataset, keep: Option<&BTreeSet<String>>) -> Result<Vec<EvalInstance>> {
    let kept: Vec<Seedling> = seedlings
        .iter()
        .filter(|s| keep.is_none_or(|k| k.contains(&s.positive)))
        .cloned()
        .collect();
    sample_all(&kept, domain, cfg.eval.n_negatives, cfg.seed)
}

#[allow(clippy::too_many_arguments)]
fn finetune_into(
    cfg: &RunConfig,
    train: &Dataset,
    valid: &[Seedling],
    domain: &Dataset,
    vocab: &Vocabulary,
    text: &TextualizationConfig,
    init: Model<f32>,
    ckpt: &Path,
) -> Result<TrainSummary> {
    if valid.is_empty() {
        return Err(Error::Invalid(format!(
            "domain `{}` has no validation split; sequences need at least 3 items",
            domain.domain
        )));
    }
    let keep = cfg.eval.filter_untrained.then(|| trained(train));
    let valid = instances(cfg, valid, domain, keep.as_ref())?;
    let tc = cfg.train_config(Stage::Finetune);
    let logp = log_path(ckpt);
    let mut log = Vec::new();
    let out = mitp::finetune(init, train, &valid, text, vocab, &tc, &mut |e| {
        log.push(e.clone());
        write_log(&logp, &log)
    })?;
    create_parent(ckpt)?;
    save_checkpoint(out.best.params(), out.best.config(), ckpt)?;
    write_log(&logp, &out.log)?;
    Ok(TrainSummary {
        checkpoint: ckpt.to_path_buf(),
        log: out.log,
        best_epoch: Some(out.best_epoch),
        best_valid_ndcg10: Some(out.best_ndcg10),
    })
}

/// Finetunes on the target domain from the pretrained checkpoint, or from a
/// fresh initialization with `from_scratch`.
pub fn cmd_finetune(cfg: &RunConfig, from_scratch: bool) -> Result<TrainSummary> {
    let domains = load_domains(cfg)?;
    let target = target_domain(cfg, &domains)?;
    let vocab = load_or_build_vocab(cfg, &domains)?;
    let split = leave_one_out_split(target);
    let init = initial_model(cfg, &vocab, (!from_scratch).then(|| cfg.paths.pretrained()).as_deref())?;
    let text = cfg.text_config(Stage::Finetune)?;
    finetune_into(cfg, &split.train, &split.valid, target, &vocab, &text, init, &cfg.paths.finetuned())
}

fn eval_options(cfg: &RunConfig, protocol: &str) -> EvalOptions {
    EvalOptions::new(protocol).with_ks(&cfg.eval.ks)
}

fn scorer_name(kind: ScorerKind) -> &'static str {
    match kind {
        ScorerKind::Model => "model",
        ScorerKind::Popularity => "popularity",
        ScorerKind::Markov => "markov",
        ScorerKind::Random => "random",
    }
}

/// Scores the leave-one-out test split of the target domain with `eval.scorer`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let domains = load_domains(cfg)?;
    let target = target_domain(cfg, &domains)?;
    let split = leave_one_out_split(target);
    let keep = cfg.eval.filter_untrained.then(|| trained(&split.train));
    let test = cap(&split.test, cfg.eval.max_instances, cfg.seed, "test");
    let inst = instances(cfg, &test, target, keep.as_ref())?;
    let name = scorer_name(cfg.eval.scorer);
    let opts = eval_options(cfg, &format!("test/{name}"));
    let report = match cfg.eval.scorer {
        ScorerKind::Model => {
            let vocab = load_or_build_vocab(cfg, &domains)?;
            let model = load_model(cfg, &vocab, &cfg.paths.finetuned())?;
            let text = cfg.text_config(Stage::Finetune)?;
            evaluate(&ModelScorer::new(&model, &target.catalog, &text, &vocab), &inst, &opts)?
        }
        ScorerKind::Popularity => evaluate(&PopularityScorer::new(&split.train)?, &inst, &opts)?,
        ScorerKind::Markov => evaluate(&MarkovScorer::new(&split.train)?, &inst, &opts)?,
        ScorerKind::Random => evaluate(&RandomScorer { seed: cfg.seed }, &inst, &opts)?,
    };
    let report = stamp(report, cfg);
    write_json(&cfg.paths.reports().join(format!("eval-{name}.json")), &report)?;
    Ok(report)
}

/// Ranks every non-first position of the target domain with pretrain-stage
/// text and no target-domain training. `from_scratch` skips the checkpoint
/// and scores with a freshly initialized model.
pub fn cmd_zeroshot(cfg: &RunConfig, from_scratch: bool) -> Result<MetricsReport> {
    let domains = load_domains(cfg)?;
    let target = target_domain(cfg, &domains)?;
    if pretrain_domains(cfg, &domains)?.iter().any(|d| d.domain == target.domain) {
        log::warn!("target domain `{}` is also a pretraining domain", target.domain);
    }
    let vocab = load_or_build_vocab(cfg, &domains)?;
    let model = initial_model(cfg, &vocab, (!from_scratch).then(|| cfg.paths.pretrained()).as_deref())?;
    let seedlings = cap(&zero_shot_instances(target), cfg.eval.max_instances, cfg.seed, "zeroshot");
    let inst = instances(cfg, &seedlings, target, None)?;
    let text = cfg.text_config(Stage::Pretrain)?;
    let scorer = ModelScorer::new(&model, &target.catalog, &text, &vocab);
    let report = stamp(evaluate(&scorer, &inst, &eval_options(cfg, "zeroshot"))?, cfg);
    write_json(&cfg.paths.reports().join("zeroshot.json"), &report)?;
    Ok(report)
}

fn retriever(kind: ScorerKind, train: &Dataset) -> Result<Box<dyn Retriever>> {
    Ok(match kind {
        ScorerKind::Popularity => Box::new(PopularityScorer::new(train)?),
        _ => Box::new(MarkovScorer::new(train)?),
    })
}

/// Reranks retriever output over the whole target-domain catalog, one report per size.
pub fn cmd_rerank(cfg: &RunConfig) -> Result<Vec<MetricsReport>> {
    let domains = load_domains(cfg)?;
    let target = target_domain(cfg, &domains)?;
    let vocab = load_or_build_vocab(cfg, &domains)?;
    let model = load_model(cfg, &vocab, &cfg.paths.finetuned())?;
    let split = leave_one_out_split(target);
    let text = cfg.text_config(Stage::Finetune)?;
    let scorer = ModelScorer::new(&model, &target.catalog, &text, &vocab);
    let reports = rerank_with(cfg, &scorer, target, &split.train, &split.test)?;
    write_json(&cfg.paths.reports().join("rerank.json"), &reports)?;
    Ok(reports)
}

/// The reranking protocol for any scorer; exposed so baselines can share it.
pub fn rerank_with(
    cfg: &RunConfig,
    scorer: &dyn Scorer,
    target: &Dataset,
    train: &Dataset,
    test: &[Seedling],
) -> Result<Vec<MetricsReport>> {
    let pool: Vec<String> = target.domain_items().into_iter().map(String::from).collect();
    let mut opts = eval_options(cfg, "rerank");
    if cfg.eval.filter_untrained {
        opts = opts.filter_untrained(train);
    }
    let test = cap(test, cfg.eval.max_instances, cfg.seed, "rerank");
    let r = retriever(cfg.eval.retriever, train)?;
    let reports = rerank_protocol(scorer, r.as_ref(), &test, &pool, &cfg.eval.rerank_sizes, &opts)?;
    Ok(reports.into_iter().map(|r| stamp(r, cfg)).collect())
}

/// Withholds the last `eval.next_k` items of every target-domain user. The
/// last item of each remaining prefix serves as the validation target of a
/// dedicated finetuning run, whose model is then scored on every withheld
/// position with teacher-forced histories.
pub fn cmd_robustness(cfg: &RunConfig, from_scratch: bool) -> Result<RobustnessReport> {
    let domains = load_domains(cfg)?;
    let target = target_domain(cfg, &domains)?;
    let vocab = load_or_build_vocab(cfg, &domains)?;
    let nk = next_k_split(target, cfg.eval.next_k);
    let inner = next_k_split(&nk.train, 1);
    let init = initial_model(cfg, &vocab, (!from_scratch).then(|| cfg.paths.pretrained()).as_deref())?;
    let text = cfg.text_config(Stage::Finetune)?;
    let ckpt = cfg.paths.out_dir.join("robust.ckpt");
    finetune_into(cfg, &inner.train, &inner.tests[0], target, &vocab, &text, init, &ckpt)?;
    let model = load_model(cfg, &vocab, &ckpt)?;
    let users: BTreeSet<String> = cap(
        &nk.tests[0].iter().map(|s| s.user_id.clone()).collect::<Vec<_>>(),
        cfg.eval.max_instances,
        cfg.seed,
        "robustness",
    )
    .into_iter()
    .collect();
    let tests = nk
        .tests
        .iter()
        .map(|t| {
            let kept: Vec<Seedling> = t.iter().filter(|s| users.contains(&s.user_id)).cloned().collect();
            instances(cfg, &kept, target, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opts = eval_options(cfg, "next");
    if cfg.eval.filter_untrained {
        opts = opts.filter_untrained(&inner.train);
    }
    let scorer = ModelScorer::new(&model, &target.catalog, &text, &vocab);
    let mut report = robustness_protocol(&scorer, &tests, &opts)?;
    report.per_j = report.per_j.into_iter().map(|r| stamp(r, cfg)).collect();
    write_json(&cfg.paths.reports().join("robustness.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Attribute order actually rendered; `None` means no pretraining.
    pub pretrain: Option<Vec<Attribute>>,
    pub finetune: Vec<Attribute>,
    pub best_epoch: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub config_fingerprint: String,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains and tests every textualization variant under the same seed.
/// Variants whose rendered pretraining text agrees share one checkpoint.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport> {
    if cfg.ablate.variants.is_empty() {
        return Err(Error::Config("ablate.variants is empty".into()));
    }
    let domains = load_domains(cfg)?;
    let target = target_domain(cfg, &domains)?;
    let vocab = load_or_build_vocab(cfg, &domains)?;
    let pre_data: Vec<Dataset> = pretrain_domains(cfg, &domains)?
        .into_iter()
        .map(|d| leave_one_out_split(d).train)
        .collect();
    let split = leave_one_out_split(target);
    let keep = cfg.eval.filter_untrained.then(|| trained(&split.train));
    let test = instances(cfg, &cap(&split.test, cfg.eval.max_instances, cfg.seed, "test"), target, keep.as_ref())?;
    let default_pre = cfg.text_config(Stage::Pretrain)?;
    let dir = cfg.paths.out_dir.join("ablate");
    let mut pretrained: BTreeMap<Vec<Attribute>, PathBuf> = BTreeMap::new();
    let mut rows = Vec::new();
    for v in &cfg.ablate.variants {
        let Variant {
            name,
            pretrain_attributes,
            finetune_attributes,
            ordering,
        } = v;
        let pre_text = pretrain_attributes
            .as_ref()
            .map(|a| cfg.text_config_with(Stage::Pretrain, a, *ordering))
            .transpose()?;
        let init_path = match &pre_text {
            None => None,
            Some(t) => Some(match pretrained.get(&t.attributes) {
                Some(p) => p.clone(),
                None => {
                    let p = if *t == default_pre {
                        cfg.paths.pretrained()
                    } else {
                        dir.join(name).join("pretrain.ckpt")
                    };
                    if p.exists() && log_path(&p).exists() && read_log(&log_path(&p))?.len() >= cfg.pretrain.epochs {
                        log::info!("ablate {name}: reusing {}", p.display());
                    } else {
                        log::info!("ablate {name}: pretraining into {}", p.display());
                        pretrain_into(cfg, &pre_data, &vocab, t, &p, true)?;
                    }
                    pretrained.insert(t.attributes.clone(), p.clone());
                    p
                }
            }),
        };
        let fine_text = cfg.text_config_with(Stage::Finetune, finetune_attributes, *ordering)?;
        let init = initial_model(cfg, &vocab, init_path.as_deref())?;
        let ckpt = dir.join(name).join("finetune.ckpt");
        let summary = finetune_into(cfg, &split.train, &split.valid, target, &vocab, &fine_text, init, &ckpt)?;
        let model = load_model(cfg, &vocab, &ckpt)?;
        let scorer = ModelScorer::new(&model, &target.catalog, &fine_text, &vocab);
        let report = stamp(evaluate(&scorer, &test, &eval_options(cfg, &format!("ablate/{name}")))?, cfg);
        log::info!("ablate {name}: NDCG@10 {:?}", report.metrics.get(&10).map(|m| m.ndcg));
        rows.push(AblationRow {
            variant: name.clone(),
            pretrain: pre_text.map(|t| t.attributes),
            finetune: fine_text.attributes,
            best_epoch: summary.best_epoch.unwrap_or(0),
            report,
        });
    }
    let report = AblationReport {
        rows,
        config_fingerprint: cfg.fingerprint(),
    };
    write_json(&cfg.paths.reports().join("ablate.json"), &report)?;
    Ok(report)
}
