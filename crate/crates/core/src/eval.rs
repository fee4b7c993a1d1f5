//! Ranking metrics, evaluation protocols and non-neural baseline scorers.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Seedling};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_N_NEGATIVES: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub user_id: String,
    pub history: Vec<String>,
    pub positive: String,
    pub negatives: Vec<String>,
}

impl EvalInstance {
    /// Positive first, then negatives.
    pub fn candidates(&self) -> Vec<String> {
        std::iter::once(self.positive.clone()).chain(self.negatives.iter().cloned()).collect()
    }
}

/// Draws `n` distinct same-domain negatives, excluding the positive and
/// everything in the user's full sequence.
pub fn sample_negatives(seedling: &Seedling, dataset: &Dataset, n: usize, seed: u64) -> Result<EvalInstance> {
    let mut excluded: HashSet<&str> = seedling.history.iter().map(String::as_str).collect();
    excluded.insert(seedling.positive.as_str());
    if let Some(seq) = dataset.sequences.get(&seedling.user_id) {
        excluded.extend(seq.items.iter().map(String::as_str));
    }
    let eligible: Vec<&str> = dataset.domain_items().into_iter().filter(|id| !excluded.contains(id)).collect();
    if eligible.len() < n {
        return Err(Error::InsufficientItems {
            domain: dataset.domain.clone(),
            available: eligible.len(),
            needed: n,
        });
    }
    let mut rng = seed::rng(seed, &["negatives", &seedling.user_id, &seedling.position.to_string()]);
    let negatives = rand::seq::index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i].to_string())
        .collect();
    Ok(EvalInstance {
        user_id: seedling.user_id.clone(),
        history: seedling.history.clone(),
        positive: seedling.positive.clone(),
        negatives,
    })
}

pub fn sample_all(seedlings: &[Seedling], dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<EvalInstance>> {
    seedlings.iter().map(|s| sample_negatives(s, dataset, n, seed)).collect()
}

/// Hit rate and NDCG of a single relevant item at 1-based `rank`.
pub fn metric_at_k(rank: usize, k: usize) -> (f64, f64) {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// Candidate costs; lower is better. Implementations must be pure.
pub trait Scorer {
    fn costs(&self, history: &[String], candidates: &[String]) -> Result<Vec<f64>>;
}

/// Selects candidates from a pool for reranking.
pub trait Retriever {
    fn retrieve(&self, history: &[String], pool: &[String], m: usize) -> Vec<String>;
}

/// 1-based rank of `positive` under pessimistic tie-breaking: every other
/// candidate whose cost is not greater ranks ahead of it.
pub fn positive_rank(costs: &[f64], candidates: &[String], positive: &str) -> Result<usize> {
    if costs.iter().any(|c| c.is_nan()) {
        return Err(Error::NonFinite("candidate cost".into()));
    }
    let p = candidates
        .iter()
        .position(|c| c == positive)
        .ok_or_else(|| Error::Invalid(format!("positive `{positive}` is not a candidate")))?;
    let ahead = costs
        .iter()
        .zip(candidates)
        .enumerate()
        .filter(|&(i, (&c, _))| i != p && c <= costs[p])
        .count();
    Ok(ahead + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub metrics: BTreeMap<usize, Metric>,
    pub n_instances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retriever_miss_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decline: Option<f64>,
    pub config_fingerprint: String,
}

impl MetricsReport {
    /// Means over instances. Ranks are aggregated by value, so the result
    /// does not depend on instance order.
    pub fn from_ranks(protocol: &str, ranks: &[usize], ks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Invalid(format!("no instances to evaluate for `{protocol}`")));
        }
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for &r in ranks {
            *hist.entry(r).or_insert(0) += 1;
        }
        let n = ranks.len() as f64;
        let metrics = ks
            .iter()
            .map(|&k| {
                let (mut hr, mut ndcg) = (0.0, 0.0);
                for (&r, &c) in &hist {
                    let (h, g) = metric_at_k(r, k);
                    hr += h * c as f64;
                    ndcg += g * c as f64;
                }
                (k, Metric { hr: hr / n, ndcg: ndcg / n })
            })
            .collect();
        Ok(MetricsReport {
            protocol: protocol.to_string(),
            metrics,
            n_instances: ranks.len(),
            retriever_miss_rate: None,
            decline: None,
            config_fingerprint: String::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub protocol: String,
    pub ks: Vec<usize>,
    /// When set, instances whose positive is absent from this set are dropped.
    pub trained_items: Option<BTreeSet<String>>,
}

impl EvalOptions {
    pub fn new(protocol: &str) -> Self {
        EvalOptions {
            protocol: protocol.to_string(),
            ks: DEFAULT_KS.to_vec(),
            trained_items: None,
        }
    }

    pub fn with_ks(mut self, ks: &[usize]) -> Self {
        self.ks = ks.to_vec();
        self
    }

    /// Keeps only instances whose positive occurs in `train`.
    pub fn filter_untrained(mut self, train: &Dataset) -> Self {
        self.trained_items = Some(train.item_counts().into_keys().map(String::from).collect());
        self
    }

    fn keeps(&self, positive: &str) -> bool {
        self.trained_items.as_ref().is_none_or(|t| t.contains(positive))
    }
}

pub fn positive_ranks(scorer: &dyn Scorer, instances: &[EvalInstance]) -> Result<Vec<usize>> {
    instances
        .iter()
        .map(|inst| {
            let candidates = inst.candidates();
            let costs = scorer.costs(&inst.history, &candidates)?;
            positive_rank(&costs, &candidates, &inst.positive)
        })
        .collect()
}

pub fn evaluate(scorer: &dyn Scorer, instances: &[EvalInstance], opts: &EvalOptions) -> Result<MetricsReport> {
    let kept: Vec<EvalInstance> = instances.iter().filter(|i| opts.keeps(&i.positive)).cloned().collect();
    if kept.len() < instances.len() {
        log::info!(
            "{}: dropped {} of {} instances with untrained positives",
            opts.protocol,
            instances.len() - kept.len(),
            instances.len()
        );
    }
    MetricsReport::from_ranks(&opts.protocol, &positive_ranks(scorer, &kept)?, &opts.ks)
}

/// Reranks retriever output for every candidate size. A positive the
/// retriever missed replaces the last retrieved item and counts as a miss.
pub fn rerank_protocol(
    scorer: &dyn Scorer,
    retriever: &dyn Retriever,
    seedlings: &[Seedling],
    pool: &[String],
    sizes: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<MetricsReport>> {
    let kept: Vec<&Seedling> = seedlings.iter().filter(|s| opts.keeps(&s.positive)).collect();
    let mut reports = Vec::with_capacity(sizes.len());
    for &m in sizes {
        if m == 0 || m > pool.len() {
            return Err(Error::Config(format!("candidate size {m} outside 1..={}", pool.len())));
        }
        let mut ranks = Vec::with_capacity(kept.len());
        let mut misses = 0;
        for s in &kept {
            let mut candidates = retriever.retrieve(&s.history, pool, m);
            if !candidates.contains(&s.positive) {
                misses += 1;
                candidates.pop();
                candidates.push(s.positive.clone());
            }
            let costs = scorer.costs(&s.history, &candidates)?;
            ranks.push(positive_rank(&costs, &candidates, &s.positive)?);
        }
        let mut report = MetricsReport::from_ranks(&format!("rerank@{m}"), &ranks, &opts.ks)?;
        report.retriever_miss_rate = Some(misses as f64 / kept.len() as f64);
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub per_j: Vec<MetricsReport>,
    /// Relative NDCG@1 drop from the first to the last withheld item.
    pub decline: Option<f64>,
}

/// Evaluates each withheld position separately. With filtering on, a user
/// is kept only if every one of their positives was trained on, so all
/// positions cover the same users.
pub fn robustness_protocol(scorer: &dyn Scorer, tests: &[Vec<EvalInstance>], opts: &EvalOptions) -> Result<RobustnessReport> {
    if tests.is_empty() {
        return Err(Error::Invalid("no next-k positions to evaluate".into()));
    }
    let mut users: BTreeSet<&str> = tests[0].iter().map(|i| i.user_id.as_str()).collect();
    for bucket in tests {
        let ok: BTreeSet<&str> = bucket.iter().filter(|i| opts.keeps(&i.positive)).map(|i| i.user_id.as_str()).collect();
        users = users.intersection(&ok).copied().collect();
    }
    let mut ks = opts.ks.clone();
    if !ks.contains(&1) {
        ks.insert(0, 1);
    }
    let mut per_j = Vec::with_capacity(tests.len());
    for (j, bucket) in tests.iter().enumerate() {
        let kept: Vec<EvalInstance> = bucket.iter().filter(|i| users.contains(i.user_id.as_str())).cloned().collect();
        let ranks = positive_ranks(scorer, &kept)?;
        per_j.push(MetricsReport::from_ranks(&format!("next{}", j + 1), &ranks, &ks)?);
    }
    let first = per_j[0].metrics[&1].ndcg;
    let last = per_j[per_j.len() - 1].metrics[&1].ndcg;
    let decline = (first > 0.0).then(|| (first - last) / first);
    if let Some(r) = per_j.last_mut() {
        r.decline = decline;
    }
    Ok(RobustnessReport { per_j, decline })
}

fn require_nonempty(train: &Dataset) -> Result<()> {
    if train.n_interactions() == 0 {
        return Err(Error::Invalid(format!("training data for `{}` is empty", train.domain)));
    }
    Ok(())
}

/// Ranks by descending training frequency.
#[derive(Debug, Clone)]
pub struct PopularityScorer {
    counts: HashMap<String, usize>,
}

impl PopularityScorer {
    pub fn new(train: &Dataset) -> Result<Self> {
        require_nonempty(train)?;
        Ok(PopularityScorer {
            counts: train.item_counts().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        })
    }

    pub fn count(&self, item: &str) -> usize {
        self.counts.get(item).copied().unwrap_or(0)
    }
}

impl Scorer for PopularityScorer {
    fn costs(&self, _history: &[String], candidates: &[String]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|c| -(self.count(c) as f64)).collect())
    }
}

impl Retriever for PopularityScorer {
    fn retrieve(&self, history: &[String], pool: &[String], m: usize) -> Vec<String> {
        top_m(self, history, pool, m, |_| 0.0)
    }
}

/// First-order transition probabilities with add-one smoothing; falls back
/// to popularity when the last history item has no observed successors.
#[derive(Debug, Clone)]
pub struct MarkovScorer {
    transitions: HashMap<String, HashMap<String, usize>>,
    outgoing: HashMap<String, usize>,
    n_items: usize,
    popularity: PopularityScorer,
}

impl MarkovScorer {
    pub fn new(train: &Dataset) -> Result<Self> {
        let popularity = PopularityScorer::new(train)?;
        let mut transitions: HashMap<String, HashMap<String, usize>> = HashMap::new();
        let mut outgoing: HashMap<String, usize> = HashMap::new();
        for seq in train.sequences.values() {
            for w in seq.items.windows(2) {
                *transitions.entry(w[0].clone()).or_default().entry(w[1].clone()).or_insert(0) += 1;
                *outgoing.entry(w[0].clone()).or_insert(0) += 1;
            }
        }
        let items: BTreeSet<&String> = train.catalog.keys().collect();
        Ok(MarkovScorer {
            transitions,
            outgoing,
            n_items: items.len().max(1),
            popularity,
        })
    }

    /// Smoothed `P(next | last)`, or `None` when `last` has no successors.
    pub fn probability(&self, last: &str, next: &str) -> Option<f64> {
        let total = *self.outgoing.get(last)?;
        let c = self.transitions.get(last).and_then(|t| t.get(next)).copied().unwrap_or(0);
        Some((c + 1) as f64 / (total + self.n_items) as f64)
    }
}

impl Scorer for MarkovScorer {
    fn costs(&self, history: &[String], candidates: &[String]) -> Result<Vec<f64>> {
        match history.last().filter(|l| self.outgoing.contains_key(*l)) {
            Some(last) => Ok(candidates.iter().map(|c| -self.probability(last, c).unwrap_or(0.0)).collect()),
            None => self.popularity.costs(history, candidates),
        }
    }
}

impl Retriever for MarkovScorer {
    /// Transition probability first, popularity among ties.
    fn retrieve(&self, history: &[String], pool: &[String], m: usize) -> Vec<String> {
        top_m(self, history, pool, m, |c| -(self.popularity.count(c) as f64))
    }
}

fn top_m(scorer: &dyn Scorer, history: &[String], pool: &[String], m: usize, tiebreak: impl Fn(&str) -> f64) -> Vec<String> {
    let costs = scorer.costs(history, pool).expect("baseline scorers are infallible");
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.sort_by(|&a, &b| {
        costs[a]
            .total_cmp(&costs[b])
            .then_with(|| tiebreak(&pool[a]).total_cmp(&tiebreak(&pool[b])))
            .then_with(|| pool[a].cmp(&pool[b]))
    });
    idx.into_iter().take(m).map(|i| pool[i].clone()).collect()
}

/// Uniform random costs, fixed per (seed, history, candidate).
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn costs(&self, history: &[String], candidates: &[String]) -> Result<Vec<f64>> {
        let context = seed::derive(self.seed, &history.iter().map(String::as_str).collect::<Vec<_>>());
        Ok(candidates
            .iter()
            .map(|c| (seed::derive(context, &[c]) >> 11) as f64 / (1u64 << 53) as f64)
            .collect())
    }
}
