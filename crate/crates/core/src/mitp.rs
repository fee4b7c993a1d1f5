//! Masked item text prediction: sample construction and the training loops.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, Dataset, Item, UserSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalInstance, EvalOptions};
use crate::model::{adamw_step, AdamW, Batch, Mode, Model, OptimizerState};
use crate::rank::ModelScorer;
use crate::seed::{self, Rng};
use crate::textualize::{item_text, Stage, TextualizationConfig};
use crate::tokenizer::{is_sentinel, sentinel_id, TokenId, Vocabulary, EOS, N_SENTINELS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitpSample {
    pub encoder_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub user_id: String,
    /// 0-based positions in the original sequence, ascending.
    pub masked_positions: Vec<usize>,
    pub last_only: bool,
}

impl MitpSample {
    /// Sentinels in encoder and target appear in the same ascending order,
    /// once each, and the target ends with EOS.
    pub fn check_sentinels(&self) -> bool {
        let enc: Vec<TokenId> = self.encoder_ids.iter().copied().filter(|&t| is_sentinel(t)).collect();
        let tgt: Vec<TokenId> = self.target_ids.iter().copied().filter(|&t| is_sentinel(t)).collect();
        let ascending = (0..enc.len()).map(sentinel_id).collect::<Vec<_>>();
        enc == ascending && tgt == ascending && enc.len() == self.masked_positions.len() && self.target_ids.last() == Some(&EOS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub mask_ratio: f64,
    pub last_only_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Non-improving validation evaluations tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Per-domain sampling weights; `None` means proportional to interaction counts.
    pub domain_weights: Option<BTreeMap<String, f64>>,
    /// Validation instances used for early stopping; `None` keeps all.
    pub valid_max_instances: Option<usize>,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            mask_ratio: 0.1,
            last_only_fraction: 0.1,
            batch_size: 128,
            epochs: 20,
            lr: 3e-4,
            weight_decay: 0.01,
            patience: 3,
            seed: 42,
            domain_weights: None,
            valid_max_instances: None,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            batch_size: 64,
            epochs: 30,
            ..TrainConfig::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if x > 0.0 && x <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in (0, 1], got {x}")))
            }
        };
        unit("mask_ratio", self.mask_ratio)?;
        unit("last_only_fraction", self.last_only_fraction)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&(self.lr * self.weight_decay)) {
            return Err(Error::Config("lr * weight_decay must be in [0, 1)".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if let Some(w) = &self.domain_weights {
            if w.values().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::Config("domain weights must be finite and non-negative".into()));
            }
            if w.values().sum::<f64>() <= 0.0 {
                return Err(Error::Config("domain weights sum to zero".into()));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// Item text tokens, truncated to the per-item cap.
pub fn item_tokens(item: &Item, text: &TextualizationConfig, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let mut ids = vocab.encode(&item_text(item, text)?);
    ids.truncate(text.item_token_cap);
    Ok(ids)
}

/// Prompted encoder ids for `slots` (`None` marks a masked slot). Whole
/// unmasked items are dropped, oldest first, until the sequence cap holds.
/// Returns the ids and the indices of the slots that were kept.
pub fn encode_prompt(
    slots: &[Option<&[TokenId]>],
    text: &TextualizationConfig,
    vocab: &Vocabulary,
) -> Result<(Vec<TokenId>, Vec<usize>)> {
    if slots.is_empty() {
        return Err(Error::EmptySequence);
    }
    let masked = slots.iter().filter(|s| s.is_none()).count();
    if masked > N_SENTINELS {
        return Err(Error::Invalid(format!("{masked} masked items exceed the {N_SENTINELS} sentinels")));
    }
    let prefix = vocab.encode(&text.prompt_prefix);
    let suffix = vocab.encode(&text.prompt_suffix);
    let delim = vocab.encode(&text.delimiter);
    let width = |s: &Option<&[TokenId]>| s.map_or(1, |t| t.len());
    let mut kept: Vec<usize> = (0..slots.len()).collect();
    let mut total = prefix.len() + suffix.len() + slots.iter().map(width).sum::<usize>() + delim.len() * (slots.len() - 1);
    let cap = text.sequence_token_cap;
    while total > cap {
        match kept.iter().position(|&i| slots[i].is_some()) {
            Some(p) if kept.len() > 1 => {
                let i = kept.remove(p);
                total -= width(&slots[i]) + delim.len();
            }
            _ => return Err(Error::SequenceOverflow { needed: total, cap }),
        }
    }
    let mut ids = prefix;
    let mut next = 0;
    for (n, &i) in kept.iter().enumerate() {
        if n > 0 {
            ids.extend_from_slice(&delim);
        }
        match slots[i] {
            Some(t) => ids.extend_from_slice(t),
            None => {
                ids.push(sentinel_id(next));
                next += 1;
            }
        }
    }
    ids.extend_from_slice(&suffix);
    Ok((ids, kept))
}

fn draw_mask(n: usize, train: &TrainConfig, rng: &mut Rng) -> (Vec<usize>, bool) {
    if rng.random::<f64>() < train.last_only_fraction {
        return (vec![n - 1], true);
    }
    let mut masked: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < train.mask_ratio).collect();
    if masked.is_empty() {
        masked.push(n - 1);
    }
    (masked, false)
}

pub fn build_mitp_sample(
    sequence: &UserSequence,
    catalog: &Catalog,
    text: &TextualizationConfig,
    vocab: &Vocabulary,
    train: &TrainConfig,
    rng: &mut Rng,
) -> Result<MitpSample> {
    let n = sequence.items.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "user `{}` has {n} items, at least 2 needed",
            sequence.user_id
        )));
    }
    let (masked, last_only) = draw_mask(n, train, rng);
    let tokens = sequence
        .items
        .iter()
        .map(|id| {
            let item = catalog.get(id).ok_or_else(|| Error::UnknownItem {
                user_id: sequence.user_id.clone(),
                item_id: id.clone(),
            })?;
            item_tokens(item, text, vocab)
        })
        .collect::<Result<Vec<_>>>()?;
    let slots: Vec<Option<&[TokenId]>> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| if masked.contains(&i) { None } else { Some(t.as_slice()) })
        .collect();
    let (encoder_ids, _) = encode_prompt(&slots, text, vocab)?;
    let mut target_ids = Vec::new();
    for (s, &i) in masked.iter().enumerate() {
        target_ids.push(sentinel_id(s));
        target_ids.extend_from_slice(&tokens[i]);
    }
    target_ids.push(EOS);
    Ok(MitpSample {
        encoder_ids,
        target_ids,
        user_id: sequence.user_id.clone(),
        masked_positions: masked,
        last_only,
    })
}

/// Users drawn for one epoch, as (dataset index, user id), in batch order.
///
/// Each domain receives a share of the draws proportional to its weight; a
/// domain's users are cycled through in a seeded permutation, so a domain
/// whose share exceeds its user count revisits users. The total number of
/// draws equals the number of users in positively weighted domains.
pub fn epoch_plan(datasets: &[Dataset], train: &TrainConfig, epoch: usize) -> Result<Vec<(usize, String)>> {
    if datasets.is_empty() {
        return Err(Error::Invalid("no datasets to train on".into()));
    }
    let users: Vec<Vec<&String>> = datasets
        .iter()
        .map(|d| d.sequences.iter().filter(|(_, s)| s.items.len() >= 2).map(|(u, _)| u).collect())
        .collect();
    let weights: Vec<f64> = datasets
        .iter()
        .zip(&users)
        .map(|(d, u)| {
            if u.is_empty() {
                return 0.0;
            }
            match &train.domain_weights {
                Some(w) => w.get(&d.domain).copied().unwrap_or(0.0),
                None => d.n_interactions() as f64,
            }
        })
        .collect();
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::Invalid("no trainable users in positively weighted domains".into()));
    }
    let total: usize = users.iter().zip(&weights).filter(|(_, &w)| w > 0.0).map(|(u, _)| u.len()).sum();
    // Largest-remainder apportionment keeps the draw count exact.
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    let epoch_label = epoch.to_string();
    let mut plan = Vec::with_capacity(total);
    for (i, (u, &count)) in users.iter().zip(&counts).enumerate() {
        if count == 0 {
            continue;
        }
        let mut perm: Vec<&String> = u.clone();
        perm.shuffle(&mut seed::rng(train.seed, &["plan", &epoch_label, &datasets[i].domain]));
        plan.extend((0..count).map(|j| (i, perm[j % perm.len()].clone())));
    }
    plan.shuffle(&mut seed::rng(train.seed, &["shuffle", &epoch_label]));
    Ok(plan)
}

/// Deterministic batch iterator over one epoch of MITP samples.
pub struct TrainingStream<'a> {
    datasets: &'a [Dataset],
    text: &'a TextualizationConfig,
    vocab: &'a Vocabulary,
    train: &'a TrainConfig,
    epoch: usize,
    plan: Vec<(usize, String)>,
    cursor: usize,
}

impl Iterator for TrainingStream<'_> {
    type Item = Result<Vec<MitpSample>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.plan.len() {
            return None;
        }
        let end = (self.cursor + self.train.batch_size).min(self.plan.len());
        let epoch = self.epoch.to_string();
        let mut out = Vec::with_capacity(end - self.cursor);
        for draw in self.cursor..end {
            let (d, user) = &self.plan[draw];
            let ds = &self.datasets[*d];
            let mut rng = seed::rng(self.train.seed, &["mitp", &epoch, &draw.to_string()]);
            match build_mitp_sample(&ds.sequences[user], &ds.catalog, self.text, self.vocab, self.train, &mut rng) {
                Ok(s) => out.push(s),
                Err(Error::SequenceOverflow { needed, cap }) => {
                    log::warn!("skipping sample for user `{user}`: {needed} tokens exceed cap {cap}");
                }
                Err(e) => return Some(Err(e)),
            }
        }
        self.cursor = end;
        Some(Ok(out))
    }
}

pub fn training_stream<'a>(
    datasets: &'a [Dataset],
    text: &'a TextualizationConfig,
    vocab: &'a Vocabulary,
    train: &'a TrainConfig,
    epoch: usize,
) -> Result<TrainingStream<'a>> {
    Ok(TrainingStream {
        plan: epoch_plan(datasets, train, epoch)?,
        datasets,
        text,
        vocab,
        train,
        epoch,
        cursor: 0,
    })
}

/// Pads samples into a model batch.
pub fn to_batch(samples: &[MitpSample]) -> Result<Batch> {
    let enc: Vec<Vec<TokenId>> = samples.iter().map(|s| s.encoder_ids.clone()).collect();
    let tgt: Vec<Vec<TokenId>> = samples.iter().map(|s| s.target_ids.clone()).collect();
    Batch::from_rows(&enc, &tgt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_ndcg10: Option<f64>,
    pub wall_seconds: f64,
}

/// Model, optimizer moments and the log of completed epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: OptimizerState<f32>,
    pub log: Vec<RunLogEntry>,
}

impl TrainState {
    pub fn fresh(model: Model<f32>) -> Self {
        TrainState {
            optimizer: OptimizerState::new(model.params()),
            model,
            log: Vec::new(),
        }
    }
}

fn run_epoch(
    state: &mut TrainState,
    datasets: &[Dataset],
    text: &TextualizationConfig,
    vocab: &Vocabulary,
    train: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let hp = train.optimizer();
    let epoch_label = epoch.to_string();
    let mut total = 0.0;
    let mut steps = 0;
    for (step, samples) in training_stream(datasets, text, vocab, train, epoch)?.enumerate() {
        let samples = samples?;
        if samples.is_empty() {
            continue;
        }
        let batch = to_batch(&samples)?;
        let mode = Mode::Train {
            seed: seed::derive(train.seed, &["dropout", &epoch_label, &step.to_string()]),
        };
        let (loss, grads) = state.model.loss_and_grad(&batch, mode)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, step, loss });
        }
        adamw_step(state.model.params_mut(), &grads, &mut state.optimizer, &hp)?;
        if let Some(name) = state.model.params().first_non_finite() {
            return Err(Error::NonFinite(format!("{name} after step {step} of epoch {epoch}")));
        }
        total += loss;
        steps += 1;
        log::debug!("epoch {epoch} step {step}: loss {loss:.4}");
    }
    if steps == 0 {
        return Err(Error::Invalid(format!("epoch {epoch} produced no batches")));
    }
    Ok(total / steps as f64)
}

/// Runs the remaining pretraining epochs. Completed epochs are read from
/// `state.log`, so a state restored from disk resumes where it stopped.
/// `on_epoch` is called after every epoch, e.g. to persist the state.
pub fn pretrain(
    mut state: TrainState,
    datasets: &[Dataset],
    text: &TextualizationConfig,
    vocab: &Vocabulary,
    train: &TrainConfig,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    train.validate()?;
    if train.stage != Stage::Pretrain || text.stage != Stage::Pretrain {
        return Err(Error::Config("pretraining needs pretrain-stage train and text configs".into()));
    }
    for epoch in state.log.len() + 1..=train.epochs {
        let started = Instant::now();
        let mean_loss = run_epoch(&mut state, datasets, text, vocab, train, epoch)?;
        let entry = RunLogEntry {
            epoch,
            mean_loss,
            valid_ndcg10: None,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("pretrain epoch {epoch}: mean loss {mean_loss:.4}");
        state.log.push(entry);
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Tracks the best validation score and the count of evaluations since it improved.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stale,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Verdict {
        match self.best {
            Some((_, b)) if score <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Stale
                }
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                Verdict::Improved
            }
        }
    }

    /// Epoch and score of the best evaluation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub best_ndcg10: f64,
    pub log: Vec<RunLogEntry>,
}

/// Deterministic subset of at most `cap` validation instances.
pub fn cap_instances(instances: &[EvalInstance], cap: Option<usize>, seed: u64) -> Vec<EvalInstance> {
    let mut out = instances.to_vec();
    if let Some(cap) = cap.filter(|&c| c < out.len()) {
        out.shuffle(&mut seed::rng(seed, &["valid-cap"]));
        out.truncate(cap);
    }
    out
}

/// Trains on the target domain, evaluating NDCG@10 on `valid` after each
/// epoch, and returns the best-scoring model.
pub fn finetune(
    model: Model<f32>,
    dataset: &Dataset,
    valid: &[EvalInstance],
    text: &TextualizationConfig,
    vocab: &Vocabulary,
    train: &TrainConfig,
    on_epoch: &mut dyn FnMut(&RunLogEntry) -> Result<()>,
) -> Result<FinetuneOutcome> {
    train.validate()?;
    if train.stage != Stage::Finetune || text.stage != Stage::Finetune {
        return Err(Error::Config("finetuning needs finetune-stage train and text configs".into()));
    }
    if valid.is_empty() {
        return Err(Error::Invalid("finetuning needs a non-empty validation split".into()));
    }
    let valid = cap_instances(valid, train.valid_max_instances, train.seed);
    let datasets = std::slice::from_ref(dataset);
    let opts = EvalOptions::new("valid").with_ks(&[10]);
    let mut state = TrainState::fresh(model);
    let mut stopper = EarlyStopper::new(train.patience);
    let mut best = state.model.clone();
    for epoch in 1..=train.epochs {
        let started = Instant::now();
        let mean_loss = run_epoch(&mut state, datasets, text, vocab, train, epoch)?;
        let scorer = ModelScorer::new(&state.model, &dataset.catalog, text, vocab);
        let ndcg = evaluate(&scorer, &valid, &opts)?.metrics[&10].ndcg;
        let entry = RunLogEntry {
            epoch,
            mean_loss,
            valid_ndcg10: Some(ndcg),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("finetune epoch {epoch}: mean loss {mean_loss:.4}, valid NDCG@10 {ndcg:.4}");
        on_epoch(&entry)?;
        state.log.push(entry);
        match stopper.observe(epoch, ndcg) {
            Verdict::Improved => best = state.model.clone(),
            Verdict::Stale => {}
            Verdict::Stop => break,
        }
    }
    let (best_epoch, best_ndcg10) = stopper.best().unwrap_or((0, 0.0));
    Ok(FinetuneOutcome {
        best,
        best_epoch,
        best_ndcg10,
        log: state.log,
    })
}

#[cfg(test)]
mod tests;
