//! Perplexity scoring of candidate item texts and deterministic ranking.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Catalog;
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::mitp::{encode_prompt, item_tokens};
use crate::model::{Float, Model};
use crate::textualize::TextualizationConfig;
use crate::tokenizer::{is_sentinel, sentinel_id, TokenId, Vocabulary};

/// Candidates per decoder pass.
pub const SCORE_CHUNK: usize = 64;

/// Encoder ids of a prompted history whose next item is the sentinel slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoringContext {
    encoder_ids: Vec<TokenId>,
}

impl ScoringContext {
    pub fn new(history: &[Vec<TokenId>], text: &TextualizationConfig, vocab: &Vocabulary) -> Result<Self> {
        let mut slots: Vec<Option<&[TokenId]>> = history.iter().map(|t| Some(t.as_slice())).collect();
        slots.push(None);
        let (encoder_ids, _) = encode_prompt(&slots, text, vocab)?;
        Ok(ScoringContext { encoder_ids })
    }

    pub fn from_items(
        history: &[String],
        catalog: &Catalog,
        text: &TextualizationConfig,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let tokens = history
            .iter()
            .map(|id| {
                let item = catalog.get(id).ok_or_else(|| Error::Invalid(format!("item `{id}` not in catalog")))?;
                item_tokens(item, text, vocab)
            })
            .collect::<Result<Vec<_>>>()?;
        ScoringContext::new(&tokens, text, vocab)
    }

    /// Wraps raw encoder ids, which must hold exactly one sentinel.
    pub fn from_ids(encoder_ids: Vec<TokenId>) -> Result<Self> {
        let n = encoder_ids.iter().filter(|&&t| is_sentinel(t)).count();
        if n != 1 || !encoder_ids.contains(&sentinel_id(0)) {
            return Err(Error::Invalid(format!("scoring context needs exactly <extra_id_0>, found {n} sentinels")));
        }
        Ok(ScoringContext { encoder_ids })
    }

    pub fn encoder_ids(&self) -> &[TokenId] {
        &self.encoder_ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub item_id: String,
    pub perplexity: f64,
    /// Mean negative log-likelihood per text token; `ln(perplexity)`.
    pub mean_nll: f64,
    pub token_count: usize,
}

/// Mean negative log-likelihood of a token sequence.
pub fn mean_nll(token_logprobs: &[f64]) -> f64 {
    -token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64
}

/// `exp` of the mean negative log-likelihood.
pub fn perplexity(token_logprobs: &[f64]) -> f64 {
    mean_nll(token_logprobs).exp()
}

/// Scores candidates in chunks of [`SCORE_CHUNK`]; the encoder runs once per chunk.
pub fn score_candidates<F: Float>(
    model: &Model<F>,
    context: &ScoringContext,
    candidates: &[(&str, &[TokenId])],
) -> Result<Vec<CandidateScore>> {
    let mut out = Vec::with_capacity(candidates.len());
    for chunk in candidates.chunks(SCORE_CHUNK) {
        let mut targets = Vec::with_capacity(chunk.len());
        for (id, tokens) in chunk {
            if tokens.is_empty() {
                return Err(Error::Invalid(format!("candidate `{id}` has no text tokens")));
            }
            let mut t = Vec::with_capacity(tokens.len() + 1);
            t.push(sentinel_id(0));
            t.extend_from_slice(tokens);
            targets.push(t);
        }
        let logprobs = model.sequence_logprobs(&context.encoder_ids, &targets)?;
        for ((id, tokens), lp) in chunk.iter().zip(logprobs) {
            // lp[0] is the sentinel itself.
            let n = tokens.len();
            let mean_nll = mean_nll(&lp[1..]);
            let perplexity = mean_nll.exp();
            if !(perplexity.is_finite() && perplexity > 0.0) {
                return Err(Error::NonFinite(format!("perplexity of candidate `{id}`")));
            }
            out.push(CandidateScore {
                item_id: id.to_string(),
                perplexity,
                mean_nll,
                token_count: n,
            });
        }
    }
    Ok(out)
}

pub fn score_candidate<F: Float>(
    model: &Model<F>,
    context: &ScoringContext,
    item_id: &str,
    tokens: &[TokenId],
) -> Result<CandidateScore> {
    Ok(score_candidates(model, context, &[(item_id, tokens)])?.remove(0))
}

/// Ascending cost. Ties put `positive` last, then ascending item id.
pub fn order_by_cost(items: &[(&str, f64)], positive: Option<&str>) -> Vec<String> {
    let mut v: Vec<&(&str, f64)> = items.iter().collect();
    v.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| (Some(a.0) == positive).cmp(&(Some(b.0) == positive)))
            .then_with(|| a.0.cmp(b.0))
    });
    v.into_iter().map(|(id, _)| id.to_string()).collect()
}

pub fn order_by_perplexity(scores: &[CandidateScore], positive: Option<&str>) -> Vec<String> {
    let items: Vec<(&str, f64)> = scores.iter().map(|s| (s.item_id.as_str(), s.perplexity)).collect();
    order_by_cost(&items, positive)
}

pub fn rank_candidates<F: Float>(
    model: &Model<F>,
    context: &ScoringContext,
    candidates: &[(&str, &[TokenId])],
    positive: Option<&str>,
) -> Result<Vec<String>> {
    Ok(order_by_perplexity(&score_candidates(model, context, candidates)?, positive))
}

/// Adapts a model to the [`Scorer`] interface; costs are perplexities.
pub struct ModelScorer<'a, F = f32> {
    model: &'a Model<F>,
    catalog: &'a Catalog,
    text: &'a TextualizationConfig,
    vocab: &'a Vocabulary,
    cache: std::sync::Mutex<HashMap<String, Vec<TokenId>>>,
}

impl<'a, F: Float> ModelScorer<'a, F> {
    pub fn new(model: &'a Model<F>, catalog: &'a Catalog, text: &'a TextualizationConfig, vocab: &'a Vocabulary) -> Self {
        ModelScorer {
            model,
            catalog,
            text,
            vocab,
            cache: Default::default(),
        }
    }

    fn tokens(&self, id: &str) -> Result<Vec<TokenId>> {
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(t) = cache.get(id) {
            return Ok(t.clone());
        }
        let item = self
            .catalog
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("item `{id}` not in catalog")))?;
        let t = item_tokens(item, self.text, self.vocab)?;
        cache.insert(id.to_string(), t.clone());
        Ok(t)
    }
}

impl<F: Float> Scorer for ModelScorer<'_, F> {
    /// Candidates are scored in item-id order so that a candidate's score
    /// depends only on the candidate set, not on the order it was given in.
    fn costs(&self, history: &[String], candidates: &[String]) -> Result<Vec<f64>> {
        let context = ScoringContext::from_items(history, self.catalog, self.text, self.vocab)?;
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| candidates[a].cmp(&candidates[b]));
        let tokens = order.iter().map(|&i| self.tokens(&candidates[i])).collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(&str, &[TokenId])> = order
            .iter()
            .zip(&tokens)
            .map(|(&i, t)| (candidates[i].as_str(), t.as_slice()))
            .collect();
        let scores = score_candidates(self.model, &context, &pairs)?;
        let mut costs = vec![0.0; candidates.len()];
        for (&i, s) in order.iter().zip(scores) {
            costs[i] = s.perplexity;
        }
        Ok(costs)
    }
}
