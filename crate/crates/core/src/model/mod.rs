//! Encoder-decoder transformer: pre-norm blocks, learned absolute positions,
//! embedding tied between both stacks and the output projection.

mod checkpoint;
mod engine;
mod float;
mod optim;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, load_optimizer, save_checkpoint, save_optimizer, FORMAT_VERSION, MAGIC,
};
pub use float::Float;
pub use optim::{adamw_step, AdamW, OptimizerState};
pub use params::{init_params, Parameters, Tensor};

use engine::{Dropout, Engine, Packed};
use params::Layout;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Blocks in the encoder and, separately, in the decoder.
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 4096,
            max_positions: 512,
            dropout_rate: 0.1,
            seed: 42,
            init_std: default_init_std(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return bad("layer, head, width and position counts must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(&format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, driven by this seed.
    Train { seed: u64 },
}

/// Padded encoder inputs and decoder targets. Masked-out cells hold PAD.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    rows: usize,
    enc_len: usize,
    dec_len: usize,
    encoder_ids: Vec<TokenId>,
    encoder_mask: Vec<bool>,
    target_ids: Vec<TokenId>,
    target_mask: Vec<bool>,
}

impl Batch {
    pub fn new(
        rows: usize,
        enc_len: usize,
        dec_len: usize,
        encoder_ids: Vec<TokenId>,
        encoder_mask: Vec<bool>,
        target_ids: Vec<TokenId>,
        target_mask: Vec<bool>,
    ) -> Result<Self> {
        if encoder_ids.len() != rows * enc_len || encoder_mask.len() != rows * enc_len {
            return Err(Error::Shape(format!("encoder matrix must be {rows}x{enc_len}")));
        }
        if target_ids.len() != rows * dec_len || target_mask.len() != rows * dec_len {
            return Err(Error::Shape(format!("target matrix must be {rows}x{dec_len}")));
        }
        let pads_ok = |ids: &[TokenId], mask: &[bool]| ids.iter().zip(mask).all(|(&t, &m)| m || t == PAD);
        if !pads_ok(&encoder_ids, &encoder_mask) || !pads_ok(&target_ids, &target_mask) {
            return Err(Error::Shape("masked-out cells must hold PAD".into()));
        }
        for r in 0..rows {
            if !encoder_mask[r * enc_len..(r + 1) * enc_len].iter().any(|&m| m) {
                return Err(Error::EmptySequence);
            }
        }
        Ok(Batch {
            rows,
            enc_len,
            dec_len,
            encoder_ids,
            encoder_mask,
            target_ids,
            target_mask,
        })
    }

    /// Right-pads ragged rows with PAD.
    pub fn from_rows(encoder: &[Vec<TokenId>], targets: &[Vec<TokenId>]) -> Result<Self> {
        if encoder.len() != targets.len() {
            return Err(Error::Shape("encoder and target row counts differ".into()));
        }
        let rows = encoder.len();
        let enc_len = encoder.iter().map(Vec::len).max().unwrap_or(0);
        let dec_len = targets.iter().map(Vec::len).max().unwrap_or(0);
        let pad = |src: &[Vec<TokenId>], len: usize| {
            let mut ids = Vec::with_capacity(rows * len);
            let mut mask = Vec::with_capacity(rows * len);
            for r in src {
                ids.extend_from_slice(r);
                mask.extend(std::iter::repeat_n(true, r.len()));
                ids.extend(std::iter::repeat_n(PAD, len - r.len()));
                mask.extend(std::iter::repeat_n(false, len - r.len()));
            }
            (ids, mask)
        };
        let (ei, em) = pad(encoder, enc_len);
        let (ti, tm) = pad(targets, dec_len);
        Batch::new(rows, enc_len, dec_len, ei, em, ti, tm)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn enc_len(&self) -> usize {
        self.enc_len
    }

    pub fn dec_len(&self) -> usize {
        self.dec_len
    }

    pub fn encoder_ids(&self) -> &[TokenId] {
        &self.encoder_ids
    }

    pub fn encoder_mask(&self) -> &[bool] {
        &self.encoder_mask
    }

    pub fn target_ids(&self) -> &[TokenId] {
        &self.target_ids
    }

    pub fn target_mask(&self) -> &[bool] {
        &self.target_mask
    }

    /// Packs valid cells; also returns the (row, column) of every decoder row.
    fn pack(&self) -> (Packed, Vec<(usize, usize)>) {
        let mut p = Packed::default();
        let mut cells = Vec::new();
        for r in 0..self.rows {
            let s = p.enc_tokens.len();
            for c in 0..self.enc_len {
                if self.encoder_mask[r * self.enc_len + c] {
                    p.enc_tokens.push(self.encoder_ids[r * self.enc_len + c]);
                }
            }
            p.enc_segs.push((s, p.enc_tokens.len() - s));
            let s = p.dec_tokens.len();
            let mut prev = PAD;
            for c in 0..self.dec_len {
                if self.target_mask[r * self.dec_len + c] {
                    p.dec_tokens.push(prev);
                    prev = self.target_ids[r * self.dec_len + c];
                    cells.push((r, c));
                }
            }
            p.dec_segs.push((s, p.dec_tokens.len() - s));
            p.dec_enc.push(r);
        }
        (p, cells)
    }
}

/// Decoder logits laid out like the target matrix; only valid cells carry a row.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    rows: usize,
    dec_len: usize,
    vocab: usize,
    data: Vec<F>,
    index: Vec<Option<usize>>,
}

impl<F: Float> Logits<F> {
    /// Every cell present, `data` row-major as rows x dec_len x vocab.
    pub fn from_dense(rows: usize, dec_len: usize, vocab: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * dec_len * vocab {
            return Err(Error::Shape("logit tensor size mismatch".into()));
        }
        Ok(Logits {
            rows,
            dec_len,
            vocab,
            data,
            index: (0..rows * dec_len).map(Some).collect(),
        })
    }

    fn packed(rows: usize, dec_len: usize, vocab: usize, data: Vec<F>, cells: &[(usize, usize)]) -> Self {
        let mut index = vec![None; rows * dec_len];
        for (i, &(r, c)) in cells.iter().enumerate() {
            index[r * dec_len + c] = Some(i);
        }
        Logits {
            rows,
            dec_len,
            vocab,
            data,
            index,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.dec_len, self.vocab)
    }

    pub fn at(&self, row: usize, col: usize) -> Option<&[F]> {
        let i = (*self.index.get(row * self.dec_len + col)?)?;
        Some(&self.data[i * self.vocab..(i + 1) * self.vocab])
    }
}

/// log softmax(row)[target], accumulated in f64.
fn log_prob<F: Float>(row: &[F], target: usize) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.f64()));
    let lse = m + row.iter().map(|&x| (x.f64() - m).exp()).sum::<f64>().ln();
    row[target].f64() - lse
}

/// Mean negative log-likelihood of the non-PAD targets.
pub fn loss<F: Float>(logits: &Logits<F>, targets: &[TokenId], mask: &[bool]) -> Result<f64> {
    let (rows, len, vocab) = logits.shape();
    if targets.len() != rows * len || mask.len() != rows * len {
        return Err(Error::Shape("targets do not match logits".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..rows {
        for c in 0..len {
            let i = r * len + c;
            if !mask[i] {
                continue;
            }
            let t = targets[i] as usize;
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: targets[i], vocab });
            }
            let row = logits
                .at(r, c)
                .ok_or_else(|| Error::Shape(format!("no logits at ({r}, {c})")))?;
            total -= log_prob(row, t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyTargets);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone)]
pub struct Model<F = f32> {
    config: ModelConfig,
    params: Parameters<F>,
    layout: Layout,
}

impl<F: Float> Model<F> {
    /// Checks names and shapes of `params` against the manifest for `config`.
    pub fn new(config: ModelConfig, params: Parameters<F>) -> Result<Self> {
        config.validate()?;
        let (manifest, layout) = params::manifest(&config);
        if manifest.len() != params.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                manifest.len(),
                params.tensors.len()
            )));
        }
        for ((name, shape), t) in manifest.iter().zip(&params.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::TensorMismatch {
                    name: name.clone(),
                    expected: format!("{name} {shape:?}"),
                    found: format!("{} {:?}", t.name, t.shape),
                });
            }
        }
        Ok(Model { config, params, layout })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Model::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<F> {
        &mut self.params
    }

    pub fn into_params(self) -> Parameters<F> {
        self.params
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn engine(&self) -> Engine<'_, F> {
        Engine {
            config: &self.config,
            params: &self.params,
            layout: &self.layout,
        }
    }

    /// Evaluation-mode logits.
    pub fn forward(&self, batch: &Batch) -> Result<Logits<F>> {
        let (packed, cells) = batch.pack();
        let data = self.engine().logits(&packed)?;
        Ok(Logits::packed(batch.rows, batch.dec_len, self.config.vocab_size, data, &cells))
    }

    /// Mean target NLL and its exact gradient.
    pub fn loss_and_grad(&self, batch: &Batch, mode: Mode) -> Result<(f64, Parameters<F>)> {
        self.scaled_loss_and_grad(batch, mode, 1.0)
    }

    fn scaled_loss_and_grad(&self, batch: &Batch, mode: Mode, scale: f64) -> Result<(f64, Parameters<F>)> {
        let (packed, cells) = batch.pack();
        if cells.is_empty() {
            return Err(Error::EmptyTargets);
        }
        let mut dropout = match mode {
            Mode::Train { seed } if self.config.dropout_rate > 0.0 => Some(Dropout {
                rate: self.config.dropout_rate,
                rng: crate::seed::rng(seed, &["dropout"]),
            }),
            _ => None,
        };
        let engine = self.engine();
        let (mut logits, trace) = engine.forward_traced(&packed, &mut dropout)?;
        let v = self.config.vocab_size;
        let n = cells.len() as f64;
        let mut total = 0.0;
        for (i, &(r, c)) in cells.iter().enumerate() {
            let t = batch.target_ids[r * batch.dec_len + c] as usize;
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t as TokenId, vocab: v });
            }
            let row = &mut logits[i * v..(i + 1) * v];
            total -= log_prob(row, t);
            // Softmax minus one-hot, scaled by 1/|y|.
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut sum = 0.0;
            for x in row.iter_mut() {
                let e = (x.f64() - m.f64()).exp();
                *x = F::of(e);
                sum += e;
            }
            for x in row.iter_mut() {
                *x = F::of(x.f64() / sum * scale / n);
            }
            row[t] -= F::of(scale / n);
        }
        let grads = engine.backward(&packed, trace, &logits)?;
        Ok((scale * total / n, grads))
    }

    /// Per-token log-probabilities of each target sequence given one encoder input.
    /// The encoder runs once; all targets attend to the same encoder output.
    pub fn sequence_logprobs(&self, encoder_ids: &[TokenId], targets: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        if encoder_ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut p = Packed {
            enc_tokens: encoder_ids.to_vec(),
            enc_segs: vec![(0, encoder_ids.len())],
            ..Packed::default()
        };
        for t in targets {
            let s = p.dec_tokens.len();
            p.dec_tokens.push(PAD);
            p.dec_tokens.extend_from_slice(&t[..t.len().saturating_sub(1)]);
            p.dec_segs.push((s, t.len()));
            p.dec_enc.push(0);
            if t.is_empty() {
                p.dec_tokens.pop();
            }
        }
        let v = self.config.vocab_size;
        for &t in targets.iter().flatten() {
            if t as usize >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
        }
        let logits = self.engine().logits(&p)?;
        Ok(targets
            .iter()
            .zip(&p.dec_segs)
            .map(|(t, &(s, _))| {
                t.iter()
                    .enumerate()
                    .map(|(j, &tok)| log_prob(&logits[(s + j) * v..(s + j + 1) * v], tok as usize))
                    .collect()
            })
            .collect())
    }
}
