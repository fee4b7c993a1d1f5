//! Packed forward and reverse pass.
//!
//! Sequences are stored back to back without padding; a segment is a
//! `(start, len)` range of rows. Positions count from 0 inside each segment.

use rand::Rng as _;

use super::float::{gemm, View, ViewMut};
use super::params::{Layout, Parameters};
use super::{Float, ModelConfig};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tokenizer::TokenId;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub(crate) struct Packed {
    pub enc_tokens: Vec<TokenId>,
    pub enc_segs: Vec<(usize, usize)>,
    /// Decoder input tokens (targets shifted right behind PAD).
    pub dec_tokens: Vec<TokenId>,
    pub dec_segs: Vec<(usize, usize)>,
    /// Encoder segment attended to by each decoder segment.
    pub dec_enc: Vec<usize>,
}

pub(crate) struct Dropout {
    pub rate: f64,
    pub rng: Rng,
}

impl Dropout {
    fn apply<F: Float>(&mut self, x: &mut [F]) -> Vec<bool> {
        let scale = F::of(1.0 / (1.0 - self.rate));
        x.iter_mut()
            .map(|v| {
                let keep = self.rng.random::<f64>() >= self.rate;
                *v = if keep { *v * scale } else { F::zero() };
                keep
            })
            .collect()
    }
}

fn unmask<F: Float>(x: &mut [F], keep: &[bool], rate: f64) {
    if keep.is_empty() {
        return;
    }
    let scale = F::of(1.0 / (1.0 - rate));
    for (v, &k) in x.iter_mut().zip(keep) {
        *v = if k { *v * scale } else { F::zero() };
    }
}

#[derive(Clone, Copy)]
struct Span {
    q0: usize,
    qn: usize,
    k0: usize,
    kn: usize,
    causal: bool,
}

fn self_spans(segs: &[(usize, usize)], causal: bool) -> Vec<Span> {
    segs.iter()
        .map(|&(s, n)| Span {
            q0: s,
            qn: n,
            k0: s,
            kn: n,
            causal,
        })
        .collect()
}

fn matmul<F: Float>(x: &[F], rows: usize, w: &[F], din: usize, dout: usize) -> Vec<F> {
    let mut y = vec![F::zero(); rows * dout];
    gemm(F::one(), View::dense(x, rows, din), View::dense(w, din, dout), F::zero(), ViewMut::dense(&mut y, rows, dout));
    y
}

/// dw += x^T dy
fn weight_grad<F: Float>(x: &[F], dy: &[F], rows: usize, din: usize, dout: usize, dw: &mut [F]) {
    gemm(F::one(), View::dense(x, rows, din).t(), View::dense(dy, rows, dout), F::one(), ViewMut::dense(dw, din, dout));
}

/// dx = dy w^T + beta dx
fn input_grad<F: Float>(dy: &[F], w: &[F], rows: usize, din: usize, dout: usize, beta: F, dx: &mut [F]) {
    gemm(F::one(), View::dense(dy, rows, dout), View::dense(w, din, dout).t(), beta, ViewMut::dense(dx, rows, din));
}

fn rmsnorm<F: Float>(x: &[F], g: &[F], d: usize) -> (Vec<F>, Vec<F>) {
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|&v| v * v).sum::<F>() / F::of(d as f64);
        let iv = F::one() / (ms + F::of(NORM_EPS)).sqrt();
        for ((o, &v), &gg) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(g) {
            *o = v * iv * gg;
        }
        inv.push(iv);
    }
    (y, inv)
}

/// Accumulates into `dx` and `dg`.
fn rmsnorm_back<F: Float>(dy: &[F], x: &[F], g: &[F], inv: &[F], d: usize, dx: &mut [F], dg: &mut [F]) {
    let df = F::of(d as f64);
    for (r, &iv) in inv.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut dot = F::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xr[j] * iv;
            dot += dyr[j] * g[j] * xr[j];
        }
        let c = iv * iv * iv * dot / df;
        for (j, o) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
            *o += iv * g[j] * dyr[j] - c * xr[j];
        }
    }
}

fn gelu<F: Float>(u: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let t = (c * (u + F::of(0.044715) * u * u * u)).tanh();
    F::of(0.5) * u * (F::one() + t)
}

fn gelu_grad<F: Float>(u: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let a = F::of(0.044715);
    let t = (c * (u + a * u * u * u)).tanh();
    F::of(0.5) * (F::one() + t) + F::of(0.5) * u * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * u * u)
}

fn check_finite<F: Float>(x: &[F], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[derive(Default)]
struct AttnTrace<F> {
    probs: Vec<F>,
    keep: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
fn attention<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    spans: &[Span],
    heads: usize,
    d: usize,
    dropout: &mut Option<Dropout>,
    trace: bool,
) -> (Vec<F>, AttnTrace<F>) {
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut ctx = vec![F::zero(); q.len()];
    let mut tr = AttnTrace::default();
    let mut p = Vec::new();
    for sp in spans.iter().filter(|sp| sp.qn > 0 && sp.kn > 0) {
        for h in 0..heads {
            p.clear();
            p.resize(sp.qn * sp.kn, F::zero());
            gemm(
                scale,
                View::block(q, d, sp.q0, sp.qn, h * dh, dh),
                View::block(k, d, sp.k0, sp.kn, h * dh, dh).t(),
                F::zero(),
                ViewMut::dense(&mut p, sp.qn, sp.kn),
            );
            for i in 0..sp.qn {
                let row = &mut p[i * sp.kn..(i + 1) * sp.kn];
                let lim = if sp.causal { i + 1 } else { sp.kn };
                let m = row[..lim].iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                let mut sum = F::zero();
                for x in &mut row[..lim] {
                    *x = (*x - m).exp();
                    sum += *x;
                }
                for x in &mut row[..lim] {
                    *x /= sum;
                }
                row[lim..].iter_mut().for_each(|x| *x = F::zero());
            }
            if trace {
                tr.probs.extend_from_slice(&p);
            }
            if let Some(dr) = dropout.as_mut() {
                let keep = dr.apply(&mut p);
                if trace {
                    tr.keep.extend(keep);
                }
            }
            gemm(
                F::one(),
                View::dense(&p, sp.qn, sp.kn),
                View::block(v, d, sp.k0, sp.kn, h * dh, dh),
                F::zero(),
                ViewMut::block(&mut ctx, d, sp.q0, sp.qn, h * dh, dh),
            );
        }
    }
    (ctx, tr)
}

/// Returns dq and accumulates into dk, dv.
#[allow(clippy::too_many_arguments)]
fn attention_back<F: Float>(
    dctx: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    spans: &[Span],
    heads: usize,
    d: usize,
    tr: &AttnTrace<F>,
    rate: f64,
    dk: &mut [F],
    dv: &mut [F],
) -> Vec<F> {
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![F::zero(); q.len()];
    let mut off = 0;
    let (mut pd, mut dp) = (Vec::new(), Vec::new());
    for sp in spans.iter().filter(|sp| sp.qn > 0 && sp.kn > 0) {
        for h in 0..heads {
            let n = sp.qn * sp.kn;
            let p = &tr.probs[off..off + n];
            let keep = if tr.keep.is_empty() { &[][..] } else { &tr.keep[off..off + n] };
            off += n;
            pd.clear();
            pd.extend_from_slice(p);
            unmask(&mut pd, keep, rate);
            dp.clear();
            dp.resize(n, F::zero());
            gemm(
                F::one(),
                View::block(dctx, d, sp.q0, sp.qn, h * dh, dh),
                View::block(v, d, sp.k0, sp.kn, h * dh, dh).t(),
                F::zero(),
                ViewMut::dense(&mut dp, sp.qn, sp.kn),
            );
            gemm(
                F::one(),
                View::dense(&pd, sp.qn, sp.kn).t(),
                View::block(dctx, d, sp.q0, sp.qn, h * dh, dh),
                F::one(),
                ViewMut::block(dv, d, sp.k0, sp.kn, h * dh, dh),
            );
            unmask(&mut dp, keep, rate);
            for i in 0..sp.qn {
                let pr = &p[i * sp.kn..(i + 1) * sp.kn];
                let dr = &mut dp[i * sp.kn..(i + 1) * sp.kn];
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pp) in dr.iter_mut().zip(pr) {
                    *x = pp * (*x - dot);
                }
            }
            gemm(
                scale,
                View::dense(&dp, sp.qn, sp.kn),
                View::block(k, d, sp.k0, sp.kn, h * dh, dh),
                F::one(),
                ViewMut::block(&mut dq, d, sp.q0, sp.qn, h * dh, dh),
            );
            gemm(
                scale,
                View::dense(&dp, sp.qn, sp.kn).t(),
                View::block(q, d, sp.q0, sp.qn, h * dh, dh),
                F::one(),
                ViewMut::block(dk, d, sp.k0, sp.kn, h * dh, dh),
            );
        }
    }
    dq
}

struct AttnSubTrace<F> {
    x: Vec<F>,
    inv: Vec<F>,
    a: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    attn: AttnTrace<F>,
    ctx: Vec<F>,
}

struct FfnSubTrace<F> {
    x: Vec<F>,
    inv: Vec<F>,
    b: Vec<F>,
    u: Vec<F>,
    r: Vec<F>,
    keep: Vec<bool>,
}

enum SubTrace<F> {
    Attn(AttnSubTrace<F>),
    Ffn(FfnSubTrace<F>),
}

struct Trace<F> {
    enc: Vec<SubTrace<F>>,
    enc_last: Vec<F>,
    enc_inv: Vec<F>,
    memory: Vec<F>,
    dec: Vec<SubTrace<F>>,
    dec_last: Vec<F>,
    dec_inv: Vec<F>,
    z: Vec<F>,
}

#[derive(Clone, Copy)]
struct AttnIdx {
    norm: usize,
    w: [usize; 4],
}

#[derive(Clone, Copy)]
struct FfnIdx {
    norm: usize,
    w_in: usize,
    w_out: usize,
}

fn sub_name<F: Float>(p: &Parameters<F>, norm: usize) -> String {
    let n = &p.tensors[norm].name;
    n.strip_suffix("_norm").unwrap_or(n).to_string()
}

pub(crate) struct Engine<'a, F> {
    pub config: &'a ModelConfig,
    pub params: &'a Parameters<F>,
    pub layout: &'a Layout,
}

impl<'a, F: Float> Engine<'a, F> {
    fn d(&self) -> usize {
        self.config.d_model
    }

    fn embed(&self, tokens: &[TokenId], segs: &[(usize, usize)], pos_idx: usize) -> Vec<F> {
        let d = self.d();
        let emb = self.params.at(self.layout.embedding);
        let pos = self.params.at(pos_idx);
        let mut x = vec![F::zero(); tokens.len() * d];
        for &(s, n) in segs {
            for j in 0..n {
                let t = tokens[s + j] as usize;
                let row = &mut x[(s + j) * d..(s + j + 1) * d];
                for ((o, &e), &pp) in row.iter_mut().zip(&emb[t * d..(t + 1) * d]).zip(&pos[j * d..(j + 1) * d]) {
                    *o = e + pp;
                }
            }
        }
        x
    }

    fn embed_back(&self, dx: &[F], tokens: &[TokenId], segs: &[(usize, usize)], pos_idx: usize, grads: &mut Parameters<F>) {
        let d = self.d();
        for &(s, n) in segs {
            for j in 0..n {
                let t = tokens[s + j] as usize;
                let g = &dx[(s + j) * d..(s + j + 1) * d];
                let emb = grads.at_mut(self.layout.embedding);
                emb[t * d..(t + 1) * d].iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                let pos = grads.at_mut(pos_idx);
                pos[j * d..(j + 1) * d].iter_mut().zip(g).for_each(|(o, &v)| *o += v);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_sub(
        &self,
        ix: AttnIdx,
        x: Vec<F>,
        memory: Option<&[F]>,
        spans: &[Span],
        dropout: &mut Option<Dropout>,
        trace: Option<&mut Vec<SubTrace<F>>>,
    ) -> Result<Vec<F>> {
        let d = self.d();
        let p = self.params;
        let rows = x.len() / d;
        let (a, inv) = rmsnorm(&x, p.at(ix.norm), d);
        let q = matmul(&a, rows, p.at(ix.w[0]), d, d);
        let src = memory.unwrap_or(&a);
        let srows = src.len() / d;
        let k = matmul(src, srows, p.at(ix.w[1]), d, d);
        let v = matmul(src, srows, p.at(ix.w[2]), d, d);
        let (ctx, attn) = attention(&q, &k, &v, spans, self.config.n_heads, d, dropout, trace.is_some());
        let mut out = x.clone();
        gemm(F::one(), View::dense(&ctx, rows, d), View::dense(p.at(ix.w[3]), d, d), F::one(), ViewMut::dense(&mut out, rows, d));
        check_finite(&out, &sub_name(p, ix.norm))?;
        if let Some(t) = trace {
            t.push(SubTrace::Attn(AttnSubTrace { x, inv, a, q, k, v, attn, ctx }));
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_sub_back(
        &self,
        ix: AttnIdx,
        tr: &AttnSubTrace<F>,
        dout: Vec<F>,
        memory: Option<&[F]>,
        dmemory: Option<&mut [F]>,
        spans: &[Span],
        grads: &mut Parameters<F>,
    ) -> Vec<F> {
        let d = self.d();
        let p = self.params;
        let rows = dout.len() / d;
        weight_grad(&tr.ctx, &dout, rows, d, d, grads.at_mut(ix.w[3]));
        let mut dctx = vec![F::zero(); rows * d];
        input_grad(&dout, p.at(ix.w[3]), rows, d, d, F::zero(), &mut dctx);
        let mut dk = vec![F::zero(); tr.k.len()];
        let mut dv = vec![F::zero(); tr.v.len()];
        let rate = self.config.dropout_rate;
        let dq = attention_back(&dctx, &tr.q, &tr.k, &tr.v, spans, self.config.n_heads, d, &tr.attn, rate, &mut dk, &mut dv);
        weight_grad(&tr.a, &dq, rows, d, d, grads.at_mut(ix.w[0]));
        let mut da = vec![F::zero(); rows * d];
        input_grad(&dq, p.at(ix.w[0]), rows, d, d, F::zero(), &mut da);
        let src = memory.unwrap_or(&tr.a);
        let srows = src.len() / d;
        weight_grad(src, &dk, srows, d, d, grads.at_mut(ix.w[1]));
        weight_grad(src, &dv, srows, d, d, grads.at_mut(ix.w[2]));
        let dsrc: &mut [F] = match dmemory {
            Some(m) => m,
            None => &mut da[..],
        };
        input_grad(&dk, p.at(ix.w[1]), srows, d, d, F::one(), dsrc);
        input_grad(&dv, p.at(ix.w[2]), srows, d, d, F::one(), dsrc);
        let mut dx = dout;
        rmsnorm_back(&da, &tr.x, p.at(ix.norm), &tr.inv, d, &mut dx, grads.at_mut(ix.norm));
        dx
    }

    fn ffn_sub(
        &self,
        ix: FfnIdx,
        x: Vec<F>,
        dropout: &mut Option<Dropout>,
        trace: Option<&mut Vec<SubTrace<F>>>,
    ) -> Result<Vec<F>> {
        let (d, f) = (self.d(), self.config.d_ff);
        let p = self.params;
        let rows = x.len() / d;
        let (b, inv) = rmsnorm(&x, p.at(ix.norm), d);
        let u = matmul(&b, rows, p.at(ix.w_in), d, f);
        let mut r: Vec<F> = u.iter().map(|&v| gelu(v)).collect();
        let keep = match dropout.as_mut() {
            Some(dr) => dr.apply(&mut r),
            None => Vec::new(),
        };
        let mut out = x.clone();
        gemm(F::one(), View::dense(&r, rows, f), View::dense(p.at(ix.w_out), f, d), F::one(), ViewMut::dense(&mut out, rows, d));
        check_finite(&out, &sub_name(p, ix.norm))?;
        if let Some(t) = trace {
            t.push(SubTrace::Ffn(FfnSubTrace { x, inv, b, u, r, keep }));
        }
        Ok(out)
    }

    fn ffn_sub_back(&self, ix: FfnIdx, tr: &FfnSubTrace<F>, dout: Vec<F>, grads: &mut Parameters<F>) -> Vec<F> {
        let (d, f) = (self.d(), self.config.d_ff);
        let p = self.params;
        let rows = dout.len() / d;
        weight_grad(&tr.r, &dout, rows, f, d, grads.at_mut(ix.w_out));
        let mut du = vec![F::zero(); rows * f];
        input_grad(&dout, p.at(ix.w_out), rows, f, d, F::zero(), &mut du);
        unmask(&mut du, &tr.keep, self.config.dropout_rate);
        for (g, &u) in du.iter_mut().zip(&tr.u) {
            *g *= gelu_grad(u);
        }
        weight_grad(&tr.b, &du, rows, d, f, grads.at_mut(ix.w_in));
        let mut db = vec![F::zero(); rows * d];
        input_grad(&du, p.at(ix.w_in), rows, d, f, F::zero(), &mut db);
        let mut dx = dout;
        rmsnorm_back(&db, &tr.x, p.at(ix.norm), &tr.inv, d, &mut dx, grads.at_mut(ix.norm));
        dx
    }

    fn enc_subs(&self) -> Vec<(Option<AttnIdx>, Option<FfnIdx>)> {
        self.layout
            .encoder
            .iter()
            .map(|b| {
                (
                    Some(AttnIdx { norm: b.attn_norm, w: b.attn }),
                    Some(FfnIdx { norm: b.ffn_norm, w_in: b.w_in, w_out: b.w_out }),
                )
            })
            .collect()
    }

    fn validate(&self, packed: &Packed) -> Result<()> {
        let vocab = self.config.vocab_size;
        for &t in packed.enc_tokens.iter().chain(&packed.dec_tokens) {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
        }
        let cap = self.config.max_positions;
        for &(_, n) in packed.enc_segs.iter().chain(&packed.dec_segs) {
            if n > cap {
                return Err(Error::SequenceOverflow { needed: n, cap });
            }
        }
        if packed.dec_enc.len() != packed.dec_segs.len() || packed.dec_enc.iter().any(|&e| e >= packed.enc_segs.len()) {
            return Err(Error::Shape("decoder segments reference missing encoder segments".into()));
        }
        Ok(())
    }

    /// Final normalized encoder states, one row per encoder token.
    fn encode(&self, packed: &Packed, dropout: &mut Option<Dropout>, mut trace: Option<&mut Trace<F>>) -> Result<Vec<F>> {
        let d = self.d();
        let spans = self_spans(&packed.enc_segs, false);
        let mut x = self.embed(&packed.enc_tokens, &packed.enc_segs, self.layout.enc_position);
        for (a, f) in self.enc_subs() {
            x = self.attn_sub(a.unwrap(), x, None, &spans, dropout, trace.as_deref_mut().map(|t| &mut t.enc))?;
            x = self.ffn_sub(f.unwrap(), x, dropout, trace.as_deref_mut().map(|t| &mut t.enc))?;
        }
        let (memory, inv) = rmsnorm(&x, self.params.at(self.layout.enc_final_norm), d);
        if let Some(t) = trace {
            t.enc_last = x;
            t.enc_inv = inv;
            t.memory = memory.clone();
        }
        Ok(memory)
    }

    fn cross_spans(packed: &Packed) -> Vec<Span> {
        packed
            .dec_segs
            .iter()
            .zip(&packed.dec_enc)
            .map(|(&(s, n), &e)| {
                let (k0, kn) = packed.enc_segs[e];
                Span { q0: s, qn: n, k0, kn, causal: false }
            })
            .collect()
    }

    /// Final normalized decoder states, one row per decoder token.
    fn decode(
        &self,
        packed: &Packed,
        memory: &[F],
        dropout: &mut Option<Dropout>,
        mut trace: Option<&mut Trace<F>>,
    ) -> Result<Vec<F>> {
        let d = self.d();
        let self_sp = self_spans(&packed.dec_segs, true);
        let cross_sp = Self::cross_spans(packed);
        let mut y = self.embed(&packed.dec_tokens, &packed.dec_segs, self.layout.dec_position);
        for b in &self.layout.decoder {
            let sa = AttnIdx { norm: b.self_norm, w: b.self_attn };
            let ca = AttnIdx { norm: b.cross_norm, w: b.cross_attn };
            let ff = FfnIdx { norm: b.ffn_norm, w_in: b.w_in, w_out: b.w_out };
            y = self.attn_sub(sa, y, None, &self_sp, dropout, trace.as_deref_mut().map(|t| &mut t.dec))?;
            y = self.attn_sub(ca, y, Some(memory), &cross_sp, dropout, trace.as_deref_mut().map(|t| &mut t.dec))?;
            y = self.ffn_sub(ff, y, dropout, trace.as_deref_mut().map(|t| &mut t.dec))?;
        }
        let (z, inv) = rmsnorm(&y, self.params.at(self.layout.dec_final_norm), d);
        if let Some(t) = trace {
            t.dec_last = y;
            t.dec_inv = inv;
            t.z = z.clone();
        }
        Ok(z)
    }

    /// Logits for every decoder row: z E^T.
    fn project(&self, z: &[F]) -> Result<Vec<F>> {
        let (d, v) = (self.d(), self.config.vocab_size);
        let rows = z.len() / d;
        let mut logits = vec![F::zero(); rows * v];
        gemm(
            F::one(),
            View::dense(z, rows, d),
            View::dense(self.params.at(self.layout.embedding), v, d).t(),
            F::zero(),
            ViewMut::dense(&mut logits, rows, v),
        );
        check_finite(&logits, "logits")?;
        Ok(logits)
    }

    pub fn logits(&self, packed: &Packed) -> Result<Vec<F>> {
        self.validate(packed)?;
        let mut none = None;
        let memory = self.encode(packed, &mut none, None)?;
        let z = self.decode(packed, &memory, &mut none, None)?;
        self.project(&z)
    }

    /// Forward pass that keeps the intermediates needed by `backward`.
    pub fn forward_traced(&self, packed: &Packed, dropout: &mut Option<Dropout>) -> Result<(Vec<F>, TraceHandle<F>)> {
        self.validate(packed)?;
        let mut tr = Trace {
            enc: Vec::new(),
            enc_last: Vec::new(),
            enc_inv: Vec::new(),
            memory: Vec::new(),
            dec: Vec::new(),
            dec_last: Vec::new(),
            dec_inv: Vec::new(),
            z: Vec::new(),
        };
        let memory = self.encode(packed, dropout, Some(&mut tr))?;
        let z = self.decode(packed, &memory, dropout, Some(&mut tr))?;
        let logits = self.project(&z)?;
        Ok((logits, TraceHandle(tr)))
    }

    /// Gradients of all parameters given d(loss)/d(logits).
    pub fn backward(&self, packed: &Packed, trace: TraceHandle<F>, dlogits: &[F]) -> Result<Parameters<F>> {
        let tr = trace.0;
        let (d, v) = (self.d(), self.config.vocab_size);
        let lay = self.layout;
        let p = self.params;
        let mut grads = p.zeros_like();
        let rows = tr.z.len() / d;
        gemm(
            F::one(),
            View::dense(dlogits, rows, v).t(),
            View::dense(&tr.z, rows, d),
            F::one(),
            ViewMut::dense(grads.at_mut(lay.embedding), v, d),
        );
        let mut dz = vec![F::zero(); rows * d];
        gemm(
            F::one(),
            View::dense(dlogits, rows, v),
            View::dense(p.at(lay.embedding), v, d),
            F::zero(),
            ViewMut::dense(&mut dz, rows, d),
        );
        let mut dy = vec![F::zero(); rows * d];
        rmsnorm_back(&dz, &tr.dec_last, p.at(lay.dec_final_norm), &tr.dec_inv, d, &mut dy, grads.at_mut(lay.dec_final_norm));

        let self_sp = self_spans(&packed.dec_segs, true);
        let cross_sp = Self::cross_spans(packed);
        let mut dmem = vec![F::zero(); tr.memory.len()];
        let mut subs = tr.dec.iter().rev();
        for b in lay.decoder.iter().rev() {
            let (Some(SubTrace::Ffn(f)), Some(SubTrace::Attn(c)), Some(SubTrace::Attn(s))) = (subs.next(), subs.next(), subs.next()) else {
                return Err(Error::Shape("decoder trace out of order".into()));
            };
            dy = self.ffn_sub_back(FfnIdx { norm: b.ffn_norm, w_in: b.w_in, w_out: b.w_out }, f, dy, &mut grads);
            dy = self.attn_sub_back(
                AttnIdx { norm: b.cross_norm, w: b.cross_attn },
                c,
                dy,
                Some(&tr.memory),
                Some(&mut dmem),
                &cross_sp,
                &mut grads,
            );
            dy = self.attn_sub_back(AttnIdx { norm: b.self_norm, w: b.self_attn }, s, dy, None, None, &self_sp, &mut grads);
        }
        self.embed_back(&dy, &packed.dec_tokens, &packed.dec_segs, lay.dec_position, &mut grads);

        let erows = tr.memory.len() / d;
        let mut dx = vec![F::zero(); erows * d];
        rmsnorm_back(&dmem, &tr.enc_last, p.at(lay.enc_final_norm), &tr.enc_inv, d, &mut dx, grads.at_mut(lay.enc_final_norm));
        let spans = self_spans(&packed.enc_segs, false);
        let mut subs = tr.enc.iter().rev();
        for b in lay.encoder.iter().rev() {
            let (Some(SubTrace::Ffn(f)), Some(SubTrace::Attn(a))) = (subs.next(), subs.next()) else {
                return Err(Error::Shape("encoder trace out of order".into()));
            };
            dx = self.ffn_sub_back(FfnIdx { norm: b.ffn_norm, w_in: b.w_in, w_out: b.w_out }, f, dx, &mut grads);
            dx = self.attn_sub_back(AttnIdx { norm: b.attn_norm, w: b.attn }, a, dx, None, None, &spans, &mut grads);
        }
        self.embed_back(&dx, &packed.enc_tokens, &packed.enc_segs, lay.enc_position, &mut grads);
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        Ok(grads)
    }
}

/// Opaque forward intermediates.
pub(crate) struct TraceHandle<F>(Trace<F>);
