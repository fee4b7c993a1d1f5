use rand_distr::{Distribution, Normal};

use super::{Float, ModelConfig};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn is_gain(&self) -> bool {
        self.name.ends_with("norm")
    }
}

/// Tensor indices of one encoder block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderBlock {
    pub attn_norm: usize,
    pub attn: [usize; 4],
    pub ffn_norm: usize,
    pub w_in: usize,
    pub w_out: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderBlock {
    pub self_norm: usize,
    pub self_attn: [usize; 4],
    pub cross_norm: usize,
    pub cross_attn: [usize; 4],
    pub ffn_norm: usize,
    pub w_in: usize,
    pub w_out: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embedding: usize,
    pub enc_position: usize,
    pub dec_position: usize,
    pub encoder: Vec<EncoderBlock>,
    pub enc_final_norm: usize,
    pub decoder: Vec<DecoderBlock>,
    pub dec_final_norm: usize,
}

/// Ordered manifest of tensor names and shapes, and the index layout into it.
pub(crate) fn manifest(config: &ModelConfig) -> (Vec<(String, Vec<usize>)>, Layout) {
    let (d, f, v, p) = (config.d_model, config.d_ff, config.vocab_size, config.max_positions);
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        out.push((name, shape));
        out.len() - 1
    };
    let embedding = push("shared.embedding".into(), vec![v, d]);
    let enc_position = push("encoder.position".into(), vec![p, d]);
    let dec_position = push("decoder.position".into(), vec![p, d]);
    let attn = |push: &mut dyn FnMut(String, Vec<usize>) -> usize, prefix: &str| {
        ["q", "k", "v", "o"].map(|w| push(format!("{prefix}.{w}"), vec![d, d]))
    };
    let mut encoder = Vec::new();
    for i in 0..config.n_layers {
        let pre = format!("encoder.layers.{i}");
        let attn_norm = push(format!("{pre}.attn_norm"), vec![d]);
        let a = attn(&mut push, &format!("{pre}.attn"));
        let ffn_norm = push(format!("{pre}.ffn_norm"), vec![d]);
        let w_in = push(format!("{pre}.ffn.w_in"), vec![d, f]);
        let w_out = push(format!("{pre}.ffn.w_out"), vec![f, d]);
        encoder.push(EncoderBlock {
            attn_norm,
            attn: a,
            ffn_norm,
            w_in,
            w_out,
        });
    }
    let enc_final_norm = push("encoder.final_norm".into(), vec![d]);
    let mut decoder = Vec::new();
    for i in 0..config.n_layers {
        let pre = format!("decoder.layers.{i}");
        let self_norm = push(format!("{pre}.self_norm"), vec![d]);
        let self_attn = attn(&mut push, &format!("{pre}.self_attn"));
        let cross_norm = push(format!("{pre}.cross_norm"), vec![d]);
        let cross_attn = attn(&mut push, &format!("{pre}.cross_attn"));
        let ffn_norm = push(format!("{pre}.ffn_norm"), vec![d]);
        let w_in = push(format!("{pre}.ffn.w_in"), vec![d, f]);
        let w_out = push(format!("{pre}.ffn.w_out"), vec![f, d]);
        decoder.push(DecoderBlock {
            self_norm,
            self_attn,
            cross_norm,
            cross_attn,
            ffn_norm,
            w_in,
            w_out,
        });
    }
    let dec_final_norm = push("decoder.final_norm".into(), vec![d]);
    let layout = Layout {
        embedding,
        enc_position,
        dec_position,
        encoder,
        enc_final_norm,
        decoder,
        dec_final_norm,
    };
    (out, layout)
}

/// Named tensors in manifest order. Gradients and optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Float> Parameters<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (m, _) = manifest(config);
        Parameters {
            tensors: m.into_iter().map(|(n, s)| Tensor::zeros(n, s)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub(crate) fn at(&self, i: usize) -> &[F] {
        &self.tensors[i].data
    }

    pub(crate) fn at_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.tensors[i].data
    }

    pub fn scale(&mut self, factor: F) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// First tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
            .map(|t| t.name.as_str())
    }

    pub fn cast<G: Float>(&self) -> Parameters<G> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|x| G::of(x.f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Weights drawn from Normal(0, init_std²), normalization gains set to 1.
pub fn init_params<F: Float>(config: &ModelConfig) -> Result<Parameters<F>> {
    config.validate()?;
    let mut params = Parameters::zeros(config);
    let normal = Normal::new(0.0f64, config.init_std)
        .map_err(|e| Error::Config(format!("init_std: {e}")))?;
    for t in &mut params.tensors {
        if t.is_gain() {
            t.data.iter_mut().for_each(|x| *x = F::one());
        } else {
            let mut rng = seed::rng(config.seed, &["init", &t.name]);
            t.data.iter_mut().for_each(|x| *x = F::of(normal.sample(&mut rng)));
        }
    }
    Ok(params)
}
