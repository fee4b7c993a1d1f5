//! Checkpoint layout: `B2T1`, u32 LE header length, UTF-8 JSON header, then
//! little-endian f32 tensor data in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Float, Model, ModelConfig, OptimizerState, Parameters, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"B2T1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<u64>,
}

fn write_file<F: Float>(path: &Path, config: &ModelConfig, tensors: &[&Tensor<F>], step: Option<u64>) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        tensors: tensors
            .iter()
            .map(|t| Entry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        step,
    };
    let json = serde_json::to_vec(&header)?;
    let n: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut buf = Vec::with_capacity(8 + json.len() + 4 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        for &x in &t.data {
            buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<(Header, Vec<Tensor<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Corrupt(format!("{}: {m}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing B2T1 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(&format!(
            "format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut data = &bytes[8 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if data.len() < 4 * n {
            return Err(corrupt(&format!("truncated data in tensor `{}`", e.name)));
        }
        let (head, rest) = data.split_at(4 * n);
        tensors.push(Tensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        });
        data = rest;
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    Ok((header, tensors))
}

pub fn save_checkpoint<F: Float>(params: &Parameters<F>, config: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let refs: Vec<&Tensor<F>> = params.tensors.iter().collect();
    write_file(path.as_ref(), config, &refs, None)
}

/// Reads a checkpoint and checks it against the manifest of its own config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Parameters<f32>, ModelConfig)> {
    let (header, tensors) = read_file(path.as_ref())?;
    let model = Model::new(header.config, Parameters { tensors })?;
    let config = model.config().clone();
    Ok((model.into_params(), config))
}

/// Loads parameters that must fit `expected`; the first disagreeing tensor is named.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Parameters<f32>> {
    let (header, tensors) = read_file(path.as_ref())?;
    let (manifest, _) = super::params::manifest(expected);
    for (i, (name, shape)) in manifest.iter().enumerate() {
        match tensors.get(i) {
            Some(t) if t.name == *name && t.shape == *shape => {}
            Some(t) => {
                return Err(Error::TensorMismatch {
                    name: name.clone(),
                    expected: format!("{shape:?}"),
                    found: format!("{} {:?}", t.name, t.shape),
                })
            }
            None => {
                return Err(Error::TensorMismatch {
                    name: name.clone(),
                    expected: format!("{shape:?}"),
                    found: "missing".into(),
                })
            }
        }
    }
    if tensors.len() != manifest.len() {
        return Err(Error::TensorMismatch {
            name: tensors[manifest.len()].name.clone(),
            expected: "absent".into(),
            found: format!("{:?}", tensors[manifest.len()].shape),
        });
    }
    header.config.validate()?;
    Ok(Parameters { tensors })
}

/// Moments are stored as `m.<name>` and `v.<name>` with the step count in the header.
pub fn save_optimizer<F: Float>(state: &OptimizerState<F>, config: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let mut named = Vec::new();
    for (prefix, p) in [("m", &state.m), ("v", &state.v)] {
        for t in &p.tensors {
            named.push(Tensor {
                name: format!("{prefix}.{}", t.name),
                shape: t.shape.clone(),
                data: t.data.clone(),
            });
        }
    }
    let refs: Vec<&Tensor<F>> = named.iter().collect();
    write_file(path.as_ref(), config, &refs, Some(state.step))
}

pub fn load_optimizer(path: impl AsRef<Path>, config: &ModelConfig) -> Result<OptimizerState<f32>> {
    let (header, tensors) = read_file(path.as_ref())?;
    let (manifest, _) = super::params::manifest(config);
    if tensors.len() != 2 * manifest.len() {
        return Err(Error::Corrupt(format!(
            "optimizer state holds {} tensors, expected {}",
            tensors.len(),
            2 * manifest.len()
        )));
    }
    let mut it = tensors.into_iter();
    let mut take = |prefix: &str| -> Result<Parameters<f32>> {
        let mut out = Vec::new();
        for (name, shape) in &manifest {
            let t = it.next().unwrap();
            let want = format!("{prefix}.{name}");
            if t.name != want || t.shape != *shape {
                return Err(Error::TensorMismatch {
                    name: want,
                    expected: format!("{shape:?}"),
                    found: format!("{} {:?}", t.name, t.shape),
                });
            }
            out.push(Tensor {
                name: name.clone(),
                shape: t.shape,
                data: t.data,
            });
        }
        Ok(Parameters { tensors: out })
    };
    let m = take("m")?;
    let v = take("v")?;
    Ok(OptimizerState {
        step: header.step.unwrap_or(0),
        m,
        v,
    })
}
