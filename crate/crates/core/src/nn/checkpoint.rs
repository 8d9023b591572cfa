//! Model checkpoint file: versioned header with the layer spec and codebook
//! hash, followed by little-endian `f64` tensors in declaration order
//! (including batchnorm running statistics). Load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{BatchNorm, Dense, Layer, MlpModel};

const MAGIC: &[u8; 8] = b"MUSAMODL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerSpec {
    Dense { fan_in: usize, fan_out: usize },
    BatchNorm { width: usize, momentum: f64, eps: f64 },
    Relu,
    Dropout { p: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    input_width: usize,
    output_width: usize,
    codebook_hash: String,
    layers: Vec<LayerSpec>,
}

impl<T: Scalar> MlpModel<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let layers: Vec<LayerSpec> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => LayerSpec::Dense { fan_in: d.w.nrows(), fan_out: d.w.ncols() },
                Layer::BatchNorm(bn) => LayerSpec::BatchNorm {
                    width: bn.gamma.len(),
                    momentum: bn.momentum.to_f64().unwrap(),
                    eps: bn.eps.to_f64().unwrap(),
                },
                Layer::Relu => LayerSpec::Relu,
                Layer::Dropout(p) => LayerSpec::Dropout { p: p.to_f64().unwrap() },
            })
            .collect();
        let header = Header {
            version: VERSION,
            input_width: self.input_width,
            output_width: self.output_width,
            codebook_hash: self.codebook_hash.clone(),
            layers,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Format { path: path.display().to_string(), msg: e.to_string() })?;

        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        let mut write_slice = |s: &[T]| -> Result<()> {
            for v in s {
                w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
            }
            Ok(())
        };
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    write_slice(d.w.as_slice().unwrap())?;
                    write_slice(d.b.as_slice().unwrap())?;
                }
                Layer::BatchNorm(bn) => {
                    write_slice(bn.gamma.as_slice().unwrap())?;
                    write_slice(bn.beta.as_slice().unwrap())?;
                    write_slice(bn.running_mean.as_slice().unwrap())?;
                    write_slice(bn.running_var.as_slice().unwrap())?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        let fmt = |msg: String| Error::Format { path: origin.clone(), msg };
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len8) as usize];
        r.read_exact(&mut header_bytes)?;
        let header: Header =
            serde_json::from_slice(&header_bytes).map_err(|e| fmt(e.to_string()))?;
        if header.version != VERSION {
            return Err(fmt(format!("unsupported version {}", header.version)));
        }
        let mut read_vec = |n: usize| -> Result<Vec<T>> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                out.push(T::from_f64_c(f64::from_le_bytes(b)));
            }
            Ok(out)
        };
        let mut layers = Vec::with_capacity(header.layers.len());
        for spec in &header.layers {
            match spec {
                LayerSpec::Dense { fan_in, fan_out } => {
                    let w = Array2::from_shape_vec((*fan_in, *fan_out), read_vec(fan_in * fan_out)?)
                        .map_err(|e| fmt(e.to_string()))?;
                    let b = Array1::from_vec(read_vec(*fan_out)?);
                    layers.push(Layer::Dense(Dense { w, b }));
                }
                LayerSpec::BatchNorm { width, momentum, eps } => {
                    layers.push(Layer::BatchNorm(BatchNorm {
                        gamma: Array1::from_vec(read_vec(*width)?),
                        beta: Array1::from_vec(read_vec(*width)?),
                        running_mean: Array1::from_vec(read_vec(*width)?),
                        running_var: Array1::from_vec(read_vec(*width)?),
                        momentum: T::from_f64_c(*momentum),
                        eps: T::from_f64_c(*eps),
                    }));
                }
                LayerSpec::Relu => layers.push(Layer::Relu),
                LayerSpec::Dropout { p } => layers.push(Layer::Dropout(T::from_f64_c(*p))),
            }
        }
        Ok(MlpModel {
            layers,
            input_width: header.input_width,
            output_width: header.output_width,
            codebook_hash: header.codebook_hash,
        })
    }
}
