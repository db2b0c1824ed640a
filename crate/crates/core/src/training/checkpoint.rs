//! Binary checkpoint: `"CBDF" | u32 version | u32 header length | header JSON |
//! u32 count | tensors | u32 count | optimizer moment tensors`, all little-endian.
//! A tensor is `u32 name length | UTF-8 name | u8 dtype code | u32 rank | u64 dims | data`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optimizer::{AdamParams, AdamW};
use crate::config::RunConfig;
use crate::denoiser::{Denoiser, DenoiserConfig, ParamStore};
use crate::error::{io_err, Error, Result};
use crate::numerics::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"CBDF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub build: String,
    /// Training steps completed.
    pub step: u64,
    /// Diffusion length `T` the network was trained for.
    pub steps: usize,
    pub extractor_seed: u64,
    pub channel_order: Vec<String>,
    pub dtype: DType,
    /// Optimizer updates applied; equals `step` unless the optimizer was reset.
    pub optimizer_steps: u64,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub header: CheckpointHeader,
    pub weights: ParamStore<T>,
    pub optimizer: Option<AdamW>,
}

/// Input channel names in the order the denoiser stacks them.
pub fn channel_order(cfg: &DenoiserConfig) -> Vec<String> {
    let mut v: Vec<String> = match cfg.head.state_channels() {
        2 => vec!["x_t.untampered".into(), "x_t.tampered".into()],
        _ => vec!["x_t".into()],
    };
    if !cfg.ablation.no_image {
        v.extend(["image.r", "image.g", "image.b"].map(String::from));
    }
    if !cfg.ablation.no_residual {
        v.push("residual".into());
    }
    v
}

impl<T: Real> Checkpoint<T> {
    pub fn new(cfg: &RunConfig, net: &Denoiser<T>, optimizer: Option<&AdamW>, step: u64) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                build: crate::BUILD_ID.to_string(),
                step,
                steps: cfg.schedule.steps,
                extractor_seed: cfg.extractor_seed,
                channel_order: channel_order(&cfg.denoiser),
                dtype: T::DTYPE,
                optimizer_steps: optimizer.map_or(0, |o| o.t),
                config: cfg.clone(),
            },
            weights: net.weights().clone(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Refuses checkpoints whose diffusion length, channel layout or encoder seed differ
    /// from `cfg`.
    pub fn check_compatible(&self, cfg: &RunConfig) -> Result<()> {
        let h = &self.header;
        if h.steps != cfg.schedule.steps {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint was trained with T={} but the run uses T={}",
                h.steps, cfg.schedule.steps
            )));
        }
        let order = channel_order(&cfg.denoiser);
        if h.channel_order != order {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint channel order {:?} differs from {:?}",
                h.channel_order, order
            )));
        }
        if h.extractor_seed != cfg.extractor_seed {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint extractor seed {} differs from {}",
                h.extractor_seed, cfg.extractor_seed
            )));
        }
        Ok(())
    }

    /// Network described by the embedded configuration.
    pub fn denoiser(&self) -> Result<Denoiser<T>> {
        Denoiser::from_weights(self.header.config.denoiser.clone(), self.weights.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        put_len(&mut out, header.len());
        out.extend_from_slice(&header);
        put_len(&mut out, self.weights.len());
        for (name, t) in self.weights.iter() {
            write_tensor(&mut out, name, t);
        }
        match &self.optimizer {
            Some(opt) => {
                put_len(&mut out, 2 * opt.m.len());
                for (prefix, moments) in [("m", &opt.m), ("v", &opt.v)] {
                    for ((name, _), t) in self.weights.iter().zip(moments) {
                        write_tensor(&mut out, &format!("{prefix}.{name}"), t);
                    }
                }
            }
            None => put_len(&mut out, 0),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::CorruptCheckpoint(
                "bad magic, not a checkpoint file".into(),
            ));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::CorruptCheckpoint(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let hlen = r.u32("header length")? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let n = r.u32("tensor count")? as usize;
        let mut weights = ParamStore::new();
        for _ in 0..n {
            let (name, t) = read_tensor::<T>(&mut r)?;
            // Frozen status is not stored; the denoiser restores it on rebuild.
            weights.add(&name, t, true)?;
        }
        let nm = r.u32("moment count")? as usize;
        let optimizer = if nm == 0 {
            None
        } else {
            if nm != 2 * n {
                return Err(Error::CorruptCheckpoint(format!(
                    "{nm} moment tensors for {n} parameters"
                )));
            }
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for k in 0..nm {
                let (name, t) = read_tensor::<f64>(&mut r)?;
                let (prefix, list) = if k < n { ("m", &mut m) } else { ("v", &mut v) };
                let pname = weights.name(weights.ids().nth(k % n).expect("k < 2n"));
                if name != format!("{prefix}.{pname}") {
                    return Err(Error::CorruptCheckpoint(format!(
                        "moment tensor '{name}' out of order, expected '{prefix}.{pname}'"
                    )));
                }
                list.push(t);
            }
            let tc = &header.config.train;
            Some(AdamW {
                params: AdamParams {
                    beta1: tc.beta1,
                    beta2: tc.beta2,
                    eps: tc.eps,
                    weight_decay: tc.weight_decay,
                },
                t: header.optimizer_steps,
                m,
                v,
            })
        };
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            header,
            weights,
            optimizer,
        })
    }
}

pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    crate::image::write_file(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::CorruptCheckpoint(msg) => {
            Error::CorruptCheckpoint(format!("{}: {msg}", path.display()))
        }
        other => other,
    })
}

fn put_len(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u32).to_le_bytes());
}

fn write_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_len(out, name.len());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    put_len(out, t.rank());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::CorruptCheckpoint(format!(
                    "truncated at byte {} while reading {what}",
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Reads one tensor, converting from the stored element type if it differs from `T`.
fn read_tensor<T: Real>(r: &mut Reader<'_>) -> Result<(String, Tensor<T>)> {
    let len = r.u32("tensor name length")? as usize;
    let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
        .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
    let code = r.take(1, "dtype code")?[0];
    let dtype = DType::from_code(code).ok_or_else(|| {
        Error::CorruptCheckpoint(format!("tensor '{name}' has unknown dtype code {code}"))
    })?;
    let rank = r.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        shape.push(r.u64("dimension")? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| {
            Error::CorruptCheckpoint(format!("tensor '{name}' has an absurd shape {shape:?}"))
        })?;
    let size = dtype.size();
    let raw = r.take(
        numel.saturating_mul(size),
        &format!("data of tensor '{name}'"),
    )?;
    let data: Vec<T> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::read_le(c)))
            .collect(),
    };
    Ok((name, Tensor::new(shape, data)?))
}
