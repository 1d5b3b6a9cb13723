// SPDX-License-Identifier: MIT OR Apache-2.0

//! `HPRM` model and adapter checkpoints.
//!
//! Layout (little-endian): magic `b"HPRM"` | version `u32` | kind `u8`
//! (0 base model, 1 adapters) | config length `u32` + JSON | tensor count
//! `u32` | per tensor: name (`u16` length + UTF-8), rank `u8`, dims `u32` each,
//! `f64` payload row-major.
//!
//! Base checkpoints carry the [`ModelConfig`]; adapter checkpoints carry the
//! [`LoraConfig`] plus the base config they were trained against.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::linear::{LoraAdapter, ProjectionLinear};
use super::model::Block;
use super::{LoraConfig, LoraTarget, Model, ModelConfig};
use crate::activation_store::{Cursor, FORMAT_VERSION};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"HPRM";
const KIND_MODEL: u8 = 0;
const KIND_ADAPTERS: u8 = 1;

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    lora: LoraConfig,
    base: ModelConfig,
}

fn encode(kind: u8, config_json: &str, tensors: &[(String, ndarray::ArrayViewD<'_, f64>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MODEL_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(kind);
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn decode(bytes: &[u8], want_kind: u8) -> Result<(String, BTreeMap<String, ArrayD<f64>>)> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take("magic", 4)?;
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: MODEL_MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = cur.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = cur.u8("header")?;
    if kind != want_kind {
        return Err(Error::Checkpoint(format!("checkpoint kind {kind}, expected {want_kind}")));
    }
    let len = cur.u32("config")? as usize;
    let config = String::from_utf8(cur.take("config", len)?.to_vec()).map_err(|_| Error::Utf8("config"))?;
    let count = cur.u32("header")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = cur.str16("tensor name")?;
        let rank = cur.u8("tensor header")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("tensor header")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::SizeOverflow(format!("tensor `{name}`")))?;
        if n.saturating_mul(8) > cur.remaining() {
            return Err(Error::Truncated {
                section: "tensor payload",
                expected: (n as u64).saturating_mul(8),
                actual: cur.remaining() as u64,
            });
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(cur.f64("tensor payload")?);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Shape(e.to_string()))?;
        tensors.insert(name, arr);
    }
    if cur.remaining() != 0 {
        return Err(Error::TrailingBytes(cur.remaining() as u64));
    }
    Ok((config, tensors))
}

fn take2(tensors: &mut BTreeMap<String, ArrayD<f64>>, name: &str) -> Result<Array2<f64>> {
    tensors
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?
        .into_dimensionality()
        .map_err(|_| Error::Checkpoint(format!("tensor `{name}` is not 2-D")))
}

fn take1(tensors: &mut BTreeMap<String, ArrayD<f64>>, name: &str) -> Result<Array1<f64>> {
    tensors
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?
        .into_dimensionality()
        .map_err(|_| Error::Checkpoint(format!("tensor `{name}` is not 1-D")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes the base (frozen) parameters. Adapters are not included.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let config = serde_json::to_string(model.config())?;
    write_file(path, &encode(KIND_MODEL, &config, &model.base_tensors()))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, mut t) = decode(&bytes, KIND_MODEL)?;
    let config: ModelConfig = serde_json::from_str(&config)?;
    let blocks = (0..config.n_layers)
        .map(|l| {
            let mut w = |p: LoraTarget| take2(&mut t, &format!("layers.{l}.{p}")).map(ProjectionLinear::new);
            Ok(Block {
                q: w(LoraTarget::Q)?,
                k: w(LoraTarget::K)?,
                v: w(LoraTarget::V)?,
                o: w(LoraTarget::O)?,
                gate: w(LoraTarget::Gate)?,
                up: w(LoraTarget::Up)?,
                down: w(LoraTarget::Down)?,
                attn_norm: take1(&mut t, &format!("layers.{l}.attn_norm"))?,
                mlp_norm: take1(&mut t, &format!("layers.{l}.mlp_norm"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let embed = take2(&mut t, "embed")?;
    let final_norm = take1(&mut t, "final_norm")?;
    let lm_head = take2(&mut t, "lm_head")?;
    if let Some(extra) = t.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Model::from_parts(config, embed, blocks, final_norm, lm_head)
}

/// Writes only the adapter tensors and their configuration.
pub fn save_adapters(model: &Model, path: &Path) -> Result<()> {
    let lora = model
        .lora_config()
        .ok_or_else(|| Error::Checkpoint("model has no adapters".into()))?;
    let header = serde_json::to_string(&AdapterHeader {
        lora: lora.clone(),
        base: model.config().clone(),
    })?;
    let tensors: Vec<_> = model
        .adapter_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.view().into_dyn()))
        .collect();
    write_file(path, &encode(KIND_ADAPTERS, &header, &tensors))
}

/// Attaches the adapters stored at `path` to a copy of `base`.
pub fn load_adapters(base: &Model, path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut t) = decode(&bytes, KIND_ADAPTERS)?;
    let header: AdapterHeader = serde_json::from_str(&header)?;
    if &header.base != base.config() {
        return Err(Error::Checkpoint("adapter checkpoint was trained against a different base config".into()));
    }
    if base.lora_config().is_some() {
        return Err(Error::Config("model already carries adapters".into()));
    }
    let lora = header.lora;
    let mut model = base.clone();
    for (l, block) in model.blocks_mut().iter_mut().enumerate() {
        for target in LoraTarget::ALL {
            let a_name = format!("layers.{l}.{target}.lora_a");
            if !t.contains_key(&a_name) {
                continue;
            }
            let a = take2(&mut t, &a_name)?;
            let b = take2(&mut t, &format!("layers.{l}.{target}.lora_b"))?;
            let lin = block.proj_mut(target);
            if a.dim() != (lora.rank, lin.in_dim()) || b.dim() != (lin.out_dim(), lora.rank) {
                return Err(Error::Checkpoint(format!("adapter `layers.{l}.{target}` has wrong shape")));
            }
            lin.lora = Some(LoraAdapter {
                a,
                b,
                scale: lora.scale(),
                dropout: lora.dropout,
            });
        }
    }
    if let Some(extra) = t.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    model.set_lora_config(Some(lora));
    Ok(model)
}
