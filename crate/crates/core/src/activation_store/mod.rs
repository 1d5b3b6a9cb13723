// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tapped activations, labels, and train/test splits.
//!
//! An [`ActivationSet`] is a dense `f32` tensor with axes
//! `(sample, layer, head, dim)`. Residual taps use `n_heads == 1`, so every
//! tap kind shares one layout and one on-disk format.
//!
//! # File format
//!
//! All integers little-endian:
//!
//! | field          | type                  |
//! |----------------|-----------------------|
//! | magic          | `b"HPRB"`             |
//! | version        | `u32` (= 1)           |
//! | tap kind       | `u8` (0 head, 1 post-attn, 2 post-MLP) |
//! | model name     | `u16` length + UTF-8  |
//! | n_samples      | `u64`                 |
//! | n_layers       | `u32`                 |
//! | n_heads        | `u32` (1 for residual taps) |
//! | dim            | `u32`                 |
//! | sample ids     | per sample: `u16` length + UTF-8 |
//! | payload        | `f32` row-major `(sample, layer, head, dim)` |

mod labels;
mod split;

pub use labels::{binarize, Construct, ConstructCategory, LabelRecord, LabelTable};
pub use split::{make_split, split_for_construct, SplitAssignment};

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ACTIVATION_MAGIC: [u8; 4] = *b"HPRB";
pub const FORMAT_VERSION: u32 = 1;

/// Where in the forward pass an activation was captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TapKind {
    /// Per-head attention output before the output projection.
    #[serde(rename = "head")]
    HeadPreProjection,
    /// Residual stream after the attention block's addition.
    #[serde(rename = "post_attn")]
    PostAttentionResidual,
    /// Residual stream after the MLP block's addition.
    #[serde(rename = "post_mlp")]
    PostMlpResidual,
}

impl TapKind {
    pub const ALL: [TapKind; 3] = [
        TapKind::HeadPreProjection,
        TapKind::PostAttentionResidual,
        TapKind::PostMlpResidual,
    ];

    pub fn tag(self) -> u8 {
        match self {
            TapKind::HeadPreProjection => 0,
            TapKind::PostAttentionResidual => 1,
            TapKind::PostMlpResidual => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(TapKind::HeadPreProjection),
            1 => Ok(TapKind::PostAttentionResidual),
            2 => Ok(TapKind::PostMlpResidual),
            other => Err(Error::InvalidTap(other)),
        }
    }

    pub fn is_residual(self) -> bool {
        !matches!(self, TapKind::HeadPreProjection)
    }

    /// Short name used in file names and CLI flags.
    pub fn as_str(self) -> &'static str {
        match self {
            TapKind::HeadPreProjection => "head",
            TapKind::PostAttentionResidual => "post_attn",
            TapKind::PostMlpResidual => "post_mlp",
        }
    }
}

impl fmt::Display for TapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" | "head_pre_proj" => Ok(TapKind::HeadPreProjection),
            "post_attn" | "post_attn_residual" => Ok(TapKind::PostAttentionResidual),
            "post_mlp" | "post_mlp_residual" => Ok(TapKind::PostMlpResidual),
            other => Err(Error::Usage(format!(
                "unknown tap kind `{other}` (expected head, post_attn, post_mlp)"
            ))),
        }
    }
}

/// Dense activations for one model and one tap kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    model_name: String,
    tap: TapKind,
    n_layers: usize,
    n_heads: usize,
    dim: usize,
    sample_ids: Vec<String>,
    data: Vec<f32>,
}

impl ActivationSet {
    /// Builds a validated set. `data` is row-major `(sample, layer, head, dim)`.
    pub fn new(
        model_name: impl Into<String>,
        tap: TapKind,
        n_layers: usize,
        n_heads: usize,
        dim: usize,
        sample_ids: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let set = ActivationSet {
            model_name: model_name.into(),
            tap,
            n_layers,
            n_heads,
            dim,
            sample_ids,
            data,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.tap.is_residual() && self.n_heads != 1 {
            return Err(Error::Shape(format!(
                "residual tap `{}` requires n_heads = 1, got {}",
                self.tap, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.dim == 0 {
            return Err(Error::Shape(format!(
                "axis sizes must be >= 1 (layers={}, heads={}, dim={})",
                self.n_layers, self.n_heads, self.dim
            )));
        }
        if self.model_name.len() > u16::MAX as usize {
            return Err(Error::Shape("model name longer than 65535 bytes".into()));
        }
        let expected = element_count(
            self.sample_ids.len() as u64,
            self.n_layers as u64,
            self.n_heads as u64,
            self.dim as u64,
        )?;
        if expected != self.data.len() as u64 {
            return Err(Error::Shape(format!(
                "data holds {} elements, axes declare {expected}",
                self.data.len()
            )));
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut seen = HashSet::with_capacity(self.sample_ids.len());
        for id in &self.sample_ids {
            if id.len() > u16::MAX as usize {
                return Err(Error::Shape(format!("sample id {id:?} longer than 65535 bytes")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateSampleId(id.clone()));
            }
        }
        Ok(())
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn tap(&self) -> TapKind {
        self.tap
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The `dim`-long vector for one `(sample, layer, head)` cell.
    pub fn vector(&self, sample: usize, layer: usize, head: usize) -> &[f32] {
        let start = ((sample * self.n_layers + layer) * self.n_heads + head) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Returns a copy with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out.validate()?;
        Ok(out)
    }

    /// Reorders samples: row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n_samples() {
            return Err(Error::LengthMismatch(format!(
                "permutation of length {} for {} samples",
                order.len(),
                self.n_samples()
            )));
        }
        let row = self.n_layers * self.n_heads * self.dim;
        let mut data = Vec::with_capacity(self.data.len());
        let mut ids = Vec::with_capacity(order.len());
        for &i in order {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
            ids.push(self.sample_ids[i].clone());
        }
        ActivationSet::new(
            self.model_name.clone(),
            self.tap,
            self.n_layers,
            self.n_heads,
            self.dim,
            ids,
            data,
        )
    }

    pub fn write_to_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = std::io::BufWriter::new(file);
        write_activations(self, &mut writer)?;
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        read_activations(std::io::BufReader::new(file))
    }
}

fn element_count(n: u64, layers: u64, heads: u64, dim: u64) -> Result<u64> {
    n.checked_mul(layers)
        .and_then(|v| v.checked_mul(heads))
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| {
            Error::SizeOverflow(format!("{n} x {layers} x {heads} x {dim} elements"))
        })
}

/// Serializes `set` in the `HPRB` format.
pub fn write_activations<W: Write>(set: &ActivationSet, mut out: W) -> Result<()> {
    set.validate()?;
    let mut header = Vec::with_capacity(64);
    header.extend_from_slice(&ACTIVATION_MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.push(set.tap.tag());
    put_str16(&mut header, &set.model_name);
    header.extend_from_slice(&(set.n_samples() as u64).to_le_bytes());
    header.extend_from_slice(&(set.n_layers as u32).to_le_bytes());
    header.extend_from_slice(&(set.n_heads as u32).to_le_bytes());
    header.extend_from_slice(&(set.dim as u32).to_le_bytes());
    for id in &set.sample_ids {
        put_str16(&mut header, id);
    }
    out.write_all(&header)?;
    let mut payload = Vec::with_capacity(set.data.len() * 4);
    for v in &set.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)?;
    Ok(())
}

/// Parses and fully validates an `HPRB` stream.
pub fn read_activations<R: Read>(mut source: R) -> Result<ActivationSet> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut cur = Cursor::new(&bytes);

    let magic = cur.take("magic", 4)?;
    if magic != ACTIVATION_MAGIC {
        return Err(Error::BadMagic {
            expected: ACTIVATION_MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = cur.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let tap = TapKind::from_tag(cur.u8("header")?)?;
    let model_name = cur.str16("model name")?;
    let n_samples = cur.u64("header")?;
    let n_layers = cur.u32("header")? as u64;
    let n_heads = cur.u32("header")? as u64;
    let dim = cur.u32("header")? as u64;

    let count = element_count(n_samples, n_layers, n_heads, dim)?;
    let payload_bytes = count
        .checked_mul(4)
        .ok_or_else(|| Error::SizeOverflow(format!("{count} f32 elements")))?;
    // Each sample id costs at least its 2-byte length prefix.
    let min_ids = n_samples.saturating_mul(2);
    if min_ids > cur.remaining() as u64 {
        return Err(Error::Truncated {
            section: "sample ids",
            expected: min_ids,
            actual: cur.remaining() as u64,
        });
    }

    let mut sample_ids = Vec::with_capacity(n_samples as usize);
    for _ in 0..n_samples {
        sample_ids.push(cur.str16("sample ids")?);
    }
    let actual = cur.remaining() as u64;
    if actual < payload_bytes {
        return Err(Error::Truncated {
            section: "payload",
            expected: payload_bytes,
            actual,
        });
    }
    if actual > payload_bytes {
        return Err(Error::TrailingBytes(actual - payload_bytes));
    }
    let payload = cur.take("payload", payload_bytes as usize)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    ActivationSet::new(
        model_name,
        tap,
        n_layers as usize,
        n_heads as usize,
        dim as usize,
        sample_ids,
        data,
    )
}

fn put_str16(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, section: &'static str, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                section,
                expected: n as u64,
                actual: self.remaining() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, section: &'static str) -> Result<u8> {
        Ok(self.take(section, 1)?[0])
    }

    pub(crate) fn u16(&mut self, section: &'static str) -> Result<u16> {
        let b = self.take(section, 2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, section: &'static str) -> Result<u32> {
        let b = self.take(section, 4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, section: &'static str) -> Result<u64> {
        let b = self.take(section, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, section: &'static str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(section)?))
    }

    pub(crate) fn str16(&mut self, section: &'static str) -> Result<String> {
        let len = self.u16(section)? as usize;
        let raw = self.take(section, len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Utf8(section))
    }
}
