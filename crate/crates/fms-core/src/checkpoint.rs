//! Checkpointed network weights and their on-disk format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic   b"FMSW"
//! version u32 = 1
//! desc    u32 length-prefixed UTF-8 JSON architecture descriptor
//! blocks  per layer, weight block then bias block:
//!           ndim u32, dims u32 × ndim, payload IEEE-754 float32 LE
//! ```
//!
//! Dense weights are `[fan_out, fan_in]` row-major; conv2d weights are
//! `[out_ch, in_ch, k, k]`. A dense layer that follows a conv layer records
//! the spatial flattening explicitly (`spatial_flatten` = positions per
//! channel, channel-major ordering), so `fan_in = prev.fan_out × spatial`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FmsError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMSW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Input units for dense, input channels for conv.
    pub fan_in: usize,
    /// Output units for dense, output channels for conv.
    pub fan_out: usize,
    /// Square kernel size; conv layers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    /// Spatial positions folded per input channel when a dense layer
    /// consumes a flattened conv output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_flatten: Option<usize>,
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            fan_in,
            fan_out,
            kernel: None,
            spatial_flatten: None,
        }
    }

    pub fn dense_after_flatten(channels: usize, spatial: usize, fan_out: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            fan_in: channels * spatial,
            fan_out,
            kernel: None,
            spatial_flatten: Some(spatial),
        }
    }

    pub fn conv2d(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            fan_in: in_ch,
            fan_out: out_ch,
            kernel: Some(kernel),
            spatial_flatten: None,
        }
    }

    pub fn weight_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.fan_in * self.fan_out,
            LayerKind::Conv2d => {
                let k = self.kernel.unwrap_or(0);
                self.fan_in * self.fan_out * k * k
            }
        }
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense => vec![self.fan_out, self.fan_in],
            LayerKind::Conv2d => {
                let k = self.kernel.unwrap_or(0);
                vec![self.fan_out, self.fan_in, k, k]
            }
        }
    }

    /// Number of upstream graph nodes this layer's edges originate from.
    pub fn input_groups(&self) -> usize {
        match self.spatial_flatten {
            Some(s) => self.fan_in / s,
            None => self.fan_in,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    /// Check the layer chain: fan-out of layer l feeds fan-in of layer l+1
    /// (through the recorded flattening for conv→dense transitions).
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(FmsError::CheckpointFormat("empty architecture".into()));
        }
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.fan_in == 0 || spec.fan_out == 0 {
                return Err(FmsError::BadLayer {
                    layer: l,
                    details: "zero fan-in or fan-out".into(),
                });
            }
            if spec.kind == LayerKind::Conv2d && spec.kernel.unwrap_or(0) == 0 {
                return Err(FmsError::BadLayer {
                    layer: l,
                    details: "conv layer without kernel size".into(),
                });
            }
            if let Some(s) = spec.spatial_flatten {
                if s == 0 || spec.fan_in % s != 0 {
                    return Err(FmsError::BadLayer {
                        layer: l,
                        details: format!("spatial flatten {s} does not divide fan_in {}", spec.fan_in),
                    });
                }
            }
            if l > 0 {
                let prev_out = self.layers[l - 1].fan_out;
                if spec.input_groups() != prev_out {
                    return Err(FmsError::BadLayer {
                        layer: l,
                        details: format!(
                            "fan-in groups {} do not chain with previous fan-out {prev_out}",
                            spec.input_groups()
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Input nodes of the induced graph (features or channels of layer 0).
    pub fn input_units(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_units(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }
}

/// Per-layer weight and bias arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Serialized trained parameters of one target network.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointedWeights {
    pub arch: ArchDescriptor,
    pub layers: Vec<LayerWeights>,
}

impl CheckpointedWeights {
    /// Check descriptor invariants and that array lengths match it exactly.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.layers.len() {
            return Err(FmsError::CheckpointFormat(format!(
                "{} weight layers for {} descriptor layers",
                self.layers.len(),
                self.arch.layers.len()
            )));
        }
        for (l, (spec, lw)) in self.arch.layers.iter().zip(&self.layers).enumerate() {
            if lw.weights.len() != spec.weight_len() {
                return Err(FmsError::BadLayer {
                    layer: l,
                    details: format!(
                        "weight array has {} values, descriptor implies {}",
                        lw.weights.len(),
                        spec.weight_len()
                    ),
                });
            }
            if lw.bias.len() != spec.fan_out {
                return Err(FmsError::BadLayer {
                    layer: l,
                    details: format!(
                        "bias array has {} values, descriptor implies {}",
                        lw.bias.len(),
                        spec.fan_out
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let desc = serde_json::to_vec(&self.arch)?;
        buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        buf.extend_from_slice(&desc);
        for (spec, lw) in self.arch.layers.iter().zip(&self.layers) {
            write_block(&mut buf, &spec.weight_dims(), &lw.weights);
            write_block(&mut buf, &[spec.fan_out], &lw.bias);
        }
        // Write-then-rename so a crashed writer never leaves a readable
        // half-file behind.
        let tmp = path.with_extension("fmsw.tmp");
        fs::File::create(&tmp)?.write_all(&buf)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FmsError::CheckpointFormat(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FmsError::CheckpointFormat(format!(
                "unsupported version {version}"
            )));
        }
        let desc_len = cur.u32()? as usize;
        let desc = cur.take(desc_len)?;
        let arch: ArchDescriptor = serde_json::from_slice(desc)?;
        arch.validate()?;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let weights = cur.block(&spec.weight_dims())?;
            let bias = cur.block(&[spec.fan_out])?;
            layers.push(LayerWeights { weights, bias });
        }
        if cur.pos != bytes.len() {
            return Err(FmsError::CheckpointFormat(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        let ckpt = CheckpointedWeights { arch, layers };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn write_block(buf: &mut Vec<u8>, dims: &[usize], payload: &[f32]) {
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FmsError::CheckpointFormat("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn block(&mut self, expected_dims: &[usize]) -> Result<Vec<f32>> {
        let ndim = self.u32()? as usize;
        if ndim != expected_dims.len() {
            return Err(FmsError::CheckpointFormat(format!(
                "block rank {ndim}, descriptor implies {}",
                expected_dims.len()
            )));
        }
        let mut count = 1usize;
        for &expect in expected_dims {
            let d = self.u32()? as usize;
            if d != expect {
                return Err(FmsError::CheckpointFormat(format!(
                    "block dim {d}, descriptor implies {expect}"
                )));
            }
            count *= d;
        }
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_checkpoint() -> CheckpointedWeights {
        let arch = ArchDescriptor {
            layers: vec![LayerSpec::dense(3, 4), LayerSpec::dense(4, 2)],
        };
        let layers = vec![
            LayerWeights {
                weights: (0..12).map(|i| i as f32 * 0.1).collect(),
                bias: vec![0.1, 0.2, 0.3, 0.4],
            },
            LayerWeights {
                weights: (0..8).map(|i| -(i as f32) * 0.05).collect(),
                bias: vec![1.0, -1.0],
            },
        ];
        CheckpointedWeights { arch, layers }
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.fmsw");
        let ckpt = toy_checkpoint();
        ckpt.write_to(&path).unwrap();
        let back = CheckpointedWeights::read_from(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn magic_and_version_are_checked() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.fmsw");
        ckpt.write_to(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(CheckpointedWeights::from_bytes(&bytes).is_err());
    }

    #[test]
    fn mismatched_arrays_name_the_layer() {
        let mut ckpt = toy_checkpoint();
        ckpt.layers[1].weights.pop();
        let err = ckpt.validate().unwrap_err();
        match err {
            FmsError::BadLayer { layer, .. } => assert_eq!(layer, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn conv_to_dense_chain_validates() {
        let arch = ArchDescriptor {
            layers: vec![
                LayerSpec::conv2d(1, 4, 3),
                LayerSpec::dense_after_flatten(4, 36, 4),
            ],
        };
        arch.validate().unwrap();
        assert_eq!(arch.layers[1].input_groups(), 4);

        let broken = ArchDescriptor {
            layers: vec![LayerSpec::conv2d(1, 4, 3), LayerSpec::dense(145, 4)],
        };
        assert!(broken.validate().is_err());
    }
}
