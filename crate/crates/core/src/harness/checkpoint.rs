//! Versioned binary checkpoint: config text and hash, every parameter
//! tensor with its shape, and the cluster state when present.
//!
//! Layout (little-endian): magic `CCLCKPT\0`, `u32` version, length-prefixed
//! config text, length-prefixed hash, `u32` tensor count and per tensor
//! (name, rank, `u64` dims, `f64` values), then a `u8` cluster flag followed
//! by layer, epoch, centers, assignments and concentrations.

use std::path::Path;

use super::config::TrainConfig;
use crate::autodiff::Tensor;
use crate::clustering::{ClusterState, FeatureLayer};
use crate::error::{CclError, Result};
use crate::model::{Linear, Mlp, Model};

const MAGIC: &[u8; 8] = b"CCLCKPT\0";
const VERSION: u32 = 1;

/// Trained model with the config that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub clusters: Option<ClusterState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64s(t.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn truncated() -> CclError {
    CclError::Parse {
        what: "checkpoint",
        detail: "truncated".into(),
    }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CclError::Parse {
            what: "checkpoint",
            detail: "invalid utf-8".into(),
        })
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(truncated)?;
        let data = self.f64s(len)?;
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_text());
        w.str(&self.config.hash());
        let params = self.model.named_params();
        w.u32(params.len() as u32);
        for (name, t) in params {
            w.tensor(&name, t);
        }
        match &self.clusters {
            None => w.u8(0),
            Some(c) => {
                w.u8(1);
                w.u8(match c.layer {
                    FeatureLayer::Embedding => 0,
                    FeatureLayer::Projection => 1,
                });
                w.u64(c.updated_at_epoch as u64);
                w.tensor("centers", &c.centers);
                w.u64(c.assignments.len() as u64);
                for &a in &c.assignments {
                    w.u64(a as u64);
                }
                w.u64(c.phis.len() as u64);
                w.f64s(&c.phis);
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |d: String| CclError::Parse {
            what: "checkpoint",
            detail: d,
        };
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config = TrainConfig::from_text(&r.str()?)?;
        let hash = r.str()?;
        if hash != config.hash() {
            return Err(bad("config hash does not match the stored config".into()));
        }
        let count = r.u32()? as usize;
        let mut encoder = Vec::new();
        let mut projection = Vec::new();
        let mut pending: Option<(String, Tensor)> = None;
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            match pending.take() {
                None => pending = Some((name, t)),
                Some((wname, weight)) => {
                    let prefix = wname
                        .strip_suffix(".weight")
                        .ok_or_else(|| bad(format!("expected a weight, got {wname}")))?;
                    if name != format!("{prefix}.bias") {
                        return Err(bad(format!("expected {prefix}.bias, got {name}")));
                    }
                    let layer = Linear { weight, bias: t };
                    if prefix.starts_with("encoder.") {
                        encoder.push(layer);
                    } else if prefix.starts_with("projection.") {
                        projection.push(layer);
                    } else {
                        return Err(bad(format!("unknown parameter {wname}")));
                    }
                }
            }
        }
        if pending.is_some() {
            return Err(bad("odd parameter count".into()));
        }
        let model = Model::new(Mlp::new(encoder, false)?, Mlp::new(projection, false)?)?;
        let clusters = match r.u8()? {
            0 => None,
            1 => {
                let layer = match r.u8()? {
                    0 => FeatureLayer::Embedding,
                    1 => FeatureLayer::Projection,
                    x => return Err(bad(format!("bad layer tag {x}"))),
                };
                let updated_at_epoch = r.u64()? as usize;
                let (_, centers) = r.tensor()?;
                let n = r.u64()? as usize;
                let assignments = (0..n)
                    .map(|_| r.u64().map(|a| a as usize))
                    .collect::<Result<Vec<_>>>()?;
                let np = r.u64()? as usize;
                let phis = r.f64s(np)?;
                Some(ClusterState {
                    centers,
                    assignments,
                    phis,
                    layer,
                    updated_at_epoch,
                })
            }
            x => return Err(bad(format!("bad cluster flag {x}"))),
        };
        if r.pos != buf.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            model,
            clusters,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
