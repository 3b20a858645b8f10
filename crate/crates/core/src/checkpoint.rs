//! Versioned binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes   "AMINTCKP"
//! version  u32
//! header   u32 length + JSON (kind, specs, taps)
//! count    u32
//! params   count × { u16 name length, name, u8 ndim, ndim × u64 dims,
//!                    u8 dtype (0 = f32, 1 = f64), values }
//! digest   32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::nets::{Backbone, BackboneSpec, EnhancedModel, MintHead, MintHeadSpec, TapConfig};
use crate::tensor::{MapShape, Real};

pub const MAGIC: &[u8; 8] = b"AMINTCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Audited,
    Enhanced,
    MintHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub backbone: Option<BackboneSpec>,
    pub taps: Option<TapConfig>,
    pub head: Option<MintHeadSpec>,
    pub head_input_shapes: Option<[MapShape; 2]>,
    #[serde(default)]
    pub head_first_slot: usize,
}

fn encode<T: Real>(header: &CheckpointHeader, params: &[&Param<T>]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(header).expect("header serializes");
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.shape.len() as u8);
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.push(T::DTYPE);
        for v in &p.value {
            match T::DTYPE {
                0 => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// A decoded checkpoint: header plus named parameter arrays.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: Vec<Param<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("content checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let dtype = r.u8()?;
            let value = match dtype {
                0 => r.take(numel * 4)?.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
                1 => r.take(numel * 8)?.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
            };
            params.push(Param { name, shape, value });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Self { header, params })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Copies stored values into `targets`, checking names and shapes.
    fn restore_into(&self, targets: Vec<&mut Param<T>>) -> Result<()> {
        if targets.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, file has {}", targets.len(), self.params.len())));
        }
        for (dst, src) in targets.into_iter().zip(&self.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    src.name, src.shape, dst.name, dst.shape
                )));
            }
            dst.value.clone_from(&src.value);
        }
        Ok(())
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.header.kind)));
        }
        Ok(())
    }

    pub fn into_backbone(self) -> Result<Backbone<T>> {
        self.expect_kind(CheckpointKind::Audited)?;
        let spec = self.header.backbone.clone().ok_or_else(|| Error::Checkpoint("missing backbone spec".into()))?;
        let mut bb = Backbone::new(spec, 0)?;
        self.restore_into(bb.params_mut())?;
        Ok(bb)
    }

    pub fn into_enhanced(self) -> Result<EnhancedModel<T>> {
        self.expect_kind(CheckpointKind::Enhanced)?;
        let missing = || Error::Checkpoint("incomplete enhanced-model header".into());
        let spec = self.header.backbone.clone().ok_or_else(missing)?;
        let taps = self.header.taps.clone().ok_or_else(missing)?;
        let head = self.header.head.clone().ok_or_else(missing)?;
        let bb = Backbone::new(spec, 0)?;
        let mut model = EnhancedModel::with_backbone(bb, taps, head, 0)?;
        self.restore_into(model.params_mut())?;
        Ok(model)
    }

    pub fn into_head(self) -> Result<(MintHead<T>, TapConfig)> {
        self.expect_kind(CheckpointKind::MintHead)?;
        let missing = || Error::Checkpoint("incomplete MINT-head header".into());
        let taps = self.header.taps.clone().ok_or_else(missing)?;
        let spec = self.header.head.clone().ok_or_else(missing)?;
        let shapes = self.header.head_input_shapes.ok_or_else(missing)?;
        let mut head = MintHead::new(spec, shapes, self.header.head_first_slot, 0)?;
        self.restore_into(head.params_mut())?;
        Ok((head, taps))
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn save_backbone<T: Real>(bb: &Backbone<T>, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Audited,
        backbone: Some(bb.spec.clone()),
        taps: None,
        head: None,
        head_input_shapes: None,
        head_first_slot: 0,
    };
    write(path, &encode(&header, &bb.params()))
}

pub fn save_enhanced<T: Real>(model: &EnhancedModel<T>, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Enhanced,
        backbone: Some(model.backbone.spec.clone()),
        taps: Some(model.taps.clone()),
        head: Some(model.head.spec.clone()),
        head_input_shapes: Some(model.head.input_shapes),
        head_first_slot: model.head.first_slot,
    };
    write(path, &encode(&header, &model.params()))
}

pub fn save_head<T: Real>(head: &MintHead<T>, taps: &TapConfig, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::MintHead,
        backbone: None,
        taps: Some(taps.clone()),
        head: Some(head.spec.clone()),
        head_input_shapes: Some(head.input_shapes),
        head_first_slot: head.first_slot,
    };
    write(path, &encode(&header, &head.params()))
}

/// SHA-256 over all parameter values, in slot order.
pub fn parameter_checksum<T: Real>(params: &[&Param<T>]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        for v in &p.value {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
