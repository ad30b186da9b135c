//! Binary model checkpoints.
//!
//! Little-endian layout: magic `WMIL`, u16 version, u16-prefixed config
//! hash, u32 extractor count then per extractor (u16-prefixed name, u32 dim),
//! u32 attention width, u32 hidden-layer count and widths, u8 fusion flag
//! (followed by u32 fused width and u32 fusion attention width when set),
//! u64 parameter count, then every parameter as f64 in tensor order.

use std::path::Path;

use crate::embedding::FeatureLayout;
use crate::error::{Error, Result};
use crate::mil::{FusionShape, MilModel, ModelShape};

pub const MAGIC: &[u8; 4] = b"WMIL";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MilModel,
    /// Extractor order and widths of the feature rows the model consumes.
    pub layout: FeatureLayout,
    pub config_hash: String,
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("string too long: {} bytes", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Length(format!("checkpoint truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn shape(&self) -> ModelShape {
        let own = self.model.shape();
        ModelShape {
            extractor_dims: self.layout.dims.clone(),
            ..own
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.model.validate()?;
        if self.model.input_dim() != self.layout.total_dim() {
            return Err(Error::Shape(format!(
                "model consumes {} columns, layout has {}",
                self.model.input_dim(),
                self.layout.total_dim()
            )));
        }
        let shape = self.shape();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_hash)?;
        put_u32(&mut out, self.layout.extractors.len())?;
        for (name, &dim) in self.layout.extractors.iter().zip(&self.layout.dims) {
            put_str(&mut out, name)?;
            put_u32(&mut out, dim)?;
        }
        put_u32(&mut out, shape.attention_dim)?;
        put_u32(&mut out, shape.head_widths.len())?;
        for &w in &shape.head_widths {
            put_u32(&mut out, w)?;
        }
        match shape.fusion {
            Some(f) => {
                out.push(1);
                put_u32(&mut out, f.fused_dim)?;
                put_u32(&mut out, f.attention_dim)?;
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.model.num_params() as u64).to_le_bytes());
        for t in self.model.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.string()?;
        let n = r.u32()?;
        let mut extractors = Vec::with_capacity(n.min(1024));
        let mut dims = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            extractors.push(r.string()?);
            dims.push(r.u32()?);
        }
        let layout = FeatureLayout::new(extractors, dims.clone())?;
        let attention_dim = r.u32()?;
        let n_hidden = r.u32()?;
        let head_widths = (0..n_hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let fusion = match r.u8()? {
            0 => None,
            1 => Some(FusionShape {
                fused_dim: r.u32()?,
                attention_dim: r.u32()?,
            }),
            f => return Err(Error::Format(format!("bad fusion flag {f}"))),
        };
        let shape = ModelShape {
            extractor_dims: dims,
            attention_dim,
            head_widths,
            fusion,
        };
        let mut model = MilModel::new(&shape, 0)?;
        let count = r.u64()?;
        if count != model.num_params() as u64 {
            return Err(Error::Format(format!(
                "checkpoint declares {count} parameters, shape implies {}",
                model.num_params()
            )));
        }
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Length(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        model.validate()?;
        Ok(Self {
            model,
            layout,
            config_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
