use std::path::Path;

use super::{build_model, DiCModel, ModelConfig};
use crate::error::{DicError, Result};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"DIC1";
const OPT_MAGIC: &[u8; 4] = b"ADAM";
const VERSION: u32 = 1;

/// Adam moments in registry order, plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// In-memory form of a `DIC1` file.
///
/// Layout (little-endian): magic, u32 version, u32 config length, config
/// text, u32 parameter count, then per parameter: u32 name length, name,
/// u32 rank, u32 extents, f32 data. An optional `ADAM` trailer carries the
/// optimizer state: u64 step, then first and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical `key=value` text; must contain the `model.*` keys.
    pub config_text: String,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("size overflow")?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &DiCModel<T>, config_text: impl Into<String>, optimizer: Option<OptimizerState>) -> Self {
        Checkpoint {
            config_text: config_text.into(),
            params: model.params().iter().map(|p| (p.name.clone(), p.value.cast())).collect(),
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &e in t.shape() {
                put_u32(&mut out, e);
            }
            put_f32s(&mut out, t.data());
        }
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(OPT_MAGIC);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for m in opt.m.iter().chain(&opt.v) {
                put_f32s(&mut out, m);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("missing DIC1 magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "config block is not UTF-8")?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "parameter name is not UTF-8")?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or("shape overflow")?;
            let data = r.f32s(numel)?;
            params.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
        }
        let optimizer = if r.pos == buf.len() {
            None
        } else {
            if r.take(4)? != OPT_MAGIC {
                return Err("unexpected trailing bytes".into());
            }
            let step = r.u64()?;
            let moments = |r: &mut Reader| params.iter().map(|(_, t)| r.f32s(t.numel())).collect::<std::result::Result<Vec<_>, _>>();
            let m = moments(&mut r)?;
            let v = moments(&mut r)?;
            if r.pos != buf.len() {
                return Err("unexpected trailing bytes".into());
            }
            Some(OptimizerState { step, m, v })
        };
        Ok(Checkpoint { config_text, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DicError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| DicError::io(path, e))?;
        Self::from_bytes(&buf).map_err(|reason| DicError::Checkpoint { path: path.to_path_buf(), reason })
    }

    /// The `model.*` keys of the config block; other keys are ignored.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let pairs = self.config_text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.trim(), v.trim())).filter(|(k, _)| k.starts_with("model."));
        ModelConfig::from_kv(pairs)
    }

    pub fn to_model<T: Element>(&self) -> Result<DiCModel<T>> {
        let cfg = self.model_config()?;
        let mut model = build_model::<T>(&cfg, 0)?;
        model.load_params(self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect())?;
        Ok(model)
    }
}
