//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "GCFXCKPT" | u32 version | u64 meta_len | meta (TOML, UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 ndim | u64 dims[ndim] | f64 values (row-major)
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{GcfxError, Result};
use crate::graph_data::Featurizer;
use crate::model::{DeepGcfx, ModelConfig};
use crate::params::ParamSet;
use crate::trainer::{EpochLog, TrainConfig};

pub const MAGIC: &[u8; 8] = b"GCFXCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub featurizer: Featurizer,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub params: ParamSet,
    /// Serialized run configuration of the command that wrote the file.
    pub provenance: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    provenance: Option<String>,
    train: TrainConfig,
    model: ModelConfig,
    featurizer: Featurizer,
    history: Vec<EpochLog>,
}

fn bad(msg: impl Into<String>) -> GcfxError {
    GcfxError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflows usize"))
    }
}

impl Checkpoint {
    /// Rebuilds the model structure the parameters belong to.
    pub fn build_model(&self) -> Result<DeepGcfx> {
        let (model, layout) = DeepGcfx::init(self.model.clone(), 0)?;
        check_layout(&layout, &self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            epoch: self.epoch,
            provenance: self.provenance.clone(),
            train: self.train.clone(),
            model: self.model.clone(),
            featurizer: self.featurizer.clone(),
            history: self.history.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| bad(format!("config serialization: {e}")))?;
        let mut out = Vec::with_capacity(64 + text.len() + 8 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in self.params.names().iter().zip(self.params.values()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
            for x in value.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).map_err(|_| bad("not a checkpoint file"))? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.len()?;
        let text =
            std::str::from_utf8(r.take(meta_len)?).map_err(|_| bad("config block is not UTF-8"))?;
        let meta: Meta = toml::from_str(text).map_err(|e| bad(format!("config block: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()?;
            if ndim != 2 {
                return Err(bad(format!("tensor {name}: expected 2 dims, found {ndim}")));
            }
            let rows = r.len()?;
            let cols = r.len()?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| bad("tensor size overflow"))?;
            let bytes = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| bad("tensor size overflow"))?,
            )?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value =
                Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(e.to_string()))?;
            if params.id_of(&name).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
            params.add(name, value);
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after tensor block"));
        }
        let ckpt = Checkpoint {
            train: meta.train,
            model: meta.model,
            featurizer: meta.featurizer,
            epoch: meta.epoch,
            history: meta.history,
            params,
            provenance: meta.provenance,
        };
        if ckpt.featurizer.dim() != ckpt.model.d_in {
            return Err(bad("featurizer width disagrees with the model input width"));
        }
        ckpt.build_model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_layout(expected: &ParamSet, found: &ParamSet) -> Result<()> {
    if expected.len() != found.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            expected.len(),
            found.len()
        )));
    }
    for ((en, ev), (fname, fv)) in expected
        .names()
        .iter()
        .zip(expected.values())
        .zip(found.names().iter().zip(found.values()))
    {
        if en != fname || ev.dim() != fv.dim() {
            return Err(bad(format!(
                "tensor {fname} {:?} does not match expected {en} {:?}",
                fv.dim(),
                ev.dim()
            )));
        }
    }
    Ok(())
}
