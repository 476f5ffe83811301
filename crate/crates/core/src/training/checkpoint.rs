//! `PANCKPT1` checkpoints. All integers and floats are little-endian.
//!
//! ```text
//! magic "PANCKPT1" | u32 version
//! u32 len, model config text (key = value lines)
//! u64 seed | u32 epoch | u32 best_epoch | f64 best_val_acc
//! u32 tensor count, per tensor: u32 rank, u32 dims.., f32 data
//! u8 has_optimizer [u64 step, per tensor: f32 m, f32 v]
//! u32 history rows, per row: u32 epoch, f64 train_loss, f64 val_acc
//! ```

use std::path::Path;

use super::adam::AdamState;
use super::EpochRecord;
use crate::config::KeyValues;
use crate::error::{PanError, Result};
use crate::models::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PANCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    /// Training seed; epoch permutations are derived from it.
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u32,
    pub best_epoch: u32,
    pub best_val_acc: f64,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn fresh(model: Model, seed: u64) -> Self {
        let optimizer = Some(AdamState::new(&model.tensors()));
        Checkpoint {
            model,
            optimizer,
            seed,
            epoch: 0,
            best_epoch: 0,
            best_val_acc: f64::NEG_INFINITY,
            history: Vec::new(),
        }
    }

    /// Errors unless the checkpoint was trained with the same architecture.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model.config == expected {
            return Ok(());
        }
        Err(PanError::config(format!(
            "checkpoint holds a {} model ({}) but {} ({}) was requested",
            self.model.config.kind,
            self.model.config.to_key_values().to_text().trim().replace('\n', ", "),
            expected.kind,
            expected.to_key_values().to_text().trim().replace('\n', ", "),
        )))
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = ckpt.model.config.to_key_values().to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.best_epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.best_val_acc.to_le_bytes());
    let tensors = ckpt.model.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let floats = |out: &mut Vec<u8>, xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    for t in &tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        floats(&mut out, t.data());
    }
    match &ckpt.optimizer {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.extend_from_slice(&st.t.to_le_bytes());
            for (m, v) in st.m.iter().zip(&st.v) {
                floats(&mut out, m);
                floats(&mut out, v);
            }
        }
    }
    out.extend_from_slice(&(ckpt.history.len() as u32).to_le_bytes());
    for h in &ckpt.history {
        out.extend_from_slice(&h.epoch.to_le_bytes());
        out.extend_from_slice(&h.train_loss.to_le_bytes());
        out.extend_from_slice(&h.val_acc.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(PanError::format(self.bytes.len() as u64, format!("checkpoint truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.get(..8) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(PanError::format(0, "not a PANCKPT1 checkpoint (bad magic)"));
    }
    let mut r = Reader { bytes, pos: 8 };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(PanError::format(8, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| PanError::format(at as u64, "model config is not UTF-8"))?;
    let mut kv = KeyValues::parse(text).map_err(|e| PanError::format(at as u64, e.to_string()))?;
    let config = ModelConfig::from_key_values(&mut kv)
        .and_then(|c| kv.finish().map(|_| c))
        .map_err(|e| PanError::format(at as u64, e.to_string()))?;
    let mut model = Model::zeros(&config)?;
    let seed = r.u64("seed")?;
    let epoch = r.u32("epoch")?;
    let best_epoch = r.u32("best epoch")?;
    let best_val_acc = r.f64("best accuracy")?;

    let count = r.u32("tensor count")? as usize;
    let expected: Vec<Vec<usize>> = model.tensors().iter().map(|t| t.shape().to_vec()).collect();
    if count != expected.len() {
        return Err(PanError::format(r.pos as u64 - 4, format!("{count} tensors, architecture has {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in &expected {
        let at = r.pos;
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(PanError::format(at as u64, format!("tensor shape {dims:?}, expected {shape:?}")));
        }
        let data = r.floats(dims.iter().product(), "tensor data")?;
        tensors.push(Tensor::new(&dims, data)?);
    }
    model.load_tensors(tensors)?;

    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let t = r.u64("step")?;
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for shape in &expected {
                let n = shape.iter().product();
                m.push(r.floats(n, "first moment")?);
                v.push(r.floats(n, "second moment")?);
            }
            Some(AdamState { m, v, t })
        }
        f => return Err(PanError::format(r.pos as u64 - 1, format!("bad optimizer flag {f}"))),
    };
    let rows = r.u32("history length")? as usize;
    let mut history = Vec::with_capacity(rows.min(1 << 16));
    for _ in 0..rows {
        history.push(EpochRecord {
            epoch: r.u32("history")?,
            train_loss: r.f64("history")?,
            val_acc: r.f64("history")?,
        });
    }
    if r.pos != bytes.len() {
        return Err(PanError::format(r.pos as u64, "trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        seed,
        epoch,
        best_epoch,
        best_val_acc,
        history,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| PanError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| PanError::io(path, e))?;
    decode_checkpoint(&bytes)
}
