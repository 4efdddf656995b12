//! `MILC` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MILC"  u32 version
//! u32 input_dim  u32 n_blocks  n_blocks × u32 width  u32 attention_dim  u32 n_classes
//! u32 epoch  f64 validation_loss  f64 validation_auc  u64 config_fingerprint
//! u32 n_groups
//!   per group: u16 len + UTF-8 name, u32 n_params
//!     per param: u16 len + UTF-8 name, u8 trainable, u32 rows, u32 cols, rows·cols × f64
//! ```

use std::path::Path;

use super::{MilModel, ModelConfig};
use crate::autodiff::{ParamId, Tensor};
use crate::data::ByteReader;
use crate::error::{MilError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MILC";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MilModel,
    pub epoch: usize,
    pub validation_loss: f64,
    /// NaN when the validation set could not be scored.
    pub validation_auc: f64,
    pub config_fingerprint: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| MilError::Format(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| MilError::Format(format!("name {s:?} too long")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, cfg.input_dim)?;
    put_u32(&mut out, cfg.block_widths.len())?;
    for &w in &cfg.block_widths {
        put_u32(&mut out, w)?;
    }
    put_u32(&mut out, cfg.attention_dim)?;
    put_u32(&mut out, cfg.n_classes)?;
    put_u32(&mut out, ckpt.epoch)?;
    out.extend_from_slice(&ckpt.validation_loss.to_le_bytes());
    out.extend_from_slice(&ckpt.validation_auc.to_le_bytes());
    out.extend_from_slice(&ckpt.config_fingerprint.to_le_bytes());

    let groups = model.group_names();
    put_u32(&mut out, groups.len())?;
    for group in &groups {
        let members: Vec<ParamId> = model.params().ids().filter(|&id| model.group_of(id) == group).collect();
        put_str(&mut out, group)?;
        put_u32(&mut out, members.len())?;
        for id in members {
            let p = model.params().get(id);
            put_str(&mut out, &p.name)?;
            out.push(u8::from(p.trainable));
            put_u32(&mut out, p.value.rows())?;
            put_u32(&mut out, p.value.cols())?;
            for v in p.value.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(MilError::Format("not a MILC checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(MilError::Format(format!("unsupported checkpoint version {version}")));
    }
    let input_dim = r.u32()? as usize;
    let n_blocks = r.u32()? as usize;
    if n_blocks > r.remaining() / 4 {
        return Err(MilError::Format(format!("{n_blocks} encoder blocks declared")));
    }
    let block_widths = (0..n_blocks)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        input_dim,
        block_widths,
        attention_dim: r.u32()? as usize,
        n_classes: r.u32()? as usize,
    };
    let epoch = r.u32()? as usize;
    let validation_loss = r.f64()?;
    let validation_auc = r.f64()?;
    let config_fingerprint = r.u64()?;

    let mut model = MilModel::new(config, 0).map_err(|e| MilError::Format(e.to_string()))?;
    let mut seen = vec![false; model.params().len()];
    let n_groups = r.u32()?;
    for _ in 0..n_groups {
        let group = r.string()?;
        let n_params = r.u32()?;
        for _ in 0..n_params {
            let name = r.string()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(MilError::Format(format!("trainable flag byte {b}"))),
            };
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| MilError::Format(format!("{rows}x{cols} overflows")))?;
            let values = r.f64s(count)?;
            let id = model
                .params()
                .find(&name)
                .ok_or_else(|| MilError::Format(format!("unexpected parameter {name}")))?;
            if model.group_of(id) != group {
                return Err(MilError::Format(format!("parameter {name} listed under group {group}")));
            }
            if trainable && group == super::GROUP_NORM {
                return Err(MilError::Format(format!("{name} is marked trainable")));
            }
            let p = model.params_mut().get_mut(id);
            if p.value.shape() != (rows, cols) {
                return Err(MilError::Format(format!(
                    "parameter {name} is {rows}x{cols}, expected {:?}",
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(rows, cols, values).map_err(|e| MilError::Format(e.to_string()))?;
            p.trainable = trainable;
            if std::mem::replace(&mut seen[id.0], true) {
                return Err(MilError::Format(format!("parameter {name} appears twice")));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(MilError::Format(format!(
            "parameter {} missing",
            model.params().get(ParamId(missing)).name
        )));
    }
    if r.remaining() != 0 {
        return Err(MilError::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Checkpoint {
        model,
        epoch,
        validation_loss,
        validation_auc,
        config_fingerprint,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
