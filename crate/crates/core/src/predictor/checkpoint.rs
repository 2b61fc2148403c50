//! Versioned binary checkpoints: every named parameter followed by the bank.
//!
//! Layout (little-endian): magic, `u64` parameter count, then per parameter
//! `u64` name length, UTF-8 name, `u64` rank, `u64` extents, `f64` values;
//! finally a memory bank dump.

use std::io::{Read, Write};

use super::StapModel;
use crate::error::{Result, StapError};
use crate::spatial::bank::{read_f64s, read_u64, MemoryBank};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"STAPCK1";

pub fn save_checkpoint(model: &StapModel, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(model.store.len() as u64).to_le_bytes())?;
    for p in model.store.iter() {
        w.write_all(&(p.name.len() as u64).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &e in shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    model.bank.write_to(w)
}

/// Restores values into a model built with the same configuration. Names and
/// shapes must match exactly.
pub fn load_checkpoint(model: &mut StapModel, r: &mut impl Read) -> Result<()> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|e| StapError::Format(format!("truncated checkpoint: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(StapError::Format("not a checkpoint".into()));
    }
    let count = read_u64(r)? as usize;
    if count != model.store.len() {
        return Err(StapError::Format(format!(
            "checkpoint holds {count} parameters, model has {}",
            model.store.len()
        )));
    }
    for p in model.store.iter_mut() {
        let len = read_u64(r)? as usize;
        if len > 4096 {
            return Err(StapError::Format("parameter name too long".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| StapError::Format(format!("truncated checkpoint: {e}")))?;
        let name =
            String::from_utf8(name).map_err(|_| StapError::Format("name is not UTF-8".into()))?;
        if name != p.name {
            return Err(StapError::Format(format!(
                "expected parameter {}, found {name}",
                p.name
            )));
        }
        let rank = read_u64(r)? as usize;
        if rank > 8 {
            return Err(StapError::Format(format!(
                "{name}: implausible rank {rank}"
            )));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|_| read_u64(r).map(|v| v as usize))
            .collect::<Result<_>>()?;
        if shape != p.value.shape() {
            return Err(StapError::Format(format!(
                "{name}: shape {shape:?} differs from {:?}",
                p.value.shape()
            )));
        }
        let values = read_f64s(r, p.value.len())?;
        p.value.data_mut().copy_from_slice(&values);
    }
    let bank = MemoryBank::read_from(r)?;
    if bank.slots.value.shape() != model.bank.slots.value.shape() {
        return Err(StapError::Format(
            "bank shape differs from the model's".into(),
        ));
    }
    model.bank = bank;
    Ok(())
}
