//! Binary parameter checkpoints: a versioned magic header followed by
//! (name, shape, values) triples, with optional optimizer moments so
//! training can resume mid-schedule. All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AdamW, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MTRKCKP1";

pub struct Checkpoint {
    pub epoch: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<OptimizerState>,
}

pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    epoch: u64,
    optimizer: Option<&AdamW>,
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&epoch.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, value) in store.entries_for_checkpoint() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(value.shape.len() as u32).to_le_bytes())?;
        for &d in &value.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &value.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    match optimizer {
        Some(opt) => {
            w.write_all(&[1u8])?;
            w.write_all(&opt.step_count().to_le_bytes())?;
            let (m, v) = opt.moments();
            for buf in m.iter().chain(v.iter()) {
                for &x in buf {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic header in {}",
            path.display()
        )));
    }
    let epoch = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("invalid parameter name".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(read_f64(&mut r)?);
        }
        params.push((name, shape, data));
    }
    let mut flag = [0u8; 1];
    read_exact(&mut r, &mut flag)?;
    let optimizer = if flag[0] == 1 {
        let step = read_u64(&mut r)?;
        let sizes: Vec<usize> = params.iter().map(|(_, s, _)| s.iter().product()).collect();
        let read_bank = |r: &mut BufReader<File>| -> Result<Vec<Vec<f64>>> {
            sizes
                .iter()
                .map(|&n| (0..n).map(|_| read_f64(r)).collect())
                .collect()
        };
        let m = read_bank(&mut r)?;
        let v = read_bank(&mut r)?;
        Some(OptimizerState { step, m, v })
    } else {
        None
    };
    Ok(Checkpoint {
        epoch,
        params,
        optimizer,
    })
}

/// Copy checkpoint values into a store built with the same architecture.
pub fn apply(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (name, shape, data) in &ckpt.params {
        let pid = store.lookup(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter {name} unknown to model"))
        })?;
        let value = store.value_mut(pid);
        if value.shape != *shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name} shape {:?} does not match model {:?}",
                shape, value.shape
            )));
        }
        value.data.copy_from_slice(data);
    }
    Ok(())
}

pub fn apply_optimizer(opt: &mut AdamW, state: OptimizerState) {
    opt.restore(state.step, state.m, state.v);
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
