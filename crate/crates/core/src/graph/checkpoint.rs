//! Binary checkpoints: every named tensor of a [`Model`], little-endian.
//!
//! Layout: `EENETCKP`, `u32` version, `u8` element width (4 or 8), `u32`
//! tensor count, then per tensor `u32` name length, UTF-8 name, `u32` rank,
//! `u64` dims and the raw values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const MAGIC: &[u8; 8] = b"EENETCKP";
const VERSION: u32 = 1;

pub fn save_checkpoint<F: Float>(model: &Model<F>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let width = std::mem::size_of::<F>() as u8;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[width])?;
    w.write_all(&(model.store().len() as u32).to_le_bytes())?;
    for (_, p) in model.store().iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            match width {
                4 => w.write_all(&(v.to_f64() as f32).to_le_bytes())?,
                _ => w.write_all(&v.to_f64().to_le_bytes())?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| corrupt(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

/// Overwrites every tensor of `model` from `path`. The checkpoint must hold
/// exactly the model's tensors, with the same names and shapes, and the same
/// element width.
pub fn load_checkpoint<F: Float>(model: &mut Model<F>, path: &Path) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_array::<8>(&mut r)? != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let [width] = read_array::<1>(&mut r)?;
    if usize::from(width) != std::mem::size_of::<F>() {
        return Err(corrupt(format!(
            "checkpoint holds {width}-byte values, model uses {}",
            std::mem::size_of::<F>()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    if count != model.store().len() {
        return Err(corrupt(format!(
            "checkpoint has {count} tensors, model has {}",
            model.store().len()
        )));
    }

    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| corrupt(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let id = model
            .store()
            .find(&name)
            .ok_or_else(|| corrupt(format!("unknown tensor {name:?}")))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != model.store().value(id).shape() {
            return Err(corrupt(format!(
                "tensor {name:?} has shape {shape:?}, model expects {:?}",
                model.store().value(id).shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                Ok(match width {
                    4 => F::from_f64(f64::from(f32::from_le_bytes(read_array(&mut r)?))),
                    _ => F::from_f64(f64::from_le_bytes(read_array(&mut r)?)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        loaded.push((id, Tensor::new(shape, data)?));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(corrupt("trailing bytes after last tensor"));
    }
    for (id, value) in loaded {
        *model.store_mut().value_mut(id) = value;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_model, ExitKind, ResNetTopology};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let t = ResNetTopology::eenet8();
        let a: Model<f32> = build_model(&t, &[0, 1], ExitKind::Bnpool, 10, 11).unwrap();
        save_checkpoint(&a, &path).unwrap();
        let mut b: Model<f32> = build_model(&t, &[0, 1], ExitKind::Bnpool, 10, 12).unwrap();
        load_checkpoint(&mut b, &path).unwrap();
        for ((_, pa), (_, pb)) in a.store().iter().zip(b.store().iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&pa.value), bits(&pb.value), "{}", pa.name);
        }
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let t = ResNetTopology::eenet8();
        let a: Model<f32> = build_model(&t, &[0, 1], ExitKind::Pool, 10, 1).unwrap();
        save_checkpoint(&a, &path).unwrap();
        let mut b: Model<f32> = build_model(&t, &[0], ExitKind::Pool, 10, 1).unwrap();
        assert!(matches!(
            load_checkpoint(&mut b, &path),
            Err(Error::Checkpoint(_))
        ));
        let mut c: Model<f64> = build_model(&t, &[0, 1], ExitKind::Pool, 10, 1).unwrap();
        assert!(matches!(
            load_checkpoint(&mut c, &path),
            Err(Error::Checkpoint(_))
        ));
        std::fs::write(&path, b"garbage").unwrap();
        let mut d: Model<f32> = build_model(&t, &[0, 1], ExitKind::Pool, 10, 1).unwrap();
        assert!(load_checkpoint(&mut d, &path).is_err());
    }
}
