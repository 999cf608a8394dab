//! Parameter checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "AVENRCK\0"
//! version  u32      format version (currently 1)
//! count    u64      number of parameters
//! entry*   for each parameter, in store order:
//!     name_len u32, name utf-8 bytes,
//!     frozen   u8,
//!     ndim     u32, dims u64 × ndim,
//!     payload  f64 little-endian × numel
//! ```
//!
//! Round-trips are bit-exact: payloads are raw IEEE-754 bit patterns.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"AVENRCK\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name)?;
        f.write_all(&[p.frozen as u8])?;
        f.write_all(&(p.tensor.shape.len() as u32).to_le_bytes())?;
        for &d in &p.tensor.shape {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &p.tensor.data {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// A parameter read back from disk.
pub struct LoadedParam {
    pub name: String,
    pub frozen: bool,
    pub tensor: Tensor,
}

pub fn load(path: &Path) -> Result<Vec<LoadedParam>, CheckpointError> {
    let mut f = io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = read_u64(&mut f)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not utf-8".into()))?;
        let mut frozen = [0u8; 1];
        f.read_exact(&mut frozen)?;
        let ndim = read_u32(&mut f)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut f)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for x in &mut data {
            f.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
        params.push(LoadedParam {
            name,
            frozen: frozen[0] != 0,
            tensor: Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
        });
    }
    Ok(params)
}

/// Overwrites the values of `store` with the checkpoint at `path`.
///
/// The checkpoint must contain exactly the store's parameters with matching
/// shapes and frozen flags; anything else is a mismatch error.
pub fn restore(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let loaded = load(path)?;
    if loaded.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "parameter count {} on disk vs {} in model",
            loaded.len(),
            store.len()
        )));
    }
    for lp in loaded {
        let id = store.lookup(&lp.name).ok_or_else(|| {
            CheckpointError::Mismatch(format!("parameter {:?} not in model", lp.name))
        })?;
        let p = store.get_mut(id);
        if p.tensor.shape != lp.tensor.shape || p.frozen != lp.frozen {
            return Err(CheckpointError::Mismatch(format!(
                "parameter {:?}: shape/frozen flag differs from model",
                lp.name
            )));
        }
        p.tensor.data = lp.tensor.data;
        p.tensor.grad = None;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add_seeded("a.w", vec![3, 2], Init::UniformFanIn(3), 11, false)
            .unwrap();
        s.add_seeded("a.b", vec![2], Init::Zeros, 11, false).unwrap();
        s.add_seeded("frozen.w", vec![4], Init::UniformFanIn(4), 11, true)
            .unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        save(&store, &path).unwrap();

        let mut restored = sample_store();
        // Scramble before restoring.
        for (_, _p) in restored.iter() {}
        let id = restored.lookup("a.w").unwrap();
        restored.get_mut(id).tensor.data[0] = 999.0;
        restore(&mut restored, &path).unwrap();

        for ((_, p), (_, q)) in store.iter().zip(restored.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.frozen, q.frozen);
            assert_eq!(p.tensor.shape, q.tensor.shape);
            let a: Vec<u64> = p.tensor.data.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = q.tensor.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        save(&store, &path).unwrap();

        let mut other = ParamStore::new();
        other
            .add_seeded("different", vec![2], Init::Zeros, 0, false)
            .unwrap();
        assert!(matches!(
            restore(&mut other, &path),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }
}
