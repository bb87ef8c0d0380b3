//! Binary parameter container.
//!
//! Layout (little-endian): magic `CADNETCK`, `u32` version, `u32` entry
//! count, then per entry a `u32` name length, UTF-8 name, `u8` dtype
//! (0 = f32), `u32` rank, `u64` dims and the raw element data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CADNETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unsupported dtype tag {0}")]
    Dtype(u8),
    #[error("malformed entry: {0}")]
    Malformed(String),
    #[error("parameter `{0}` is missing from the checkpoint")]
    Missing(String),
    #[error("checkpoint has parameter `{0}` that the model does not")]
    Unexpected(String),
    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

pub fn save(path: &Path, params: &ParamStore) -> Result<()> {
    let io = |source| CheckpointError::Io { path: path.to_owned(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_to(&mut w, params).map_err(io)?;
    w.flush().map_err(io)
}

pub fn write_to(w: &mut impl Write, params: &ParamStore) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, t) in params.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(<f32 as Real>::DTYPE)?;
        w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
        for &d in &t.shape {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in &t.data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let io = |source| CheckpointError::Io { path: path.to_owned(), source };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    read_from(&mut r).map_err(|e| match e {
        CheckpointError::Io { source, .. } => io(source),
        other => other,
    })
}

pub fn read_from(r: &mut impl Read) -> Result<ParamStore> {
    let io = |source| CheckpointError::Io { path: PathBuf::new(), source };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))?;
        let dtype = r.read_u8().map_err(io)?;
        if dtype != <f32 as Real>::DTYPE {
            return Err(CheckpointError::Dtype(dtype));
        }
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<_>>()
            .map_err(io)?;
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
        if store.index_of(&name).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate entry `{name}`")));
        }
        store.insert(&name, Tensor::new(shape, data));
    }
    Ok(store)
}

/// Copies checkpoint values into `model`, requiring the same names and shapes.
pub fn restore(model: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    for (name, _) in loaded.iter() {
        if model.index_of(name).is_none() {
            return Err(CheckpointError::Unexpected(name.to_owned()));
        }
    }
    for i in 0..model.len() {
        let name = model.name(i).to_owned();
        let src = loaded.get(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        let dst = model.tensor_mut(i);
        if dst.shape != src.shape {
            return Err(CheckpointError::Shape { name, expected: dst.shape.clone(), found: src.shape.clone() });
        }
        dst.data.copy_from_slice(&src.data);
    }
    Ok(())
}
