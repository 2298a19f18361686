//! Binary checkpoints: an 8-byte magic, a format version, the model config
//! as length-prefixed JSON, then every parameter group in canonical order
//! as `ndim`, the dims and raw little-endian `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{Array, Rng, Stream};
use crate::scalar::Scalar;

use super::{init_params, ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"DPTCKPT\0";
const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(params: &ModelParams<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&params.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.write_all(&(cfg.len() as u64).to_le_bytes())?;
    out.write_all(&cfg)?;
    for (_, a) in params.groups() {
        out.write_all(&(a.shape().len() as u64).to_le_bytes())?;
        for &s in a.shape() {
            out.write_all(&(s as u64).to_le_bytes())?;
        }
        for &x in a.data() {
            out.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<ModelParams<T>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut v = [0u8; 4];
    input.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = read_u64(&mut input)? as usize;
    if n > 1 << 20 {
        return Err(Error::Checkpoint("config block too large".into()));
    }
    let mut cfg = vec![0u8; n];
    input.read_exact(&mut cfg)?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    // Init only fixes the layout; every value is overwritten below.
    let mut params = init_params::<T>(&config, &mut Rng::new(0, Stream::Init))?;
    for id in params.ids() {
        let target = params.get_mut(id).expect("own id");
        let ndim = read_u64(&mut input)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim.min(8) {
            shape.push(read_u64(&mut input)? as usize);
        }
        if shape != target.shape() {
            return Err(Error::Checkpoint(format!(
                "group {id}: stored shape {shape:?}, expected {:?}",
                target.shape()
            )));
        }
        let mut data = Vec::with_capacity(target.len());
        for _ in 0..target.len() {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf)?;
            data.push(T::of(f64::from_le_bytes(buf)));
        }
        *target = Array::from_vec(&shape, data)?;
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
