//! `CHEP` end-point parameters and the `CHTJ` checkpoint trajectory store.
//!
//! ```text
//! CHEP
//!   magic "CHEP", version u32 = 1, d_v u32, d_t u32, d u32
//!   W_v: d_v × d f32 row-major, W_t: d_t × d f32 row-major, tau_log f64
//! CHTJ
//!   magic "CHTJ", version u32 = 1
//!   then per checkpoint, in insertion order:
//!     eta f64, blob_len u64, CHEP blob
//! ```
//!
//! Weights are stored as float32. [`round_to_f32`] gives the parameters that
//! a round trip through disk produces.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::bin::{check_dim, put_f32s, put_f64, put_u32, put_u64, Flavor, LeReader};
use crate::endpoint::EndpointParams;
use crate::numerics::DenseMatrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CHEP";
pub const VERSION: u32 = 1;
pub const TRAJECTORY_MAGIC: &[u8; 4] = b"CHTJ";
pub const TRAJECTORY_VERSION: u32 = 1;

fn to_f32(m: &DenseMatrix) -> Result<Vec<f32>> {
    m.as_slice()
        .iter()
        .map(|&v| {
            let f = v as f32;
            if f.is_finite() {
                Ok(f)
            } else {
                Err(Error::format(format!("weight {v} is not representable as float32")))
            }
        })
        .collect()
}

/// The parameters as they come back from disk.
pub fn round_to_f32(p: &EndpointParams) -> EndpointParams {
    let round = |m: &DenseMatrix| DenseMatrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)] as f32 as f64);
    EndpointParams::new(round(&p.w_v), round(&p.w_t), p.tau_log).expect("rounding keeps shapes")
}

pub fn write_params(w: &mut impl Write, p: &EndpointParams) -> Result<()> {
    if !p.tau_log.is_finite() {
        return Err(Error::format("non-finite log-temperature"));
    }
    for (name, v) in [("d_v", p.d_v()), ("d_t", p.d_t()), ("d", p.d())] {
        if v == 0 || v > super::MAX_DIM as usize {
            return Err(Error::format(format!("{name} = {v} outside 1..={}", super::MAX_DIM)));
        }
    }
    let wv = to_f32(&p.w_v)?;
    let wt = to_f32(&p.w_t)?;
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, p.d_v() as u32)?;
    put_u32(w, p.d_t() as u32)?;
    put_u32(w, p.d() as u32)?;
    put_f32s(w, &wv)?;
    put_f32s(w, &wt)?;
    put_f64(w, p.tau_log)?;
    Ok(())
}

fn read_params_from<R: Read>(r: &mut LeReader<R>) -> Result<EndpointParams> {
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let mut dims = [0usize; 3];
    for (slot, name) in dims.iter_mut().zip(["d_v", "d_t", "d"]) {
        let at = r.offset();
        let v = r.u32(name)?;
        *slot = check_dim(r, at, name, v, false)?;
    }
    let [d_v, d_t, d] = dims;
    let wv = r.f32s(d_v * d, "W_v")?;
    let wt = r.f32s(d_t * d, "W_t")?;
    let tau_log = r.finite_f64("tau_log")?;
    let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
    EndpointParams::new(
        DenseMatrix::from_vec(d_v, d, widen(wv))?,
        DenseMatrix::from_vec(d_t, d, widen(wt))?,
        tau_log,
    )
}

pub fn read_params(r: impl Read) -> Result<EndpointParams> {
    let mut r = LeReader::new(r, Flavor::Named("CHEP"));
    let p = read_params_from(&mut r)?;
    r.expect_eof()?;
    Ok(p)
}

pub fn encode_params(p: &EndpointParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_params(&mut out, p)?;
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<EndpointParams> {
    read_params(bytes)
}

pub fn save_params(path: impl AsRef<Path>, p: &EndpointParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<EndpointParams> {
    read_params(BufReader::new(File::open(path)?))
}

fn read_entry<R: Read>(r: &mut LeReader<R>) -> Result<(EndpointParams, f64)> {
    let at = r.offset();
    let eta = r.finite_f64("eta")?;
    if eta <= 0.0 {
        return Err(r.error_at(at, format!("learning rate {eta} must be positive")));
    }
    let len = r.u64("blob length")?;
    let start = r.offset();
    let p = read_params_from(r)?;
    if r.offset() - start != len {
        return Err(r.error_at(start, format!("blob length {len} disagrees with its content")));
    }
    Ok((p, eta))
}

/// Decodes a whole trajectory held in memory.
pub fn decode_trajectory(bytes: &[u8]) -> Result<Vec<(EndpointParams, f64)>> {
    let mut r = LeReader::new(bytes, Flavor::Named("CHTJ"));
    r.magic(TRAJECTORY_MAGIC)?;
    r.version(TRAJECTORY_VERSION)?;
    let mut out = Vec::new();
    while r.offset() < bytes.len() as u64 {
        out.push(read_entry(&mut r)?);
    }
    Ok(out)
}

pub fn encode_trajectory(entries: &[(EndpointParams, f64)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(TRAJECTORY_MAGIC);
    put_u32(&mut out, TRAJECTORY_VERSION)?;
    for (p, eta) in entries {
        encode_entry(&mut out, p, *eta)?;
    }
    Ok(out)
}

fn encode_entry(out: &mut Vec<u8>, p: &EndpointParams, eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::config(format!("learning rate {eta} must be positive")));
    }
    let blob = encode_params(p)?;
    put_f64(out, eta)?;
    put_u64(out, blob.len() as u64)?;
    out.extend_from_slice(&blob);
    Ok(())
}

/// Append-only file of checkpoints with their learning rates.
#[derive(Debug)]
pub struct CheckpointStore {
    path: PathBuf,
    /// Byte offset of every entry.
    offsets: Vec<u64>,
    end: u64,
}

impl CheckpointStore {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let header = encode_trajectory(&[])?;
        std::fs::write(&path, &header)?;
        Ok(Self {
            path,
            offsets: Vec::new(),
            end: header.len() as u64,
        })
    }

    /// Opens and validates an existing store.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let len = file.metadata()?.len();
        let mut r = LeReader::new(BufReader::new(file), Flavor::Named("CHTJ"));
        r.magic(TRAJECTORY_MAGIC)?;
        r.version(TRAJECTORY_VERSION)?;
        let mut offsets = Vec::new();
        while r.offset() < len {
            offsets.push(r.offset());
            read_entry(&mut r)?;
        }
        Ok(Self {
            path,
            offsets,
            end: len,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn append(&mut self, p: &EndpointParams, eta: f64) -> Result<()> {
        let mut entry = Vec::new();
        encode_entry(&mut entry, p, eta)?;
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        f.write_all(&entry)?;
        f.flush()?;
        self.offsets.push(self.end);
        self.end += entry.len() as u64;
        Ok(())
    }

    pub fn get(&self, t: usize) -> Result<(EndpointParams, f64)> {
        let &offset = self.offsets.get(t).ok_or(Error::IndexOutOfRange {
            index: t,
            len: self.offsets.len(),
        })?;
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(offset))?;
        let mut r = LeReader::new(BufReader::new(f), Flavor::Named("CHTJ"));
        read_entry(&mut r)
    }

    pub fn load_all(&self) -> Result<Vec<(EndpointParams, f64)>> {
        decode_trajectory(&std::fs::read(&self.path)?)
    }
}
