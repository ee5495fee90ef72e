//! Little-endian primitives shared by the binary formats.

use std::io::{self, Read, Write};

use crate::{Error, Result};

/// Which error a truncated or malformed read turns into.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Flavor {
    Shard,
    Named(&'static str),
}

/// Reader that tracks its byte offset for error reporting.
pub(crate) struct LeReader<R> {
    inner: R,
    offset: u64,
    flavor: Flavor,
}

impl<R: Read> LeReader<R> {
    pub(crate) fn new(inner: R, flavor: Flavor) -> Self {
        Self {
            inner,
            offset: 0,
            flavor,
        }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn error_at(&self, offset: u64, reason: impl Into<String>) -> Error {
        match self.flavor {
            Flavor::Shard => Error::CorruptShard {
                offset,
                reason: reason.into(),
            },
            Flavor::Named(name) => Error::Format(format!("{name}: {} at byte {offset}", reason.into())),
        }
    }

    pub(crate) fn error(&self, reason: impl Into<String>) -> Error {
        self.error_at(self.offset, reason)
    }

    pub(crate) fn bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(self.error(format!("truncated while reading {what}")))
            }
            Err(e) => Err(Error::Io(e)),
        }
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.bytes(&mut b, what)?;
        Ok(b)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn finite_f64(&mut self, what: &str) -> Result<f64> {
        let at = self.offset;
        let v = self.f64(what)?;
        if !v.is_finite() {
            return Err(self.error_at(at, format!("non-finite {what}")));
        }
        Ok(v)
    }

    /// `n` finite f32 values. Reads in chunks so a lying length fails on EOF
    /// before it can force a large allocation.
    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        const CHUNK: usize = 4096;
        let mut out = Vec::with_capacity(n.min(CHUNK));
        let mut buf = [0u8; 4 * CHUNK];
        let mut left = n;
        while left > 0 {
            let m = left.min(CHUNK);
            let at = self.offset;
            self.bytes(&mut buf[..4 * m], what)?;
            for (j, c) in buf[..4 * m].chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(self.error_at(at + 4 * j as u64, format!("non-finite value in {what}")));
                }
                out.push(v);
            }
            left -= m;
        }
        Ok(out)
    }

    /// `n` finite f64 values, chunked like [`LeReader::f32s`].
    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        const CHUNK: usize = 2048;
        let mut out = Vec::with_capacity(n.min(CHUNK));
        let mut left = n;
        while left > 0 {
            let m = left.min(CHUNK);
            for _ in 0..m {
                out.push(self.finite_f64(what)?);
            }
            left -= m;
        }
        Ok(out)
    }

    pub(crate) fn string(&mut self, max: u32, what: &str) -> Result<String> {
        let at = self.offset;
        let len = self.u32(what)?;
        if len > max {
            return Err(self.error_at(at, format!("{what} length {len} exceeds {max}")));
        }
        let mut buf = vec![0u8; len as usize];
        self.bytes(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| self.error_at(at + 4, format!("{what} is not UTF-8")))
    }

    pub(crate) fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got: [u8; 4] = self.array("magic")?;
        if &got != expect {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expect: u32) -> Result<()> {
        let v = self.u32("version")?;
        if v != expect {
            return Err(Error::Format(format!("unsupported version {v}, expected {expect}")));
        }
        Ok(())
    }

    /// Succeeds only at end of input.
    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(self.error("trailing bytes after declared content")),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(Error::Io(e)),
            }
        }
    }
}

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f32s(w: &mut impl Write, vs: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(4 * vs.len());
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn put_string(w: &mut impl Write, s: &str) -> Result<()> {
    if s.len() > super::MAX_STRING_BYTES as usize {
        return Err(Error::format(format!("string of {} bytes is too long", s.len())));
    }
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn check_dim(r: &LeReader<impl Read>, at: u64, name: &str, v: u32, allow_zero: bool) -> Result<usize> {
    if v > super::MAX_DIM || (!allow_zero && v == 0) {
        return Err(r.error_at(at, format!("{name} = {v} outside 1..={}", super::MAX_DIM)));
    }
    Ok(v as usize)
}
