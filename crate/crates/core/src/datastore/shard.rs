//! `CHFS` feature shards.
//!
//! ```text
//! header (28 bytes)
//!   0  magic    "CHFS"
//!   4  version  u32 = 1
//!   8  count    u64
//!  16  d_v      u32
//!  20  d_t      u32
//!  24  flags    u32   bit 0: records carry concept tags
//! record
//!   id u64, h: d_v × f32, t: d_t × f32
//!   if tagged: n_tags u32, then per tag: len u32 + UTF-8 bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::bin::{check_dim, put_f32s, put_string, put_u32, put_u64, Flavor, LeReader};
use super::MAX_STRING_BYTES;
use crate::endpoint::FeatureBatch;
use crate::numerics::DenseMatrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CHFS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 28;
pub const FLAG_TAGS: u32 = 1;

/// Most tags a single record may carry.
pub const MAX_TAGS: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub count: u64,
    pub d_v: u32,
    pub d_t: u32,
    pub has_tags: bool,
}

impl ShardHeader {
    pub fn flags(&self) -> u32 {
        if self.has_tags {
            FLAG_TAGS
        } else {
            0
        }
    }

    fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u64(w, self.count)?;
        put_u32(w, self.d_v)?;
        put_u32(w, self.d_t)?;
        put_u32(w, self.flags())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardRecord {
    pub id: u64,
    pub h: Vec<f32>,
    pub t: Vec<f32>,
    /// Present exactly when the shard is tagged.
    pub tags: Option<Vec<String>>,
}

/// Streaming writer; the record count is patched into the header on finish.
pub struct ShardWriter<W: Write + Seek> {
    inner: W,
    header: ShardHeader,
    written: u64,
}

impl ShardWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, d_v: u32, d_t: u32, has_tags: bool) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), d_v, d_t, has_tags)
    }
}

impl<W: Write + Seek> ShardWriter<W> {
    pub fn new(mut inner: W, d_v: u32, d_t: u32, has_tags: bool) -> Result<Self> {
        for (name, v) in [("d_v", d_v), ("d_t", d_t)] {
            if v == 0 || v > super::MAX_DIM {
                return Err(Error::config(format!("{name} = {v} outside 1..={}", super::MAX_DIM)));
            }
        }
        let header = ShardHeader {
            count: 0,
            d_v,
            d_t,
            has_tags,
        };
        header.write(&mut inner)?;
        Ok(Self {
            inner,
            header,
            written: 0,
        })
    }

    pub fn header(&self) -> ShardHeader {
        ShardHeader {
            count: self.written,
            ..self.header
        }
    }

    pub fn write_record(&mut self, rec: &ShardRecord) -> Result<()> {
        if rec.h.len() != self.header.d_v as usize || rec.t.len() != self.header.d_t as usize {
            return Err(Error::shape(format!(
                "record {} has {}/{} features, shard expects {}/{}",
                rec.id,
                rec.h.len(),
                rec.t.len(),
                self.header.d_v,
                self.header.d_t
            )));
        }
        if !rec.h.iter().chain(&rec.t).all(|v| v.is_finite()) {
            return Err(Error::format(format!("record {} has non-finite features", rec.id)));
        }
        match (&rec.tags, self.header.has_tags) {
            (Some(_), false) => return Err(Error::format("tags given for an untagged shard")),
            (None, true) => return Err(Error::format("tagged shard needs a tag list on every record")),
            _ => {}
        }
        put_u64(&mut self.inner, rec.id)?;
        put_f32s(&mut self.inner, &rec.h)?;
        put_f32s(&mut self.inner, &rec.t)?;
        if let Some(tags) = &rec.tags {
            if tags.len() > MAX_TAGS as usize {
                return Err(Error::format(format!("record {} has more than {MAX_TAGS} tags", rec.id)));
            }
            put_u32(&mut self.inner, tags.len() as u32)?;
            for t in tags {
                put_string(&mut self.inner, t)?;
            }
        }
        self.written += 1;
        Ok(())
    }

    /// Patches the count, flushes, and returns the underlying writer.
    pub fn finish(mut self) -> Result<W> {
        let end = self.inner.stream_position()?;
        self.inner.seek(SeekFrom::Start(8))?;
        put_u64(&mut self.inner, self.written)?;
        self.inner.seek(SeekFrom::Start(end))?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streaming reader over the records of one shard.
pub struct ShardReader<R: Read> {
    r: LeReader<R>,
    header: ShardHeader,
    read: u64,
    done: bool,
}

impl ShardReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> ShardReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut r = LeReader::new(inner, Flavor::Shard);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let count = r.u64("count")?;
        let at = r.offset();
        let d_v = r.u32("d_v")?;
        check_dim(&r, at, "d_v", d_v, false)?;
        let d_t = r.u32("d_t")?;
        check_dim(&r, at + 4, "d_t", d_t, false)?;
        let at = r.offset();
        let flags = r.u32("flags")?;
        if flags & !FLAG_TAGS != 0 {
            return Err(r.error_at(at, format!("unknown flag bits {flags:#x}")));
        }
        Ok(Self {
            r,
            header: ShardHeader {
                count,
                d_v,
                d_t,
                has_tags: flags & FLAG_TAGS != 0,
            },
            read: 0,
            done: false,
        })
    }

    pub fn header(&self) -> ShardHeader {
        self.header
    }

    fn next_record(&mut self) -> Result<ShardRecord> {
        let id = self.r.u64("record id")?;
        let h = self.r.f32s(self.header.d_v as usize, "image features")?;
        let t = self.r.f32s(self.header.d_t as usize, "text features")?;
        let tags = if self.header.has_tags {
            let at = self.r.offset();
            let n = self.r.u32("tag count")?;
            if n > MAX_TAGS {
                return Err(self.r.error_at(at, format!("tag count {n} exceeds {MAX_TAGS}")));
            }
            let mut tags = Vec::with_capacity(n as usize);
            for _ in 0..n {
                tags.push(self.r.string(MAX_STRING_BYTES, "tag")?);
            }
            Some(tags)
        } else {
            None
        };
        Ok(ShardRecord { id, h, t, tags })
    }
}

impl<R: Read> Iterator for ShardReader<R> {
    type Item = Result<ShardRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.read == self.header.count {
            self.done = true;
            return match self.r.expect_eof() {
                Ok(()) => None,
                Err(e) => Some(Err(e)),
            };
        }
        match self.next_record() {
            Ok(rec) => {
                self.read += 1;
                Some(Ok(rec))
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Reads a whole shard file into memory.
pub fn read_shard(path: impl AsRef<Path>) -> Result<(ShardHeader, Vec<ShardRecord>)> {
    let reader = ShardReader::open(path)?;
    let header = reader.header();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

/// Decodes a shard held in memory.
pub fn decode_shard(bytes: &[u8]) -> Result<(ShardHeader, Vec<ShardRecord>)> {
    let reader = ShardReader::new(bytes)?;
    let header = reader.header();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

/// Encodes records into an in-memory shard.
pub fn encode_shard(d_v: u32, d_t: u32, has_tags: bool, records: &[ShardRecord]) -> Result<Vec<u8>> {
    let mut w = ShardWriter::new(std::io::Cursor::new(Vec::new()), d_v, d_t, has_tags)?;
    for r in records {
        w.write_record(r)?;
    }
    Ok(w.finish()?.into_inner())
}

/// Widens records to a float64 feature batch.
pub fn records_to_batch(records: &[&ShardRecord]) -> Result<FeatureBatch> {
    let Some(first) = records.first() else {
        return Err(Error::EmptyPool("no records for a batch".into()));
    };
    let (dv, dt) = (first.h.len(), first.t.len());
    let h = DenseMatrix::from_fn(records.len(), dv, |r, c| records[r].h[c] as f64);
    let t = DenseMatrix::from_fn(records.len(), dt, |r, c| records[r].t[c] as f64);
    FeatureBatch::new(records.iter().map(|r| r.id).collect(), h, t)
}
