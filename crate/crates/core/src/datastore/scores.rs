//! Score files.
//!
//! Binary `CHSC`:
//!
//! ```text
//! magic "CHSC", version u32 = 1
//! method: len u32 + UTF-8
//! config_fingerprint u64
//! sketch: len u32 + UTF-8 JSON of the sketch spec, or "null"
//! count u64
//! per record: id u64, alignment f64, learnability f64, relevance f64,
//!             utility f64, batch_fingerprint u64
//! ```
//!
//! Text, one record per line after `#` header lines and a column line:
//!
//! ```text
//! # chips-scores v1
//! # method=chips
//! # config_fingerprint=00112233aabbccdd
//! # sketch={"kind":"countsketch",...}
//! id,alignment,learnability,relevance,utility,batch_fingerprint
//! 17,1.25e-3,3.4e-1,6.1e-1,2.59e-4,9f00aa0012345678
//! ```
//!
//! Floats are written in shortest round-trip exponent form, fingerprints as
//! 16 hex digits. Both forms round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::bin::{put_f64, put_string, put_u32, put_u64, Flavor, LeReader};
use super::MAX_STRING_BYTES;
use crate::scoring::ScoreRecord;
use crate::sketch::SketchSpec;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CHSC";
pub const VERSION: u32 = 1;
pub const TEXT_BANNER: &str = "# chips-scores v1";
pub const COLUMNS: &str = "id,alignment,learnability,relevance,utility,batch_fingerprint";

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHeader {
    pub method: String,
    pub config_fingerprint: u64,
    pub sketch: Option<SketchSpec>,
}

fn sketch_json(s: &Option<SketchSpec>) -> String {
    serde_json::to_string(s).expect("sketch spec serializes")
}

fn parse_sketch(json: &str) -> Result<Option<SketchSpec>> {
    let spec: Option<SketchSpec> =
        serde_json::from_str(json).map_err(|e| Error::format(format!("bad sketch spec: {e}")))?;
    if let Some(s) = &spec {
        s.validate().map_err(|e| Error::format(format!("bad sketch spec: {e}")))?;
    }
    Ok(spec)
}

fn check_method(m: &str) -> Result<()> {
    if m.is_empty() || !m.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(Error::format(format!("method name {m:?} must be non-empty [A-Za-z0-9_-]")));
    }
    Ok(())
}

/// Rejects records that violate the score invariants.
pub fn validate_record(r: &ScoreRecord) -> Result<()> {
    let fields = [r.alignment, r.learnability, r.relevance, r.utility];
    if !fields.iter().all(|v| v.is_finite()) {
        return Err(Error::format(format!("record {}: non-finite field", r.id)));
    }
    if r.learnability < 0.0 || !(0.0..=1.0).contains(&r.relevance) {
        return Err(Error::format(format!("record {}: weight out of range", r.id)));
    }
    let prod = r.alignment * r.learnability * r.relevance;
    if (r.utility - prod).abs() > 1e-12 * r.utility.abs().max(prod.abs()) {
        return Err(Error::format(format!("record {}: utility is not the product of its factors", r.id)));
    }
    Ok(())
}

/// Streaming binary writer; the count is patched on finish.
pub struct ScoreWriter<W: Write + Seek> {
    inner: W,
    count_at: u64,
    written: u64,
}

impl ScoreWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: &ScoreHeader) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

impl<W: Write + Seek> ScoreWriter<W> {
    pub fn new(mut inner: W, header: &ScoreHeader) -> Result<Self> {
        check_method(&header.method)?;
        inner.write_all(MAGIC)?;
        put_u32(&mut inner, VERSION)?;
        put_string(&mut inner, &header.method)?;
        put_u64(&mut inner, header.config_fingerprint)?;
        put_string(&mut inner, &sketch_json(&header.sketch))?;
        let count_at = inner.stream_position()?;
        put_u64(&mut inner, 0)?;
        Ok(Self {
            inner,
            count_at,
            written: 0,
        })
    }

    pub fn write(&mut self, r: &ScoreRecord) -> Result<()> {
        validate_record(r)?;
        put_u64(&mut self.inner, r.id)?;
        for v in [r.alignment, r.learnability, r.relevance, r.utility] {
            put_f64(&mut self.inner, v)?;
        }
        put_u64(&mut self.inner, r.batch_fingerprint)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        let end = self.inner.stream_position()?;
        self.inner.seek(SeekFrom::Start(self.count_at))?;
        put_u64(&mut self.inner, self.written)?;
        self.inner.seek(SeekFrom::Start(end))?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streaming binary reader.
pub struct ScoreReader<R: Read> {
    r: LeReader<R>,
    header: ScoreHeader,
    count: u64,
    read: u64,
    done: bool,
}

impl ScoreReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> ScoreReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut r = LeReader::new(inner, Flavor::Named("CHSC"));
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let method = r.string(MAX_STRING_BYTES, "method")?;
        check_method(&method)?;
        let config_fingerprint = r.u64("config fingerprint")?;
        let sketch = parse_sketch(&r.string(MAX_STRING_BYTES, "sketch spec")?)?;
        let count = r.u64("count")?;
        Ok(Self {
            r,
            header: ScoreHeader {
                method,
                config_fingerprint,
                sketch,
            },
            count,
            read: 0,
            done: false,
        })
    }

    pub fn header(&self) -> &ScoreHeader {
        &self.header
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    fn next_record(&mut self) -> Result<ScoreRecord> {
        let id = self.r.u64("id")?;
        let alignment = self.r.f64("alignment")?;
        let learnability = self.r.f64("learnability")?;
        let relevance = self.r.f64("relevance")?;
        let utility = self.r.f64("utility")?;
        let batch_fingerprint = self.r.u64("batch fingerprint")?;
        let rec = ScoreRecord {
            id,
            alignment,
            learnability,
            relevance,
            utility,
            batch_fingerprint,
        };
        validate_record(&rec)?;
        Ok(rec)
    }
}

impl<R: Read> Iterator for ScoreReader<R> {
    type Item = Result<ScoreRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.read == self.count {
            self.done = true;
            return self.r.expect_eof().err().map(Err);
        }
        let out = self.next_record();
        match &out {
            Ok(_) => self.read += 1,
            Err(_) => self.done = true,
        }
        Some(out)
    }
}

pub fn encode_scores(header: &ScoreHeader, records: &[ScoreRecord]) -> Result<Vec<u8>> {
    let mut w = ScoreWriter::new(std::io::Cursor::new(Vec::new()), header)?;
    for r in records {
        w.write(r)?;
    }
    Ok(w.finish()?.into_inner())
}

pub fn decode_scores(bytes: &[u8]) -> Result<(ScoreHeader, Vec<ScoreRecord>)> {
    let reader = ScoreReader::new(bytes)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

pub fn write_scores(path: impl AsRef<Path>, header: &ScoreHeader, records: &[ScoreRecord]) -> Result<()> {
    let mut w = ScoreWriter::create(path, header)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<(ScoreHeader, Vec<ScoreRecord>)> {
    let reader = ScoreReader::open(path)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

pub fn write_scores_text(w: &mut impl Write, header: &ScoreHeader, records: &[ScoreRecord]) -> Result<()> {
    check_method(&header.method)?;
    writeln!(w, "{TEXT_BANNER}")?;
    writeln!(w, "# method={}", header.method)?;
    writeln!(w, "# config_fingerprint={:016x}", header.config_fingerprint)?;
    writeln!(w, "# sketch={}", sketch_json(&header.sketch))?;
    writeln!(w, "{COLUMNS}")?;
    for r in records {
        validate_record(r)?;
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{:016x}",
            r.id, r.alignment, r.learnability, r.relevance, r.utility, r.batch_fingerprint
        )?;
    }
    Ok(())
}

fn hex_u64(s: &str, line: usize) -> Result<u64> {
    if s.len() != 16 {
        return Err(Error::format(format!("line {line}: fingerprint must be 16 hex digits")));
    }
    u64::from_str_radix(s, 16).map_err(|_| Error::format(format!("line {line}: bad hex {s:?}")))
}

fn float(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::format(format!("line {line}: bad number {s:?}")))
}

pub fn parse_scores_text(text: &str) -> Result<(ScoreHeader, Vec<ScoreRecord>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == TEXT_BANNER => {}
        _ => return Err(Error::format(format!("score text must start with {TEXT_BANNER:?}"))),
    }
    let mut method = None;
    let mut config_fingerprint = None;
    let mut sketch = None;
    let mut records = Vec::new();
    let mut seen_columns = false;
    for (n, line) in lines {
        if !seen_columns {
            if let Some(rest) = line.strip_prefix("# ") {
                let (key, value) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::format(format!("line {n}: header must be key=value")))?;
                match key {
                    "method" => {
                        check_method(value)?;
                        method = Some(value.to_string());
                    }
                    "config_fingerprint" => config_fingerprint = Some(hex_u64(value, n)?),
                    "sketch" => sketch = Some(parse_sketch(value)?),
                    other => return Err(Error::format(format!("line {n}: unknown header key {other:?}"))),
                }
                continue;
            }
            if line != COLUMNS {
                return Err(Error::format(format!("line {n}: expected column line {COLUMNS:?}")));
            }
            seen_columns = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::format(format!("line {n}: expected 6 fields, got {}", cols.len())));
        }
        let id = cols[0]
            .parse::<u64>()
            .map_err(|_| Error::format(format!("line {n}: bad id {:?}", cols[0])))?;
        let rec = ScoreRecord {
            id,
            alignment: float(cols[1], n)?,
            learnability: float(cols[2], n)?,
            relevance: float(cols[3], n)?,
            utility: float(cols[4], n)?,
            batch_fingerprint: hex_u64(cols[5], n)?,
        };
        validate_record(&rec).map_err(|e| Error::format(format!("line {n}: {e}")))?;
        records.push(rec);
    }
    if !seen_columns {
        return Err(Error::format("missing column line"));
    }
    let header = ScoreHeader {
        method: method.ok_or_else(|| Error::format("missing method header"))?,
        config_fingerprint: config_fingerprint.ok_or_else(|| Error::format("missing config_fingerprint header"))?,
        sketch: sketch.ok_or_else(|| Error::format("missing sketch header"))?,
    };
    Ok((header, records))
}

/// Reads either form, picking by the leading magic.
pub fn read_scores_any(path: impl AsRef<Path>) -> Result<(ScoreHeader, Vec<ScoreRecord>)> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        decode_scores(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::format("score file is neither CHSC nor UTF-8 text"))?;
        parse_scores_text(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::sketch::SketchKind;
    use rand::RngCore;

    fn header() -> ScoreHeader {
        ScoreHeader {
            method: "chips".into(),
            config_fingerprint: 0x0123_4567_89ab_cdef,
            sketch: Some(SketchSpec::new(SketchKind::Countsketch, 8, 100, 3).unwrap()),
        }
    }

    fn records(n: u64) -> Vec<ScoreRecord> {
        let mut rng = Rng::new(5);
        (0..n)
            .map(|i| ScoreRecord::new(i * 3, rng.normal() * 1e-3, rng.uniform() * 2.0, 0.27 + 0.46 * rng.uniform(), rng.next_u64()))
            .collect()
    }

    #[test]
    fn binary_round_trip() {
        let recs = records(500);
        let bytes = encode_scores(&header(), &recs).unwrap();
        let (h, back) = decode_scores(&bytes).unwrap();
        assert_eq!(h, header());
        assert_eq!(back, recs);
        assert_eq!(encode_scores(&h, &back).unwrap(), bytes);
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let recs = records(500);
        let mut out = Vec::new();
        write_scores_text(&mut out, &header(), &recs).unwrap();
        let text = String::from_utf8(out.clone()).unwrap();
        let (h, back) = parse_scores_text(&text).unwrap();
        assert_eq!(h, header());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.alignment.to_bits(), b.alignment.to_bits());
            assert_eq!(a.utility.to_bits(), b.utility.to_bits());
        }
        let mut again = Vec::new();
        write_scores_text(&mut again, &h, &back).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn unsketched_header() {
        let h = ScoreHeader { sketch: None, ..header() };
        let mut out = Vec::new();
        write_scores_text(&mut out, &h, &[]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("# sketch=null"));
        assert_eq!(parse_scores_text(&text).unwrap().0, h);
    }

    #[test]
    fn inconsistent_utility_rejected() {
        let mut r = ScoreRecord::new(1, 2.0, 0.5, 0.5, 0);
        r.utility = 0.6;
        assert!(validate_record(&r).is_err());
        let text = format!("{TEXT_BANNER}\n# method=x\n# config_fingerprint=0000000000000000\n# sketch=null\n{COLUMNS}\n1,2e0,5e-1,5e-1,6e-1,0000000000000000\n");
        assert!(parse_scores_text(&text).is_err());
    }

    #[test]
    fn truncated_binary_rejected() {
        let bytes = encode_scores(&header(), &records(3)).unwrap();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(decode_scores(&bytes[..cut]).is_err());
        }
    }
}
