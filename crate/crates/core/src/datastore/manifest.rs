//! Selection manifests: `#` header lines, then one retained id per line in
//! rank order.
//!
//! ```text
//! # chips-manifest v1
//! # method=chips
//! # retention=0.1
//! # pool_size=1000
//! # config_fingerprint=00112233aabbccdd
//! # drift_kl_upper=1.2e-2
//! 412
//! 97
//! ```
//!
//! `drift_kl_upper` is `none` when the pool admits no base distribution.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::scoring::SelectionManifest;
use crate::{Error, Result};

pub const BANNER: &str = "# chips-manifest v1";

pub fn write_manifest(w: &mut impl Write, m: &SelectionManifest) -> Result<()> {
    if m.method.is_empty() || m.method.contains(['\n', '\r']) {
        return Err(Error::format("manifest method must be a non-empty single line"));
    }
    writeln!(w, "{BANNER}")?;
    writeln!(w, "# method={}", m.method)?;
    writeln!(w, "# retention={}", m.retention)?;
    writeln!(w, "# pool_size={}", m.pool_size)?;
    writeln!(w, "# config_fingerprint={:016x}", m.config_fingerprint)?;
    match m.drift_kl_upper {
        Some(kl) => writeln!(w, "# drift_kl_upper={kl:e}")?,
        None => writeln!(w, "# drift_kl_upper=none")?,
    }
    for id in &m.ids {
        writeln!(w, "{id}")?;
    }
    Ok(())
}

pub fn encode_manifest(m: &SelectionManifest) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_manifest(&mut out, m)?;
    Ok(out)
}

pub fn parse_manifest(text: &str) -> Result<SelectionManifest> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    if lines.next().map(|(_, l)| l) != Some(BANNER) {
        return Err(Error::format(format!("manifest must start with {BANNER:?}")));
    }
    let mut method = None;
    let mut retention = None;
    let mut pool_size = None;
    let mut fingerprint = None;
    let mut drift = None;
    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    let bad = |n: usize, what: &str| Error::format(format!("manifest line {n}: bad {what}"));
    for (n, line) in lines {
        if let Some(rest) = line.strip_prefix("# ") {
            if !ids.is_empty() {
                return Err(Error::format(format!("manifest line {n}: header after ids")));
            }
            let (k, v) = rest.split_once('=').ok_or_else(|| bad(n, "header"))?;
            match k {
                "method" if !v.is_empty() => method = Some(v.to_string()),
                "retention" => {
                    let r: f64 = v.parse().map_err(|_| bad(n, "retention"))?;
                    if !(r > 0.0 && r <= 1.0) {
                        return Err(bad(n, "retention"));
                    }
                    retention = Some(r);
                }
                "pool_size" => pool_size = Some(v.parse::<usize>().map_err(|_| bad(n, "pool_size"))?),
                "config_fingerprint" if v.len() == 16 => {
                    fingerprint = Some(u64::from_str_radix(v, 16).map_err(|_| bad(n, "config_fingerprint"))?)
                }
                "drift_kl_upper" => {
                    drift = Some(if v == "none" {
                        None
                    } else {
                        let kl: f64 = v.parse().map_err(|_| bad(n, "drift_kl_upper"))?;
                        if !kl.is_finite() || kl < 0.0 {
                            return Err(bad(n, "drift_kl_upper"));
                        }
                        Some(kl)
                    })
                }
                _ => return Err(bad(n, "header")),
            }
            continue;
        }
        let id: u64 = line.parse().map_err(|_| bad(n, "id"))?;
        if !seen.insert(id) {
            return Err(Error::DuplicateSample(id));
        }
        ids.push(id);
    }
    let missing = |k: &str| Error::format(format!("manifest is missing {k}"));
    let m = SelectionManifest {
        method: method.ok_or_else(|| missing("method"))?,
        retention: retention.ok_or_else(|| missing("retention"))?,
        pool_size: pool_size.ok_or_else(|| missing("pool_size"))?,
        config_fingerprint: fingerprint.ok_or_else(|| missing("config_fingerprint"))?,
        drift_kl_upper: drift.ok_or_else(|| missing("drift_kl_upper"))?,
        ids,
    };
    if m.ids.len() > m.pool_size {
        return Err(Error::format("manifest retains more ids than the pool holds"));
    }
    Ok(m)
}

pub fn save_manifest(path: impl AsRef<Path>, m: &SelectionManifest) -> Result<()> {
    std::fs::write(path, encode_manifest(m)?)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SelectionManifest> {
    let bytes = std::fs::read(path)?;
    parse_manifest(std::str::from_utf8(&bytes).map_err(|_| Error::format("manifest is not UTF-8"))?)
}
