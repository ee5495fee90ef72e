//! Shard arguments: plain paths or glob patterns.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chips_core::datastore::{read_shard, ShardRecord};

use crate::exit::CliError;

/// Expands each argument; a pattern must match at least one file. Matches of
/// one pattern come in lexical order, arguments keep their given order.
pub fn expand(args: &[String]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for arg in args {
        if !arg.contains(['*', '?', '[']) {
            out.push(PathBuf::from(arg));
            continue;
        }
        let mut hits = glob::glob(arg)
            .map_err(|e| CliError::Usage(format!("bad pattern {arg:?}: {e}")))?
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Io(format!("{arg}: {e}")))?;
        if hits.is_empty() {
            return Err(CliError::Usage(format!("pattern {arg:?} matched no files")));
        }
        hits.sort();
        out.extend(hits);
    }
    Ok(out)
}

fn context(path: &Path, e: chips_core::Error) -> CliError {
    if let chips_core::Error::Io(io) = &e {
        return CliError::Io(format!("{}: {io}", path.display()));
    }
    eprintln!("error reading {}", path.display());
    CliError::Core(e)
}

/// Records of all shards with the shard index of each, checking that the
/// shards agree on feature widths.
pub fn load_shards(paths: &[PathBuf]) -> Result<(Vec<ShardRecord>, Vec<usize>), CliError> {
    let mut records = Vec::new();
    let mut shard_of = Vec::new();
    let mut dims = None;
    for (i, path) in paths.iter().enumerate() {
        let (header, recs) = read_shard(path).map_err(|e| context(path, e))?;
        let d = (header.d_v, header.d_t);
        if *dims.get_or_insert(d) != d {
            return Err(CliError::Core(chips_core::Error::Shape(format!(
                "{}: feature widths {:?} differ from the first shard's {:?}",
                path.display(),
                d,
                dims.unwrap()
            ))));
        }
        shard_of.extend(std::iter::repeat_n(i, recs.len()));
        records.extend(recs);
    }
    Ok((records, shard_of))
}

/// Shard index for each id.
pub fn shard_index(records: &[ShardRecord], shard_of: &[usize]) -> BTreeMap<u64, usize> {
    records.iter().zip(shard_of).map(|(r, &s)| (r.id, s)).collect()
}
