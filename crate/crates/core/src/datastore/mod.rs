//! On-disk formats and run configuration.
//!
//! Every binary format is little-endian with a four-byte magic and a `u32`
//! version:
//!
//! * `CHFS` feature shards ([`shard`])
//! * `CHEP` end-point parameters and `CHTJ` checkpoint trajectories ([`params`])
//! * `CHSC` score files, plus a line-oriented text equivalent ([`scores`])
//! * `CHCV` solved curvature surrogates ([`surrogate`])
//!
//! Selection manifests are plain text ([`manifest`]); run configuration is
//! TOML ([`config`]).

mod bin;
pub mod config;
pub mod manifest;
pub mod params;
pub mod scores;
pub mod shard;
pub mod surrogate;

pub use config::{load_config, parse_config, CurvatureMode, RunConfig, SelectionMethod};
pub use manifest::{parse_manifest, read_manifest, write_manifest};
pub use params::{decode_params, encode_params, read_params, write_params, CheckpointStore};
pub use scores::{ScoreHeader, ScoreReader};
pub use shard::{read_shard, ShardHeader, ShardReader, ShardRecord, ShardWriter};
pub use surrogate::{decode_surrogate, encode_surrogate};

/// Largest feature or embedding width accepted from a file.
pub const MAX_DIM: u32 = 1 << 16;

/// Largest single string (tag, method name, header text) accepted from a file.
pub const MAX_STRING_BYTES: u32 = 1 << 16;
