//! Run configuration, read from TOML.
//!
//! Every key is optional; omitted keys take the defaults below. Unknown keys
//! are rejected.
//!
//! ```toml
//! seed = 0
//! method = "chips"            # chips | dot | tracin | trak | clipscore | random | concept-filter | concept-balance
//! ablation = "full"           # full | alignment-only | alignment-margin
//! curvature = "moments"       # moments | identity (M = λI, λ = lambda_ridge or 1)
//! alpha = 0.6                 # self/cross moment mix, [0, 1]
//! beta = 0.5                  # image/text relevance balance, [0, 1]
//! # lambda_ridge = 1e-3       # > 0; default 1e-4 · tr(Φ_pos) / dim
//! # lambda_trak = 1e-3        # > 0; default as lambda_ridge
//! cg_iters = 5
//! cg_tol = 1e-10
//! cg_jacobi = false
//! scoring_batch_size = 256    # >= 2
//! eval_per_task = 200
//! eval_batch_size = 256
//! eval_ema_decay = 0.0        # [0, 1)
//! moment_ema_decay = 0.0      # [0, 1)
//! retention = 0.1             # (0, 1]
//! retention_grid = [0.1, 0.2, 0.3, 0.5]
//! shard_zscore = false
//! tracin_epochs = 10
//! c_neg = 6
//!
//! [sketch]
//! enabled = true
//! kind = "countsketch"        # countsketch | sparse-signed | srht
//! k = 4096
//! sparsity = 4
//! # seed = 7                  # default: derived from the run seed
//!
//! [concepts]
//! whitelist = [...]           # eight default concepts
//! overrepresented = [...]
//! balance_rate = 0.25
//! vocabulary = []             # extra tags allowed beyond the lists above
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{ConceptVocabulary, DEFAULT_BALANCE_RATE, OTHER_CONCEPT, OVERREPRESENTED_CONCEPTS, WHITELIST_CONCEPTS};
use crate::curvature::DEFAULT_ALPHA;
use crate::numerics::{derive_seed, CgOptions};
use crate::scoring::{Ablation, DEFAULT_BETA};
use crate::sketch::{SketchKind, SketchSpec, DEFAULT_SPARSITY};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMethod {
    Chips,
    Dot,
    Tracin,
    Trak,
    Clipscore,
    Random,
    ConceptFilter,
    ConceptBalance,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 8] = [
        SelectionMethod::Chips,
        SelectionMethod::Dot,
        SelectionMethod::Tracin,
        SelectionMethod::Trak,
        SelectionMethod::Clipscore,
        SelectionMethod::Random,
        SelectionMethod::ConceptFilter,
        SelectionMethod::ConceptBalance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMethod::Chips => "chips",
            SelectionMethod::Dot => "dot",
            SelectionMethod::Tracin => "tracin",
            SelectionMethod::Trak => "trak",
            SelectionMethod::Clipscore => "clipscore",
            SelectionMethod::Random => "random",
            SelectionMethod::ConceptFilter => "concept-filter",
            SelectionMethod::ConceptBalance => "concept-balance",
        }
    }

    /// Whether scores come from end-point gradients.
    pub fn uses_gradients(self) -> bool {
        matches!(
            self,
            SelectionMethod::Chips | SelectionMethod::Dot | SelectionMethod::Tracin | SelectionMethod::Trak
        )
    }
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("method: unknown value {s:?}")))
    }
}

/// Source of the curvature surrogate `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureMode {
    /// Pool self and cross moments plus the ridge.
    #[default]
    Moments,
    /// `M = λI`; skips the moment pass.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SketchConfig {
    pub enabled: bool,
    pub kind: SketchKind,
    pub k: usize,
    pub sparsity: usize,
    pub seed: Option<u64>,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            kind: SketchKind::Countsketch,
            k: 4096,
            sparsity: DEFAULT_SPARSITY,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptConfig {
    pub whitelist: Vec<String>,
    pub overrepresented: Vec<String>,
    pub balance_rate: f64,
    pub vocabulary: Vec<String>,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        Self {
            whitelist: WHITELIST_CONCEPTS.iter().map(|s| s.to_string()).collect(),
            overrepresented: OVERREPRESENTED_CONCEPTS.iter().map(|s| s.to_string()).collect(),
            balance_rate: DEFAULT_BALANCE_RATE,
            vocabulary: Vec::new(),
        }
    }
}

impl ConceptConfig {
    /// Whitelist, overrepresented list, the catch-all tag and any extras.
    pub fn vocabulary(&self) -> ConceptVocabulary {
        ConceptVocabulary::new(
            self.whitelist
                .iter()
                .chain(&self.overrepresented)
                .chain(&self.vocabulary)
                .cloned()
                .chain(std::iter::once(OTHER_CONCEPT.to_string())),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub method: SelectionMethod,
    pub ablation: Ablation,
    pub curvature: CurvatureMode,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_ridge: Option<f64>,
    pub lambda_trak: Option<f64>,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub cg_jacobi: bool,
    pub scoring_batch_size: usize,
    pub eval_per_task: usize,
    pub eval_batch_size: usize,
    pub eval_ema_decay: f64,
    pub moment_ema_decay: f64,
    pub retention: f64,
    pub retention_grid: Vec<f64>,
    pub shard_zscore: bool,
    pub tracin_epochs: u64,
    pub c_neg: u64,
    pub sketch: SketchConfig,
    pub concepts: ConceptConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: SelectionMethod::Chips,
            ablation: Ablation::Full,
            curvature: CurvatureMode::Moments,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            lambda_ridge: None,
            lambda_trak: None,
            cg_iters: 5,
            cg_tol: 1e-10,
            cg_jacobi: false,
            scoring_batch_size: 256,
            eval_per_task: 200,
            eval_batch_size: 256,
            eval_ema_decay: 0.0,
            moment_ema_decay: 0.0,
            retention: 0.1,
            retention_grid: vec![0.1, 0.2, 0.3, 0.5],
            shard_zscore: false,
            tracin_epochs: 10,
            c_neg: 6,
            sketch: SketchConfig::default(),
            concepts: ConceptConfig::default(),
        }
    }
}

fn range_err(key: &str, v: impl fmt::Display, range: &str) -> Error {
    Error::config(format!("{key}: {v} outside {range}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(range_err(key, v, "[0, 1]"))
            }
        };
        let decay = |key: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(range_err(key, v, "[0, 1)"))
            }
        };
        let retention = |key: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(range_err(key, v, "(0, 1]"))
            }
        };
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        for (key, v) in [("lambda_ridge", self.lambda_ridge), ("lambda_trak", self.lambda_trak)] {
            if let Some(l) = v {
                if !(l > 0.0 && l.is_finite()) {
                    return Err(range_err(key, l, "(0, inf)"));
                }
            }
        }
        if self.cg_iters == 0 {
            return Err(range_err("cg_iters", 0, ">= 1"));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol.is_finite()) {
            return Err(range_err("cg_tol", self.cg_tol, "(0, inf)"));
        }
        if self.scoring_batch_size < 2 {
            return Err(range_err("scoring_batch_size", self.scoring_batch_size, ">= 2"));
        }
        if self.eval_per_task == 0 {
            return Err(range_err("eval_per_task", 0, ">= 1"));
        }
        if self.eval_batch_size == 0 {
            return Err(range_err("eval_batch_size", 0, ">= 1"));
        }
        decay("eval_ema_decay", self.eval_ema_decay)?;
        decay("moment_ema_decay", self.moment_ema_decay)?;
        retention("retention", self.retention)?;
        if self.retention_grid.is_empty() {
            return Err(Error::config("retention_grid: must not be empty"));
        }
        for r in &self.retention_grid {
            retention("retention_grid", *r)?;
        }
        if self.tracin_epochs == 0 {
            return Err(range_err("tracin_epochs", 0, ">= 1"));
        }
        if self.c_neg == 0 {
            return Err(range_err("c_neg", 0, ">= 1"));
        }
        if self.sketch.k == 0 {
            return Err(range_err("sketch.k", 0, ">= 1"));
        }
        if self.sketch.kind == SketchKind::SparseSigned && !(1..=self.sketch.k).contains(&self.sketch.sparsity) {
            return Err(range_err("sketch.sparsity", self.sketch.sparsity, "1..=sketch.k"));
        }
        unit("concepts.balance_rate", self.concepts.balance_rate)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, truncated to 64 bits.
    ///
    /// Equal configurations hash equal regardless of key order in the source.
    pub fn fingerprint(&self) -> u64 {
        // serde_json's default map is ordered, so `Value` serializes canonically.
        let value = serde_json::to_value(self).expect("config serializes");
        let bytes = serde_json::to_vec(&value).expect("value serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
    }

    pub fn cg_options(&self) -> CgOptions {
        CgOptions {
            max_iters: self.cg_iters,
            tol: self.cg_tol,
            jacobi: self.cg_jacobi,
        }
    }

    /// Sketch for gradients of dimension `p`, or `None` when disabled.
    pub fn sketch_spec(&self, p: usize) -> Result<Option<SketchSpec>> {
        if !self.sketch.enabled {
            return Ok(None);
        }
        let seed = self.sketch.seed.unwrap_or_else(|| derive_seed(self.seed, "sketch"));
        let spec = SketchSpec::new(self.sketch.kind, self.sketch.k, p, seed)
            .map_err(|e| Error::config(format!("sketch: {e}")))?;
        if self.sketch.kind == SketchKind::SparseSigned {
            return Ok(Some(spec.with_sparsity(self.sketch.sparsity)?));
        }
        Ok(Some(spec))
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::config(format!("{}: {e}", path.as_ref().display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.alpha, 0.6);
        assert_eq!(c.beta, 0.5);
        assert_eq!(c.sketch.k, 4096);
        assert_eq!(c.sketch.kind, SketchKind::Countsketch);
        assert_eq!(c.cg_iters, 5);
        assert_eq!(c.tracin_epochs, 10);
        assert_eq!(c.eval_per_task, 200);
        assert_eq!(c.retention_grid, vec![0.1, 0.2, 0.3, 0.5]);
        assert_eq!(c.concepts.whitelist.len(), 8);
    }

    #[test]
    fn range_violation_names_key() {
        let err = parse_config("alpha = 1.5").unwrap_err().to_string();
        assert!(err.contains("alpha"), "{err}");
        let err = parse_config("[sketch]\nk = 0").unwrap_err().to_string();
        assert!(err.contains("sketch.k"), "{err}");
        let err = parse_config("eval_ema_decay = 1.0").unwrap_err().to_string();
        assert!(err.contains("eval_ema_decay"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_config("alpah = 0.5").unwrap_err().to_string();
        assert!(err.contains("alpah"), "{err}");
        assert!(parse_config("[sketch]\nsize = 3").is_err());
        assert!(parse_config("method = \"magic\"").is_err());
    }

    #[test]
    fn fingerprint_ignores_key_order() {
        let a = "seed = 3\nalpha = 0.7\nmethod = \"trak\"\n[sketch]\nk = 64\nkind = \"srht\"\n";
        let b = "method = \"trak\"\nalpha = 0.7\nseed = 3\n[sketch]\nkind = \"srht\"\nk = 64\n";
        let fa = parse_config(a).unwrap().fingerprint();
        assert_eq!(fa, parse_config(b).unwrap().fingerprint());
        assert_ne!(fa, parse_config("seed = 4\nalpha = 0.7\nmethod = \"trak\"\n[sketch]\nk = 64\nkind = \"srht\"\n").unwrap().fingerprint());
        // Spelling out a default is the same configuration.
        assert_eq!(parse_config("").unwrap().fingerprint(), parse_config("alpha = 0.6").unwrap().fingerprint());
    }

    #[test]
    fn sketch_spec_from_config() {
        let c = parse_config("[sketch]\nk = 16\nkind = \"sparse-signed\"\nsparsity = 2").unwrap();
        let s = c.sketch_spec(100).unwrap().unwrap();
        assert_eq!((s.k, s.sparsity, s.input_dim), (16, 2, 100));
        assert!(c.sketch_spec(8).is_err());
        let off = parse_config("[sketch]\nenabled = false").unwrap();
        assert!(off.sketch_spec(8).unwrap().is_none());
    }

    #[test]
    fn method_names() {
        for m in SelectionMethod::ALL {
            assert_eq!(m.as_str().parse::<SelectionMethod>().unwrap(), m);
        }
    }
}
