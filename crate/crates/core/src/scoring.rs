//! Per-sample utility: preconditioned alignment times learnability times
//! relevance, plus top-n selection and the selection-drift report.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::endpoint::BatchGeometry;
use crate::numerics::{dot, norm2, sigmoid, DenseMatrix};
use crate::sketch::SketchedVector;
use crate::{Error, Result};

/// Default modality balance in the relevance weight.
pub const DEFAULT_BETA: f64 = 0.5;

/// One scored pool sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRecord {
    pub id: u64,
    pub alignment: f64,
    pub learnability: f64,
    pub relevance: f64,
    pub utility: f64,
    pub batch_fingerprint: u64,
}

impl ScoreRecord {
    pub fn new(id: u64, alignment: f64, learnability: f64, relevance: f64, batch_fingerprint: u64) -> Self {
        Self {
            id,
            alignment,
            learnability,
            relevance,
            utility: alignment * learnability * relevance,
            batch_fingerprint,
        }
    }

    /// A record for a single-score method: weights fixed at 1.
    pub fn plain(id: u64, score: f64, batch_fingerprint: u64) -> Self {
        Self::new(id, score, 1.0, 1.0, batch_fingerprint)
    }
}

/// Which factors of the utility are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// `w_L = w_R = 1`.
    AlignmentOnly,
    /// `w_L` replaced by its margin factor `1 + σ(−m)`, `w_R = 1`.
    AlignmentMargin,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::AlignmentOnly => "alignment-only",
            Ablation::AlignmentMargin => "alignment-margin",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "alignment-only" => Ok(Ablation::AlignmentOnly),
            "alignment-margin" => Ok(Ablation::AlignmentMargin),
            other => Err(Error::config(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Mean normalized evaluation embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPrototypes {
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub beta: f64,
}

impl EvalPrototypes {
    pub fn new(mu_x: Vec<f64>, mu_y: Vec<f64>, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config(format!("beta {beta} outside [0, 1]")));
        }
        if mu_x.len() != mu_y.len() {
            return Err(Error::shape("prototype dims differ"));
        }
        if norm2(&mu_x) == 0.0 || norm2(&mu_y) == 0.0 {
            return Err(Error::config("zero evaluation prototype (empty or cancelling eval set)"));
        }
        Ok(Self { mu_x, mu_y, beta })
    }

    pub fn dim(&self) -> usize {
        self.mu_x.len()
    }
}

/// Running sums of normalized evaluation embeddings.
#[derive(Debug, Clone)]
pub struct PrototypeAccumulator {
    sum_x: Vec<f64>,
    sum_y: Vec<f64>,
    count: usize,
}

impl PrototypeAccumulator {
    pub fn new(d: usize) -> Self {
        Self {
            sum_x: vec![0.0; d],
            sum_y: vec![0.0; d],
            count: 0,
        }
    }

    pub fn push(&mut self, xhat: &DenseMatrix, yhat: &DenseMatrix) -> Result<()> {
        let d = self.sum_x.len();
        if xhat.cols() != d || yhat.cols() != d || xhat.rows() != yhat.rows() {
            return Err(Error::shape("embedding block does not match prototype dim"));
        }
        for r in 0..xhat.rows() {
            crate::numerics::axpy(1.0, xhat.row(r), &mut self.sum_x);
            crate::numerics::axpy(1.0, yhat.row(r), &mut self.sum_y);
        }
        self.count += xhat.rows();
        Ok(())
    }

    pub fn finish(self, beta: f64) -> Result<EvalPrototypes> {
        if self.count == 0 {
            return Err(Error::config("no evaluation samples for prototypes"));
        }
        let n = self.count as f64;
        let mu_x = self.sum_x.iter().map(|v| v / n).collect();
        let mu_y = self.sum_y.iter().map(|v| v / n).collect();
        EvalPrototypes::new(mu_x, mu_y, beta)
    }
}

/// `gᵀ M⁻¹u` against a pre-solved direction.
pub fn alignment_score(g: &SketchedVector, dir: &SketchedVector) -> Result<f64> {
    g.inner(dir)
}

/// Hardest-negative margin `s_ii − max(max_{j≠i} s_ij, max_{r≠i} s_ri)`.
pub fn margin(geom: &BatchGeometry, i: usize) -> Result<f64> {
    let b = geom.batch_size();
    if i >= b {
        return Err(Error::IndexOutOfRange { index: i, len: b });
    }
    if b < 2 {
        return Err(Error::MarginUndefined);
    }
    let s = &geom.s;
    let mut hardest = f64::NEG_INFINITY;
    for j in (0..b).filter(|&j| j != i) {
        hardest = hardest.max(s[(i, j)]).max(s[(j, i)]);
    }
    Ok(s[(i, i)] - hardest)
}

/// `w_L = (1 − p_corr)(1 + σ(−m))`.
pub fn learnability(geom: &BatchGeometry, i: usize) -> Result<f64> {
    let m = margin(geom, i)?;
    let p_corr = 0.5 * (geom.p_i2t[(i, i)] + geom.p_t2i[(i, i)]);
    Ok((1.0 - p_corr).max(0.0) * (1.0 + sigmoid(-m)))
}

fn cosine_to(unit: &[f64], proto: &[f64]) -> f64 {
    let n = norm2(unit) * norm2(proto);
    if n == 0.0 {
        return 0.0;
    }
    (dot(unit, proto) / n).clamp(-1.0, 1.0)
}

/// `w_R = σ((1 − β)cos(x̂, μ_x) + β cos(ŷ, μ_y))`.
pub fn relevance(xhat: &[f64], yhat: &[f64], proto: &EvalPrototypes) -> Result<f64> {
    if xhat.len() != proto.dim() || yhat.len() != proto.dim() {
        return Err(Error::shape("embedding dim differs from prototype dim"));
    }
    let logit = (1.0 - proto.beta) * cosine_to(xhat, &proto.mu_x) + proto.beta * cosine_to(yhat, &proto.mu_y);
    Ok(sigmoid(logit))
}

/// `(w_L, w_R)` for sample `i` of a scoring batch under an ablation mode.
pub fn weights(geom: &BatchGeometry, i: usize, proto: &EvalPrototypes, ablation: Ablation) -> Result<(f64, f64)> {
    match ablation {
        Ablation::Full => Ok((
            learnability(geom, i)?,
            relevance(geom.xhat.row(i), geom.yhat.row(i), proto)?,
        )),
        Ablation::AlignmentOnly => Ok((1.0, 1.0)),
        Ablation::AlignmentMargin => Ok((1.0 + sigmoid(-margin(geom, i)?), 1.0)),
    }
}

/// Stable hash of a scoring batch's composition.
pub fn batch_fingerprint(ids: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// `n = ⌊r·N⌋`, forgiving products that land a rounding error below an integer.
pub fn retained_count(r: f64, pool: usize) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config(format!("retention {r} outside (0, 1]")));
    }
    let x = r * pool as f64;
    let near = x.round();
    let n = if (x - near).abs() <= 1e-9 * x.max(1.0) { near } else { x.floor() };
    Ok(n as usize)
}

/// Ids of the `n` largest keys, ties broken by ascending id, in rank order.
pub fn top_n(keys: &[(u64, f64)], n: usize) -> Result<Vec<u64>> {
    if let Some((id, _)) = keys.iter().find(|(_, k)| k.is_nan()) {
        return Err(Error::NumericalBreakdown(format!("NaN score for sample {id}")));
    }
    let mut work = keys.to_vec();
    let cmp = |a: &(u64, f64), b: &(u64, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let n = n.min(work.len());
    if n == 0 {
        return Ok(Vec::new());
    }
    if n < work.len() {
        work.select_nth_unstable_by(n - 1, cmp);
        work.truncate(n);
    }
    work.sort_unstable_by(cmp);
    Ok(work.into_iter().map(|(id, _)| id).collect())
}

fn check_unique(records: &[ScoreRecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id) {
            return Err(Error::DuplicateSample(r.id));
        }
    }
    Ok(())
}

/// Retained ids in rank order with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionManifest {
    pub method: String,
    pub retention: f64,
    pub pool_size: usize,
    pub config_fingerprint: u64,
    /// Soft-distribution drift in nats, when the base weights allow one.
    pub drift_kl_upper: Option<f64>,
    pub ids: Vec<u64>,
}

/// Top `⌊r·N⌋` records by utility.
///
/// A record with relevance exactly 0 has been excluded by a heuristic selector
/// and is never retained, so the manifest may hold fewer than `⌊r·N⌋` ids.
pub fn utility_and_select(
    records: &[ScoreRecord],
    r: f64,
    method: &str,
    config_fingerprint: u64,
) -> Result<SelectionManifest> {
    check_unique(records)?;
    let n = retained_count(r, records.len())?;
    let keys: Vec<(u64, f64)> = records
        .iter()
        .filter(|rec| rec.relevance != 0.0)
        .map(|rec| (rec.id, rec.utility))
        .collect();
    let ids = top_n(&keys, n)?;
    let drift_kl_upper = match drift_diagnostics(records) {
        Ok(rep) => Some(rep.kl),
        Err(Error::DegenerateDistribution) | Err(Error::EmptyPool(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SelectionManifest {
        method: method.to_string(),
        retention: r,
        pool_size: records.len(),
        config_fingerprint,
        drift_kl_upper,
        ids,
    })
}

/// Selection after z-normalizing utilities within each shard.
///
/// `shards` gives the shard index of every record.
pub fn select_with_shard_zscores(
    records: &[ScoreRecord],
    shards: &[usize],
    r: f64,
    method: &str,
    config_fingerprint: u64,
) -> Result<SelectionManifest> {
    if shards.len() != records.len() {
        return Err(Error::shape("one shard index per record required"));
    }
    check_unique(records)?;
    let n_shards = shards.iter().copied().max().map_or(0, |m| m + 1);
    let mut sum = vec![0.0; n_shards];
    let mut sq = vec![0.0; n_shards];
    let mut cnt = vec![0usize; n_shards];
    for (rec, &s) in records.iter().zip(shards) {
        sum[s] += rec.utility;
        cnt[s] += 1;
    }
    let mean: Vec<f64> = (0..n_shards).map(|s| sum[s] / cnt[s].max(1) as f64).collect();
    for (rec, &s) in records.iter().zip(shards) {
        sq[s] += (rec.utility - mean[s]).powi(2);
    }
    let keys: Vec<(u64, f64)> = records
        .iter()
        .zip(shards)
        .filter(|(rec, _)| rec.relevance != 0.0)
        .map(|(rec, &s)| {
            let sd = (sq[s] / cnt[s] as f64).sqrt();
            let z = if sd > 0.0 { (rec.utility - mean[s]) / sd } else { 0.0 };
            (rec.id, z)
        })
        .collect();
    let mut manifest = utility_and_select(records, r, method, config_fingerprint)?;
    manifest.ids = top_n(&keys, retained_count(r, records.len())?)?;
    Ok(manifest)
}

/// Relevance reweighting of the base distribution `q̃ ∝ A·w_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    /// `KL(q ‖ q̃)` in nats.
    pub kl: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub included: usize,
    /// Records with non-positive base weight.
    pub excluded: usize,
}

pub fn drift_diagnostics(records: &[ScoreRecord]) -> Result<DriftReport> {
    if records.is_empty() {
        return Err(Error::EmptyPool("no score records".into()));
    }
    let base: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.alignment * r.learnability, r.relevance))
        .filter(|(b, _)| *b > 0.0)
        .collect();
    if base.is_empty() {
        return Err(Error::DegenerateDistribution);
    }
    let total_b: f64 = base.iter().map(|(b, _)| b).sum();
    let mean_w: f64 = base.iter().map(|(b, w)| b * w).sum::<f64>() / total_b;
    let mut kl = 0.0;
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = f64::NEG_INFINITY;
    for (b, w) in &base {
        let ratio = w / mean_w;
        let q = b / total_b * ratio;
        kl += q * ratio.ln();
        min_ratio = min_ratio.min(ratio);
        max_ratio = max_ratio.max(ratio);
    }
    let kl = kl.max(0.0);
    if kl > 1.0 + 1e-9 {
        return Err(Error::NumericalBreakdown(format!("selection drift {kl} nats exceeds 1")));
    }
    Ok(DriftReport {
        kl,
        min_ratio,
        max_ratio,
        included: base.len(),
        excluded: records.len() - base.len(),
    })
}

/// Fraction of the top-n by utility that is also in the top-n by base weight.
pub fn hard_selection_overlap(records: &[ScoreRecord], r: f64) -> Result<f64> {
    check_unique(records)?;
    let n = retained_count(r, records.len())?;
    if n == 0 {
        return Ok(1.0);
    }
    let util: Vec<(u64, f64)> = records.iter().map(|x| (x.id, x.utility)).collect();
    let base: Vec<(u64, f64)> = records.iter().map(|x| (x.id, x.alignment * x.learnability)).collect();
    let a: HashSet<u64> = top_n(&util, n)?.into_iter().collect();
    let shared = top_n(&base, n)?.into_iter().filter(|id| a.contains(id)).count();
    Ok(shared as f64 / n as f64)
}
