//! Curvature surrogate built from streaming self and cross second moments of
//! subspace gradients.
//!
//! Only `Σ g gᵀ`, `Σ g` and the sample count are kept. The cross moment over
//! ordered pairs follows from `Σ_{i≠j} gᵢgⱼᵀ = (Σg)(Σg)ᵀ − Σ gᵢgᵢᵀ`, so no
//! pairwise pass is needed and partial accumulators from disjoint shards merge
//! by addition.

use crate::numerics::{
    cg_solve, dot, rayleigh_min_sym, symmetric_power_norm, CgOptions, CgReport, DenseMatrix,
};
use crate::sketch::{check_fingerprints, SketchedVector};
use crate::{Error, Result};

/// Default mixing weight between self and cross moments.
pub const DEFAULT_ALPHA: f64 = 0.6;

/// Ridge used when none is configured: this fraction of `tr(Φ_pos)/dim`.
pub const TRACE_RIDGE_FRACTION: f64 = 1e-4;

/// Up to this dimension the surrogate's spectrum is checked exactly at build time.
const EXACT_SPECTRUM_DIM: usize = 512;

#[derive(Debug, Clone)]
struct EmaMoments {
    decay: f64,
    pos: DenseMatrix,
    neg: DenseMatrix,
    batches: usize,
}

/// Sufficient statistics for `Φ_pos` and `Φ_neg` in one projection space.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    fingerprint: u64,
    sum_self: DenseMatrix,
    sum_vec: Vec<f64>,
    count: usize,
    ema: Option<EmaMoments>,
}

impl MomentAccumulator {
    /// Plain (non-decayed) accumulator for vectors of `dim` coordinates
    /// produced by the projection with `fingerprint`.
    pub fn new(dim: usize, fingerprint: u64) -> Self {
        Self {
            fingerprint,
            sum_self: DenseMatrix::zeros(dim, dim),
            sum_vec: vec![0.0; dim],
            count: 0,
            ema: None,
        }
    }

    /// Accumulator whose moments are exponential moving averages of per-batch
    /// U-statistics. `decay = 0` is the same as [`MomentAccumulator::new`].
    pub fn with_ema(dim: usize, fingerprint: u64, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config(format!("moment ema decay {decay} outside [0, 1)")));
        }
        let mut acc = Self::new(dim, fingerprint);
        if decay > 0.0 {
            acc.ema = Some(EmaMoments {
                decay,
                pos: DenseMatrix::zeros(dim, dim),
                neg: DenseMatrix::zeros(dim, dim),
                batches: 0,
            });
        }
        Ok(acc)
    }

    pub fn dim(&self) -> usize {
        self.sum_vec.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn sum_self(&self) -> &DenseMatrix {
        &self.sum_self
    }

    pub fn sum_vec(&self) -> &[f64] {
        &self.sum_vec
    }

    /// Adds one scoring batch of gradients (at least two, for the cross moment).
    pub fn accumulate(&mut self, batch: &[SketchedVector]) -> Result<()> {
        if batch.len() < 2 {
            return Err(Error::InsufficientBatch(batch.len()));
        }
        let dim = self.dim();
        for g in batch {
            check_fingerprints(self.fingerprint, g.fingerprint)?;
            if g.dim() != dim {
                return Err(Error::shape(format!("gradient dim {} but accumulator dim {dim}", g.dim())));
            }
            if !crate::numerics::all_finite(&g.data) {
                return Err(Error::NumericalBreakdown("non-finite gradient".into()));
            }
        }

        let mut batch_self = DenseMatrix::zeros(dim, dim);
        let mut batch_vec = vec![0.0; dim];
        for g in batch {
            add_outer_sym(&mut batch_self, &g.data);
            crate::numerics::axpy(1.0, &g.data, &mut batch_vec);
        }

        if let Some(ema) = &mut self.ema {
            let (pos, neg) = moments_from_sums(&batch_self, &batch_vec, batch.len());
            if ema.batches == 0 {
                ema.pos = pos;
                ema.neg = neg;
            } else {
                ema.pos.scale(ema.decay);
                ema.pos.add_scaled(1.0 - ema.decay, &pos)?;
                ema.neg.scale(ema.decay);
                ema.neg.add_scaled(1.0 - ema.decay, &neg)?;
            }
            ema.batches += 1;
        }
        self.sum_self.add_scaled(1.0, &batch_self)?;
        crate::numerics::axpy(1.0, &batch_vec, &mut self.sum_vec);
        self.count += batch.len();
        Ok(())
    }

    /// Folds a partial accumulator built over a disjoint shard into this one.
    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        check_fingerprints(self.fingerprint, other.fingerprint)?;
        if self.dim() != other.dim() {
            return Err(Error::shape("accumulator dims differ"));
        }
        if self.ema.is_some() || other.ema.is_some() {
            return Err(Error::config("EMA moment accumulators are order dependent and cannot be merged"));
        }
        self.sum_self.add_scaled(1.0, &other.sum_self)?;
        crate::numerics::axpy(1.0, &other.sum_vec, &mut self.sum_vec);
        self.count += other.count;
        Ok(())
    }

    /// `(Φ_pos, Φ_neg)`; needs at least two samples.
    pub fn moments(&self) -> Result<(DenseMatrix, DenseMatrix)> {
        if self.count < 2 {
            return Err(Error::InsufficientBatch(self.count));
        }
        if let Some(ema) = &self.ema {
            return Ok((ema.pos.clone(), ema.neg.clone()));
        }
        Ok(moments_from_sums(&self.sum_self, &self.sum_vec, self.count))
    }
}

fn add_outer_sym(m: &mut DenseMatrix, g: &[f64]) {
    m.add_outer(1.0, g, g);
}

fn moments_from_sums(sum_self: &DenseMatrix, sum_vec: &[f64], n: usize) -> (DenseMatrix, DenseMatrix) {
    let nf = n as f64;
    let mut pos = sum_self.clone();
    pos.scale(1.0 / nf);
    let mut neg = DenseMatrix::zeros(sum_vec.len(), sum_vec.len());
    neg.add_outer(1.0, sum_vec, sum_vec);
    neg.add_scaled(-1.0, sum_self).expect("same shape");
    neg.scale(1.0 / (nf * (nf - 1.0)));
    (pos, neg)
}

/// `M = (1 − α)Φ_pos + αΦ_neg + λI` and, once solved, `M⁻¹u`.
#[derive(Debug, Clone)]
pub struct CurvatureSurrogate {
    pub alpha: f64,
    pub lambda: f64,
    pub fingerprint: u64,
    pub m: DenseMatrix,
    /// `λ − α‖Φ_neg‖₂`, a lower bound on the spectrum of `M`.
    pub min_eigen_lower_bound: f64,
    pub precond_dir: Option<Vec<f64>>,
    pub cg_report: Option<CgReport>,
}

/// Ridge `λ` defaulting to [`TRACE_RIDGE_FRACTION`] of the mean diagonal of `Φ_pos`.
pub fn default_lambda(phi_pos: &DenseMatrix) -> f64 {
    let dim = phi_pos.rows().max(1) as f64;
    let lam = TRACE_RIDGE_FRACTION * phi_pos.trace() / dim;
    if lam > 0.0 {
        lam
    } else {
        1e-12
    }
}

/// Builds the mixed ridge surrogate from accumulated moments.
///
/// An empty accumulator gives `M = λI`, which requires an explicit `λ`.
pub fn build_surrogate(acc: &MomentAccumulator, alpha: f64, lambda: Option<f64>) -> Result<CurvatureSurrogate> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    if let Some(l) = lambda {
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::config(format!("lambda {l} must be positive")));
        }
    }
    let dim = acc.dim();
    if acc.count() == 0 {
        let lambda = lambda.ok_or_else(|| Error::config("lambda is required when no moments were accumulated"))?;
        let mut m = DenseMatrix::zeros(dim, dim);
        m.add_diagonal(lambda);
        return Ok(CurvatureSurrogate {
            alpha,
            lambda,
            fingerprint: acc.fingerprint(),
            m,
            min_eigen_lower_bound: lambda,
            precond_dir: None,
            cg_report: None,
        });
    }
    let (pos, neg) = acc.moments()?;
    let lambda = lambda.unwrap_or_else(|| default_lambda(&pos));
    let mut m = pos;
    m.scale(1.0 - alpha);
    m.add_scaled(alpha, &neg)?;
    m.add_diagonal(lambda);
    if !m.is_finite() {
        return Err(Error::NumericalBreakdown("non-finite curvature surrogate".into()));
    }
    let neg_norm = if alpha > 0.0 { symmetric_power_norm(&neg, 100) } else { 0.0 };
    let min_eigen_lower_bound = lambda - alpha * neg_norm;

    if dim <= EXACT_SPECTRUM_DIM && min_eigen_lower_bound <= 0.0 {
        let min_eig = rayleigh_min_sym(&m)?;
        if min_eig <= 0.0 {
            return Err(Error::IndefiniteSurrogate {
                min_eigenvalue: min_eig,
                suggested_lambda: lambda - min_eig + lambda.max(1e-12),
            });
        }
    }

    Ok(CurvatureSurrogate {
        alpha,
        lambda,
        fingerprint: acc.fingerprint(),
        m,
        min_eigen_lower_bound,
        precond_dir: None,
        cg_report: None,
    })
}

impl CurvatureSurrogate {
    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    /// Solves `M x = u` by conjugate gradients and stores `x` for reuse across
    /// every pool sample.
    pub fn solve_direction(&mut self, u: &SketchedVector, opts: &CgOptions) -> Result<SketchedVector> {
        check_fingerprints(self.fingerprint, u.fingerprint)?;
        if u.dim() != self.dim() {
            return Err(Error::shape(format!("direction dim {} but surrogate dim {}", u.dim(), self.dim())));
        }
        let (x, report) = match cg_solve(&self.m, &u.data, opts) {
            Ok(ok) => ok,
            Err(Error::NumericalBreakdown(msg)) if msg.contains("non-positive curvature") => {
                return Err(Error::IndefiniteSurrogate {
                    min_eigenvalue: self.min_eigen_lower_bound.min(0.0),
                    suggested_lambda: self.lambda - self.min_eigen_lower_bound + self.lambda,
                });
            }
            Err(e) => return Err(e),
        };
        self.precond_dir = Some(x.clone());
        self.cg_report = Some(report);
        Ok(SketchedVector {
            data: x,
            fingerprint: self.fingerprint,
        })
    }

    pub fn direction(&self) -> Option<SketchedVector> {
        self.precond_dir.as_ref().map(|d| SketchedVector {
            data: d.clone(),
            fingerprint: self.fingerprint,
        })
    }

    /// `gᵀ M⁻¹ u` against the stored direction.
    pub fn score(&self, g: &SketchedVector) -> Result<f64> {
        check_fingerprints(self.fingerprint, g.fingerprint)?;
        let dir = self
            .precond_dir
            .as_ref()
            .ok_or_else(|| Error::config("surrogate direction not solved yet"))?;
        if dir.len() != g.dim() {
            return Err(Error::shape("gradient dim differs from surrogate dim"));
        }
        Ok(dot(&g.data, dir))
    }
}
