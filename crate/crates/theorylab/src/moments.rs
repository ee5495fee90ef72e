//! Mini-batch second moments: `E‖ĝ‖² = ‖g_q‖² + tr(Σ_q)/B` and
//! `E‖ĝ − g_q‖² = tr(Σ_q)/B` for a batch of `B` i.i.d. draws from `q`.

use chips_core::numerics::{axpy, derive_seed, dot, Rng};
use rayon::prelude::*;

use crate::{LabError, Report, Result};

const CHUNK: usize = 4096;

/// A finite set of per-sample gradients with sampling weights `q`.
#[derive(Debug, Clone)]
pub struct GradientPopulation {
    grads: Vec<Vec<f64>>,
    /// Cumulative `q`, ending at 1.
    cdf: Vec<f64>,
    q: Vec<f64>,
}

impl GradientPopulation {
    pub fn uniform(grads: Vec<Vec<f64>>) -> Result<Self> {
        let n = grads.len();
        Self::new(grads, vec![1.0; n])
    }

    /// `weights` need not be normalized.
    pub fn new(grads: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if grads.is_empty() || grads.len() != weights.len() {
            return Err(LabError::Config("population needs one weight per gradient".into()));
        }
        let dim = grads[0].len();
        if dim == 0 || grads.iter().any(|g| g.len() != dim) {
            return Err(LabError::Config("population gradients must share a positive dimension".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(LabError::Config("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(LabError::Config("weights sum to zero".into()));
        }
        let q: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = q
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        *cdf.last_mut().expect("non-empty") = 1.0;
        Ok(Self { grads, cdf, q })
    }

    pub fn dim(&self) -> usize {
        self.grads[0].len()
    }

    fn draw(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        self.cdf.partition_point(|&c| c <= u).min(self.grads.len() - 1)
    }

    /// `g_q = E_q[g]`
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (g, &p) in self.grads.iter().zip(&self.q) {
            axpy(p, g, &mut m);
        }
        m
    }

    /// `tr(Σ_q) = E_q‖g − g_q‖²`
    pub fn trace_cov(&self) -> f64 {
        let m = self.mean();
        self.grads
            .iter()
            .zip(&self.q)
            .map(|(g, &p)| p * g.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum()
    }
}

/// `(‖g_q‖² + tr(Σ_q)/B, tr(Σ_q)/B)`
pub fn closed_form(pop: &GradientPopulation, batch: usize) -> (f64, f64) {
    let m = pop.mean();
    let var = pop.trace_cov() / batch as f64;
    (dot(&m, &m) + var, var)
}

/// Monte-Carlo `E‖ĝ‖²` and `E‖ĝ − g_q‖²` over `draws` batches, each with
/// its standard error. Draws are split into fixed chunks, each with its own
/// generator stream, so the result does not depend on the thread count.
pub fn monte_carlo(pop: &GradientPopulation, batch: usize, draws: usize, seed: u64) -> Result<[(f64, f64); 2]> {
    if batch == 0 || draws < 2 {
        return Err(LabError::Config("need batch >= 1 and at least two draws".into()));
    }
    let root = derive_seed(seed, "batch-moments");
    let mean = pop.mean();
    let chunks = draws.div_ceil(CHUNK);
    let sums: Vec<[f64; 4]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = Rng::with_stream(root, c as u64);
            let n = CHUNK.min(draws - c * CHUNK);
            let mut acc = [0.0; 4];
            let mut ghat = vec![0.0; pop.dim()];
            for _ in 0..n {
                ghat.iter_mut().for_each(|v| *v = 0.0);
                for _ in 0..batch {
                    axpy(1.0 / batch as f64, &pop.grads[pop.draw(&mut rng)], &mut ghat);
                }
                let a = dot(&ghat, &ghat);
                let b: f64 = ghat.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum();
                acc[0] += a;
                acc[1] += a * a;
                acc[2] += b;
                acc[3] += b * b;
            }
            acc
        })
        .collect();
    let mut tot = [0.0; 4];
    for s in &sums {
        for (t, v) in tot.iter_mut().zip(s) {
            *t += v;
        }
    }
    let n = draws as f64;
    let est = |s: f64, sq: f64| {
        let m = s / n;
        let var = (sq / n - m * m).max(0.0) * n / (n - 1.0);
        (m, (var / n).sqrt())
    };
    Ok([est(tot[0], tot[1]), est(tot[2], tot[3])])
}

/// Passes when both Monte-Carlo moments sit within `rel_tol` of the closed
/// form and within three standard errors of it.
pub fn verify_batch_moments(
    pop: &GradientPopulation,
    batch: usize,
    draws: usize,
    seed: u64,
    rel_tol: f64,
) -> Result<Report> {
    let (want_sq, want_dev) = closed_form(pop, batch);
    let [(got_sq, se_sq), (got_dev, se_dev)] = monte_carlo(pop, batch, draws, seed)?;
    let mut rep = Report::new(format!("batch-moments/B={batch}"))
        .metric("batch", batch as f64)
        .metric("draws", draws as f64)
        .metric("closed_form", want_sq)
        .metric("monte_carlo", got_sq)
        .metric("standard_error", se_sq)
        .metric("rel_error", (got_sq - want_sq).abs() / want_sq.abs().max(f64::MIN_POSITIVE))
        .metric("deviation_closed_form", want_dev)
        .metric("deviation_monte_carlo", got_dev);
    for (name, got, want, se) in [("E|g|^2", got_sq, want_sq, se_sq), ("E|g-gq|^2", got_dev, want_dev, se_dev)] {
        let err = (got - want).abs();
        rep.require(err <= rel_tol * want.abs() || (want == 0.0 && err == 0.0), || {
            format!("{name}: {got:.6e} vs {want:.6e} beyond {rel_tol} relative")
        });
        rep.require(err <= 3.0 * se || err <= 1e-12 * want.abs().max(1.0), || {
            format!("{name}: {got:.6e} vs {want:.6e} beyond 3 standard errors ({se:.3e})")
        });
    }
    Ok(rep)
}
