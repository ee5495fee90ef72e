//! Proxy alignment: how well the end-point score `X = g_ϑᵀu_ϑ` tracks the
//! full-parameter score `Y = g_θᵀu`.
//!
//! [`LinearizedWorld`] fixes the local linearization `∇_θℓ = J g_ϑ + r`,
//! `u = J̄ u_ϑ + ε` with known `Σ_g`, so the correlation lower bound can be
//! evaluated exactly and compared with the sampled Pearson correlation.

use chips_core::numerics::{
    dot, norm2, pearson, psd_inv_sqrt, psd_sqrt, rayleigh_min_sym, spearman, spectral_norm, symmetric_eigen,
    symmetric_power_norm, DenseMatrix, Rng,
};
use rayon::prelude::*;

use crate::toy::{ToyDualEncoder, ToySpec};
use crate::{LabError, Report, Result};

/// Eigenvalue floor for `Σ_g^{±1/2}`.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LinearizedWorld {
    /// `P_full × P`
    pub j: DenseMatrix,
    /// `P_full × P`
    pub j_bar: DenseMatrix,
    pub eps: Vec<f64>,
    /// Per-coordinate scale of the isotropic Gaussian residual `r(z)`.
    pub residual_sigma: f64,
    pub sigma_g: DenseMatrix,
    pub mu_g: Vec<f64>,
    pub u_sub: Vec<f64>,
    sigma_half: DenseMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    pub p: usize,
    pub p_full: usize,
    pub residual_sigma: f64,
    /// Size of the symmetric perturbation `K − I` in `J̄ = J K`.
    pub coupling: f64,
    pub eps_scale: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            p: 16,
            p_full: 64,
            residual_sigma: 0.3,
            coupling: 0.3,
            eps_scale: 0.5,
        }
    }
}

/// Exact quantities entering the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub lambda_min_sym_b: f64,
    pub norm_b: f64,
    /// `‖B‖₂` by power iteration on `BᵀB`, as a cross-check.
    pub norm_b_power: f64,
    pub sigma_zeta: f64,
    /// `‖α‖ = √(u_ϑᵀ Σ_g u_ϑ)`
    pub alpha_norm: f64,
    pub bound: f64,
    pub fallback: f64,
}

fn orthonormal_columns(rng: &mut Rng, rows: usize, cols: usize) -> DenseMatrix {
    let mut q = DenseMatrix::zeros(rows, cols);
    for c in 0..cols {
        let mut v = rng.normal_vec(rows);
        for prev in 0..c {
            let col = q.column(prev);
            let proj = dot(&v, &col);
            for (x, y) in v.iter_mut().zip(&col) {
                *x -= proj * y;
            }
        }
        let n = norm2(&v);
        for (r, x) in v.iter().enumerate() {
            q[(r, c)] = x / n;
        }
    }
    q
}

impl LinearizedWorld {
    pub fn new(
        j: DenseMatrix,
        j_bar: DenseMatrix,
        eps: Vec<f64>,
        residual_sigma: f64,
        sigma_g: DenseMatrix,
        mu_g: Vec<f64>,
        u_sub: Vec<f64>,
    ) -> Result<Self> {
        let (pf, p) = (j.rows(), j.cols());
        let dims_ok = j_bar.rows() == pf
            && j_bar.cols() == p
            && eps.len() == pf
            && sigma_g.rows() == p
            && sigma_g.cols() == p
            && mu_g.len() == p
            && u_sub.len() == p;
        if !dims_ok || p == 0 {
            return Err(LabError::Config("linearized world dimensions disagree".into()));
        }
        if !(residual_sigma >= 0.0 && residual_sigma.is_finite()) {
            return Err(LabError::Config("residual sigma must be finite and >= 0".into()));
        }
        let eig = symmetric_eigen(&sigma_g)?;
        if sigma_g.max_asymmetry() > 1e-12 || eig.values[0] < -1e-12 * eig.values[p - 1].abs().max(1.0) {
            return Err(LabError::DegenerateWorld("Σ_g is not symmetric PSD".into()));
        }
        let sigma_half = psd_sqrt(&sigma_g, SIGMA_FLOOR)?;
        Ok(Self {
            j,
            j_bar,
            eps,
            residual_sigma,
            sigma_g,
            mu_g,
            u_sub,
            sigma_half,
        })
    }

    /// Seeded world with `A = 0` and `ε ⟂ range(J)`, so the mismatch `ζ` is
    /// uncorrelated with `g_ϑ`.
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        if spec.p_full < spec.p {
            return Err(LabError::Config("P_full must be at least P".into()));
        }
        let (p, pf) = (spec.p, spec.p_full);
        let mut rng = Rng::labeled(spec.seed, "linearized-world");
        let j = orthonormal_columns(&mut rng, pf, p);
        let g = DenseMatrix::from_fn(p, p, |_, _| rng.normal());
        let mut k = g.symmetrized()?;
        k.scale(spec.coupling / (p as f64).sqrt());
        k.add_diagonal(1.0);
        let j_bar = j.matmul(&k)?;
        let mut eps = rng.normal_vec(pf);
        let coef = j.matvec_t(&eps);
        let inside = j.matvec(&coef);
        for (e, v) in eps.iter_mut().zip(&inside) {
            *e -= v;
        }
        let scale = spec.eps_scale / norm2(&eps).max(f64::MIN_POSITIVE);
        eps.iter_mut().for_each(|e| *e *= scale);
        let l = DenseMatrix::from_fn(p, p, |_, _| rng.normal() / (p as f64).sqrt());
        let mut sigma_g = l.matmul(&l.transpose())?;
        sigma_g.add_diagonal(0.1);
        let sigma_g = sigma_g.symmetrized()?;
        let mu_g = rng.normal_vec(p);
        let u_sub = rng.normal_vec(p);
        Self::new(j, j_bar, eps, spec.residual_sigma, sigma_g, mu_g, u_sub)
    }

    pub fn p(&self) -> usize {
        self.j.cols()
    }

    /// `S = ½(JᵀJ̄ + J̄ᵀJ)`
    pub fn s(&self) -> Result<DenseMatrix> {
        Ok(self.j.transpose().matmul(&self.j_bar)?.symmetrized()?)
    }

    /// `B = Σ_g^{1/2} S Σ_g^{−1/2}`
    pub fn b(&self) -> Result<DenseMatrix> {
        let inv_half = psd_inv_sqrt(&self.sigma_g, SIGMA_FLOOR)?;
        Ok(self.sigma_half.matmul(&self.s()?)?.matmul(&inv_half)?)
    }

    /// `σ_ζ`; with `A = 0` and `ε ⟂ range(J)` only the residual terms remain,
    /// `ζ = rᵀ(J̄u_ϑ + ε)`, whose variance is `σ_r²‖J̄u_ϑ + ε‖²`.
    pub fn sigma_zeta(&self) -> f64 {
        let mut v = self.j_bar.matvec(&self.u_sub);
        for (a, b) in v.iter_mut().zip(&self.eps) {
            *a += b;
        }
        self.residual_sigma * norm2(&v)
    }

    pub fn bound_terms(&self) -> Result<BoundTerms> {
        let alpha_sq = dot(&self.u_sub, &self.sigma_g.matvec(&self.u_sub));
        if !(alpha_sq > 1e-300) {
            return Err(LabError::DegenerateWorld("u_ϑᵀ Σ_g u_ϑ = 0".into()));
        }
        let b = self.b()?;
        let lambda_min_sym_b = rayleigh_min_sym(&b)?;
        let norm_b = spectral_norm(&b)?;
        let norm_b_power = symmetric_power_norm(&b.transpose().matmul(&b)?, 500).sqrt();
        let sigma_zeta = self.sigma_zeta();
        let alpha_norm = alpha_sq.sqrt();
        let bound = lambda_min_sym_b / (norm_b * norm_b + sigma_zeta * sigma_zeta / alpha_sq).sqrt();
        let fallback = (lambda_min_sym_b * alpha_norm - sigma_zeta) / (norm_b * alpha_norm + sigma_zeta);
        Ok(BoundTerms {
            lambda_min_sym_b,
            norm_b,
            norm_b_power,
            sigma_zeta,
            alpha_norm,
            bound,
            fallback,
        })
    }

    /// `n` draws of `(X, Y)`.
    pub fn sample(&self, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = Rng::labeled(seed, "linearized-samples");
        let mut u_full = self.j_bar.matvec(&self.u_sub);
        for (a, b) in u_full.iter_mut().zip(&self.eps) {
            *a += b;
        }
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let xi = rng.normal_vec(self.p());
            let mut g = self.sigma_half.matvec(&xi);
            for (a, m) in g.iter_mut().zip(&self.mu_g) {
                *a += m;
            }
            let mut grad_full = self.j.matvec(&g);
            for v in grad_full.iter_mut() {
                *v += self.residual_sigma * rng.normal();
            }
            xs.push(dot(&g, &self.u_sub));
            ys.push(dot(&grad_full, &u_full));
        }
        (xs, ys)
    }
}

/// Sampled Pearson correlation against the lower bound, with
/// `SE(ρ̂) ≈ (1 − ρ̂²)/√(n − 1)`.
pub fn verify_correlation_bound(world: &LinearizedWorld, samples: usize, seed: u64) -> Result<Report> {
    if samples < 3 {
        return Err(LabError::Config("need at least three samples".into()));
    }
    let t = world.bound_terms()?;
    let (xs, ys) = world.sample(samples, seed);
    let rho = pearson(&xs, &ys);
    let rho = if rho.is_nan() { 1.0 } else { rho };
    let se = (1.0 - rho * rho).max(0.0) / ((samples - 1) as f64).sqrt();
    let mut rep = Report::new("correlation-bound")
        .metric("seed", seed as f64)
        .metric("rho", rho)
        .metric("standard_error", se)
        .metric("bound", t.bound)
        .metric("fallback_bound", t.fallback)
        .metric("lambda_min_sym_b", t.lambda_min_sym_b)
        .metric("norm_b", t.norm_b)
        .metric("sigma_zeta", t.sigma_zeta);
    rep.require(rho >= t.bound - 3.0 * se, || {
        format!("rho {rho:.4} below bound {:.4} - 3·SE", t.bound)
    });
    rep.require(t.bound <= 1.0 + 1e-12, || format!("bound {} exceeds 1", t.bound));
    rep.require((t.norm_b - t.norm_b_power).abs() <= 1e-6 * t.norm_b.max(1.0), || {
        format!("‖B‖ eigen {} vs power {}", t.norm_b, t.norm_b_power)
    });
    if t.lambda_min_sym_b >= 0.0 {
        rep.require(t.fallback <= t.bound + 1e-12, || "fallback bound exceeds the main bound".into());
    }
    Ok(rep)
}

/// The correlation bound across seeded worlds; passes only if every world passes.
pub fn verify_correlation_bound_worlds(spec: &WorldSpec, seeds: &[u64], samples: usize) -> Result<Report> {
    let reps: Vec<Report> = seeds
        .par_iter()
        .map(|&s| verify_correlation_bound(&LinearizedWorld::generate(&WorldSpec { seed: s, ..*spec })?, samples, s))
        .collect::<Result<_>>()?;
    let margin = reps
        .iter()
        .map(|r| r.metrics["rho"] - r.metrics["bound"] + 3.0 * r.metrics["standard_error"])
        .fold(f64::INFINITY, f64::min);
    let min_bound = reps.iter().map(|r| r.metrics["bound"]).fold(f64::INFINITY, f64::min);
    let mut rep = Report::new("correlation-bound")
        .metric("worlds", reps.len() as f64)
        .metric("samples", samples as f64)
        .metric("min_margin", margin)
        .metric("min_bound", min_bound);
    for r in &reps {
        rep.require(r.passed, || format!("world seed {}: {}", r.metrics["seed"], r.detail));
    }
    Ok(rep)
}

/// Spearman correlation between end-point and full-parameter alignment over a
/// toy pool.
pub fn proxy_spearman(toy: &ToyDualEncoder) -> Result<f64> {
    let u_full = toy.full_eval_gradient()?;
    let u = toy.eval_gradient(&toy.params)?;
    let full: Vec<f64> = toy.full_pool_gradients()?.iter().map(|g| dot(g, &u_full)).collect();
    let proxy: Vec<f64> = toy.pool_gradients(&toy.params)?.iter().map(|g| dot(g, &u)).collect();
    Ok(spearman(&proxy, &full))
}

/// Proxy fidelity over seeded toys; passes when every seed reaches `threshold`.
pub fn verify_proxy_fidelity(spec: &ToySpec, seeds: &[u64], threshold: f64) -> Result<Report> {
    let rhos: Vec<f64> = seeds
        .par_iter()
        .map(|&s| proxy_spearman(&ToyDualEncoder::generate(&ToySpec { seed: s, ..spec.clone() })?))
        .collect::<Result<_>>()?;
    let min = rhos.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = rhos.iter().sum::<f64>() / rhos.len().max(1) as f64;
    let mut rep = Report::new("proxy-fidelity")
        .metric("seeds", rhos.len() as f64)
        .metric("min_spearman", min)
        .metric("mean_spearman", mean)
        .metric("threshold", threshold);
    rep.require(min >= threshold, || format!("minimum Spearman {min:.4} below {threshold}"));
    Ok(rep)
}
