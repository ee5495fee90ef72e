//! Sketched score error split into projection variance and curvature-mixing bias.
//!
//! The world is a finite population of gradients `G` (`N × P`) with sum `s`.
//! Its moments give `H^(α) = (1 − α)Φ_pos + αΦ_neg = c₁GᵀG + c₂ssᵀ`, and the
//! ground-truth curvature is `H_ϑ = H^(α*)`. Scores use the ridge `λ`:
//! `A* = gᵀ(H_ϑ + λI)⁻¹u`, `A_α = gᵀ(H^(α) + λI)⁻¹u`, and the sketched
//! `Â_α = (Πg)ᵀ(Π H^(α) Πᵀ + λI_k)⁻¹ Πu`.

use chips_core::numerics::{
    cg_solve, derive_seed, dot, symmetric_eigen, CgOptions, DenseMatrix, FnOperator, Rng,
};
use chips_core::sketch::{Sketch, SketchKind, SketchSpec};
use rayon::prelude::*;

use crate::{LabError, Report, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SketchWorldSpec {
    pub seed: u64,
    pub p: usize,
    pub n: usize,
    /// Rank of the structured part of the gradients.
    pub rank: usize,
    pub noise: f64,
    pub alpha_star: f64,
    /// `λ` as a fraction of `tr(H_ϑ)/rank`.
    pub lambda_frac: f64,
}

impl Default for SketchWorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            p: 2048,
            n: 256,
            rank: 16,
            noise: 0.3,
            alpha_star: 0.6,
            lambda_frac: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SketchWorld {
    /// `N × P`
    pub grads: DenseMatrix,
    pub sum: Vec<f64>,
    pub u: Vec<f64>,
    pub alpha_star: f64,
    pub lambda: f64,
}

fn tight_cg(dim: usize, rhs_norm: f64) -> CgOptions {
    CgOptions {
        max_iters: 4 * dim,
        tol: 1e-14 * rhs_norm.max(f64::MIN_POSITIVE),
        jacobi: false,
    }
}

impl SketchWorld {
    pub fn generate(spec: &SketchWorldSpec) -> Result<Self> {
        if spec.n < 2 || spec.p == 0 || spec.rank == 0 || !(0.0..=1.0).contains(&spec.alpha_star) {
            return Err(LabError::Config("sketch world needs n >= 2, p, rank > 0, α* in [0, 1]".into()));
        }
        let (p, n, r) = (spec.p, spec.n, spec.rank);
        let mut rng = Rng::labeled(spec.seed, "sketch-world");
        let basis = DenseMatrix::from_fn(p, r, |_, _| rng.normal() / (p as f64).sqrt());
        let mean_coef = rng.normal_vec(r);
        let noise = spec.noise / (p as f64).sqrt();
        let mut grads = DenseMatrix::zeros(n, p);
        for i in 0..n {
            let coef: Vec<f64> = mean_coef.iter().map(|m| m + rng.normal()).collect();
            let row = basis.matvec(&coef);
            for (dst, v) in grads.row_mut(i).iter_mut().zip(row) {
                *dst = v + noise * rng.normal();
            }
        }
        let mut sum = vec![0.0; p];
        for i in 0..n {
            for (s, g) in sum.iter_mut().zip(grads.row(i)) {
                *s += g;
            }
        }
        let mut u = basis.matvec(&rng.normal_vec(r));
        for v in u.iter_mut() {
            *v += 0.5 / (p as f64).sqrt() * rng.normal();
        }
        let mut world = Self {
            grads,
            sum,
            u,
            alpha_star: spec.alpha_star,
            lambda: 1.0,
        };
        let (c1, c2) = world.coefficients(spec.alpha_star);
        if c1 < 0.0 {
            return Err(LabError::DegenerateWorld(format!("H^(α*) is indefinite at α* = {}", spec.alpha_star)));
        }
        let trace = c1 * world.grads.as_slice().iter().map(|v| v * v).sum::<f64>() + c2 * dot(&world.sum, &world.sum);
        if !(trace > 0.0) {
            return Err(LabError::DegenerateWorld("H_ϑ has non-positive trace".into()));
        }
        world.lambda = spec.lambda_frac * trace / r as f64;
        Ok(world)
    }

    pub fn p(&self) -> usize {
        self.grads.cols()
    }

    pub fn n(&self) -> usize {
        self.grads.rows()
    }

    /// `(c₁, c₂)` with `H^(α) = c₁GᵀG + c₂ssᵀ`.
    pub fn coefficients(&self, alpha: f64) -> (f64, f64) {
        let n = self.n() as f64;
        let pair = 1.0 / (n * (n - 1.0));
        ((1.0 - alpha) / n - alpha * pair, alpha * pair)
    }

    /// `‖Φ_pos − Φ_neg‖_F`, so that `‖Δ_α‖_F = |α − α*|` times this.
    pub fn moment_gap_fro(&self) -> Result<f64> {
        let n = self.n() as f64;
        let pair = 1.0 / (n * (n - 1.0));
        let w = self.factor_weights(1.0 / n + pair, -pair);
        let gram = self.factor_gram();
        let m = DenseMatrix::from_fn(gram.rows(), gram.cols(), |i, j| gram[(i, j)] * w[j]);
        let mm = m.matmul(&m)?;
        Ok(mm.trace().max(0.0).sqrt())
    }

    /// Rows of `F = [G; sᵀ]`.
    fn factor_row(&self, i: usize) -> &[f64] {
        if i < self.n() {
            self.grads.row(i)
        } else {
            &self.sum
        }
    }

    fn factor_weights(&self, c1: f64, c2: f64) -> Vec<f64> {
        let mut w = vec![c1; self.n()];
        w.push(c2);
        w
    }

    /// `F Fᵀ`
    fn factor_gram(&self) -> DenseMatrix {
        let m = self.n() + 1;
        let mut gram = DenseMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = dot(self.factor_row(i), self.factor_row(j));
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        gram
    }

    /// `A_α(z_i)` for every population sample, by conjugate gradients in `P` dims.
    pub fn exact_scores(&self, alpha: f64) -> Result<Vec<f64>> {
        let (c1, c2) = self.coefficients(alpha);
        let (n, lambda) = (self.n(), self.lambda);
        let op = FnOperator::new(self.p(), |v: &[f64], out: &mut [f64]| {
            let gv = self.grads.matvec(v);
            let sv = dot(&self.sum, v);
            for (o, x) in out.iter_mut().zip(v) {
                *o = lambda * x;
            }
            for (i, coef) in gv.iter().enumerate().take(n) {
                let a = c1 * coef;
                for (o, g) in out.iter_mut().zip(self.grads.row(i)) {
                    *o += a * g;
                }
            }
            for (o, s) in out.iter_mut().zip(&self.sum) {
                *o += c2 * sv * s;
            }
        });
        let (x, rep) = cg_solve(&op, &self.u, &tight_cg(self.p(), dot(&self.u, &self.u).sqrt()))?;
        if !rep.converged {
            return Err(LabError::Core(chips_core::Error::NumericalBreakdown(format!(
                "exact solve stalled at residual {:e}",
                rep.residual_norm
            ))));
        }
        Ok(self.grads.matvec(&x))
    }

    /// `A*` through the Woodbury identity and a dense eigen-solve in the
    /// `(N + 1)`-dimensional factor space; independent of [`Self::exact_scores`].
    pub fn oracle_scores(&self, alpha: f64) -> Result<Vec<f64>> {
        let (c1, c2) = self.coefficients(alpha);
        if c1 == 0.0 || c2 == 0.0 {
            return Err(LabError::DegenerateWorld("oracle needs both moment weights non-zero".into()));
        }
        let w = self.factor_weights(c1, c2);
        let m = self.n() + 1;
        // (λI + FᵀWF)⁻¹u = (u − Fᵀ(λW⁻¹ + FFᵀ)⁻¹Fu) / λ
        let mut core = self.factor_gram();
        for (i, wi) in w.iter().enumerate() {
            core[(i, i)] += self.lambda / wi;
        }
        let eig = symmetric_eigen(&core)?;
        if eig.values.iter().any(|v| v.abs() < 1e-300) {
            return Err(LabError::DegenerateWorld("singular Woodbury core".into()));
        }
        let fu: Vec<f64> = (0..m).map(|i| dot(self.factor_row(i), &self.u)).collect();
        let mut y = vec![0.0; m];
        for (j, &val) in eig.values.iter().enumerate() {
            let col = eig.vectors.column(j);
            let c = dot(&col, &fu) / val;
            for (yi, ci) in y.iter_mut().zip(&col) {
                *yi += c * ci;
            }
        }
        let mut x = self.u.clone();
        for (i, yi) in y.iter().enumerate() {
            for (xv, f) in x.iter_mut().zip(self.factor_row(i)) {
                *xv -= yi * f;
            }
        }
        x.iter_mut().for_each(|v| *v /= self.lambda);
        Ok(self.grads.matvec(&x))
    }

    /// `Â_α(z_i)` under one sketch.
    pub fn sketched_scores(&self, alpha: f64, sketch: &Sketch) -> Result<Vec<f64>> {
        let (c1, c2) = self.coefficients(alpha);
        let k = sketch.k();
        let rows: Vec<Vec<f64>> = (0..self.n())
            .map(|i| Ok(sketch.apply(self.grads.row(i))?.data))
            .collect::<Result<_>>()?;
        let ps = sketch.apply(&self.sum)?.data;
        let pu = sketch.apply(&self.u)?.data;
        let lambda = self.lambda;
        let op = FnOperator::new(k, |v: &[f64], out: &mut [f64]| {
            for (o, x) in out.iter_mut().zip(v) {
                *o = lambda * x;
            }
            for r in &rows {
                let a = c1 * dot(r, v);
                for (o, g) in out.iter_mut().zip(r) {
                    *o += a * g;
                }
            }
            let a = c2 * dot(&ps, v);
            for (o, s) in out.iter_mut().zip(&ps) {
                *o += a * s;
            }
        });
        let (x, rep) = cg_solve(&op, &pu, &tight_cg(k, dot(&pu, &pu).sqrt()))?;
        if !rep.converged {
            return Err(LabError::Core(chips_core::Error::NumericalBreakdown(format!(
                "sketched solve stalled at residual {:e}",
                rep.residual_norm
            ))));
        }
        Ok(rows.iter().map(|r| dot(r, &x)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchBiasConfig {
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
    pub seeds: usize,
    pub kind: SketchKind,
    pub slope_tol: f64,
    pub bias_tol: f64,
    pub seed: u64,
}

impl Default for SketchBiasConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            ks: vec![64, 128, 256, 512],
            seeds: 200,
            kind: SketchKind::Countsketch,
            slope_tol: 0.3,
            bias_tol: 1e-10,
            seed: 0,
        }
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Per-`k` sketch statistics at one `α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SketchStats {
    pub k: usize,
    /// Mean over samples of the across-seed variance of `Â`.
    pub variance: f64,
    /// `E_{seed,z}(Â − A*)²`
    pub mse: f64,
    pub mse_se: f64,
}

pub fn sketch_stats(
    world: &SketchWorld,
    alpha: f64,
    k: usize,
    kind: SketchKind,
    seeds: usize,
    root: u64,
    target: &[f64],
) -> Result<SketchStats> {
    if seeds < 2 {
        return Err(LabError::Config("need at least two sketch seeds".into()));
    }
    let runs: Vec<Vec<f64>> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let seed = derive_seed(root, &format!("sketch/{k}/{s}"));
            let sketch = Sketch::new(SketchSpec::new(kind, k, world.p(), seed)?)?;
            world.sketched_scores(alpha, &sketch)
        })
        .collect::<Result<_>>()?;
    let n = world.n();
    let sf = seeds as f64;
    let mut variance = 0.0;
    for z in 0..n {
        let mean = runs.iter().map(|r| r[z]).sum::<f64>() / sf;
        variance += runs.iter().map(|r| (r[z] - mean).powi(2)).sum::<f64>() / (sf - 1.0);
    }
    variance /= n as f64;
    let per_seed: Vec<f64> = runs
        .iter()
        .map(|r| r.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64)
        .collect();
    let mse = per_seed.iter().sum::<f64>() / sf;
    let var_mse = per_seed.iter().map(|m| (m - mse).powi(2)).sum::<f64>() / (sf - 1.0);
    Ok(SketchStats {
        k,
        variance,
        mse,
        mse_se: (var_mse / sf).sqrt(),
    })
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Runs the variance/bias decomposition.
///
/// Passes when the log-log slope of sketch variance against `k` is within
/// `slope_tol` of −1, the bias at `α*` is at most `bias_tol`, the bias does not
/// increase as `α` approaches `α*` from either side, and the MSE is
/// non-increasing in `k` within three standard errors.
pub fn verify_sketch_bias(world: &SketchWorld, cfg: &SketchBiasConfig) -> Result<Report> {
    if cfg.ks.len() < 2 {
        return Err(LabError::Config("need at least two sketch sizes".into()));
    }
    let a_star = world.oracle_scores(world.alpha_star)?;
    let mut rep = Report::new("sketch-bias");
    rep.set("alpha_star", world.alpha_star);
    rep.set("lambda", world.lambda);
    rep.set("p", world.p() as f64);

    let bias_star = mean_sq_diff(&world.exact_scores(world.alpha_star)?, &a_star);
    rep.set("bias_at_alpha_star", bias_star);
    rep.require(bias_star <= cfg.bias_tol, || format!("bias at α* is {bias_star:e}"));

    let gap = world.moment_gap_fro()?;
    let mut alphas = cfg.alphas.clone();
    alphas.sort_by(f64::total_cmp);
    let biases: Vec<(f64, f64)> = alphas
        .par_iter()
        .map(|&a| Ok((a, mean_sq_diff(&world.exact_scores(a)?, &a_star))))
        .collect::<Result<_>>()?;
    for &(a, b) in &biases {
        rep.set(&format!("bias@alpha={a}"), b);
        rep.set(&format!("delta_fro@alpha={a}"), (a - world.alpha_star).abs() * gap);
    }
    let slack = |b: f64| 1e-12 * b.max(1e-300) + 1e-20;
    for w in biases.windows(2) {
        let ((a0, b0), (a1, b1)) = (w[0], w[1]);
        if a1 <= world.alpha_star {
            rep.require(b1 <= b0 + slack(b0), || format!("bias rises from α={a0} to α={a1} below α*"));
        } else if a0 >= world.alpha_star {
            rep.require(b0 <= b1 + slack(b1), || format!("bias falls from α={a0} to α={a1} above α*"));
        }
    }

    let stats: Vec<SketchStats> = cfg
        .ks
        .iter()
        .map(|&k| sketch_stats(world, world.alpha_star, k, cfg.kind, cfg.seeds, cfg.seed, &a_star))
        .collect::<Result<_>>()?;
    for s in &stats {
        rep.set(&format!("variance@k={}", s.k), s.variance);
        rep.set(&format!("mse@k={}", s.k), s.mse);
    }
    let ks: Vec<f64> = stats.iter().map(|s| s.k as f64).collect();
    let vs: Vec<f64> = stats.iter().map(|s| s.variance).collect();
    let slope = log_log_slope(&ks, &vs);
    rep.set("variance_slope", slope);
    rep.require((slope + 1.0).abs() <= cfg.slope_tol, || format!("variance slope {slope:.3}"));
    for w in stats.windows(2) {
        let tol = 3.0 * (w[0].mse_se.powi(2) + w[1].mse_se.powi(2)).sqrt();
        rep.require(w[1].mse <= w[0].mse + tol, || {
            format!("MSE rises from k={} to k={}", w[0].k, w[1].k)
        });
    }
    Ok(rep)
}
