//! End-point geometry of a dual encoder: projection heads `W_v`, `W_t` and the
//! log-temperature `τ̃`, with `τ = exp(τ̃)`.
//!
//! Backbone features `h` (image) and `t` (text) are projected as `Wᵀh`, L2
//! normalized, and compared with similarity logits `s_ij = τ x̂ᵢ·ŷⱼ`. The
//! per-sample loss is the symmetric InfoNCE
//! `ℓ_i = ½(CE(S_{i,:}, i) + CE(S_{:,i}, i))` with the whole batch as negatives.
//!
//! Gradients are flattened as `[vec(∂W_v) ‖ vec(∂W_t) ‖ ∂τ̃]`, each matrix row-major.

use crate::numerics::{axpy, dot, log_sum_exp, DenseMatrix};
use crate::{Error, Result};

/// Norms below this are treated as a collapsed projection.
const MIN_PROJECTED_NORM: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointParams {
    /// `d_v × d`
    pub w_v: DenseMatrix,
    /// `d_t × d`
    pub w_t: DenseMatrix,
    pub tau_log: f64,
}

impl EndpointParams {
    pub fn new(w_v: DenseMatrix, w_t: DenseMatrix, tau_log: f64) -> Result<Self> {
        if w_v.cols() != w_t.cols() {
            return Err(Error::shape(format!(
                "projection widths differ: W_v has {} columns, W_t has {}",
                w_v.cols(),
                w_t.cols()
            )));
        }
        if w_v.cols() == 0 || w_v.rows() == 0 || w_t.rows() == 0 {
            return Err(Error::shape("empty projection head"));
        }
        if !w_v.is_finite() || !w_t.is_finite() || !tau_log.is_finite() {
            return Err(Error::NumericalBreakdown("non-finite end-point parameter".into()));
        }
        Ok(Self { w_v, w_t, tau_log })
    }

    pub fn d_v(&self) -> usize {
        self.w_v.rows()
    }

    pub fn d_t(&self) -> usize {
        self.w_t.rows()
    }

    pub fn d(&self) -> usize {
        self.w_v.cols()
    }

    pub fn tau(&self) -> f64 {
        self.tau_log.exp()
    }

    /// `P = d_v·d + d_t·d + 1`
    pub fn num_params(&self) -> usize {
        subspace_dim(self.d_v(), self.d_t(), self.d())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.w_v.as_slice());
        out.extend_from_slice(self.w_t.as_slice());
        out.push(self.tau_log);
        out
    }

    pub fn from_flat(d_v: usize, d_t: usize, d: usize, flat: &[f64]) -> Result<Self> {
        let p = subspace_dim(d_v, d_t, d);
        if flat.len() != p {
            return Err(Error::shape(format!("flat params: expected {p}, got {}", flat.len())));
        }
        let w_v = DenseMatrix::from_vec(d_v, d, flat[..d_v * d].to_vec())?;
        let w_t = DenseMatrix::from_vec(d_t, d, flat[d_v * d..d_v * d + d_t * d].to_vec())?;
        Self::new(w_v, w_t, flat[p - 1])
    }

    /// `θ + step·direction` in flattened coordinates.
    pub fn offset(&self, step: f64, direction: &[f64]) -> Result<Self> {
        let mut flat = self.to_flat();
        if direction.len() != flat.len() {
            return Err(Error::shape("offset direction has wrong dimension"));
        }
        axpy(step, direction, &mut flat);
        Self::from_flat(self.d_v(), self.d_t(), self.d(), &flat)
    }

    /// Normalized image embedding `x̂ = W_vᵀh / ‖W_vᵀh‖` and the pre-normalization norm.
    pub fn embed_image(&self, h: &[f64]) -> Option<(Vec<f64>, f64)> {
        normalize(self.w_v.matvec_t(h))
    }

    pub fn embed_text(&self, t: &[f64]) -> Option<(Vec<f64>, f64)> {
        normalize(self.w_t.matvec_t(t))
    }
}

pub fn subspace_dim(d_v: usize, d_t: usize, d: usize) -> usize {
    d_v * d + d_t * d + 1
}

fn normalize(mut z: Vec<f64>) -> Option<(Vec<f64>, f64)> {
    let n = dot(&z, &z).sqrt();
    if !(n > MIN_PROJECTED_NORM) || !n.is_finite() {
        return None;
    }
    for v in &mut z {
        *v /= n;
    }
    Some((z, n))
}

/// A scoring or training batch of backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub ids: Vec<u64>,
    /// `B × d_v`
    pub h: DenseMatrix,
    /// `B × d_t`
    pub t: DenseMatrix,
}

impl FeatureBatch {
    pub fn new(ids: Vec<u64>, h: DenseMatrix, t: DenseMatrix) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::shape("feature batch must hold at least one sample"));
        }
        if h.rows() != ids.len() || t.rows() != ids.len() {
            return Err(Error::shape(format!(
                "batch rows disagree: {} ids, {} image rows, {} text rows",
                ids.len(),
                h.rows(),
                t.rows()
            )));
        }
        if !h.is_finite() || !t.is_finite() {
            return Err(Error::NumericalBreakdown("non-finite backbone feature".into()));
        }
        Ok(Self { ids, h, t })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sub-batch holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let ids = rows.iter().map(|&r| self.ids[r]).collect();
        let h = DenseMatrix::from_fn(rows.len(), self.h.cols(), |i, c| self.h[(rows[i], c)]);
        let t = DenseMatrix::from_fn(rows.len(), self.t.cols(), |i, c| self.t[(rows[i], c)]);
        Self::new(ids, h, t)
    }
}

/// Forward quantities of one batch under fixed parameters.
#[derive(Debug, Clone)]
pub struct BatchGeometry {
    pub tau: f64,
    pub xhat: DenseMatrix,
    pub yhat: DenseMatrix,
    /// `S = τ X̂ Ŷᵀ`
    pub s: DenseMatrix,
    /// Row softmax of `S`.
    pub p_i2t: DenseMatrix,
    /// Column softmax of `S`.
    pub p_t2i: DenseMatrix,
    pub norms_v: Vec<f64>,
    pub norms_t: Vec<f64>,
}

impl BatchGeometry {
    pub fn batch_size(&self) -> usize {
        self.s.rows()
    }
}

pub fn forward(params: &EndpointParams, batch: &FeatureBatch) -> Result<BatchGeometry> {
    if batch.h.cols() != params.d_v() || batch.t.cols() != params.d_t() {
        return Err(Error::shape(format!(
            "features are {}/{} wide, params expect {}/{}",
            batch.h.cols(),
            batch.t.cols(),
            params.d_v(),
            params.d_t()
        )));
    }
    let b = batch.len();
    let d = params.d();
    let tau = params.tau();
    let mut xhat = DenseMatrix::zeros(b, d);
    let mut yhat = DenseMatrix::zeros(b, d);
    let mut norms_v = Vec::with_capacity(b);
    let mut norms_t = Vec::with_capacity(b);
    for r in 0..b {
        let id = batch.ids[r];
        let (x, nx) = params
            .embed_image(batch.h.row(r))
            .ok_or(Error::DegenerateEmbedding { id })?;
        let (y, ny) = params
            .embed_text(batch.t.row(r))
            .ok_or(Error::DegenerateEmbedding { id })?;
        xhat.row_mut(r).copy_from_slice(&x);
        yhat.row_mut(r).copy_from_slice(&y);
        norms_v.push(nx);
        norms_t.push(ny);
    }
    let s = DenseMatrix::from_fn(b, b, |i, j| tau * dot(xhat.row(i), yhat.row(j)));

    let mut p_i2t = DenseMatrix::zeros(b, b);
    for i in 0..b {
        let lse = log_sum_exp(s.row(i).iter().copied());
        for j in 0..b {
            p_i2t[(i, j)] = (s[(i, j)] - lse).exp();
        }
    }
    let mut p_t2i = DenseMatrix::zeros(b, b);
    for j in 0..b {
        let lse = log_sum_exp((0..b).map(|i| s[(i, j)]));
        for i in 0..b {
            p_t2i[(i, j)] = (s[(i, j)] - lse).exp();
        }
    }

    Ok(BatchGeometry {
        tau,
        xhat,
        yhat,
        s,
        p_i2t,
        p_t2i,
        norms_v,
        norms_t,
    })
}

/// Per-sample symmetric InfoNCE losses `ℓ_i`.
pub fn symmetric_infonce(geom: &BatchGeometry) -> Vec<f64> {
    let b = geom.batch_size();
    let s = &geom.s;
    (0..b)
        .map(|i| {
            let row = log_sum_exp(s.row(i).iter().copied()) - s[(i, i)];
            let col = log_sum_exp((0..b).map(|r| s[(r, i)])) - s[(i, i)];
            // Rounding can leave a -1e-17 residue at saturation.
            (0.5 * (row + col)).max(0.0)
        })
        .collect()
}

/// Analytic gradient of `ℓ_i` with respect to the end-point subspace, the rest
/// of the batch held as negatives.
pub fn per_sample_gradient(
    params: &EndpointParams,
    batch: &FeatureBatch,
    i: usize,
) -> Result<Vec<f64>> {
    let geom = forward(params, batch)?;
    per_sample_gradient_with(params, batch, &geom, i)
}

/// Same as [`per_sample_gradient`] but reuses an existing forward pass.
///
/// `∂ℓ_i/∂S` is nonzero only in row `i` and column `i`, so the backward pass
/// touches each row of `X̂`/`Ŷ` once.
pub fn per_sample_gradient_with(
    params: &EndpointParams,
    batch: &FeatureBatch,
    geom: &BatchGeometry,
    i: usize,
) -> Result<Vec<f64>> {
    let b = geom.batch_size();
    if i >= b {
        return Err(Error::IndexOutOfRange { index: i, len: b });
    }
    let d = params.d();
    let tau = geom.tau;

    // Row i weights: ½(p_i2t[i][j] − δ_ij); column i weights: ½(p_t2i[r][i] − δ_ri).
    let row_w: Vec<f64> = (0..b)
        .map(|j| 0.5 * (geom.p_i2t[(i, j)] - if j == i { 1.0 } else { 0.0 }))
        .collect();
    let col_w: Vec<f64> = (0..b)
        .map(|r| 0.5 * (geom.p_t2i[(r, i)] - if r == i { 1.0 } else { 0.0 }))
        .collect();
    // G[i][i] collects both.
    let g_ii = row_w[i] + col_w[i];

    let mut d_tau_log = 0.0;
    for j in 0..b {
        if j != i {
            d_tau_log += row_w[j] * geom.s[(i, j)] + col_w[j] * geom.s[(j, i)];
        }
    }
    d_tau_log += g_ii * geom.s[(i, i)];

    // dX̂_r = τ Σ_j G_rj ŷ_j ; dŶ_c = τ Σ_r G_rc x̂_r
    let mut dxhat = DenseMatrix::zeros(b, d);
    let mut dyhat = DenseMatrix::zeros(b, d);
    for r in 0..b {
        if r == i {
            let mut acc = vec![0.0; d];
            for j in 0..b {
                let w = if j == i { g_ii } else { row_w[j] };
                axpy(tau * w, geom.yhat.row(j), &mut acc);
            }
            dxhat.row_mut(r).copy_from_slice(&acc);
            let mut acc = vec![0.0; d];
            for q in 0..b {
                let w = if q == i { g_ii } else { col_w[q] };
                axpy(tau * w, geom.xhat.row(q), &mut acc);
            }
            dyhat.row_mut(r).copy_from_slice(&acc);
        } else {
            axpy(tau * col_w[r], geom.yhat.row(i), dxhat.row_mut(r));
            axpy(tau * row_w[r], geom.xhat.row(i), dyhat.row_mut(r));
        }
    }

    Ok(backprop_to_params(params, batch, geom, &dxhat, &dyhat, d_tau_log))
}

/// Gradient of `Σ_ij G_ij S_ij`-weighted loss for an arbitrary `B × B` weight
/// matrix `G = ∂L/∂S` (dense route; used for whole-batch objectives).
pub fn weighted_gradient(
    params: &EndpointParams,
    batch: &FeatureBatch,
    geom: &BatchGeometry,
    g: &DenseMatrix,
) -> Result<Vec<f64>> {
    let b = geom.batch_size();
    if g.rows() != b || g.cols() != b {
        return Err(Error::shape("loss weight matrix must be B x B"));
    }
    let tau = geom.tau;
    let mut dxhat = g.matmul(&geom.yhat)?;
    dxhat.scale(tau);
    let mut dyhat = g.transpose().matmul(&geom.xhat)?;
    dyhat.scale(tau);
    let d_tau_log = dot(g.as_slice(), geom.s.as_slice());
    Ok(backprop_to_params(params, batch, geom, &dxhat, &dyhat, d_tau_log))
}

/// `∂ℓ/∂S` for the batch mean loss `(1/B) Σ_i ℓ_i`.
pub fn mean_loss_weights(geom: &BatchGeometry) -> DenseMatrix {
    let b = geom.batch_size();
    let inv = 1.0 / b as f64;
    DenseMatrix::from_fn(b, b, |r, c| {
        let delta = if r == c { 1.0 } else { 0.0 };
        0.5 * inv * ((geom.p_i2t[(r, c)] - delta) + (geom.p_t2i[(r, c)] - delta))
    })
}

/// Mean loss and its gradient over one batch.
pub fn batch_loss_gradient(params: &EndpointParams, batch: &FeatureBatch) -> Result<(f64, Vec<f64>)> {
    let geom = forward(params, batch)?;
    let losses = symmetric_infonce(&geom);
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let g = weighted_gradient(params, batch, &geom, &mean_loss_weights(&geom))?;
    Ok((loss, g))
}

fn backprop_to_params(
    params: &EndpointParams,
    batch: &FeatureBatch,
    geom: &BatchGeometry,
    dxhat: &DenseMatrix,
    dyhat: &DenseMatrix,
    d_tau_log: f64,
) -> Vec<f64> {
    let (d_v, d_t, d) = (params.d_v(), params.d_t(), params.d());
    let mut out = vec![0.0; subspace_dim(d_v, d_t, d)];
    let (wv_grad, rest) = out.split_at_mut(d_v * d);
    let (wt_grad, tau_grad) = rest.split_at_mut(d_t * d);
    accumulate_head(wv_grad, d, &batch.h, &geom.xhat, dxhat, &geom.norms_v);
    accumulate_head(wt_grad, d, &batch.t, &geom.yhat, dyhat, &geom.norms_t);
    tau_grad[0] = d_tau_log;
    out
}

/// `∂W += Σ_r feat_r ⊗ dz_r` with `dz_r = (I − ûûᵀ) dû_r / ‖z_r‖`.
fn accumulate_head(
    grad: &mut [f64],
    d: usize,
    feats: &DenseMatrix,
    unit: &DenseMatrix,
    dunit: &DenseMatrix,
    norms: &[f64],
) {
    let mut dz = vec![0.0; d];
    for r in 0..feats.rows() {
        let du = dunit.row(r);
        if du.iter().all(|&v| v == 0.0) {
            continue;
        }
        let u = unit.row(r);
        let proj = dot(u, du);
        for c in 0..d {
            dz[c] = (du[c] - u[c] * proj) / norms[r];
        }
        for (a, &fa) in feats.row(r).iter().enumerate() {
            if fa != 0.0 {
                axpy(fa, &dz, &mut grad[a * d..(a + 1) * d]);
            }
        }
    }
}

/// Evaluation mean gradient over a stream of batches.
///
/// `ema_decay = 0` gives the plain mean over all evaluation samples. For
/// `ema_decay > 0` the first batch mean initializes the average and later batch
/// means are blended as `u ← decay·u + (1 − decay)·mean_t`.
pub fn eval_mean_gradient<'a, I>(params: &EndpointParams, batches: I, ema_decay: f64) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a FeatureBatch>,
{
    if !(0.0..1.0).contains(&ema_decay) {
        return Err(Error::config(format!("eval ema decay {ema_decay} outside [0, 1)")));
    }
    let mut acc = EvalGradientAccumulator::new(params.num_params(), ema_decay);
    for batch in batches {
        let geom = forward(params, batch)?;
        let mut sum = vec![0.0; params.num_params()];
        for i in 0..batch.len() {
            axpy(1.0, &per_sample_gradient_with(params, batch, &geom, i)?, &mut sum);
        }
        acc.push_batch_sum(&sum, batch.len());
    }
    acc.finish()
}

/// Single-writer accumulator behind [`eval_mean_gradient`]; batch sums may be
/// produced elsewhere and pushed in order.
#[derive(Debug, Clone)]
pub struct EvalGradientAccumulator {
    ema_decay: f64,
    value: Vec<f64>,
    samples: usize,
    batches: usize,
}

impl EvalGradientAccumulator {
    pub fn new(dim: usize, ema_decay: f64) -> Self {
        Self {
            ema_decay,
            value: vec![0.0; dim],
            samples: 0,
            batches: 0,
        }
    }

    pub fn push_batch_sum(&mut self, sum: &[f64], count: usize) {
        assert_eq!(sum.len(), self.value.len());
        if count == 0 {
            return;
        }
        if self.ema_decay == 0.0 {
            axpy(1.0, sum, &mut self.value);
        } else {
            let inv = 1.0 / count as f64;
            if self.batches == 0 {
                for (v, s) in self.value.iter_mut().zip(sum) {
                    *v = s * inv;
                }
            } else {
                let keep = self.ema_decay;
                for (v, s) in self.value.iter_mut().zip(sum) {
                    *v = keep * *v + (1.0 - keep) * s * inv;
                }
            }
        }
        self.samples += count;
        self.batches += 1;
    }

    pub fn finish(mut self) -> Result<Vec<f64>> {
        if self.batches == 0 {
            return Err(Error::config("evaluation stream is empty"));
        }
        if self.ema_decay == 0.0 {
            let inv = 1.0 / self.samples as f64;
            crate::numerics::scale(inv, &mut self.value);
        }
        Ok(self.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    pub(crate) fn random_case(
        seed: u64,
        b: usize,
        d_v: usize,
        d_t: usize,
        d: usize,
    ) -> (EndpointParams, FeatureBatch) {
        let mut rng = Rng::new(seed);
        let w_v = DenseMatrix::from_fn(d_v, d, |_, _| rng.normal() * 0.5);
        let w_t = DenseMatrix::from_fn(d_t, d, |_, _| rng.normal() * 0.5);
        let params = EndpointParams::new(w_v, w_t, 0.3 + 0.5 * rng.uniform()).unwrap();
        let h = DenseMatrix::from_fn(b, d_v, |_, _| rng.normal());
        let t = DenseMatrix::from_fn(b, d_t, |_, _| rng.normal());
        let batch = FeatureBatch::new((0..b as u64).collect(), h, t).unwrap();
        (params, batch)
    }

    fn loss_at(params: &EndpointParams, batch: &FeatureBatch, i: usize) -> f64 {
        symmetric_infonce(&forward(params, batch).unwrap())[i]
    }

    #[test]
    fn identity_heads_unit_similarity() {
        let params = EndpointParams::new(DenseMatrix::identity(3), DenseMatrix::identity(3), 0.0).unwrap();
        let batch = FeatureBatch::new(
            vec![7],
            DenseMatrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap(),
            DenseMatrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        let g = forward(&params, &batch).unwrap();
        assert_eq!(g.s[(0, 0)], 1.0);
        assert_eq!(symmetric_infonce(&g), vec![0.0]);
        assert!(per_sample_gradient(&params, &batch, 0)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn orthogonal_pair_has_zero_logit() {
        for tau_log in [-2.0, 0.0, 3.0] {
            let params =
                EndpointParams::new(DenseMatrix::identity(2), DenseMatrix::identity(2), tau_log).unwrap();
            let batch = FeatureBatch::new(
                vec![0],
                DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
                DenseMatrix::from_vec(1, 2, vec![0.0, 2.0]).unwrap(),
            )
            .unwrap();
            assert_eq!(forward(&params, &batch).unwrap().s[(0, 0)], 0.0);
        }
    }

    #[test]
    fn similarity_matches_scalar_loop_reference() {
        let (params, batch) = random_case(11, 4, 8, 8, 8);
        let geom = forward(&params, &batch).unwrap();
        let tau = params.tau_log.exp();
        for i in 0..4 {
            for j in 0..4 {
                let mut zx = [0.0; 8];
                let mut zy = [0.0; 8];
                for c in 0..8 {
                    for a in 0..8 {
                        zx[c] += batch.h[(i, a)] * params.w_v[(a, c)];
                        zy[c] += batch.t[(j, a)] * params.w_t[(a, c)];
                    }
                }
                let nx = zx.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = zy.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos: f64 = zx.iter().zip(&zy).map(|(a, b)| a * b).sum::<f64>() / (nx * ny);
                assert!((geom.s[(i, j)] - tau * cos).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn geometry_invariants() {
        let (params, batch) = random_case(3, 6, 5, 7, 4);
        let g = forward(&params, &batch).unwrap();
        for r in 0..6 {
            assert!((crate::numerics::norm2(g.xhat.row(r)) - 1.0).abs() < 1e-12);
            assert!((crate::numerics::norm2(g.yhat.row(r)) - 1.0).abs() < 1e-12);
            assert!((g.p_i2t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(((0..6).map(|i| g.p_t2i[(i, r)]).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_sample_loss_limits() {
        let geom_with = |m: f64| {
            let (params, batch) = random_case(0, 2, 2, 2, 2);
            let mut g = forward(&params, &batch).unwrap();
            g.s = DenseMatrix::from_vec(2, 2, vec![m, 0.0, 0.0, m]).unwrap();
            g
        };
        let flat = symmetric_infonce(&geom_with(0.0));
        for l in flat {
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
        for l in symmetric_infonce(&geom_with(50.0)) {
            assert!(l < 1e-20);
        }
    }

    #[test]
    fn finite_difference_agreement() {
        let (params, batch) = random_case(42, 4, 6, 5, 4);
        let flat = params.to_flat();
        let h = 1e-5;
        for i in 0..4 {
            let g = per_sample_gradient(&params, &batch, i).unwrap();
            let mut worst: f64 = 0.0;
            for p in 0..flat.len() {
                let mut e = vec![0.0; flat.len()];
                e[p] = 1.0;
                let up = loss_at(&params.offset(h, &e).unwrap(), &batch, i);
                let dn = loss_at(&params.offset(-h, &e).unwrap(), &batch, i);
                let fd = (up - dn) / (2.0 * h);
                let err = (g[p] - fd).abs() / fd.abs().max(g[p].abs()).max(1e-3);
                worst = worst.max(err);
            }
            assert!(worst <= 1e-5, "sample {i}: max rel err {worst:e}");
        }
    }

    #[test]
    fn temperature_gradient_vanishes_when_all_logits_equal() {
        // Identical rows: every cosine equals 1, so the softmax is uniform.
        let params = EndpointParams::new(DenseMatrix::identity(3), DenseMatrix::identity(3), 0.7).unwrap();
        let row = [0.3, -1.0, 2.0];
        let h = DenseMatrix::from_fn(4, 3, |_, c| row[c]);
        let batch = FeatureBatch::new((0..4).collect(), h.clone(), h).unwrap();
        for i in 0..4 {
            let g = per_sample_gradient(&params, &batch, i).unwrap();
            assert!(g.last().unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn sum_of_per_sample_equals_batch_route() {
        let (params, batch) = random_case(5, 7, 4, 6, 3);
        let geom = forward(&params, &batch).unwrap();
        let mut sum = vec![0.0; params.num_params()];
        for i in 0..7 {
            axpy(1.0, &per_sample_gradient_with(&params, &batch, &geom, i).unwrap(), &mut sum);
        }
        let mut w = mean_loss_weights(&geom);
        w.scale(7.0);
        let dense = weighted_gradient(&params, &batch, &geom, &w).unwrap();
        for (a, b) in sum.iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn degenerate_projection_names_the_sample() {
        let (params, mut batch) = random_case(1, 3, 4, 4, 2);
        for c in 0..4 {
            batch.h[(1, c)] = 0.0;
        }
        batch.ids = vec![10, 11, 12];
        match forward(&params, &batch) {
            Err(Error::DegenerateEmbedding { id }) => assert_eq!(id, 11),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_errors() {
        let (params, batch) = random_case(1, 3, 4, 4, 2);
        assert!(matches!(per_sample_gradient(&params, &batch, 3), Err(Error::IndexOutOfRange { .. })));
        let (other, _) = random_case(1, 3, 5, 4, 2);
        assert!(matches!(forward(&other, &batch), Err(Error::Shape(_))));
        assert!(FeatureBatch::new(vec![], DenseMatrix::zeros(0, 2), DenseMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn eval_mean_variants() {
        let (params, batch) = random_case(8, 5, 4, 3, 3);
        let single = eval_mean_gradient(&params, [&batch], 0.0).unwrap();
        let mut mean = vec![0.0; params.num_params()];
        for i in 0..5 {
            axpy(0.2, &per_sample_gradient(&params, &batch, i).unwrap(), &mut mean);
        }
        for (a, b) in single.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-14);
        }
        for decay in [0.0, 0.5, 0.9] {
            let twice = eval_mean_gradient(&params, [&batch, &batch], decay).unwrap();
            for (a, b) in twice.iter().zip(&single) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let empty: [&FeatureBatch; 0] = [];
        assert!(matches!(eval_mean_gradient(&params, empty, 0.0), Err(Error::Config(_))));
        assert!(eval_mean_gradient(&params, [&batch], 1.0).is_err());
    }
}
