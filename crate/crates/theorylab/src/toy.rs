//! Toy dual encoder: a linear backbone under the end-point heads.
//!
//! Raw inputs `a` (image side) and `b` (text side) are noisy lifts of a latent
//! cluster point. The frozen backbone gives `h = C_vᵀa`, `t = C_tᵀb`, and the
//! end-point heads act on those features. Because `W_vᵀC_vᵀa = (C_v W_v)ᵀa`, the
//! full model is itself an end-point model on raw inputs, which gives the
//! full-parameter gradient by the chain rule.

use chips_core::endpoint::{
    batch_loss_gradient, forward, per_sample_gradient_with, symmetric_infonce, EndpointParams, FeatureBatch,
};
use chips_core::numerics::{DenseMatrix, Rng};

use crate::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub seed: u64,
    pub pool: usize,
    pub eval: usize,
    /// Raw input widths.
    pub d_a: usize,
    pub d_b: usize,
    /// Backbone feature widths.
    pub d_v: usize,
    pub d_t: usize,
    pub d: usize,
    pub latent: usize,
    pub clusters: usize,
    pub spread: f64,
    pub noise: f64,
    pub mismatch: f64,
    pub tau_log: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            seed: 0,
            pool: 128,
            eval: 32,
            d_a: 16,
            d_b: 16,
            d_v: 12,
            d_t: 12,
            d: 8,
            latent: 6,
            clusters: 4,
            spread: 0.7,
            noise: 0.2,
            mismatch: 0.2,
            tau_log: 5f64.ln(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDualEncoder {
    /// `d_a × d_v`
    pub backbone_v: DenseMatrix,
    /// `d_b × d_t`
    pub backbone_t: DenseMatrix,
    pub params: EndpointParams,
    pub pool_raw: FeatureBatch,
    pub eval_raw: FeatureBatch,
    /// Cluster of each pool sample; the evaluation set is cluster 0.
    pub pool_clusters: Vec<usize>,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.normal())
}

impl ToyDualEncoder {
    pub fn generate(spec: &ToySpec) -> Result<Self> {
        if spec.pool < 2 || spec.eval < 2 || spec.clusters < 2 {
            return Err(LabError::Config("toy needs pool, eval >= 2 and two clusters".into()));
        }
        let mut rng = Rng::labeled(spec.seed, "toy-geometry");
        let m = spec.latent;
        let centers: Vec<Vec<f64>> = (0..spec.clusters).map(|_| rng.normal_vec(m)).collect();
        let lift_a = gaussian(&mut rng, spec.d_a, m, 1.0 / (m as f64).sqrt());
        let lift_b = gaussian(&mut rng, spec.d_b, m, 1.0 / (m as f64).sqrt());
        let backbone_v = gaussian(&mut rng, spec.d_a, spec.d_v, 1.0 / (spec.d_a as f64).sqrt());
        let backbone_t = gaussian(&mut rng, spec.d_b, spec.d_t, 1.0 / (spec.d_b as f64).sqrt());
        let w_v = gaussian(&mut rng, spec.d_v, spec.d, 1.0 / (spec.d_v as f64).sqrt());
        let w_t = gaussian(&mut rng, spec.d_t, spec.d, 1.0 / (spec.d_t as f64).sqrt());
        let params = EndpointParams::new(w_v, w_t, spec.tau_log)?;

        let draw = |rng: &mut Rng, n: usize, only_target: bool, id0: u64| {
            let mut a = DenseMatrix::zeros(n, spec.d_a);
            let mut b = DenseMatrix::zeros(n, spec.d_b);
            let mut clusters = Vec::with_capacity(n);
            for r in 0..n {
                let c = if only_target { 0 } else { rng.below(spec.clusters) };
                let caption = if !only_target && rng.uniform() < spec.mismatch {
                    (c + 1 + rng.below(spec.clusters - 1)) % spec.clusters
                } else {
                    c
                };
                let z: Vec<f64> = centers[c].iter().map(|v| v + spec.spread * rng.normal()).collect();
                let zc: Vec<f64> = if caption == c {
                    z.clone()
                } else {
                    centers[caption].iter().map(|v| v + spec.spread * rng.normal()).collect()
                };
                for (dst, src) in a.row_mut(r).iter_mut().zip(lift_a.matvec(&z)) {
                    *dst = src + spec.noise * rng.normal();
                }
                for (dst, src) in b.row_mut(r).iter_mut().zip(lift_b.matvec(&zc)) {
                    *dst = src + spec.noise * rng.normal();
                }
                clusters.push(c);
            }
            let ids = (id0..id0 + n as u64).collect();
            FeatureBatch::new(ids, a, b).map(|batch| (batch, clusters))
        };
        let mut data_rng = Rng::labeled(spec.seed, "toy-data");
        let (pool_raw, pool_clusters) = draw(&mut data_rng, spec.pool, false, 0)?;
        let (eval_raw, _) = draw(&mut data_rng, spec.eval, true, 1 << 32)?;
        Ok(Self {
            backbone_v,
            backbone_t,
            params,
            pool_raw,
            eval_raw,
            pool_clusters,
        })
    }

    /// Backbone features of raw inputs.
    pub fn features(&self, raw: &FeatureBatch) -> Result<FeatureBatch> {
        let h = raw.h.matmul(&self.backbone_v)?;
        let t = raw.t.matmul(&self.backbone_t)?;
        Ok(FeatureBatch::new(raw.ids.clone(), h, t)?)
    }

    pub fn pool(&self) -> Result<FeatureBatch> {
        self.features(&self.pool_raw)
    }

    pub fn eval(&self) -> Result<FeatureBatch> {
        self.features(&self.eval_raw)
    }

    /// Mean evaluation loss, the whole evaluation set forming one batch.
    pub fn eval_loss(&self, params: &EndpointParams) -> Result<f64> {
        let geom = forward(params, &self.eval()?)?;
        let losses = symmetric_infonce(&geom);
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        if !mean.is_finite() {
            return Err(LabError::Config("toy evaluation loss diverged".into()));
        }
        Ok(mean)
    }

    /// `u_ϑ = ∇ L_eval` in the end-point subspace.
    pub fn eval_gradient(&self, params: &EndpointParams) -> Result<Vec<f64>> {
        Ok(batch_loss_gradient(params, &self.eval()?)?.1)
    }

    /// The full model as an end-point model on raw inputs.
    fn composite(&self) -> Result<EndpointParams> {
        Ok(EndpointParams::new(
            self.backbone_v.matmul(&self.params.w_v)?,
            self.backbone_t.matmul(&self.params.w_t)?,
            self.params.tau_log,
        )?)
    }

    /// Number of full parameters: backbones, heads and log-temperature.
    pub fn full_dim(&self) -> usize {
        self.backbone_v.rows() * self.backbone_v.cols()
            + self.backbone_t.rows() * self.backbone_t.cols()
            + self.params.num_params()
    }

    /// Maps a gradient with respect to the composite heads to
    /// `[∂C_v ‖ ∂C_t ‖ ∂W_v ‖ ∂W_t ‖ ∂τ̃]`.
    fn lift_gradient(&self, composite_grad: &[f64]) -> Result<Vec<f64>> {
        let (d_a, d_b, d) = (self.backbone_v.rows(), self.backbone_t.rows(), self.params.d());
        let g_v = DenseMatrix::from_vec(d_a, d, composite_grad[..d_a * d].to_vec())?;
        let g_t = DenseMatrix::from_vec(d_b, d, composite_grad[d_a * d..(d_a + d_b) * d].to_vec())?;
        let d_cv = g_v.matmul(&self.params.w_v.transpose())?;
        let d_ct = g_t.matmul(&self.params.w_t.transpose())?;
        let d_wv = self.backbone_v.transpose().matmul(&g_v)?;
        let d_wt = self.backbone_t.transpose().matmul(&g_t)?;
        let mut out = Vec::with_capacity(self.full_dim());
        for m in [&d_cv, &d_ct, &d_wv, &d_wt] {
            out.extend_from_slice(m.as_slice());
        }
        out.push(*composite_grad.last().expect("non-empty gradient"));
        Ok(out)
    }

    /// Full-parameter per-sample gradients of the pool, scored in one batch.
    pub fn full_pool_gradients(&self) -> Result<Vec<Vec<f64>>> {
        let comp = self.composite()?;
        let geom = forward(&comp, &self.pool_raw)?;
        (0..self.pool_raw.len())
            .map(|i| self.lift_gradient(&per_sample_gradient_with(&comp, &self.pool_raw, &geom, i)?))
            .collect()
    }

    /// Full-parameter gradient of the evaluation loss.
    pub fn full_eval_gradient(&self) -> Result<Vec<f64>> {
        let comp = self.composite()?;
        self.lift_gradient(&batch_loss_gradient(&comp, &self.eval_raw)?.1)
    }

    /// End-point per-sample gradients of the pool, scored in one batch.
    pub fn pool_gradients(&self, params: &EndpointParams) -> Result<Vec<Vec<f64>>> {
        let pool = self.pool()?;
        let geom = forward(params, &pool)?;
        (0..pool.len())
            .map(|i| Ok(per_sample_gradient_with(params, &pool, &geom, i)?))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_gradient_tail_is_the_end_point_gradient() {
        let toy = ToyDualEncoder::generate(&ToySpec {
            pool: 10,
            eval: 6,
            ..ToySpec::default()
        })
        .unwrap();
        let full = toy.full_pool_gradients().unwrap();
        let proxy = toy.pool_gradients(&toy.params).unwrap();
        let offset = toy.full_dim() - toy.params.num_params();
        for (f, p) in full.iter().zip(&proxy) {
            for (a, b) in f[offset..].iter().zip(p) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
        let u_full = toy.full_eval_gradient().unwrap();
        let u = toy.eval_gradient(&toy.params).unwrap();
        for (a, b) in u_full[offset..].iter().zip(&u) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn backbone_gradient_matches_finite_differences() {
        let toy = ToyDualEncoder::generate(&ToySpec {
            pool: 6,
            eval: 5,
            ..ToySpec::default()
        })
        .unwrap();
        let u_full = toy.full_eval_gradient().unwrap();
        let h = 1e-6;
        for idx in [0, 7, 40] {
            let mut plus = toy.clone();
            plus.backbone_v.as_mut_slice()[idx] += h;
            let mut minus = toy.clone();
            minus.backbone_v.as_mut_slice()[idx] -= h;
            let fd = (plus.eval_loss(&plus.params).unwrap() - minus.eval_loss(&minus.params).unwrap()) / (2.0 * h);
            assert!((fd - u_full[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", u_full[idx]);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = ToyDualEncoder::generate(&ToySpec::default()).unwrap();
        let b = ToyDualEncoder::generate(&ToySpec::default()).unwrap();
        assert_eq!(a.pool_raw, b.pool_raw);
        assert_eq!(a.params, b.params);
        let c = ToyDualEncoder::generate(&ToySpec {
            seed: 1,
            ..ToySpec::default()
        })
        .unwrap();
        assert_ne!(a.pool_raw, c.pool_raw);
    }
}
