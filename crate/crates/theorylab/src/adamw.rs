//! First-order prediction of an AdamW step on the evaluation loss.
//!
//! With bias-corrected moments `m̂_t`, `v̂_t` and `P_t = diag(1/(√v̂_t + ε))`,
//! the step is `Δθ = −η(P_t m̂_t + w_d Dθ)`, where `D` masks the projection
//! weights but not the log-temperature. The predicted change is `uᵀΔθ`.

use chips_core::endpoint::{batch_loss_gradient, EndpointParams};
use chips_core::numerics::{dot, Rng};

use crate::toy::{ToyDualEncoder, ToySpec};
use crate::{LabError, Report, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam moment recurrences.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, dim: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn push(&mut self, g: &[f64]) {
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for ((m, v), &gi) in self.m.iter_mut().zip(self.v.iter_mut()).zip(g) {
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
        }
        self.t += 1;
    }

    /// `P_t m̂_t`
    pub fn preconditioned_moment(&self) -> Vec<f64> {
        if self.t == 0 {
            return vec![0.0; self.m.len()];
        }
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        self.m
            .iter()
            .zip(&self.v)
            .map(|(m, v)| (m / c1) / ((v / c2).sqrt() + self.cfg.eps))
            .collect()
    }

    /// `Δθ` for step size `η`.
    pub fn step(&self, params: &EndpointParams, eta: f64) -> Vec<f64> {
        let mut theta = params.to_flat();
        // D leaves the log-temperature undecayed
        *theta.last_mut().expect("non-empty params") = 0.0;
        self.preconditioned_moment()
            .iter()
            .zip(&theta)
            .map(|(pm, th)| -eta * (pm + self.cfg.weight_decay * th))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamwCheck {
    pub toy: ToySpec,
    pub adam: AdamConfig,
    pub batch: usize,
    /// Mini-batches fed to the moment recurrences before the measured step.
    pub history: usize,
    pub etas: Vec<f64>,
    /// Allowed deviation of the log₁₀ error ratio per decade of `η` from 2.
    pub order_tol: f64,
}

impl Default for AdamwCheck {
    fn default() -> Self {
        Self {
            toy: ToySpec::default(),
            adam: AdamConfig::default(),
            batch: 16,
            history: 5,
            etas: vec![1e-2, 1e-3, 1e-4],
            order_tol: 0.3,
        }
    }
}

/// Moment state after `history` seeded mini-batch gradients taken at the
/// toy's current parameters.
pub fn warm_state(toy: &ToyDualEncoder, check: &AdamwCheck) -> Result<AdamState> {
    let pool = toy.pool()?;
    if check.batch < 2 || check.batch > pool.len() || check.history == 0 {
        return Err(LabError::Config("AdamW check needs 2 <= batch <= pool and history >= 1".into()));
    }
    let mut state = AdamState::new(check.adam, toy.params.num_params());
    let mut rng = Rng::labeled(check.toy.seed, "adamw-batches");
    let mut rows: Vec<usize> = (0..pool.len()).collect();
    for _ in 0..check.history {
        rng.shuffle(&mut rows);
        let batch = pool.select(&rows[..check.batch])?;
        state.push(&batch_loss_gradient(&toy.params, &batch)?.1);
    }
    Ok(state)
}

/// `(predicted, measured)` change of the evaluation loss.
pub fn predicted_and_measured(toy: &ToyDualEncoder, state: &AdamState, u: &[f64], eta: f64) -> Result<(f64, f64)> {
    let delta = state.step(&toy.params, eta);
    let next = toy.params.offset(1.0, &delta)?;
    Ok((dot(u, &delta), toy.eval_loss(&next)? - toy.eval_loss(&toy.params)?))
}

/// Passes when the first-order error shrinks about 100× per decade of `η`.
pub fn verify_adamw_alignment(check: &AdamwCheck) -> Result<Report> {
    if check.etas.len() < 2 {
        return Err(LabError::Config("need at least two step sizes".into()));
    }
    let toy = ToyDualEncoder::generate(&check.toy)?;
    let state = warm_state(&toy, check)?;
    let u = toy.eval_gradient(&toy.params)?;
    let mut rep = Report::new("adamw-alignment");
    let mut errs = Vec::with_capacity(check.etas.len());
    for &eta in &check.etas {
        let (pred, meas) = predicted_and_measured(&toy, &state, &u, eta)?;
        let err = (pred - meas).abs();
        rep.set(&format!("predicted@eta={eta:e}"), pred);
        rep.set(&format!("measured@eta={eta:e}"), meas);
        rep.set(&format!("error@eta={eta:e}"), err);
        errs.push((eta, err));
    }
    let c = errs.iter().map(|(eta, e)| e / (eta * eta)).fold(0.0, f64::max);
    rep.set("fitted_c", c);
    for w in errs.windows(2) {
        let ((e0, r0), (e1, r1)) = (w[0], w[1]);
        let order = (r0 / r1).log10() / (e0 / e1).log10();
        rep.set(&format!("order@{e0:e}->{e1:e}"), order);
        rep.require((order - 2.0).abs() <= check.order_tol, || {
            format!("error order {order:.3} between η={e0:e} and η={e1:e}")
        });
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_without_momentum_is_sign_descent() {
        let toy = ToyDualEncoder::generate(&ToySpec::default()).unwrap();
        let cfg = AdamConfig {
            beta1: 0.0,
            weight_decay: 0.0,
            eps: 1e-12,
            ..AdamConfig::default()
        };
        let g = toy.eval_gradient(&toy.params).unwrap();
        let mut state = AdamState::new(cfg, g.len());
        state.push(&g);
        let eta = 1e-3;
        let delta = state.step(&toy.params, eta);
        for (d, gi) in delta.iter().zip(&g) {
            let p1g = gi / (gi.abs() + cfg.eps);
            assert!((d + eta * p1g).abs() < 1e-15);
            if gi.abs() > 1e-6 {
                assert!((d + eta * gi.signum()).abs() < 1e-9);
            }
        }
        let pred = dot(&g, &delta);
        let want = -eta * g.iter().map(|gi| gi * gi / (gi.abs() + cfg.eps)).sum::<f64>();
        assert!((pred - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_leave_only_decay() {
        let toy = ToyDualEncoder::generate(&ToySpec::default()).unwrap();
        let cfg = AdamConfig::default();
        let p = toy.params.num_params();
        let mut state = AdamState::new(cfg, p);
        for _ in 0..3 {
            state.push(&vec![0.0; p]);
        }
        let eta = 1e-2;
        let delta = state.step(&toy.params, eta);
        let theta = toy.params.to_flat();
        for (d, th) in delta[..p - 1].iter().zip(&theta) {
            assert!((d + eta * cfg.weight_decay * th).abs() <= 1e-15 * th.abs());
        }
        assert_eq!(delta[p - 1], 0.0);
    }

    #[test]
    fn first_order_error_is_quadratic_in_step_size() {
        for seed in 0..3 {
            let check = AdamwCheck {
                toy: ToySpec { seed, ..ToySpec::default() },
                ..AdamwCheck::default()
            };
            let rep = verify_adamw_alignment(&check).unwrap();
            assert!(rep.passed, "{rep}");
        }
    }
}
