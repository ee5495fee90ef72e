//! One-step descent: does a batch picked by alignment with the evaluation
//! gradient lower the evaluation loss more than a random batch?

use chips_core::endpoint::{batch_loss_gradient, EndpointParams};
use chips_core::numerics::{dot, Rng};
use chips_core::scoring::top_n;
use rayon::prelude::*;

use crate::toy::{ToyDualEncoder, ToySpec};
use crate::{LabError, Report, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    /// Top-`B` by `g_iᵀu`.
    Alignment,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentConfig {
    pub toy: ToySpec,
    pub batch: usize,
    /// Starting step size before sign-stabilizing halvings.
    pub eta: f64,
    pub max_halvings: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            toy: ToySpec::default(),
            batch: 16,
            eta: 1e-2,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub seed: u64,
    pub eta: f64,
    pub delta_aligned: f64,
    pub delta_random: f64,
}

/// `g_iᵀu` for every pool sample, the pool scored as one batch.
pub fn alignment_scores(toy: &ToyDualEncoder, params: &EndpointParams, u: &[f64]) -> Result<Vec<f64>> {
    Ok(toy.pool_gradients(params)?.iter().map(|g| dot(g, u)).collect())
}

/// Pool rows chosen by a selector.
pub fn select_rows(toy: &ToyDualEncoder, selector: Selector, batch: usize, seed: u64) -> Result<Vec<usize>> {
    let n = toy.pool_raw.len();
    if batch == 0 || batch > n {
        return Err(LabError::Config(format!("batch {batch} outside 1..={n}")));
    }
    match selector {
        Selector::Alignment => {
            let u = toy.eval_gradient(&toy.params)?;
            let scores = alignment_scores(toy, &toy.params, &u)?;
            let keys: Vec<(u64, f64)> = scores.into_iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
            Ok(top_n(&keys, batch)?.into_iter().map(|i| i as usize).collect())
        }
        Selector::Random => {
            let mut rows: Vec<usize> = (0..n).collect();
            Rng::labeled(seed, "descent-random").shuffle(&mut rows);
            rows.truncate(batch);
            Ok(rows)
        }
    }
}

/// `L_eval(θ − η ĝ) − L_eval(θ)` for one SGD step on the given pool rows.
pub fn one_step_delta(toy: &ToyDualEncoder, rows: &[usize], eta: f64) -> Result<f64> {
    let batch = toy.pool()?.select(rows)?;
    let (_, g) = batch_loss_gradient(&toy.params, &batch)?;
    let next = toy.params.offset(-eta, &g)?;
    Ok(toy.eval_loss(&next)? - toy.eval_loss(&toy.params)?)
}

/// Runs one seeded trial, halving `η` until both deltas keep their sign
/// under a further halving.
pub fn run_trial(cfg: &DescentConfig, seed: u64) -> Result<TrialOutcome> {
    let toy = ToyDualEncoder::generate(&ToySpec { seed, ..cfg.toy.clone() })?;
    let aligned = select_rows(&toy, Selector::Alignment, cfg.batch, seed)?;
    let random = select_rows(&toy, Selector::Random, cfg.batch, seed)?;
    let mut eta = cfg.eta;
    for _ in 0..=cfg.max_halvings {
        let (a1, r1) = (one_step_delta(&toy, &aligned, eta)?, one_step_delta(&toy, &random, eta)?);
        let (a2, r2) = (
            one_step_delta(&toy, &aligned, eta / 2.0)?,
            one_step_delta(&toy, &random, eta / 2.0)?,
        );
        if a1.signum() == a2.signum() && r1.signum() == r2.signum() {
            return Ok(TrialOutcome {
                seed,
                eta,
                delta_aligned: a1,
                delta_random: r1,
            });
        }
        eta /= 2.0;
    }
    Err(LabError::Config(format!("trial {seed}: step size never stabilized")))
}

/// Fraction of seeded trials where the aligned batch gives the lower
/// evaluation loss; passes at `threshold` or above.
pub fn verify_descent(cfg: &DescentConfig, seeds: &[u64], threshold: f64) -> Result<Report> {
    let outcomes: Vec<TrialOutcome> = seeds.par_iter().map(|&s| run_trial(cfg, s)).collect::<Result<_>>()?;
    let wins = outcomes.iter().filter(|o| o.delta_aligned < o.delta_random).count();
    let frac = wins as f64 / outcomes.len().max(1) as f64;
    let mean = |f: fn(&TrialOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / outcomes.len().max(1) as f64;
    let mut rep = Report::new("descent")
        .metric("trials", outcomes.len() as f64)
        .metric("win_fraction", frac)
        .metric("threshold", threshold)
        .metric("mean_delta_aligned", mean(|o| o.delta_aligned))
        .metric("mean_delta_random", mean(|o| o.delta_random));
    rep.require(frac >= threshold, || format!("aligned batch won {wins}/{} trials", outcomes.len()));
    Ok(rep)
}
