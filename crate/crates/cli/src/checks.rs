//! Acceptance checks shared by `chips verify` and the acceptance test target.

use std::time::Instant;

use chips_core::baselines::CheckpointTrajectory;
use chips_core::curvature::MomentAccumulator;
use chips_core::datastore::manifest::encode_manifest;
use chips_core::datastore::scores::encode_scores;
use chips_core::datastore::surrogate::encode_surrogate;
use chips_core::datastore::{CurvatureMode, RunConfig, SelectionMethod};
use chips_core::endpoint::{forward, per_sample_gradient, symmetric_infonce, EndpointParams, FeatureBatch};
use chips_core::flopsmeter::{format_exact_sci, format_sci, method_total, primitive_table, CostModel, Method};
use chips_core::numerics::{cg_solve, CgOptions, DenseMatrix, FnOperator, Rng};
use chips_core::pipeline::{run_score, run_select, ScoreInputs, ScoreRun};
use chips_core::scoring::{drift_diagnostics, top_n, Ablation, ScoreRecord};
use chips_core::sketch::{Projection, SketchKind};
use chips_core::synth::{generate, SynthSpec, SynthWorld};
use chips_theorylab::adamw::{verify_adamw_alignment, AdamwCheck};
use chips_theorylab::descent::{verify_descent, DescentConfig};
use chips_theorylab::moments::{verify_batch_moments, GradientPopulation};
use chips_theorylab::proxy::{verify_proxy_fidelity, verify_correlation_bound_worlds, WorldSpec};
use chips_theorylab::sketchbias::{verify_sketch_bias, SketchWorld, SketchWorldSpec, SketchBiasConfig};
use chips_theorylab::toy::{ToyDualEncoder, ToySpec};
use chips_theorylab::{Report, Result};

/// Full runs the stated sizes; quick shrinks them for smoke runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Full,
    Quick,
}

impl Scale {
    fn pick<T>(self, full: T, quick: T) -> T {
        match self {
            Scale::Full => full,
            Scale::Quick => quick,
        }
    }
}

pub struct Check {
    pub name: &'static str,
    /// Part of the acceptance list.
    pub primary: bool,
    /// Wall-clock budget at full scale, seconds.
    pub budget: Option<f64>,
    pub run: fn(Scale) -> Result<Report>,
}

pub const CHECKS: &[Check] = &[
    Check { name: "gradient", primary: true, budget: Some(10.0), run: gradient },
    Check { name: "flops", primary: true, budget: Some(1.0), run: flops },
    Check { name: "correlation-bound", primary: true, budget: Some(60.0), run: correlation_bound },
    Check { name: "sketch-bias", primary: true, budget: Some(300.0), run: sketch_bias },
    Check { name: "drift", primary: true, budget: None, run: drift },
    Check { name: "batch-moments", primary: true, budget: Some(30.0), run: batch_moments },
    Check { name: "descent", primary: true, budget: Some(60.0), run: descent },
    Check { name: "proxy-fidelity", primary: true, budget: None, run: proxy_fidelity },
    Check { name: "oracles", primary: true, budget: None, run: oracles },
    Check { name: "determinism", primary: true, budget: None, run: determinism },
    Check { name: "adamw", primary: false, budget: None, run: adamw },
];

pub fn find(name: &str) -> Option<&'static Check> {
    CHECKS.iter().find(|c| c.name == name)
}

/// Runs a check and enforces its time budget at full scale.
pub fn run_check(check: &Check, scale: Scale) -> Result<Report> {
    let start = Instant::now();
    let mut rep = (check.run)(scale)?;
    let secs = start.elapsed().as_secs_f64();
    rep.check = check.name.to_string();
    rep.set("seconds", secs);
    if let (Some(budget), Scale::Full) = (check.budget, scale) {
        rep.set("budget_seconds", budget);
        rep.require(secs < budget, || format!("took {secs:.2}s, budget {budget}s"));
    }
    Ok(rep)
}

/// Folds sub-reports into one, prefixing their metrics.
fn combine(name: &str, parts: Vec<Report>) -> Report {
    let mut out = Report::new(name);
    for p in parts {
        for (k, v) in &p.metrics {
            out.set(&format!("{}.{k}", p.check), *v);
        }
        let (check, detail) = (p.check.clone(), p.detail.clone());
        out.require(p.passed, || format!("{check}: {detail}"));
    }
    out
}

fn fd_case(seed: u64) -> (EndpointParams, FeatureBatch) {
    let mut rng = Rng::labeled(seed, "gradient-case");
    let b = 2 + rng.below(7);
    let d = 1 + rng.below(16);
    let d_v = 1 + rng.below(16);
    let d_t = 1 + rng.below(16);
    let w_v = DenseMatrix::from_fn(d_v, d, |_, _| rng.normal() / (d_v as f64).sqrt());
    let w_t = DenseMatrix::from_fn(d_t, d, |_, _| rng.normal() / (d_t as f64).sqrt());
    let tau_log = 3.0 * rng.uniform();
    let params = EndpointParams::new(w_v, w_t, tau_log).expect("finite heads");
    let h = DenseMatrix::from_fn(b, d_v, |_, _| rng.normal());
    let t = DenseMatrix::from_fn(b, d_t, |_, _| rng.normal());
    let batch = FeatureBatch::new((0..b as u64).collect(), h, t).expect("consistent batch");
    (params, batch)
}

/// Analytic per-sample gradients against central differences. The error of a
/// coordinate is `|g − fd| / max(|g|, |fd|, 1e-3)`.
fn gradient(scale: Scale) -> Result<Report> {
    let instances = scale.pick(50, 10);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let (params, batch) = fd_case(seed);
        let p = params.num_params();
        for i in 0..batch.len() {
            let g = per_sample_gradient(&params, &batch, i)?;
            for (c, gc) in g.iter().enumerate() {
                let mut e = vec![0.0; p];
                e[c] = 1.0;
                let up = symmetric_infonce(&forward(&params.offset(step, &e)?, &batch)?)[i];
                let dn = symmetric_infonce(&forward(&params.offset(-step, &e)?, &batch)?)[i];
                let fd = (up - dn) / (2.0 * step);
                worst = worst.max((gc - fd).abs() / gc.abs().max(fd.abs()).max(1e-3));
            }
        }
    }
    let mut rep = Report::new("gradient")
        .metric("instances", instances as f64)
        .metric("max_rel_error", worst);
    rep.require(worst <= 1e-5, || format!("max relative error {worst:e}"));
    Ok(rep)
}

/// Table values and method totals, as printed.
const FLOPS_TABLE: &[(&str, &str, &str)] = &[
    ("C_lin", "4.294967296e10", "4.456448e9"),
    ("C_norm", "1.00663296e8", "1.04448e7"),
    ("C_mm", "1.099511627776e12", "1.183744e10"),
    ("C_fwd", "2.242073591808e12", "2.81417728e10"),
    ("C_bwd", "4.483945857024e12", "5.6262656e10"),
    ("C_fb", "6.726019448832e12", "8.44044288e10"),
    ("C_jvp", "4.484147183616e12", "5.62835456e10"),
];
const FLOPS_PROTO: &str = "4.4668928e9";
const FLOPS_TOTALS: &[(Method, &str)] = &[
    (Method::TracIn, "5.258869e16"),
    (Method::Trak, "5.094585e16"),
    (Method::Chips, "5.094747e16"),
];

fn flops(_: Scale) -> Result<Report> {
    let model = CostModel::biomedica();
    let table = primitive_table(&model)?;
    let mut rep = Report::new("flops").metric("c_neg", model.c_neg as f64);
    let mut matched = 0;
    for &(name, train, eval) in FLOPS_TABLE {
        let row = table.iter().find(|r| r.0 == name).expect("table row");
        for (got, want) in [(row.1, train), (row.2, eval)] {
            let got = format_exact_sci(got);
            rep.require(got == want, || format!("{name}: {got} vs {want}"));
            matched += usize::from(got == want);
        }
    }
    let proto = table.iter().find(|r| r.0 == "C_proto_eval").expect("proto row").2;
    let proto = format_exact_sci(proto);
    rep.require(proto == FLOPS_PROTO, || format!("C_proto_eval: {proto} vs {FLOPS_PROTO}"));
    matched += usize::from(proto == FLOPS_PROTO);
    for &(method, want) in FLOPS_TOTALS {
        let total = method_total(&model, method)?;
        let got = format_sci(total, 7);
        rep.set(&format!("total.{}", method.as_str()), total as f64);
        rep.require(got == want, || format!("{} total: {got} vs {want}", method.as_str()));
        matched += usize::from(got == want);
    }
    rep.set("values_matched", matched as f64);
    Ok(rep)
}

fn correlation_bound(scale: Scale) -> Result<Report> {
    let seeds: Vec<u64> = (0..scale.pick(20, 5)).collect();
    verify_correlation_bound_worlds(&WorldSpec::default(), &seeds, 10_000)
}

fn sketch_bias(scale: Scale) -> Result<Report> {
    let (spec, cfg) = match scale {
        Scale::Full => (SketchWorldSpec::default(), SketchBiasConfig::default()),
        Scale::Quick => (
            SketchWorldSpec {
                p: 512,
                n: 64,
                ..SketchWorldSpec::default()
            },
            SketchBiasConfig {
                ks: vec![32, 64, 128],
                seeds: 60,
                ..SketchBiasConfig::default()
            },
        ),
    };
    verify_sketch_bias(&SketchWorld::generate(&spec)?, &cfg)
}

/// Config used by the synthetic pipeline checks.
pub fn synth_config(method: SelectionMethod) -> RunConfig {
    let mut cfg = RunConfig {
        method,
        scoring_batch_size: 64,
        eval_batch_size: 64,
        ..RunConfig::default()
    };
    cfg.sketch.k = 128;
    cfg
}

fn score_world(world: &SynthWorld, cfg: &RunConfig, workers: usize) -> Result<ScoreRun> {
    let traj = CheckpointTrajectory::new(world.trajectory.clone())?;
    Ok(run_score(
        &ScoreInputs {
            config: cfg,
            params: &world.params,
            pool: &world.pool,
            eval: &world.eval,
            trajectory: Some(&traj),
        },
        workers,
    )?)
}

fn drift(scale: Scale) -> Result<Report> {
    let pool = scale.pick(10_000, 2_000);
    let cfg = synth_config(SelectionMethod::Chips);
    let mut rep = Report::new("drift").metric("pool", pool as f64);
    let (mut worst_kl, mut lo, mut hi) = (0.0f64, f64::INFINITY, 0.0f64);
    for seed in 0..3 {
        let world = generate(&SynthSpec {
            seed,
            pool,
            ..SynthSpec::default()
        })?;
        let run = score_world(&world, &cfg, crate::default_workers())?;
        let d = drift_diagnostics(&run.records)?;
        worst_kl = worst_kl.max(d.kl);
        lo = lo.min(d.min_ratio);
        hi = hi.max(d.max_ratio);
        let manifest = run_select(&run.header, &run.records, cfg.retention, None)?;
        if let Some(kl) = manifest.drift_kl_upper {
            rep.require(kl <= 1.0, || format!("seed {seed}: manifest drift {kl}"));
        }
    }
    rep.set("max_kl", worst_kl);
    rep.set("min_ratio", lo);
    rep.set("max_ratio", hi);
    let e = std::f64::consts::E;
    rep.require(worst_kl <= 1.0, || format!("KL {worst_kl} nats"));
    rep.require(lo >= 1.0 / e && hi <= e, || format!("density ratios span [{lo}, {hi}]"));
    Ok(rep)
}

fn batch_moments(scale: Scale) -> Result<Report> {
    let toy = ToyDualEncoder::generate(&ToySpec::default())?;
    let pop = GradientPopulation::uniform(toy.pool_gradients(&toy.params)?)?;
    let draws = scale.pick(100_000, 20_000);
    let parts = [1, 4, 8]
        .into_iter()
        .map(|b| verify_batch_moments(&pop, b, draws, 0, 0.02))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine("batch-moments", parts))
}

fn descent(scale: Scale) -> Result<Report> {
    let seeds: Vec<u64> = (0..scale.pick(50, 20)).collect();
    verify_descent(&DescentConfig::default(), &seeds, 0.8)
}

fn proxy_fidelity(_: Scale) -> Result<Report> {
    let seeds: Vec<u64> = (0..10).collect();
    verify_proxy_fidelity(&ToySpec::default(), &seeds, 0.7)
}

fn adamw(scale: Scale) -> Result<Report> {
    let parts = (0..scale.pick(5, 2))
        .map(|seed| {
            let mut rep = verify_adamw_alignment(&AdamwCheck {
                toy: ToySpec {
                    seed,
                    ..ToySpec::default()
                },
                ..AdamwCheck::default()
            })?;
            rep.check = format!("seed{seed}");
            Ok(rep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine("adamw", parts))
}

/// CG against a dense Cholesky solve on a 64×64 system.
fn cg_vs_dense() -> Result<Report> {
    let n = 64;
    let mut rng = Rng::labeled(0, "oracle-cg");
    let l = DenseMatrix::from_fn(n, n, |_, _| rng.normal());
    let mut a = l.matmul(&l.transpose())?;
    a.scale(1.0 / n as f64);
    a.add_diagonal(0.5);
    let b = rng.normal_vec(n);
    let op = FnOperator::new(n, |v: &[f64], out: &mut [f64]| a.matvec_into(v, out));
    let opts = CgOptions {
        max_iters: 10 * n,
        tol: 1e-13,
        jacobi: false,
    };
    let (x, _) = cg_solve(&op, &b, &opts)?;
    let dense = nalgebra::DMatrix::from_row_slice(n, n, a.as_slice());
    let want = dense
        .cholesky()
        .expect("positive definite")
        .solve(&nalgebra::DVector::from_column_slice(&b));
    let err = x.iter().zip(want.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let mut rep = Report::new("cg-vs-dense").metric("max_abs_error", err);
    rep.require(err <= 1e-8, || format!("CG differs from dense solve by {err:e}"));
    Ok(rep)
}

/// Streaming moment sums against the explicit pair loop.
fn moments_vs_loop() -> Result<Report> {
    let (n, k) = (50, 16);
    let mut rng = Rng::labeled(0, "oracle-moments");
    let proj = Projection::Identity { dim: k };
    let gs = (0..n)
        .map(|_| proj.project(&rng.normal_vec(k)))
        .collect::<chips_core::Result<Vec<_>>>()?;
    let mut acc = MomentAccumulator::new(k, proj.fingerprint());
    for chunk in gs.chunks(10) {
        let mut part = MomentAccumulator::new(k, proj.fingerprint());
        part.accumulate(chunk)?;
        acc.merge(&part)?;
    }
    let (pos, neg) = acc.moments()?;
    let mut want_pos = DenseMatrix::zeros(k, k);
    let mut want_neg = DenseMatrix::zeros(k, k);
    for (i, gi) in gs.iter().enumerate() {
        want_pos.add_outer(1.0 / n as f64, &gi.data, &gi.data);
        for (j, gj) in gs.iter().enumerate() {
            if i != j {
                want_neg.add_outer(1.0 / (n * (n - 1)) as f64, &gi.data, &gj.data);
            }
        }
    }
    let err = pos.max_abs_diff(&want_pos).max(neg.max_abs_diff(&want_neg));
    let mut rep = Report::new("moments-vs-loop").metric("max_abs_error", err);
    rep.require(err <= 1e-12, || format!("moments differ from the pair loop by {err:e}"));
    Ok(rep)
}

/// Partial top-n against a full sort, on keys with many ties.
fn top_n_vs_sort() -> Result<Report> {
    let mut rng = Rng::labeled(0, "oracle-topn");
    let mut mismatches = 0;
    for _ in 0..200 {
        let len = 1 + rng.below(300);
        let mut keys: Vec<(u64, f64)> = (0..len)
            .map(|_| (rng.below(1 << 20) as u64, (rng.normal() * 4.0).round()))
            .collect();
        keys.sort_by_key(|k| k.0);
        keys.dedup_by_key(|k| k.0);
        rng.shuffle(&mut keys);
        let n = rng.below(keys.len() + 1);
        let mut sorted = keys.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let want: Vec<u64> = sorted[..n].iter().map(|k| k.0).collect();
        if top_n(&keys, n)? != want {
            mismatches += 1;
        }
    }
    let mut rep = Report::new("topn-vs-sort").metric("mismatches", mismatches as f64);
    rep.require(mismatches == 0, || format!("{mismatches} trials differ from a full sort"));
    Ok(rep)
}

fn ranking(records: &[ScoreRecord]) -> Vec<u64> {
    let mut r: Vec<&ScoreRecord> = records.iter().collect();
    r.sort_by(|a, b| b.utility.total_cmp(&a.utility).then(a.id.cmp(&b.id)));
    r.into_iter().map(|r| r.id).collect()
}

/// CHIPS with `M = I` and weights off ranks exactly like the dot baseline.
fn identity_vs_dot() -> Result<Report> {
    let world = generate(&SynthSpec::default())?;
    let mut chips = synth_config(SelectionMethod::Chips);
    chips.curvature = CurvatureMode::Identity;
    chips.ablation = Ablation::AlignmentOnly;
    let dot = synth_config(SelectionMethod::Dot);
    let a = ranking(&score_world(&world, &chips, 1)?.records);
    let b = ranking(&score_world(&world, &dot, 1)?.records);
    let differ = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    let mut rep = Report::new("identity-vs-dot").metric("rank_differences", differ as f64);
    rep.require(differ == 0, || format!("{differ} rank positions differ"));
    Ok(rep)
}

fn oracles(_: Scale) -> Result<Report> {
    Ok(combine(
        "oracles",
        vec![cg_vs_dense()?, moments_vs_loop()?, top_n_vs_sort()?, identity_vs_dot()?],
    ))
}

/// Score file, surrogate and manifest bytes of one run.
pub fn run_bytes(world: &SynthWorld, cfg: &RunConfig, workers: usize) -> Result<Vec<Vec<u8>>> {
    let run = score_world(world, cfg, workers)?;
    let manifest = run_select(&run.header, &run.records, cfg.retention, None)?;
    let mut out = vec![encode_scores(&run.header, &run.records)?, encode_manifest(&manifest)?];
    if let Some(s) = &run.surrogate {
        out.push(encode_surrogate(s)?);
    }
    Ok(out)
}

fn determinism(scale: Scale) -> Result<Report> {
    let world = generate(&SynthSpec {
        pool: scale.pick(1000, 300),
        ..SynthSpec::default()
    })?;
    let mut rep = Report::new("determinism");
    let mut compared = 0;
    for method in [SelectionMethod::Chips, SelectionMethod::Trak, SelectionMethod::Tracin] {
        for kind in [SketchKind::Countsketch, SketchKind::Srht] {
            let mut cfg = synth_config(method);
            cfg.sketch.kind = kind;
            let base = run_bytes(&world, &cfg, 1)?;
            for workers in [1, 4] {
                let again = run_bytes(&world, &cfg, workers)?;
                compared += 1;
                rep.require(again == base, || {
                    format!("{} / {} differs with {workers} workers", method.as_str(), kind.as_str())
                });
            }
        }
    }
    rep.set("comparisons", compared as f64);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        for (i, c) in CHECKS.iter().enumerate() {
            assert!(CHECKS[i + 1..].iter().all(|d| d.name != c.name));
            assert_eq!(find(c.name).unwrap().name, c.name);
        }
    }

    #[test]
    fn fd_cases_respect_size_limits() {
        for seed in 0..50 {
            let (p, b) = fd_case(seed);
            assert!(b.len() <= 8 && p.d() <= 16 && p.d_v() <= 16 && p.d_t() <= 16);
        }
    }

    #[test]
    fn quick_oracles_pass() {
        let rep = run_check(find("oracles").unwrap(), Scale::Quick).unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn combine_keeps_first_failure() {
        let mut bad = Report::new("b");
        bad.require(false, || "broken".into());
        let rep = combine("x", vec![Report::new("a").metric("m", 1.0), bad]);
        assert!(!rep.passed);
        assert_eq!(rep.detail, "b: broken");
        assert_eq!(rep.metrics["a.m"], 1.0);
    }
}
