//! End-to-end scoring over feature shards.
//!
//! The pool is sorted by id, shuffled with a seed-derived permutation and cut
//! into fixed-size scoring batches; a trailing batch of one sample is folded
//! into its predecessor. Batches run on a worker pool, and every reduction
//! consumes per-batch results in batch order, so outputs do not depend on the
//! number of workers.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::baselines::{
    concept_balance_keys, concept_filter_keys, clipscore, heuristic_records, random_keys, tracin_batch,
    CheckpointTrajectory,
};
use crate::curvature::{build_surrogate, default_lambda, CurvatureSurrogate, MomentAccumulator};
use crate::datastore::config::CurvatureMode;
use crate::datastore::scores::ScoreHeader;
use crate::datastore::shard::records_to_batch;
use crate::datastore::{RunConfig, SelectionMethod, ShardRecord};
use crate::endpoint::{forward, per_sample_gradient_with, EndpointParams, EvalGradientAccumulator, FeatureBatch};
use crate::numerics::{axpy, DenseMatrix, Rng};
use crate::scoring::{
    batch_fingerprint, select_with_shard_zscores, utility_and_select, weights, EvalPrototypes,
    PrototypeAccumulator, ScoreRecord, SelectionManifest,
};
use crate::sketch::{Projection, SketchedVector};
use crate::{Error, Result};

pub struct ScoreInputs<'a> {
    pub config: &'a RunConfig,
    pub params: &'a EndpointParams,
    pub pool: &'a [ShardRecord],
    pub eval: &'a [ShardRecord],
    pub trajectory: Option<&'a CheckpointTrajectory>,
}

#[derive(Debug, Clone)]
pub struct ScoreRun {
    pub header: ScoreHeader,
    /// One record per pool sample, ascending id.
    pub records: Vec<ScoreRecord>,
    /// Present for `chips` and `trak`.
    pub surrogate: Option<CurvatureSurrogate>,
    pub eval_samples: usize,
    pub pool_batches: usize,
}

/// Scores the pool on `workers` threads.
pub fn run_score(inputs: &ScoreInputs<'_>, workers: usize) -> Result<ScoreRun> {
    let workers = workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    pool.install(|| score_in_pool(inputs, workers))
}

/// Manifest from a score file's records.
///
/// With `shards`, utilities are z-normalized within each shard first; it gives
/// the shard index of every record.
pub fn run_select(
    header: &ScoreHeader,
    records: &[ScoreRecord],
    retention: f64,
    shards: Option<&[usize]>,
) -> Result<SelectionManifest> {
    match shards {
        Some(s) => select_with_shard_zscores(records, s, retention, &header.method, header.config_fingerprint),
        None => utility_and_select(records, retention, &header.method, header.config_fingerprint),
    }
}

fn task_of(r: &ShardRecord) -> &str {
    r.tags.as_ref().and_then(|t| t.first()).map_or("", String::as_str)
}

/// At most `per_task` evaluation samples per task (the first concept tag),
/// drawn without replacement; tasks in name order, samples in id order.
pub fn eval_subset(eval: &[ShardRecord], per_task: usize, seed: u64) -> Vec<&ShardRecord> {
    let mut tasks: BTreeMap<&str, Vec<&ShardRecord>> = BTreeMap::new();
    for r in eval {
        tasks.entry(task_of(r)).or_default().push(r);
    }
    let mut out = Vec::new();
    for (task, mut members) in tasks {
        members.sort_by_key(|r| r.id);
        if members.len() > per_task {
            Rng::labeled(seed, &format!("eval-task:{task}")).shuffle(&mut members);
            members.truncate(per_task);
            members.sort_by_key(|r| r.id);
        }
        out.extend(members);
    }
    out
}

/// Seeded partition of `0..n` into batches of `batch_size`; a trailing batch
/// of one joins the batch before it.
pub fn batch_plan(n: usize, batch_size: usize, seed: u64, label: &str) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::labeled(seed, label).shuffle(&mut order);
    let mut plan: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if plan.len() > 1 && plan.last().is_some_and(|b| b.len() == 1) {
        let last = plan.pop().expect("checked non-empty");
        plan.last_mut().expect("checked len > 1").extend(last);
    }
    plan
}

fn check_features(records: &[&ShardRecord], params: &EndpointParams, role: &str) -> Result<()> {
    for r in records {
        if r.h.len() != params.d_v() || r.t.len() != params.d_t() {
            return Err(Error::shape(format!(
                "{role} sample {}: features are {}/{} wide, params expect {}/{}",
                r.id,
                r.h.len(),
                r.t.len(),
                params.d_v(),
                params.d_t()
            )));
        }
    }
    Ok(())
}

fn make_batch(records: &[&ShardRecord], idx: &[usize]) -> Result<FeatureBatch> {
    let rows: Vec<&ShardRecord> = idx.iter().map(|&i| records[i]).collect();
    records_to_batch(&rows)
}

fn projected_gradients(
    params: &EndpointParams,
    batch: &FeatureBatch,
    projection: &Projection,
) -> Result<Vec<SketchedVector>> {
    let geom = forward(params, batch)?;
    (0..batch.len())
        .map(|i| projection.project(&per_sample_gradient_with(params, batch, &geom, i)?))
        .collect()
}

struct EvalSummary {
    u: SketchedVector,
    prototypes: PrototypeAccumulator,
    samples: usize,
}

fn eval_pass(
    cfg: &RunConfig,
    params: &EndpointParams,
    eval: &[&ShardRecord],
    projection: &Projection,
) -> Result<EvalSummary> {
    let plan = batch_plan(eval.len(), cfg.eval_batch_size, cfg.seed, "eval-batches");
    let parts: Vec<(Vec<f64>, usize, DenseMatrix, DenseMatrix)> = plan
        .par_iter()
        .map(|idx| {
            let batch = make_batch(eval, idx)?;
            let geom = forward(params, &batch)?;
            let mut sum = vec![0.0; params.num_params()];
            for i in 0..batch.len() {
                axpy(1.0, &per_sample_gradient_with(params, &batch, &geom, i)?, &mut sum);
            }
            Ok((sum, batch.len(), geom.xhat, geom.yhat))
        })
        .collect::<Result<_>>()?;
    let mut acc = EvalGradientAccumulator::new(params.num_params(), cfg.eval_ema_decay);
    let mut prototypes = PrototypeAccumulator::new(params.d());
    for (sum, count, xhat, yhat) in &parts {
        acc.push_batch_sum(sum, *count);
        prototypes.push(xhat, yhat)?;
    }
    Ok(EvalSummary {
        u: projection.project(&acc.finish()?)?,
        prototypes,
        samples: eval.len(),
    })
}

/// Pool moments; batches are processed `workers` at a time and merged in plan order.
fn moment_pass(
    cfg: &RunConfig,
    params: &EndpointParams,
    pool: &[&ShardRecord],
    plan: &[Vec<usize>],
    projection: &Projection,
    workers: usize,
) -> Result<MomentAccumulator> {
    let dim = projection.output_dim();
    let fp = projection.fingerprint();
    if cfg.moment_ema_decay > 0.0 {
        let mut acc = MomentAccumulator::with_ema(dim, fp, cfg.moment_ema_decay)?;
        for group in plan.chunks(workers) {
            let grads: Vec<Vec<SketchedVector>> = group
                .par_iter()
                .map(|idx| projected_gradients(params, &make_batch(pool, idx)?, projection))
                .collect::<Result<_>>()?;
            for g in &grads {
                acc.accumulate(g)?;
            }
        }
        return Ok(acc);
    }
    let mut acc = MomentAccumulator::new(dim, fp);
    for group in plan.chunks(workers) {
        let parts: Vec<MomentAccumulator> = group
            .par_iter()
            .map(|idx| {
                let g = projected_gradients(params, &make_batch(pool, idx)?, projection)?;
                let mut part = MomentAccumulator::new(dim, fp);
                part.accumulate(&g)?;
                Ok(part)
            })
            .collect::<Result<_>>()?;
        for part in &parts {
            acc.merge(part)?;
        }
    }
    Ok(acc)
}

enum Scorer<'a> {
    Direction {
        dir: SketchedVector,
        weighting: Option<(&'a EvalPrototypes, crate::scoring::Ablation)>,
    },
    TracIn {
        traj: &'a CheckpointTrajectory,
        g_eval: SketchedVector,
    },
    ClipScore,
}

fn score_batches(
    params: &EndpointParams,
    pool: &[&ShardRecord],
    plan: &[Vec<usize>],
    projection: Option<&Projection>,
    scorer: &Scorer<'_>,
) -> Result<Vec<ScoreRecord>> {
    let parts: Vec<Vec<ScoreRecord>> = plan
        .par_iter()
        .map(|idx| {
            let batch = make_batch(pool, idx)?;
            let bfp = batch_fingerprint(&batch.ids);
            match scorer {
                Scorer::Direction { dir, weighting } => {
                    let projection = projection.expect("gradient scorers carry a projection");
                    let geom = forward(params, &batch)?;
                    (0..batch.len())
                        .map(|i| {
                            let g = projection.project(&per_sample_gradient_with(params, &batch, &geom, i)?)?;
                            let a = g.inner(dir)?;
                            let (w_l, w_r) = match weighting {
                                Some((proto, ablation)) => weights(&geom, i, proto, *ablation)?,
                                None => (1.0, 1.0),
                            };
                            Ok(ScoreRecord::new(batch.ids[i], a, w_l, w_r, bfp))
                        })
                        .collect()
                }
                Scorer::TracIn { traj, g_eval } => {
                    let projection = projection.expect("gradient scorers carry a projection");
                    let scores = tracin_batch(traj, &batch, projection, g_eval)?;
                    Ok(batch
                        .ids
                        .iter()
                        .zip(scores)
                        .map(|(&id, s)| ScoreRecord::plain(id, s, bfp))
                        .collect())
                }
                Scorer::ClipScore => {
                    let geom = forward(params, &batch)?;
                    Ok((0..batch.len())
                        .map(|i| ScoreRecord::plain(batch.ids[i], clipscore(geom.xhat.row(i), geom.yhat.row(i)), bfp))
                        .collect())
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn tagged_pool(pool: &[&ShardRecord]) -> Result<Vec<(u64, Vec<String>)>> {
    pool.iter()
        .map(|r| {
            r.tags
                .clone()
                .map(|t| (r.id, t))
                .ok_or_else(|| Error::config(format!("pool sample {}: concept methods need a tagged pool shard", r.id)))
        })
        .collect()
}

fn score_in_pool(inputs: &ScoreInputs<'_>, workers: usize) -> Result<ScoreRun> {
    let cfg = inputs.config;
    cfg.validate()?;
    let params = inputs.params;
    let method = cfg.method;
    let needs_eval = method.uses_gradients();
    if needs_eval && inputs.eval.is_empty() {
        return Err(Error::config("eval shards hold no samples"));
    }
    if inputs.pool.is_empty() {
        return Err(Error::EmptyPool("pool shards hold no samples".into()));
    }
    let mut pool: Vec<&ShardRecord> = inputs.pool.iter().collect();
    pool.sort_by_key(|r| r.id);
    if let Some(w) = pool.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::DuplicateSample(w[0].id));
    }
    let ids: Vec<u64> = pool.iter().map(|r| r.id).collect();

    let mut header = ScoreHeader {
        method: method.as_str().to_string(),
        config_fingerprint: cfg.fingerprint(),
        sketch: None,
    };
    let heuristic = match method {
        SelectionMethod::Random => Some(random_keys(&ids, cfg.seed)),
        SelectionMethod::ConceptFilter => Some(concept_filter_keys(
            &tagged_pool(&pool)?,
            &cfg.concepts.whitelist,
            &cfg.concepts.vocabulary(),
            cfg.seed,
        )?),
        SelectionMethod::ConceptBalance => Some(concept_balance_keys(
            &tagged_pool(&pool)?,
            &cfg.concepts.overrepresented,
            cfg.concepts.balance_rate,
            &cfg.concepts.vocabulary(),
            cfg.seed,
        )?),
        _ => None,
    };
    if let Some(keys) = heuristic {
        let mut records = heuristic_records(&keys);
        records.sort_by_key(|r| r.id);
        return Ok(ScoreRun {
            header,
            records,
            surrogate: None,
            eval_samples: 0,
            pool_batches: 0,
        });
    }

    check_features(&pool, params, "pool")?;
    let plan = batch_plan(pool.len(), cfg.scoring_batch_size, cfg.seed, "pool-batches");
    if method == SelectionMethod::Clipscore {
        let mut records = score_batches(params, &pool, &plan, None, &Scorer::ClipScore)?;
        records.sort_by_key(|r| r.id);
        return Ok(ScoreRun {
            header,
            records,
            surrogate: None,
            eval_samples: 0,
            pool_batches: plan.len(),
        });
    }

    let eval = eval_subset(inputs.eval, cfg.eval_per_task, cfg.seed);
    check_features(&eval, params, "eval")?;
    let p = params.num_params();
    let projection = Projection::from_spec(cfg.sketch_spec(p)?, p)?;
    header.sketch = projection.spec().cloned();
    let summary = eval_pass(cfg, params, &eval, &projection)?;
    let u = summary.u;

    let empty = || MomentAccumulator::new(projection.output_dim(), projection.fingerprint());
    let prototypes;
    let mut surrogate = None;
    let scorer = match method {
        SelectionMethod::Dot => Scorer::Direction { dir: u, weighting: None },
        SelectionMethod::Tracin => Scorer::TracIn {
            traj: inputs
                .trajectory
                .ok_or_else(|| Error::config("tracin needs a checkpoint trajectory"))?,
            g_eval: u,
        },
        SelectionMethod::Chips | SelectionMethod::Trak => {
            let (acc, lambda) = match cfg.curvature {
                CurvatureMode::Identity => (empty(), Some(cfg.lambda_ridge.unwrap_or(1.0))),
                CurvatureMode::Moments => (moment_pass(cfg, params, &pool, &plan, &projection, workers)?, cfg.lambda_ridge),
            };
            let mut surr = if method == SelectionMethod::Chips {
                build_surrogate(&acc, cfg.alpha, lambda)?
            } else {
                let lambda = match cfg.lambda_trak.or(lambda) {
                    Some(l) => l,
                    None => default_lambda(&acc.moments()?.0),
                };
                build_surrogate(&acc, 0.0, Some(lambda))?
            };
            let dir = surr.solve_direction(&u, &cfg.cg_options())?;
            surrogate = Some(surr);
            let weighting = if method == SelectionMethod::Chips {
                prototypes = summary.prototypes.finish(cfg.beta)?;
                Some((&prototypes, cfg.ablation))
            } else {
                None
            };
            Scorer::Direction { dir, weighting }
        }
        _ => unreachable!("heuristic and clipscore methods returned above"),
    };
    let mut records = score_batches(params, &pool, &plan, Some(&projection), &scorer)?;
    records.sort_by_key(|r| r.id);
    Ok(ScoreRun {
        header,
        records,
        surrogate,
        eval_samples: summary.samples,
        pool_batches: plan.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{top_n, Ablation};
    use crate::synth::{generate, SynthSpec, SynthWorld};

    fn world(pool: usize) -> SynthWorld {
        generate(&SynthSpec {
            pool,
            eval: 60,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn config(method: SelectionMethod) -> RunConfig {
        let mut cfg = RunConfig {
            method,
            scoring_batch_size: 32,
            eval_batch_size: 16,
            ..RunConfig::default()
        };
        cfg.sketch.k = 64;
        cfg
    }

    fn score(w: &SynthWorld, cfg: &RunConfig, workers: usize) -> Result<ScoreRun> {
        let traj = CheckpointTrajectory::new(w.trajectory.clone()).unwrap();
        run_score(
            &ScoreInputs {
                config: cfg,
                params: &w.params,
                pool: &w.pool,
                eval: &w.eval,
                trajectory: Some(&traj),
            },
            workers,
        )
    }

    fn bits(records: &[ScoreRecord]) -> Vec<[u64; 6]> {
        records
            .iter()
            .map(|r| {
                [
                    r.id,
                    r.alignment.to_bits(),
                    r.learnability.to_bits(),
                    r.relevance.to_bits(),
                    r.utility.to_bits(),
                    r.batch_fingerprint,
                ]
            })
            .collect()
    }

    #[test]
    fn batch_plan_folds_a_trailing_singleton() {
        let plan = batch_plan(9, 4, 1, "x");
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let mut all: Vec<usize> = plan.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_eq!(batch_plan(1, 4, 1, "x"), vec![vec![0]]);
        assert!(batch_plan(0, 4, 1, "x").is_empty());
    }

    #[test]
    fn eval_subset_caps_each_task() {
        let rec = |id: u64, tag: &str| ShardRecord {
            id,
            h: vec![1.0],
            t: vec![1.0],
            tags: Some(vec![tag.to_string()]),
        };
        let eval: Vec<ShardRecord> = (0..10).map(|i| rec(i, if i < 7 { "a" } else { "b" })).collect();
        let sub = eval_subset(&eval, 3, 5);
        assert_eq!(sub.len(), 6);
        assert_eq!(sub.iter().filter(|r| task_of(r) == "a").count(), 3);
        assert_eq!(sub.iter().filter(|r| task_of(r) == "b").count(), 3);
        let again: Vec<u64> = eval_subset(&eval, 3, 5).iter().map(|r| r.id).collect();
        assert_eq!(sub.iter().map(|r| r.id).collect::<Vec<_>>(), again);
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let w = world(300);
        for method in [SelectionMethod::Chips, SelectionMethod::Trak, SelectionMethod::Tracin] {
            let cfg = config(method);
            let one = score(&w, &cfg, 1).unwrap();
            let four = score(&w, &cfg, 4).unwrap();
            assert_eq!(bits(&one.records), bits(&four.records), "{method}");
        }
    }

    #[test]
    fn one_record_per_pool_sample_in_id_order() {
        let w = world(100);
        for method in SelectionMethod::ALL {
            let run = score(&w, &config(method), 2).unwrap();
            let ids: Vec<u64> = run.records.iter().map(|r| r.id).collect();
            assert_eq!(ids, (0..100).collect::<Vec<u64>>(), "{method}");
        }
    }

    #[test]
    fn identity_curvature_ranks_like_dot() {
        let w = world(200);
        let mut chips = config(SelectionMethod::Chips);
        chips.curvature = CurvatureMode::Identity;
        chips.ablation = Ablation::AlignmentOnly;
        let a = score(&w, &chips, 2).unwrap();
        let b = score(&w, &config(SelectionMethod::Dot), 2).unwrap();
        let keys = |run: &ScoreRun| run.records.iter().map(|r| (r.id, r.utility)).collect::<Vec<_>>();
        assert_eq!(top_n(&keys(&a), 200).unwrap(), top_n(&keys(&b), 200).unwrap());
    }

    #[test]
    fn chips_prefers_the_target_cluster() {
        let w = world(1000);
        let run = score(&w, &config(SelectionMethod::Chips), 4).unwrap();
        let manifest = run_select(&run.header, &run.records, 0.1, None).unwrap();
        let target: std::collections::HashSet<u64> = w.target_ids().into_iter().collect();
        let base = target.len() as f64 / 1000.0;
        let hit = manifest.ids.iter().filter(|id| target.contains(id)).count() as f64 / manifest.ids.len() as f64;
        assert!(hit > base, "selected {hit} vs base rate {base}");
    }

    #[test]
    fn empty_eval_fails_before_pool_work() {
        let w = world(10);
        let mut pool = w.pool.clone();
        pool[0].h.pop();
        let cfg = config(SelectionMethod::Chips);
        let err = run_score(
            &ScoreInputs {
                config: &cfg,
                params: &w.params,
                pool: &pool,
                eval: &[],
                trajectory: None,
            },
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn tracin_requires_a_trajectory() {
        let w = world(10);
        let cfg = config(SelectionMethod::Tracin);
        let err = run_score(
            &ScoreInputs {
                config: &cfg,
                params: &w.params,
                pool: &w.pool,
                eval: &w.eval,
                trajectory: None,
            },
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_sample_pool_has_no_margin() {
        let w = world(1);
        let err = score(&w, &config(SelectionMethod::Chips), 1).unwrap_err();
        assert!(matches!(err, Error::MarginUndefined | Error::InsufficientBatch(_)), "{err}");
    }

    #[test]
    fn duplicate_pool_ids_are_rejected() {
        let w = world(10);
        let mut pool = w.pool.clone();
        pool[3].id = pool[4].id;
        let cfg = config(SelectionMethod::Dot);
        let err = run_score(
            &ScoreInputs {
                config: &cfg,
                params: &w.params,
                pool: &pool,
                eval: &w.eval,
                trajectory: None,
            },
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateSample(4)));
    }

    #[test]
    fn concept_methods_need_tags() {
        let w = generate(&SynthSpec {
            pool: 20,
            eval: 4,
            tags: false,
            ..SynthSpec::default()
        })
        .unwrap();
        let err = score(&w, &config(SelectionMethod::ConceptFilter), 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn chips_drift_stays_within_one_nat() {
        let w = world(500);
        let run = score(&w, &config(SelectionMethod::Chips), 2).unwrap();
        let rep = crate::scoring::drift_diagnostics(&run.records).unwrap();
        assert!(rep.kl <= 1.0 && rep.min_ratio >= (-1f64).exp() && rep.max_ratio <= 1f64.exp());
    }
}
