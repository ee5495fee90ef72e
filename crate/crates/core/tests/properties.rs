use chips_core::curvature::{build_surrogate, MomentAccumulator};
use chips_core::datastore::config::parse_config;
use chips_core::datastore::manifest::{encode_manifest, parse_manifest};
use chips_core::datastore::params::{decode_params, decode_trajectory, encode_params, encode_trajectory, round_to_f32};
use chips_core::datastore::surrogate::{decode_surrogate, encode_surrogate};
use chips_core::datastore::scores::{decode_scores, encode_scores, parse_scores_text, write_scores_text};
use chips_core::datastore::shard::{decode_shard, encode_shard};
use chips_core::datastore::{ScoreHeader, ShardRecord};
use chips_core::endpoint::{forward, per_sample_gradient, symmetric_infonce, EndpointParams, FeatureBatch};
use chips_core::numerics::{cg_solve, dot, CgOptions, DenseMatrix, FnOperator, Rng};
use chips_core::scoring::{relevance, utility_and_select, EvalPrototypes, ScoreRecord};
use chips_core::sketch::{Projection, Sketch, SketchKind, SketchSpec, SketchedVector};
use proptest::prelude::*;

fn instance(seed: u64, b: usize, d_v: usize, d_t: usize, d: usize, tau_log: f64) -> (EndpointParams, FeatureBatch) {
    let mut rng = Rng::new(seed);
    let w_v = DenseMatrix::from_fn(d_v, d, |_, _| rng.normal());
    let w_t = DenseMatrix::from_fn(d_t, d, |_, _| rng.normal());
    let params = EndpointParams::new(w_v, w_t, tau_log).unwrap();
    let h = DenseMatrix::from_fn(b, d_v, |_, _| rng.normal());
    let t = DenseMatrix::from_fn(b, d_t, |_, _| rng.normal());
    (params, FeatureBatch::new((0..b as u64).collect(), h, t).unwrap())
}

fn vectors(seed: u64, n: usize, k: usize) -> Vec<SketchedVector> {
    let mut rng = Rng::new(seed);
    let proj = Projection::Identity { dim: k };
    (0..n).map(|_| proj.project(&rng.normal_vec(k)).unwrap()).collect()
}

fn unit(rng: &mut Rng, n: usize) -> Vec<f64> {
    let v = rng.normal_vec(n);
    let norm = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cg_on_identity_is_one_step(b in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let op = FnOperator::new(b.len(), |v: &[f64], out: &mut [f64]| out.copy_from_slice(v));
        let (x, rep) = cg_solve(&op, &b, &CgOptions { max_iters: 1, tol: 1e-300, jacobi: false }).unwrap();
        prop_assert_eq!(x, b);
        prop_assert!(rep.iterations <= 1);
    }

    #[test]
    fn cg_energy_never_grows(seed in any::<u64>(), n in 2usize..24, jacobi in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let l = DenseMatrix::from_fn(n, n, |_, _| rng.normal());
        let mut a = l.matmul(&l.transpose()).unwrap();
        a.add_diagonal(1.0);
        let b = rng.normal_vec(n);
        let energy = |x: &[f64]| 0.5 * dot(x, &a.matvec(x)) - dot(&b, x);
        let mut last = 0.0f64;
        for iters in 1..=n {
            let (x, rep) = cg_solve(&a, &b, &CgOptions { max_iters: iters, tol: 1e-300, jacobi }).unwrap();
            let e = energy(&x);
            prop_assert!(e <= last + 1e-9 * last.abs().max(1.0), "{e} > {last} at {iters}");
            prop_assert_eq!(rep.residual_history.len(), rep.iterations + 1);
            last = e;
        }
    }

    #[test]
    fn moment_sums_do_not_depend_on_the_split(seed in any::<u64>(), cuts in prop::collection::vec(2usize..9, 1..6)) {
        let k = 6;
        let n: usize = cuts.iter().sum();
        let gs = vectors(seed, n, k);
        let fp = gs[0].fingerprint;
        let mut whole = MomentAccumulator::new(k, fp);
        whole.accumulate(&gs).unwrap();
        let mut split = MomentAccumulator::new(k, fp);
        let mut start = 0;
        for c in &cuts {
            split.accumulate(&gs[start..start + c]).unwrap();
            start += c;
        }
        let (p1, n1) = whole.moments().unwrap();
        let (p2, n2) = split.moments().unwrap();
        prop_assert!(p1.max_abs_diff(&p2) <= 1e-12);
        prop_assert!(n1.max_abs_diff(&n2) <= 1e-12);
    }

    #[test]
    fn cross_moment_identity(seed in any::<u64>(), n in 2usize..30) {
        let k = 5;
        let gs = vectors(seed, n, k);
        let mut acc = MomentAccumulator::new(k, gs[0].fingerprint);
        acc.accumulate(&gs).unwrap();
        let (pos, neg) = acc.moments().unwrap();
        let mut s = vec![0.0; k];
        for g in &gs {
            for (a, b) in s.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        let nf = n as f64;
        let mut lhs = neg.clone();
        lhs.scale(nf * (nf - 1.0));
        lhs.add_scaled(nf, &pos).unwrap();
        let mut rhs = DenseMatrix::zeros(k, k);
        rhs.add_outer(1.0, &s, &s);
        let scale = rhs.frobenius_norm().max(pos.frobenius_norm() * nf);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10 * scale);
    }

    #[test]
    fn permuting_the_batch_permutes_gradients(seed in any::<u64>(), b in 2usize..8, shift in 1usize..7) {
        let (params, batch) = instance(seed, b, 5, 4, 3, 1.2);
        let perm: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
        let moved = batch.select(&perm).unwrap();
        for (new_pos, &old) in perm.iter().enumerate() {
            let g_old = per_sample_gradient(&params, &batch, old).unwrap();
            let g_new = per_sample_gradient(&params, &moved, new_pos).unwrap();
            for (x, y) in g_old.iter().zip(&g_new) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn loss_is_bounded_by_log_batch_plus_twice_tau(seed in any::<u64>(), b in 1usize..9, tau_log in -2.0f64..4.0) {
        let (params, batch) = instance(seed, b, 4, 6, 3, tau_log);
        let bound = (b as f64).ln() + 2.0 * params.tau();
        for l in symmetric_infonce(&forward(&params, &batch).unwrap()) {
            prop_assert!(l >= 0.0 && l <= bound * (1.0 + 1e-12), "{l} > {bound}");
        }
    }

    #[test]
    fn relevance_stays_in_its_sigmoid_range(seed in any::<u64>(), beta in 0.0f64..=1.0) {
        let mut rng = Rng::new(seed);
        let proto = EvalPrototypes::new(rng.normal_vec(4), rng.normal_vec(4), beta).unwrap();
        let w = relevance(&unit(&mut rng, 4), &unit(&mut rng, 4), &proto).unwrap();
        prop_assert!((0.2689..=0.7312).contains(&w), "{w}");
    }

    #[test]
    fn positive_scaling_keeps_the_manifest(
        utils in prop::collection::vec((-5.0f64..5.0, 0.01f64..1.0, 0.27f64..0.73), 1..80),
        c in 0.01f64..100.0,
        r in 0.0f64..=1.0,
        pow in -8i32..8,
    ) {
        let recs: Vec<ScoreRecord> = utils
            .iter()
            .enumerate()
            .map(|(i, &(a, l, w))| ScoreRecord::new(i as u64, a, l, w, 0))
            .collect();
        let scaled = |f: f64| -> Vec<ScoreRecord> {
            recs.iter().map(|x| ScoreRecord::new(x.id, x.alignment * f, x.learnability, x.relevance, 0)).collect()
        };
        let base = utility_and_select(&recs, r, "chips", 1).unwrap();
        prop_assert_eq!(&utility_and_select(&scaled(c), r, "chips", 1).unwrap().ids, &base.ids);
        prop_assert_eq!(utility_and_select(&scaled(2f64.powi(pow)), r, "chips", 1).unwrap(), base.clone());
        if let Some(kl) = base.drift_kl_upper {
            prop_assert!(kl <= 1.0);
        }
    }

    #[test]
    fn utility_is_the_product_of_its_factors(a in -1e6f64..1e6, l in 0.0f64..2.0, w in 0.26f64..0.74) {
        let r = ScoreRecord::new(3, a, l, w, 9);
        prop_assert!((r.utility - a * l * w).abs() <= 1e-12 * (a * l * w).abs());
    }

    #[test]
    fn shards_round_trip(
        rows in prop::collection::vec((any::<u64>(), prop::collection::vec(-1e6f32..1e6, 3), prop::collection::vec(-1e6f32..1e6, 2), prop::collection::vec("[a-zA-Z ]{0,12}", 0..3)), 0..20),
        tagged in any::<bool>(),
    ) {
        let mut seen = std::collections::HashSet::new();
        let records: Vec<ShardRecord> = rows
            .into_iter()
            .filter(|r| seen.insert(r.0))
            .map(|(id, h, t, tags)| ShardRecord { id, h, t, tags: tagged.then_some(tags) })
            .collect();
        let bytes = encode_shard(3, 2, tagged, &records).unwrap();
        let (header, back) = decode_shard(&bytes).unwrap();
        prop_assert_eq!(header.count, records.len() as u64);
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(encode_shard(3, 2, tagged, &back).unwrap(), bytes);
    }

    #[test]
    fn params_round_trip(seed in any::<u64>(), d_v in 1usize..6, d_t in 1usize..6, d in 1usize..5, tau in -3.0f64..3.0) {
        let (p, _) = instance(seed, 1, d_v, d_t, d, tau);
        let p = round_to_f32(&p);
        prop_assert_eq!(decode_params(&encode_params(&p).unwrap()).unwrap(), p);
    }

    #[test]
    fn scores_round_trip_in_both_forms(
        rows in prop::collection::vec((-1e9f64..1e9, 0.0f64..2.0, 0.0f64..1.0, any::<u64>()), 0..30),
        method in "[a-z][a-z0-9_-]{0,10}",
        fp in any::<u64>(),
    ) {
        let records: Vec<ScoreRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(a, l, w, b))| ScoreRecord::new(i as u64 * 7, a, l, w, b))
            .collect();
        let header = ScoreHeader { method, config_fingerprint: fp, sketch: None };
        let (h, back) = decode_scores(&encode_scores(&header, &records).unwrap()).unwrap();
        prop_assert_eq!(&h, &header);
        prop_assert_eq!(&back, &records);
        let mut text = Vec::new();
        write_scores_text(&mut text, &header, &records).unwrap();
        let (h, back) = parse_scores_text(std::str::from_utf8(&text).unwrap()).unwrap();
        prop_assert_eq!(h, header);
        prop_assert_eq!(back, records);
    }

    #[test]
    fn manifests_round_trip(utils in prop::collection::vec(-10.0f64..10.0, 1..50), r in 0.0f64..=1.0) {
        let recs: Vec<ScoreRecord> = utils.iter().enumerate().map(|(i, &u)| ScoreRecord::plain(i as u64, u, 0)).collect();
        let m = utility_and_select(&recs, r, "dot", 42).unwrap();
        let text = String::from_utf8(encode_manifest(&m).unwrap()).unwrap();
        prop_assert_eq!(parse_manifest(&text).unwrap(), m);
    }

    #[test]
    fn trajectories_round_trip(seed in any::<u64>(), steps in prop::collection::vec(1e-6f64..1.0, 0..5)) {
        let entries: Vec<(EndpointParams, f64)> = steps
            .iter()
            .enumerate()
            .map(|(i, &eta)| (round_to_f32(&instance(seed.wrapping_add(i as u64), 1, 3, 2, 2, 0.5).0), eta))
            .collect();
        prop_assert_eq!(decode_trajectory(&encode_trajectory(&entries).unwrap()).unwrap(), entries);
    }

    #[test]
    fn surrogates_round_trip(seed in any::<u64>(), n in 2usize..12, alpha in 0.0f64..=1.0) {
        let gs = vectors(seed, n, 4);
        let mut acc = MomentAccumulator::new(4, gs[0].fingerprint);
        acc.accumulate(&gs).unwrap();
        let mut s = build_surrogate(&acc, alpha, Some(10.0)).unwrap();
        s.solve_direction(&gs[0], &CgOptions { max_iters: 5, tol: 1e-10, jacobi: false }).unwrap();
        let back = decode_surrogate(&encode_surrogate(&s).unwrap()).unwrap();
        prop_assert_eq!(back.fingerprint, s.fingerprint);
        prop_assert_eq!(back.m.max_abs_diff(&s.m), 0.0);
        for g in &gs {
            prop_assert_eq!(back.score(g).unwrap(), s.score(g).unwrap());
        }
        let other = Projection::Identity { dim: 5 }.project(&[0.0; 5]).unwrap();
        prop_assert!(s.score(&other).is_err());
    }

    #[test]
    fn config_fingerprint_tracks_content(seed in 0u64..1000, alpha in 0.0f64..=1.0, k in 1usize..5000) {
        let text = format!("seed = {seed}\nalpha = {alpha:?}\n[sketch]\nk = {k}\n");
        let a = parse_config(&text).unwrap();
        prop_assert_eq!(a.fingerprint(), parse_config(&text).unwrap().fingerprint());
        let moved = format!("seed = {}\nalpha = {alpha:?}\n[sketch]\nk = {k}\n", seed + 1);
        prop_assert_ne!(a.fingerprint(), parse_config(&moved).unwrap().fingerprint());
    }
}

fn inner_product_stats(kind: SketchKind, k: usize, seeds: u64, a: &[f64], b: &[f64]) -> (f64, f64) {
    let vals: Vec<f64> = (0..seeds)
        .map(|s| {
            let sk = Sketch::new(SketchSpec::new(kind, k, a.len(), s).unwrap()).unwrap();
            sk.apply(a).unwrap().inner(&sk.apply(b).unwrap()).unwrap()
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn sketched_inner_products_are_unbiased() {
    let mut rng = Rng::new(11);
    let p = 256;
    let (a, b) = (unit(&mut rng, p), unit(&mut rng, p));
    let exact = dot(&a, &b);
    for kind in [SketchKind::Countsketch, SketchKind::SparseSigned] {
        let (mean, var) = inner_product_stats(kind, 32, 10_000, &a, &b);
        assert!((mean - exact).abs() <= 4.0 * var.sqrt() / 100.0, "{kind:?}: {mean} vs {exact}");
    }
}

#[test]
fn sketch_variance_decays_like_one_over_k() {
    let mut rng = Rng::new(12);
    let p = 4096;
    let (a, b) = (unit(&mut rng, p), unit(&mut rng, p));
    let ks = [64usize, 128, 256, 512];
    for kind in [SketchKind::Countsketch, SketchKind::SparseSigned] {
        let lv: Vec<(f64, f64)> = ks
            .iter()
            .map(|&k| ((k as f64).ln(), inner_product_stats(kind, k, 1500, &a, &b).1.ln()))
            .collect();
        let n = lv.len() as f64;
        let mx = lv.iter().map(|v| v.0).sum::<f64>() / n;
        let my = lv.iter().map(|v| v.1).sum::<f64>() / n;
        let slope = lv.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum::<f64>()
            / lv.iter().map(|v| (v.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 1.0).abs() <= 0.3, "{kind:?}: slope {slope}");
    }
}

#[test]
fn vectors_from_different_sketches_do_not_mix() {
    let a = Sketch::new(SketchSpec::new(SketchKind::Countsketch, 8, 32, 1).unwrap()).unwrap();
    let b = Sketch::new(SketchSpec::new(SketchKind::Countsketch, 8, 32, 2).unwrap()).unwrap();
    let v = vec![1.0; 32];
    let (x, y) = (a.apply(&v).unwrap(), b.apply(&v).unwrap());
    assert!(x.inner(&y).is_err());
    let mut acc = MomentAccumulator::new(8, x.fingerprint);
    assert!(acc.accumulate(&[x.clone(), y]).is_err());
}
