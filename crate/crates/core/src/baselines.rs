//! Reference selectors scored in the same subspace and sketch space as CHIPS.
//!
//! Heuristic selectors (Random, concept filter/balance) produce ranking keys;
//! samples that a heuristic excludes get a key of `-inf` and are never
//! retained.

use std::collections::BTreeSet;

use crate::curvature::{build_surrogate, MomentAccumulator};
use crate::endpoint::{forward, per_sample_gradient_with, EndpointParams, FeatureBatch};
use crate::numerics::{dot, norm2, CgOptions, Rng};
use crate::scoring::{retained_count, top_n, ScoreRecord};
use crate::sketch::{Projection, SketchedVector};
use crate::{Error, Result};

/// Concepts kept by the concept filter.
pub const WHITELIST_CONCEPTS: [&str; 8] = [
    "Clinical Imaging",
    "Microscopy",
    "Immuno Assays",
    "Illustrative Diagrams",
    "Chemical Structures",
    "Maps",
    "Tools and Materials",
    "Hand Drawn and Screen Based Visuals",
];

/// Concepts thinned out by concept balancing.
pub const OVERREPRESENTED_CONCEPTS: [&str; 3] = ["Plots and Charts", "Tables", "Scientific Formulae and Equations"];

/// Catch-all tag for samples outside both lists.
pub const OTHER_CONCEPT: &str = "Other";

pub const DEFAULT_BALANCE_RATE: f64 = 0.25;

pub const CLIPSCORE_WEIGHT: f64 = 2.5;

/// `g̃ᵀ ḡ_eval`.
pub fn score_dot(g: &SketchedVector, g_eval: &SketchedVector) -> Result<f64> {
    g.inner(g_eval)
}

/// `2.5 · max(cos(x̂, ŷ), 0)`.
pub fn clipscore(xhat: &[f64], yhat: &[f64]) -> f64 {
    let n = norm2(xhat) * norm2(yhat);
    if n == 0.0 {
        return 0.0;
    }
    CLIPSCORE_WEIGHT * (dot(xhat, yhat) / n).max(0.0)
}

/// Checkpoints `θ_t` with their learning rates `η_t`.
#[derive(Debug, Clone)]
pub struct CheckpointTrajectory {
    checkpoints: Vec<(EndpointParams, f64)>,
}

impl CheckpointTrajectory {
    pub fn new(checkpoints: Vec<(EndpointParams, f64)>) -> Result<Self> {
        let Some((first, _)) = checkpoints.first() else {
            return Err(Error::config("trajectory needs at least one checkpoint"));
        };
        let shape = (first.d_v(), first.d_t(), first.d());
        for (t, (p, eta)) in checkpoints.iter().enumerate() {
            if (p.d_v(), p.d_t(), p.d()) != shape {
                return Err(Error::shape(format!("checkpoint {t} shape differs from checkpoint 0")));
            }
            if !(*eta > 0.0) || !eta.is_finite() {
                return Err(Error::config(format!("checkpoint {t} learning rate {eta} must be positive")));
            }
        }
        Ok(Self { checkpoints })
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(EndpointParams, f64)> {
        self.checkpoints.iter()
    }
}

/// TracIn scores for every sample of a batch: `Σ_t η_t ⟨Π g_i^{(t)}, ḡ_eval⟩`.
pub fn tracin_batch(
    traj: &CheckpointTrajectory,
    batch: &FeatureBatch,
    projection: &Projection,
    g_eval: &SketchedVector,
) -> Result<Vec<f64>> {
    let mut scores = vec![0.0; batch.len()];
    for (params, eta) in traj.iter() {
        if params.num_params() != projection.input_dim() {
            return Err(Error::shape("checkpoint subspace dim differs from projection input dim"));
        }
        let geom = forward(params, batch)?;
        for (i, s) in scores.iter_mut().enumerate() {
            let g = per_sample_gradient_with(params, batch, &geom, i)?;
            *s += eta * projection.project(&g)?.inner(g_eval)?;
        }
    }
    Ok(scores)
}

/// Single-sample TracIn.
pub fn score_tracin(
    traj: &CheckpointTrajectory,
    batch: &FeatureBatch,
    i: usize,
    projection: &Projection,
    g_eval: &SketchedVector,
) -> Result<f64> {
    if i >= batch.len() {
        return Err(Error::IndexOutOfRange { index: i, len: batch.len() });
    }
    Ok(tracin_batch(traj, batch, projection, g_eval)?[i])
}

/// `(Φ + λ_TRAK I)⁻¹ ḡ_eval`, with `Φ` the pool self moment.
pub fn trak_direction(
    acc: &MomentAccumulator,
    lambda_trak: f64,
    g_eval: &SketchedVector,
    opts: &CgOptions,
) -> Result<SketchedVector> {
    let mut surr = build_surrogate(acc, 0.0, Some(lambda_trak))?;
    surr.solve_direction(g_eval, opts)
}

/// `g̃ᵀ Φ⁻¹ ḡ_eval` against a direction from [`trak_direction`].
pub fn score_trak(g: &SketchedVector, direction: &SketchedVector) -> Result<f64> {
    g.inner(direction)
}

/// Uniform keys in `(0, 1]`, assigned in ascending id order.
pub fn random_keys(ids: &[u64], seed: u64) -> Vec<(u64, f64)> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut rng = Rng::labeled(seed, "random-baseline");
    sorted.into_iter().map(|id| (id, 1.0 - rng.uniform())).collect()
}

/// `⌊r·N⌋` ids drawn uniformly without replacement.
pub fn select_random(ids: &[u64], r: f64, seed: u64) -> Result<Vec<u64>> {
    top_n(&random_keys(ids, seed), retained_count(r, ids.len())?)
}

/// Closed set of concept tags for one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptVocabulary {
    tags: BTreeSet<String>,
}

impl Default for ConceptVocabulary {
    fn default() -> Self {
        Self::new(
            WHITELIST_CONCEPTS
                .iter()
                .chain(OVERREPRESENTED_CONCEPTS.iter())
                .chain(std::iter::once(&OTHER_CONCEPT))
                .map(|s| s.to_string()),
        )
    }
}

impl ConceptVocabulary {
    pub fn new(tags: impl IntoIterator<Item = String>) -> Self {
        Self {
            tags: tags.into_iter().collect(),
        }
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }

    pub fn check(&self, tagged: &[(u64, Vec<String>)]) -> Result<()> {
        for (id, tags) in tagged {
            if let Some(bad) = tags.iter().find(|t| !self.contains(t)) {
                return Err(Error::config(format!("sample {id}: tag {bad:?} is not in the concept vocabulary")));
            }
        }
        Ok(())
    }
}

fn keys_within(tagged: &[(u64, Vec<String>)], eligible: impl Fn(usize) -> bool, seed: u64) -> Vec<(u64, f64)> {
    let ids: Vec<u64> = tagged.iter().map(|(id, _)| *id).collect();
    let keys = random_keys(&ids, seed);
    let eligible_ids: BTreeSet<u64> = tagged
        .iter()
        .enumerate()
        .filter(|(i, _)| eligible(*i))
        .map(|(_, (id, _))| *id)
        .collect();
    keys.into_iter()
        .map(|(id, k)| (id, if eligible_ids.contains(&id) { k } else { f64::NEG_INFINITY }))
        .collect()
}

/// Keys that keep whitelist-tagged samples in random order and exclude the rest.
pub fn concept_filter_keys(
    tagged: &[(u64, Vec<String>)],
    whitelist: &[String],
    vocab: &ConceptVocabulary,
    seed: u64,
) -> Result<Vec<(u64, f64)>> {
    vocab.check(tagged)?;
    let hit = |i: usize| tagged[i].1.iter().any(|t| whitelist.contains(t));
    if !(0..tagged.len()).any(hit) {
        return Err(Error::EmptyPool("no sample carries a whitelisted concept".into()));
    }
    Ok(keys_within(tagged, hit, seed))
}

/// Keys after thinning samples with an overrepresented concept to `rate` of
/// their count.
pub fn concept_balance_keys(
    tagged: &[(u64, Vec<String>)],
    overrepresented: &[String],
    rate: f64,
    vocab: &ConceptVocabulary,
    seed: u64,
) -> Result<Vec<(u64, f64)>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("concept balance rate {rate} outside [0, 1]")));
    }
    vocab.check(tagged)?;
    let mut over: Vec<u64> = tagged
        .iter()
        .filter(|(_, tags)| tags.iter().any(|t| overrepresented.contains(t)))
        .map(|(id, _)| *id)
        .collect();
    over.sort_unstable();
    let keep = (rate * over.len() as f64).floor() as usize;
    let mut rng = Rng::labeled(seed, "concept-balance");
    rng.shuffle(&mut over);
    let dropped: BTreeSet<u64> = over[keep..].iter().copied().collect();
    if dropped.len() == tagged.len() {
        return Err(Error::EmptyPool("balancing removed every sample".into()));
    }
    Ok(keys_within(tagged, |i| !dropped.contains(&tagged[i].0), seed))
}

/// Score records for heuristic keys: eligible samples carry their key as the
/// alignment, excluded ones get relevance 0.
pub fn heuristic_records(keys: &[(u64, f64)]) -> Vec<ScoreRecord> {
    keys.iter()
        .map(|&(id, k)| {
            if k > f64::NEG_INFINITY {
                ScoreRecord::plain(id, k, 0)
            } else {
                ScoreRecord::new(id, 0.0, 1.0, 0.0, 0)
            }
        })
        .collect()
}

/// Top `⌊r·N⌋` eligible ids from heuristic keys.
pub fn select_eligible(keys: &[(u64, f64)], r: f64) -> Result<Vec<u64>> {
    let n = retained_count(r, keys.len())?;
    let eligible: Vec<(u64, f64)> = keys.iter().copied().filter(|(_, k)| *k > f64::NEG_INFINITY).collect();
    top_n(&eligible, n)
}

pub fn filter_concepts(
    tagged: &[(u64, Vec<String>)],
    whitelist: &[String],
    vocab: &ConceptVocabulary,
    r: f64,
    seed: u64,
) -> Result<Vec<u64>> {
    select_eligible(&concept_filter_keys(tagged, whitelist, vocab, seed)?, r)
}

pub fn balance_concepts(
    tagged: &[(u64, Vec<String>)],
    overrepresented: &[String],
    rate: f64,
    vocab: &ConceptVocabulary,
    r: f64,
    seed: u64,
) -> Result<Vec<u64>> {
    select_eligible(&concept_balance_keys(tagged, overrepresented, rate, vocab, seed)?, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::build_surrogate;
    use crate::numerics::{spearman, DenseMatrix};
    use crate::sketch::identity_fingerprint;

    fn sv(data: Vec<f64>) -> SketchedVector {
        let fingerprint = identity_fingerprint(data.len());
        SketchedVector { data, fingerprint }
    }

    fn toy(seed: u64) -> (EndpointParams, FeatureBatch) {
        let mut rng = Rng::new(seed);
        let p = EndpointParams::new(
            DenseMatrix::from_fn(4, 3, |_, _| rng.normal()),
            DenseMatrix::from_fn(5, 3, |_, _| rng.normal()),
            0.5,
        )
        .unwrap();
        let b = FeatureBatch::new(
            (0..6).collect(),
            DenseMatrix::from_fn(6, 4, |_, _| rng.normal()),
            DenseMatrix::from_fn(6, 5, |_, _| rng.normal()),
        )
        .unwrap();
        (p, b)
    }

    #[test]
    fn dot_trivia() {
        let u = sv(vec![1.0, 2.0, -2.0]);
        assert_eq!(score_dot(&u, &u).unwrap(), 9.0);
        assert_eq!(score_dot(&sv(vec![1.0, 0.0]), &sv(vec![0.0, 3.0])).unwrap(), 0.0);
    }

    #[test]
    fn clipscore_clamp() {
        assert!((clipscore(&[1.0, 0.0], &[2.0, 0.0]) - 2.5).abs() < 1e-15);
        assert_eq!(clipscore(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
        assert_eq!(clipscore(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn tracin_single_checkpoint_is_dot() {
        let (p, b) = toy(1);
        let proj = Projection::Identity { dim: p.num_params() };
        let mut rng = Rng::new(2);
        let ge = sv(rng.normal_vec(p.num_params()));
        let traj = CheckpointTrajectory::new(vec![(p.clone(), 1.0)]).unwrap();
        let geom = forward(&p, &b).unwrap();
        for i in 0..b.len() {
            let g = proj.project(&per_sample_gradient_with(&p, &b, &geom, i).unwrap()).unwrap();
            let want = score_dot(&g, &ge).unwrap();
            assert!((score_tracin(&traj, &b, i, &proj, &ge).unwrap() - want).abs() < 1e-12);
        }
        let halves = CheckpointTrajectory::new(vec![(p.clone(), 0.5), (p, 0.5)]).unwrap();
        let a = tracin_batch(&traj, &b, &proj, &ge).unwrap();
        let h = tracin_batch(&halves, &b, &proj, &ge).unwrap();
        for (x, y) in a.iter().zip(&h) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tracin_three_checkpoint_replay() {
        let (p0, b) = toy(3);
        let mut rng = Rng::new(4);
        let ps: Vec<EndpointParams> = (0..3)
            .map(|t| p0.offset(0.1 * t as f64, &rng.normal_vec(p0.num_params())).unwrap())
            .collect();
        let etas = [0.3, 0.2, 0.1];
        let traj = CheckpointTrajectory::new(ps.iter().cloned().zip(etas).collect()).unwrap();
        let proj = Projection::Identity { dim: p0.num_params() };
        let ge = sv(rng.normal_vec(p0.num_params()));
        let got = tracin_batch(&traj, &b, &proj, &ge).unwrap();
        for i in 0..b.len() {
            let mut want = 0.0;
            for (p, eta) in ps.iter().zip(etas) {
                let g = crate::endpoint::per_sample_gradient(p, &b, i).unwrap();
                want += eta * dot(&g, &ge.data);
            }
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_validation() {
        let (p, _) = toy(5);
        assert!(CheckpointTrajectory::new(vec![]).is_err());
        assert!(CheckpointTrajectory::new(vec![(p.clone(), 0.0)]).is_err());
        let other = EndpointParams::new(DenseMatrix::identity(2), DenseMatrix::identity(2), 0.0).unwrap();
        assert!(matches!(CheckpointTrajectory::new(vec![(p, 1.0), (other, 1.0)]), Err(Error::Shape(_))));
    }

    fn grads(seed: u64, n: usize, k: usize) -> Vec<SketchedVector> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| sv(rng.normal_vec(k))).collect()
    }

    #[test]
    fn trak_matches_dense_inverse() {
        let k = 8;
        let gs = grads(6, 40, k);
        let mut acc = MomentAccumulator::new(k, gs[0].fingerprint);
        acc.accumulate(&gs).unwrap();
        let ge = sv(Rng::new(7).normal_vec(k));
        let opts = CgOptions { max_iters: 50, tol: 1e-14, jacobi: false };
        let dir = trak_direction(&acc, 0.1, &ge, &opts).unwrap();

        let (pos, _) = acc.moments().unwrap();
        let mut phi = nalgebra::DMatrix::from_row_slice(k, k, pos.as_slice());
        phi += nalgebra::DMatrix::identity(k, k) * 0.1;
        let inv = phi.try_inverse().unwrap();
        let want = inv * nalgebra::DVector::from_column_slice(&ge.data);
        for g in &gs {
            let s = score_trak(g, &dir).unwrap();
            let w: f64 = g.data.iter().zip(want.iter()).map(|(a, b)| a * b).sum();
            assert!((s - w).abs() <= 1e-8);
        }
    }

    #[test]
    fn trak_equals_chips_alignment_at_alpha_zero() {
        let gs = grads(8, 20, 6);
        let mut acc = MomentAccumulator::new(6, gs[0].fingerprint);
        acc.accumulate(&gs).unwrap();
        let ge = sv(Rng::new(9).normal_vec(6));
        let opts = CgOptions { max_iters: 30, tol: 1e-14, jacobi: false };
        let trak = trak_direction(&acc, 0.3, &ge, &opts).unwrap();
        let mut surr = build_surrogate(&acc, 0.0, Some(0.3)).unwrap();
        let chips = surr.solve_direction(&ge, &opts).unwrap();
        for g in &gs {
            assert_eq!(score_trak(g, &trak).unwrap(), crate::scoring::alignment_score(g, &chips).unwrap());
        }
    }

    #[test]
    fn trak_with_empty_moment_is_scaled_dot() {
        let acc = MomentAccumulator::new(3, identity_fingerprint(3));
        let ge = sv(vec![1.0, 2.0, 3.0]);
        let opts = CgOptions::default();
        let dir = trak_direction(&acc, 2.0, &ge, &opts).unwrap();
        let g = sv(vec![4.0, 0.0, -2.0]);
        assert_eq!(score_trak(&g, &dir).unwrap(), score_dot(&g, &ge).unwrap() / 2.0);
    }

    #[test]
    fn trak_tends_to_dot_for_huge_ridge() {
        let gs = grads(10, 100, 12);
        let mut acc = MomentAccumulator::new(12, gs[0].fingerprint);
        acc.accumulate(&gs).unwrap();
        let ge = sv(Rng::new(11).normal_vec(12));
        let norm = crate::numerics::spectral_norm(&acc.moments().unwrap().0).unwrap();
        let opts = CgOptions { max_iters: 20, tol: 1e-14, jacobi: false };
        let dir = trak_direction(&acc, 1e6 * norm, &ge, &opts).unwrap();
        let trak: Vec<f64> = gs.iter().map(|g| score_trak(g, &dir).unwrap()).collect();
        let dots: Vec<f64> = gs.iter().map(|g| score_dot(g, &ge).unwrap()).collect();
        assert!(spearman(&trak, &dots) > 0.9999);
    }

    #[test]
    fn random_selection_is_seeded() {
        let ids: Vec<u64> = (0..1000).collect();
        let a = select_random(&ids, 0.1, 42).unwrap();
        let mut rev = ids.clone();
        rev.reverse();
        assert_eq!(a.len(), 100);
        assert_eq!(a, select_random(&rev, 0.1, 42).unwrap());
        assert_ne!(a, select_random(&ids, 0.1, 43).unwrap());
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 100);
    }

    fn tagged(tags: &[&str]) -> Vec<(u64, Vec<String>)> {
        tags.iter()
            .enumerate()
            .map(|(i, t)| (i as u64, vec![t.to_string()]))
            .collect()
    }

    fn owned(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn filter_without_whitelist_hits_is_empty_pool() {
        let t = tagged(&["Tables", "Other", "Tables"]);
        let err = filter_concepts(&t, &owned(&WHITELIST_CONCEPTS), &ConceptVocabulary::default(), 0.5, 1);
        assert!(matches!(err, Err(Error::EmptyPool(_))));
    }

    #[test]
    fn filter_keeps_only_whitelisted() {
        let t = tagged(&["Maps", "Other", "Microscopy", "Tables", "Maps", "Other"]);
        let sel = filter_concepts(&t, &owned(&WHITELIST_CONCEPTS), &ConceptVocabulary::default(), 1.0, 1).unwrap();
        assert_eq!(sel.iter().copied().collect::<BTreeSet<_>>(), BTreeSet::from([0, 2, 4]));
    }

    #[test]
    fn unknown_tag_rejected() {
        let t = tagged(&["Maps", "Cats"]);
        let err = filter_concepts(&t, &owned(&WHITELIST_CONCEPTS), &ConceptVocabulary::default(), 1.0, 1);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn balance_thins_overrepresented() {
        let mut names = vec!["Tables"; 80];
        names.extend(vec!["Other"; 20]);
        let t = tagged(&names);
        let keys = concept_balance_keys(&t, &owned(&OVERREPRESENTED_CONCEPTS), 0.25, &ConceptVocabulary::default(), 3).unwrap();
        let kept_tables = keys.iter().filter(|(id, k)| *id < 80 && k.is_finite()).count();
        let kept_other = keys.iter().filter(|(id, k)| *id >= 80 && k.is_finite()).count();
        assert_eq!((kept_tables, kept_other), (20, 20));
        let sel = select_eligible(&keys, 1.0).unwrap();
        assert_eq!(sel.len(), 40);
        let recs = heuristic_records(&keys);
        let m = crate::scoring::utility_and_select(&recs, 1.0, "concept-balance", 0).unwrap();
        assert_eq!(m.ids, sel);
    }
}
