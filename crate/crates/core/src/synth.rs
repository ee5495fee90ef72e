//! Clustered synthetic feature pools with a designated target cluster.
//!
//! Every cluster has a latent center in the shared `d`-dimensional space. Image
//! and text backbone features are noisy linear lifts of a sample's latent point,
//! and the generated end-point heads approximately invert those lifts, so
//! matching pairs score high before any training. A fraction of pool captions is
//! drawn from a different cluster to give the learnability weight something to
//! find. Evaluation samples all come from the target cluster.

use serde::{Deserialize, Serialize};

use crate::baselines::{OTHER_CONCEPT, OVERREPRESENTED_CONCEPTS, WHITELIST_CONCEPTS};
use crate::datastore::ShardRecord;
use crate::endpoint::EndpointParams;
use crate::numerics::{DenseMatrix, Rng};
use crate::{Error, Result};

/// Cluster whose samples make up the evaluation set.
pub const TARGET_CLUSTER: usize = 0;

/// First evaluation id; pool ids are `0..pool`.
pub const EVAL_ID_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub pool: usize,
    pub eval: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub d: usize,
    pub clusters: usize,
    /// Within-cluster spread of latent points.
    pub spread: f64,
    /// Per-coordinate backbone noise.
    pub noise: f64,
    /// Fraction of pool captions taken from another cluster.
    pub mismatch: f64,
    /// Head perturbation away from the exact inverse lift.
    pub head_noise: f64,
    pub tau_log: f64,
    /// Checkpoints written for TracIn replay.
    pub checkpoints: usize,
    pub tags: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            pool: 1000,
            eval: 200,
            d_v: 24,
            d_t: 16,
            d: 8,
            clusters: 6,
            spread: 0.6,
            noise: 0.1,
            mismatch: 0.15,
            head_noise: 0.2,
            tau_log: 10f64.ln(),
            checkpoints: 3,
            tags: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_t == 0 || self.d == 0 {
            return Err(Error::config("synth: feature and embedding widths must be positive"));
        }
        if self.d > self.d_v || self.d > self.d_t {
            return Err(Error::config("synth: d must not exceed d_v or d_t"));
        }
        if self.clusters < 2 {
            return Err(Error::config("synth: at least two clusters required"));
        }
        if !(0.0..=1.0).contains(&self.mismatch) {
            return Err(Error::config(format!("synth: mismatch {} outside [0, 1]", self.mismatch)));
        }
        for (name, v) in [("spread", self.spread), ("noise", self.noise), ("head_noise", self.head_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("synth: {name} must be finite and >= 0")));
            }
        }
        if !self.tau_log.is_finite() {
            return Err(Error::config("synth: tau_log must be finite"));
        }
        if self.pool as u64 >= EVAL_ID_BASE {
            return Err(Error::config("synth: pool too large for the id layout"));
        }
        Ok(())
    }
}

/// Concept tag carried by a cluster.
pub fn cluster_concept(c: usize) -> &'static str {
    let names: Vec<&'static str> = WHITELIST_CONCEPTS
        .iter()
        .chain(OVERREPRESENTED_CONCEPTS.iter())
        .copied()
        .chain(std::iter::once(OTHER_CONCEPT))
        .collect();
    names[c % names.len()]
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub pool: Vec<ShardRecord>,
    pub eval: Vec<ShardRecord>,
    /// Cluster of each pool record.
    pub pool_clusters: Vec<usize>,
    pub params: EndpointParams,
    /// `(θ_t, η_t)` ending at `params`.
    pub trajectory: Vec<(EndpointParams, f64)>,
}

impl SynthWorld {
    /// Pool ids from the target cluster.
    pub fn target_ids(&self) -> Vec<u64> {
        self.pool
            .iter()
            .zip(&self.pool_clusters)
            .filter(|(_, &c)| c == TARGET_CLUSTER)
            .map(|(r, _)| r.id)
            .collect()
    }
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.normal())
}

/// `lift · z + noise`, rounded to the shard's float32.
fn lift(rng: &mut Rng, lift: &DenseMatrix, z: &[f64], noise: f64) -> Vec<f32> {
    lift.matvec(z)
        .into_iter()
        .map(|v| (v + noise * rng.normal()) as f32)
        .collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let mut rng = Rng::labeled(spec.seed, "synth-geometry");
    let d = spec.d;
    let centers: Vec<Vec<f64>> = (0..spec.clusters).map(|_| rng.normal_vec(d)).collect();
    let lift_v = gaussian(&mut rng, spec.d_v, d, 1.0 / (spec.d_v as f64).sqrt());
    let lift_t = gaussian(&mut rng, spec.d_t, d, 1.0 / (spec.d_t as f64).sqrt());

    let head = |rng: &mut Rng, lift: &DenseMatrix| {
        let n = lift.rows();
        let mut w = lift.clone();
        let pert = gaussian(rng, n, d, spec.head_noise / (n as f64).sqrt());
        for (a, b) in w.as_mut_slice().iter_mut().zip(pert.as_slice()) {
            *a += b;
        }
        w
    };
    let w_v = head(&mut rng, &lift_v);
    let w_t = head(&mut rng, &lift_t);
    let params = EndpointParams::new(w_v, w_t, spec.tau_log)?;

    let mut traj_rng = Rng::labeled(spec.seed, "synth-trajectory");
    let p = params.num_params();
    let mut trajectory = Vec::with_capacity(spec.checkpoints);
    for t in 0..spec.checkpoints {
        let back = (spec.checkpoints - 1 - t) as f64;
        let dir = traj_rng.normal_vec(p);
        let step = 0.02 * back / (p as f64).sqrt();
        trajectory.push((params.offset(step, &dir)?, 1e-3));
    }

    let sample = |rng: &mut Rng, cluster: usize, caption_cluster: usize| {
        let z: Vec<f64> = centers[cluster].iter().map(|c| c + spec.spread * rng.normal()).collect();
        let zc: Vec<f64> = if caption_cluster == cluster {
            z.clone()
        } else {
            centers[caption_cluster]
                .iter()
                .map(|c| c + spec.spread * rng.normal())
                .collect()
        };
        let h = lift(rng, &lift_v, &z, spec.noise);
        let t = lift(rng, &lift_t, &zc, spec.noise);
        (h, t)
    };
    let tags_for = |c: usize| spec.tags.then(|| vec![cluster_concept(c).to_string()]);

    let mut pool_rng = Rng::labeled(spec.seed, "synth-pool");
    let mut pool = Vec::with_capacity(spec.pool);
    let mut pool_clusters = Vec::with_capacity(spec.pool);
    for id in 0..spec.pool as u64 {
        let c = pool_rng.below(spec.clusters);
        let caption = if pool_rng.uniform() < spec.mismatch {
            (c + 1 + pool_rng.below(spec.clusters - 1)) % spec.clusters
        } else {
            c
        };
        let (h, t) = sample(&mut pool_rng, c, caption);
        pool.push(ShardRecord { id, h, t, tags: tags_for(c) });
        pool_clusters.push(c);
    }

    let mut eval_rng = Rng::labeled(spec.seed, "synth-eval");
    let eval = (0..spec.eval as u64)
        .map(|i| {
            let (h, t) = sample(&mut eval_rng, TARGET_CLUSTER, TARGET_CLUSTER);
            ShardRecord {
                id: EVAL_ID_BASE + i,
                h,
                t,
                tags: tags_for(TARGET_CLUSTER),
            }
        })
        .collect();

    Ok(SynthWorld {
        pool,
        eval,
        pool_clusters,
        params,
        trajectory,
    })
}
