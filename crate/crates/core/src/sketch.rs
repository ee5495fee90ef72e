//! Johnson–Lindenstrauss sketches for subspace gradients.
//!
//! None of the transforms materialize the `k × P` matrix. CountSketch and the
//! sparse signed map hash every input coordinate to its rows and signs; SRHT
//! zero-pads to a power of two, flips signs, applies a fast Walsh–Hadamard
//! transform and keeps a seeded subset of `k` rows.
//!
//! Vectors that have been projected carry the fingerprint of their projection.
//! Inner products between vectors from different projections are refused.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{dot, DenseMatrix, LinearOperator, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SketchKind {
    Countsketch,
    SparseSigned,
    Srht,
}

impl SketchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SketchKind::Countsketch => "countsketch",
            SketchKind::SparseSigned => "sparse-signed",
            SketchKind::Srht => "srht",
        }
    }
}

impl std::str::FromStr for SketchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "countsketch" => Ok(SketchKind::Countsketch),
            "sparse-signed" => Ok(SketchKind::SparseSigned),
            "srht" => Ok(SketchKind::Srht),
            other => Err(Error::config(format!("unknown sketch kind {other:?}"))),
        }
    }
}

pub const DEFAULT_SPARSITY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchSpec {
    pub kind: SketchKind,
    pub k: usize,
    pub input_dim: usize,
    pub seed: u64,
    /// Nonzeros per column; only meaningful for the sparse signed map.
    pub sparsity: usize,
}

impl SketchSpec {
    pub fn new(kind: SketchKind, k: usize, input_dim: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            k,
            input_dim,
            seed,
            sparsity: DEFAULT_SPARSITY.min(k.max(1)),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_sparsity(mut self, s: usize) -> Result<Self> {
        self.sparsity = s;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("sketch k must be positive"));
        }
        if self.k > self.input_dim {
            return Err(Error::config(format!(
                "sketch k = {} exceeds input dim P = {}",
                self.k, self.input_dim
            )));
        }
        if self.kind == SketchKind::SparseSigned && !(1..=self.k).contains(&self.sparsity) {
            return Err(Error::config(format!(
                "sparsity {} must lie in 1..={}",
                self.sparsity, self.k
            )));
        }
        Ok(())
    }

    /// Internal length after zero padding (SRHT only; otherwise `input_dim`).
    pub fn padded_dim(&self) -> usize {
        match self.kind {
            SketchKind::Srht => self.input_dim.next_power_of_two(),
            _ => self.input_dim,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"sketch");
        h.update(self.kind.as_str().as_bytes());
        h.update((self.k as u64).to_le_bytes());
        h.update((self.input_dim as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        let s = if self.kind == SketchKind::SparseSigned {
            self.sparsity as u64
        } else {
            0
        };
        h.update(s.to_le_bytes());
        first_u64(&h.finalize())
    }
}

fn first_u64(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(bytes[..8].try_into().expect("at least 8 bytes"))
}

/// Fingerprint of the identity "projection" on `dim` coordinates.
pub fn identity_fingerprint(dim: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"identity");
    h.update((dim as u64).to_le_bytes());
    first_u64(&h.finalize())
}

/// A projected vector tagged with the projection that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchedVector {
    pub data: Vec<f64>,
    pub fingerprint: u64,
}

impl SketchedVector {
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            fingerprint: self.fingerprint,
        }
    }

    /// Inner product; both sides must come from the same projection.
    pub fn inner(&self, other: &SketchedVector) -> Result<f64> {
        check_fingerprints(self.fingerprint, other.fingerprint)?;
        if self.data.len() != other.data.len() {
            return Err(Error::shape("sketched vectors differ in length"));
        }
        Ok(dot(&self.data, &other.data))
    }
}

pub fn check_fingerprints(left: u64, right: u64) -> Result<()> {
    if left != right {
        return Err(Error::SketchMismatch { left, right });
    }
    Ok(())
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn coordinate_hash(seed: u64, coord: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(coord.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ salt))
}

/// Multiply-shift reduction of a hash onto `0..n`.
#[inline]
fn reduce(h: u64, n: usize) -> usize {
    ((h as u128 * n as u128) >> 64) as usize
}

#[derive(Debug, Clone)]
enum Plan {
    Count {
        bucket: Vec<u32>,
        negative: Vec<bool>,
    },
    Sparse {
        /// `sparsity` rows per input coordinate, flattened.
        rows: Vec<u32>,
        negative: Vec<bool>,
        value: f64,
    },
    Srht {
        negative: Vec<bool>,
        rows: Vec<usize>,
        scale: f64,
    },
}

/// A ready-to-apply JL transform.
#[derive(Debug, Clone)]
pub struct Sketch {
    spec: SketchSpec,
    fingerprint: u64,
    plan: Plan,
}

impl Sketch {
    pub fn new(spec: SketchSpec) -> Result<Self> {
        spec.validate()?;
        let p = spec.input_dim;
        let plan = match spec.kind {
            SketchKind::Countsketch => {
                let mut bucket = Vec::with_capacity(p);
                let mut negative = Vec::with_capacity(p);
                for c in 0..p as u64 {
                    let h = coordinate_hash(spec.seed, c, 0);
                    bucket.push(reduce(h, spec.k) as u32);
                    negative.push(coordinate_hash(spec.seed, c, 1) >> 63 == 1);
                }
                Plan::Count { bucket, negative }
            }
            SketchKind::SparseSigned => {
                let s = spec.sparsity;
                let mut rows = Vec::with_capacity(p * s);
                let mut negative = Vec::with_capacity(p * s);
                let mut chosen: Vec<u32> = Vec::with_capacity(s);
                for c in 0..p as u64 {
                    chosen.clear();
                    if s == spec.k {
                        chosen.extend(0..spec.k as u32);
                    } else {
                        let mut t = 0u64;
                        while chosen.len() < s {
                            let r = reduce(coordinate_hash(spec.seed, c, 2 + t), spec.k) as u32;
                            if !chosen.contains(&r) {
                                chosen.push(r);
                            }
                            t += 1;
                        }
                    }
                    for (j, &r) in chosen.iter().enumerate() {
                        rows.push(r);
                        negative.push(coordinate_hash(spec.seed ^ 0x5151, c, j as u64) >> 63 == 1);
                    }
                }
                Plan::Sparse {
                    rows,
                    negative,
                    value: 1.0 / (s as f64).sqrt(),
                }
            }
            SketchKind::Srht => {
                let m = spec.padded_dim();
                let negative = (0..m as u64)
                    .map(|c| coordinate_hash(spec.seed, c, 3) >> 63 == 1)
                    .collect();
                let mut perm: Vec<usize> = (0..m).collect();
                Rng::new(spec.seed ^ 0x5248_5421).shuffle(&mut perm);
                let mut rows = perm[..spec.k].to_vec();
                rows.sort_unstable();
                Plan::Srht {
                    negative,
                    rows,
                    scale: 1.0 / (spec.k as f64).sqrt(),
                }
            }
        };
        Ok(Self {
            fingerprint: spec.fingerprint(),
            spec,
            plan,
        })
    }

    pub fn spec(&self) -> &SketchSpec {
        &self.spec
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// `Π v`, tagged with this sketch's fingerprint.
    pub fn apply(&self, v: &[f64]) -> Result<SketchedVector> {
        if v.len() != self.spec.input_dim {
            return Err(Error::shape(format!(
                "sketch input dim {} but vector has {}",
                self.spec.input_dim,
                v.len()
            )));
        }
        Ok(SketchedVector {
            data: self.apply_raw(v),
            fingerprint: self.fingerprint,
        })
    }

    fn apply_raw(&self, v: &[f64]) -> Vec<f64> {
        let k = self.spec.k;
        match &self.plan {
            Plan::Count { bucket, negative } => {
                let mut out = vec![0.0; k];
                for ((&b, &neg), &x) in bucket.iter().zip(negative).zip(v) {
                    out[b as usize] += if neg { -x } else { x };
                }
                out
            }
            Plan::Sparse {
                rows,
                negative,
                value,
            } => {
                let s = self.spec.sparsity;
                let mut out = vec![0.0; k];
                for (c, &x) in v.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let vx = value * x;
                    for j in c * s..(c + 1) * s {
                        out[rows[j] as usize] += if negative[j] { -vx } else { vx };
                    }
                }
                out
            }
            Plan::Srht {
                negative,
                rows,
                scale,
            } => {
                let mut buf = vec![0.0; negative.len()];
                for (i, &x) in v.iter().enumerate() {
                    buf[i] = if negative[i] { -x } else { x };
                }
                fwht(&mut buf);
                rows.iter().map(|&r| scale * buf[r]).collect()
            }
        }
    }

    /// `Πᵀ y` for a `k`-vector `y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.spec.k {
            return Err(Error::shape(format!(
                "transpose input dim {} but vector has {}",
                self.spec.k,
                y.len()
            )));
        }
        let p = self.spec.input_dim;
        Ok(match &self.plan {
            Plan::Count { bucket, negative } => bucket
                .iter()
                .zip(negative)
                .map(|(&b, &neg)| if neg { -y[b as usize] } else { y[b as usize] })
                .collect(),
            Plan::Sparse {
                rows,
                negative,
                value,
            } => {
                let s = self.spec.sparsity;
                (0..p)
                    .map(|c| {
                        (c * s..(c + 1) * s)
                            .map(|j| {
                                let t = value * y[rows[j] as usize];
                                if negative[j] {
                                    -t
                                } else {
                                    t
                                }
                            })
                            .sum()
                    })
                    .collect()
            }
            Plan::Srht {
                negative,
                rows,
                scale,
            } => {
                let mut buf = vec![0.0; negative.len()];
                for (&r, &yr) in rows.iter().zip(y) {
                    buf[r] = scale * yr;
                }
                // The unnormalized Hadamard matrix is symmetric.
                fwht(&mut buf);
                (0..p)
                    .map(|i| if negative[i] { -buf[i] } else { buf[i] })
                    .collect()
            }
        })
    }

    /// `Π M Πᵀ` for a symmetric operator `M` on the input space.
    pub fn sketch_matrix<A: LinearOperator + ?Sized>(&self, m: &A) -> Result<DenseMatrix> {
        if m.dim() != self.spec.input_dim {
            return Err(Error::shape(format!(
                "operator dim {} but sketch input dim {}",
                m.dim(),
                self.spec.input_dim
            )));
        }
        let k = self.spec.k;
        let mut out = DenseMatrix::zeros(k, k);
        let mut e = vec![0.0; k];
        let mut w = vec![0.0; self.spec.input_dim];
        for j in 0..k {
            e[j] = 1.0;
            let c = self.apply_transpose(&e)?;
            e[j] = 0.0;
            m.apply(&c, &mut w);
            let col = self.apply_raw(&w);
            for (i, v) in col.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        if !out.is_finite() {
            return Err(Error::NumericalBreakdown("non-finite sketched matrix".into()));
        }
        out.symmetrized()
    }
}

/// In-place unnormalized fast Walsh–Hadamard transform; `len` must be a power of two.
pub fn fwht(buf: &mut [f64]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let (a, b) = (buf[i], buf[i + h]);
                buf[i] = a + b;
                buf[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// The space in which gradients are compared: the raw subspace or a sketch of it.
#[derive(Debug, Clone)]
pub enum Projection {
    Identity { dim: usize },
    Sketch(Sketch),
}

impl Projection {
    pub fn from_spec(spec: Option<SketchSpec>, input_dim: usize) -> Result<Self> {
        match spec {
            None => Ok(Projection::Identity { dim: input_dim }),
            Some(s) => {
                if s.input_dim != input_dim {
                    return Err(Error::shape(format!(
                        "sketch input dim {} but gradients have {}",
                        s.input_dim, input_dim
                    )));
                }
                Ok(Projection::Sketch(Sketch::new(s)?))
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Projection::Identity { dim } => *dim,
            Projection::Sketch(s) => s.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Projection::Identity { dim } => *dim,
            Projection::Sketch(s) => s.k(),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        match self {
            Projection::Identity { dim } => identity_fingerprint(*dim),
            Projection::Sketch(s) => s.fingerprint(),
        }
    }

    pub fn spec(&self) -> Option<&SketchSpec> {
        match self {
            Projection::Identity { .. } => None,
            Projection::Sketch(s) => Some(s.spec()),
        }
    }

    pub fn project(&self, v: &[f64]) -> Result<SketchedVector> {
        match self {
            Projection::Identity { dim } => {
                if v.len() != *dim {
                    return Err(Error::shape(format!("expected dim {dim}, got {}", v.len())));
                }
                Ok(SketchedVector {
                    data: v.to_vec(),
                    fingerprint: identity_fingerprint(*dim),
                })
            }
            Projection::Sketch(s) => s.apply(v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_pi(s: &Sketch) -> DenseMatrix {
        let p = s.input_dim();
        let mut pi = DenseMatrix::zeros(s.k(), p);
        let mut e = vec![0.0; p];
        for c in 0..p {
            e[c] = 1.0;
            let col = s.apply(&e).unwrap().data;
            e[c] = 0.0;
            for (r, v) in col.into_iter().enumerate() {
                pi[(r, c)] = v;
            }
        }
        pi
    }

    fn all_kinds(k: usize, p: usize, seed: u64) -> Vec<Sketch> {
        [SketchKind::Countsketch, SketchKind::SparseSigned, SketchKind::Srht]
            .into_iter()
            .map(|kind| Sketch::new(SketchSpec::new(kind, k, p, seed).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn zero_maps_to_zero() {
        for s in all_kinds(8, 30, 1) {
            assert!(s.apply(&[0.0; 30]).unwrap().data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(
            SketchSpec::new(SketchKind::Countsketch, 10, 5, 0),
            Err(Error::Config(_))
        ));
        assert!(SketchSpec::new(SketchKind::Srht, 0, 5, 0).is_err());
        let s = SketchSpec::new(SketchKind::SparseSigned, 4, 10, 0).unwrap();
        assert!(s.with_sparsity(5).is_err());
        assert_eq!(SketchSpec::new(SketchKind::Srht, 4, 100, 0).unwrap().padded_dim(), 128);
    }

    #[test]
    fn wrong_input_dim_is_shape_error() {
        let s = &all_kinds(4, 10, 0)[0];
        assert!(matches!(s.apply(&[1.0; 9]), Err(Error::Shape(_))));
    }

    #[test]
    fn fingerprint_guards_inner_products() {
        let a = Sketch::new(SketchSpec::new(SketchKind::Countsketch, 4, 10, 1).unwrap()).unwrap();
        let b = Sketch::new(SketchSpec::new(SketchKind::Countsketch, 4, 10, 2).unwrap()).unwrap();
        let v = [1.0; 10];
        let x = a.apply(&v).unwrap();
        let y = b.apply(&v).unwrap();
        assert!(matches!(x.inner(&y), Err(Error::SketchMismatch { .. })));
        assert!(x.inner(&a.apply(&v).unwrap()).is_ok());
    }

    #[test]
    fn transpose_is_adjoint_of_dense_pi() {
        for s in all_kinds(16, 50, 9) {
            let pi = dense_pi(&s);
            let y: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
            let t = s.apply_transpose(&y).unwrap();
            let oracle = pi.matvec_t(&y);
            for (a, b) in t.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{:?}", s.spec().kind);
            }
        }
    }

    #[test]
    fn sketch_matrix_of_identity_matches_explicit_pi() {
        for s in all_kinds(32, 200, 4) {
            let pi = dense_pi(&s);
            let oracle = pi.matmul(&pi.transpose()).unwrap();
            let got = s.sketch_matrix(&DenseMatrix::identity(200)).unwrap();
            assert!(got.max_abs_diff(&oracle) < 1e-12);
            assert!(got.diagonal().iter().all(|&d| d >= 0.0));
            let zero = s.sketch_matrix(&DenseMatrix::zeros(200, 200)).unwrap();
            assert!(zero.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn countsketch_pi_has_one_signed_entry_per_column() {
        let s = &all_kinds(8, 40, 3)[0];
        let pi = dense_pi(s);
        for c in 0..40 {
            let col = pi.column(c);
            assert_eq!(col.iter().filter(|v| **v != 0.0).count(), 1);
            assert!(col.iter().all(|v| *v == 0.0 || v.abs() == 1.0));
        }
    }

    #[test]
    fn srht_at_full_power_of_two_is_orthonormal() {
        let s = Sketch::new(SketchSpec::new(SketchKind::Srht, 64, 64, 11).unwrap()).unwrap();
        let pi = dense_pi(&s);
        let g = pi.transpose().matmul(&pi).unwrap();
        assert!(g.max_abs_diff(&DenseMatrix::identity(64)) < 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).cos()).collect();
        for (a, b) in all_kinds(16, 100, 5).iter().zip(all_kinds(16, 100, 5).iter()) {
            assert_eq!(a.apply(&v).unwrap(), b.apply(&v).unwrap());
        }
    }

    #[test]
    fn fwht_matches_definition() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0];
        fwht(&mut v);
        assert_eq!(v, vec![10.0, -2.0, -4.0, 0.0]);
    }
}
