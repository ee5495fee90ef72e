//! `CHCV` solved curvature surrogates.
//!
//! ```text
//! magic "CHCV", version u32 = 1
//! fingerprint u64, alpha f64, lambda f64, min_eigen_lower_bound f64
//! dim u64, M: dim × dim f64 row-major
//! has_direction u8 (0 or 1), then direction: dim × f64 when 1
//! ```

use std::path::Path;

use super::bin::{put_f64, put_u64, put_u32, Flavor, LeReader};
use crate::curvature::CurvatureSurrogate;
use crate::numerics::DenseMatrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CHCV";
pub const VERSION: u32 = 1;

/// Largest surrogate dimension accepted from a file.
pub const MAX_SURROGATE_DIM: u64 = 1 << 14;

pub fn encode_surrogate(s: &CurvatureSurrogate) -> Result<Vec<u8>> {
    let dim = s.dim();
    if dim as u64 > MAX_SURROGATE_DIM {
        return Err(Error::format(format!("surrogate dim {dim} exceeds {MAX_SURROGATE_DIM}")));
    }
    let mut out = Vec::with_capacity(48 + 8 * dim * (dim + 1));
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION)?;
    put_u64(&mut out, s.fingerprint)?;
    put_f64(&mut out, s.alpha)?;
    put_f64(&mut out, s.lambda)?;
    put_f64(&mut out, s.min_eigen_lower_bound)?;
    put_u64(&mut out, dim as u64)?;
    for v in s.m.as_slice() {
        put_f64(&mut out, *v)?;
    }
    match &s.precond_dir {
        Some(d) => {
            out.push(1);
            for v in d {
                put_f64(&mut out, *v)?;
            }
        }
        None => out.push(0),
    }
    Ok(out)
}

pub fn decode_surrogate(bytes: &[u8]) -> Result<CurvatureSurrogate> {
    let mut r = LeReader::new(bytes, Flavor::Named("CHCV"));
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let fingerprint = r.u64("fingerprint")?;
    let at = r.offset();
    let alpha = r.finite_f64("alpha")?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(r.error_at(at, format!("alpha {alpha} outside [0, 1]")));
    }
    let at = r.offset();
    let lambda = r.finite_f64("lambda")?;
    if lambda <= 0.0 {
        return Err(r.error_at(at, format!("lambda {lambda} must be positive")));
    }
    let min_eigen_lower_bound = r.finite_f64("eigenvalue bound")?;
    let at = r.offset();
    let dim = r.u64("dim")?;
    if dim == 0 || dim > MAX_SURROGATE_DIM {
        return Err(r.error_at(at, format!("dim {dim} outside 1..={MAX_SURROGATE_DIM}")));
    }
    let dim = dim as usize;
    let m = DenseMatrix::from_vec(dim, dim, r.f64s(dim * dim, "M")?)?;
    if m.max_asymmetry() != 0.0 {
        return Err(r.error("M is not symmetric"));
    }
    let at = r.offset();
    let precond_dir = match r.u8("direction flag")? {
        0 => None,
        1 => Some(r.f64s(dim, "direction")?),
        f => return Err(r.error_at(at, format!("direction flag {f} must be 0 or 1"))),
    };
    r.expect_eof()?;
    Ok(CurvatureSurrogate {
        alpha,
        lambda,
        fingerprint,
        m,
        min_eigen_lower_bound,
        precond_dir,
        cg_report: None,
    })
}

pub fn save_surrogate(path: impl AsRef<Path>, s: &CurvatureSurrogate) -> Result<()> {
    std::fs::write(path, encode_surrogate(s)?)?;
    Ok(())
}

pub fn load_surrogate(path: impl AsRef<Path>) -> Result<CurvatureSurrogate> {
    decode_surrogate(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{build_surrogate, MomentAccumulator};
    use crate::numerics::{CgOptions, Rng};
    use crate::sketch::SketchedVector;

    fn solved() -> CurvatureSurrogate {
        let mut rng = Rng::new(1);
        let gs: Vec<SketchedVector> = (0..10).map(|_| SketchedVector { data: rng.normal_vec(5), fingerprint: 9 }).collect();
        let mut acc = MomentAccumulator::new(5, 9);
        acc.accumulate(&gs).unwrap();
        let mut s = build_surrogate(&acc, 0.6, Some(0.5)).unwrap();
        s.solve_direction(&gs[0], &CgOptions::default()).unwrap();
        s
    }

    #[test]
    fn round_trip() {
        let s = solved();
        let bytes = encode_surrogate(&s).unwrap();
        let back = decode_surrogate(&bytes).unwrap();
        assert_eq!(back.m, s.m);
        assert_eq!(back.precond_dir, s.precond_dir);
        assert_eq!((back.alpha, back.lambda, back.fingerprint), (s.alpha, s.lambda, s.fingerprint));
        assert_eq!(encode_surrogate(&back).unwrap(), bytes);
        assert_eq!(back.score(&SketchedVector { data: vec![1.0; 5], fingerprint: 9 }).unwrap(),
                   s.score(&SketchedVector { data: vec![1.0; 5], fingerprint: 9 }).unwrap());
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode_surrogate(&solved()).unwrap();
        assert!(decode_surrogate(&bytes[..bytes.len() - 1]).is_err());
        let mut asym = bytes.clone();
        asym[48 + 8] ^= 1;
        assert!(decode_surrogate(&asym).is_err());
        let mut flag = bytes.clone();
        flag[48 + 8 * 25] = 7;
        assert!(decode_surrogate(&flag).is_err());
        let mut dim = bytes;
        dim[40..48].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_surrogate(&dim).is_err());
    }
}
