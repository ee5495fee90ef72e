use super::DenseMatrix;
use crate::{Error, Result};

/// Largest dimension accepted by the dense eigen routines.
const MAX_EIGEN_DIM: usize = 2048;

/// Eigen-decomposition of a symmetric matrix: `A = V diag(values) Vᵀ`,
/// values ascending, eigenvectors in the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

/// Cyclic Jacobi rotations on the symmetric part of `a`.
pub fn symmetric_eigen(a: &DenseMatrix) -> Result<SymmetricEigen> {
    if !a.is_square() {
        return Err(Error::shape(format!("eigen of {}x{}", a.rows(), a.cols())));
    }
    let n = a.rows();
    if n > MAX_EIGEN_DIM {
        return Err(Error::shape(format!("eigen dim {n} exceeds {MAX_EIGEN_DIM}")));
    }
    if !a.is_finite() {
        return Err(Error::NumericalBreakdown("non-finite matrix entry".into()));
    }
    let mut m = a.symmetrized()?;
    let mut v = DenseMatrix::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymmetricEigen { values, vectors })
}

fn rotate(m: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Smallest eigenvalue of `(B + Bᵀ)/2`.
pub fn rayleigh_min_sym(b: &DenseMatrix) -> Result<f64> {
    if !b.is_square() {
        return Err(Error::shape(format!("rayleigh_min_sym of {}x{}", b.rows(), b.cols())));
    }
    if b.rows() > 512 {
        return Err(Error::shape(format!("rayleigh_min_sym dim {} exceeds 512", b.rows())));
    }
    if b.rows() == 0 {
        return Err(Error::shape("rayleigh_min_sym of empty matrix"));
    }
    Ok(symmetric_eigen(b)?.values[0])
}

/// `‖A‖₂`, the largest singular value, from the eigenvalues of `AᵀA`.
pub fn spectral_norm(a: &DenseMatrix) -> Result<f64> {
    let ata = a.transpose().matmul(a)?;
    let eig = symmetric_eigen(&ata)?;
    Ok(eig.values.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}

fn psd_power(a: &DenseMatrix, floor: f64, power: f64) -> Result<DenseMatrix> {
    let eig = symmetric_eigen(a)?;
    let n = a.rows();
    let mut out = DenseMatrix::zeros(n, n);
    for (j, &lam) in eig.values.iter().enumerate() {
        let w = lam.max(floor).powf(power);
        let col = eig.vectors.column(j);
        out.add_outer(w, &col, &col);
    }
    Ok(out)
}

/// Symmetric square root of a PSD matrix; eigenvalues below `floor` are raised to it.
pub fn psd_sqrt(a: &DenseMatrix, floor: f64) -> Result<DenseMatrix> {
    psd_power(a, floor, 0.5)
}

/// Symmetric inverse square root with the same eigenvalue floor.
pub fn psd_inv_sqrt(a: &DenseMatrix, floor: f64) -> Result<DenseMatrix> {
    psd_power(a, floor, -0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        assert_eq!(rayleigh_min_sym(&DenseMatrix::identity(4)).unwrap(), 1.0);
        assert_eq!(rayleigh_min_sym(&DenseMatrix::from_diag(&[3.0, -2.0])).unwrap(), -2.0);
    }

    #[test]
    fn non_square_rejected() {
        assert!(matches!(
            rayleigh_min_sym(&DenseMatrix::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn antisymmetric_part_is_ignored() {
        // sym([[1, 5], [-5, 1]]) = I
        let b = DenseMatrix::from_vec(2, 2, vec![1.0, 5.0, -5.0, 1.0]).unwrap();
        assert!((rayleigh_min_sym(&b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_and_sqrt() {
        let a = DenseMatrix::from_vec(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]).unwrap();
        let e = symmetric_eigen(&a).unwrap();
        let mut rec = DenseMatrix::zeros(3, 3);
        for j in 0..3 {
            let c = e.vectors.column(j);
            rec.add_outer(e.values[j], &c, &c);
        }
        assert!(rec.max_abs_diff(&a) < 1e-13);
        let s = psd_sqrt(&a, 1e-12).unwrap();
        assert!(s.matmul(&s).unwrap().max_abs_diff(&a) < 1e-13);
        let si = psd_inv_sqrt(&a, 1e-12).unwrap();
        assert!(si.matmul(&s).unwrap().max_abs_diff(&DenseMatrix::identity(3)) < 1e-13);
    }

    #[test]
    fn spectral_norm_of_rank_one() {
        let mut a = DenseMatrix::zeros(3, 2);
        a.add_outer(1.0, &[1.0, 2.0, 2.0], &[3.0, 4.0]);
        assert!((spectral_norm(&a).unwrap() - 15.0).abs() < 1e-12);
    }
}

/// Largest |eigenvalue| of a symmetric matrix by power iteration from a fixed start.
pub fn symmetric_power_norm(a: &DenseMatrix, iters: usize) -> f64 {
    let n = a.rows();
    if n == 0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * ((i * 7919) % 101) as f64).collect();
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        let nv = super::norm2(&v);
        if nv == 0.0 {
            return 0.0;
        }
        super::scale(1.0 / nv, &mut v);
        let w = a.matvec(&v);
        est = super::norm2(&w);
        v = w;
    }
    est
}
