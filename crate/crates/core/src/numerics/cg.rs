use super::{axpy, dot, norm2, LinearOperator};
use crate::{Error, Result};

/// Stopping rule and preconditioning for [`cg_solve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Iteration cap; the scoring default is 5.
    pub max_iters: usize,
    /// Absolute tolerance on `‖A x − b‖₂`.
    pub tol: f64,
    /// Diagonal (Jacobi) preconditioning.
    pub jacobi: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            max_iters: 5,
            tol: 1e-10,
            jacobi: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
    /// `‖r_t‖₂` for t = 0..=iterations (recursive residual).
    pub residual_history: Vec<f64>,
}

/// Conjugate gradients for a symmetric positive-definite operator, starting at
/// `x = 0`. Stops when the residual norm drops to `tol` or after `max_iters`.
pub fn cg_solve<A>(a: &A, b: &[f64], opts: &CgOptions) -> Result<(Vec<f64>, CgReport)>
where
    A: LinearOperator + ?Sized,
{
    let n = a.dim();
    if b.len() != n {
        return Err(Error::shape(format!("cg: operator dim {n}, rhs dim {}", b.len())));
    }
    if opts.max_iters == 0 || !(opts.tol > 0.0) {
        return Err(Error::config("cg needs max_iters >= 1 and tol > 0"));
    }
    if !super::all_finite(b) {
        return Err(Error::NumericalBreakdown("non-finite right-hand side".into()));
    }

    let inv_diag = if opts.jacobi {
        let d = a
            .diagonal()
            .ok_or_else(|| Error::config("jacobi preconditioning needs an operator diagonal"))?;
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NumericalBreakdown("non-positive diagonal under jacobi".into()));
        }
        Some(d.iter().map(|v| 1.0 / v).collect::<Vec<_>>())
    } else {
        None
    };
    let precondition = |r: &[f64]| -> Vec<f64> {
        match &inv_diag {
            Some(inv) => r.iter().zip(inv).map(|(ri, di)| ri * di).collect(),
            None => r.to_vec(),
        }
    };

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut rnorm = norm2(&r);
    let mut history = vec![rnorm];
    if rnorm <= opts.tol {
        return Ok((
            x,
            CgReport {
                iterations: 0,
                residual_norm: rnorm,
                converged: true,
                residual_history: history,
            },
        ));
    }

    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..opts.max_iters {
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || !rz.is_finite() {
            return Err(Error::NumericalBreakdown(format!(
                "non-finite value at iteration {iterations}"
            )));
        }
        if pap <= 0.0 {
            return Err(Error::NumericalBreakdown(format!(
                "non-positive curvature pᵀAp = {pap:e} at iteration {iterations}"
            )));
        }
        let step = rz / pap;
        axpy(step, &p, &mut x);
        axpy(-step, &ap, &mut r);
        iterations += 1;
        rnorm = norm2(&r);
        history.push(rnorm);
        if !rnorm.is_finite() {
            return Err(Error::NumericalBreakdown("non-finite residual".into()));
        }
        if rnorm <= opts.tol {
            converged = true;
            break;
        }
        z = precondition(&r);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }

    Ok((
        x,
        CgReport {
            iterations,
            residual_norm: rnorm,
            converged,
            residual_history: history,
        },
    ))
}
