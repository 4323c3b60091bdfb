//! Preconditioned conjugate gradients for the symmetric positive systems
//! arising on the staggered grid.

use nalgebra::DVector;

use crate::error::{FpiError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgSettings {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for CgSettings {
    fn default() -> Self {
        CgSettings {
            rel_tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Solves `A x = b` starting from the supplied `x`.
///
/// `precond` doubles as a projector: passing an orthogonal projection onto a
/// subspace keeps every iterate (and the residual it sees) inside that
/// subspace, which is how the constrained fluid solves are run.
pub fn pcg<A, P>(
    solver: &'static str,
    apply: A,
    precond: P,
    b: &DVector<f64>,
    x: &mut DVector<f64>,
    settings: CgSettings,
) -> Result<CgReport>
where
    A: Fn(&DVector<f64>) -> DVector<f64>,
    P: Fn(&DVector<f64>) -> DVector<f64>,
{
    let pb = precond(b);
    let bnorm = pb.dot(&pb).sqrt();
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(CgReport {
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let mut r = b - apply(x);
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut res = z.dot(&z).sqrt() / bnorm;
    if res <= settings.rel_tol {
        return Ok(CgReport {
            iterations: 0,
            rel_residual: res,
        });
    }
    for it in 1..=settings.max_iter {
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(FpiError::NonConvergence {
                solver,
                iterations: it,
                residual: res,
            });
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = precond(&r);
        res = z.dot(&z).sqrt() / bnorm;
        if res <= settings.rel_tol {
            return Ok(CgReport {
                iterations: it,
                rel_residual: res,
            });
        }
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p *= beta;
        p += &z;
    }
    Err(FpiError::NonConvergence {
        solver,
        iterations: settings.max_iter,
        residual: res,
    })
}

/// Conjugate gradients restricted to the range of the projector `project`.
///
/// The residual itself is re-projected every iteration, so components that
/// an inexact projector lets through do not accumulate.
pub fn projected_cg<A, P>(
    solver: &'static str,
    apply: A,
    project: P,
    b: &DVector<f64>,
    x: &mut DVector<f64>,
    settings: CgSettings,
) -> Result<CgReport>
where
    A: Fn(&DVector<f64>) -> DVector<f64>,
    P: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let pb = project(b)?;
    let bnorm = pb.norm();
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(CgReport {
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    *x = project(x)?;
    let mut r = project(&(b - apply(x)))?;
    let mut rr = r.dot(&r);
    let mut res = rr.sqrt() / bnorm;
    if res <= settings.rel_tol {
        return Ok(CgReport {
            iterations: 0,
            rel_residual: res,
        });
    }
    let mut p = r.clone();
    for it in 1..=settings.max_iter {
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(FpiError::NonConvergence {
                solver,
                iterations: it,
                residual: res,
            });
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p, 1.0);
        r = project(&(&r - &ap * alpha))?;
        let rr_new = r.dot(&r);
        res = rr_new.sqrt() / bnorm;
        if res <= settings.rel_tol {
            return Ok(CgReport {
                iterations: it,
                rel_residual: res,
            });
        }
        p *= rr_new / rr;
        p += &r;
        rr = rr_new;
    }
    Err(FpiError::NonConvergence {
        solver,
        iterations: settings.max_iter,
        residual: res,
    })
}
