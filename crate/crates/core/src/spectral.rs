//! Dense generator `𝒜` of the linear coupled system on free unknowns
//! `(c, u, u_t)`, with `v = Q c` in an orthonormal divergence-free basis and
//! the interface condition eliminated by substitution.
//!
//! ```text
//!      ⎡ ν/|c| QᵀK_ff Q    0       ν/|c| QᵀK_fp ⎤
//! 𝒜 =  ⎢      0            0           -I        ⎥
//!      ⎣ ν/|p| K_fpᵀ Q   K_p/|p|   ν/|p| K_pp    ⎦
//! ```
//!
//! where `|c|`, `|p|` are the fluid and plate quadrature weights. The Gram
//! matrix of `(·,·)_𝓗` is `diag(|c| I, K_p, |p| I)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FpiError, Result};
use crate::grid::Grid;
use crate::krylov::{pcg, CgSettings};
use crate::plate::apply_plate_operator;
use crate::state::{phase_norm, SystemState};
use crate::stokes::{conservative_trace, solve_stationary_stokes, DivergenceFreeBasis, StokesSettings};

/// Largest state dimension accepted for dense assembly.
pub const GENERATOR_CAP: usize = 5000;

#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub matrix: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    /// Lower Cholesky factor of `gram`.
    pub gram_factor: DMatrix<f64>,
    pub basis: DMatrix<f64>,
    fluid_dim: usize,
    plate_dim: usize,
}

impl GeneratorMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn fluid_dim(&self) -> usize {
        self.fluid_dim
    }

    pub fn plate_dim(&self) -> usize {
        self.plate_dim
    }

    pub fn to_coords(&self, s: &SystemState) -> DVector<f64> {
        let (m, np) = (self.fluid_dim, self.plate_dim);
        let mut x = DVector::zeros(m + 2 * np);
        x.rows_mut(0, m).copy_from(&self.basis.tr_mul(&s.v.values));
        x.rows_mut(m, np).copy_from(&s.plate.u);
        x.rows_mut(m + np, np).copy_from(&s.plate.ut);
        x
    }

    pub fn from_coords(&self, x: &DVector<f64>, t: f64) -> SystemState {
        let (m, np) = (self.fluid_dim, self.plate_dim);
        SystemState::new(
            &self.basis * x.rows(0, m),
            x.rows(m, np).into_owned(),
            x.rows(m + np, np).into_owned(),
            t,
        )
    }

    /// `(x, y)_𝓗` in coordinates.
    pub fn inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        x.dot(&(&self.gram * y))
    }

    /// Block `(i, j)` with `0 = fluid`, `1 = displacement`, `2 = velocity`.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let (m, np) = (self.fluid_dim, self.plate_dim);
        let range = |k: usize| match k {
            0 => (0, m),
            1 => (m, np),
            _ => (m + np, np),
        };
        let (r0, nr) = range(i);
        let (c0, nc) = range(j);
        self.matrix.view((r0, c0), (nr, nc)).into_owned()
    }

    /// `Lᵀ 𝒜 L⁻ᵀ`: the generator in 𝓗-orthonormal coordinates.
    pub fn symmetrized(&self) -> DMatrix<f64> {
        let l = &self.gram_factor;
        let lt_a = l.transpose() * &self.matrix;
        // right-multiply by L⁻ᵀ: solve X Lᵀ = lt_a  ⇔  L Xᵀ = lt_aᵀ
        let xt = l
            .solve_lower_triangular(&lt_a.transpose())
            .expect("Gram factor has a positive diagonal");
        xt.transpose()
    }
}

/// `𝒜 U` by direct operator application, in coordinates.
pub fn apply_generator(grid: &Grid, basis: &DMatrix<f64>, s: &SystemState) -> DVector<f64> {
    let ops = grid.ops();
    let ip = grid.products();
    let nu = grid.viscosity();
    let v = &s.v.values;
    let w = &s.plate.ut;
    let fluid = (ops.dissipation.mul_vec(v) + ops.coupling.mul_vec(w)) * (nu / ip.fluid_weight);
    let c = basis.tr_mul(&fluid);
    let plate = conservative_trace(grid, v, w) + apply_plate_operator(grid, &s.plate.u);
    let (m, np) = (c.len(), w.len());
    let mut out = DVector::zeros(m + 2 * np);
    out.rows_mut(0, m).copy_from(&c);
    out.rows_mut(m, np).copy_from(&(-w));
    out.rows_mut(m + np, np).copy_from(&plate);
    out
}

/// Assembles `𝒜` column by column from [`apply_generator`].
pub fn assemble_generator(grid: &Grid) -> Result<GeneratorMatrix> {
    let np = grid.n_plate();
    let expected = grid.n_fluid() + 1 - grid.n_cells() + 2 * np;
    if expected > GENERATOR_CAP {
        return Err(FpiError::DimensionGuard {
            dimension: expected,
            cap: GENERATOR_CAP,
        });
    }
    let basis = DivergenceFreeBasis::new(grid)?.q;
    let m = basis.ncols();
    let n = m + 2 * np;
    let columns: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut s = SystemState::zeros(grid);
            if j < m {
                s.v.values = basis.column(j).into_owned();
            } else if j < m + np {
                s.plate.u[j - m] = 1.0;
            } else {
                s.plate.ut[j - m - np] = 1.0;
            }
            apply_generator(grid, &basis, &s)
        })
        .collect();
    let matrix = DMatrix::from_columns(&columns);

    let ip = grid.products();
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..m {
        gram[(i, i)] = ip.fluid_weight;
    }
    gram.view_mut((m, m), (np, np))
        .copy_from(&grid.ops().plate_stiffness.to_dense());
    for i in 0..np {
        gram[(m + np + i, m + np + i)] = ip.plate_weight;
    }
    let gram_factor = gram
        .clone()
        .cholesky()
        .ok_or_else(|| FpiError::Singular("Gram matrix of the phase space".into()))?
        .unpack();
    Ok(GeneratorMatrix {
        matrix,
        gram,
        gram_factor,
        basis,
        fluid_dim: m,
        plate_dim: np,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AccretivityReport {
    pub samples: usize,
    /// `max |(𝒜U,U)_𝓗 - ν‖∇v‖²| / ‖U‖²_𝓗` over the samples.
    pub max_identity_error: f64,
    /// `min (𝒜U,U)_𝓗 / ‖U‖²_𝓗` over the samples.
    pub min_sampled: f64,
    /// Smallest eigenvalue of the symmetric part in 𝓗-orthonormal coordinates.
    pub min_symmetric_eigenvalue: f64,
    /// Coordinates of the worst sample when the quadratic form is negative.
    pub witness: Option<Vec<f64>>,
}

/// Samples `(𝒜U,U)_𝓗` on random states and checks it against
/// `ν‖∇v‖²_𝒪` evaluated edge by edge on the grid.
pub fn check_accretivity<R: Rng>(grid: &Grid, m: &GeneratorMatrix, samples: usize, rng: &mut R) -> AccretivityReport {
    let n = m.dim();
    let nu = grid.viscosity();
    let mut max_err: f64 = 0.0;
    let mut min_q = f64::INFINITY;
    let mut witness = None;
    for _ in 0..samples {
        let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let s = m.from_coords(&x, 0.0);
        let norm2 = m.inner(&x, &x);
        let q = m.inner(&(&m.matrix * &x), &x);
        let d = nu * grid.gradient_form(&s.v.values, &s.plate.ut);
        max_err = max_err.max((q - d).abs() / norm2);
        if q / norm2 < min_q {
            min_q = q / norm2;
            if q < -1e-10 * norm2 {
                witness = Some(x.iter().copied().collect());
            }
        }
    }
    let b = m.symmetrized();
    let sym = (&b + b.transpose()) * 0.5;
    let min_eig = sym.symmetric_eigenvalues().min();
    AccretivityReport {
        samples,
        max_identity_error: max_err,
        min_sampled: min_q,
        min_symmetric_eigenvalue: min_eig,
        witness,
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorSolve {
    pub state: SystemState,
    /// `‖𝒜U - F‖_𝓗 / ‖F‖_𝓗`.
    pub relative_residual: f64,
}

/// Solves `𝒜 U = F` by dense LU; `F.v` must be divergence free.
pub fn solve_generator(m: &GeneratorMatrix, f: &SystemState) -> Result<GeneratorSolve> {
    let b = m.to_coords(f);
    let lu = m.matrix.clone().lu();
    let x = lu
        .solve(&b)
        .ok_or_else(|| FpiError::Singular("generator matrix".into()))?;
    let r = &m.matrix * &x - &b;
    let fb = m.inner(&b, &b).sqrt();
    let relative_residual = if fb == 0.0 { m.inner(&r, &r).sqrt() } else { m.inner(&r, &r).sqrt() / fb };
    Ok(GeneratorSolve {
        state: m.from_coords(&x, f.t),
        relative_residual,
    })
}

/// The maximality construction: `u_t = -h₀`; `v` from the Stokes problem
/// with force `g` and data `u_t`; then `A u = h₁ - γ v`.
pub fn solve_generator_constructive(grid: &Grid, f: &SystemState, settings: StokesSettings) -> Result<SystemState> {
    f.check(grid)?;
    let w = -&f.plate.u;
    let v = solve_stationary_stokes(grid, &f.v.values, &w, settings)?.velocity.values;
    let rhs = (&f.plate.ut - conservative_trace(grid, &v, &w)) * grid.products().plate_weight;
    let k = &grid.ops().plate_stiffness;
    let diag = k.diagonal();
    let mut u = DVector::zeros(grid.n_plate());
    pcg("plate elasticity", |x| k.mul_vec(x), |r| r.component_div(&diag), &rhs, &mut u, settings.outer)?;
    Ok(SystemState::new(v, u, w, f.t))
}

/// 2-norm condition number of `𝒜` in 𝓗-orthonormal coordinates.
pub fn condition_number(m: &GeneratorMatrix) -> f64 {
    let sv = m.symmetrized().singular_values();
    sv.max() / sv.min()
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    /// Eigenvalues `(re, im)` of `-𝒜`, sorted by real part, descending.
    pub eigenvalues: Vec<(f64, f64)>,
    pub abscissa: f64,
}

/// Eigenvalues of `-𝒜` and their largest real part.
pub fn spectral_abscissa(m: &GeneratorMatrix) -> Result<SpectrumReport> {
    let b = -m.symmetrized();
    let schur = b
        .try_schur(1e-14, 100_000)
        .ok_or_else(|| FpiError::Eigen("real Schur iteration did not converge".into()))?;
    let mut eigenvalues: Vec<(f64, f64)> = schur.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect();
    eigenvalues.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let abscissa = eigenvalues.first().map(|e| e.0).unwrap_or(f64::NEG_INFINITY);
    Ok(SpectrumReport { eigenvalues, abscissa })
}

/// `‖e^{-t𝒜}‖` in the 𝓗 norm.
pub fn contractivity(m: &GeneratorMatrix, t: f64) -> f64 {
    let e = (m.symmetrized() * (-t)).exp();
    e.singular_values().max()
}

/// `e^{-t𝒜} U₀`.
pub fn propagate(m: &GeneratorMatrix, u0: &SystemState, t: f64) -> SystemState {
    let e = (&m.matrix * (-t)).exp();
    m.from_coords(&(e * m.to_coords(u0)), u0.t + t)
}

/// `‖U‖_𝓗` of a coordinate vector, checked against the grid route.
pub fn coords_norm(grid: &Grid, m: &GeneratorMatrix, x: &DVector<f64>) -> f64 {
    phase_norm(grid, &m.from_coords(x, 0.0))
}

/// Spectrum as CSV `re,im`, already in descending order of real part.
pub fn spectrum_csv(report: &SpectrumReport) -> String {
    let mut out = String::from("re,im\n");
    for (re, im) in &report.eigenvalues {
        out.push_str(&format!("{re:.12e},{im:.12e}\n"));
    }
    out
}

/// Default settings for the constructive route.
pub fn constructive_settings() -> StokesSettings {
    StokesSettings {
        poisson: CgSettings {
            rel_tol: 1e-13,
            max_iter: 20_000,
        },
        outer: CgSettings {
            rel_tol: 1e-12,
            max_iter: 20_000,
        },
    }
}
