//! Fluid-side operators on the staggered grid: Leray projection, the Stokes
//! operator, the stationary Stokes solver with plate boundary data, the
//! extension `N₀` and the shear traces on Ω.

use nalgebra::{DMatrix, DVector};

use crate::error::{FpiError, Result};
use crate::grid::Grid;
use crate::krylov::{pcg, projected_cg, CgReport, CgSettings};

/// Velocity degrees of freedom on the stored faces of the MAC layout.
///
/// Tangential values on Ω are not stored here; they belong to the plate
/// velocity of the same state.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub values: DVector<f64>,
}

impl VelocityField {
    pub fn zeros(grid: &Grid) -> Self {
        VelocityField {
            values: DVector::zeros(grid.n_fluid()),
        }
    }

    pub fn from_values(values: DVector<f64>) -> Self {
        VelocityField { values }
    }

    /// Largest cellwise divergence.
    pub fn max_divergence(&self, grid: &Grid) -> f64 {
        grid.ops().divergence.mul_vec(&self.values).amax()
    }
}

/// Cell-centred pressure with zero mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureField {
    pub values: DVector<f64>,
}

impl PressureField {
    fn gauged(mut values: DVector<f64>) -> Self {
        let mean = values.mean();
        values.add_scalar_mut(-mean);
        PressureField { values }
    }

    pub fn mean(&self) -> f64 {
        self.values.mean()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct StokesSettings {
    /// Pressure Poisson solves inside the Leray projector.
    pub poisson: CgSettings,
    /// Outer projected-CG iteration for Stokes solves.
    pub outer: CgSettings,
}


impl StokesSettings {
    /// Settings used when a projection is nested inside another iteration;
    /// the inner solve has to be much tighter than the outer one.
    fn nested(&self) -> CgSettings {
        CgSettings {
            rel_tol: (self.outer.rel_tol * 1e-3).max(1e-14),
            max_iter: self.poisson.max_iter,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub field: VelocityField,
    /// Potential `q` with `w = P_L w - Bᵀ q`.
    pub potential: PressureField,
    pub report: CgReport,
}

fn solve_poisson(grid: &Grid, rhs: &DVector<f64>, settings: CgSettings) -> Result<(DVector<f64>, CgReport)> {
    let l = &grid.ops().poisson;
    let diag = l.diagonal();
    let mut b = rhs.clone();
    let mean = b.mean();
    b.add_scalar_mut(-mean);
    let mut q = DVector::zeros(b.len());
    let report = pcg(
        "pressure Poisson",
        |x| l.mul_vec(x),
        |r| r.component_div(&diag),
        &b,
        &mut q,
        settings,
    )?;
    Ok((q, report))
}

/// Orthogonal projection onto discretely divergence-free fields.
pub fn leray_project(grid: &Grid, w: &DVector<f64>, settings: CgSettings) -> Result<Projection> {
    grid.check_fluid(w, "leray_project")?;
    let ops = grid.ops();
    let div = ops.divergence.mul_vec(w);
    let (q, report) = solve_poisson(grid, &div, settings)?;
    let field = w - ops.divergence.tr_mul_vec(&q);
    Ok(Projection {
        field: VelocityField::from_values(field),
        potential: PressureField::gauged(q),
        report,
    })
}

/// Discrete Laplacian `Δ_h v` with tangential data `boundary` on Ω and
/// homogeneous data on the walls.
pub fn laplacian(grid: &Grid, v: &DVector<f64>, boundary: &DVector<f64>) -> DVector<f64> {
    let ops = grid.ops();
    let mut lap = ops.dissipation.mul_vec(v) + ops.coupling.mul_vec(boundary);
    lap /= -grid.products().fluid_weight;
    lap
}

/// `A₀ v = -ν P_L Δ_h v` for `v` vanishing on the whole boundary.
pub fn apply_stokes_operator(grid: &Grid, v: &VelocityField, settings: CgSettings) -> Result<VelocityField> {
    grid.check_fluid(&v.values, "apply_stokes_operator")?;
    let zero = DVector::zeros(grid.n_plate());
    let lap = laplacian(grid, &v.values, &zero) * (-grid.viscosity());
    Ok(leray_project(grid, &lap, settings)?.field)
}

/// Shear trace `γ_Ω v = ν ∂v_tan/∂n` on Ω by the one-sided three-point
/// stencil through the boundary value and the two nodes below it.
///
/// `boundary` holds the tangential values on Ω. The pressure does not enter
/// the tangential traction because the normal velocity vanishes on Ω.
pub fn trace_gamma(grid: &Grid, v: &DVector<f64>, boundary: &DVector<f64>) -> DVector<f64> {
    let d = grid.dimensions();
    let fluid = grid.fluid();
    let plate = grid.plate();
    let h = fluid.spacing()[d - 1];
    let top = fluid.cells()[d - 1] as isize - 1;
    let nu = grid.viscosity();
    DVector::from_fn(plate.len(), |p, _| {
        let (c, pidx) = plate.face(p);
        let mut idx = pidx.clone();
        idx.push(top);
        let f1 = v[fluid.index(c, &idx).expect("top node")];
        idx[d - 1] = top - 1;
        let f2 = v[fluid.index(c, &idx).expect("second node")];
        nu * (8.0 / 3.0 * boundary[p] - 3.0 * f1 + f2 / 3.0) / h
    })
}

/// Variational shear trace: the plate force that makes the discrete energy
/// balance exact, `(γ v, u)_Ω = ν (∇v, ∇E u)_𝒪` for any extension `E u`.
pub fn conservative_trace(grid: &Grid, v: &DVector<f64>, boundary: &DVector<f64>) -> DVector<f64> {
    let ops = grid.ops();
    let mut t = ops.coupling.tr_mul_vec(v) + ops.interface_diag.component_mul(boundary);
    t *= grid.viscosity() / grid.products().plate_weight;
    t
}

#[derive(Debug, Clone)]
pub struct StokesSolution {
    pub velocity: VelocityField,
    pub pressure: PressureField,
    pub report: CgReport,
}

/// Residuals of a computed Stokes solution, in discrete L².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StokesResiduals {
    pub momentum: f64,
    pub divergence: f64,
}

/// Solves `-νΔv + ∇p = g`, `div v = 0`, `v = 0` on S, `v = (ψ;0)` on Ω.
///
/// Projected conjugate gradients on the divergence-free subspace, with the
/// Leray projector as constraint preconditioner; the pressure is recovered
/// from the converged momentum residual.
pub fn solve_stationary_stokes(
    grid: &Grid,
    g: &DVector<f64>,
    psi: &DVector<f64>,
    settings: StokesSettings,
) -> Result<StokesSolution> {
    grid.check_fluid(g, "solve_stationary_stokes: force")?;
    grid.check_plate(psi, "solve_stationary_stokes: boundary data")?;
    let ops = grid.ops();
    let nu = grid.viscosity();
    let vol = grid.products().fluid_weight;
    let inner = settings.nested();

    let rhs = g * vol - ops.coupling.mul_vec(psi) * nu;
    let project = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let (q, _) = solve_poisson(grid, &ops.divergence.mul_vec(x), inner)?;
        Ok(x - ops.divergence.tr_mul_vec(&q))
    };
    let mut v = DVector::zeros(grid.n_fluid());
    let report = projected_cg(
        "stationary Stokes",
        |x| ops.dissipation.mul_vec(x) * nu,
        project,
        &rhs,
        &mut v,
        settings.outer,
    )?;
    // clean the remaining divergence left by the outer tolerance
    let v = project(&v)?;
    let r = &rhs - ops.dissipation.mul_vec(&v) * nu;
    let (p, _) = solve_poisson(grid, &(ops.divergence.mul_vec(&r) * (-1.0 / vol)), inner)?;
    Ok(StokesSolution {
        velocity: VelocityField::from_values(v),
        pressure: PressureField::gauged(p),
        report,
    })
}

/// Residuals of the momentum and continuity equations for `(v, p)`.
pub fn stokes_residuals(
    grid: &Grid,
    g: &DVector<f64>,
    psi: &DVector<f64>,
    sol: &StokesSolution,
) -> StokesResiduals {
    let ops = grid.ops();
    let ip = grid.products();
    let v = &sol.velocity.values;
    let momentum = laplacian(grid, v, psi) * (-grid.viscosity())
        - ops.divergence.tr_mul_vec(&sol.pressure.values)
        - g;
    let div = ops.divergence.mul_vec(v);
    StokesResiduals {
        momentum: ip.fluid(&momentum, &momentum).sqrt(),
        divergence: (ip.fluid_weight * div.dot(&div)).sqrt(),
    }
}

/// `N₀ ψ`: the velocity of the Stokes problem with zero force and data ψ.
pub fn harmonic_extension(grid: &Grid, psi: &DVector<f64>, settings: StokesSettings) -> Result<VelocityField> {
    let g = DVector::zeros(grid.n_fluid());
    Ok(solve_stationary_stokes(grid, &g, psi, settings)?.velocity)
}

/// Dense matrix of `N₀`, one Stokes solve per plate degree of freedom.
pub fn extension_matrix(grid: &Grid, settings: StokesSettings) -> Result<DMatrix<f64>> {
    let n = grid.n_plate();
    let mut m = DMatrix::zeros(grid.n_fluid(), n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        m.set_column(j, &harmonic_extension(grid, &e, settings)?.values);
    }
    Ok(m)
}

/// Terms of the discrete Green formula
/// `ν(Δv, N₀u)_𝒪 = -ν(∇v, ∇N₀u)_𝒪 + (γ_Ω v, u)_Ω`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreensCheck {
    pub laplacian_term: f64,
    pub gradient_term: f64,
    pub trace_term: f64,
    /// `|ν(Δv,N₀u) + ν(∇v,∇N₀u) - (γv,u)|` with the three-point trace.
    pub residual: f64,
    /// The same residual with the variational trace.
    pub conservative_residual: f64,
}

/// Evaluates the Green identity for an admissible `v` (tangential data
/// `boundary` on Ω) and a clamped plate field `u`.
pub fn greens_identity_check(
    grid: &Grid,
    v: &DVector<f64>,
    boundary: &DVector<f64>,
    u: &DVector<f64>,
    settings: StokesSettings,
) -> Result<GreensCheck> {
    grid.check_fluid(v, "greens_identity_check")?;
    grid.check_plate(u, "greens_identity_check")?;
    let nu = grid.viscosity();
    let ip = grid.products();
    let ext = harmonic_extension(grid, u, settings)?.values;
    let laplacian_term = nu * ip.fluid(&laplacian(grid, v, boundary), &ext);
    let gradient_term = nu * grid.gradient_pairing(v, boundary, &ext, u);
    let trace_term = ip.plate(&trace_gamma(grid, v, boundary), u);
    let conservative = ip.plate(&conservative_trace(grid, v, boundary), u);
    Ok(GreensCheck {
        laplacian_term,
        gradient_term,
        trace_term,
        residual: (laplacian_term + gradient_term - trace_term).abs(),
        conservative_residual: (laplacian_term + gradient_term - conservative).abs(),
    })
}

/// Orthonormal basis (Euclidean, hence also for `(·,·)_𝒪`) of the
/// discretely divergence-free fields.
#[derive(Debug, Clone)]
pub struct DivergenceFreeBasis {
    pub q: DMatrix<f64>,
}

impl DivergenceFreeBasis {
    /// Stream-function construction in 2D, null space of `BᵀB` in 3D.
    pub fn new(grid: &Grid) -> Result<Self> {
        let expected = grid.n_fluid() + 1 - grid.n_cells();
        let q = if grid.dimensions() == 2 {
            stream_function_basis(grid)
        } else {
            let b = grid.ops().divergence.to_dense();
            let btb = b.transpose() * b;
            let eig = btb.symmetric_eigen();
            let scale = eig.eigenvalues.amax();
            let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
            order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
            let kernel: Vec<usize> = order
                .into_iter()
                .filter(|&i| eig.eigenvalues[i] < 1e-10 * scale)
                .collect();
            let cols: Vec<_> = kernel.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
            DMatrix::from_columns(&cols)
        };
        if q.ncols() != expected {
            return Err(FpiError::Eigen(format!(
                "divergence-free basis has {} columns, expected {expected}",
                q.ncols()
            )));
        }
        Ok(DivergenceFreeBasis { q })
    }

    pub fn dim(&self) -> usize {
        self.q.ncols()
    }

    pub fn coordinates(&self, v: &DVector<f64>) -> DVector<f64> {
        self.q.tr_mul(v)
    }

    pub fn field(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.q * c
    }
}

fn stream_function_basis(grid: &Grid) -> DMatrix<f64> {
    let fluid = grid.fluid();
    let (nx, ny) = (fluid.cells()[0], fluid.cells()[1]);
    let (hx, hy) = (fluid.spacing()[0], fluid.spacing()[1]);
    let corners = (nx - 1) * (ny - 1);
    let mut c = DMatrix::zeros(grid.n_fluid(), corners);
    // ψ at interior corner (i, j), i in 1..nx, j in 1..ny
    for i in 1..nx {
        for j in 1..ny {
            let col = (i - 1) * (ny - 1) + (j - 1);
            let (ii, jj) = (i as isize, j as isize);
            // u = ∂ψ/∂y on the x-faces above and below the corner
            if let Some(k) = fluid.index(0, &[ii, jj - 1]) {
                c[(k, col)] += 1.0 / hy;
            }
            if let Some(k) = fluid.index(0, &[ii, jj]) {
                c[(k, col)] -= 1.0 / hy;
            }
            // v = -∂ψ/∂x on the y-faces left and right of the corner
            if let Some(k) = fluid.index(1, &[ii - 1, jj]) {
                c[(k, col)] -= 1.0 / hx;
            }
            if let Some(k) = fluid.index(1, &[ii, jj]) {
                c[(k, col)] += 1.0 / hx;
            }
        }
    }
    c.qr().q()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Dense orthogonal projector onto ker B from the SVD of Bᵀ.
    fn dense_null_projector(grid: &Grid) -> DMatrix<f64> {
        let bt = grid.ops().divergence.to_dense().transpose();
        let svd = bt.svd(true, false);
        let u = svd.u.unwrap();
        let smax = svd.singular_values.amax();
        let n = grid.n_fluid();
        let mut p = DMatrix::identity(n, n);
        for (k, s) in svd.singular_values.iter().enumerate() {
            if *s > 1e-10 * smax {
                let col = u.column(k);
                p -= col * col.transpose();
            }
        }
        p
    }

    #[test]
    fn projection_of_gradient_vanishes() {
        let g = build_grid(&GridSpec::uniform(2, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(g.n_cells(), &mut rng);
        let grad = g.ops().divergence.tr_mul_vec(&q);
        let p = leray_project(&g, &grad, CgSettings::default()).unwrap();
        assert!(p.field.values.amax() < 1e-9 * grad.amax());
    }

    #[test]
    fn projection_is_idempotent_and_orthogonal() {
        let g = build_grid(&GridSpec::uniform(2, 10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tol = CgSettings::default().rel_tol;
        for _ in 0..5 {
            let w = random(g.n_fluid(), &mut rng);
            let pw = leray_project(&g, &w, CgSettings::default()).unwrap().field.values;
            let ppw = leray_project(&g, &pw, CgSettings::default()).unwrap().field.values;
            let ip = g.products();
            assert!(ip.fluid(&(&ppw - &pw), &(&ppw - &pw)).sqrt() <= 10.0 * tol * ip.fluid(&w, &w).sqrt());
            let q = random(g.n_cells(), &mut rng);
            let grad = g.ops().divergence.tr_mul_vec(&q);
            let dot = ip.fluid(&pw, &grad).abs();
            let scale = ip.fluid(&pw, &pw).sqrt() * ip.fluid(&grad, &grad).sqrt();
            assert!(dot <= 10.0 * tol * scale, "orthogonality {dot} vs {scale}");
            assert!(VelocityField::from_values(pw).max_divergence(&g) < 1e-8);
        }
    }

    #[test]
    fn projection_matches_dense_null_space_oracle() {
        let g = build_grid(&GridSpec::uniform(2, 6)).unwrap();
        let p = dense_null_projector(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let w = random(g.n_fluid(), &mut rng);
            let got = leray_project(&g, &w, CgSettings::default()).unwrap().field.values;
            assert!((&got - &p * &w).amax() < 1e-8);
        }
    }

    #[test]
    fn basis_spans_the_null_space() {
        for spec in [GridSpec::uniform(2, 6), GridSpec::uniform(3, 4)] {
            let g = build_grid(&spec).unwrap();
            let basis = DivergenceFreeBasis::new(&g).unwrap();
            let q = &basis.q;
            let gram = q.transpose() * q;
            assert!((gram - DMatrix::identity(basis.dim(), basis.dim())).amax() < 1e-12);
            let bq = g.ops().divergence.mul_dense(q);
            assert!(bq.amax() < 1e-10);
            let p = dense_null_projector(&g);
            assert!((q * q.transpose() - p).amax() < 1e-9);
        }
    }

    #[test]
    fn stokes_operator_is_symmetric_and_positive() {
        let g = build_grid(&GridSpec::uniform(2, 4)).unwrap();
        let basis = DivergenceFreeBasis::new(&g).unwrap();
        let n = basis.dim();
        let settings = CgSettings { rel_tol: 1e-13, max_iter: 10_000 };
        let mut a = DMatrix::zeros(n, n);
        for j in 0..n {
            let v = VelocityField::from_values(basis.q.column(j).into_owned());
            let av = apply_stokes_operator(&g, &v, settings).unwrap();
            a.set_column(j, &basis.coordinates(&av.values));
        }
        assert!((&a - a.transpose()).amax() <= 1e-10 * a.amax());
        let eig = a.symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
        assert!(apply_stokes_operator(&g, &VelocityField::zeros(&g), settings).unwrap().values.amax() == 0.0);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let g = build_grid(&GridSpec::uniform(2, 6)).unwrap();
        let sol = solve_stationary_stokes(
            &g,
            &DVector::zeros(g.n_fluid()),
            &DVector::zeros(g.n_plate()),
            StokesSettings::default(),
        )
        .unwrap();
        assert_eq!(sol.velocity.values.amax(), 0.0);
        assert_eq!(sol.pressure.values.amax(), 0.0);
    }

    /// Dense saddle-point system bordered by the zero-mean pressure gauge.
    fn dense_stokes(grid: &Grid, g: &DVector<f64>, psi: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let nf = grid.n_fluid();
        let nc = grid.n_cells();
        let nu = grid.viscosity();
        let vol = grid.products().fluid_weight;
        let k = grid.ops().dissipation.to_dense() * (nu / vol);
        let b = grid.ops().divergence.to_dense();
        let n = nf + nc + 1;
        let mut m = DMatrix::zeros(n, n);
        m.view_mut((0, 0), (nf, nf)).copy_from(&k);
        m.view_mut((0, nf), (nf, nc)).copy_from(&(-b.transpose()));
        m.view_mut((nf, 0), (nc, nf)).copy_from(&b);
        for c in 0..nc {
            m[(nf + c, nf + nc)] = 1.0;
            m[(nf + nc, nf + c)] = 1.0;
        }
        let mut rhs = DVector::zeros(n);
        let f = g - grid.ops().coupling.mul_vec(psi) * (nu / vol);
        rhs.rows_mut(0, nf).copy_from(&f);
        let x = m.lu().solve(&rhs).unwrap();
        (x.rows(0, nf).into_owned(), x.rows(nf, nc).into_owned())
    }

    #[test]
    fn stokes_matches_dense_lu() {
        let g = build_grid(&GridSpec::uniform(2, 6)).unwrap();
        let psi = g.plate().sample(|_, x| (std::f64::consts::PI * x[0]).sin());
        let zero = DVector::zeros(g.n_fluid());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let force = random(g.n_fluid(), &mut rng);
        for force in [zero, force] {
            let sol = solve_stationary_stokes(&g, &force, &psi, StokesSettings::default()).unwrap();
            let (v, p) = dense_stokes(&g, &force, &psi);
            assert!((&sol.velocity.values - v).amax() < 1e-8);
            assert!((&sol.pressure.values - p).amax() < 1e-8);
            let res = stokes_residuals(&g, &force, &psi, &sol);
            assert!(res.momentum < 1e-8 && res.divergence < 1e-8, "{res:?}");
            assert!(sol.pressure.mean().abs() < 1e-14);
        }
    }

    #[test]
    fn extension_is_linear() {
        let g = build_grid(&GridSpec::uniform(2, 6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = StokesSettings::default();
        let (a, b) = (1.7, -0.3);
        let p1 = random(g.n_plate(), &mut rng);
        let p2 = random(g.n_plate(), &mut rng);
        let lhs = harmonic_extension(&g, &(&p1 * a + &p2 * b), s).unwrap().values;
        let rhs = harmonic_extension(&g, &p1, s).unwrap().values * a + harmonic_extension(&g, &p2, s).unwrap().values * b;
        assert!((lhs - rhs).amax() < 1e-8);
        assert_eq!(harmonic_extension(&g, &DVector::zeros(g.n_plate()), s).unwrap().values.amax(), 0.0);
    }

    #[test]
    fn extension_norm_power_iteration_matches_svd() {
        let g = build_grid(&GridSpec::uniform(2, 6)).unwrap();
        let s = StokesSettings::default();
        let n0 = extension_matrix(&g, s).unwrap();
        let ip = g.products();
        // operator norm from L²(Ω) to L²(𝒪): scale by the quadrature weights
        let weighted = &n0 * (ip.fluid_weight / ip.plate_weight).sqrt();
        let svd_norm = weighted.svd(false, false).singular_values.amax();
        let mut x = DVector::from_element(g.n_plate(), 1.0);
        let mut est = 0.0;
        for _ in 0..200 {
            let y = harmonic_extension(&g, &x, s).unwrap().values;
            // adjoint in the weighted products: N₀* = (w_f / w_p) N₀ᵀ
            let z = n0.tr_mul(&y) * (ip.fluid_weight / ip.plate_weight);
            est = (ip.fluid(&y, &y) / ip.plate(&x, &x)).sqrt();
            x = &z / z.norm();
        }
        assert!((est - svd_norm).abs() < 1e-8 * svd_norm, "{est} vs {svd_norm}");
    }

    #[test]
    fn trace_exact_on_linear_and_quadratic_profiles() {
        for spec in [GridSpec::uniform(2, 6), GridSpec::uniform(3, 4)] {
            let g = build_grid(&spec).unwrap();
            let d = spec.dimensions;
            let nu = g.viscosity();
            // v¹ = x_d (linear), other components zero
            let v = g.fluid().sample(|c, x| if c == 0 { x[d - 1] } else { 0.0 });
            let boundary = DVector::zeros(g.n_plate());
            let t = trace_gamma(&g, &v, &boundary);
            for p in 0..g.n_plate() {
                let (c, _) = g.plate().face(p);
                let expect = if c == 0 { nu } else { 0.0 };
                assert!((t[p] - expect).abs() < 1e-12);
            }
            let v2 = g.fluid().sample(|c, x| if c == 0 { x[d - 1] * x[d - 1] } else { 0.0 });
            assert!(trace_gamma(&g, &v2, &boundary).amax() < 1e-12);
            assert_eq!(trace_gamma(&g, &DVector::zeros(g.n_fluid()), &boundary).amax(), 0.0);
        }
    }

    #[test]
    fn trace_converges_at_second_order_on_cubic_profile() {
        // v¹ = sin(x) (x_d + x_d³) → ∂/∂x_d at 0 equals sin(x)
        let err = |n: usize| {
            let g = build_grid(&GridSpec::uniform(2, n)).unwrap();
            let v = g.fluid().sample(|c, x| if c == 0 { x[0].sin() * (x[1] + x[1].powi(3)) } else { 0.0 });
            let t = trace_gamma(&g, &v, &DVector::zeros(g.n_plate()));
            let exact = g.plate().sample(|_, x| x[0].sin());
            (t - exact).amax()
        };
        let order = (err(16) / err(32)).log2();
        assert!(order > 1.8, "observed order {order}");
    }

    #[test]
    fn greens_identity_exact_with_variational_trace() {
        let g = build_grid(&GridSpec::uniform(2, 6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = StokesSettings::default();
        let v = random(g.n_fluid(), &mut rng);
        let b = random(g.n_plate(), &mut rng);
        let u = random(g.n_plate(), &mut rng);
        let chk = greens_identity_check(&g, &v, &b, &u, s).unwrap();
        let scale = chk.laplacian_term.abs() + chk.gradient_term.abs();
        assert!(chk.conservative_residual <= 1e-8 * scale);
        let zero = greens_identity_check(&g, &DVector::zeros(g.n_fluid()), &DVector::zeros(g.n_plate()), &u, s).unwrap();
        assert_eq!(zero.residual, 0.0);
        let no_plate = greens_identity_check(&g, &v, &b, &DVector::zeros(g.n_plate()), s).unwrap();
        assert!((no_plate.laplacian_term + no_plate.gradient_term).abs() < 1e-12);
    }
}
