//! In-plane plate: elasticity operator `A`, its form `a(·,·)`, the
//! nonlinear potential force and plate energies.
//!
//! The plate unknowns share the staggered layout of the tangential fluid
//! faces on Ω: component `i` of `u` sits where fluid component `i` touches
//! the top face. Clamping is built into the layout (boundary nodes are not
//! stored).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FpiError, Result};
use crate::grid::Grid;

/// Displacement `u` and velocity `u_t` at the plate nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateState {
    pub u: DVector<f64>,
    pub ut: DVector<f64>,
}

impl PlateState {
    pub fn zeros(grid: &Grid) -> Self {
        PlateState {
            u: DVector::zeros(grid.n_plate()),
            ut: DVector::zeros(grid.n_plate()),
        }
    }
}

/// Built-in feedback potentials `Φ(u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    Zero,
    /// `Φ(u) = κ |u|⁴`.
    QuarticIsotropic { kappa: f64 },
    /// `Φ(u) = Σ ψ_i(u^i)`; `polynomials[i]` holds ascending coefficients of
    /// `ψ_i`. A single polynomial is shared by every component.
    Separable { polynomials: Vec<Vec<f64>> },
}

impl Default for PotentialSpec {
    fn default() -> Self {
        PotentialSpec::QuarticIsotropic { kappa: 1.0 }
    }
}

fn poly_eval(c: &[f64], s: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * s + a)
}

fn poly_deriv(c: &[f64]) -> Vec<f64> {
    c.iter().enumerate().skip(1).map(|(k, &a)| k as f64 * a).collect()
}

fn poly_degree(c: &[f64]) -> Option<usize> {
    c.iter().rposition(|&a| a != 0.0)
}

/// Global minimum of a polynomial of even degree with positive leading
/// coefficient, located by sampling inside the Cauchy bound of its critical
/// points and refining by golden-section search.
fn poly_min(c: &[f64]) -> (f64, f64) {
    let dc = poly_deriv(c);
    let bound = match poly_degree(&dc) {
        None => 1.0,
        Some(n) => 1.0 + dc[..n].iter().map(|a| (a / dc[n]).abs()).fold(0.0, f64::max),
    };
    let samples = 20_000;
    let step = 2.0 * bound / samples as f64;
    let (mut best_s, mut best) = (0.0, poly_eval(c, 0.0));
    for k in 0..=samples {
        let s = -bound + k as f64 * step;
        let val = poly_eval(c, s);
        if val < best {
            best = val;
            best_s = s;
        }
    }
    let (mut a, mut b) = (best_s - step, best_s + step);
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let x1 = b - gr * (b - a);
        let x2 = a + gr * (b - a);
        if poly_eval(c, x1) < poly_eval(c, x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let s = 0.5 * (a + b);
    let val = poly_eval(c, s);
    if val < best {
        (s, val)
    } else {
        (best_s, best)
    }
}

impl PotentialSpec {
    fn separable_poly(polys: &[Vec<f64>], i: usize) -> &[f64] {
        if polys.len() == 1 {
            &polys[0]
        } else {
            &polys[i]
        }
    }

    /// Checks the built-in family constraints for a plate with `ncomp`
    /// displacement components.
    pub fn validate(&self, ncomp: usize) -> Result<()> {
        match self {
            PotentialSpec::Zero => Ok(()),
            PotentialSpec::QuarticIsotropic { kappa } => {
                if !(*kappa >= 0.0 && kappa.is_finite()) {
                    return Err(FpiError::validation(
                        "potential.kappa",
                        format!("must be finite and nonnegative, got {kappa}"),
                    ));
                }
                Ok(())
            }
            PotentialSpec::Separable { polynomials } => {
                if polynomials.len() != 1 && polynomials.len() != ncomp {
                    return Err(FpiError::validation(
                        "potential.polynomials",
                        format!("expected 1 or {ncomp} polynomials, got {}", polynomials.len()),
                    ));
                }
                for (i, c) in polynomials.iter().enumerate() {
                    let field = format!("potential.polynomials[{i}]");
                    if c.iter().any(|a| !a.is_finite()) {
                        return Err(FpiError::validation(field, "coefficients must be finite"));
                    }
                    let Some(n) = poly_degree(c) else { continue };
                    if n % 2 != 0 || c[n] <= 0.0 {
                        return Err(FpiError::validation(
                            field,
                            "polynomial must have even degree and a positive leading coefficient",
                        ));
                    }
                    let (s, min) = poly_min(c);
                    if min < -1e-12 {
                        return Err(FpiError::validation(
                            field,
                            format!("potential must be nonnegative; value {min:.3e} at s = {s:.4}"),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    /// `Φ(u)` at one point.
    pub fn value(&self, u: &[f64]) -> f64 {
        match self {
            PotentialSpec::Zero => 0.0,
            PotentialSpec::QuarticIsotropic { kappa } => {
                let s: f64 = u.iter().map(|x| x * x).sum();
                kappa * s * s
            }
            PotentialSpec::Separable { polynomials } => u
                .iter()
                .enumerate()
                .map(|(i, &x)| poly_eval(Self::separable_poly(polynomials, i), x))
                .sum(),
        }
    }

    /// `f^i(u) = ∂Φ/∂u^i` at one point.
    pub fn gradient(&self, u: &[f64], out: &mut [f64]) {
        match self {
            PotentialSpec::Zero => out.fill(0.0),
            PotentialSpec::QuarticIsotropic { kappa } => {
                let s: f64 = u.iter().map(|x| x * x).sum();
                for (o, &x) in out.iter_mut().zip(u) {
                    *o = 4.0 * kappa * x * s;
                }
            }
            PotentialSpec::Separable { polynomials } => {
                for (i, (o, &x)) in out.iter_mut().zip(u).enumerate() {
                    *o = poly_eval(&poly_deriv(Self::separable_poly(polynomials, i)), x);
                }
            }
        }
    }

    /// Exponent `p` in the Hessian growth bound `|Φ''| ≤ C(1 + |u|^p)`.
    pub fn growth_exponent(&self) -> f64 {
        match self {
            PotentialSpec::Zero => 0.0,
            PotentialSpec::QuarticIsotropic { .. } => 2.0,
            PotentialSpec::Separable { polynomials } => polynomials
                .iter()
                .filter_map(|c| poly_degree(c))
                .map(|n| n.saturating_sub(2) as f64)
                .fold(0.0, f64::max),
        }
    }
}

/// `A u` with `A = M_p⁻¹ K_p`.
pub fn apply_plate_operator(grid: &Grid, u: &DVector<f64>) -> DVector<f64> {
    grid.ops().plate_stiffness.mul_vec(u) / grid.products().plate_weight
}

/// `a(u, û) = Σ ∫∇u^i·∇û^i + λ ∫ div u div û`.
pub fn plate_form_a(grid: &Grid, u: &DVector<f64>, uh: &DVector<f64>) -> f64 {
    // both orders summed, so the value is bitwise symmetric in (u, û)
    let k = &grid.ops().plate_stiffness;
    0.5 * (u.dot(&k.mul_vec(uh)) + uh.dot(&k.mul_vec(u)))
}

/// Component values averaged to plate cell centres, component-major.
fn cell_values(grid: &Grid, u: &DVector<f64>) -> DVector<f64> {
    grid.ops().plate_average.mul_vec(u)
}

/// `∫_Ω Φ(u)`, midpoint quadrature on plate cells.
pub fn potential_energy(grid: &Grid, u: &DVector<f64>, spec: &PotentialSpec) -> f64 {
    if matches!(spec, PotentialSpec::Zero) {
        return 0.0;
    }
    let ncomp = grid.plate().ndim();
    let nc = grid.plate().cell_count();
    let vals = cell_values(grid, u);
    let mut point = vec![0.0; ncomp];
    let mut total = 0.0;
    for cell in 0..nc {
        for (c, p) in point.iter_mut().enumerate() {
            *p = vals[c * nc + cell];
        }
        total += spec.value(&point);
    }
    total * grid.products().plate_weight
}

/// `f(u)`: the `(·,·)_Ω`-gradient of [`potential_energy`], so that
/// `(f(u), h)_Ω` is exactly its directional derivative.
pub fn nonlinear_force(grid: &Grid, u: &DVector<f64>, spec: &PotentialSpec) -> DVector<f64> {
    if matches!(spec, PotentialSpec::Zero) {
        return DVector::zeros(u.len());
    }
    let ncomp = grid.plate().ndim();
    let nc = grid.plate().cell_count();
    let vals = cell_values(grid, u);
    let mut grads = DVector::zeros(vals.len());
    let mut point = vec![0.0; ncomp];
    let mut g = vec![0.0; ncomp];
    for cell in 0..nc {
        for (c, p) in point.iter_mut().enumerate() {
            *p = vals[c * nc + cell];
        }
        spec.gradient(&point, &mut g);
        for (c, gc) in g.iter().enumerate() {
            grads[c * nc + cell] = *gc;
        }
    }
    // plate cell area equals the nodal weight, so the mass scaling cancels
    grid.ops().plate_average.tr_mul_vec(&grads)
}

/// Plate energy `E(u,u_t) = ½(‖u_t‖² + a(u,u)) + ∫Φ(u)`.
pub fn plate_energy(grid: &Grid, state: &PlateState, spec: &PotentialSpec) -> f64 {
    let parts = plate_energy_parts(grid, state, spec);
    parts.kinetic + parts.elastic + parts.potential
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateEnergyParts {
    pub kinetic: f64,
    pub elastic: f64,
    pub potential: f64,
}

pub fn plate_energy_parts(grid: &Grid, state: &PlateState, spec: &PotentialSpec) -> PlateEnergyParts {
    PlateEnergyParts {
        kinetic: 0.5 * grid.products().plate(&state.ut, &state.ut),
        elastic: 0.5 * plate_form_a(grid, &state.u, &state.u),
        potential: potential_energy(grid, &state.u, spec),
    }
}

/// Eigen-decomposition of `A` in the `(·,·)_Ω` inner product; supplies the
/// fractional norms `‖A^{s/2}·‖_Ω`.
#[derive(Debug, Clone)]
pub struct PlateSpectrum {
    pub eigenvalues: DVector<f64>,
    /// Euclidean-orthonormal eigenvectors (columns).
    pub eigenvectors: DMatrix<f64>,
    plate_weight: f64,
}

impl PlateSpectrum {
    pub fn new(grid: &Grid) -> Self {
        let pw = grid.products().plate_weight;
        let k = grid.ops().plate_stiffness.to_dense() / pw;
        let eig = k.symmetric_eigen();
        PlateSpectrum {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
            plate_weight: pw,
        }
    }

    /// Smallest eigenvalue of `A` (discrete Poincaré constant).
    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues.min()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.max()
    }

    /// `‖A^{s/2} z‖_Ω`.
    pub fn fractional_norm(&self, z: &DVector<f64>, s: f64) -> f64 {
        let coeffs = self.eigenvectors.tr_mul(z);
        let sum: f64 = coeffs
            .iter()
            .zip(self.eigenvalues.iter())
            .map(|(c, mu)| mu.powf(s) * c * c)
            .sum();
        (self.plate_weight * sum).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissipativityReport {
    pub delta: f64,
    pub c1: f64,
    /// Smallest `c₂ ≥ 0` making the condition hold on the sample box.
    pub c2: f64,
    pub min_value: f64,
    pub argmin: Vec<f64>,
    /// Minimum over the box of the profile condition `sψ'(s) - c₀ψ(s)`
    /// (`c₀ = c₁` for separable potentials, `c₁/2` for `ψ₀(|u|²)`).
    pub profile_min: f64,
    /// `Some(point)` when a candidate `c₂` was supplied and fails there.
    pub violation: Option<Vec<f64>>,
}

/// Samples `Σu^i f^i(u) - c₁Φ(u) + δ|u|²` on `[-half_width, half_width]^ncomp`
/// and reports the smallest feasible `c₂`.
pub fn check_dissipativity(
    spec: &PotentialSpec,
    ncomp: usize,
    delta: f64,
    c1: f64,
    half_width: f64,
    samples_per_axis: usize,
    candidate_c2: Option<f64>,
) -> Result<DissipativityReport> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(FpiError::validation("delta", "must be positive"));
    }
    if samples_per_axis < 2 {
        return Err(FpiError::validation("samples_per_axis", "need at least 2"));
    }
    let total = samples_per_axis.pow(ncomp as u32);
    let step = 2.0 * half_width / (samples_per_axis - 1) as f64;
    let mut u = vec![0.0; ncomp];
    let mut f = vec![0.0; ncomp];
    let mut min_value = f64::INFINITY;
    let mut argmin = vec![0.0; ncomp];
    for k in 0..total {
        let mut rem = k;
        for x in u.iter_mut() {
            *x = -half_width + (rem % samples_per_axis) as f64 * step;
            rem /= samples_per_axis;
        }
        spec.gradient(&u, &mut f);
        let uf: f64 = u.iter().zip(&f).map(|(a, b)| a * b).sum();
        let norm2: f64 = u.iter().map(|x| x * x).sum();
        let val = uf - c1 * spec.value(&u) + delta * norm2;
        if val < min_value {
            min_value = val;
            argmin.copy_from_slice(&u);
        }
    }
    let profile_min = profile_condition_min(spec, c1, half_width, samples_per_axis);
    let c2 = (-min_value).max(0.0);
    let violation = candidate_c2.and_then(|c| (c < c2).then(|| argmin.clone()));
    Ok(DissipativityReport {
        delta,
        c1,
        c2,
        min_value,
        argmin,
        profile_min,
        violation,
    })
}

fn profile_condition_min(spec: &PotentialSpec, c1: f64, half_width: f64, samples: usize) -> f64 {
    let grid_min = |psi: &dyn Fn(f64) -> (f64, f64), lo: f64, hi: f64, c0: f64| {
        (0..samples)
            .map(|k| {
                let s = lo + (hi - lo) * k as f64 / (samples - 1) as f64;
                let (v, dv) = psi(s);
                s * dv - c0 * v
            })
            .fold(f64::INFINITY, f64::min)
    };
    match spec {
        PotentialSpec::Zero => 0.0,
        PotentialSpec::QuarticIsotropic { kappa } => {
            // ψ₀(s) = κ s², s = |u|² ∈ [0, ncomp·w²]; Σu f = 2 s ψ₀'(s)
            let k = *kappa;
            grid_min(&|s| (k * s * s, 2.0 * k * s), 0.0, 2.0 * half_width * half_width, c1 / 2.0)
        }
        PotentialSpec::Separable { polynomials } => polynomials
            .iter()
            .map(|c| {
                let dc = poly_deriv(c);
                grid_min(&|s| (poly_eval(c, s), poly_eval(&dc, s)), -half_width, half_width, c1)
            })
            .fold(f64::INFINITY, f64::min),
    }
}

/// Ratio `‖f(u)-f(û)‖_Ω / (‖u-û‖_σ (1 + ‖u‖^p_{1-σ/p} + ‖û‖^p_{1-σ/p}))`.
pub fn lipschitz_probe(
    grid: &Grid,
    spectrum: &PlateSpectrum,
    u: &DVector<f64>,
    uh: &DVector<f64>,
    sigma: f64,
    spec: &PotentialSpec,
) -> Result<f64> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(FpiError::validation("sigma", "must lie in (0, 1)"));
    }
    grid.check_plate(u, "lipschitz_probe")?;
    grid.check_plate(uh, "lipschitz_probe")?;
    let z = u - uh;
    let dz = spectrum.fractional_norm(&z, sigma);
    if dz == 0.0 {
        return Ok(0.0);
    }
    let df = nonlinear_force(grid, u, spec) - nonlinear_force(grid, uh, spec);
    let num = grid.products().plate(&df, &df).sqrt();
    let p = spec.growth_exponent();
    let growth = if p == 0.0 {
        3.0
    } else {
        let s = (1.0 - sigma / p).max(0.0);
        1.0 + spectrum.fractional_norm(u, s).powf(p) + spectrum.fractional_norm(uh, s).powf(p)
    };
    Ok(num / (dz * growth))
}
