//! Property checks behind `fpi certify`, `fpi absorb` and `fpi stabilize`.
//!
//! Every check builds its own runs from the grid and material data of a base
//! configuration, so the outcome does not depend on the run settings.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attractor::{absorbing_set_check, ensemble, stabilizability_check, AbsorbingReport, StabilizabilityReport};
use crate::error::{FpiError, Result};
use crate::grid::{build_grid, Grid, GridSpec};
use crate::krylov::CgSettings;
use crate::plate::{nonlinear_force, potential_energy, PotentialSpec};
use crate::spectral::{assemble_generator, check_accretivity, contractivity, propagate, spectral_abscissa};
use crate::state::phase_norm;
use crate::stepper::{decay_rate_fit, ForcingSpec, InitialSpec, Lyapunov, RunConfig, Stepper};
use crate::stokes::{extension_matrix, leray_project, solve_stationary_stokes, StokesSettings};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub elapsed_seconds: f64,
    pub time_limit_seconds: f64,
    pub detail: String,
}

impl CriterionOutcome {
    /// One-line summary, e.g. `criterion 2 (accretivity identity): PASS ...`.
    pub fn line(&self) -> String {
        format!(
            "criterion {} ({}): {} in {:.2} s (limit {:.0} s): {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.elapsed_seconds,
            self.time_limit_seconds,
            self.detail
        )
    }
}

fn timed<F>(id: u8, name: &'static str, limit: f64, check: F) -> CriterionOutcome
where
    F: FnOnce() -> Result<(bool, String)>,
{
    let start = Instant::now();
    let result = check();
    let elapsed = start.elapsed().as_secs_f64();
    let (ok, mut detail) = match result {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    if elapsed > limit {
        detail.push_str("; over the time limit");
    }
    CriterionOutcome {
        id,
        name,
        passed: ok && elapsed <= limit,
        elapsed_seconds: elapsed,
        time_limit_seconds: limit,
        detail,
    }
}

fn with_cells(spec: &GridSpec, dimensions: usize, n: usize) -> GridSpec {
    let mut s = spec.clone();
    if s.dimensions != dimensions {
        s.extents = None;
    }
    s.dimensions = dimensions;
    s.cells_per_axis = vec![n; dimensions];
    s
}

fn quartic_or(spec: &PotentialSpec) -> PotentialSpec {
    match spec {
        PotentialSpec::Zero => PotentialSpec::QuarticIsotropic { kappa: 1.0 },
        other => other.clone(),
    }
}

/// Energy balance at `θ = ½` with a quartic potential and constant forcing.
pub fn energy_balance(base: &RunConfig) -> CriterionOutcome {
    timed(1, "energy balance", 30.0, || {
        let mut cfg = RunConfig::new(base.grid.clone());
        cfg.theta = 0.5;
        cfg.potential = quartic_or(&base.potential);
        cfg.forcing = match base.forcing {
            ForcingSpec::Zero => ForcingSpec::Shear { amplitude: 1.0 },
            ref f => f.clone(),
        };
        cfg.initial = InitialSpec::Smooth {
            fluid: 0.5,
            displacement: 0.2,
            velocity: 0.5,
        };
        cfg.horizon = 2.0;
        cfg.dt = 0.02;
        let grid = build_grid(&cfg.grid)?;
        let mut residuals = Vec::new();
        let mut e0 = 0.0;
        for dt in [0.02, 0.01] {
            cfg.dt = dt;
            let stepper = Stepper::new(&grid, &cfg)?;
            let traj = stepper.run(&stepper.initial_state()?, None)?;
            e0 = traj.ledger.initial_energy();
            residuals.push(traj.ledger.max_abs_residual());
        }
        let rel = residuals[0] / e0;
        let ratio = residuals[0] / residuals[1];
        Ok((
            rel <= 1e-3 && ratio >= 3.0,
            format!(
                "max residual {:.3e} = {rel:.3e} E(0) at dt 0.02, {:.3e} at dt 0.01, ratio {ratio:.2} (need <= 1e-3 E(0), ratio >= 3)",
                residuals[0], residuals[1]
            ),
        ))
    })
}

/// `(𝒜U,U)_𝓗 = ν‖∇v‖²` on 100 random states, plus a 6³ spot check.
pub fn accretivity_identity(base: &RunConfig) -> CriterionOutcome {
    timed(2, "accretivity identity", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
        let mut worst: f64 = 0.0;
        let mut min_eig = f64::INFINITY;
        let mut parts = Vec::new();
        for spec in [base.grid.clone(), with_cells(&base.grid, 3, 6)] {
            let grid = build_grid(&spec)?;
            let m = assemble_generator(&grid)?;
            let r = check_accretivity(&grid, &m, 100, &mut rng);
            worst = worst.max(r.max_identity_error);
            min_eig = min_eig.min(r.min_symmetric_eigenvalue);
            parts.push(format!("{:?}: error {:.2e}", spec.cells_per_axis, r.max_identity_error));
        }
        Ok((
            worst <= 1e-10 && min_eig >= -1e-10,
            format!(
                "{}; min symmetric eigenvalue {min_eig:.2e} (need error <= 1e-10 ||U||^2)",
                parts.join(", ")
            ),
        ))
    })
}

/// Spectral abscissa below `-1e-4` and contractivity at `t = 1`.
pub fn exponential_stability(base: &RunConfig) -> CriterionOutcome {
    timed(3, "exponential stability", 60.0, || {
        let mut ok = true;
        let mut parts = Vec::new();
        let specs = [
            with_cells(&base.grid, 2, 8),
            with_cells(&base.grid, 2, 16),
            with_cells(&base.grid, 3, 6),
        ];
        for spec in specs {
            let grid = build_grid(&spec)?;
            let m = assemble_generator(&grid)?;
            let s = spectral_abscissa(&m)?;
            let c = contractivity(&m, 1.0);
            ok &= s.abscissa < -1e-4 && c <= 1.0 + 1e-8;
            parts.push(format!("{:?}: abscissa {:.4}, ||e^-A|| {:.4}", spec.cells_per_axis, s.abscissa, c));
        }
        Ok((ok, format!("{} (need < -1e-4 and <= 1 + 1e-8)", parts.join("; "))))
    })
}

/// Unforced quartic decay rate against the linear abscissa.
pub fn nonlinear_decay(base: &RunConfig) -> CriterionOutcome {
    timed(4, "nonlinear decay", 60.0, || {
        let mut cfg = RunConfig::new(base.grid.clone());
        cfg.potential = quartic_or(&base.potential);
        cfg.forcing = ForcingSpec::Zero;
        cfg.initial = InitialSpec::Random { norm: 1.0 };
        cfg.seed = base.seed;
        cfg.dt = 0.02;
        cfg.horizon = 8.0;
        let grid = build_grid(&cfg.grid)?;
        let stepper = Stepper::new(&grid, &cfg)?;
        let traj = stepper.run(&stepper.initial_state()?, None)?;
        let fit = decay_rate_fit(&traj.ledger, 0.5)?;
        let abscissa = spectral_abscissa(&assemble_generator(&grid)?)?.abscissa;
        let rel = (fit.alpha - abscissa.abs()).abs() / abscissa.abs();
        Ok((
            fit.alpha > 0.0 && fit.r_squared >= 0.95 && rel <= 0.2,
            format!(
                "alpha {:.4}, R^2 {:.5}, |abscissa| {:.4}, relative gap {rel:.3} (need R^2 >= 0.95, gap <= 0.2)",
                fit.alpha,
                fit.r_squared,
                abscissa.abs()
            ),
        ))
    })
}

/// Dense orthogonal projector onto the kernel of the divergence.
pub fn dense_null_projector(grid: &Grid) -> DMatrix<f64> {
    let bt = grid.ops().divergence.to_dense().transpose();
    let svd = bt.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
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

/// Stationary Stokes by dense LU on the saddle-point system, with the
/// pressure gauge imposed by a bordering row.
pub fn dense_stokes(grid: &Grid, g: &DVector<f64>, psi: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let (nf, nc) = (grid.n_fluid(), grid.n_cells());
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
    rhs.rows_mut(0, nf)
        .copy_from(&(g - grid.ops().coupling.mul_vec(psi) * (nu / vol)));
    let x = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| FpiError::Singular("dense Stokes system".into()))?;
    Ok((x.rows(0, nf).into_owned(), x.rows(nf, nc).into_owned()))
}

/// `sup ‖N₀ψ‖_𝒪 / ‖ψ‖_Ω` from the dense extension matrix.
pub fn extension_constant(grid: &Grid) -> Result<f64> {
    let settings = StokesSettings {
        poisson: CgSettings {
            rel_tol: 1e-12,
            max_iter: 20_000,
        },
        outer: CgSettings {
            rel_tol: 1e-11,
            max_iter: 20_000,
        },
    };
    let n0 = extension_matrix(grid, settings)?;
    let ip = grid.products();
    Ok(n0.singular_values().max() * (ip.fluid_weight / ip.plate_weight).sqrt())
}

/// Projector and Stokes solver against dense oracles; stability of the
/// extension constant under refinement.
pub fn leray_stokes_oracles(base: &RunConfig) -> CriterionOutcome {
    timed(5, "Leray/Stokes oracles", 30.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
        let grid = build_grid(&with_cells(&base.grid, 2, 6))?;
        let p = dense_null_projector(&grid);
        let mut proj_err: f64 = 0.0;
        let tight = CgSettings {
            rel_tol: 1e-12,
            max_iter: 20_000,
        };
        for _ in 0..10 {
            let w = DVector::from_fn(grid.n_fluid(), |_, _| rng.random_range(-1.0..1.0));
            let got = leray_project(&grid, &w, tight)?.field.values;
            proj_err = proj_err.max((&got - &p * &w).amax());
        }
        let mut stokes_err: f64 = 0.0;
        for _ in 0..3 {
            let g = DVector::from_fn(grid.n_fluid(), |_, _| rng.random_range(-1.0..1.0));
            let psi = DVector::from_fn(grid.n_plate(), |_, _| rng.random_range(-1.0..1.0));
            let sol = solve_stationary_stokes(&grid, &g, &psi, StokesSettings::default())?;
            let (v, q) = dense_stokes(&grid, &g, &psi)?;
            stokes_err = stokes_err
                .max((&sol.velocity.values - v).amax())
                .max((&sol.pressure.values - q).amax());
        }
        let mut constants = Vec::new();
        for n in [8, 16, 32] {
            constants.push(extension_constant(&build_grid(&with_cells(&base.grid, 2, n))?)?);
        }
        let spread = constants.iter().copied().fold(0.0, f64::max) / constants.iter().copied().fold(f64::INFINITY, f64::min);
        Ok((
            proj_err <= 1e-8 && stokes_err <= 1e-8 && spread <= 2.0,
            format!(
                "projector error {proj_err:.2e}, Stokes error {stokes_err:.2e}, c0 at 8/16/32 = {:.4}/{:.4}/{:.4} (spread {spread:.3}; need 1e-8, 1e-8, <= 2)",
                constants[0], constants[1], constants[2]
            ),
        ))
    })
}

/// `(f(u), h)_Ω` against the directional derivative of `∫Φ(u)`.
pub fn gradient_consistency(base: &RunConfig) -> CriterionOutcome {
    timed(6, "gradient consistency", 5.0, || {
        let grid = build_grid(&base.grid)?;
        let spec = quartic_or(&base.potential);
        let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
        let np = grid.n_plate();
        let ip = grid.products();
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let u = DVector::from_fn(np, |_, _| rng.random_range(-1.0..1.0));
            let h = DVector::from_fn(np, |_, _| rng.random_range(-1.0..1.0));
            let exact = ip.plate(&nonlinear_force(&grid, &u, &spec), &h);
            let central = |eps: f64| {
                (potential_energy(&grid, &(&u + &h * eps), &spec) - potential_energy(&grid, &(&u - &h * eps), &spec))
                    / (2.0 * eps)
            };
            let eps = 1e-3;
            let fd = (4.0 * central(eps / 2.0) - central(eps)) / 3.0;
            worst = worst.max((exact - fd).abs() / exact.abs().max(f64::MIN_POSITIVE));
        }
        Ok((worst <= 1e-6, format!("worst relative error {worst:.2e} over 50 pairs (need <= 1e-6)")))
    })
}

/// One linear step against `e^{-Δt𝒜}` on a 4×4 grid.
pub fn one_step_oracle(base: &RunConfig) -> CriterionOutcome {
    timed(9, "one-step oracle", 30.0, || {
        let mut cfg = RunConfig::new(with_cells(&base.grid, 2, 4));
        cfg.potential = PotentialSpec::Zero;
        cfg.forcing = ForcingSpec::Zero;
        cfg.initial = InitialSpec::Smooth {
            fluid: 0.5,
            displacement: 0.2,
            velocity: 0.5,
        };
        let grid = build_grid(&cfg.grid)?;
        let m = assemble_generator(&grid)?;
        let dts = [0.02, 0.01, 0.005, 0.0025];
        let mut errors = Vec::new();
        for dt in dts {
            cfg.dt = dt;
            let stepper = Stepper::new(&grid, &cfg)?;
            let u0 = stepper.initial_state()?;
            let step = stepper.step(&u0)?;
            let exact = propagate(&m, &u0, dt);
            errors.push(phase_norm(&grid, &step.difference(&exact)));
        }
        let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
        let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
        Ok((
            min_order >= 1.8,
            format!(
                "errors {} at dt {:?}; observed orders {} (need >= 1.8)",
                errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", "),
                dts,
                orders.iter().map(|o| format!("{o:.2}")).collect::<Vec<_>>().join(", ")
            ),
        ))
    })
}

/// Criteria 1–6 and 9.
pub fn certify_suite(base: &RunConfig) -> Vec<CriterionOutcome> {
    vec![
        energy_balance(base),
        accretivity_identity(base),
        exponential_stability(base),
        nonlinear_decay(base),
        leray_stokes_oracles(base),
        gradient_consistency(base),
        one_step_oracle(base),
    ]
}

/// Absorbing-set check on the configured run (ensemble, envelope,
/// restarts).
pub fn absorbing_criterion(cfg: &RunConfig) -> (CriterionOutcome, Option<AbsorbingReport>) {
    let mut report = None;
    let outcome = timed(7, "dissipativity envelope", 300.0, || {
        cfg.validate()?;
        let grid = build_grid(&cfg.grid)?;
        let stepper = Stepper::new(&grid, cfg)?;
        let lyap = Lyapunov::new(&grid, &stepper, cfg.probes.eta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let initial = ensemble(&stepper, cfg.probes.ensemble_size, cfg.probes.max_radius, &mut rng)?;
        let r = absorbing_set_check(&stepper, &lyap, &initial, cfg.seed.wrapping_add(1))?;
        let detail = format!(
            "{} trajectories, envelope c0 {:.4} K {:.4e}, excess {:.2e}, ball radius {:.4e}, {} escaped, {} restarts with max W/(2K) {:.6}",
            r.members.len(),
            r.envelope.c0,
            r.envelope.level,
            r.ensemble_excess,
            r.ball_radius,
            r.escaped.len(),
            r.restarts,
            r.restart_max_ratio
        );
        let ok = r.passed;
        report = Some(r);
        Ok((ok, detail))
    });
    (outcome, report)
}

/// Stabilizability inequality on seeded random pairs.
pub fn stabilizability_criterion(cfg: &RunConfig) -> (CriterionOutcome, Option<StabilizabilityReport>) {
    let mut report = None;
    let outcome = timed(8, "stabilizability", 300.0, || {
        cfg.validate()?;
        let grid = build_grid(&cfg.grid)?;
        let stepper = Stepper::new(&grid, cfg)?;
        let m = assemble_generator(&grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let count = cfg.probes.pairs;
        let pairs = (0..count)
            .map(|k| {
                let r = cfg.probes.max_radius * (k + 1) as f64 / count as f64;
                Ok((stepper.random_state(&mut rng, r)?, stepper.random_state(&mut rng, r)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let r = stabilizability_check(&stepper, &m, &pairs)?;
        let detail = format!(
            "{} pairs, omega {:.4}, c0 {:.4}, c_R {:.4e}, min margin {:.3e} (need >= 0)",
            r.pairs.len(),
            r.omega,
            r.c0,
            r.c_r,
            r.min_margin
        );
        let ok = r.passed;
        report = Some(r);
        Ok((ok, detail))
    });
    (outcome, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        RunConfig::new(GridSpec::uniform(2, 6))
    }

    #[test]
    fn errors_and_time_limits_fail_the_criterion() {
        let err = timed(1, "x", 10.0, || Err(FpiError::Singular("test".into())));
        assert!(!err.passed && err.detail.contains("singular"));
        let slow = timed(2, "y", -1.0, || Ok((true, "fine".into())));
        assert!(!slow.passed);
        let ok = timed(3, "z", 10.0, || Ok((true, "fine".into())));
        assert!(ok.passed);
        assert!(ok.line().starts_with("criterion 3 (z): PASS"));
    }

    #[test]
    fn cheap_criteria_pass_on_a_small_grid() {
        for outcome in [gradient_consistency(&base()), one_step_oracle(&base()), energy_balance(&base())] {
            assert!(outcome.passed, "{}", outcome.line());
        }
    }

    #[test]
    fn dense_oracles_agree_with_each_other() {
        let g = build_grid(&GridSpec::uniform(2, 4)).unwrap();
        let p = dense_null_projector(&g);
        assert!((&p * &p - &p).amax() < 1e-12);
        let f = DVector::from_element(g.n_fluid(), 1.0);
        let (v, _) = dense_stokes(&g, &f, &DVector::zeros(g.n_plate())).unwrap();
        // the velocity is divergence free, so the projector leaves it alone
        assert!((&p * &v - &v).amax() < 1e-12);
    }
}
