//! Monolithic θ-scheme for the coupled fluid–plate system, the energy
//! ledger, the Lyapunov functional `𝒲` and trajectory-level probes.
//!
//! One step solves, for `z = (v, u_t)` and `u`,
//!
//! ```text
//! M (z' - z)/Δt + ν K z^θ + (0; K_p u^θ + M_p f̄) = (M_v G; 0)
//! u' = u + Δt u_t^θ,            x^θ = θ x' + (1-θ) x
//! ```
//!
//! with `v'` constrained to be divergence free and `f̄` the average of `f`
//! over the displacement segment of the step (three-point Gauss). For
//! `θ = ½` and a converged `f̄` the discrete energy balance holds to
//! round-off apart from the dissipation quadrature.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attractor::ProbeConfig;
use crate::error::{FpiError, Result};
use crate::grid::{build_grid, Grid, GridSpec};
use crate::krylov::{projected_cg, CgSettings};
use crate::plate::{nonlinear_force, PlateSpectrum, PotentialSpec};
use crate::state::{energy_parts, normalize, phase_norm, random_raw_state, SystemState};
use crate::stokes::{harmonic_extension, leray_project, StokesSettings};

/// Constant-in-time body force; the sampled field is Leray projected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForcingSpec {
    #[default]
    Zero,
    /// `G₁ = a cos(π x_d / L_d)` before projection, other components zero.
    Shear { amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Zero,
    /// Low-mode fields with the given amplitudes.
    Smooth { fluid: f64, displacement: f64, velocity: f64 },
    /// Seeded random state (projected) with `‖U₀‖_𝓗 = norm`.
    Random { norm: f64 },
}

impl Default for InitialSpec {
    fn default() -> Self {
        InitialSpec::Smooth {
            fluid: 0.0,
            displacement: 0.1,
            velocity: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Dense when the fluid grid is at most `dense_cap` faces.
    #[default]
    Auto,
    Dense,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub backend: Backend,
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Corrections of the averaged force after the first solve (0..=3).
    pub fixed_point_iterations: usize,
    pub dense_cap: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            backend: Backend::Auto,
            rel_tol: 1e-10,
            max_iter: 20_000,
            fixed_point_iterations: 0,
            dense_cap: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Ledger row every `ledger_every` steps (the last step is always kept).
    pub ledger_every: usize,
    /// Snapshot every `snapshot_every` steps; 0 keeps only the endpoints.
    pub snapshot_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            ledger_every: 1,
            snapshot_every: 0,
        }
    }
}

fn default_dt() -> f64 {
    0.01
}

fn default_horizon() -> f64 {
    1.0
}

fn default_theta() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    #[serde(default)]
    pub potential: PotentialSpec,
    #[serde(default)]
    pub forcing: ForcingSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
}

impl RunConfig {
    pub fn new(grid: GridSpec) -> Self {
        RunConfig {
            grid,
            potential: PotentialSpec::default(),
            forcing: ForcingSpec::default(),
            initial: InitialSpec::default(),
            dt: default_dt(),
            horizon: default_horizon(),
            theta: default_theta(),
            seed: 0,
            solver: SolverConfig::default(),
            output: OutputConfig::default(),
            probes: ProbeConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.grid.resolved_lambda()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(FpiError::validation("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(FpiError::validation("horizon", format!("must be positive, got {}", self.horizon)));
        }
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(FpiError::validation("theta", format!("must lie in [0.5, 1], got {}", self.theta)));
        }
        if !(self.solver.rel_tol > 0.0 && self.solver.rel_tol < 1.0) {
            return Err(FpiError::validation("solver.rel_tol", "must lie in (0, 1)"));
        }
        if self.solver.fixed_point_iterations > 3 {
            return Err(FpiError::validation("solver.fixed_point_iterations", "at most 3"));
        }
        if self.output.ledger_every == 0 {
            return Err(FpiError::validation("output.ledger_every", "must be at least 1"));
        }
        match self.forcing {
            ForcingSpec::Shear { amplitude } if !amplitude.is_finite() => {
                return Err(FpiError::validation("forcing.amplitude", "must be finite"));
            }
            _ => {}
        }
        match self.initial {
            InitialSpec::Random { norm } if !(norm >= 0.0 && norm.is_finite()) => {
                return Err(FpiError::validation("initial.norm", "must be finite and nonnegative"));
            }
            _ => {}
        }
        self.potential.validate(self.grid.dimensions - 1)?;
        self.probes.validate()
    }

    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }
}

const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

enum LinearSolver {
    Dense {
        q: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
    Iterative,
}

/// Precomputed solver for one configuration; `step` is pure.
pub struct Stepper<'g> {
    grid: &'g Grid,
    cfg: RunConfig,
    solver: LinearSolver,
    forcing: DVector<f64>,
}

impl<'g> Stepper<'g> {
    pub fn new(grid: &'g Grid, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        if grid.spec() != &cfg.grid {
            return Err(FpiError::GridMismatch("run configuration describes a different grid".into()));
        }
        let dense = match cfg.solver.backend {
            Backend::Dense => true,
            Backend::Iterative => false,
            Backend::Auto => grid.n_fluid() <= cfg.solver.dense_cap,
        };
        let solver = if dense {
            let basis = crate::stokes::DivergenceFreeBasis::new(grid)?;
            let chol = reduced_step_matrix(grid, &basis.q, cfg.dt, cfg.theta)
                .cholesky()
                .ok_or_else(|| FpiError::Singular("reduced step matrix is not positive definite".into()))?;
            LinearSolver::Dense { q: basis.q, chol }
        } else {
            LinearSolver::Iterative
        };
        let mut stepper = Stepper {
            grid,
            cfg: cfg.clone(),
            solver,
            forcing: DVector::zeros(grid.n_fluid()),
        };
        if let ForcingSpec::Shear { amplitude } = cfg.forcing {
            let ld = grid.extents()[grid.dimensions() - 1];
            let raw = grid.fluid().sample(|c, x| {
                if c == 0 {
                    amplitude * (std::f64::consts::PI * x[x.len() - 1] / ld).cos()
                } else {
                    0.0
                }
            });
            stepper.forcing = stepper.project(&raw)?;
        }
        Ok(stepper)
    }

    pub fn grid(&self) -> &Grid {
        self.grid
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// The projected body force `G`.
    pub fn forcing(&self) -> &DVector<f64> {
        &self.forcing
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.solver, LinearSolver::Dense { .. })
    }

    fn cg_settings(&self) -> CgSettings {
        CgSettings {
            rel_tol: self.cfg.solver.rel_tol,
            max_iter: self.cfg.solver.max_iter,
        }
    }

    fn inner_settings(&self) -> CgSettings {
        CgSettings {
            rel_tol: (self.cfg.solver.rel_tol * 1e-3).max(1e-14),
            max_iter: self.cfg.solver.max_iter,
        }
    }

    /// Leray projection with the backend's own projector.
    pub fn project(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.solver {
            LinearSolver::Dense { q, .. } => Ok(q * q.tr_mul(w)),
            LinearSolver::Iterative => Ok(leray_project(self.grid, w, self.inner_settings())?.field.values),
        }
    }

    /// Initial state from the configuration.
    pub fn initial_state(&self) -> Result<SystemState> {
        let grid = self.grid;
        match self.cfg.initial {
            InitialSpec::Zero => Ok(SystemState::zeros(grid)),
            InitialSpec::Smooth {
                fluid,
                displacement,
                velocity,
            } => {
                let ext = grid.extents();
                let d = grid.dimensions();
                let bump = |x: &[f64]| -> f64 {
                    x.iter()
                        .enumerate()
                        .map(|(a, xa)| (std::f64::consts::PI * xa / ext[a]).sin())
                        .product()
                };
                let u = grid.plate().sample(|c, x| displacement * bump(x) / (c + 1) as f64);
                let ut = grid.plate().sample(|c, x| velocity * bump(x) * if c == 0 { 1.0 } else { -0.5 });
                let raw = grid.fluid().sample(|c, x| {
                    let s = (std::f64::consts::PI * x[d - 1] / ext[d - 1]).sin();
                    if c == 0 {
                        fluid * s * (std::f64::consts::PI * x[0] / ext[0]).sin()
                    } else {
                        0.0
                    }
                });
                Ok(SystemState::new(self.project(&raw)?, u, ut, 0.0))
            }
            InitialSpec::Random { norm } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                self.random_state(&mut rng, norm)
            }
        }
    }

    /// Admissible random state with `‖U‖_𝓗 = norm`.
    pub fn random_state<R: rand::Rng>(&self, rng: &mut R, norm: f64) -> Result<SystemState> {
        let mut s = random_raw_state(self.grid, rng);
        s.v.values = self.project(&s.v.values)?;
        if norm == 0.0 {
            return Ok(SystemState::zeros(self.grid));
        }
        normalize(self.grid, &s, norm)
    }

    fn averaged_force(&self, u0: &DVector<f64>, u1: &DVector<f64>) -> DVector<f64> {
        let spec = &self.cfg.potential;
        let mut f = DVector::zeros(u0.len());
        if matches!(spec, PotentialSpec::Zero) {
            return f;
        }
        let du = u1 - u0;
        for (s, w) in GAUSS3 {
            f += nonlinear_force(self.grid, &(u0 + &du * s), spec) * w;
        }
        f
    }

    fn solve(&self, rhs_v: DVector<f64>, rhs_w: DVector<f64>, guess: (&DVector<f64>, &DVector<f64>)) -> Result<(DVector<f64>, DVector<f64>)> {
        let nf = self.grid.n_fluid();
        let np = self.grid.n_plate();
        match &self.solver {
            LinearSolver::Dense { q, chol } => {
                let m = q.ncols();
                let mut rhs = DVector::zeros(m + np);
                rhs.rows_mut(0, m).copy_from(&q.tr_mul(&rhs_v));
                rhs.rows_mut(m, np).copy_from(&rhs_w);
                let x = chol.solve(&rhs);
                Ok((q * x.rows(0, m), x.rows(m, np).into_owned()))
            }
            LinearSolver::Iterative => {
                let grid = self.grid;
                let ops = grid.ops();
                let (dt, th, nu) = (self.cfg.dt, self.cfg.theta, grid.viscosity());
                let ip = grid.products();
                let apply = |x: &DVector<f64>| {
                    let v = x.rows(0, nf).into_owned();
                    let w = x.rows(nf, np).into_owned();
                    let av = &v * (ip.fluid_weight / dt) + (ops.dissipation.mul_vec(&v) + ops.coupling.mul_vec(&w)) * (th * nu);
                    let aw = &w * (ip.plate_weight / dt)
                        + (ops.coupling.tr_mul_vec(&v) + ops.interface_diag.component_mul(&w)) * (th * nu)
                        + ops.plate_stiffness.mul_vec(&w) * (th * th * dt);
                    let mut out = DVector::zeros(nf + np);
                    out.rows_mut(0, nf).copy_from(&av);
                    out.rows_mut(nf, np).copy_from(&aw);
                    out
                };
                let inner = self.inner_settings();
                let project = |x: &DVector<f64>| -> Result<DVector<f64>> {
                    let mut out = x.clone();
                    let pv = leray_project(grid, &x.rows(0, nf).into_owned(), inner)?.field.values;
                    out.rows_mut(0, nf).copy_from(&pv);
                    Ok(out)
                };
                let mut b = DVector::zeros(nf + np);
                b.rows_mut(0, nf).copy_from(&rhs_v);
                b.rows_mut(nf, np).copy_from(&rhs_w);
                let mut x = DVector::zeros(nf + np);
                x.rows_mut(0, nf).copy_from(guess.0);
                x.rows_mut(nf, np).copy_from(guess.1);
                projected_cg("coupled step", apply, project, &b, &mut x, self.cg_settings())?;
                let x = project(&x)?;
                Ok((x.rows(0, nf).into_owned(), x.rows(nf, np).into_owned()))
            }
        }
    }

    /// One θ-scheme step.
    pub fn step(&self, state: &SystemState) -> Result<SystemState> {
        state.check(self.grid)?;
        let grid = self.grid;
        let ops = grid.ops();
        let ip = grid.products();
        let (dt, th, nu) = (self.cfg.dt, self.cfg.theta, grid.viscosity());
        let v = &state.v.values;
        let u = &state.plate.u;
        let w = &state.plate.ut;

        let kv = ops.dissipation.mul_vec(v) + ops.coupling.mul_vec(w);
        let kw = ops.coupling.tr_mul_vec(v) + ops.interface_diag.component_mul(w);
        let rhs_v = v * (ip.fluid_weight / dt) - kv * ((1.0 - th) * nu) + &self.forcing * ip.fluid_weight;
        let rhs_w0 = w * (ip.plate_weight / dt)
            - kw * ((1.0 - th) * nu)
            - ops.plate_stiffness.mul_vec(&(u + w * (th * (1.0 - th) * dt)));

        let corrections = if matches!(self.cfg.potential, PotentialSpec::Zero) {
            0
        } else {
            self.cfg.solver.fixed_point_iterations
        };
        let mut fbar = self.averaged_force(u, &(u + w * dt));
        let mut guess = (v.clone(), w.clone());
        for k in 0..=corrections {
            let rhs_w = &rhs_w0 - &fbar * ip.plate_weight;
            let (v1, w1) = self.solve(rhs_v.clone(), rhs_w, (&guess.0, &guess.1))?;
            let u1 = u + (&w1 * th + w * (1.0 - th)) * dt;
            if k == corrections {
                return Ok(SystemState::new(v1, u1, w1, state.t + dt));
            }
            fbar = self.averaged_force(u, &u1);
            guess = (v1, w1);
        }
        unreachable!("loop returns on its last iteration")
    }

    /// Advances `u0` to the horizon, recording the ledger.
    pub fn run(&self, u0: &SystemState, lyapunov: Option<&Lyapunov>) -> Result<Trajectory> {
        u0.check(self.grid)?;
        let grid = self.grid;
        let spec = &self.cfg.potential;
        let (dt, nu) = (self.cfg.dt, grid.viscosity());
        let steps = self.cfg.steps();
        let every = self.cfg.output.ledger_every;
        let snap_every = self.cfg.output.snapshot_every;

        let e0 = energy_parts(grid, u0, spec).total();
        let mut ledger = EnergyLedger::default();
        let mut state = u0.clone();
        let mut diss = 0.0;
        let mut work = 0.0;
        let th = self.cfg.theta;
        ledger.rows.push(self.ledger_row(&state, e0, 0.0, 0.0, lyapunov));
        let mut snapshots = vec![state.clone()];
        let mut last_residual = 0.0;
        for n in 1..=steps {
            let next = self.step(&state)?;
            // quadrature at the θ-point, which is where the scheme dissipates
            let vt = &next.v.values * th + &state.v.values * (1.0 - th);
            let wt = &next.plate.ut * th + &state.plate.ut * (1.0 - th);
            diss += nu * dt * grid.gradient_form(&vt, &wt);
            work += dt * grid.products().fluid(&self.forcing, &vt);
            state = next;
            if n % every == 0 || n == steps {
                let row = self.ledger_row(&state, e0, diss, work, lyapunov);
                let jump = (row.residual - last_residual).abs();
                if jump > 0.1 * (row.energy() + e0) && jump > 1e-12 {
                    log::warn!(
                        "energy residual jumped by {jump:.3e} at t = {:.4}; the explicit force may be under-resolved (reduce dt)",
                        state.t
                    );
                }
                last_residual = row.residual;
                ledger.rows.push(row);
            }
            if (snap_every > 0 && n % snap_every == 0) || n == steps {
                snapshots.push(state.clone());
            }
        }
        Ok(Trajectory { snapshots, ledger })
    }

    /// Applies `visit` to `u0` and to each of the next `steps` states;
    /// returns the last one.
    pub fn advance<F: FnMut(&SystemState)>(&self, u0: &SystemState, steps: usize, mut visit: F) -> Result<SystemState> {
        let mut s = u0.clone();
        visit(&s);
        for _ in 0..steps {
            s = self.step(&s)?;
            visit(&s);
        }
        Ok(s)
    }

    /// Every state of the run, including the initial one.
    pub fn states(&self, u0: &SystemState) -> Result<Vec<SystemState>> {
        let mut out = Vec::with_capacity(self.cfg.steps() + 1);
        out.push(u0.clone());
        for _ in 0..self.cfg.steps() {
            let next = self.step(out.last().expect("nonempty"))?;
            out.push(next);
        }
        Ok(out)
    }

    fn ledger_row(&self, s: &SystemState, e0: f64, diss: f64, work: f64, lyap: Option<&Lyapunov>) -> LedgerRow {
        let parts = energy_parts(self.grid, s, &self.cfg.potential);
        let total = parts.total();
        LedgerRow {
            t: s.t,
            e_fluid: parts.fluid,
            e_plate_kinetic: parts.plate_kinetic,
            e_plate_elastic: parts.plate_elastic,
            e_potential: parts.potential,
            dissipation_cum: diss,
            work_cum: work,
            residual: total + diss - e0 - work,
            norm_h: phase_norm(self.grid, s),
            w_lyap: lyap
                .map(|l| l.value(self.grid, s, l.eta, &self.cfg.potential))
                .unwrap_or(f64::NAN),
        }
    }
}

/// `S = M/Δt + θνK + θ²Δt diag(0, K_p)` in divergence-free coordinates.
fn reduced_step_matrix(grid: &Grid, q: &DMatrix<f64>, dt: f64, theta: f64) -> DMatrix<f64> {
    let blocks = ReducedBlocks::new(grid, q);
    let (m, np) = (q.ncols(), grid.n_plate());
    let nu = grid.viscosity();
    let ip = grid.products();
    let mut s = DMatrix::zeros(m + np, m + np);
    s.view_mut((0, 0), (m, m)).copy_from(&(&blocks.kc * (theta * nu)));
    s.view_mut((0, m), (m, np)).copy_from(&(&blocks.kcw * (theta * nu)));
    s.view_mut((m, 0), (np, m)).copy_from(&(blocks.kcw.transpose() * (theta * nu)));
    let kp = grid.ops().plate_stiffness.to_dense() * (theta * theta * dt);
    s.view_mut((m, m), (np, np)).copy_from(&kp);
    for i in 0..m {
        s[(i, i)] += ip.fluid_weight / dt;
    }
    for i in 0..np {
        s[(m + i, m + i)] += ip.plate_weight / dt + theta * nu * blocks.kww[i];
    }
    s
}

/// Gradient-form blocks restricted to divergence-free coordinates `v = Q c`.
pub struct ReducedBlocks {
    /// `Qᵀ K_ff Q`.
    pub kc: DMatrix<f64>,
    /// `Qᵀ K_fp`.
    pub kcw: DMatrix<f64>,
    /// Diagonal plate block.
    pub kww: DVector<f64>,
}

impl ReducedBlocks {
    pub fn new(grid: &Grid, q: &DMatrix<f64>) -> Self {
        let ops = grid.ops();
        let kq = ops.dissipation.mul_dense(q);
        let mut kc = q.tr_mul(&kq);
        kc = (&kc + kc.transpose()) * 0.5;
        let kcw = q.tr_mul(&ops.coupling.to_dense());
        ReducedBlocks {
            kc,
            kcw,
            kww: ops.interface_diag.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerRow {
    pub t: f64,
    pub e_fluid: f64,
    pub e_plate_kinetic: f64,
    pub e_plate_elastic: f64,
    pub e_potential: f64,
    pub dissipation_cum: f64,
    pub work_cum: f64,
    pub residual: f64,
    pub norm_h: f64,
    pub w_lyap: f64,
}

impl LedgerRow {
    pub fn energy(&self) -> f64 {
        self.e_fluid + self.e_plate_kinetic + self.e_plate_elastic + self.e_potential
    }
}

/// Energy balance record of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyLedger {
    pub rows: Vec<LedgerRow>,
}

pub const LEDGER_COLUMNS: [&str; 10] = [
    "t",
    "E_fluid",
    "E_plate_kinetic",
    "E_plate_elastic",
    "E_potential",
    "dissipation_cum",
    "work_cum",
    "residual",
    "norm_H",
    "W_lyap",
];

impl EnergyLedger {
    pub fn max_abs_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.residual.abs()).fold(0.0, f64::max)
    }

    pub fn initial_energy(&self) -> f64 {
        self.rows.first().map(LedgerRow::energy).unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = LEDGER_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let vals = [
                r.t,
                r.e_fluid,
                r.e_plate_kinetic,
                r.e_plate_elastic,
                r.e_potential,
                r.dissipation_cum,
                r.work_cum,
                r.residual,
                r.norm_h,
                r.w_lyap,
            ];
            let line: Vec<String> = vals.iter().map(|v| format!("{v:.12e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<SystemState>,
    pub ledger: EnergyLedger,
}

/// Builds the grid and runs the configured initial state.
pub fn run(cfg: &RunConfig) -> Result<(Grid, Trajectory)> {
    cfg.validate()?;
    let grid = build_grid(&cfg.grid)?;
    let traj = {
        let stepper = Stepper::new(&grid, cfg)?;
        let u0 = stepper.initial_state()?;
        let lyap = Lyapunov::new(&grid, &stepper, cfg.probes.eta)?;
        stepper.run(&u0, Some(&lyap))?
    };
    Ok((grid, traj))
}

/// `𝒲(U) = 𝓔(U) + η[(u,u_t)_Ω + (v, N₀u)_𝒪]`.
#[derive(Debug, Clone)]
pub struct Lyapunov {
    /// Dense `N₀` (fluid faces × plate nodes), or `None` to solve on demand.
    n0: Option<DMatrix<f64>>,
    settings: StokesSettings,
    /// `sup ‖N₀ψ‖_𝒪 / ‖ψ‖_Ω`.
    pub extension_norm: f64,
    /// Smallest eigenvalue of `A`.
    pub lambda_1: f64,
    /// Largest `η` for which `½𝓔 ≤ 𝒲 ≤ 2𝓔` is guaranteed.
    pub eta_threshold: f64,
    pub eta: f64,
}

const DENSE_EXTENSION_CAP: usize = 512;

impl Lyapunov {
    /// Measures `‖N₀‖` and `λ₁` and fixes `η` (the threshold when `None`).
    pub fn new(grid: &Grid, stepper: &Stepper, eta: Option<f64>) -> Result<Self> {
        let settings = StokesSettings {
            poisson: stepper.inner_settings(),
            outer: stepper.cg_settings(),
        };
        let np = grid.n_plate();
        let n0 = if np <= DENSE_EXTENSION_CAP {
            Some(match &stepper.solver {
                LinearSolver::Dense { q, .. } => dense_extension(grid, q)?,
                LinearSolver::Iterative => crate::stokes::extension_matrix(grid, settings)?,
            })
        } else {
            None
        };
        let ip = grid.products();
        let extension_norm = match &n0 {
            Some(m) => {
                let sv = m.clone().svd(false, false).singular_values;
                sv.max() * (ip.fluid_weight / ip.plate_weight).sqrt()
            }
            None => extension_norm_power(grid, settings)?,
        };
        let lambda_1 = PlateSpectrum::new(grid).lambda_min();
        let eta_threshold = 0.5 / 1f64.max((1.0 + extension_norm * extension_norm) / lambda_1);
        let eta = eta.unwrap_or(eta_threshold);
        if eta < 0.0 {
            return Err(FpiError::validation("probes.eta", "must be nonnegative"));
        }
        Ok(Lyapunov {
            n0,
            settings,
            extension_norm,
            lambda_1,
            eta_threshold,
            eta,
        })
    }

    pub fn extension(&self, grid: &Grid, psi: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.n0 {
            Some(m) => Ok(m * psi),
            None => Ok(harmonic_extension(grid, psi, self.settings)?.values),
        }
    }

    /// `𝒲` for an arbitrary `η ≥ 0`.
    pub fn value(&self, grid: &Grid, s: &SystemState, eta: f64, spec: &PotentialSpec) -> f64 {
        let e = energy_parts(grid, s, spec).total();
        if eta == 0.0 {
            return e;
        }
        let ip = grid.products();
        let ext = self
            .extension(grid, &s.plate.u)
            .expect("extension solve failed on an admissible state");
        e + eta * (ip.plate(&s.plate.u, &s.plate.ut) + ip.fluid(&s.v.values, &ext))
    }
}

/// `lyapunov_W(state, η, spec)`.
pub fn lyapunov_w(grid: &Grid, lyap: &Lyapunov, state: &SystemState, eta: f64, spec: &PotentialSpec) -> f64 {
    lyap.value(grid, state, eta, spec)
}

/// `N₀` in divergence-free coordinates: `Qᵀ K_ff Q c = -Qᵀ K_fp ψ`.
fn dense_extension(grid: &Grid, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let blocks = ReducedBlocks::new(grid, q);
    let chol = blocks
        .kc
        .clone()
        .cholesky()
        .ok_or_else(|| FpiError::Singular("reduced Stokes matrix".into()))?;
    let c = chol.solve(&(-blocks.kcw));
    Ok(q * c)
}

fn extension_norm_power(grid: &Grid, settings: StokesSettings) -> Result<f64> {
    // power iteration on N₀*N₀, with N₀*y = -γ(S y) and S the Stokes solve
    // with force y and homogeneous data
    let ip = grid.products();
    let zero = DVector::zeros(grid.n_plate());
    let mut psi = DVector::from_element(grid.n_plate(), 1.0);
    let mut est = 0.0;
    for _ in 0..100 {
        psi /= ip.plate(&psi, &psi).sqrt();
        let v = harmonic_extension(grid, &psi, settings)?.values;
        let s = crate::stokes::solve_stationary_stokes(grid, &v, &zero, settings)?.velocity.values;
        let back = -crate::stokes::conservative_trace(grid, &s, &zero);
        let next = ip.fluid(&v, &v).sqrt();
        if (next - est).abs() < 1e-8 * next {
            return Ok(next);
        }
        est = next;
        psi = back;
    }
    Ok(est)
}

/// `sup_t [‖U-Û‖²_𝓗 + ν∫‖∇(v-v̂)‖²] / ‖U₀-Û₀‖²_𝓗` and its trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DependenceReport {
    pub times: Vec<f64>,
    pub ratios: Vec<f64>,
    pub sup: f64,
}

pub fn continuous_dependence_probe(stepper: &Stepper, a0: &SystemState, b0: &SystemState) -> Result<DependenceReport> {
    let grid = stepper.grid();
    let d0 = phase_norm(grid, &a0.difference(b0)).powi(2);
    let (ta, tb) = rayon::join(|| stepper.states(a0), || stepper.states(b0));
    let (ta, tb) = (ta?, tb?);
    let times: Vec<f64> = ta.iter().map(|s| s.t).collect();
    if d0 == 0.0 {
        let n = times.len();
        return Ok(DependenceReport {
            times,
            ratios: vec![0.0; n],
            sup: 0.0,
        });
    }
    let nu = grid.viscosity();
    let dt = stepper.config().dt;
    let mut ratios = Vec::with_capacity(ta.len());
    let th = stepper.config().theta;
    let mut integral = 0.0;
    let mut prev: Option<SystemState> = None;
    for (a, b) in ta.iter().zip(&tb) {
        let diff = a.difference(b);
        if let Some(p) = &prev {
            let vt = &diff.v.values * th + &p.v.values * (1.0 - th);
            let wt = &diff.plate.ut * th + &p.plate.ut * (1.0 - th);
            integral += nu * dt * grid.gradient_form(&vt, &wt);
        }
        ratios.push((phase_norm(grid, &diff).powi(2) + integral) / d0);
        prev = Some(diff);
    }
    let sup = ratios.iter().copied().fold(0.0, f64::max);
    Ok(DependenceReport { times, ratios, sup })
}

/// Least-squares fit `log ‖U(t)‖_𝓗 ≈ b - α t` over the tail of a ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub alpha: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub samples: usize,
    pub t_start: f64,
}

pub fn decay_rate_fit(ledger: &EnergyLedger, tail_fraction: f64) -> Result<DecayFit> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(FpiError::validation("tail_fraction", "must lie in (0, 1]"));
    }
    let rows = &ledger.rows;
    if rows.iter().all(|r| r.norm_h == 0.0) {
        return Err(FpiError::InsufficientData("identically zero trajectory".into()));
    }
    let start = ((1.0 - tail_fraction) * rows.len() as f64).floor() as usize;
    let pts: Vec<(f64, f64)> = rows[start..]
        .iter()
        .filter(|r| r.norm_h > 0.0)
        .map(|r| (r.t, r.norm_h.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(FpiError::InsufficientData(format!("{} tail samples", pts.len())));
    }
    let (slope, intercept, r2) = linear_fit(&pts);
    if slope >= 0.0 {
        return Err(FpiError::NoDecay { slope });
    }
    Ok(DecayFit {
        alpha: -slope,
        intercept,
        r_squared: r2,
        samples: pts.len(),
        t_start: pts[0].0,
    })
}

/// Ordinary least squares `y ≈ a x + b`; returns `(a, b, R²)`.
pub fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let b = my - a * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (a, b, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::total_energy;

    fn config(d: usize, n: usize) -> RunConfig {
        let mut cfg = RunConfig::new(GridSpec::uniform(d, n));
        cfg.potential = PotentialSpec::Zero;
        cfg
    }

    #[test]
    fn zero_state_is_an_equilibrium() {
        let cfg = config(2, 6);
        let g = build_grid(&cfg.grid).unwrap();
        let st = Stepper::new(&g, &cfg).unwrap();
        let next = st.step(&SystemState::zeros(&g)).unwrap();
        assert_eq!(phase_norm(&g, &next), 0.0);
        assert!((next.t - cfg.dt).abs() < 1e-15);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let mut cfg = config(2, 6);
        cfg.dt = 0.0;
        assert!(matches!(cfg.validate(), Err(FpiError::Validation { ref field, .. }) if field == "dt"));
        let mut cfg = config(2, 6);
        cfg.theta = 0.4;
        assert!(cfg.validate().is_err());
        let mut cfg = config(2, 6);
        cfg.solver.fixed_point_iterations = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = config(2, 6);
        cfg.potential = PotentialSpec::Separable { polynomials: vec![vec![0.0, 1.0]] };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn backends_agree() {
        for (d, n) in [(2, 6), (3, 3)] {
            let mut cfg = config(d, n);
            cfg.potential = PotentialSpec::QuarticIsotropic { kappa: 3.0 };
            cfg.forcing = ForcingSpec::Shear { amplitude: 2.0 };
            cfg.solver.rel_tol = 1e-12;
            let g = build_grid(&cfg.grid).unwrap();
            cfg.solver.backend = Backend::Dense;
            let dense = Stepper::new(&g, &cfg).unwrap();
            cfg.solver.backend = Backend::Iterative;
            let iter = Stepper::new(&g, &cfg).unwrap();
            assert!(dense.is_dense() && !iter.is_dense());
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let u0 = dense.random_state(&mut rng, 1.0).unwrap();
            let a = dense.step(&dense.step(&u0).unwrap()).unwrap();
            let b = iter.step(&iter.step(&u0).unwrap()).unwrap();
            let err = phase_norm(&g, &a.difference(&b));
            assert!(err < 1e-8, "d={d}: {err}");
            assert!((dense.forcing() - iter.forcing()).amax() < 1e-9);
        }
    }

    #[test]
    fn steps_keep_fields_divergence_free() {
        for backend in [Backend::Dense, Backend::Iterative] {
            let mut cfg = config(2, 8);
            cfg.solver.backend = backend;
            cfg.forcing = ForcingSpec::Shear { amplitude: 1.0 };
            let g = build_grid(&cfg.grid).unwrap();
            let st = Stepper::new(&g, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(32);
            let mut s = st.random_state(&mut rng, 1.0).unwrap();
            for _ in 0..5 {
                s = st.step(&s).unwrap();
                let div = s.v.max_divergence(&g);
                assert!(div <= 10.0 * cfg.solver.rel_tol * (1.0 + s.v.values.amax() / g.h_min()), "{div}");
            }
        }
    }

    #[test]
    fn unforced_linear_energy_never_increases() {
        for theta in [0.5, 0.75, 1.0] {
            let mut cfg = config(2, 8);
            cfg.theta = theta;
            let g = build_grid(&cfg.grid).unwrap();
            let st = Stepper::new(&g, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            let mut s = st.random_state(&mut rng, 1.0).unwrap();
            let mut e = total_energy(&g, &s, &cfg.potential);
            for _ in 0..50 {
                s = st.step(&s).unwrap();
                let e1 = total_energy(&g, &s, &cfg.potential);
                assert!(e1 <= e + 1e-12, "theta {theta}: {e1} > {e}");
                e = e1;
            }
        }
    }

    fn residual_at(theta: f64, dt: f64) -> f64 {
        let mut cfg = config(2, 8);
        cfg.theta = theta;
        cfg.dt = dt;
        cfg.horizon = 0.5;
        cfg.potential = PotentialSpec::QuarticIsotropic { kappa: 1.0 };
        cfg.forcing = ForcingSpec::Shear { amplitude: 1.0 };
        cfg.initial = InitialSpec::Smooth {
            fluid: 0.3,
            displacement: 0.4,
            velocity: 0.2,
        };
        let g = build_grid(&cfg.grid).unwrap();
        let st = Stepper::new(&g, &cfg).unwrap();
        st.run(&st.initial_state().unwrap(), None).unwrap().ledger.max_abs_residual()
    }

    #[test]
    fn ledger_residual_converges_at_scheme_order() {
        let r = [residual_at(0.5, 0.02), residual_at(0.5, 0.01)];
        assert!(r[0] / r[1] >= 3.6, "{r:?}");
        let r = [residual_at(1.0, 0.02), residual_at(1.0, 0.01)];
        assert!(r[0] / r[1] >= 1.8, "{r:?}");
    }

    #[test]
    fn fixed_point_corrections_close_the_balance() {
        let mut cfg = config(2, 8);
        cfg.potential = PotentialSpec::QuarticIsotropic { kappa: 5.0 };
        cfg.solver.fixed_point_iterations = 3;
        cfg.horizon = 0.3;
        cfg.initial = InitialSpec::Smooth {
            fluid: 0.0,
            displacement: 0.5,
            velocity: 0.0,
        };
        let g = build_grid(&cfg.grid).unwrap();
        let st = Stepper::new(&g, &cfg).unwrap();
        let tr = st.run(&st.initial_state().unwrap(), None).unwrap();
        let lagged = {
            let mut c = cfg.clone();
            c.solver.fixed_point_iterations = 0;
            let s = Stepper::new(&g, &c).unwrap();
            s.run(&s.initial_state().unwrap(), None).unwrap().ledger.max_abs_residual()
        };
        assert!(tr.ledger.max_abs_residual() < 1e-3 * lagged);
    }

    #[test]
    fn ledger_csv_has_fixed_columns() {
        let empty = EnergyLedger::default();
        assert_eq!(empty.to_csv(), format!("{}\n", LEDGER_COLUMNS.join(",")));
        let mut cfg = config(2, 4);
        cfg.horizon = 0.05;
        let (_, tr) = run(&cfg).unwrap();
        let csv = tr.ledger.to_csv();
        assert_eq!(csv.lines().count(), 1 + 6);
        assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 10));
    }

    #[test]
    fn lyapunov_sandwich_below_threshold() {
        let mut cfg = config(2, 8);
        cfg.potential = PotentialSpec::QuarticIsotropic { kappa: 2.0 };
        let g = build_grid(&cfg.grid).unwrap();
        let st = Stepper::new(&g, &cfg).unwrap();
        let ly = Lyapunov::new(&g, &st, None).unwrap();
        assert!(ly.eta > 0.0 && ly.eta <= 0.5);
        let spec = &cfg.potential;
        assert_eq!(ly.value(&g, &SystemState::zeros(&g), ly.eta, spec), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for k in 0..100 {
            let s = st.random_state(&mut rng, 0.1 + 0.05 * k as f64).unwrap();
            let e = total_energy(&g, &s, spec);
            assert_eq!(lyapunov_w(&g, &ly, &s, 0.0, spec), e);
            let w = lyapunov_w(&g, &ly, &s, ly.eta_threshold, spec);
            assert!(0.5 * e <= w && w <= 2.0 * e, "{e} {w}");
        }
    }

    #[test]
    fn dense_extension_matches_stokes_solves() {
        let cfg = config(2, 6);
        let g = build_grid(&cfg.grid).unwrap();
        let st = Stepper::new(&g, &cfg).unwrap();
        let ly = Lyapunov::new(&g, &st, None).unwrap();
        let mut it = cfg.clone();
        it.solver.backend = Backend::Iterative;
        it.solver.rel_tol = 1e-12;
        let st_it = Stepper::new(&g, &it).unwrap();
        let ly_it = Lyapunov::new(&g, &st_it, None).unwrap();
        assert!((ly.extension_norm - ly_it.extension_norm).abs() < 1e-8 * ly.extension_norm);
        let power = extension_norm_power(&g, st_it_settings(&st_it)).unwrap();
        assert!((power - ly.extension_norm).abs() < 1e-5 * ly.extension_norm, "{power} {}", ly.extension_norm);
    }

    fn st_it_settings(st: &Stepper) -> StokesSettings {
        StokesSettings {
            poisson: st.inner_settings(),
            outer: st.cg_settings(),
        }
    }

    #[test]
    fn continuous_dependence_linear_is_contractive() {
        let mut cfg = config(2, 6);
        cfg.horizon = 0.5;
        let g = build_grid(&cfg.grid).unwrap();
        let st = Stepper::new(&g, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let a = st.random_state(&mut rng, 1.0).unwrap();
        assert_eq!(continuous_dependence_probe(&st, &a, &a).unwrap().sup, 0.0);
        for _ in 0..3 {
            let b = st.random_state(&mut rng, 1.0).unwrap();
            let rep = continuous_dependence_probe(&st, &a, &b).unwrap();
            assert!(rep.sup <= 1.0 + 1e-10, "{}", rep.sup);
        }
    }

    #[test]
    fn decay_fit_on_synthetic_and_degenerate_ledgers() {
        let mk = |f: &dyn Fn(f64) -> f64| EnergyLedger {
            rows: (0..100)
                .map(|k| {
                    let t = 0.1 * k as f64;
                    LedgerRow {
                        t,
                        e_fluid: 0.0,
                        e_plate_kinetic: 0.0,
                        e_plate_elastic: 0.0,
                        e_potential: 0.0,
                        dissipation_cum: 0.0,
                        work_cum: 0.0,
                        residual: 0.0,
                        norm_h: f(t),
                        w_lyap: 0.0,
                    }
                })
                .collect(),
        };
        let fit = decay_rate_fit(&mk(&|t| 3.0 * (-1.7 * t).exp()), 0.5).unwrap();
        assert!((fit.alpha - 1.7).abs() < 1e-12 && fit.r_squared > 1.0 - 1e-12);
        assert!(matches!(decay_rate_fit(&mk(&|_| 0.0), 0.5), Err(FpiError::InsufficientData(_))));
        assert!(matches!(decay_rate_fit(&mk(&|t| (0.1 * t).exp()), 0.5), Err(FpiError::NoDecay { .. })));
    }
}
