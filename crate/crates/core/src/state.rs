//! Phase state `U = (v; u; u_t)`, its energy inner product and the total
//! energy.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{FpiError, Result};
use crate::grid::Grid;
use crate::plate::{plate_energy_parts, plate_form_a, PlateState, PotentialSpec};
use crate::stokes::VelocityField;

/// Fluid velocity, plate displacement and plate velocity at time `t`.
///
/// The tangential fluid velocity on Ω is not stored separately: it is the
/// plate velocity `plate.ut`, so the interface condition holds by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub v: VelocityField,
    pub plate: PlateState,
    pub t: f64,
}

impl SystemState {
    pub fn zeros(grid: &Grid) -> Self {
        SystemState {
            v: VelocityField::zeros(grid),
            plate: PlateState::zeros(grid),
            t: 0.0,
        }
    }

    pub fn new(v: DVector<f64>, u: DVector<f64>, ut: DVector<f64>, t: f64) -> Self {
        SystemState {
            v: VelocityField::from_values(v),
            plate: PlateState { u, ut },
            t,
        }
    }

    pub fn check(&self, grid: &Grid) -> Result<()> {
        grid.check_fluid(&self.v.values, "state.v")?;
        grid.check_plate(&self.plate.u, "state.u")?;
        grid.check_plate(&self.plate.ut, "state.u_t")
    }

    /// `self - other`, keeping this state's time.
    pub fn difference(&self, other: &SystemState) -> SystemState {
        SystemState::new(
            &self.v.values - &other.v.values,
            &self.plate.u - &other.plate.u,
            &self.plate.ut - &other.plate.ut,
            self.t,
        )
    }

    pub fn scaled(&self, s: f64) -> SystemState {
        SystemState::new(&self.v.values * s, &self.plate.u * s, &self.plate.ut * s, self.t)
    }

    /// All stored values, `(v, u, u_t)` concatenated.
    pub fn flatten(&self) -> DVector<f64> {
        let parts = [&self.v.values, &self.plate.u, &self.plate.ut];
        DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.into_iter().flat_map(|p| p.iter().copied()))
    }
}

/// `(U, U*)_𝓗 = (v,v*)_𝒪 + a(u,u*) + (u_t,u_t*)_Ω`.
pub fn phase_inner_product(grid: &Grid, a: &SystemState, b: &SystemState) -> Result<f64> {
    a.check(grid)?;
    b.check(grid)?;
    let ip = grid.products();
    Ok(ip.fluid(&a.v.values, &b.v.values)
        + plate_form_a(grid, &a.plate.u, &b.plate.u)
        + ip.plate(&a.plate.ut, &b.plate.ut))
}

/// `‖U‖_𝓗`; panics only on a mismatched state, which callers rule out.
pub fn phase_norm(grid: &Grid, a: &SystemState) -> f64 {
    phase_inner_product(grid, a, a)
        .expect("state does not match its grid")
        .max(0.0)
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyParts {
    pub fluid: f64,
    pub plate_kinetic: f64,
    pub plate_elastic: f64,
    pub potential: f64,
}

impl EnergyParts {
    pub fn total(&self) -> f64 {
        self.fluid + self.plate_kinetic + self.plate_elastic + self.potential
    }
}

pub fn energy_parts(grid: &Grid, state: &SystemState, spec: &PotentialSpec) -> EnergyParts {
    let plate = plate_energy_parts(grid, &state.plate, spec);
    EnergyParts {
        fluid: 0.5 * grid.products().fluid(&state.v.values, &state.v.values),
        plate_kinetic: plate.kinetic,
        plate_elastic: plate.elastic,
        potential: plate.potential,
    }
}

/// `𝓔 = ½‖v‖²_𝒪 + E(u, u_t)`.
pub fn total_energy(grid: &Grid, state: &SystemState, spec: &PotentialSpec) -> f64 {
    energy_parts(grid, state, spec).total()
}

/// Uniform random values in `[-1, 1]` on every stored degree of freedom
/// (not yet divergence free).
pub fn random_raw_state<R: Rng>(grid: &Grid, rng: &mut R) -> SystemState {
    let mut draw = |n: usize| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let v = draw(grid.n_fluid());
    let u = draw(grid.n_plate());
    let ut = draw(grid.n_plate());
    SystemState::new(v, u, ut, 0.0)
}

/// Rescales `state` to have `‖U‖_𝓗 = norm`.
pub fn normalize(grid: &Grid, state: &SystemState, norm: f64) -> Result<SystemState> {
    let n = phase_norm(grid, state);
    if n == 0.0 {
        return Err(FpiError::validation("state", "cannot normalize the zero state"));
    }
    Ok(state.scaled(norm / n))
}
