//! Box geometry, boundary partition, staggered layouts and the discrete
//! inner products shared by every other module.
//!
//! Axis `d-1` is vertical. Horizontal axes span `[0, L_a]`, the vertical
//! axis spans `[-L_v, 0]`, so the flexible plate Ω sits on `x_{d-1} = 0`
//! with outward normal `e_{d-1}`. Every other face of the box is rigid
//! wall (S).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{FpiError, Result};
use crate::sparse::CsrMatrix;

pub const MIN_CELLS: usize = 3;
pub const DEFAULT_VISCOSITY: f64 = 1.0;
/// Lamé-type parameter used when neither λ nor μ is configured (μ = 1/3).
pub const DEFAULT_LAMBDA: f64 = 2.0;

fn default_viscosity() -> f64 {
    DEFAULT_VISCOSITY
}

/// User-facing grid description as it appears in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dimensions: usize,
    pub cells_per_axis: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extents: Option<Vec<f64>>,
    #[serde(default = "default_viscosity")]
    pub viscosity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lame_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poisson_mu: Option<f64>,
}

impl GridSpec {
    /// Unit box with `n` cells on every axis and default material data.
    pub fn uniform(dimensions: usize, n: usize) -> Self {
        GridSpec {
            dimensions,
            cells_per_axis: vec![n; dimensions],
            extents: None,
            viscosity: DEFAULT_VISCOSITY,
            lame_lambda: None,
            poisson_mu: None,
        }
    }

    pub fn with_viscosity(mut self, nu: f64) -> Self {
        self.viscosity = nu;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lame_lambda = Some(lambda);
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.poisson_mu = Some(mu);
        self
    }

    /// λ implied by the spec: `(1+μ)/(1-μ)` when μ is given, else the
    /// explicit λ, else [`DEFAULT_LAMBDA`].
    pub fn resolved_lambda(&self) -> Result<f64> {
        let from_mu = match self.poisson_mu {
            Some(mu) => {
                if !(mu > 0.0 && mu < 0.5) {
                    return Err(FpiError::validation(
                        "grid.poisson_mu",
                        format!("must lie in (0, 1/2), got {mu}"),
                    ));
                }
                Some((1.0 + mu) / (1.0 - mu))
            }
            None => None,
        };
        match (self.lame_lambda, from_mu) {
            (Some(l), _) if !(l >= 0.0 && l.is_finite()) => Err(FpiError::validation(
                "grid.lame_lambda",
                format!("must be a finite nonnegative number, got {l}"),
            )),
            (Some(l), Some(m)) if (l - m).abs() > 1e-12 * l.abs().max(1.0) => Err(FpiError::validation(
                "grid.lame_lambda",
                format!("inconsistent with poisson_mu: expected (1+mu)/(1-mu) = {m}, got {l}"),
            )),
            (_, Some(m)) => Ok(m),
            (Some(l), None) => Ok(l),
            (None, None) => Ok(DEFAULT_LAMBDA),
        }
    }

    pub fn resolved_extents(&self) -> Vec<f64> {
        self.extents
            .clone()
            .unwrap_or_else(|| vec![1.0; self.dimensions])
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dimensions) {
            return Err(FpiError::validation(
                "grid.dimensions",
                format!("must be 2 or 3, got {}", self.dimensions),
            ));
        }
        if self.cells_per_axis.len() != self.dimensions {
            return Err(FpiError::validation(
                "grid.cells_per_axis",
                format!("expected {} entries, got {}", self.dimensions, self.cells_per_axis.len()),
            ));
        }
        if let Some(&n) = self.cells_per_axis.iter().find(|&&n| n < MIN_CELLS) {
            return Err(FpiError::validation(
                "grid.cells_per_axis",
                format!("every axis needs at least {MIN_CELLS} cells, got {n}"),
            ));
        }
        let ext = self.resolved_extents();
        if ext.len() != self.dimensions || ext.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(FpiError::validation(
                "grid.extents",
                format!("need {} positive finite side lengths, got {:?}", self.dimensions, ext),
            ));
        }
        if !(self.viscosity > 0.0 && self.viscosity.is_finite()) {
            return Err(FpiError::validation(
                "grid.viscosity",
                format!("must be positive, got {}", self.viscosity),
            ));
        }
        self.resolved_lambda().map(|_| ())
    }
}

/// Which part of ∂𝒪 a box face belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryPart {
    /// The flexible top face carrying the plate.
    Omega,
    /// Rigid no-slip walls.
    Wall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFace {
    pub axis: usize,
    pub upper: bool,
    pub part: BoundaryPart,
    pub outward_normal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMap {
    faces: Vec<BoundaryFace>,
    cells: Vec<usize>,
}

impl BoundaryMap {
    fn new(cells: &[usize]) -> Self {
        let d = cells.len();
        let mut faces = Vec::with_capacity(2 * d);
        for axis in 0..d {
            for upper in [false, true] {
                let mut n = vec![0.0; d];
                n[axis] = if upper { 1.0 } else { -1.0 };
                let part = if axis == d - 1 && upper {
                    BoundaryPart::Omega
                } else {
                    BoundaryPart::Wall
                };
                faces.push(BoundaryFace {
                    axis,
                    upper,
                    part,
                    outward_normal: n,
                });
            }
        }
        BoundaryMap {
            faces,
            cells: cells.to_vec(),
        }
    }

    pub fn faces(&self) -> &[BoundaryFace] {
        &self.faces
    }

    pub fn part(&self, axis: usize, upper: bool) -> BoundaryPart {
        self.faces
            .iter()
            .find(|f| f.axis == axis && f.upper == upper)
            .map(|f| f.part)
            .expect("axis within grid dimension")
    }

    /// Number of grid cell faces lying in the given boundary part.
    pub fn cell_face_count(&self, part: BoundaryPart) -> usize {
        self.faces
            .iter()
            .filter(|f| f.part == part)
            .map(|f| {
                self.cells
                    .iter()
                    .enumerate()
                    .filter(|&(a, _)| a != f.axis)
                    .map(|(_, &n)| n)
                    .product::<usize>()
            })
            .sum()
    }
}

/// Where a dissipation edge ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeEnd {
    Node(usize),
    /// Homogeneous Dirichlet value (wall or boundary-normal face).
    Wall,
    /// Tangential node on Ω whose value is the plate velocity at this
    /// plate degree of freedom.
    Interface(usize),
}

/// One term `weight * (x_from - x_to)^2` of a discrete gradient form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: EdgeEnd,
    pub weight: f64,
}

/// Marker-and-cell layout of a vector field on a box of cells.
///
/// Component `c` lives on faces normal to axis `c`. Faces on the box
/// boundary normal to `c` carry zero normal flux and are not stored; all
/// other faces are unknowns. Tangential walls are imposed through
/// half-spacing edges (ghost reflection).
#[derive(Debug, Clone, PartialEq)]
pub struct StaggeredLayout {
    cells: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
    offsets: Vec<usize>,
}

impl StaggeredLayout {
    pub fn new(cells: Vec<usize>, spacing: Vec<f64>, origin: Vec<f64>) -> Self {
        let d = cells.len();
        let mut offsets = vec![0usize; d + 1];
        for c in 0..d {
            let count: usize = (0..d)
                .map(|a| if a == c { cells[a] - 1 } else { cells[a] })
                .product();
            offsets[c + 1] = offsets[c] + count;
        }
        StaggeredLayout {
            cells,
            spacing,
            origin,
            offsets,
        }
    }

    pub fn ndim(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn len(&self) -> usize {
        self.offsets[self.ndim()]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn component_range(&self, c: usize) -> std::ops::Range<usize> {
        self.offsets[c]..self.offsets[c + 1]
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.iter().product()
    }

    fn shape(&self, c: usize) -> Vec<usize> {
        (0..self.ndim())
            .map(|a| if a == c { self.cells[a] - 1 } else { self.cells[a] })
            .collect()
    }

    /// Flat index of face `idx` of component `c`; `None` for faces on the
    /// boundary normal to `c` or outside the box.
    pub fn index(&self, c: usize, idx: &[isize]) -> Option<usize> {
        let mut flat = 0usize;
        for (a, &i) in idx.iter().enumerate().take(self.ndim()) {
            let (lo, hi) = if a == c {
                (1, self.cells[a] as isize - 1)
            } else {
                (0, self.cells[a] as isize - 1)
            };
            if i < lo || i > hi {
                return None;
            }
            let extent = if a == c { self.cells[a] - 1 } else { self.cells[a] };
            flat = flat * extent + (i - lo) as usize;
        }
        Some(self.offsets[c] + flat)
    }

    /// Inverse of [`Self::index`]: component and face multi-index.
    pub fn face(&self, flat: usize) -> (usize, Vec<isize>) {
        let c = (0..self.ndim())
            .find(|&c| flat < self.offsets[c + 1])
            .expect("flat index within layout");
        let shape = self.shape(c);
        let mut rem = flat - self.offsets[c];
        let mut idx = vec![0isize; self.ndim()];
        for a in (0..self.ndim()).rev() {
            idx[a] = (rem % shape[a]) as isize;
            rem /= shape[a];
        }
        idx[c] += 1;
        (c, idx)
    }

    /// Physical coordinates of a stored face.
    pub fn position(&self, flat: usize) -> (usize, Vec<f64>) {
        let (c, idx) = self.face(flat);
        let x = (0..self.ndim())
            .map(|a| {
                let offset = if a == c { 0.0 } else { 0.5 };
                self.origin[a] + (idx[a] as f64 + offset) * self.spacing[a]
            })
            .collect();
        (c, x)
    }

    /// Samples `f(component, x)` at every stored face.
    pub fn sample<F: Fn(usize, &[f64]) -> f64>(&self, f: F) -> DVector<f64> {
        DVector::from_fn(self.len(), |k, _| {
            let (c, x) = self.position(k);
            f(c, &x)
        })
    }

    /// Gradient-form edges. With `interface = Some(plate)`, tangential
    /// components crossing the top face connect to the matching plate
    /// degree of freedom instead of a wall.
    pub fn edges(&self, interface: Option<&StaggeredLayout>) -> Vec<Edge> {
        let d = self.ndim();
        let vol = self.cell_volume();
        let mut edges = Vec::new();
        for k in 0..self.len() {
            let (c, idx) = self.face(k);
            for a in 0..d {
                let full = vol / (self.spacing[a] * self.spacing[a]);
                let mut up = idx.clone();
                up[a] += 1;
                let mut down = idx.clone();
                down[a] -= 1;
                if a == c {
                    // normal direction: neighbours are faces, boundary ones are zero
                    match self.index(c, &up) {
                        Some(j) => edges.push(Edge { from: k, to: EdgeEnd::Node(j), weight: full }),
                        None => edges.push(Edge { from: k, to: EdgeEnd::Wall, weight: full }),
                    }
                    if self.index(c, &down).is_none() {
                        edges.push(Edge { from: k, to: EdgeEnd::Wall, weight: full });
                    }
                } else {
                    match self.index(c, &up) {
                        Some(j) => edges.push(Edge { from: k, to: EdgeEnd::Node(j), weight: full }),
                        None => {
                            let to = match interface {
                                Some(plate) if a == d - 1 => {
                                    let p = plate
                                        .index(c, &idx[..d - 1])
                                        .expect("top tangential face maps to a plate node");
                                    EdgeEnd::Interface(p)
                                }
                                _ => EdgeEnd::Wall,
                            };
                            edges.push(Edge { from: k, to, weight: 2.0 * full });
                        }
                    }
                    if self.index(c, &down).is_none() {
                        edges.push(Edge { from: k, to: EdgeEnd::Wall, weight: 2.0 * full });
                    }
                }
            }
        }
        edges
    }

    /// Discrete divergence, one row per cell (row-major, last axis fastest).
    pub fn divergence(&self) -> CsrMatrix {
        let d = self.ndim();
        let mut t = Vec::new();
        for cell in 0..self.cell_count() {
            let idx = self.cell_multi_index(cell);
            for c in 0..d {
                let inv_h = 1.0 / self.spacing[c];
                let mut hi = idx.clone();
                hi[c] += 1;
                if let Some(j) = self.index(c, &hi) {
                    t.push((cell, j, inv_h));
                }
                if let Some(j) = self.index(c, &idx) {
                    t.push((cell, j, -inv_h));
                }
            }
        }
        CsrMatrix::from_triplets(self.cell_count(), self.len(), t)
    }

    pub fn cell_multi_index(&self, cell: usize) -> Vec<isize> {
        let mut rem = cell;
        let mut idx = vec![0isize; self.ndim()];
        for a in (0..self.ndim()).rev() {
            idx[a] = (rem % self.cells[a]) as isize;
            rem /= self.cells[a];
        }
        idx
    }

    pub fn cell_center(&self, cell: usize) -> Vec<f64> {
        let idx = self.cell_multi_index(cell);
        (0..self.ndim())
            .map(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.spacing[a])
            .collect()
    }

    /// Averages each component onto cell centres. Rows are ordered
    /// component-major: row `c * cells + cell`.
    pub fn cell_average(&self) -> CsrMatrix {
        let d = self.ndim();
        let nc = self.cell_count();
        let mut t = Vec::new();
        for c in 0..d {
            for cell in 0..nc {
                let idx = self.cell_multi_index(cell);
                let mut hi = idx.clone();
                hi[c] += 1;
                for face in [idx, hi] {
                    if let Some(j) = self.index(c, &face) {
                        t.push((c * nc + cell, j, 0.5));
                    }
                }
            }
        }
        CsrMatrix::from_triplets(d * nc, self.len(), t)
    }
}

/// Graph Laplacian of a set of edges: `(K_nodes, K_interface, diag)` so that
/// `Σ w (x_i - x_j)^2 = xᵀ K x + 2 xᵀ K_if y + yᵀ diag y`.
fn edge_laplacian(edges: &[Edge], n: usize, m: usize) -> (CsrMatrix, CsrMatrix, DVector<f64>) {
    let mut k = Vec::new();
    let mut kif = Vec::new();
    let mut diag = DVector::zeros(m);
    for e in edges {
        k.push((e.from, e.from, e.weight));
        match e.to {
            EdgeEnd::Node(j) => {
                k.push((j, j, e.weight));
                k.push((e.from, j, -e.weight));
                k.push((j, e.from, -e.weight));
            }
            EdgeEnd::Wall => {}
            EdgeEnd::Interface(p) => {
                kif.push((e.from, p, -e.weight));
                diag[p] += e.weight;
            }
        }
    }
    (
        CsrMatrix::from_triplets(n, n, k),
        CsrMatrix::from_triplets(n, m, kif),
        diag,
    )
}

/// Sparse operators assembled once per grid.
#[derive(Debug, Clone)]
pub struct GridOperators {
    /// Fluid–fluid block of the velocity gradient form (no ν).
    pub dissipation: CsrMatrix,
    /// Fluid–plate coupling block of the gradient form.
    pub coupling: CsrMatrix,
    /// Plate–plate (diagonal) block of the gradient form.
    pub interface_diag: DVector<f64>,
    pub divergence: CsrMatrix,
    /// `B Bᵀ`: pressure Poisson matrix with homogeneous Neumann data.
    pub poisson: CsrMatrix,
    /// Plate stiffness `K_p` with `a(u,û) = uᵀ K_p û`.
    pub plate_stiffness: CsrMatrix,
    pub plate_divergence: CsrMatrix,
    pub plate_average: CsrMatrix,
}

/// Weights realising the continuous inner products on grid vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteInnerProducts {
    /// Volume attached to each velocity face and pressure cell.
    pub fluid_weight: f64,
    /// Area (length when d=2) attached to each plate node.
    pub plate_weight: f64,
}

impl DiscreteInnerProducts {
    pub fn fluid(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.fluid_weight * a.dot(b)
    }

    pub fn plate(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.plate_weight * a.dot(b)
    }
}

#[derive(Debug, Clone)]
pub struct Grid {
    spec: GridSpec,
    lambda: f64,
    extents: Vec<f64>,
    fluid: StaggeredLayout,
    plate: StaggeredLayout,
    boundary: BoundaryMap,
    products: DiscreteInnerProducts,
    fluid_edges: Vec<Edge>,
    plate_edges: Vec<Edge>,
    ops: GridOperators,
}

/// Builds layouts, boundary partition and operators for a validated spec.
pub fn build_grid(spec: &GridSpec) -> Result<Grid> {
    spec.validate()?;
    let d = spec.dimensions;
    let lambda = spec.resolved_lambda()?;
    let extents = spec.resolved_extents();
    let cells = spec.cells_per_axis.clone();
    let spacing: Vec<f64> = (0..d).map(|a| extents[a] / cells[a] as f64).collect();
    let mut origin = vec![0.0; d];
    origin[d - 1] = -extents[d - 1];

    let fluid = StaggeredLayout::new(cells.clone(), spacing.clone(), origin);
    let plate = StaggeredLayout::new(cells[..d - 1].to_vec(), spacing[..d - 1].to_vec(), vec![0.0; d - 1]);

    let fluid_edges = fluid.edges(Some(&plate));
    let plate_edges = plate.edges(None);
    let (dissipation, coupling, interface_diag) = edge_laplacian(&fluid_edges, fluid.len(), plate.len());

    let divergence = fluid.divergence();
    let poisson = divergence.matmul(&divergence.transpose());

    let (grad_p, _, _) = edge_laplacian(&plate_edges, plate.len(), 0);
    let plate_divergence = plate.divergence();
    let div_form = plate_divergence
        .transpose()
        .matmul(&plate_divergence)
        .scaled(lambda * plate.cell_volume());
    let plate_stiffness = grad_p.add(&div_form);
    let plate_average = plate.cell_average();

    let products = DiscreteInnerProducts {
        fluid_weight: fluid.cell_volume(),
        plate_weight: plate.cell_volume(),
    };

    Ok(Grid {
        spec: spec.clone(),
        lambda,
        extents,
        boundary: BoundaryMap::new(&cells),
        fluid,
        plate,
        products,
        fluid_edges,
        plate_edges,
        ops: GridOperators {
            dissipation,
            coupling,
            interface_diag,
            divergence,
            poisson,
            plate_stiffness,
            plate_divergence,
            plate_average,
        },
    })
}

impl Grid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dimensions(&self) -> usize {
        self.spec.dimensions
    }

    pub fn viscosity(&self) -> f64 {
        self.spec.viscosity
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents
    }

    pub fn fluid(&self) -> &StaggeredLayout {
        &self.fluid
    }

    pub fn plate(&self) -> &StaggeredLayout {
        &self.plate
    }

    pub fn boundary(&self) -> &BoundaryMap {
        &self.boundary
    }

    pub fn products(&self) -> &DiscreteInnerProducts {
        &self.products
    }

    pub fn ops(&self) -> &GridOperators {
        &self.ops
    }

    pub fn fluid_edges(&self) -> &[Edge] {
        &self.fluid_edges
    }

    pub fn plate_edges(&self) -> &[Edge] {
        &self.plate_edges
    }

    pub fn n_fluid(&self) -> usize {
        self.fluid.len()
    }

    pub fn n_plate(&self) -> usize {
        self.plate.len()
    }

    pub fn n_cells(&self) -> usize {
        self.fluid.cell_count()
    }

    /// Smallest grid spacing.
    pub fn h_min(&self) -> f64 {
        self.fluid.spacing().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `‖∇v‖²_𝒪` with the top tangential values taken from `plate_velocity`,
    /// evaluated edge by edge.
    pub fn gradient_form(&self, v: &DVector<f64>, plate_velocity: &DVector<f64>) -> f64 {
        self.fluid_edges
            .iter()
            .map(|e| {
                let other = match e.to {
                    EdgeEnd::Node(j) => v[j],
                    EdgeEnd::Wall => 0.0,
                    EdgeEnd::Interface(p) => plate_velocity[p],
                };
                let diff = v[e.from] - other;
                e.weight * diff * diff
            })
            .sum()
    }

    /// Bilinear version of [`Self::gradient_form`].
    pub fn gradient_pairing(
        &self,
        v: &DVector<f64>,
        vb: &DVector<f64>,
        w: &DVector<f64>,
        wb: &DVector<f64>,
    ) -> f64 {
        let end = |x: &DVector<f64>, xb: &DVector<f64>, e: &Edge| match e.to {
            EdgeEnd::Node(j) => x[j],
            EdgeEnd::Wall => 0.0,
            EdgeEnd::Interface(p) => xb[p],
        };
        self.fluid_edges
            .iter()
            .map(|e| e.weight * (v[e.from] - end(v, vb, e)) * (w[e.from] - end(w, wb, e)))
            .sum()
    }

    pub fn check_fluid(&self, v: &DVector<f64>, what: &str) -> Result<()> {
        if v.len() != self.n_fluid() {
            return Err(FpiError::GridMismatch(format!(
                "{what}: {} fluid values for a grid with {}",
                v.len(),
                self.n_fluid()
            )));
        }
        Ok(())
    }

    pub fn check_plate(&self, u: &DVector<f64>, what: &str) -> Result<()> {
        if u.len() != self.n_plate() {
            return Err(FpiError::GridMismatch(format!(
                "{what}: {} plate values for a grid with {}",
                u.len(),
                self.n_plate()
            )));
        }
        Ok(())
    }
}
