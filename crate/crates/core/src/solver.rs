//! Deterministic 2D advection–diffusion stepper with pulsatile inflow.
//!
//! The update is explicit forward-time with upwind advection and a stencil of
//! radius one. Every face flux is rounded onto a dyadic lattice of spacing
//! [`LATTICE_QUANTUM`] before it is applied, so scalar values stay on that
//! lattice and every addition in the update is exact in binary64. Two
//! consequences follow:
//!
//! * the scalar total is conserved bit-for-bit under zero-flux boundaries with
//!   no sources or inflow, and
//! * results are independent of how the grid is traversed, which is what lets
//!   [`step_incremental`] reproduce [`step`] bitwise.
//!
//! Values must stay below [`LATTICE_LIMIT`] in magnitude for additions to
//! remain exact; a step that leaves that range is reported as unstable.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spacing of the value lattice.
pub const LATTICE_QUANTUM: f64 = 1.0 / 4_294_967_296.0;
/// Largest magnitude a scalar may reach while keeping lattice arithmetic exact.
pub const LATTICE_LIMIT: f64 = 1_048_576.0;

const LATTICE_SCALE: f64 = 4_294_967_296.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("rejected config: {0}")]
    Config(String),
    #[error("instability at t_index {t_index}: cell ({i}, {j}) = {value}")]
    Instability {
        t_index: u64,
        i: usize,
        j: usize,
        value: f64,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("t_index mismatch: expected {expected}, found {found}")]
    TimeMismatch { expected: u64, found: u64 },
}

pub type Result<T, E = SolverError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    ZeroFlux,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub boundary: Boundary,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dx: f64, boundary: Boundary) -> Result<Self> {
        let grid = GridSpec {
            nx,
            ny,
            dx,
            boundary,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit-spaced zero-flux grid.
    pub fn square(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, 1.0, Boundary::ZeroFlux)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 || self.ny < 4 {
            return Err(SolverError::Config(format!(
                "grid must be at least 4x4, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(SolverError::Config(format!(
                "dx must be > 0, got {}",
                self.dx
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Row-major index; rows run along y.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityKind {
    /// No flow.
    Still,
    /// Constant flow along +x.
    Uniform,
    /// Parabolic channel profile along +x, peaking mid-channel.
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityField {
    pub kind: VelocityKind,
    pub magnitude: f64,
}

impl VelocityField {
    pub const STILL: VelocityField = VelocityField {
        kind: VelocityKind::Still,
        magnitude: 0.0,
    };

    /// Upper bound on |v| over the grid.
    pub fn max_speed(&self) -> f64 {
        match self.kind {
            VelocityKind::Still => 0.0,
            VelocityKind::Uniform | VelocityKind::Channel => self.magnitude.abs(),
        }
    }

    pub fn at(&self, grid: &GridSpec, _i: usize, j: usize) -> (f64, f64) {
        match self.kind {
            VelocityKind::Still => (0.0, 0.0),
            VelocityKind::Uniform => (self.magnitude, 0.0),
            VelocityKind::Channel => {
                let y = (j as f64 + 0.5) / grid.ny as f64;
                (self.magnitude * 4.0 * y * (1.0 - y), 0.0)
            }
        }
    }

    fn arrays(&self, grid: &GridSpec) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![0.0; grid.cells()];
        let mut v = vec![0.0; grid.cells()];
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (a, b) = self.at(grid, i, j);
                u[grid.index(i, j)] = a;
                v[grid.index(i, j)] = b;
            }
        }
        (u, v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub dt: f64,
    pub diff: f64,
    pub inflow_amp: f64,
    pub inflow_period: f64,
    /// Cells `(i, j)` receiving the source term; kept sorted and unique.
    pub source_mask: Vec<(usize, usize)>,
    pub source_rate: f64,
    pub velocity: VelocityField,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            dt: 0.2,
            diff: 0.1,
            inflow_amp: 0.0,
            inflow_period: 10.0,
            source_mask: Vec::new(),
            source_rate: 0.0,
            velocity: VelocityField::STILL,
        }
    }
}

impl SolverParams {
    /// Sorts and deduplicates the source mask.
    pub fn normalize(&mut self) {
        self.source_mask.sort_unstable_by_key(|&(i, j)| (j, i));
        self.source_mask.dedup();
    }

    /// Checks parameter ranges and the two stability inequalities.
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        grid.validate()?;
        let finite = [
            ("dt", self.dt),
            ("diff", self.diff),
            ("inflow_amp", self.inflow_amp),
            ("inflow_period", self.inflow_period),
            ("source_rate", self.source_rate),
            ("velocity.magnitude", self.velocity.magnitude),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(SolverError::Config(format!("{name} must be finite")));
            }
        }
        if self.dt <= 0.0 {
            return Err(SolverError::Config(format!(
                "dt must be > 0, got {}",
                self.dt
            )));
        }
        if self.diff < 0.0 {
            return Err(SolverError::Config(format!(
                "diff must be >= 0, got {}",
                self.diff
            )));
        }
        if self.inflow_period <= 0.0 {
            return Err(SolverError::Config(format!(
                "inflow_period must be > 0, got {}",
                self.inflow_period
            )));
        }
        for &(i, j) in &self.source_mask {
            if i >= grid.nx || j >= grid.ny {
                return Err(SolverError::Config(format!(
                    "source cell ({i}, {j}) outside {}x{} grid",
                    grid.nx, grid.ny
                )));
            }
        }
        let diffusion_number = self.dt * self.diff / (grid.dx * grid.dx);
        if diffusion_number > 0.25 {
            return Err(SolverError::Config(format!(
                "CFL violated: dt*diff/dx^2 = {diffusion_number} > 0.25"
            )));
        }
        let courant = self.dt * self.velocity.max_speed() / grid.dx;
        if courant > 1.0 {
            return Err(SolverError::Config(format!(
                "CFL violated: dt*|v|max/dx = {courant} > 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub t_index: u64,
    pub scalar: Vec<f64>,
    pub vel_u: Vec<f64>,
    pub vel_v: Vec<f64>,
}

impl FieldState {
    pub fn zeros(grid: &GridSpec, t_index: u64) -> Self {
        FieldState {
            t_index,
            scalar: vec![0.0; grid.cells()],
            vel_u: vec![0.0; grid.cells()],
            vel_v: vec![0.0; grid.cells()],
        }
    }

    pub fn check_dims(&self, grid: &GridSpec) -> Result<()> {
        let n = grid.cells();
        if self.scalar.len() != n || self.vel_u.len() != n || self.vel_v.len() != n {
            return Err(SolverError::DimensionMismatch {
                expected: format!("{} cells", n),
                found: format!(
                    "{}/{}/{} cells",
                    self.scalar.len(),
                    self.vel_u.len(),
                    self.vel_v.len()
                ),
            });
        }
        Ok(())
    }

    /// Bitwise equality of all three fields (t_index ignored).
    pub fn same_values(&self, other: &FieldState) -> bool {
        fn eq(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        eq(&self.scalar, &other.scalar)
            && eq(&self.vel_u, &other.vel_u)
            && eq(&self.vel_v, &other.vel_v)
    }

    fn cell_differs(&self, other: &FieldState, idx: usize) -> bool {
        self.scalar[idx].to_bits() != other.scalar[idx].to_bits()
            || self.vel_u[idx].to_bits() != other.vel_u[idx].to_bits()
            || self.vel_v[idx].to_bits() != other.vel_v[idx].to_bits()
    }

    /// Row-major sum of the scalar field.
    pub fn scalar_sum(&self) -> f64 {
        self.scalar.iter().fold(0.0, |acc, v| acc + v)
    }
}

/// Bitset over grid cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMask {
    nx: usize,
    ny: usize,
    words: Vec<u64>,
}

impl ChangeMask {
    pub fn empty(grid: &GridSpec) -> Self {
        ChangeMask {
            nx: grid.nx,
            ny: grid.ny,
            words: vec![0; grid.cells().div_ceil(64)],
        }
    }

    pub fn full(grid: &GridSpec) -> Self {
        let mut mask = Self::empty(grid);
        for idx in 0..grid.cells() {
            mask.insert_index(idx);
        }
        mask
    }

    pub fn from_cells(grid: &GridSpec, cells: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut mask = Self::empty(grid);
        for (i, j) in cells {
            mask.insert(i, j);
        }
        mask
    }

    pub fn insert(&mut self, i: usize, j: usize) {
        assert!(i < self.nx && j < self.ny, "cell ({i}, {j}) out of range");
        self.insert_index(j * self.nx + i);
    }

    fn insert_index(&mut self, idx: usize) {
        self.words[idx / 64] |= 1 << (idx % 64);
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.nx && j < self.ny && self.contains_index(j * self.nx + i)
    }

    #[inline]
    pub fn contains_index(&self, idx: usize) -> bool {
        self.words[idx / 64] & (1 << (idx % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Flat row-major indices in ascending order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nx * self.ny).filter(|&idx| self.contains_index(idx))
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.indices().map(|idx| (idx % self.nx, idx / self.nx))
    }

    pub fn union_with(&mut self, other: &ChangeMask) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn is_subset(&self, other: &ChangeMask) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0)
    }

    /// Grows the mask by one cell in every direction (Chebyshev radius 1),
    /// wrapping around periodic boundaries.
    pub fn dilate(&self, grid: &GridSpec) -> ChangeMask {
        let mut out = ChangeMask::empty(grid);
        for (i, j) in self.cells() {
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    if let Some((ni, nj)) = offset(grid, i, j, di, dj) {
                        out.insert(ni, nj);
                    }
                }
            }
        }
        out
    }
}

fn offset(grid: &GridSpec, i: usize, j: usize, di: i64, dj: i64) -> Option<(usize, usize)> {
    let (nx, ny) = (grid.nx as i64, grid.ny as i64);
    let (mut x, mut y) = (i as i64 + di, j as i64 + dj);
    match grid.boundary {
        Boundary::Periodic => {
            x = x.rem_euclid(nx);
            y = y.rem_euclid(ny);
        }
        Boundary::ZeroFlux => {
            if x < 0 || y < 0 || x >= nx || y >= ny {
                return None;
            }
        }
    }
    Some((x as usize, y as usize))
}

/// Rounds onto the value lattice; zero is normalized to +0.
#[inline]
pub fn quantize(x: f64) -> f64 {
    let q = (x * LATTICE_SCALE).round() / LATTICE_SCALE;
    q + 0.0
}

/// Per-step constants shared by every cell update.
struct StepPlan {
    kd: f64,
    kc: f64,
    inflow: f64,
    source: f64,
    is_source: Vec<bool>,
    vel_u: Vec<f64>,
    vel_v: Vec<f64>,
}

impl StepPlan {
    fn new(grid: &GridSpec, params: &SolverParams, t_index: u64) -> Self {
        let phase = 2.0 * PI * (t_index as f64 * params.dt) / params.inflow_period;
        let mut is_source = vec![false; grid.cells()];
        for &(i, j) in &params.source_mask {
            is_source[grid.index(i, j)] = true;
        }
        let (vel_u, vel_v) = params.velocity.arrays(grid);
        StepPlan {
            kd: params.dt * params.diff / (grid.dx * grid.dx),
            kc: params.dt / grid.dx,
            inflow: quantize(params.dt * params.inflow_amp * phase.sin()),
            source: quantize(params.dt * params.source_rate),
            is_source,
            vel_u,
            vel_v,
        }
    }

    /// Quantized flux leaving cell `a` towards neighbor `b`; `vn_a`, `vn_b` are
    /// the velocity components along the a→b direction.
    #[inline]
    fn face_flux(&self, s_a: f64, s_b: f64, vn_a: f64, vn_b: f64) -> f64 {
        let vn = 0.5 * (vn_a + vn_b);
        let upwind = if vn > 0.0 { s_a } else { s_b };
        quantize(self.kd * (s_a - s_b) + self.kc * vn * upwind)
    }

    fn update_cell(&self, grid: &GridSpec, scalar: &[f64], i: usize, j: usize) -> f64 {
        let idx = grid.index(i, j);
        let s = scalar[idx];
        let mut out = s;
        // W, E, S, N in fixed order.
        const DIRS: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        for (di, dj) in DIRS {
            if let Some((ni, nj)) = offset(grid, i, j, di, dj) {
                let nidx = grid.index(ni, nj);
                let (va, vb) = if dj == 0 {
                    (self.vel_u[idx] * di as f64, self.vel_u[nidx] * di as f64)
                } else {
                    (self.vel_v[idx] * dj as f64, self.vel_v[nidx] * dj as f64)
                };
                out -= self.face_flux(s, scalar[nidx], va, vb);
            }
        }
        if i == 0 {
            out += self.inflow;
        }
        if self.is_source[idx] {
            out += self.source;
        }
        out
    }
}

fn check_value(t_index: u64, grid: &GridSpec, idx: usize, value: f64) -> Result<()> {
    if !value.is_finite() || value.abs() >= LATTICE_LIMIT {
        let (i, j) = grid.coords(idx);
        return Err(SolverError::Instability {
            t_index,
            i,
            j,
            value,
        });
    }
    Ok(())
}

/// Initial state: zero scalar except seeded source cells, analytic velocity.
pub fn init_state(grid: &GridSpec, params: &SolverParams) -> Result<FieldState> {
    params.validate(grid)?;
    let mut state = FieldState::zeros(grid, 0);
    let seed = quantize(params.source_rate);
    for &(i, j) in &params.source_mask {
        state.scalar[grid.index(i, j)] = seed;
    }
    let (u, v) = params.velocity.arrays(grid);
    state.vel_u = u;
    state.vel_v = v;
    Ok(state)
}

/// Advances one step, recomputing every cell.
pub fn step(state: &FieldState, grid: &GridSpec, params: &SolverParams) -> Result<FieldState> {
    state.check_dims(grid)?;
    let plan = StepPlan::new(grid, params, state.t_index);
    let t_next = state.t_index + 1;
    let mut scalar = vec![0.0; grid.cells()];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let idx = grid.index(i, j);
            let value = plan.update_cell(grid, &state.scalar, i, j);
            check_value(t_next, grid, idx, value)?;
            scalar[idx] = value;
        }
    }
    Ok(FieldState {
        t_index: t_next,
        scalar,
        vel_u: plan.vel_u,
        vel_v: plan.vel_v,
    })
}

#[derive(Debug, Clone)]
pub struct IncrementalStep {
    pub state: FieldState,
    /// Cells that differ from the parent trajectory after this step.
    pub mask: ChangeMask,
    /// Number of cells whose update was evaluated.
    pub recomputed: usize,
}

/// Advances one step, recomputing only the cells within one cell of `mask`
/// and copying the rest from `parent_next`.
///
/// `mask` must cover every cell where `state` may differ from the parent
/// state at the same t_index, plus every cell whose local parameters differ
/// from the parent's.
pub fn step_incremental(
    state: &FieldState,
    parent_next: &FieldState,
    mask: &ChangeMask,
    grid: &GridSpec,
    params: &SolverParams,
) -> Result<IncrementalStep> {
    state.check_dims(grid)?;
    parent_next.check_dims(grid)?;
    if mask.nx != grid.nx || mask.ny != grid.ny {
        return Err(SolverError::DimensionMismatch {
            expected: format!("{}x{} mask", grid.nx, grid.ny),
            found: format!("{}x{} mask", mask.nx, mask.ny),
        });
    }
    let t_next = state.t_index + 1;
    if parent_next.t_index != t_next {
        return Err(SolverError::TimeMismatch {
            expected: t_next,
            found: parent_next.t_index,
        });
    }

    let mut next = parent_next.clone();
    let mut changed = ChangeMask::empty(grid);
    if mask.is_empty() {
        return Ok(IncrementalStep {
            state: next,
            mask: changed,
            recomputed: 0,
        });
    }

    let region = mask.dilate(grid);
    let plan = StepPlan::new(grid, params, state.t_index);
    let mut recomputed = 0;
    for idx in region.indices() {
        let (i, j) = grid.coords(idx);
        let value = plan.update_cell(grid, &state.scalar, i, j);
        check_value(t_next, grid, idx, value)?;
        next.scalar[idx] = value;
        next.vel_u[idx] = plan.vel_u[idx];
        next.vel_v[idx] = plan.vel_v[idx];
        recomputed += 1;
        if next.cell_differs(parent_next, idx) {
            changed.insert_index(idx);
        }
    }
    Ok(IncrementalStep {
        state: next,
        mask: changed,
        recomputed,
    })
}

/// Start and end of an emitted trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub first_t_index: u64,
    pub last_t_index: u64,
}

/// Runs `n_steps` from the initial state, handing every new state to `sink`.
pub fn run<F>(
    grid: &GridSpec,
    params: &SolverParams,
    n_steps: u64,
    sink: F,
) -> Result<TrajectoryMeta>
where
    F: FnMut(&FieldState),
{
    let init = init_state(grid, params)?;
    run_from(init, grid, params, n_steps, sink)
}

/// Like [`run`] but continues from an arbitrary state.
pub fn run_from<F>(
    start: FieldState,
    grid: &GridSpec,
    params: &SolverParams,
    n_steps: u64,
    mut sink: F,
) -> Result<TrajectoryMeta>
where
    F: FnMut(&FieldState),
{
    if n_steps == 0 {
        return Err(SolverError::Config("n_steps must be >= 1".into()));
    }
    params.validate(grid)?;
    let first = start.t_index;
    let mut state = start;
    for _ in 0..n_steps {
        state = step(&state, grid, params)?;
        sink(&state);
    }
    Ok(TrajectoryMeta {
        first_t_index: first,
        last_t_index: state.t_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> GridSpec {
        GridSpec::square(n, n).unwrap()
    }

    fn diffusion_only() -> SolverParams {
        SolverParams {
            dt: 1.0,
            diff: 0.2,
            ..SolverParams::default()
        }
    }

    fn busy_params() -> SolverParams {
        SolverParams {
            dt: 0.2,
            diff: 0.5,
            inflow_amp: 1.5,
            inflow_period: 3.0,
            source_mask: vec![(3, 5), (10, 2)],
            source_rate: 0.75,
            velocity: VelocityField {
                kind: VelocityKind::Channel,
                magnitude: 2.0,
            },
        }
    }

    #[test]
    fn init_without_sources_is_zero() {
        let g = grid(8);
        let s = init_state(&g, &SolverParams::default()).unwrap();
        assert_eq!(s.t_index, 0);
        assert!(s.scalar.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_seeds_source_cells() {
        let g = grid(8);
        let params = SolverParams {
            source_mask: vec![(4, 4)],
            source_rate: 1.0,
            ..SolverParams::default()
        };
        let s = init_state(&g, &params).unwrap();
        for idx in 0..g.cells() {
            let expect = if idx == g.index(4, 4) { 1.0 } else { 0.0 };
            assert_eq!(s.scalar[idx], expect);
        }
    }

    #[test]
    fn cfl_violation_names_inequality() {
        let g = grid(8);
        let params = SolverParams {
            dt: 3.0,
            diff: 0.1,
            ..SolverParams::default()
        };
        match init_state(&g, &params) {
            Err(SolverError::Config(msg)) => assert!(msg.contains("dt*diff/dx^2"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        let params = SolverParams {
            dt: 1.0,
            diff: 0.0,
            velocity: VelocityField {
                kind: VelocityKind::Uniform,
                magnitude: 1.5,
            },
            ..SolverParams::default()
        };
        match init_state(&g, &params) {
            Err(SolverError::Config(msg)) => assert!(msg.contains("|v|max"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn small_grids_rejected() {
        assert!(GridSpec::square(3, 8).is_err());
        assert!(GridSpec::new(8, 8, 0.0, Boundary::ZeroFlux).is_err());
    }

    #[test]
    fn zero_field_is_fixed_point() {
        let g = grid(8);
        let params = SolverParams::default();
        let s0 = init_state(&g, &params).unwrap();
        let s1 = step(&s0, &g, &params).unwrap();
        assert_eq!(s1.t_index, 1);
        assert!(s1.scalar.iter().all(|&v| v.to_bits() == 0));
    }

    #[test]
    fn uniform_field_is_fixed_point() {
        let g = grid(8);
        let params = diffusion_only();
        let mut s = FieldState::zeros(&g, 0);
        s.scalar.iter_mut().for_each(|v| *v = 3.25);
        let next = step(&s, &g, &params).unwrap();
        assert!(next.scalar.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn impulse_diffusion_conserves_sum_and_repeats() {
        let g = grid(16);
        let params = diffusion_only();
        let mut s = FieldState::zeros(&g, 0);
        s.scalar[g.index(7, 9)] = 1.0;
        let mut a = s.clone();
        let mut b = s.clone();
        for _ in 0..50 {
            a = step(&a, &g, &params).unwrap();
            b = step(&b, &g, &params).unwrap();
            assert_eq!(a.scalar_sum().to_bits(), 1.0f64.to_bits());
        }
        assert!(a.same_values(&b));
        assert!(a.scalar[g.index(7, 8)] > 0.0);
    }

    #[test]
    fn periodic_advection_conserves_sum() {
        let g = GridSpec::new(12, 10, 1.0, Boundary::Periodic).unwrap();
        let params = SolverParams {
            dt: 0.5,
            diff: 0.1,
            velocity: VelocityField {
                kind: VelocityKind::Uniform,
                magnitude: 1.0,
            },
            ..SolverParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = init_state(&g, &params).unwrap();
        s.scalar
            .iter_mut()
            .for_each(|v| *v = quantize(rng.gen_range(0.0..2.0)));
        let before = s.scalar_sum();
        for _ in 0..40 {
            s = step(&s, &g, &params).unwrap();
        }
        assert_eq!(s.scalar_sum().to_bits(), before.to_bits());
    }

    #[test]
    fn inflow_enters_left_column_only() {
        let g = grid(8);
        let params = SolverParams {
            dt: 0.5,
            diff: 0.0,
            inflow_amp: 2.0,
            inflow_period: 4.0,
            ..SolverParams::default()
        };
        let s0 = init_state(&g, &params).unwrap();
        // sin(0) = 0 on the first step.
        let s1 = step(&s0, &g, &params).unwrap();
        assert!(s1.scalar.iter().all(|&v| v == 0.0));
        let s2 = step(&s1, &g, &params).unwrap();
        let expect = quantize(0.5 * 2.0 * (2.0 * PI * 0.5 / 4.0).sin());
        for j in 0..8 {
            assert_eq!(s2.scalar[g.index(0, j)], expect);
            for i in 1..8 {
                assert_eq!(s2.scalar[g.index(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn instability_reports_first_cell() {
        let g = grid(8);
        let params = SolverParams::default();
        let mut s = FieldState::zeros(&g, 4);
        s.scalar[g.index(2, 1)] = f64::NAN;
        match step(&s, &g, &params) {
            Err(SolverError::Instability { t_index, i, j, .. }) => {
                assert_eq!(t_index, 5);
                // (2,0) neighbours the NaN and precedes it in row-major order.
                assert_eq!((i, j), (2, 0));
            }
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn run_emits_each_step() {
        let g = grid(8);
        let params = busy_params_small();
        let mut seen = Vec::new();
        let meta = run(&g, &params, 1, |s| seen.push(s.clone())).unwrap();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].t_index, 1);
        assert_eq!(meta.first_t_index, 0);
        assert_eq!(meta.last_t_index, 1);
        assert!(run(&g, &params, 0, |_| {}).is_err());
    }

    fn busy_params_small() -> SolverParams {
        SolverParams {
            source_mask: vec![(3, 5)],
            ..busy_params()
        }
    }

    #[test]
    fn run_is_deterministic() {
        let g = grid(16);
        let params = busy_params();
        let mut a = Vec::new();
        let mut b = Vec::new();
        run(&g, &params, 30, |s| a.push(s.clone())).unwrap();
        run(&g, &params, 30, |s| b.push(s.clone())).unwrap();
        assert_eq!(a.len(), 30);
        assert!(a
            .iter()
            .zip(&b)
            .all(|(x, y)| x.same_values(y) && x.t_index == y.t_index));
    }

    /// Regression baseline for the 64x64 / 200 step reference configuration.
    #[test]
    fn reference_run_baseline() {
        let g = grid(64);
        let params = SolverParams {
            dt: 0.2,
            diff: 0.1,
            source_mask: vec![(32, 32)],
            source_rate: 1.0,
            ..SolverParams::default()
        };
        let mut last = None;
        let meta = run(&g, &params, 200, |s| last = Some(s.clone())).unwrap();
        assert_eq!(meta.last_t_index, 200);
        let last = last.unwrap();
        // Seed 1.0 plus 200 injections of dt*rate rounded onto the lattice.
        let injected = (0.2f64 * 4_294_967_296.0).round() / 4_294_967_296.0;
        assert_eq!(last.scalar_sum(), 1.0 + 200.0 * injected);
        assert_eq!(last.scalar[g.index(32, 32)].to_bits(), BASELINE_CENTER_BITS);
    }

    const BASELINE_CENTER_BITS: u64 = 0x4011_44b8_2890_0000;

    #[test]
    fn empty_mask_copies_parent() {
        let g = grid(8);
        let params = busy_params_small();
        let s0 = init_state(&g, &params).unwrap();
        let s1 = step(&s0, &g, &params).unwrap();
        let inc = step_incremental(&s0, &s1, &ChangeMask::empty(&g), &g, &params).unwrap();
        assert!(inc.state.same_values(&s1));
        assert_eq!(inc.recomputed, 0);
        assert!(inc.mask.is_empty());
    }

    #[test]
    fn incremental_rejects_mismatches() {
        let g = grid(8);
        let params = SolverParams::default();
        let s0 = init_state(&g, &params).unwrap();
        let mask = ChangeMask::empty(&g);
        assert!(matches!(
            step_incremental(&s0, &s0, &mask, &g, &params),
            Err(SolverError::TimeMismatch { .. })
        ));
        let g9 = grid(9);
        let other = init_state(&g9, &params).unwrap();
        assert!(matches!(
            step_incremental(&s0, &other, &mask, &g, &params),
            Err(SolverError::DimensionMismatch { .. })
        ));
    }

    /// Parent runs without the extra source, child adds one; the child is
    /// advanced both in full and incrementally against the parent trajectory.
    #[test]
    fn perturbation_wavefront_stays_in_ball() {
        let g = grid(24);
        let parent_params = busy_params();
        let mut child_params = parent_params.clone();
        child_params.source_mask.push((12, 12));
        child_params.normalize();

        let mut parent = init_state(&g, &parent_params).unwrap();
        for _ in 0..10 {
            parent = step(&parent, &g, &parent_params).unwrap();
        }
        let seed = ChangeMask::from_cells(&g, [(12, 12)]);
        let mut full = parent.clone();
        let mut inc = parent.clone();
        let mut mask = ChangeMask::empty(&g);
        for s in 1..=10usize {
            let parent_next = step(&parent, &g, &parent_params).unwrap();
            full = step(&full, &g, &child_params).unwrap();
            let mut input = mask.clone();
            input.union_with(&seed);
            let out = step_incremental(&inc, &parent_next, &input, &g, &child_params).unwrap();
            assert!(out.state.same_values(&full), "step {s}");
            assert!(out.mask.is_subset(&input.dilate(&g)));
            for (i, j) in out.mask.cells() {
                let cheb = (i as i64 - 12).abs().max((j as i64 - 12).abs());
                assert!(cheb as usize <= s);
            }
            inc = out.state;
            mask = out.mask;
            parent = parent_next;
        }
        assert!(!mask.is_empty());
    }

    #[test]
    fn dilate_wraps_on_periodic_grids() {
        let g = GridSpec::new(6, 6, 1.0, Boundary::Periodic).unwrap();
        let m = ChangeMask::from_cells(&g, [(0, 0)]).dilate(&g);
        assert_eq!(m.len(), 9);
        assert!(m.contains(5, 5));
        let z = GridSpec::square(6, 6).unwrap();
        assert_eq!(ChangeMask::from_cells(&z, [(0, 0)]).dilate(&z).len(), 4);
    }

    fn random_lattice_state(
        g: &GridSpec,
        rng: &mut ChaCha8Rng,
        params: &SolverParams,
    ) -> FieldState {
        let mut s = init_state(g, params).unwrap();
        s.t_index = rng.gen_range(0..50);
        s.scalar
            .iter_mut()
            .for_each(|v| *v = quantize(rng.gen_range(-4.0..4.0)));
        s
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Incremental stepping equals full stepping bitwise for any mask
        /// that covers the actual differences.
        #[test]
        fn incremental_matches_full(seed in any::<u64>(), periodic in any::<bool>(), n_perturb in 0usize..6) {
            let g = GridSpec::new(12, 10, 1.0, if periodic { Boundary::Periodic } else { Boundary::ZeroFlux }).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = busy_params_small();
            let parent = random_lattice_state(&g, &mut rng, &params);
            let parent_next = step(&parent, &g, &params).unwrap();
            let mut child = parent.clone();
            let mut mask = ChangeMask::empty(&g);
            for _ in 0..n_perturb {
                let idx = rng.gen_range(0..g.cells());
                child.scalar[idx] = quantize(rng.gen_range(-4.0..4.0));
                let (i, j) = g.coords(idx);
                mask.insert(i, j);
            }
            // Random extra cells in the mask must not change the result.
            for _ in 0..rng.gen_range(0..4) {
                mask.insert(rng.gen_range(0..g.nx), rng.gen_range(0..g.ny));
            }
            let full = step(&child, &g, &params).unwrap();
            let inc = step_incremental(&child, &parent_next, &mask, &g, &params).unwrap();
            prop_assert!(inc.state.same_values(&full));
            prop_assert!(inc.mask.is_subset(&mask.dilate(&g)));
            for idx in 0..g.cells() {
                let (i, j) = g.coords(idx);
                prop_assert_eq!(inc.mask.contains(i, j), full.cell_differs(&parent_next, idx));
            }
        }

        /// States agreeing on dilate(S) have successors agreeing on S.
        #[test]
        fn stencil_locality(seed in any::<u64>(), ci in 0usize..12, cj in 0usize..10) {
            let g = GridSpec::square(12, 10).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = busy_params_small();
            let a = random_lattice_state(&g, &mut rng, &params);
            let region = ChangeMask::from_cells(&g, [(ci, cj)]);
            let support = region.dilate(&g);
            let mut b = a.clone();
            for idx in 0..g.cells() {
                let (i, j) = g.coords(idx);
                if !support.contains(i, j) {
                    b.scalar[idx] = quantize(rng.gen_range(-4.0..4.0));
                }
            }
            let na = step(&a, &g, &params).unwrap();
            let nb = step(&b, &g, &params).unwrap();
            let idx = g.index(ci, cj);
            prop_assert_eq!(na.scalar[idx].to_bits(), nb.scalar[idx].to_bits());
        }

        #[test]
        fn diffusion_conserves_exactly(seed in any::<u64>()) {
            let g = GridSpec::square(9, 7).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = diffusion_only();
            let mut s = random_lattice_state(&g, &mut rng, &params);
            let before = s.scalar_sum();
            for _ in 0..20 {
                s = step(&s, &g, &params).unwrap();
            }
            prop_assert_eq!(s.scalar_sum().to_bits(), before.to_bits());
        }
    }
}
