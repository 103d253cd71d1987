//! Cutting-plane probes: point lookup in space-time, window sampling over a
//! frame, and window refresh driven by delta frames.
//!
//! Coordinates are in cell units with node `(i, j)` at `(i, j)`. Space is
//! bilinear, time is linear between the bracketing frames. Only cells with a
//! nonzero weight are read, so a sample exactly on a node depends on that one
//! cell and a sample on a tile edge depends on the cells of both tiles.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::{FieldState, GridSpec};
use crate::store::{RunId, Store, StoreError};
use crate::strata::{apply_delta_in_place, DeltaFrame, StrataMap};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("point ({x}, {y}, t={t}) is outside the run domain")]
    OutOfBounds { x: f64, y: f64, t: f64 },
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("invalid window: {0}")]
    BadWindow(String),
    #[error("unsupported point: {0}")]
    BadPoint(String),
    #[error("stale window: expected a delta from t={expected}, found one from t={found}")]
    Stale { expected: u64, found: u64 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = QueryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Scalar,
    VelU,
    VelV,
    Speed,
}

impl Field {
    pub fn value(self, state: &FieldState, idx: usize) -> f64 {
        match self {
            Field::Scalar => state.scalar[idx],
            Field::VelU => state.vel_u[idx],
            Field::VelV => state.vel_v[idx],
            Field::Speed => state.vel_u[idx].hypot(state.vel_v[idx]),
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::Scalar => "scalar",
            Field::VelU => "vel_u",
            Field::VelV => "vel_v",
            Field::Speed => "speed",
        })
    }
}

impl FromStr for Field {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Field::Scalar),
            "vel_u" => Ok(Field::VelU),
            "vel_v" => Ok(Field::VelV),
            "speed" => Ok(Field::Speed),
            other => Err(QueryError::UnknownField(other.to_string())),
        }
    }
}

/// A position in space-time. On the wire the spatial part is a list whose
/// length must equal `dims`; only 2 is accepted today.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PointWire", into = "PointWire")]
pub struct SpaceTimePoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

#[derive(Serialize, Deserialize)]
struct PointWire {
    dims: usize,
    pos: Vec<f64>,
    t: f64,
}

impl TryFrom<PointWire> for SpaceTimePoint {
    type Error = QueryError;

    fn try_from(w: PointWire) -> Result<Self> {
        if w.dims != 2 || w.pos.len() != w.dims {
            return Err(QueryError::BadPoint(format!(
                "dims={} with {} coordinates; expected 2",
                w.dims,
                w.pos.len()
            )));
        }
        Ok(SpaceTimePoint {
            x: w.pos[0],
            y: w.pos[1],
            t: w.t,
        })
    }
}

impl From<SpaceTimePoint> for PointWire {
    fn from(p: SpaceTimePoint) -> Self {
        PointWire {
            dims: 2,
            pos: vec![p.x, p.y],
            t: p.t,
        }
    }
}

impl SpaceTimePoint {
    pub fn new(x: f64, y: f64, t: f64) -> Self {
        SpaceTimePoint { x, y, t }
    }
}

/// Cells read by one spatial sample, with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    cells: Vec<(usize, f64)>,
}

impl Support {
    /// Bilinear support of `(x, y)`; `None` when outside `[0, nx-1] × [0, ny-1]`.
    pub fn of(grid: &GridSpec, x: f64, y: f64) -> Option<Support> {
        let (xs, ys) = (axis(x, grid.nx)?, axis(y, grid.ny)?);
        let mut cells = Vec::with_capacity(4);
        for &(j, wy) in &ys {
            for &(i, wx) in &xs {
                cells.push((grid.index(i, j), wx * wy));
            }
        }
        Some(Support { cells })
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().map(|(c, _)| *c)
    }

    pub fn eval(&self, state: &FieldState, field: Field) -> f64 {
        let mut iter = self.cells.iter();
        let (c, w) = iter.next().expect("support has at least one cell");
        let mut acc = w * field.value(state, *c);
        for (c, w) in iter {
            acc += w * field.value(state, *c);
        }
        acc
    }
}

/// Interpolation stencil along one axis with `n` nodes.
fn axis(x: f64, n: usize) -> Option<Vec<(usize, f64)>> {
    let max = (n - 1) as f64;
    if !(0.0..=max).contains(&x) {
        return None;
    }
    let i0 = (x.floor() as usize).min(n - 2);
    let f = x - i0 as f64;
    Some(if f == 0.0 {
        vec![(i0, 1.0)]
    } else if f == 1.0 {
        vec![(i0 + 1, 1.0)]
    } else {
        vec![(i0, 1.0 - f), (i0 + 1, f)]
    })
}

/// Bilinear value of `field` in one frame.
pub fn sample_frame(
    state: &FieldState,
    grid: &GridSpec,
    x: f64,
    y: f64,
    field: Field,
) -> Result<f64> {
    let support = Support::of(grid, x, y).ok_or(QueryError::OutOfBounds {
        x,
        y,
        t: state.t_index as f64,
    })?;
    Ok(support.eval(state, field))
}

/// Anything that can hand out frames of one run.
pub trait FrameSource {
    fn grid(&self) -> &GridSpec;
    /// Last available t_index.
    fn n_steps(&self) -> u64;
    fn frame(&self, t: u64) -> Result<FieldState>;
}

/// Frames held in memory, index = t_index.
#[derive(Debug, Clone)]
pub struct MemorySource {
    pub grid: GridSpec,
    pub frames: Vec<FieldState>,
}

impl FrameSource for MemorySource {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn n_steps(&self) -> u64 {
        self.frames.len().saturating_sub(1) as u64
    }

    fn frame(&self, t: u64) -> Result<FieldState> {
        self.frames
            .get(t as usize)
            .cloned()
            .ok_or(QueryError::OutOfBounds {
                x: 0.0,
                y: 0.0,
                t: t as f64,
            })
    }
}

/// Frames of one stored run.
pub struct StoreSource<'a> {
    store: &'a Store,
    run: RunId,
    grid: GridSpec,
    n_steps: u64,
}

impl<'a> StoreSource<'a> {
    pub fn new(store: &'a Store, run: &RunId) -> Result<Self> {
        let record = store.run(run)?;
        Ok(StoreSource {
            store,
            run: run.clone(),
            grid: record.grid,
            n_steps: record.available_until(),
        })
    }
}

impl FrameSource for StoreSource<'_> {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn n_steps(&self) -> u64 {
        self.n_steps
    }

    fn frame(&self, t: u64) -> Result<FieldState> {
        Ok(self.store.materialize(&self.run, t)?)
    }
}

/// Bilinear in space within each bracketing frame, then linear in time.
pub fn sample_point(src: &dyn FrameSource, p: SpaceTimePoint, field: Field) -> Result<f64> {
    let grid = src.grid();
    let out = || QueryError::OutOfBounds {
        x: p.x,
        y: p.y,
        t: p.t,
    };
    if !(0.0..=src.n_steps() as f64).contains(&p.t) {
        return Err(out());
    }
    let support = Support::of(grid, p.x, p.y).ok_or_else(out)?;
    let t0 = p.t.floor();
    let ft = p.t - t0;
    let v0 = support.eval(&src.frame(t0 as u64)?, field);
    if ft == 0.0 {
        return Ok(v0);
    }
    let v1 = support.eval(&src.frame(t0 as u64 + 1)?, field);
    Ok((1.0 - ft) * v0 + ft * v1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub origin: [f64; 2],
    /// Width and height in cells.
    pub extent: [f64; 2],
    /// Samples along x and y.
    pub resolution: [usize; 2],
    pub field: Field,
}

impl WindowSpec {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let bad = |m: String| Err(QueryError::BadWindow(m));
        if self.resolution[0] == 0 || self.resolution[1] == 0 {
            return bad("resolution must be at least 1 per axis".into());
        }
        let limits = [(grid.nx - 1) as f64, (grid.ny - 1) as f64];
        for (a, limit) in limits.into_iter().enumerate() {
            let (o, e) = (self.origin[a], self.extent[a]);
            if !o.is_finite() || !e.is_finite() || o < 0.0 || e < 0.0 || o + e > limit {
                return bad(format!(
                    "axis {a}: origin {o} extent {e} leaves [0, {limit}]"
                ));
            }
        }
        Ok(())
    }

    /// Sample positions, row-major with x fastest.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        let coord = |a: usize, k: usize| {
            let n = self.resolution[a];
            if n == 1 {
                self.origin[a]
            } else {
                self.origin[a] + self.extent[a] * k as f64 / (n - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(self.resolution[0] * self.resolution[1]);
        for ky in 0..self.resolution[1] {
            for kx in 0..self.resolution[0] {
                out.push((coord(0, kx), coord(1, ky)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledWindow {
    pub spec: WindowSpec,
    pub t: u64,
    /// `resolution[0] × resolution[1]` values, x fastest.
    pub values: Vec<f64>,
    pub strata_touched: BTreeSet<u32>,
}

/// A window together with the frame it was sampled from, so later deltas
/// can update it in place.
#[derive(Debug, Clone)]
pub struct WindowTracker {
    grid: GridSpec,
    strata: StrataMap,
    frame: FieldState,
    supports: Vec<Support>,
    sample_strata: Vec<Vec<u32>>,
    window: SampledWindow,
}

impl WindowTracker {
    pub fn new(
        spec: WindowSpec,
        frame: FieldState,
        grid: &GridSpec,
        strata: StrataMap,
    ) -> Result<Self> {
        spec.validate(grid)?;
        let supports: Vec<Support> = spec
            .positions()
            .into_iter()
            .map(|(x, y)| Support::of(grid, x, y).expect("validated window"))
            .collect();
        let sample_strata: Vec<Vec<u32>> = supports
            .iter()
            .map(|s| {
                let ids: BTreeSet<u32> = s.cells().map(|c| strata.stratum_of(c)).collect();
                ids.into_iter().collect()
            })
            .collect();
        let values = supports
            .iter()
            .map(|s| s.eval(&frame, spec.field))
            .collect();
        let strata_touched = sample_strata.iter().flatten().copied().collect();
        Ok(WindowTracker {
            grid: *grid,
            window: SampledWindow {
                spec,
                t: frame.t_index,
                values,
                strata_touched,
            },
            strata,
            frame,
            supports,
            sample_strata,
        })
    }

    pub fn window(&self) -> &SampledWindow {
        &self.window
    }

    pub fn frame(&self) -> &FieldState {
        &self.frame
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Applies a contiguous delta chain and recomputes only samples whose
    /// support lies in a changed stratum. Returns how many were recomputed.
    pub fn refresh(&mut self, deltas: &[DeltaFrame]) -> Result<usize> {
        let mut changed = BTreeSet::new();
        for d in deltas {
            if d.base != self.frame.t_index {
                return Err(QueryError::Stale {
                    expected: self.frame.t_index,
                    found: d.base,
                });
            }
            apply_delta_in_place(&mut self.frame, d, &self.strata)
                .map_err(|e| QueryError::Store(e.into()))?;
            changed.extend(d.stratum_ids());
        }
        let mut recomputed = 0;
        for (k, ids) in self.sample_strata.iter().enumerate() {
            if ids.iter().any(|id| changed.contains(id)) {
                self.window.values[k] = self.supports[k].eval(&self.frame, self.window.spec.field);
                recomputed += 1;
            }
        }
        self.window.t = self.frame.t_index;
        Ok(recomputed)
    }
}

/// Samples a window at integer time `t`.
pub fn sample_window(
    src: &dyn FrameSource,
    strata: &StrataMap,
    spec: WindowSpec,
    t: u64,
) -> Result<SampledWindow> {
    if t > src.n_steps() {
        return Err(QueryError::OutOfBounds {
            x: spec.origin[0],
            y: spec.origin[1],
            t: t as f64,
        });
    }
    let frame = src.frame(t)?;
    Ok(WindowTracker::new(spec, frame, src.grid(), strata.clone())?.window)
}
