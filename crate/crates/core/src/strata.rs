//! Stratified frames: spatial tiling, per-stratum change detection, delta
//! frames carrying full payloads of changed strata, and slow/fast layer
//! classification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::{FieldState, GridSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrataError {
    #[error("tile dimensions must be non-zero")]
    ZeroTile,
    #[error("expected {expected} layer labels, got {found}")]
    LabelCount { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("stale delta: base t_index is {expected}, state is at {found}")]
    Stale { expected: u64, found: u64 },
    #[error("threshold must be a non-negative number, got {0}")]
    BadThreshold(f64),
    #[error("window needs at least two frames, got {0}")]
    ShortWindow(usize),
    #[error("unknown stratum {0}")]
    UnknownStratum(u32),
    #[error("malformed delta payload: {0}")]
    Malformed(String),
}

pub type Result<T, E = StrataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Background,
    Active,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAssignment {
    /// One label per stratum of the map the assignment was computed on.
    pub labels: Vec<Layer>,
    /// Background strata are refreshed every this many frames.
    pub refresh_every: u32,
}

impl LayerAssignment {
    pub fn active(&self) -> impl Iterator<Item = u32> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Layer::Active)
            .map(|(id, _)| id as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scheme {
    /// Rectangular tiles of `tw × th` cells, edge tiles clipped.
    Tiles { tw: usize, th: usize },
    /// Two strata (0 = background, 1 = active) formed by merging the tiles of
    /// a tiling according to per-tile labels.
    Layers {
        tw: usize,
        th: usize,
        assignment: LayerAssignment,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stratum {
    pub id: u32,
    /// Row-major cell indices, ascending.
    pub cells: Vec<usize>,
}

/// A partition of the grid into strata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrataMap {
    nx: usize,
    ny: usize,
    scheme: Scheme,
    strata: Vec<Stratum>,
    owner: Vec<u32>,
}

impl StrataMap {
    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn len(&self) -> usize {
        self.strata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    pub fn scheme(&self) -> &Scheme {
        &self.scheme
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    #[inline]
    pub fn stratum_of(&self, idx: usize) -> u32 {
        self.owner[idx]
    }

    pub fn stratum_of_cell(&self, i: usize, j: usize) -> u32 {
        self.owner[j * self.nx + i]
    }

    pub fn get(&self, id: u32) -> Option<&Stratum> {
        self.strata.get(id as usize)
    }

    /// Stratum id of tile `(tx, ty)` for tile schemes.
    pub fn tile_id(&self, tx: usize, ty: usize) -> Option<u32> {
        match self.scheme {
            Scheme::Tiles { tw, th } => {
                let (ntx, nty) = (self.nx.div_ceil(tw), self.ny.div_ceil(th));
                (tx < ntx && ty < nty).then(|| (ty * ntx + tx) as u32)
            }
            Scheme::Layers { .. } => None,
        }
    }

    fn check_state(&self, s: &FieldState) -> Result<()> {
        let n = self.nx * self.ny;
        if s.scalar.len() != n || s.vel_u.len() != n || s.vel_v.len() != n {
            return Err(StrataError::DimensionMismatch(format!(
                "state has {} cells, strata cover {}",
                s.scalar.len(),
                n
            )));
        }
        Ok(())
    }
}

fn tile_owner(nx: usize, ny: usize, tw: usize, th: usize) -> Vec<u32> {
    let ntx = nx.div_ceil(tw);
    let mut owner = vec![0u32; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            owner[j * nx + i] = ((j / th) * ntx + i / tw) as u32;
        }
    }
    owner
}

/// Splits the grid into strata. Tiles are numbered row-major by tile
/// coordinate; tiles on the right and bottom edges are clipped.
pub fn partition(grid: &GridSpec, scheme: Scheme) -> Result<StrataMap> {
    let (nx, ny) = (grid.nx, grid.ny);
    let (tw, th) = match &scheme {
        Scheme::Tiles { tw, th } | Scheme::Layers { tw, th, .. } => (*tw, *th),
    };
    if tw == 0 || th == 0 {
        return Err(StrataError::ZeroTile);
    }
    let tiles = tile_owner(nx, ny, tw, th);
    let n_tiles = nx.div_ceil(tw) * ny.div_ceil(th);
    let (owner, n_strata) = match &scheme {
        Scheme::Tiles { .. } => (tiles, n_tiles),
        Scheme::Layers { assignment, .. } => {
            if assignment.labels.len() != n_tiles {
                return Err(StrataError::LabelCount {
                    expected: n_tiles,
                    found: assignment.labels.len(),
                });
            }
            let owner = tiles
                .iter()
                .map(|&t| match assignment.labels[t as usize] {
                    Layer::Background => 0,
                    Layer::Active => 1,
                })
                .collect();
            (owner, 2)
        }
    };
    let mut strata: Vec<Stratum> = (0..n_strata as u32)
        .map(|id| Stratum {
            id,
            cells: Vec::new(),
        })
        .collect();
    for (idx, &s) in owner.iter().enumerate() {
        strata[s as usize].cells.push(idx);
    }
    Ok(StrataMap {
        nx,
        ny,
        scheme,
        strata,
        owner,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub t_from: u64,
    pub t_to: u64,
    /// Changed stratum ids, ascending.
    pub changed: Vec<u32>,
    /// Max-abs-diff over all three fields, indexed by stratum id.
    pub max_abs_diff: Vec<f64>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.changed.is_empty()
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps >= 0.0 {
        Ok(())
    } else {
        Err(StrataError::BadThreshold(eps))
    }
}

/// Lists the strata whose max-abs-diff exceeds `eps`. With `eps == 0` any
/// bitwise difference counts, including the sign of zero.
pub fn diff(a: &FieldState, b: &FieldState, strata: &StrataMap, eps: f64) -> Result<ChangeSet> {
    check_eps(eps)?;
    strata.check_state(a)?;
    strata.check_state(b)?;
    let mut changed = Vec::new();
    let mut max_abs_diff = Vec::with_capacity(strata.len());
    for stratum in &strata.strata {
        let mut max = 0.0f64;
        let mut bits_differ = false;
        for &idx in &stratum.cells {
            for (x, y) in [
                (a.scalar[idx], b.scalar[idx]),
                (a.vel_u[idx], b.vel_u[idx]),
                (a.vel_v[idx], b.vel_v[idx]),
            ] {
                bits_differ |= x.to_bits() != y.to_bits();
                max = max.max((x - y).abs());
            }
        }
        if (eps == 0.0 && bits_differ) || max > eps {
            changed.push(stratum.id);
        }
        max_abs_diff.push(max);
    }
    Ok(ChangeSet {
        t_from: a.t_index,
        t_to: b.t_index,
        changed,
        max_abs_diff,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEntry {
    pub stratum_id: u32,
    pub scalar: Vec<f64>,
    pub vel_u: Vec<f64>,
    pub vel_v: Vec<f64>,
}

impl DeltaEntry {
    pub fn cell_count(&self) -> usize {
        self.scalar.len()
    }
}

/// Changed strata between `base` and `t_index`, each with the full target
/// values of its cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaFrame {
    pub t_index: u64,
    pub base: u64,
    /// Sorted ascending by stratum id.
    pub entries: Vec<DeltaEntry>,
}

impl DeltaFrame {
    pub fn stratum_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.stratum_id)
    }

    /// Size of [`Self::encode_payload`] without building it.
    pub fn payload_len(&self) -> usize {
        4 + self
            .entries
            .iter()
            .map(|e| 8 + 3 * 8 * e.cell_count())
            .sum::<usize>()
    }

    /// Wire layout: entry count u32 LE, then per entry stratum id u32 LE,
    /// cell count u32 LE and the cell values as f64 LE grouped
    /// scalar → vel_u → vel_v.
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_len());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.stratum_id.to_le_bytes());
            out.extend_from_slice(&(e.cell_count() as u32).to_le_bytes());
            for field in [&e.scalar, &e.vel_u, &e.vel_v] {
                for v in field.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode_payload(bytes: &[u8], t_index: u64, base: u64) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let count = rd.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut last: Option<u32> = None;
        for _ in 0..count {
            let stratum_id = rd.u32()?;
            if last.is_some_and(|l| l >= stratum_id) {
                return Err(StrataError::Malformed(
                    "entries not sorted by stratum id".into(),
                ));
            }
            last = Some(stratum_id);
            let cells = rd.u32()? as usize;
            let scalar = rd.f64s(cells)?;
            let vel_u = rd.f64s(cells)?;
            let vel_v = rd.f64s(cells)?;
            entries.push(DeltaEntry {
                stratum_id,
                scalar,
                vel_u,
                vel_v,
            });
        }
        if rd.pos != bytes.len() {
            return Err(StrataError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - rd.pos
            )));
        }
        Ok(DeltaFrame {
            t_index,
            base,
            entries,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| StrataError::Malformed("truncated payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| StrataError::Malformed("cell count overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Encodes the strata of `target` that differ from `base` by more than `eps`.
pub fn encode_delta(
    base: &FieldState,
    target: &FieldState,
    strata: &StrataMap,
    eps: f64,
) -> Result<DeltaFrame> {
    let changes = diff(base, target, strata, eps)?;
    let entries = changes
        .changed
        .iter()
        .map(|&id| {
            let cells = &strata.strata[id as usize].cells;
            DeltaEntry {
                stratum_id: id,
                scalar: cells.iter().map(|&c| target.scalar[c]).collect(),
                vel_u: cells.iter().map(|&c| target.vel_u[c]).collect(),
                vel_v: cells.iter().map(|&c| target.vel_v[c]).collect(),
            }
        })
        .collect();
    Ok(DeltaFrame {
        t_index: target.t_index,
        base: base.t_index,
        entries,
    })
}

/// Overwrites the strata named in `delta` and advances the t_index.
pub fn apply_delta(
    base: &FieldState,
    delta: &DeltaFrame,
    strata: &StrataMap,
) -> Result<FieldState> {
    let mut out = base.clone();
    apply_delta_in_place(&mut out, delta, strata)?;
    Ok(out)
}

pub fn apply_delta_in_place(
    state: &mut FieldState,
    delta: &DeltaFrame,
    strata: &StrataMap,
) -> Result<()> {
    if state.t_index != delta.base {
        return Err(StrataError::Stale {
            expected: delta.base,
            found: state.t_index,
        });
    }
    strata.check_state(state)?;
    for e in &delta.entries {
        let cells = &strata
            .get(e.stratum_id)
            .ok_or(StrataError::UnknownStratum(e.stratum_id))?
            .cells;
        if cells.len() != e.cell_count()
            || e.vel_u.len() != e.cell_count()
            || e.vel_v.len() != e.cell_count()
        {
            return Err(StrataError::DimensionMismatch(format!(
                "stratum {} has {} cells, entry carries {}",
                e.stratum_id,
                cells.len(),
                e.cell_count()
            )));
        }
        for (k, &c) in cells.iter().enumerate() {
            state.scalar[c] = e.scalar[k];
            state.vel_u[c] = e.vel_u[k];
            state.vel_v[c] = e.vel_v[k];
        }
    }
    state.t_index = delta.t_index;
    Ok(())
}

/// Labels a stratum background when its mean per-frame max-abs-diff across
/// the window is at most `rate_eps`, active otherwise.
pub fn classify_layers(
    frames: &[FieldState],
    strata: &StrataMap,
    rate_eps: f64,
    refresh_every: u32,
) -> Result<LayerAssignment> {
    if frames.len() < 2 {
        return Err(StrataError::ShortWindow(frames.len()));
    }
    if rate_eps.is_nan() || rate_eps < 0.0 {
        return Err(StrataError::BadThreshold(rate_eps));
    }
    let mut totals = vec![0.0f64; strata.len()];
    for pair in frames.windows(2) {
        let cs = diff(&pair[0], &pair[1], strata, 0.0)?;
        for (t, d) in totals.iter_mut().zip(&cs.max_abs_diff) {
            *t += d;
        }
    }
    let steps = (frames.len() - 1) as f64;
    let labels = totals
        .into_iter()
        .map(|total| {
            if total / steps <= rate_eps {
                Layer::Background
            } else {
                Layer::Active
            }
        })
        .collect();
    Ok(LayerAssignment {
        labels,
        refresh_every: refresh_every.max(1),
    })
}

/// Builds a frame from background strata of an older `keyframe` and the
/// active strata of `current`.
pub fn compose_layers(
    keyframe: &FieldState,
    current: &FieldState,
    assignment: &LayerAssignment,
    strata: &StrataMap,
) -> Result<FieldState> {
    strata.check_state(keyframe)?;
    strata.check_state(current)?;
    if assignment.labels.len() != strata.len() {
        return Err(StrataError::LabelCount {
            expected: strata.len(),
            found: assignment.labels.len(),
        });
    }
    let mut out = current.clone();
    for (stratum, label) in strata.strata.iter().zip(&assignment.labels) {
        if *label == Layer::Background {
            for &c in &stratum.cells {
                out.scalar[c] = keyframe.scalar[c];
                out.vel_u[c] = keyframe.vel_u[c];
                out.vel_v[c] = keyframe.vel_v[c];
            }
        }
    }
    Ok(out)
}
