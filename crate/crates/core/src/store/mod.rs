//! Branching run tree with checkpoint-plus-delta persistence.
//!
//! Layout on disk:
//!
//! ```text
//! <dir>/manifest.json          run tree, rewritten via temp file + rename
//! <dir>/chunks/<sha256>.bvck   content-addressed chunk files
//! ```
//!
//! A run owns the frames after its branch point; earlier frames are resolved
//! through its ancestors. Each owned step stores a delta chunk against the
//! previous step, and every `checkpoint_every` steps a full checkpoint chunk.
//! Byte-identical chunks are stored once, whichever run produced them.

pub mod chunk;
mod manifest;

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::{self, ChangeMask, FieldState, GridSpec, SolverError, SolverParams};
use crate::strata::{self, DeltaFrame, Scheme, StrataMap};
use chunk::ChunkId;

pub use manifest::{
    source_mask_difference, Locality, Manifest, ParamPatch, RunId, RunRecord, RunStatus,
    PARAM_FIELDS,
};

pub const DEFAULT_CHECKPOINT_EVERY: u64 = 10;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown run {0}")]
    UnknownRun(RunId),
    #[error("invalid patch: {0}")]
    InvalidPatch(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("missing chunk {0}")]
    MissingChunk(ChunkId),
    #[error("corrupt store: {0}")]
    Corruption(String),
    #[error("not ready: {0}")]
    NotReady(String),
    #[error("run {run} failed at t_index {t_index}: {source}")]
    RunFailed {
        run: RunId,
        t_index: u64,
        source: SolverError,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

impl From<SolverError> for StoreError {
    fn from(e: SolverError) -> Self {
        StoreError::BadRequest(e.to_string())
    }
}

impl From<strata::StrataError> for StoreError {
    fn from(e: strata::StrataError) -> Self {
        StoreError::Corruption(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReuseStats {
    /// Steps served from ancestors rather than simulated by this run.
    pub reused_steps: u64,
    /// Cell updates actually evaluated by this run.
    pub recomputed_cells: u64,
    /// nx · ny · n_steps.
    pub full_cells: u64,
    /// Chunks of this run also referenced by another run.
    pub dedup_chunks: u64,
}

pub struct Store {
    dir: PathBuf,
    manifest: Mutex<Manifest>,
}

impl Store {
    /// Opens the store at `dir`, creating an empty one with 8×8 tiles if
    /// no manifest exists yet.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_with_tile(dir, [8, 8])
    }

    /// `tile` only applies when a new store is created.
    pub fn open_with_tile(dir: impl AsRef<Path>, tile: [usize; 2]) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("chunks"))?;
        let path = dir.join("manifest.json");
        let manifest = if path.exists() {
            let text = fs::read_to_string(&path)?;
            serde_json::from_str(&text)
                .map_err(|e| StoreError::Corruption(format!("manifest.json: {e}")))?
        } else {
            if tile[0] == 0 || tile[1] == 0 {
                return Err(StoreError::BadRequest(
                    "tile dimensions must be non-zero".into(),
                ));
            }
            let m = Manifest {
                tile,
                runs: Vec::new(),
            };
            write_atomic(&path, &serde_json::to_vec_pretty(&m).unwrap())?;
            m
        };
        Ok(Store {
            dir,
            manifest: Mutex::new(manifest),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self) -> MutexGuard<'_, Manifest> {
        self.manifest.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn persist(&self, manifest: &Manifest) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
        write_atomic(&self.dir.join("manifest.json"), &bytes)
    }

    pub fn tile(&self) -> [usize; 2] {
        self.lock().tile
    }

    pub fn strata_for(&self, grid: &GridSpec) -> StrataMap {
        let [tw, th] = self.tile();
        strata::partition(grid, Scheme::Tiles { tw, th }).expect("tile dims validated at open")
    }

    pub fn runs(&self) -> Vec<RunRecord> {
        self.lock().runs.clone()
    }

    pub fn run(&self, id: &RunId) -> Result<RunRecord> {
        self.lock()
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownRun(id.clone()))
    }

    /// Root-first chain of `(run, t_branch)` ending at `id`.
    pub fn lineage(&self, id: &RunId) -> Result<Vec<(RunId, u64)>> {
        Ok(self
            .lineage_records(id)?
            .into_iter()
            .map(|r| (r.id, r.t_branch))
            .collect())
    }

    fn lineage_records(&self, id: &RunId) -> Result<Vec<RunRecord>> {
        let m = self.lock();
        let mut chain = Vec::new();
        let mut seen = HashSet::new();
        let mut cur = m
            .get(id)
            .ok_or_else(|| StoreError::UnknownRun(id.clone()))?;
        loop {
            if !seen.insert(cur.id.clone()) {
                return Err(StoreError::Corruption(format!(
                    "cycle in run tree through {}",
                    cur.id
                )));
            }
            chain.push(cur.clone());
            match &cur.parent {
                None => break,
                Some(p) => {
                    let parent = m.get(p).ok_or_else(|| {
                        StoreError::Corruption(format!("run {} has missing parent {p}", cur.id))
                    })?;
                    if cur.t_branch == 0 || cur.t_branch > parent.n_steps {
                        return Err(StoreError::Corruption(format!(
                            "run {} branches at {} outside parent {}",
                            cur.id, cur.t_branch, parent.id
                        )));
                    }
                    cur = parent;
                }
            }
        }
        chain.reverse();
        Ok(chain)
    }

    /// Root params overlaid by every patch along the lineage.
    pub fn effective_params(&self, id: &RunId) -> Result<SolverParams> {
        let chain = self.lineage_records(id)?;
        let root = chain[0]
            .params
            .clone()
            .ok_or_else(|| StoreError::Corruption(format!("root {} has no params", chain[0].id)))?;
        Ok(chain[1..].iter().fold(root, |p, r| r.patch.apply(&p)))
    }

    /// Validates and records a root run in `running` state.
    pub fn register_root(
        &self,
        grid: GridSpec,
        mut params: SolverParams,
        n_steps: u64,
        checkpoint_every: u64,
    ) -> Result<RunId> {
        if n_steps == 0 {
            return Err(StoreError::BadRequest("n_steps must be >= 1".into()));
        }
        if checkpoint_every == 0 {
            return Err(StoreError::BadRequest(
                "checkpoint_every must be >= 1".into(),
            ));
        }
        params.normalize();
        params.validate(&grid)?;
        let mut m = self.lock();
        let id = m.next_id();
        m.runs.push(RunRecord {
            id: id.clone(),
            parent: None,
            t_branch: 0,
            patch: ParamPatch::default(),
            n_steps,
            status: RunStatus::Running,
            checkpoints: Vec::new(),
            checkpoint_every,
            grid,
            params: Some(params),
            checkpoint_chunks: Vec::new(),
            delta_chunks: Vec::new(),
            recomputed_cells: 0,
            failed_at: None,
        });
        self.persist(&m)?;
        Ok(id)
    }

    /// Validates and records a branch in `running` state. The child runs to
    /// `n_steps`, defaulting to the parent's length.
    pub fn register_branch(
        &self,
        parent: &RunId,
        t_branch: u64,
        patch: ParamPatch,
        n_steps: Option<u64>,
    ) -> Result<RunId> {
        let parent_rec = self.run(parent)?;
        if t_branch == 0 {
            return Err(StoreError::BadRequest(
                "t_branch must be >= 1; start a new root to change initial conditions".into(),
            ));
        }
        if t_branch > parent_rec.n_steps {
            return Err(StoreError::BadRequest(format!(
                "t_branch {t_branch} beyond parent {parent} trajectory of {} steps",
                parent_rec.n_steps
            )));
        }
        if t_branch > parent_rec.available_until() {
            return Err(StoreError::NotReady(format!(
                "parent {parent} has frames only up to {}",
                parent_rec.available_until()
            )));
        }
        let n_steps = n_steps.unwrap_or(parent_rec.n_steps);
        if n_steps <= t_branch {
            return Err(StoreError::BadRequest(format!(
                "n_steps {n_steps} must exceed t_branch {t_branch}"
            )));
        }
        let params = patch.apply(&self.effective_params(parent)?);
        params.validate(&parent_rec.grid)?;

        let mut m = self.lock();
        let id = m.next_id();
        m.runs.push(RunRecord {
            id: id.clone(),
            parent: Some(parent.clone()),
            t_branch,
            patch,
            n_steps,
            status: RunStatus::Running,
            checkpoints: Vec::new(),
            checkpoint_every: parent_rec.checkpoint_every,
            grid: parent_rec.grid,
            params: None,
            checkpoint_chunks: Vec::new(),
            delta_chunks: Vec::new(),
            recomputed_cells: 0,
            failed_at: None,
        });
        self.persist(&m)?;
        Ok(id)
    }

    /// Runs the solver for a registered run and persists its frames.
    pub fn simulate(&self, id: &RunId) -> Result<()> {
        let rec = self.run(id)?;
        if rec.status != RunStatus::Running {
            return Err(StoreError::Conflict(format!("run {id} already simulated")));
        }
        let grid = rec.grid;
        let params = self.effective_params(id)?;
        let strata = self.strata_for(&grid);

        let mut out = RunOutput::default();
        let mut state = match &rec.parent {
            None => {
                let init = solver::init_state(&grid, &params)?;
                out.checkpoint(self, &grid, &init)?;
                init
            }
            Some(p) => self.materialize(p, rec.t_branch)?,
        };

        // Unchanged regions are copied from the parent for local patches.
        let mut follow = match &rec.parent {
            Some(p) if rec.patch.locality() == Locality::Local => {
                let parent_params = self.effective_params(p)?;
                let seed =
                    ChangeMask::from_cells(&grid, source_mask_difference(&params, &parent_params));
                let cursor = FrameCursor::new(self, p, state.clone())?;
                Some((cursor, seed, ChangeMask::empty(&grid)))
            }
            _ => None,
        };

        let result = (|| -> Result<()> {
            for t in rec.t_branch + 1..=rec.n_steps {
                let parent_next = match &mut follow {
                    Some((cursor, _, _)) if t <= cursor.limit() => Some(cursor.advance()?),
                    _ => None,
                };
                let next = match (parent_next, &mut follow) {
                    (Some(parent_next), Some((_, seed, mask))) => {
                        let mut input = mask.clone();
                        input.union_with(seed);
                        let inc =
                            solver::step_incremental(&state, &parent_next, &input, &grid, &params)
                                .map_err(|e| failed(id, t, e))?;
                        *mask = inc.mask;
                        out.recomputed += inc.recomputed as u64;
                        inc.state
                    }
                    _ => {
                        out.recomputed += grid.cells() as u64;
                        solver::step(&state, &grid, &params).map_err(|e| failed(id, t, e))?
                    }
                };
                let delta = strata::encode_delta(&state, &next, &strata, 0.0)?;
                out.deltas
                    .push(self.put_chunk(&chunk::encode_delta(&grid, &delta))?);
                if t % rec.checkpoint_every == 0 {
                    out.checkpoint(self, &grid, &next)?;
                }
                state = next;
            }
            Ok(())
        })();

        let failed_at = match &result {
            Err(StoreError::RunFailed { t_index, .. }) => Some(*t_index),
            _ => None,
        };
        let mut m = self.lock();
        let r = m
            .get_mut(id)
            .ok_or_else(|| StoreError::UnknownRun(id.clone()))?;
        r.checkpoints = out.checkpoints;
        r.checkpoint_chunks = out.checkpoint_chunks;
        r.delta_chunks = out.deltas;
        r.recomputed_cells = out.recomputed;
        match (&result, failed_at) {
            (Ok(()), _) => r.status = RunStatus::Complete,
            (Err(_), at) => {
                r.status = RunStatus::Failed;
                r.failed_at = at.or(Some(rec.t_branch + 1 + r.delta_chunks.len() as u64));
            }
        }
        self.persist(&m)?;
        result
    }

    /// Runs a new root to completion and returns its id.
    pub fn create_root(
        &self,
        grid: GridSpec,
        params: SolverParams,
        n_steps: u64,
        checkpoint_every: u64,
    ) -> Result<RunId> {
        let id = self.register_root(grid, params, n_steps, checkpoint_every)?;
        self.simulate(&id)?;
        Ok(id)
    }

    /// Forks `parent` at `t_branch` with `patch` and runs the child to the
    /// parent's length.
    pub fn branch(&self, parent: &RunId, t_branch: u64, patch: ParamPatch) -> Result<RunId> {
        self.branch_with_steps(parent, t_branch, patch, None)
    }

    pub fn branch_with_steps(
        &self,
        parent: &RunId,
        t_branch: u64,
        patch: ParamPatch,
        n_steps: Option<u64>,
    ) -> Result<RunId> {
        let id = self.register_branch(parent, t_branch, patch, n_steps)?;
        self.simulate(&id)?;
        Ok(id)
    }

    /// Reconstructs the state of `run` at `t` from the nearest checkpoint and
    /// the deltas after it.
    pub fn materialize(&self, run: &RunId, t: u64) -> Result<FieldState> {
        let chain = self.lineage_records(run)?;
        materialize_chain(self, &chain, t)
    }

    /// Full-frame checkpoint chunk for `run` at `t`, with its content id.
    pub fn frame_chunk(&self, run: &RunId, t: u64) -> Result<(ChunkId, Vec<u8>)> {
        let rec = self.run(run)?;
        let state = self.materialize(run, t)?;
        let bytes = chunk::encode_checkpoint(&rec.grid, &state);
        Ok((ChunkId::of(&bytes), bytes))
    }

    /// Stored delta chunks taking `run` from `from` to `to`, in order.
    pub fn delta_chunks(&self, run: &RunId, from: u64, to: u64) -> Result<Vec<(ChunkId, Vec<u8>)>> {
        if from > to {
            return Err(StoreError::BadRequest(format!("from {from} > to {to}")));
        }
        let chain = self.lineage_records(run)?;
        check_range(chain.last().unwrap(), to)?;
        (from + 1..=to)
            .map(|t| {
                let id = owner(&chain, t).delta_chunk(t).cloned().ok_or_else(|| {
                    StoreError::NotReady(format!("no delta for {run} at t_index {t}"))
                })?;
                let bytes = self.read_chunk(&id)?;
                Ok((id, bytes))
            })
            .collect()
    }

    /// Decoded delta taking `run` from `t - 1` to `t`.
    pub fn delta(&self, run: &RunId, t: u64) -> Result<DeltaFrame> {
        let chain = self.lineage_records(run)?;
        check_range(chain.last().unwrap(), t)?;
        let rec = owner(&chain, t);
        let id = rec
            .delta_chunk(t)
            .ok_or_else(|| StoreError::NotReady(format!("no delta for {run} at t_index {t}")))?;
        chunk::decode_delta(&self.read_chunk(id)?, &rec.grid)
    }

    /// Consecutive frames `from ..= to`.
    pub fn frames(&self, run: &RunId, from: u64, to: u64) -> Result<Vec<FieldState>> {
        if from > to {
            return Err(StoreError::BadRequest(format!("from {from} > to {to}")));
        }
        let first = self.materialize(run, from)?;
        let mut cursor = FrameCursor::new(self, run, first.clone())?;
        let mut out = vec![first];
        for _ in from..to {
            out.push(cursor.advance()?);
        }
        Ok(out)
    }

    pub fn stats(&self, run: &RunId) -> Result<ReuseStats> {
        let m = self.lock();
        let rec = m
            .get(run)
            .ok_or_else(|| StoreError::UnknownRun(run.clone()))?;
        if rec.status != RunStatus::Complete {
            return Err(StoreError::NotReady(format!(
                "run {run} is {:?}",
                rec.status
            )));
        }
        let others: HashSet<&ChunkId> = m
            .runs
            .iter()
            .filter(|r| r.id != rec.id)
            .flat_map(|r| r.chunk_ids())
            .collect();
        let dedup = rec.chunk_ids().filter(|c| others.contains(c)).count() as u64;
        Ok(ReuseStats {
            reused_steps: rec.t_branch,
            recomputed_cells: rec.recomputed_cells,
            full_cells: (rec.grid.cells() as u64) * rec.n_steps,
            dedup_chunks: dedup,
        })
    }

    fn chunk_path(&self, id: &ChunkId) -> PathBuf {
        self.dir.join("chunks").join(format!("{id}.bvck"))
    }

    fn put_chunk(&self, bytes: &[u8]) -> Result<ChunkId> {
        let id = ChunkId::of(bytes);
        let path = self.chunk_path(&id);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(id)
    }

    /// Reads a chunk and checks that its content matches its id.
    pub fn read_chunk(&self, id: &ChunkId) -> Result<Vec<u8>> {
        let bytes = match fs::read(self.chunk_path(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::MissingChunk(id.clone()))
            }
            Err(e) => return Err(e.into()),
        };
        if &ChunkId::of(&bytes) != id {
            return Err(StoreError::Corruption(format!(
                "chunk {id} content does not match its id"
            )));
        }
        Ok(bytes)
    }
}

fn failed(run: &RunId, t: u64, source: SolverError) -> StoreError {
    match source {
        SolverError::Instability { .. } => StoreError::RunFailed {
            run: run.clone(),
            t_index: t,
            source,
        },
        other => StoreError::from(other),
    }
}

#[derive(Default)]
struct RunOutput {
    checkpoints: Vec<u64>,
    checkpoint_chunks: Vec<ChunkId>,
    deltas: Vec<ChunkId>,
    recomputed: u64,
}

impl RunOutput {
    fn checkpoint(&mut self, store: &Store, grid: &GridSpec, state: &FieldState) -> Result<()> {
        let id = store.put_chunk(&chunk::encode_checkpoint(grid, state))?;
        self.checkpoints.push(state.t_index);
        self.checkpoint_chunks.push(id);
        Ok(())
    }
}

fn check_range(rec: &RunRecord, t: u64) -> Result<()> {
    if t > rec.n_steps {
        return Err(StoreError::BadRequest(format!(
            "t_index {t} beyond run {} of {} steps",
            rec.id, rec.n_steps
        )));
    }
    if t > rec.available_until() {
        return Err(StoreError::NotReady(format!(
            "run {} has frames only up to {}",
            rec.id,
            rec.available_until()
        )));
    }
    Ok(())
}

/// The run in `chain` (root-first) that owns the frame at `t`.
fn owner(chain: &[RunRecord], t: u64) -> &RunRecord {
    chain
        .iter()
        .rev()
        .find(|r| r.parent.is_none() || t > r.t_branch)
        .expect("chain starts at a root")
}

fn materialize_chain(store: &Store, chain: &[RunRecord], t: u64) -> Result<FieldState> {
    let target = chain.last().expect("non-empty lineage");
    check_range(target, t)?;
    let pos = chain
        .iter()
        .rposition(|r| r.parent.is_none() || t > r.t_branch)
        .expect("chain starts at a root");
    let rec = &chain[pos];
    let mut state = match rec.checkpoint_at_or_before(t) {
        Some((_, id)) => chunk::decode_checkpoint(&store.read_chunk(id)?, &rec.grid)?,
        None if pos > 0 => materialize_chain(store, &chain[..pos], rec.t_branch)?,
        None => {
            return Err(StoreError::Corruption(format!(
                "root {} has no checkpoint at or before {t}",
                rec.id
            )))
        }
    };
    let strata = store.strata_for(&rec.grid);
    for k in state.t_index + 1..=t {
        let id = rec
            .delta_chunk(k)
            .ok_or_else(|| StoreError::Corruption(format!("run {} lacks delta {k}", rec.id)))?;
        let delta = chunk::decode_delta(&store.read_chunk(id)?, &rec.grid)?;
        strata::apply_delta_in_place(&mut state, &delta, &strata)?;
    }
    Ok(state)
}

/// Walks a run's trajectory forward one delta at a time.
pub struct FrameCursor<'a> {
    store: &'a Store,
    chain: Vec<RunRecord>,
    strata: StrataMap,
    state: FieldState,
}

impl<'a> FrameCursor<'a> {
    /// `start` must be the run's state at `start.t_index`.
    pub fn new(store: &'a Store, run: &RunId, start: FieldState) -> Result<Self> {
        let chain = store.lineage_records(run)?;
        let strata = store.strata_for(&chain[0].grid);
        Ok(FrameCursor {
            store,
            chain,
            strata,
            state: start,
        })
    }

    pub fn state(&self) -> &FieldState {
        &self.state
    }

    /// Last t_index this cursor can reach.
    pub fn limit(&self) -> u64 {
        self.chain.last().unwrap().available_until()
    }

    pub fn advance(&mut self) -> Result<FieldState> {
        let t = self.state.t_index + 1;
        check_range(self.chain.last().unwrap(), t)?;
        let rec = owner(&self.chain, t);
        let id = rec
            .delta_chunk(t)
            .ok_or_else(|| StoreError::Corruption(format!("run {} lacks delta {t}", rec.id)))?;
        let delta = chunk::decode_delta(&self.store.read_chunk(id)?, &rec.grid)?;
        strata::apply_delta_in_place(&mut self.state, &delta, &self.strata)?;
        Ok(self.state.clone())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "tmp.{}.{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
