use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::chunk::ChunkId;
use super::StoreError;
use crate::solver::{GridSpec, SolverParams, VelocityField, VelocityKind};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunId(pub String);

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RunId {
    fn from(s: &str) -> Self {
        RunId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locality {
    /// Touches parameters every cell is coupled to.
    Global,
    /// Touches only the source mask.
    Local,
}

/// Parameter overrides applied on top of the parent's effective params.
/// Unknown field names are rejected at deserialization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inflow_amp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inflow_period: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_mask: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<VelocityField>,
}

pub const PARAM_FIELDS: [&str; 7] = [
    "dt",
    "diff",
    "inflow_amp",
    "inflow_period",
    "source_mask",
    "source_rate",
    "velocity",
];

impl ParamPatch {
    pub fn is_empty(&self) -> bool {
        self.touched().is_empty()
    }

    pub fn touched(&self) -> Vec<&'static str> {
        let flags = [
            self.dt.is_some(),
            self.diff.is_some(),
            self.inflow_amp.is_some(),
            self.inflow_period.is_some(),
            self.source_mask.is_some(),
            self.source_rate.is_some(),
            self.velocity.is_some(),
        ];
        PARAM_FIELDS
            .iter()
            .zip(flags)
            .filter(|(_, f)| *f)
            .map(|(n, _)| *n)
            .collect()
    }

    /// An empty patch counts as local: it changes no cell.
    pub fn locality(&self) -> Locality {
        if self.touched().iter().all(|f| *f == "source_mask") {
            Locality::Local
        } else {
            Locality::Global
        }
    }

    pub fn apply(&self, base: &SolverParams) -> SolverParams {
        let mut p = base.clone();
        if let Some(v) = self.dt {
            p.dt = v;
        }
        if let Some(v) = self.diff {
            p.diff = v;
        }
        if let Some(v) = self.inflow_amp {
            p.inflow_amp = v;
        }
        if let Some(v) = self.inflow_period {
            p.inflow_period = v;
        }
        if let Some(v) = &self.source_mask {
            p.source_mask = v.clone();
        }
        if let Some(v) = self.source_rate {
            p.source_rate = v;
        }
        if let Some(v) = self.velocity {
            p.velocity = v;
        }
        p.normalize();
        p
    }

    /// Sets one field from its textual form, as used by `--set key=value`.
    ///
    /// `source_mask` takes `i:j` pairs separated by `;` (empty for none);
    /// `velocity` takes `kind:magnitude` or a bare kind.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), StoreError> {
        let bad = |msg: String| StoreError::InvalidPatch(msg);
        let num = || {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("{key}: `{value}` is not a number")))
        };
        match key {
            "dt" => self.dt = Some(num()?),
            "diff" => self.diff = Some(num()?),
            "inflow_amp" => self.inflow_amp = Some(num()?),
            "inflow_period" => self.inflow_period = Some(num()?),
            "source_rate" => self.source_rate = Some(num()?),
            "source_mask" => {
                let mut cells = Vec::new();
                for part in value.split(';').map(str::trim).filter(|p| !p.is_empty()) {
                    let (i, j) = part
                        .split_once(':')
                        .ok_or_else(|| bad(format!("source_mask: `{part}` is not i:j")))?;
                    let parse = |s: &str| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| bad(format!("source_mask: `{part}` is not i:j")))
                    };
                    cells.push((parse(i)?, parse(j)?));
                }
                self.source_mask = Some(cells);
            }
            "velocity" => {
                let (kind, mag) = match value.split_once(':') {
                    Some((k, m)) => (k, Some(m)),
                    None => (value, None),
                };
                let kind = match kind.trim() {
                    "still" => VelocityKind::Still,
                    "uniform" => VelocityKind::Uniform,
                    "channel" => VelocityKind::Channel,
                    other => return Err(bad(format!("velocity: unknown kind `{other}`"))),
                };
                let magnitude = match mag {
                    Some(m) => m
                        .trim()
                        .parse()
                        .map_err(|_| bad(format!("velocity: `{m}` is not a number")))?,
                    None => self.velocity.map_or(0.0, |v| v.magnitude),
                };
                self.velocity = Some(VelocityField { kind, magnitude });
            }
            other => return Err(bad(format!("unknown parameter `{other}`"))),
        }
        Ok(())
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, StoreError> {
        serde_json::from_value(value).map_err(|e| StoreError::InvalidPatch(e.to_string()))
    }
}

/// Cells whose source term differs between two parameter sets.
pub fn source_mask_difference(a: &SolverParams, b: &SolverParams) -> Vec<(usize, usize)> {
    let a: BTreeSet<_> = a.source_mask.iter().copied().collect();
    let b: BTreeSet<_> = b.source_mask.iter().copied().collect();
    a.symmetric_difference(&b).copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: RunId,
    pub parent: Option<RunId>,
    pub t_branch: u64,
    pub patch: ParamPatch,
    pub n_steps: u64,
    pub status: RunStatus,
    pub checkpoints: Vec<u64>,
    pub checkpoint_every: u64,
    pub grid: GridSpec,
    /// Base parameters; present on roots only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<SolverParams>,
    /// One per entry of `checkpoints`.
    #[serde(default)]
    pub checkpoint_chunks: Vec<ChunkId>,
    /// Deltas for t_branch+1 ..= last stored step, in order.
    #[serde(default)]
    pub delta_chunks: Vec<ChunkId>,
    #[serde(default)]
    pub recomputed_cells: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_at: Option<u64>,
}

impl RunRecord {
    /// Last t_index whose frame can be materialized.
    pub fn available_until(&self) -> u64 {
        self.t_branch + self.delta_chunks.len() as u64
    }

    pub fn delta_chunk(&self, t: u64) -> Option<&ChunkId> {
        if t <= self.t_branch {
            return None;
        }
        self.delta_chunks.get((t - self.t_branch - 1) as usize)
    }

    pub fn checkpoint_at_or_before(&self, t: u64) -> Option<(u64, &ChunkId)> {
        self.checkpoints
            .iter()
            .zip(&self.checkpoint_chunks)
            .filter(|(c, _)| **c <= t)
            .max_by_key(|(c, _)| **c)
            .map(|(c, id)| (*c, id))
    }

    pub fn chunk_ids(&self) -> impl Iterator<Item = &ChunkId> {
        self.checkpoint_chunks.iter().chain(&self.delta_chunks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Tile size used for delta frames, `[tw, th]`.
    pub tile: [usize; 2],
    pub runs: Vec<RunRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            tile: [8, 8],
            runs: Vec::new(),
        }
    }
}

impl Manifest {
    pub fn get(&self, id: &RunId) -> Option<&RunRecord> {
        self.runs.iter().find(|r| &r.id == id)
    }

    pub fn get_mut(&mut self, id: &RunId) -> Option<&mut RunRecord> {
        self.runs.iter_mut().find(|r| &r.id == id)
    }

    pub fn next_id(&self) -> RunId {
        let mut n = self.runs.len() + 1;
        loop {
            let id = RunId(format!("run-{n:04}"));
            if self.get(&id).is_none() {
                return id;
            }
            n += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locality_by_field_name() {
        assert_eq!(ParamPatch::default().locality(), Locality::Local);
        let local = ParamPatch {
            source_mask: Some(vec![(1, 2)]),
            ..Default::default()
        };
        assert_eq!(local.locality(), Locality::Local);
        let global = ParamPatch {
            source_mask: Some(vec![(1, 2)]),
            inflow_amp: Some(2.0),
            ..Default::default()
        };
        assert_eq!(global.locality(), Locality::Global);
        assert_eq!(global.touched(), vec!["inflow_amp", "source_mask"]);
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = ParamPatch::from_json(serde_json::json!({"viscosity": 1.0})).unwrap_err();
        assert!(err.to_string().contains("viscosity"), "{err}");
        let mut p = ParamPatch::default();
        assert!(p.set("viscosity", "1").is_err());
        assert!(p.set("dt", "abc").is_err());
    }

    #[test]
    fn set_parses_text_forms() {
        let mut p = ParamPatch::default();
        p.set("source_mask", "4:4; 10:3").unwrap();
        p.set("velocity", "channel:0.5").unwrap();
        p.set("inflow_amp", "1.1").unwrap();
        assert_eq!(p.source_mask, Some(vec![(4, 4), (10, 3)]));
        assert_eq!(
            p.velocity,
            Some(VelocityField {
                kind: VelocityKind::Channel,
                magnitude: 0.5
            })
        );
        let params = p.apply(&SolverParams::default());
        assert_eq!(params.inflow_amp, 1.1);
        // normalized: sorted by (j, i)
        assert_eq!(params.source_mask, vec![(10, 3), (4, 4)]);
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(ParamPatch::from_json(json).unwrap(), p);
    }

    #[test]
    fn mask_difference_is_symmetric() {
        let a = SolverParams {
            source_mask: vec![(1, 1), (2, 2)],
            ..Default::default()
        };
        let b = SolverParams {
            source_mask: vec![(2, 2), (3, 3)],
            ..Default::default()
        };
        assert_eq!(source_mask_difference(&a, &b), vec![(1, 1), (3, 3)]);
    }
}
