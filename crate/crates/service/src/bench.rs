//! Scheduler comparison over named workloads.
//!
//! Workload strings:
//! - `bfs:b=B,d=D` route-finder tree with branching `B` and depth `D`
//! - `unit:n=N,k=K` `N` unit-cost stages, `K` items, no fan-out
//! - `branchsim:PATH` the run tree of a store directory or manifest file
//! - `branchsim` the run tree of the store being served

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use branchvis_core::pipeline::{
    bfs_workload, branching_sim_workload, build_stage_graph, execute, BenchReport, BranchTree,
    ExecConfig, Fanout, Payload, SchemeKind, StageGraph, StageSpec,
};
use branchvis_core::store::{Manifest, RunRecord};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Workload {
    Bfs { branching: u32, depth: u32 },
    Unit { stages: usize, items: u64 },
    BranchSim(Option<PathBuf>),
}

fn keyed(args: &str) -> Result<BTreeMap<&str, u64>, ApiError> {
    args.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|kv| {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                ApiError::bad_request(format!("workload argument `{kv}` is not key=value"))
            })?;
            let v = v.trim().parse().map_err(|_| {
                ApiError::bad_request(format!("workload argument `{kv}` is not a count"))
            })?;
            Ok((k.trim(), v))
        })
        .collect()
}

fn take(args: &BTreeMap<&str, u64>, key: &str) -> Result<u64, ApiError> {
    args.get(key).copied().ok_or_else(|| {
        ApiError::bad_request(format!("workload is missing `{key}`")).with_detail(key)
    })
}

impl Workload {
    pub fn parse(s: &str) -> Result<Self, ApiError> {
        let (name, args) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        match name {
            "bfs" => {
                let a = keyed(args)?;
                let (b, d) = (take(&a, "b")?, take(&a, "d")?);
                if b == 0 || b > 64 || d > 32 {
                    return Err(ApiError::bad_request("bfs needs 1 <= b <= 64 and d <= 32"));
                }
                Ok(Workload::Bfs {
                    branching: b as u32,
                    depth: d as u32,
                })
            }
            "unit" => {
                let a = keyed(args)?;
                let (n, k) = (take(&a, "n")?, take(&a, "k")?);
                if n == 0 || k == 0 {
                    return Err(ApiError::bad_request("unit needs n >= 1 and k >= 1"));
                }
                Ok(Workload::Unit {
                    stages: n as usize,
                    items: k,
                })
            }
            "branchsim" if args.is_empty() => Ok(Workload::BranchSim(None)),
            "branchsim" => Ok(Workload::BranchSim(Some(PathBuf::from(args)))),
            other => Err(ApiError::bad_request(format!("unknown workload `{other}`"))
                .with_detail(other.to_string())),
        }
    }

    /// Builds the stage graph; `runs` backs a pathless `branchsim`.
    pub fn build(
        &self,
        runs: Option<&[RunRecord]>,
    ) -> Result<(StageGraph, Vec<Payload>), ApiError> {
        match self {
            Workload::Bfs { branching, depth } => Ok(bfs_workload(*branching, *depth)?),
            Workload::Unit { stages, items } => {
                let graph = build_stage_graph(
                    (1..=*stages)
                        .map(|id| StageSpec::new(id, format!("p{id}"), 1, Fanout::Fixed(1)))
                        .collect(),
                )?;
                Ok((graph, (0..*items).map(|i| vec![i]).collect()))
            }
            Workload::BranchSim(path) => {
                let records = match path {
                    Some(p) => read_manifest(p)?.runs,
                    None => runs
                        .ok_or_else(|| ApiError::bad_request("branchsim needs a manifest path"))?
                        .to_vec(),
                };
                let tree = BranchTree::from_records(&records)?;
                Ok(branching_sim_workload(&tree)?)
            }
        }
    }
}

fn read_manifest(path: &Path) -> Result<Manifest, ApiError> {
    let file = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).map_err(|e| {
        ApiError::bad_request(format!("cannot read {}: {e}", file.display()))
            .with_detail(file.display().to_string())
    })?;
    serde_json::from_str(&text)
        .map_err(|e| ApiError::bad_request(format!("{}: {e}", file.display())))
}

pub fn parse_schemes(list: &str) -> Result<Vec<SchemeKind>, ApiError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse().map_err(ApiError::from))
        .collect()
}

pub fn parse_workers(list: &str) -> Result<Vec<usize>, ApiError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| ApiError::bad_request(format!("worker count `{s}` is not a number")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub scheme: String,
    pub workers: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub workload: String,
    pub reports: Vec<BenchReport>,
    /// Configurations a scheme cannot run, such as a pipeline with fewer
    /// workers than stages.
    pub rejected: Vec<Rejected>,
    pub outputs_agree: bool,
}

/// Runs every (scheme, workers) pair in virtual time.
pub fn run_bench(
    workload: &str,
    schemes: &[SchemeKind],
    workers: &[usize],
    runs: Option<&[RunRecord]>,
) -> Result<BenchOutput, ApiError> {
    let (graph, initial) = Workload::parse(workload)?.build(runs)?;
    if schemes.is_empty() || workers.is_empty() {
        return Err(ApiError::bad_request(
            "need at least one scheme and one worker count",
        ));
    }
    let mut reports = Vec::new();
    let mut rejected = Vec::new();
    for &w in workers {
        for &scheme in schemes {
            let config = ExecConfig::new(scheme, w);
            match execute(&graph, initial.clone(), config) {
                Ok(out) => reports.push(BenchReport::new(config, &out)),
                Err(e) => rejected.push(Rejected {
                    scheme: scheme.to_string(),
                    workers: w,
                    reason: e.to_string(),
                }),
            }
        }
    }
    let outputs_agree = reports
        .windows(2)
        .all(|p| p[0].outputs_hash == p[1].outputs_hash);
    Ok(BenchOutput {
        workload: workload.to_string(),
        reports,
        rejected,
        outputs_agree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_workloads() {
        assert_eq!(
            Workload::parse("bfs:b=3,d=6").unwrap(),
            Workload::Bfs {
                branching: 3,
                depth: 6
            }
        );
        assert_eq!(
            Workload::parse("unit:n=3,k=4").unwrap(),
            Workload::Unit {
                stages: 3,
                items: 4
            }
        );
        assert_eq!(
            Workload::parse("branchsim").unwrap(),
            Workload::BranchSim(None)
        );
        assert!(Workload::parse("bfs:b=3").is_err());
        assert!(Workload::parse("bfs:b=x,d=1").is_err());
        assert!(Workload::parse("dfs:b=1,d=1").is_err());
        assert!(parse_schemes("pipeline,warp").is_err());
        assert_eq!(parse_workers("1, 4,8").unwrap(), vec![1, 4, 8]);
    }
}
