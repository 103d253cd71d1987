use std::sync::Arc;

use super::{
    build_stage_graph, Emit, Fanout, Payload, PipelineError, Result, StageGraph, StageSpec,
};
use crate::store::RunRecord;

pub const SOLVE_COST: u64 = 4;
pub const STRATIFY_COST: u64 = 1;
pub const ENCODE_COST: u64 = 1;

/// Two-stage route-finder shape: stage 1 expands a tree of branching `b` and
/// depth `d` by re-entering itself, stage 2 evaluates every node.
pub fn bfs_workload(branching: u32, depth: u32) -> Result<(StageGraph, Vec<Payload>)> {
    if branching == 0 {
        return Err(PipelineError::Workload("branching must be >= 1".into()));
    }
    let graph = build_stage_graph(vec![
        StageSpec::new(1, "expand", 1, Fanout::Tree { branching, depth }),
        StageSpec::new(2, "evaluate", 1, Fanout::Fixed(1)),
    ])?;
    Ok((graph, vec![vec![0, 0]]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchNode {
    /// Index of the parent node.
    pub parent: Option<usize>,
    pub t_branch: u64,
    pub n_steps: u64,
}

/// Shape of a branch tree, independent of any field data.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BranchTree {
    pub nodes: Vec<BranchNode>,
}

impl BranchTree {
    pub fn new(nodes: Vec<BranchNode>) -> Result<Self> {
        for (k, n) in nodes.iter().enumerate() {
            match n.parent {
                Some(p) if p >= nodes.len() || p == k => {
                    return Err(PipelineError::Workload(format!(
                        "node {k} has bad parent {p}"
                    )))
                }
                Some(p) if n.t_branch == 0 || n.t_branch > nodes[p].n_steps => {
                    return Err(PipelineError::Workload(format!(
                        "node {k} branches at {} outside its parent",
                        n.t_branch
                    )))
                }
                None if n.t_branch != 0 => {
                    return Err(PipelineError::Workload(format!("root {k} must start at 0")))
                }
                _ => {}
            }
            if n.n_steps < n.t_branch {
                return Err(PipelineError::Workload(format!(
                    "node {k} ends before it starts"
                )));
            }
        }
        Ok(BranchTree { nodes })
    }

    pub fn from_records(records: &[RunRecord]) -> Result<Self> {
        let index = |id| records.iter().position(|r| &r.id == id);
        let nodes = records
            .iter()
            .map(|r| {
                let parent = match &r.parent {
                    Some(p) => Some(index(p).ok_or_else(|| {
                        PipelineError::Workload(format!("run {} has unknown parent {p}", r.id))
                    })?),
                    None => None,
                };
                Ok(BranchNode {
                    parent,
                    t_branch: r.t_branch,
                    n_steps: r.n_steps,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        BranchTree::new(nodes)
    }

    /// Steps each node computes itself: Σ(n_steps − t_branch).
    pub fn step_count(&self) -> u64 {
        self.nodes.iter().map(|n| n.n_steps - n.t_branch).sum()
    }
}

/// Simulated branching: stage 1 advances `[node, t]` by one step and spawns
/// the next step plus every child branching at `t`; stages 2 and 3 stratify
/// and encode the frame.
pub fn branching_sim_workload(tree: &BranchTree) -> Result<(StageGraph, Vec<Payload>)> {
    let nodes = Arc::new(tree.nodes.clone());
    let advance = {
        let nodes = Arc::clone(&nodes);
        move |p: &Payload| {
            let (node, t) = (p[0] as usize, p[1]);
            let mut out = vec![Emit::Next(p.clone())];
            if t < nodes[node].n_steps {
                out.push(Emit::Respawn(vec![node as u64, t + 1]));
            }
            for (c, child) in nodes.iter().enumerate() {
                if child.parent == Some(node) && child.t_branch == t && child.n_steps > t {
                    out.push(Emit::Respawn(vec![c as u64, t + 1]));
                }
            }
            out
        }
    };
    let graph = build_stage_graph(vec![
        StageSpec::new(1, "advance", SOLVE_COST, Fanout::Custom(Arc::new(advance))),
        StageSpec::new(2, "stratify", STRATIFY_COST, Fanout::Fixed(1)),
        StageSpec::new(3, "encode", ENCODE_COST, Fanout::Fixed(1)),
    ])?;
    let initial: Vec<Payload> = nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.parent.is_none() && n.n_steps > 0)
        .map(|(k, _)| vec![k as u64, 1])
        .collect();
    if initial.is_empty() {
        return Err(PipelineError::Workload("tree has no steps to run".into()));
    }
    Ok((graph, initial))
}
