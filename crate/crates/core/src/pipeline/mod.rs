//! Stage-decomposed execution in deterministic virtual time.
//!
//! A program is a linear chain of stages `1..=n`. Processing an item at a
//! stage takes that stage's cost in ticks and emits zero or more items, each
//! either continuing to the next stage or re-entering the same stage as a new
//! stream (the way a route finder's expansion step feeds itself). Items
//! leaving stage `n` are the outputs.
//!
//! Four schemes share the same event loop and differ only in which ready item
//! a free worker may take:
//!
//! | scheme                 | worker `w` takes                                   |
//! |------------------------|----------------------------------------------------|
//! | `Sequential`           | worker 0 only; deepest stage first, then lowest id |
//! | `Pipeline`             | stage `w + 1` only, lowest id                      |
//! | `ParallelPipelines(p)` | lane `w / n`, stage `w % n + 1`, lowest id         |
//! | `Expanding`            | any stage, lowest `(stage, id)`                    |

mod threaded;
mod workload;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use threaded::execute_threaded;
pub use workload::{
    bfs_workload, branching_sim_workload, BranchNode, BranchTree, ENCODE_COST, SOLVE_COST,
    STRATIFY_COST,
};

/// Opaque per-item datum.
pub type Payload = Vec<u64>;

/// Upper bound on items created by one execution.
pub const MAX_ITEMS: u64 = 50_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("stage graph needs at least one stage")]
    EmptyGraph,
    #[error("stage ids must run 1..=n; expected {expected}, found {found}")]
    StageGap { expected: usize, found: usize },
    #[error("stage {0} must have a positive cost")]
    ZeroCost(usize),
    #[error("initial work set is empty")]
    EmptyWork,
    #[error("rejected config: {0}")]
    Config(String),
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("execution exceeded {MAX_ITEMS} items")]
    TooManyItems,
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Emit {
    /// Continue to the next stage (or leave as output after the last).
    Next(Payload),
    /// Start a new stream at the same stage.
    Respawn(Payload),
}

pub type FanoutFn = Arc<dyn Fn(&Payload) -> Vec<Emit> + Send + Sync>;

#[derive(Clone)]
pub enum Fanout {
    /// `m` items to the next stage; with `m > 1` each gets its index appended.
    Fixed(u32),
    /// Tree expansion over payloads `[depth, index]`: the node itself moves on,
    /// and below `depth` its `branching` children re-enter this stage.
    Tree {
        branching: u32,
        depth: u32,
    },
    Custom(FanoutFn),
}

impl fmt::Debug for Fanout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fanout::Fixed(m) => write!(f, "Fixed({m})"),
            Fanout::Tree { branching, depth } => {
                write!(f, "Tree {{ branching: {branching}, depth: {depth} }}")
            }
            Fanout::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl Fanout {
    pub fn apply(&self, payload: &Payload) -> Vec<Emit> {
        match self {
            Fanout::Fixed(0) => Vec::new(),
            Fanout::Fixed(1) => vec![Emit::Next(payload.clone())],
            Fanout::Fixed(m) => (0..*m as u64)
                .map(|k| {
                    let mut p = payload.clone();
                    p.push(k);
                    Emit::Next(p)
                })
                .collect(),
            Fanout::Tree { branching, depth } => {
                let (d, index) = (payload[0], payload[1]);
                let mut out = vec![Emit::Next(payload.clone())];
                if d < *depth as u64 {
                    let b = *branching as u64;
                    out.extend((0..b).map(|c| Emit::Respawn(vec![d + 1, index * b + c])));
                }
                out
            }
            Fanout::Custom(f) => f(payload),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageSpec {
    pub id: usize,
    pub name: String,
    /// Virtual ticks per item.
    pub cost: u64,
    pub fanout: Fanout,
}

impl StageSpec {
    pub fn new(id: usize, name: impl Into<String>, cost: u64, fanout: Fanout) -> Self {
        StageSpec {
            id,
            name: name.into(),
            cost,
            fanout,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageGraph {
    stages: Vec<StageSpec>,
}

impl StageGraph {
    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Links between consecutive stages.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (1..self.stages.len()).map(|s| (s, s + 1)).collect()
    }

    fn stage(&self, id: usize) -> &StageSpec {
        &self.stages[id - 1]
    }
}

/// Checks that stages are numbered `1..=n` and have positive costs.
pub fn build_stage_graph(mut stages: Vec<StageSpec>) -> Result<StageGraph> {
    if stages.is_empty() {
        return Err(PipelineError::EmptyGraph);
    }
    stages.sort_by_key(|s| s.id);
    for (k, s) in stages.iter().enumerate() {
        if s.id != k + 1 {
            return Err(PipelineError::StageGap {
                expected: k + 1,
                found: s.id,
            });
        }
        if s.cost == 0 {
            return Err(PipelineError::ZeroCost(s.id));
        }
    }
    Ok(StageGraph { stages })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Sequential,
    Pipeline,
    ParallelPipelines(usize),
    Expanding,
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeKind::Sequential => f.write_str("sequential"),
            SchemeKind::Pipeline => f.write_str("pipeline"),
            SchemeKind::ParallelPipelines(p) => write!(f, "parallel:{p}"),
            SchemeKind::Expanding => f.write_str("expanding"),
        }
    }
}

impl FromStr for SchemeKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "sequential" => return Ok(SchemeKind::Sequential),
            "pipeline" => return Ok(SchemeKind::Pipeline),
            "expanding" => return Ok(SchemeKind::Expanding),
            _ => {}
        }
        if let Some((name, count)) = s.split_once(':') {
            if name == "parallel" || name == "parallel_pipelines" {
                let p = count
                    .parse()
                    .map_err(|_| PipelineError::Config(format!("bad pipeline count in `{s}`")))?;
                return Ok(SchemeKind::ParallelPipelines(p));
            }
        }
        Err(PipelineError::Config(format!("unknown scheme `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecConfig {
    pub scheme: SchemeKind,
    pub workers: usize,
}

impl ExecConfig {
    pub fn new(scheme: SchemeKind, workers: usize) -> Self {
        ExecConfig { scheme, workers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecMetrics {
    pub makespan: u64,
    /// Busy ticks per worker.
    pub busy: Vec<u64>,
    /// Σbusy / (workers · makespan).
    pub utilization: f64,
    /// Items processed by each stage, stage 1 first.
    pub items_per_stage: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct ExecOutcome {
    /// Payloads that left the last stage, sorted.
    pub outputs: Vec<Payload>,
    pub metrics: ExecMetrics,
}

/// Hex SHA-256 over the sorted output multiset.
pub fn outputs_hash(outputs: &[Payload]) -> String {
    let mut sorted: Vec<&Payload> = outputs.iter().collect();
    sorted.sort();
    let mut h = Sha256::new();
    for p in sorted {
        h.update((p.len() as u64).to_le_bytes());
        for w in p {
            h.update(w.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Ready items keyed by (stage, lane, id).
type ReadySet = BTreeMap<(usize, usize, u64), Payload>;

struct Running {
    stage: usize,
    lane: usize,
    payload: Payload,
}

/// Runs `initial` through `graph` under `config` in virtual time.
pub fn execute(
    graph: &StageGraph,
    initial: Vec<Payload>,
    config: ExecConfig,
) -> Result<ExecOutcome> {
    let n = graph.len();
    if initial.is_empty() {
        return Err(PipelineError::EmptyWork);
    }
    if config.workers == 0 {
        return Err(PipelineError::Config("workers must be >= 1".into()));
    }
    let lanes = match config.scheme {
        SchemeKind::Pipeline if config.workers < n => {
            return Err(PipelineError::Config(format!(
                "pipeline needs one worker per stage: {} workers < {n} stages",
                config.workers
            )))
        }
        SchemeKind::ParallelPipelines(0) => {
            return Err(PipelineError::Config(
                "parallel pipelines need a count >= 1".into(),
            ))
        }
        SchemeKind::ParallelPipelines(p) if config.workers < p * n => {
            return Err(PipelineError::Config(format!(
                "{p} parallel pipelines of {n} stages need {} workers, got {}",
                p * n,
                config.workers
            )))
        }
        SchemeKind::ParallelPipelines(p) => p,
        _ => 1,
    };

    let mut ready = ReadySet::new();
    let mut next_id = 0u64;
    for (k, payload) in initial.into_iter().enumerate() {
        ready.insert((1, k % lanes, next_id), payload);
        next_id += 1;
    }

    let workers = config.workers;
    let mut busy = vec![0u64; workers];
    let mut running: Vec<Option<Running>> = (0..workers).map(|_| None).collect();
    let mut events: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
    let mut items_per_stage = vec![0u64; n];
    let mut outputs = Vec::new();
    let mut now = 0u64;

    loop {
        for w in 0..workers {
            if running[w].is_some() {
                continue;
            }
            let Some(key) = pick(&ready, config.scheme, w, n) else {
                continue;
            };
            let payload = ready.remove(&key).unwrap();
            let (stage, lane, _) = key;
            let cost = graph.stage(stage).cost;
            busy[w] += cost;
            items_per_stage[stage - 1] += 1;
            running[w] = Some(Running {
                stage,
                lane,
                payload,
            });
            events.push(Reverse((now + cost, w)));
        }

        let Some(Reverse((t, _))) = events.peek().copied() else {
            break;
        };
        now = t;
        let mut finished = Vec::new();
        while let Some(Reverse((t2, w))) = events.peek().copied() {
            if t2 != now {
                break;
            }
            events.pop();
            finished.push(w);
        }
        finished.sort_unstable();
        for w in finished {
            let item = running[w].take().expect("event for idle worker");
            for emit in graph.stage(item.stage).fanout.apply(&item.payload) {
                let (stage, payload) = match emit {
                    Emit::Next(p) if item.stage == n => {
                        outputs.push(p);
                        continue;
                    }
                    Emit::Next(p) => (item.stage + 1, p),
                    Emit::Respawn(p) => (item.stage, p),
                };
                ready.insert((stage, item.lane, next_id), payload);
                next_id += 1;
                if next_id > MAX_ITEMS {
                    return Err(PipelineError::TooManyItems);
                }
            }
        }
    }

    outputs.sort();
    let total: u64 = busy.iter().sum();
    let utilization = if now == 0 {
        0.0
    } else {
        total as f64 / (workers as f64 * now as f64)
    };
    Ok(ExecOutcome {
        outputs,
        metrics: ExecMetrics {
            makespan: now,
            busy,
            utilization,
            items_per_stage,
        },
    })
}

fn lowest_in(ready: &ReadySet, stage: usize, lane: usize) -> Option<(usize, usize, u64)> {
    ready
        .range((stage, lane, 0)..=(stage, lane, u64::MAX))
        .next()
        .map(|(k, _)| *k)
}

fn pick(
    ready: &ReadySet,
    scheme: SchemeKind,
    worker: usize,
    n: usize,
) -> Option<(usize, usize, u64)> {
    match scheme {
        SchemeKind::Expanding => ready.keys().next().copied(),
        SchemeKind::Sequential if worker == 0 => {
            let (&(stage, _, _), _) = ready.last_key_value()?;
            lowest_in(ready, stage, 0)
        }
        SchemeKind::Sequential => None,
        SchemeKind::Pipeline => (worker < n)
            .then(|| lowest_in(ready, worker + 1, 0))
            .flatten(),
        SchemeKind::ParallelPipelines(p) => {
            let lane = worker / n;
            (lane < p)
                .then(|| lowest_in(ready, worker % n + 1, lane))
                .flatten()
        }
    }
}

/// One row of a scheduler comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scheme: String,
    pub workers: usize,
    pub makespan: u64,
    pub utilization: f64,
    pub items_per_stage: Vec<u64>,
    pub outputs_hash: String,
}

impl BenchReport {
    pub fn new(config: ExecConfig, outcome: &ExecOutcome) -> Self {
        BenchReport {
            scheme: config.scheme.to_string(),
            workers: config.workers,
            makespan: outcome.metrics.makespan,
            utilization: outcome.metrics.utilization,
            items_per_stage: outcome.metrics.items_per_stage.clone(),
            outputs_hash: outputs_hash(&outcome.outputs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_stages(n: usize) -> StageGraph {
        build_stage_graph(
            (1..=n)
                .map(|id| StageSpec::new(id, format!("s{id}"), 1, Fanout::Fixed(1)))
                .collect(),
        )
        .unwrap()
    }

    fn items(k: u64) -> Vec<Payload> {
        (0..k).map(|i| vec![i]).collect()
    }

    /// Brute-force oracle for a unit-cost pipeline without fan-out: item `i`
    /// finishes stage `s` at max(finish(i, s-1), finish(i-1, s)) + 1.
    fn pipeline_oracle(n: usize, k: usize) -> u64 {
        let mut finish = vec![vec![0u64; n + 1]; k + 1];
        for i in 1..=k {
            for s in 1..=n {
                finish[i][s] = finish[i][s - 1].max(finish[i - 1][s]) + 1;
            }
        }
        finish[k][n]
    }

    #[test]
    fn graph_shape() {
        let g = unit_stages(3);
        assert_eq!(g.len(), 3);
        assert_eq!(g.edges(), vec![(1, 2), (2, 3)]);
        assert!(unit_stages(1).edges().is_empty());
        let gap = build_stage_graph(vec![
            StageSpec::new(1, "a", 1, Fanout::Fixed(1)),
            StageSpec::new(3, "c", 1, Fanout::Fixed(1)),
        ]);
        assert_eq!(
            gap.unwrap_err(),
            PipelineError::StageGap {
                expected: 2,
                found: 3
            }
        );
        assert_eq!(
            build_stage_graph(vec![]).unwrap_err(),
            PipelineError::EmptyGraph
        );
        assert!(build_stage_graph(vec![StageSpec::new(1, "a", 0, Fanout::Fixed(1))]).is_err());
    }

    #[test]
    fn unit_pipeline_makespan() {
        let g = unit_stages(3);
        for k in [1u64, 4, 16] {
            let out = execute(&g, items(k), ExecConfig::new(SchemeKind::Pipeline, 3)).unwrap();
            assert_eq!(out.metrics.makespan, pipeline_oracle(3, k as usize));
            assert_eq!(out.metrics.makespan, 3 + k - 1);
        }
    }

    #[test]
    fn single_item_any_scheme() {
        let g = unit_stages(3);
        for scheme in [
            SchemeKind::Sequential,
            SchemeKind::Pipeline,
            SchemeKind::ParallelPipelines(2),
            SchemeKind::Expanding,
        ] {
            let out = execute(&g, items(1), ExecConfig::new(scheme, 6)).unwrap();
            assert_eq!(out.metrics.makespan, 3, "{scheme}");
            assert_eq!(out.outputs, vec![vec![0]]);
        }
    }

    #[test]
    fn pipeline_needs_enough_workers() {
        let g = unit_stages(3);
        assert!(matches!(
            execute(&g, items(2), ExecConfig::new(SchemeKind::Pipeline, 2)),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            execute(
                &g,
                items(2),
                ExecConfig::new(SchemeKind::ParallelPipelines(2), 5)
            ),
            Err(PipelineError::Config(_))
        ));
        assert!(execute(&g, items(2), ExecConfig::new(SchemeKind::Expanding, 0)).is_err());
        assert_eq!(
            execute(&g, vec![], ExecConfig::new(SchemeKind::Expanding, 1)).unwrap_err(),
            PipelineError::EmptyWork
        );
    }

    #[test]
    fn fanout_root_expanding_beats_pipeline() {
        let g = build_stage_graph(vec![
            StageSpec::new(1, "split", 1, Fanout::Fixed(3)),
            StageSpec::new(2, "work", 2, Fanout::Fixed(1)),
            StageSpec::new(3, "emit", 1, Fanout::Fixed(1)),
        ])
        .unwrap();
        let pipe = execute(&g, items(1), ExecConfig::new(SchemeKind::Pipeline, 4)).unwrap();
        let exp = execute(&g, items(1), ExecConfig::new(SchemeKind::Expanding, 4)).unwrap();
        // pipeline: split 0-1, work 1-3,3-5,5-7, emit ends at 8.
        assert_eq!(pipe.metrics.makespan, 8);
        // expanding: three workers run the children in parallel: 1 + 2 + 1.
        assert_eq!(exp.metrics.makespan, 4);
        assert_eq!(exp.outputs, pipe.outputs);
        assert_eq!(exp.metrics.items_per_stage, vec![1, 3, 3]);
    }

    #[test]
    fn one_worker_means_total_work() {
        let (g, w) = bfs_workload(2, 3).unwrap();
        let work: u64 = 15 + 15;
        let seq = execute(&g, w.clone(), ExecConfig::new(SchemeKind::Sequential, 1)).unwrap();
        let exp = execute(&g, w, ExecConfig::new(SchemeKind::Expanding, 1)).unwrap();
        assert_eq!(seq.metrics.makespan, work);
        assert_eq!(exp.metrics.makespan, work);
        assert_eq!(seq.metrics.utilization, 1.0);
    }

    #[test]
    fn scheme_names_roundtrip() {
        for s in ["sequential", "pipeline", "parallel:3", "expanding"] {
            assert_eq!(s.parse::<SchemeKind>().unwrap().to_string(), s);
        }
        assert_eq!(
            "parallel_pipelines:2".parse::<SchemeKind>().unwrap(),
            SchemeKind::ParallelPipelines(2)
        );
        assert!("warp".parse::<SchemeKind>().is_err());
        assert!("parallel:x".parse::<SchemeKind>().is_err());
    }

    fn random_graph(costs: &[u64], fanouts: &[u32]) -> StageGraph {
        build_stage_graph(
            costs
                .iter()
                .zip(fanouts)
                .enumerate()
                .map(|(k, (&c, &f))| {
                    StageSpec::new(k + 1, format!("s{}", k + 1), c, Fanout::Fixed(f))
                })
                .collect(),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn schemes_agree_on_outputs(
            costs in prop::collection::vec(1u64..5, 1..5),
            fan in prop::collection::vec(0u32..4, 5),
            k in 1u64..6,
            extra in 0usize..4,
        ) {
            let n = costs.len();
            let g = random_graph(&costs, &fan[..n]);
            let workers = 2 * n + extra;
            let mut hashes = Vec::new();
            let mut first: Option<ExecMetrics> = None;
            for scheme in [SchemeKind::Sequential, SchemeKind::Pipeline, SchemeKind::ParallelPipelines(2), SchemeKind::Expanding] {
                let out = execute(&g, items(k), ExecConfig::new(scheme, workers)).unwrap();
                prop_assert!(out.metrics.utilization <= 1.0 && out.metrics.utilization >= 0.0);
                prop_assert_eq!(out.metrics.items_per_stage[0], k);
                hashes.push(outputs_hash(&out.outputs));
                if scheme == SchemeKind::Expanding {
                    let again = execute(&g, items(k), ExecConfig::new(scheme, workers)).unwrap();
                    prop_assert_eq!(&again.metrics, &out.metrics);
                    first = Some(out.metrics);
                }
            }
            prop_assert!(hashes.windows(2).all(|w| w[0] == w[1]));
            prop_assert!(first.is_some());
        }

        #[test]
        fn expanding_monotone_in_workers(
            costs in prop::collection::vec(1u64..5, 1..4),
            fan in prop::collection::vec(1u32..4, 4),
            k in 1u64..5,
        ) {
            let n = costs.len();
            let g = random_graph(&costs, &fan[..n]);
            let mut prev = u64::MAX;
            for workers in 1..8 {
                let m = execute(&g, items(k), ExecConfig::new(SchemeKind::Expanding, workers)).unwrap().metrics.makespan;
                prop_assert!(m <= prev, "workers {} makespan {} > {}", workers, m, prev);
                prev = m;
            }
        }

        #[test]
        fn expanding_never_slower_than_pipeline(
            costs in prop::collection::vec(1u64..6, 1..5),
            fan in prop::collection::vec(0u32..4, 5),
            k in 1u64..8,
            extra in 0usize..4,
        ) {
            let n = costs.len();
            let g = random_graph(&costs, &fan[..n]);
            let config = |scheme| ExecConfig::new(scheme, n + extra);
            let pipe = execute(&g, items(k), config(SchemeKind::Pipeline)).unwrap();
            let exp = execute(&g, items(k), config(SchemeKind::Expanding)).unwrap();
            prop_assert!(exp.metrics.makespan <= pipe.metrics.makespan);
        }
    }
}
