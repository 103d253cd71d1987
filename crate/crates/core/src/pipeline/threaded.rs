use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::thread;

use super::{Emit, Payload, PipelineError, Result, StageGraph, MAX_ITEMS};

struct Shared {
    /// Ready items keyed by (stage, id).
    ready: BTreeMap<(usize, u64), Payload>,
    in_flight: usize,
    next_id: u64,
    outputs: Vec<Payload>,
    shutdown: bool,
    overflow: bool,
}

/// Runs the expanding scheme on real threads.
///
/// Timing is not deterministic here, only the sorted output multiset is.
/// Workers stop once every queue is drained and nothing is in flight.
pub fn execute_threaded(
    graph: &StageGraph,
    initial: Vec<Payload>,
    workers: usize,
) -> Result<Vec<Payload>> {
    if initial.is_empty() {
        return Err(PipelineError::EmptyWork);
    }
    if workers == 0 {
        return Err(PipelineError::Config("workers must be >= 1".into()));
    }
    let n = graph.len();
    let mut ready = BTreeMap::new();
    for (k, p) in initial.into_iter().enumerate() {
        ready.insert((1, k as u64), p);
    }
    let shared = Mutex::new(Shared {
        next_id: ready.len() as u64,
        ready,
        in_flight: 0,
        outputs: Vec::new(),
        shutdown: false,
        overflow: false,
    });
    let wake = Condvar::new();

    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let ((stage, _), payload) = {
                    let mut s = shared.lock().unwrap();
                    loop {
                        if s.shutdown {
                            return;
                        }
                        if let Some(entry) = s.ready.pop_first() {
                            s.in_flight += 1;
                            break entry;
                        }
                        if s.in_flight == 0 {
                            s.shutdown = true;
                            wake.notify_all();
                            return;
                        }
                        s = wake.wait(s).unwrap();
                    }
                };
                let emits = graph.stage(stage).fanout.apply(&payload);
                let mut s = shared.lock().unwrap();
                for emit in emits {
                    let (target, p) = match emit {
                        Emit::Next(p) if stage == n => {
                            s.outputs.push(p);
                            continue;
                        }
                        Emit::Next(p) => (stage + 1, p),
                        Emit::Respawn(p) => (stage, p),
                    };
                    let id = s.next_id;
                    s.next_id += 1;
                    s.ready.insert((target, id), p);
                }
                if s.next_id > MAX_ITEMS {
                    s.overflow = true;
                    s.shutdown = true;
                }
                s.in_flight -= 1;
                wake.notify_all();
            });
        }
    });

    let s = shared.into_inner().unwrap();
    if s.overflow {
        return Err(PipelineError::TooManyItems);
    }
    let mut outputs = s.outputs;
    outputs.sort();
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::super::{bfs_workload, execute, ExecConfig, SchemeKind};
    use super::*;

    #[test]
    fn matches_virtual_time_outputs() {
        let (g, w) = bfs_workload(3, 4).unwrap();
        let virt = execute(&g, w.clone(), ExecConfig::new(SchemeKind::Expanding, 4)).unwrap();
        for workers in [1, 2, 8] {
            let real = execute_threaded(&g, w.clone(), workers).unwrap();
            assert_eq!(real, virt.outputs);
        }
    }
}
