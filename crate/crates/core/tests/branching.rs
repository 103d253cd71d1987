use branchvis_core::pipeline::{
    branching_sim_workload, execute, BranchTree, ExecConfig, SchemeKind,
};
use branchvis_core::solver::{GridSpec, SolverParams};
use branchvis_core::store::{ParamPatch, RunStatus, Store};

fn params() -> SolverParams {
    SolverParams {
        source_mask: vec![(8, 8)],
        source_rate: 1.0,
        inflow_amp: 0.5,
        ..Default::default()
    }
}

#[test]
fn store_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridSpec::square(16, 16).unwrap();
    let (root, child, frame) = {
        let store = Store::open(dir.path()).unwrap();
        let root = store.create_root(grid, params(), 30, 7).unwrap();
        let mut patch = ParamPatch::default();
        patch.set("source_rate", "2").unwrap();
        let child = store.branch(&root, 12, patch).unwrap();
        let frame = store.frame_chunk(&child, 25).unwrap();
        (root, child, frame)
    };
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.runs().len(), 2);
    let rec = store.run(&child).unwrap();
    assert_eq!(rec.parent.as_ref(), Some(&root));
    assert_eq!(rec.t_branch, 12);
    assert_eq!(rec.status, RunStatus::Complete);
    assert_eq!(store.frame_chunk(&child, 25).unwrap(), frame);
    assert_eq!(store.effective_params(&child).unwrap().source_rate, 2.0);
}

#[test]
fn grandchild_lineage_and_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let grid = GridSpec::square(16, 16).unwrap();
    let root = store.create_root(grid, params(), 20, 5).unwrap();
    let mut p1 = ParamPatch::default();
    p1.set("source_mask", "8:8;2:3").unwrap();
    let a = store.branch(&root, 5, p1).unwrap();
    let mut p2 = ParamPatch::default();
    p2.set("diff", "0.05").unwrap();
    let b = store.branch_with_steps(&a, 9, p2, Some(14)).unwrap();

    let lineage: Vec<_> = store
        .lineage(&b)
        .unwrap()
        .into_iter()
        .map(|(id, _)| id)
        .collect();
    assert_eq!(lineage, vec![root.clone(), a.clone(), b.clone()]);
    assert_eq!(store.frames(&b, 0, 14).unwrap().len(), 15);
    assert_eq!(store.stats(&b).unwrap().reused_steps, 9);

    let tree = BranchTree::from_records(&store.runs()).unwrap();
    assert_eq!(tree.step_count(), 20 + 15 + 5);
    let (graph, work) = branching_sim_workload(&tree).unwrap();
    let out = execute(&graph, work, ExecConfig::new(SchemeKind::Expanding, 6)).unwrap();
    assert_eq!(out.metrics.items_per_stage, vec![40, 40, 40]);
}
