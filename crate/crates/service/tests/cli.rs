use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn cli(store: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_branchvis"))
        .arg("--store")
        .arg(store)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn run_branch_render_query_bench() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let root: Value = serde_json::from_str(&cli(
        &store,
        &[
            "run",
            "--grid",
            "12x10",
            "--steps",
            "8",
            "--checkpoint-every",
            "4",
            "--set",
            "source_mask=6:5",
            "--set",
            "source_rate=1",
        ],
    ))
    .unwrap();
    let root_id = root["id"].as_str().unwrap();
    assert_eq!(root["checkpoints"], serde_json::json!([0, 4, 8]));

    let branch: Value = serde_json::from_str(&cli(
        &store,
        &[
            "branch",
            "--run",
            root_id,
            "--at",
            "3",
            "--set",
            "source_mask=6:5;2:2",
        ],
    ))
    .unwrap();
    assert_eq!(branch["run"]["parent"], root_id);
    assert_eq!(branch["stats"]["reused_steps"], 3);

    let a = dir.path().join("a.ppm");
    let b = dir.path().join("b.ppm");
    for out in [&a, &b] {
        cli(
            &store,
            &[
                "render",
                "--run",
                root_id,
                "--t",
                "5",
                "--out",
                out.to_str().unwrap(),
            ],
        );
    }
    let img = std::fs::read(&a).unwrap();
    assert_eq!(img, std::fs::read(&b).unwrap());
    assert!(img.starts_with(b"P6\n12 10\n255\n"));
    assert_eq!(img.len(), 13 + 12 * 10 * 3);

    let v: f64 = cli(
        &store,
        &[
            "query", "--run", root_id, "--x", "6", "--y", "5", "--t", "0",
        ],
    )
    .trim()
    .parse()
    .unwrap();
    assert_eq!(v, 1.0);

    let bench: Value = serde_json::from_str(&cli(
        &store,
        &[
            "bench",
            "--workload",
            &format!("branchsim:{}", store.display()),
            "--schemes",
            "pipeline,expanding",
            "--workers",
            "3",
        ],
    ))
    .unwrap();
    assert_eq!(
        bench["reports"][1]["items_per_stage"],
        serde_json::json!([13, 13, 13])
    );
    assert_eq!(bench["outputs_agree"], true);

    let runs: Value = serde_json::from_str(&cli(&store, &["runs"])).unwrap();
    assert_eq!(runs.as_array().unwrap().len(), 2);
}
