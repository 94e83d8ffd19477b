use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use workzone_core::casedb::CaseDatabase;
use workzone_core::metrics::EvalCase;
use workzone_core::pipeline::SceneSetFile;

fn suite() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/suite")
}

fn config() -> PathBuf {
    suite().join("config.toml")
}

fn workzone(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_workzone"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn eval_with_predictions_equal_to_ground_truth_is_all_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = SceneSetFile::from_json(&std::fs::read_to_string(suite().join("scenes_infer.json")).unwrap()).unwrap();
    let cases: Vec<EvalCase> = scenes
        .scenes
        .iter()
        .map(|sc| {
            let gt = sc.ground_truth.clone().unwrap();
            EvalCase {
                case_id: sc.frame_id.clone(),
                pattern: sc.pattern.map(|p| p.to_string()),
                scenario: Some(sc.sequence_id.clone()),
                predicted: gt.clone(),
                ground_truth: gt,
                obstacles: Vec::new(),
            }
        })
        .collect();
    let pred = tmp.path().join("pred.json");
    std::fs::write(&pred, serde_json::to_string(&cases).unwrap()).unwrap();
    let out = tmp.path().join("eval");
    let o = workzone(&["eval", "--input", s(&pred), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["ade"], 0.0);
    assert_eq!(report["overall"]["fde"], 0.0);
    assert_eq!(report["overall"]["cr"], 0.0);
    for c in report["cases"].as_array().unwrap() {
        assert_eq!(c["case_failure"], false);
        assert_eq!(c["collided"], false);
    }
}

#[test]
fn infer_without_database_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = workzone(&["infer", "--config", s(&config()), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--db") && err.contains("Usage"), "{err}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(workzone(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn malformed_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = workzone(&["eval", "--input", s(&config()), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(3));
    let o = workzone(&[
        "infer",
        "--config",
        s(&config()),
        "--db",
        s(&tmp.path().join("none.jsonl")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn build_db_on_bundled_suite_stores_eight_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("build");
    let o = workzone(&["build-db", "--config", s(&config()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let db = CaseDatabase::load(&out.join("cases.jsonl")).unwrap();
    assert_eq!(db.len(), 8);
    let tags: std::collections::BTreeSet<String> = db.records().map(|r| r.pattern_tag.to_string()).collect();
    assert_eq!(tags.len(), 8);
    assert!(out.join("overlays/seq-p1-000_failure.png").exists());

    let constants: Value = serde_json::from_str(&std::fs::read_to_string(out.join("constants.json")).unwrap()).unwrap();
    let threshold = constants
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "retrieval.threshold")
        .unwrap();
    assert_eq!(threshold["value"], 0.8);
    assert_eq!(threshold["source"], "paper");
}

fn build_and_infer(root: &Path, workers: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    let build = root.join("build");
    let run = root.join("run");
    let o = workzone(&[
        "build-db",
        "--config",
        s(&config()),
        "--out",
        s(&build),
        "--workers",
        workers,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let db = build.join("cases.jsonl");
    let o = workzone(&[
        "infer",
        "--config",
        s(&config()),
        "--db",
        s(&db),
        "--out",
        s(&run),
        "--workers",
        workers,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    files_under(root)
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = build_and_infer(a.path(), "1");
    let second = build_and_infer(b.path(), "4");
    assert!(first.contains_key(Path::new("run/traces/seq-novel-000.json")));
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (name, bytes) in &first {
        assert!(bytes == &second[name], "{} differs", name.display());
    }
}

#[test]
fn offline_chain_graph_mine_cluster() {
    let tmp = tempfile::tempdir().unwrap();
    let graphs = tmp.path().join("g");
    let det = suite().join("detections_build.jsonl");
    let o = workzone(&[
        "graph",
        "--config",
        s(&config()),
        "--input",
        s(&det),
        "--out",
        s(&graphs),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(graphs.join("graphs")).unwrap().count(), 9);

    let mined = tmp.path().join("m");
    let o = workzone(&[
        "mine",
        "--config",
        s(&config()),
        "--input",
        s(&graphs.join("graphs")),
        "--out",
        s(&mined),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let clustered = tmp.path().join("c");
    let manifest = mined.join("manifest.json");
    let o = workzone(&[
        "cluster",
        "--config",
        s(&config()),
        "--input",
        s(&manifest),
        "--out",
        s(&clustered),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(clustered.join("clusters.json")).unwrap()).unwrap();
    let k = report["k"].as_u64().unwrap();
    assert!((1..=9).contains(&k));
    assert_eq!(report["clusters"].as_array().unwrap().len() as u64, k);
}

#[test]
fn retrieve_plan_and_render_single_scenes() {
    let tmp = tempfile::tempdir().unwrap();
    let build = tmp.path().join("build");
    workzone(&["build-db", "--config", s(&config()), "--out", s(&build)]);
    let db = build.join("cases.jsonl");

    let o = workzone(&[
        "retrieve",
        "--config",
        s(&config()),
        "--db",
        s(&db),
        "--frame",
        "seq-p3-001",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let trace: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("retrieval_seq-p3-001.json")).unwrap()).unwrap();
    assert_eq!(trace["decision"]["decision"], "use_case");
    assert_eq!(trace["decision"]["case_id"], "seq-p3-000");

    // The first scripted P4 answer is off-road; the retry recovers.
    let scenes = suite().join("scenes_build.json");
    let o = workzone(&[
        "plan",
        "--config",
        s(&config()),
        "--input",
        s(&scenes),
        "--frame",
        "seq-p4-000",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let plan: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("plan_seq-p4-000.json")).unwrap()).unwrap();
    assert_eq!(plan["outcome"]["history"].as_array().unwrap().len(), 2);
    assert_eq!(plan["outcome"]["trajectory"].as_array().unwrap().len(), 20);

    let o = workzone(&["render", "--config", s(&config()), "--out", s(&tmp.path().join("img"))]);
    assert_eq!(o.status.code(), Some(0));
    assert!(tmp.path().join("img/seq-novel-000.png").exists());
}

#[test]
fn failed_verification_exits_four() {
    let tmp = tempfile::tempdir().unwrap();
    // One attempt only, so the deliberately off-road first P4 answer stands.
    let cfg_text = std::fs::read_to_string(config())
        .unwrap()
        .replace("max_iter = 3", "max_iter = 1");
    let local = tmp.path().join("config.toml");
    std::fs::write(&local, cfg_text).unwrap();
    let scenes = suite().join("scenes_build.json");
    let fixtures = suite().join("fixtures.json");
    let o = workzone(&[
        "plan",
        "--config",
        s(&local),
        "--input",
        s(&scenes),
        "--fixtures",
        s(&fixtures),
        "--frame",
        "seq-p4-000",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
