use std::path::Path;
use std::process::{Command, Output};

fn crowdmesh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdmesh"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, r#"{"scene_count": 2, "model": {"toy_vertices": 64}}"#).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn eval_is_reproducible_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();

    assert!(crowdmesh(&["gen", "--config", &cfg, "--seed", "4", "--out", &p("scenes.json")]).status.success());
    assert!(crowdmesh(&["init-weights", "--config", &cfg, "--seed", "4", "--out", &p("w.json")]).status.success());
    let fwd = crowdmesh(&[
        "forward", "--config", &cfg, "--seed", "4", "--scenes", &p("scenes.json"), "--weights", &p("w.json"),
        "--out", &p("pred.json"),
    ]);
    assert!(fwd.status.success(), "{}", String::from_utf8_lossy(&fwd.stderr));
    let from_files = crowdmesh(&[
        "eval", "--config", &cfg, "--seed", "4", "--scenes", &p("scenes.json"), "--predictions", &p("pred.json"),
    ]);
    assert!(from_files.status.success());
    let direct = crowdmesh(&["eval", "--config", &cfg, "--seed", "4"]);
    assert!(direct.status.success());
    assert_eq!(from_files.stdout, direct.stdout);
    let report: serde_json::Value = serde_json::from_slice(&direct.stdout).unwrap();
    assert_eq!(report["aggregate"]["scenes"], 2);

    let other = crowdmesh(&["eval", "--config", &cfg, "--seed", "5"]);
    assert_ne!(other.stdout, direct.stdout);
}

#[test]
fn export_obj_writes_meshes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let meshes = dir.path().join("meshes");
    let out = crowdmesh(&["export-obj", "--config", &cfg, "--out", meshes.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let listed: Vec<String> = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!listed.is_empty());
    let text = std::fs::read_to_string(&listed[0]).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 64);
}

#[test]
fn exit_codes() {
    let ok = crowdmesh(&["selftest", "--seed", "2"]);
    assert_eq!(ok.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["suites"].as_array().unwrap().len(), 5);
    assert!(String::from_utf8_lossy(&ok.stderr).contains("mask_isolation"));

    assert_eq!(crowdmesh(&["selftest", "--fault", "mask-bit"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"persons": [3, 1]}"#).unwrap();
    assert_eq!(crowdmesh(&["gen", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&bad, r#"{"loss": {"map": 4.0, "depth": 0.5, "pose": 5.0, "shape": 3.0, "j3ds": 8.0, "j2ds": 40.0, "box": 2.0, "det": 1.0}}"#).unwrap();
    let out = crowdmesh(&["eval", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("map"));
    assert_eq!(crowdmesh(&["eval", "--config", "/nonexistent/run.json"]).status.code(), Some(2));
}
