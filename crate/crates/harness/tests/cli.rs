use std::path::Path;
use std::process::{Command, Output};

fn relit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relit")).args(args).env_remove("DIS_THREADS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn quick(out: &Path) -> Vec<String> {
    [
        "scene.resolution=24",
        "scene.views=2",
        "epochs=[3,3,2]",
        "metrics.surface_samples=300",
        "previews=false",
        "threads=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("output={}", out.display())])
    .flat_map(|s| ["--set".to_string(), s])
    .collect()
}

#[test]
fn config_errors_exit_2() {
    let o = relit(&["fit", "--set", "scene.recipie=bumpy_plane"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("recipie"));
    assert_eq!(code(&relit(&["fit", "--set", "stages=[3,1]"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&relit(&["fit", "--config", bad.to_str().unwrap()])), 2);
}

#[test]
fn missing_files_exit_3() {
    let o = relit(&["report", "--run", "/nonexistent/run"]);
    assert_eq!(code(&o), 3);
    let o = relit(&["fit", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_reports_ops() {
    let o = relit(&["gradcheck", "--op", "field_query", "--seeds", "2"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("field_query"));
    // An impossible tolerance fails the check.
    let o = relit(&["gradcheck", "--op", "o2n", "--seeds", "1", "--tolerance", "0"]);
    assert_eq!(code(&o), 4);
    assert_ne!(code(&relit(&["gradcheck", "--op", "no_such_op"])), 0);
}

#[test]
fn fit_render_metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let mut args = vec!["fit".to_string()];
    args.extend(quick(&run));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = relit(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("sphere_boxes"));

    let out = dir.path().join("renders");
    assert_eq!(code(&relit(&["render", "--run", run_s, "--stage", "2", "--out", out.to_str().unwrap()])), 0);
    assert!(out.join("rgb_v01_f0000.pfm").exists());
    assert!(out.join("normal_v00_f0000.png").exists());

    let relit_out = dir.path().join("relit");
    let env = run.join("scene/heldout_env.pfm");
    let o = relit(&["relight", "--run", run_s, "--env", env.to_str().unwrap(), "--out", relit_out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(relit_out.join("rgb_v00_f0000.png").exists());

    assert_eq!(code(&relit(&["metrics", "--run", run_s])), 0);
    assert!(run.join("metrics_stage3.json").exists());

    assert_eq!(code(&relit(&["report", "--run", run_s])), 0);
    // A few epochs at 24² cannot meet the quality thresholds.
    assert_eq!(code(&relit(&["report", "--run", run_s, "--check"])), 4);
}

#[test]
fn synth_writes_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = relit(&["synth", "--set", "scene.recipe=bumpy_plane", "--set", "scene.resolution=16", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("scene.json").exists());
    assert!(dir.path().join("images/rgb_v00_f0000.pfm").exists());
}
