use std::path::Path;
use std::process::{Command, Output};

fn pseudoseg(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pseudoseg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PSEUDOSEG_OUT_ROOT")
        .env_remove("PSEUDOSEG_DEVICE")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pngs(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .flatten()
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .count()
}

#[test]
fn maskgen_writes_requested_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pseudoseg(tmp.path(), &["maskgen", "generate", "--n", "10", "--seed", "4", "--out", "m"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(pngs(&tmp.path().join("m")), 10);
    let params: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("m/maskgen.json")).unwrap()).unwrap();
    assert_eq!(params["n"], 10);
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "[stage2]\nmax_round = 3\n").unwrap();
    let o = pseudoseg(tmp.path(), &["synth", "render", "--config", "c.toml", "--out", "d"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("kind=config") && err.contains("stage2.max_round"), "{err}");
}

#[test]
fn missing_input_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pseudoseg(
        tmp.path(),
        &["train-stage2", "--pseudo", "nowhere/manifest.csv", "--data", "nodata", "--out", "s2"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pseudoseg(tmp.path(), &["maskgen", "generate", "--n", "3", "--aspect", "2:1", "--out", "m"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = pseudoseg(tmp.path(), &["synth", "render", "--preset", "huge", "--out", "d"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn device_must_be_cpu() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pseudoseg"))
        .args(["maskgen", "generate", "--n", "1", "--out", "m"])
        .current_dir(tmp.path())
        .env("PSEUDOSEG_DEVICE", "cuda")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("PSEUDOSEG_DEVICE"), "{}", stderr(&o));
}

#[test]
fn out_root_prefixes_relative_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_pseudoseg"))
        .args(["maskgen", "generate", "--n", "2", "--out", "m"])
        .current_dir(tmp.path())
        .env("PSEUDOSEG_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(pngs(&root.join("m")), 2);
    assert!(!tmp.path().join("m").exists());
}

#[test]
fn micro_pipeline_by_hand() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let run = |args: &[&str]| {
        let o = pseudoseg(dir, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    let p = ["--preset", "micro", "--seed", "2"];
    run(&[&["synth", "render"][..], &p, &["--out", "data"]].concat());
    run(&[&["vae", "pretrain"][..], &p, &["--out", "vae"]].concat());
    run(&[
        &["train-stage1", "--data", "data", "--vae", "vae/vae.safetensors"][..],
        &p,
        &["--out", "s1"],
    ]
    .concat());
    assert!(dir.join("s1/metrics.csv").is_file());
    assert!(dir.join("s1/checkpoints/g_a.safetensors").is_file());
    run(&[
        &["pseudo", "export", "--checkpoints", "s1/checkpoints", "--data", "data"][..],
        &p,
        &["--out", "pl"],
    ]
    .concat());
    assert_eq!(
        std::fs::read(dir.join("pl/manifest.csv")).unwrap(),
        std::fs::read(dir.join("s1/pseudo_labels/manifest.csv")).unwrap()
    );
    run(&[
        &["train-stage2", "--pseudo", "pl/manifest.csv", "--data", "data", "--loss", "dice"][..],
        &p,
        &["--out", "s2"],
    ]
    .concat());
    run(&[
        &["evaluate", "--model", "s2/model.safetensors", "--data", "data", "--overlays"][..],
        &p,
        &["--out", "ev"],
    ]
    .concat());
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("ev/eval.json")).unwrap()).unwrap();
    assert!(summary["dice_mean"].as_f64().is_some(), "{summary}");
    assert!(pngs(&dir.join("ev/overlays")) > 0);
}
