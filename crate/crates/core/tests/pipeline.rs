use std::path::{Path, PathBuf};
use std::process::Command;

use lad::config::{validate_config, RunConfig};
use lad::metrics::{evaluate, EvalConfig};
use lad::pipeline::{gen_data, read_stamp, run_pipeline, stage_hashes, Layout, Stamp};
use lad::phantom::PhantomSpec;
use lad::volume::Dims;

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny() -> RunConfig {
    RunConfig::load(&config_dir().join("tiny.toml")).unwrap()
}

fn lad(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lad"))
        .args(args)
        .current_dir(dir)
        .env_remove("LAD_ARTIFACT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn shipped_configs_are_valid() {
    for name in ["default.toml", "tiny.toml"] {
        let c = RunConfig::load(&config_dir().join(name)).unwrap();
        assert!(validate_config(&c, None).is_empty(), "{name}: {:?}", validate_config(&c, None));
    }
    assert_eq!(RunConfig::load(&config_dir().join("default.toml")).unwrap().hash(), RunConfig::default().hash());
}

#[test]
fn invalid_config_is_reported() {
    let mut c = RunConfig::default();
    c.data.shape = Dims::new(32, 62, 64);
    c.sample.guidance = -1.0;
    let v = validate_config(&c, None);
    assert!(v.len() >= 2, "{v:?}");
    assert!(v.iter().any(|m| m.contains('H')));
}

#[test]
fn rerun_skips_and_lambda_change_reruns_downstream() {
    let root = tempfile::tempdir().unwrap();
    let c = tiny();
    let first = run_pipeline(&c, root.path()).unwrap();
    assert!(first.stages.iter().all(|s| s.1));
    assert_eq!(first.report.config_hash.as_deref(), Some(c.hash().as_str()));
    let second = run_pipeline(&c, root.path()).unwrap();
    assert!(second.stages.iter().all(|s| !s.1));
    assert_eq!(first.report, second.report);

    let mut changed = c.clone();
    changed.codec.lambda_loc = 0.5;
    let third = run_pipeline(&changed, root.path()).unwrap();
    let ran: Vec<&str> = third.stages.iter().filter(|s| s.1).map(|s| s.0).collect();
    assert_eq!(ran, ["train-codec", "train-diffusion", "sample", "evaluate"]);
}

#[test]
fn identical_runs_give_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tiny();
    let ra = run_pipeline(&c, a.path()).unwrap().report;
    let rb = run_pipeline(&c, b.path()).unwrap().report;
    assert_eq!(ra, rb);
    let layout = Layout::new(a.path());
    assert_eq!(read_stamp(&layout.data()), Some(Stamp::Done(stage_hashes(&c).data)));
    let manifest = std::fs::read_to_string(layout.data().join(lad::dataset::MANIFEST)).unwrap();
    assert!(manifest.contains(&stage_hashes(&c).data));
}

#[test]
fn evaluate_refuses_mismatched_geometry() {
    let d = tempfile::tempdir().unwrap();
    let small = PhantomSpec { dims: Dims::new(16, 32, 32), ..PhantomSpec::default() };
    let other = PhantomSpec { dims: Dims::new(16, 32, 16), ..PhantomSpec::default() };
    gen_data(&d.path().join("a"), 1, 3, &small, None).unwrap();
    gen_data(&d.path().join("b"), 2, 3, &other, None).unwrap();
    let err = evaluate(&d.path().join("a"), &d.path().join("b"), &d.path().join("a"), &EvalConfig::default(), &d.path().join("r.json"), None)
        .unwrap_err();
    assert!(err.to_string().contains("refusing"), "{err}");
}

#[test]
fn cli_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(lad(d.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(lad(d.path(), &["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(lad(d.path(), &["gen-data", "--out", "x", "--shape", "16x30x32"]).status.code(), Some(1));
    assert_eq!(lad(d.path(), &["train-codec", "--data", "missing", "--out", "c"]).status.code(), Some(2));
    std::fs::write(d.path().join("bad.toml"), "seed = \"x\"").unwrap();
    assert_eq!(lad(d.path(), &["--config", "bad.toml", "run"]).status.code(), Some(1));
}

#[test]
fn cli_topo_prints_structure_vector() {
    let d = tempfile::tempdir().unwrap();
    let out = lad(d.path(), &["--root", "art", "gen-data", "--count", "2", "--shape", "16x32x32", "--out", "data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mask = lad::dataset::mask_path(&d.path().join("art/data"), 0);
    let out = lad(d.path(), &["topo", "--mask", mask.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<u32> = String::from_utf8(out.stdout).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(lines.len(), 96);
}

#[test]
fn cli_stages_chain_together() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config_dir().join("tiny.toml");
    let cfg = cfg.to_str().unwrap();
    let steps: [&[&str]; 5] = [
        &["gen-data", "--out", "data"],
        &["train-codec", "--data", "data", "--out", "codec"],
        &["train-diffusion", "--data", "data", "--masks", "data", "--codec", "codec", "--out", "diff"],
        &["augment-masks", "--in", "data", "--out", "aug", "--count", "3"],
        &["sample", "--diffusion", "diff", "--codec", "codec", "--masks", "aug", "--w", "2", "--count", "2", "--out", "samples"],
    ];
    for s in steps {
        let mut args = vec!["--config", cfg];
        args.extend_from_slice(s);
        let out = lad(d.path(), &args);
        assert!(out.status.success(), "{s:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = lad(d.path(), &["--config", cfg, "evaluate", "--real", "data", "--synth", "samples", "--masks", "data", "--out", "eval/report.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["synth_count"], 2);
}
