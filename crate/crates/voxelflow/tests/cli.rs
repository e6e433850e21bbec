use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use voxelflow::config::RunConfig;
use voxelflow::pcio::write_kitti_labels;
use voxelflow::pipeline::synthetic_suite;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxelflow")).args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn small_config(dir: &Path, steps: usize) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.backbone.channels = [4, 6, 8, 8];
    cfg.fsm.hidden = 4;
    cfg.head.hidden = 6;
    cfg.train.steps = steps;
    cfg.flops.cube_sizes = vec![3, 5];
    let p = dir.join("cfg.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

#[test]
fn selfcheck_passes_and_tamper_fails() {
    let o = run(&["selfcheck"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5);

    let o = run(&["selfcheck", "--tamper"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL dense_equivalence"));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "SelfcheckFailed");
}

#[test]
fn config_is_required_and_validated() {
    assert!(!run(&["flops"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"voxel": {"voxel_sz": [1, 1, 1]}}"#).unwrap();
    let o = run(&["flops", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "JsonError");
    assert!(err["message"].as_str().unwrap().contains("voxel_sz"));
}

#[test]
fn voxelize_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let c = cfg.to_str().unwrap();
    let empty = dir.path().join("empty.bin");
    std::fs::write(&empty, []).unwrap();
    let v = stdout_json(&run(&["voxelize", "--config", c, "--input", empty.to_str().unwrap()]));
    assert_eq!(v["voxels"], 0);
    assert_eq!(v["tensor"]["coords"].as_array().unwrap().len(), 0);

    let a = run(&["voxelize", "--config", c, "--synthetic", "5"]);
    let b = run(&["voxelize", "--config", c, "--synthetic", "5"]);
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout_json(&a)["voxels"].as_u64().unwrap() > 0);

    let kitti = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/kitti.json");
    let k = stdout_json(&run(&["voxelize", "--config", kitti, "--synthetic", "1"]));
    assert_eq!(k["grid_dims"], serde_json::json!([1408, 1600, 40]));
}

#[test]
fn flops_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let f = stdout_json(&run(&["flops", "--config", cfg.to_str().unwrap()]));
    assert_eq!(f["interior_mac_ratio"], serde_json::json!([125, 54]));
    for o in f["occupancies"].as_array().unwrap() {
        assert_eq!(o["decoupled_smaller"], true, "{o}");
    }
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d, 4);
    let c = cfg.to_str().unwrap();
    let run_dir = d.join("run");
    let o = run(&["train-toy", "--config", c, "--seed", "3", "--out-dir", run_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 4);

    let inf = d.join("inf");
    let ck = run_dir.join("checkpoint.json");
    let o = run(&[
        "infer", "--config", c, "--checkpoint", ck.to_str().unwrap(), "--frames", "synthetic:2", "--out-dir",
        inf.to_str().unwrap(), "--timing",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let timing: Value = serde_json::from_str(&std::fs::read_to_string(inf.join("timing.json")).unwrap()).unwrap();
    assert_eq!(timing["frames"], 2);
    assert!(inf.join("labels/000001.txt").exists());

    // labels from the generator, then detections identical to them
    let cfg = RunConfig::load(&cfg).unwrap();
    let scenes = synthetic_suite(&cfg.scene, 3).unwrap();
    let (gts, perfect, empty) = (d.join("gt"), d.join("perfect"), d.join("empty"));
    for p in [&gts, &perfect, &empty] {
        std::fs::create_dir_all(p).unwrap();
    }
    for (i, (_, g)) in scenes.iter().enumerate() {
        write_kitti_labels(gts.join(format!("{i:06}.txt")), g).unwrap();
        let text = std::fs::read_to_string(gts.join(format!("{i:06}.txt"))).unwrap();
        let lines: Vec<String> = text.lines().enumerate().map(|(j, l)| format!("{l} {:.2}", 0.9 - 0.01 * j as f64)).collect();
        std::fs::write(perfect.join(format!("{i:06}.txt")), lines.join("\n")).unwrap();
    }
    let eval = |dets: &Path| stdout_json(&run(&["eval", "--dets", dets.to_str().unwrap(), "--gts", gts.to_str().unwrap(), "--config", c]));
    let (good, none) = (eval(&perfect), eval(&empty));
    let mut seen = 0;
    for (a, b) in good["entries"].as_array().unwrap().iter().zip(none["entries"].as_array().unwrap()) {
        if a["class"] == "Car" && !a["ap"].is_null() {
            assert_eq!(a["ap"], 1.0);
            assert_eq!(b["ap"], 0.0);
            seen += 1;
        }
    }
    assert!(seen > 0);
}
