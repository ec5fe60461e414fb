use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csnet::eval::EvalReport;

fn csnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csnet")).args(args).output().expect("spawn csnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_run_config(dir: &Path, dataset: &Path, episodes: usize) -> PathBuf {
    let cfg = format!(
        r#"{{
  "dataset": {{ "source": "cache", "path": {:?} }},
  "train": {{
    "total_episodes": {episodes},
    "val_period": 100,
    "val_episodes": 40,
    "model": {{ "arch": {{ "kind": "mlp", "widths": [8, 8] }}, "channels": 4 }}
  }},
  "eval": {{ "episodes": 100 }},
  "aeml": {{ "t": 2 }},
  "ablation_shots": [1, 2]
}}"#,
        s(dataset)
    );
    let path = dir.join("run.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn synth(dir: &Path) -> PathBuf {
    let path = dir.join("synth.csnd");
    let o = csnet(&["synth-gen", "--seed", "4", "--out", s(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("64 train / 16 val / 20 test"));
    path
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(csnet(&[]).status.code(), Some(2));
    assert_eq!(csnet(&["eval", "--dataset", "x"]).status.code(), Some(2));
    assert_eq!(csnet(&["frobnicate"]).status.code(), Some(2));
    let o = csnet(&["eval", "--dataset", "x", "--baseline", "raw-1nn", "--checkpoint", "y"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failures_print_one_machine_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csnd");
    let o = csnet(&["eval", "--dataset", s(&missing), "--baseline", "raw-1nn"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=io msg="), "{err}");

    let ds = synth(dir.path());
    let o = csnet(&["eval", "--dataset", s(&ds), "--baseline", "raw-1nn", "--way", "30", "--episodes", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=sampling msg="), "{}", stderr(&o));

    let o = csnet(&["synth-gen", "--within-scale=-1", "--out", s(&dir.path().join("bad.csnd"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=config msg="), "{}", stderr(&o));
}

#[test]
fn baseline_report_echoes_settings() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path());
    let report = dir.path().join("r.json");
    let csv = dir.path().join("r.csv");
    let o = csnet(&[
        "eval", "--dataset", s(&ds), "--baseline", "raw-1nn", "--way", "4", "--shot", "3", "--episodes", "50",
        "--report", s(&report), "--csv", s(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = EvalReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!((r.way, r.shot, r.episodes, r.accuracies.len()), (4, 3, 50, 50));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 51);
    assert!(stdout(&o).contains("4-way 3-shot, 50 episodes"));
}

#[test]
fn train_average_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path());
    let cfg = write_run_config(dir.path(), &ds, 400);
    let run = dir.path().join("run");
    let o = csnet(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.json", "train_log.csv", "checkpoints/index.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // t = 1 reproduces the best validation checkpoint exactly.
    let log = csnet::trainer::TrainingLog::read_csv(&run.join("train_log.csv")).unwrap();
    let best = log
        .checkpoints()
        .max_by(|a, b| a.val_acc.partial_cmp(&b.val_acc).unwrap().then(a.episode.cmp(&b.episode)))
        .unwrap()
        .checkpoint_id
        .unwrap();
    let avg = dir.path().join("t1.csnt");
    let o = csnet(&["aeml", "--run", s(&run), "--t", "1", "--out", s(&avg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let best_path = run.join(format!("checkpoints/ckpt_{best:06}.csnt"));
    let acc = |ck: &Path| {
        let report = dir.path().join("acc.json");
        let o = csnet(&["eval", "--dataset", s(&ds), "--checkpoint", s(ck), "--episodes", "60", "--report", s(&report)]);
        assert!(o.status.success(), "{}", stderr(&o));
        EvalReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap()
    };
    let (a, b) = (acc(&avg), acc(&best_path));
    assert_eq!(a.accuracies, b.accuracies);
    assert_eq!(a.model, "aeml(t=1)");

    let o = csnet(&["aeml", "--run", s(&run), "--t", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("aeml_t3.csnt").exists());
    let o = csnet(&["aeml", "--run", s(&run), "--t", "50"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=selection"), "{}", stderr(&o));

    let cmp = dir.path().join("cmp.json");
    let o = csnet(&[
        "compare-ensemble", "--run", s(&run), "--t", "3", "--mode", "majority-vote", "--episodes", "40", "--report",
        s(&cmp),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cmp).unwrap()).unwrap();
    assert_eq!(v["mode"], "majority_vote");
    assert_eq!(std::fs::read_to_string(cmp.with_extension("csv")).unwrap().lines().count(), 2);

    let o = csnet(&["eval", "--dataset", s(&ds), "--checkpoint", s(&best_path), "--shot", "5", "--episodes", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=config"), "{}", stderr(&o));
}

#[test]
fn ablation_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path());
    let cfg = write_run_config(dir.path(), &ds, 200);
    let out = dir.path().join("abl");
    let o = csnet(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    // 2 shots × class support on/off × AEML on/off, plus a header line.
    assert_eq!(std::fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 9);
    assert!(out.join("ablation.json").exists());
}

#[test]
fn gradcheck_reports_and_exits_zero() {
    let o = csnet(&["gradcheck", "--samples", "200"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("max_rel_err="));
    let o = csnet(&["gradcheck", "--no-class-support", "--shot", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn cache_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_csnet"))
        .args(["synth-gen", "--test-classes", "5"])
        .env("CSNET_CACHE_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("synth.csnd").exists());
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let cfg = csnet::eval::RunConfig::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(cfg.eval.shot, cfg.train.shot, "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 8);
}
