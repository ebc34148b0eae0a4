use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.episodes=3",
    "data.val_episodes=2",
    "data.length=40",
    "train.epochs=1",
    "plan.episodes=1",
    "plan.samples=8",
    "plan.elites=2",
    "plan.iterations=1",
    "plan.budget=5",
];

fn cjepa(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cjepa"));
    cmd.arg("--out").arg(out).env_remove("CJEPA_OUT").env("RUST_LOG", "error");
    for kv in TINY {
        cmd.arg("--set").arg(kv);
    }
    cmd.args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cjepa(dir.path(), &["--set", "bogus.key=1", "gen-data"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus.key"));
}

#[test]
fn malformed_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cjepa(dir.path(), &["report", "--set", "seed=abc"])), 2);
    assert_eq!(code(&cjepa(dir.path(), &["report", "--set", "novalue"])), 2);
}

#[test]
fn eval_without_checkpoints_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cjepa(dir.path(), &["eval"])), 2);
}

#[test]
fn plan_without_model_or_baseline_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cjepa(dir.path(), &["plan", "--set", "plan.baseline=false"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = format!("eval.checkpoints={}", dir.path().join("nowhere").display());
    assert_eq!(code(&cjepa(dir.path(), &["eval", "--set", &ck])), 1);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(cjepa(&a, &["--seed", "9", "gen-data"]).status.success());
    assert!(cjepa(&b, &["gen-data", "--seed", "9"]).status.success());
    for f in ["data/train.cjwd", "data/val.cjwd", "data/train.cjed", "data/val.cjed"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let c = dir.path().join("c");
    assert!(cjepa(&c, &["--seed", "10", "gen-data"]).status.success());
    assert_ne!(std::fs::read(a.join("data/train.cjwd")).unwrap(), std::fs::read(c.join("data/train.cjwd")).unwrap());
}

#[test]
fn train_eval_and_plan_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(cjepa(out, &["gen-data"]).status.success());
    assert!(cjepa(out, &["train"]).status.success());
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(loss.lines().count() >= 2);
    assert!(std::fs::read_to_string(out.join("loss.svg")).unwrap().starts_with("<svg"));

    let ck = format!("eval.checkpoints={}", out.join("checkpoint").display());
    assert!(cjepa(out, &["eval", "--set", &ck]).status.success());
    let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert!(eval.lines().next().unwrap().starts_with("step,"));
    assert!(eval.lines().skip(1).all(|l| l.split(',').count() == 2));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("eval.json")).unwrap()).unwrap();
    assert!(v.is_object());

    let ck = format!("plan.checkpoint={}", out.join("checkpoint").display());
    assert!(cjepa(out, &["plan", "--set", &ck]).status.success());
    let plan: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("plan.json")).unwrap()).unwrap();
    for side in ["planner", "random"] {
        let rate = plan[side]["success_rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }
    let lines = std::fs::read_to_string(out.join("plan.jsonl")).unwrap();
    for l in lines.lines() {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }

    assert!(cjepa(out, &["report"]).status.success());
    assert!(out.join("report.json").exists());
    assert!(out.join("report.resolved.cfg").exists());
}

#[test]
fn out_variable_overrides_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_cjepa"))
        .args(["--out", dir.path().join("flag").to_str().unwrap(), "influence"])
        .args(["--set", "influence.windows=200", "--set", "influence.epochs=1"])
        .env("CJEPA_OUT", &target)
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(target.join("influence.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    assert!(!dir.path().join("flag").join("influence.csv").exists());
}
