use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tvts::sortformer::Proxy;
use tvts::trainer::grad_check_config;

fn tvts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvts"))
        .args(args)
        .env_remove("TVTS_CONFIG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Writes a config for a model small enough to train in a test.
fn tiny_config(dir: &Path) -> String {
    let mut cfg = grad_check_config(Proxy::Kway, 0);
    cfg.dtype = "f32".into();
    cfg.gen.count = 12;
    cfg.steps = 3;
    let path = dir.join("tiny.txt");
    fs::write(&path, cfg.to_kv_text()).unwrap();
    path.display().to_string()
}

fn hash_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("manifest sha256")).expect("hash line").to_string()
}

#[test]
fn help_lists_every_subcommand() {
    let o = tvts(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["gen-data", "pretrain", "eval", "grad-check", "plot"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = tvts(&["gen-data", "--count", "10", "--seed", seed, "--res", "16x16", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("videos 10"));
        assert!(stdout(&o).contains("# resolved gen-data config"));
        hash_line(&o)
    };
    let a = run("a", "7");
    assert_eq!(a, run("b", "7"));
    assert_ne!(a, run("c", "8"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = tvts(&["gen-data", "--res", "33x32", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("divisible by patch size"), "{}", stderr(&o));

    let o = tvts(&["pretrain", "--set", "no_such_key=1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = tvts(&["gen-data"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pretrain_resume_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = tvts(&["pretrain", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("# resolved pretrain config"));
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 3);
    assert!(run.join("config.txt").exists());
    let ckpt = run.join("final.ckpt");

    let o = tvts(&["pretrain", "--resume", ckpt.to_str().unwrap(), "--steps", "5", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("resuming at step 3"));
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 5);

    let report = dir.path().join("report.json");
    let o = tvts(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--task",
        "probe",
        "--task",
        "zeroshot",
        "--task",
        "t2v",
        "--bench-count",
        "40",
        "--test-every",
        "2",
        "--probe-epochs",
        "5",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("encoder sha256 unchanged"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["step"], 5);
    for key in ["probe", "zeroshot", "t2v"] {
        assert!(json.get(key).is_some(), "{key} missing from {json}");
    }
}

#[test]
fn zero_steps_writes_an_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = tvts(&["pretrain", "--config", &cfg, "--steps", "0", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run.join("final.ckpt").exists());
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn bad_checkpoints_exit_with_code_five() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let o = tvts(&["eval", "--checkpoint", missing.to_str().unwrap(), "--task", "probe"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint\n").unwrap();
    let o = tvts(&["eval", "--checkpoint", garbage.to_str().unwrap(), "--task", "probe"]);
    assert_eq!(code(&o), 5);
    let o = tvts(&["pretrain", "--resume", garbage.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 5);
}

#[test]
fn plot_is_deterministic_and_rejects_empty_logs() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("metrics.jsonl");
    let lines: Vec<String> = (1..=20)
        .map(|s| {
            format!(
                r#"{{"step":{s},"L_align":{},"L_sort":{},"L_total":{},"sort_acc":{},"wallclock_ms":{}}}"#,
                6.0 - 0.1 * s as f64,
                1.4 - 0.05 * s as f64,
                8.8 - 0.2 * s as f64,
                0.25 + 0.03 * s as f64,
                s * 10
            )
        })
        .collect();
    fs::write(&log, lines.join("\n") + "\n").unwrap();
    let render = |name: &str| {
        let out = dir.path().join(name);
        let o = tvts(&["plot", "--log", log.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>()
    };
    let a = render("a");
    assert_eq!(a.len(), 4);
    assert_eq!(a, render("b"));

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("c");
    let o = tvts(&["plot", "--log", empty.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn grad_check_passes_and_detects_injected_faults() {
    let o = tvts(&["grad-check", "--seeds", "1"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("L_total[kway]"));

    let o = tvts(&["grad-check", "--seeds", "1", "--inject-fault", "attention"]);
    assert_eq!(code(&o), 6);
    assert!(stderr(&o).contains("attention"), "{}", stderr(&o));

    let o = tvts(&["grad-check", "--inject-fault", "no_such_op"]);
    assert_eq!(code(&o), 2);
}
