//! End-to-end checks of the `dpcheck` commands: files written, exit codes and
//! byte-level determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dpcheck::cli::{self, read_params_bin, read_trace_file, DiffReport};
use tempfile::TempDir;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["dpcheck"];
    argv.extend_from_slice(args);
    let code = cli::run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn train_writes_trace_params_and_summary() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let (code, stdout, _) = run(&["train", s(&config_path("default.json")), "--out", s(&out)]);
    assert_eq!(code, 0);
    assert!(stdout.contains("trained 20 steps"));

    let trace = read_trace_file(&out.join("trace.jsonl")).unwrap();
    assert_eq!(trace.len(), 20);
    assert_eq!(
        fs::read_to_string(out.join("trace.jsonl"))
            .unwrap()
            .lines()
            .count(),
        20
    );

    let bytes = fs::read(out.join("final_params.bin")).unwrap();
    let params = read_params_bin(&bytes[..]).unwrap();
    // vocab 8, hidden 4: embed and output projection.
    assert_eq!(params.len(), 64);
    assert_eq!(bytes.len(), 8 + 64 * 8);
    assert_eq!(u64::from_le_bytes(bytes[..8].try_into().unwrap()), 64);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let sched = &summary["config"]["run"]["schedule"];
    assert_eq!(sched["total_steps"], 20);
    assert_eq!(sched["warmup_frac"], 0.1);
    assert_eq!(summary["config"]["run"]["optimizer"]["eps"], 1e-8);
    assert_eq!(summary["steps"], 20);
}

#[test]
fn train_is_byte_deterministic_across_modes() {
    let tmp = TempDir::new().unwrap();
    let dirs: Vec<PathBuf> = (0..3).map(|i| tmp.path().join(format!("r{i}"))).collect();
    let cfg = config_path("default.json");
    assert_eq!(run(&["train", s(&cfg), "--out", s(&dirs[0])]).0, 0);
    assert_eq!(run(&["train", s(&cfg), "--out", s(&dirs[1])]).0, 0);
    assert_eq!(
        run(&["train", s(&cfg), "--out", s(&dirs[2]), "--parallel"]).0,
        0
    );
    for file in ["trace.jsonl", "final_params.bin"] {
        let a = fs::read(dirs[0].join(file)).unwrap();
        assert_eq!(a, fs::read(dirs[1].join(file)).unwrap(), "{file}");
        assert_eq!(
            a,
            fs::read(dirs[2].join(file)).unwrap(),
            "{file} (parallel)"
        );
    }
    assert_eq!(
        fs::read(dirs[0].join("summary.json")).unwrap(),
        fs::read(dirs[1].join("summary.json")).unwrap()
    );
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_path("default.json");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&["train", s(&cfg), "--out", s(&a)]).0, 0);
    assert_eq!(
        run(&["train", s(&cfg), "--out", s(&b), "--seed", "11"]).0,
        0
    );
    assert_ne!(
        fs::read(a.join("trace.jsonl")).unwrap(),
        fs::read(b.join("trace.jsonl")).unwrap()
    );
}

#[test]
fn bad_configs_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let cases = [
        ("malformed.json", "{ \"run\": "),
        (
            "unknown_key.json",
            r#"{"run": {"dp_size": 2, "typo": 1}, "data": {"n_samples": 160}}"#,
        ),
        (
            "bad_stage.json",
            r#"{"run": {"zero_stage": 3}, "data": {"n_samples": 160}}"#,
        ),
        (
            "too_little_data.json",
            r#"{"run": {}, "data": {"n_samples": 10}}"#,
        ),
        (
            "bad_range.json",
            r#"{"run": {}, "data": {"n_samples": 160, "len_range": [9, 3]}}"#,
        ),
    ];
    for (name, body) in cases {
        let p = write_config(tmp.path(), name, body);
        let (code, _, err) = run(&["train", s(&p), "--out", s(&out)]);
        assert_eq!(code, 2, "{name}: {err}");
        assert!(err.starts_with("error:"), "{name}: {err}");
        assert_eq!(run(&["diff", s(&p), "--out", s(&out)]).0, 2, "{name}");
    }
    assert_eq!(run(&["train", s(&tmp.path().join("missing.json"))]).0, 2);
    assert_eq!(run(&["no-such-command"]).0, 2);
}

#[test]
fn diff_default_config_matches_oracle() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("diff");
    let (code, stdout, _) = run(&["diff", s(&config_path("default.json")), "--out", s(&out)]);
    assert_eq!(code, 0, "{stdout}");
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("reference"));
    let fixed = rows.iter().find(|r| r.starts_with("fixed")).unwrap();
    assert!(fixed.ends_with("MATCHES ORACLE"));
    assert_eq!(stdout.matches("MATCHES ORACLE").count(), 1);

    let report: DiffReport =
        serde_json::from_str(&fs::read_to_string(out.join("diff_report.json")).unwrap()).unwrap();
    assert_eq!(report.variants.len(), 4);
    for v in &report.variants {
        assert_eq!(v.matches_oracle, v.name == "fixed", "{}", v.name);
    }
    for name in ["buggy", "fix-agg", "fix-opt", "fixed", "reference"] {
        assert!(out.join(format!("trace_{name}.jsonl")).is_file(), "{name}");
    }
}

#[test]
fn diff_with_zero_tolerance_fails() {
    let tmp = TempDir::new().unwrap();
    let (code, stdout, _) = run(&[
        "diff",
        s(&config_path("default.json")),
        "--tolerance",
        "0",
        "--variants",
        "fixed",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code, 1, "{stdout}");
    assert!(!stdout.contains("MATCHES ORACLE"));
}

#[test]
fn diff_without_accumulation_makes_copy_policy_inert() {
    let tmp = TempDir::new().unwrap();
    let (code, _, _) = run(&[
        "diff",
        s(&config_path("no_accumulation.json")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code, 0);
    let report: DiffReport =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("diff_report.json")).unwrap())
            .unwrap();
    let row = |n: &str| {
        report
            .variants
            .iter()
            .find(|v| v.name == n)
            .unwrap()
            .clone()
    };
    for (buggy, fixed) in [("buggy", "fix-opt"), ("fix-agg", "fixed")] {
        let (a, b) = (row(buggy), row(fixed));
        assert_eq!(a.max_param_rel_diff, b.max_param_rel_diff);
        assert_eq!(a.final_loss, b.final_loss);
        assert_eq!(a.median_grad_norm, b.median_grad_norm);
        assert_eq!(
            fs::read(tmp.path().join(format!("trace_{buggy}.jsonl"))).unwrap(),
            fs::read(tmp.path().join(format!("trace_{fixed}.jsonl"))).unwrap()
        );
    }
}

#[test]
fn diff_rejects_unknown_variant() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_path("default.json");
    let args = [
        "diff",
        s(&cfg),
        "--variants",
        "buggy,nope",
        "--out",
        s(tmp.path()),
    ];
    assert_eq!(run(&args).0, 2);
}

#[test]
fn detect_classifies_diff_traces() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path();
    assert_eq!(
        run(&[
            "diff",
            s(&config_path("heterogeneous.json")),
            "--out",
            s(out)
        ])
        .0,
        0
    );
    let trace = |n: &str| out.join(format!("trace_{n}.jsonl"));
    let reference = trace("fixed");
    for (name, want) in [("fixed", 0), ("fix-agg", 3), ("fix-opt", 4), ("buggy", 5)] {
        let (code, stdout, _) = run(&[
            "detect",
            s(&trace(name)),
            s(&reference),
            "--accum-steps",
            "8",
        ]);
        assert_eq!(code, want, "{name}: {stdout}");
    }
}

#[test]
fn detect_rejects_bad_traces() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("t");
    assert_eq!(
        run(&["train", s(&config_path("default.json")), "--out", s(&out)]).0,
        0
    );
    let good = out.join("trace.jsonl");
    let text = fs::read_to_string(&good).unwrap();

    let short = tmp.path().join("short.jsonl");
    fs::write(&short, text.lines().take(10).collect::<Vec<_>>().join("\n")).unwrap();
    let garbage = tmp.path().join("garbage.jsonl");
    fs::write(&garbage, "not json\n").unwrap();

    assert_eq!(run(&["detect", s(&good), s(&good)]).0, 0);
    assert_eq!(run(&["detect", s(&short), s(&short)]).0, 2);
    assert_eq!(run(&["detect", s(&good), s(&short)]).0, 2);
    assert_eq!(run(&["detect", s(&garbage), s(&good)]).0, 2);
    assert_eq!(
        run(&["detect", s(&tmp.path().join("absent.jsonl")), s(&good)]).0,
        2
    );
}

#[test]
fn flops_commands() {
    let (code, stdout, _) = run(&["flops", "luffy"]);
    assert_eq!((code, stdout.trim()), (0, "6.65e19"));

    let (code, stdout, _) = run(&["flops", "sft-then-rl-50", "--breakdown"]);
    assert_eq!(code, 0);
    let term = |name: &str| {
        stdout
            .lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().nth(1))
            .unwrap()
            .to_string()
    };
    assert_eq!(term("sft_total"), "2.43e19");
    assert_eq!(term("rl_total"), "1.20e19");

    assert_eq!(run(&["flops", "not-a-method"]).0, 2);

    let tmp = TempDir::new().unwrap();
    let empty = write_config(
        tmp.path(),
        "empty.json",
        r#"{"name": "nothing", "n_params": 7e9, "spec": {}}"#,
    );
    let (code, _, err) = run(&["flops", s(&empty)]);
    assert_eq!(code, 2);
    assert!(err.contains("empty method"), "{err}");

    let custom = write_config(
        tmp.path(),
        "custom.json",
        r#"{"name": "tiny", "n_params": 1e9, "spec": {"steps": 1, "batch_size": 1, "on_policy_rollouts": 1, "rollout_tokens": 1000}}"#,
    );
    let (code, stdout, _) = run(&["flops", s(&custom)]);
    assert_eq!((code, stdout.trim()), (0, "8.00e12"));
}

#[test]
fn grpo_demo_writes_reward_trace() {
    let tmp = TempDir::new().unwrap();
    let (code, stdout, _) = run(&[
        "grpo-demo",
        "--steps",
        "30",
        "--seed",
        "2",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code, 0, "{stdout}");
    let trace = read_trace_file(&tmp.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.len(), 31);
    assert!(trace.iter().all(|r| (0.0..=1.0).contains(&r.loss)));

    let bad = write_config(tmp.path(), "bad.json", r#"{"lr": -1.0}"#);
    assert_eq!(run(&["grpo-demo", s(&bad), "--out", s(tmp.path())]).0, 2);
}

#[test]
fn binary_exit_codes_and_out_dir_env() {
    let tmp = TempDir::new().unwrap();
    let bin = env!("CARGO_BIN_EXE_dpcheck");
    let status = Command::new(bin)
        .args(["train", s(&config_path("default.json"))])
        .env(cli::OUT_DIR_ENV, tmp.path().join("from_env"))
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    assert!(tmp.path().join("from_env/trace.jsonl").is_file());

    let unknown = Command::new(bin)
        .args(["flops", "grpo-xl"])
        .output()
        .unwrap();
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown preset"));
    let status = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(status.status.code(), Some(0));
}
