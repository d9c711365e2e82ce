//! The `canf` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn canf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run canf")
}

const TINY: [&str; 12] = [
    "--set", "width=16", "--set", "depth=2", "--set", "heads=2", "--set", "cond_dim=8", "--set", "epochs=2", "--set",
    "n_per_class=8",
];

#[test]
fn train_then_sample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", "t"];
    args.extend(TINY);
    let out = canf(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = dir.path().join("t");
    assert!(t.join("model.canf").exists());
    let csv = std::fs::read_to_string(t.join("train.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(csv.starts_with("run_id,suite,variant,seed,epoch,train_loss,eval_loss,fidelity,step_ms,config_hash"));
    assert_eq!(std::fs::read_to_string(t.join("train.jsonl")).unwrap().lines().count(), 3);

    for o in ["a", "b"] {
        let out = canf(
            &["sample", "--checkpoint", "t/model.canf", "--count", "3", "--steps", "5", "--out", o],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["sample_000.pgm", "sample_002.pgm", "samples.canf"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert!(std::fs::read(dir.path().join("a/sample_000.pgm")).unwrap().starts_with(b"P5\n8 8\n255\n"));
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = canf(&["train", "--set", "widht=3"], dir.path());
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("did you mean `width`"));

    let out = canf(&["sample", "--checkpoint", "missing.canf"], dir.path());
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");

    let out = canf(&["ablate", "--suite", "nope"], dir.path());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn bench_has_one_row_per_shape_and_batch() {
    let dir = tempfile::tempdir().unwrap();
    let out = canf(&["bench", "--batch", "1,2", "--repeats", "3", "--out", "b"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with('C')).count(), 3 * 2);
    assert!(dir.path().join("b/bench.csv").exists());
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = canf(&["verify"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.matches("PASS").count(), 4, "{text}");
}

#[test]
fn ablate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--suite", "condition-sources", "--seeds", "0", "--out", "r"];
    args.extend(TINY);
    args.extend(["--set", "fidelity_per_class=0"]);
    let out = canf(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    for v in ["timestep-only", "class-only", "all"] {
        assert!(table.contains(v), "{table}");
    }
    let csv = std::fs::read_to_string(dir.path().join("r/condition-sources.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
}
