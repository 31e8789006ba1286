use std::path::Path;
use std::process::{Command, Output};

fn pah(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pah"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn pah")
}

fn ok(args: &[&str]) -> String {
    let out = pah(args);
    assert!(
        out.status.success(),
        "pah {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus a short run with evaluation after the last epoch.
fn trained(dir: &Path) {
    let data = dir.join("data");
    let run = dir.join("run");
    ok(&[
        "gen-data", "--out", s(&data), "--ids", "3", "--images", "4", "--test-ids", "0", "--heldout", "4", "--seed",
        "5",
    ]);
    ok(&[
        "train",
        "--dataset",
        s(&data),
        "--out",
        s(&run),
        "--seed",
        "3",
        "--set",
        "epochs_warmup=1",
        "--set",
        "epochs_main=1",
        "--set",
        "batch_p=3",
        "--set",
        "batch_k=2",
        "--set",
        "eval_every=2",
        "--set",
        "allow_shared_identities=true",
    ]);
}

fn metric(csv: &str, split: &str, name: &str) -> f64 {
    csv.lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[0] == split && f[1] == name)
        .unwrap_or_else(|| panic!("{split},{name} missing from\n{csv}"))[2]
        .parse()
        .unwrap()
}

#[test]
fn eval_against_itself_ranks_every_query_first() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path());
    let out = d.path().join("self.csv");
    ok(&[
        "eval",
        "--checkpoint",
        s(&d.path().join("run/checkpoint.bin")),
        "--gallery-split",
        "query",
        "--scenario",
        "general",
        "--out",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(metric(&csv, "general", "rank1"), 1.0);
}

#[test]
fn retrieve_prints_top_k_rows_in_descending_order() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path());
    let stdout = ok(&[
        "retrieve",
        "--checkpoint",
        s(&d.path().join("run/checkpoint.bin")),
        "--query",
        s(&d.path().join("data/images/query_0000_000.png")),
        "--top-k",
        "5",
    ]);
    let sims: Vec<f64> = stdout
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(sims.len(), 5, "{stdout}");
    assert!(sims.windows(2).all(|w| w[0] >= w[1]), "{stdout}");
}

#[test]
fn eval_in_fresh_process_matches_training_eval() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path());
    let run = d.path().join("run");
    let fresh = d.path().join("fresh.csv");
    ok(&["eval", "--checkpoint", s(&run.join("checkpoint.bin")), "--out", s(&fresh)]);
    let during = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    let after = std::fs::read_to_string(&fresh).unwrap();
    assert_eq!(during, after);
}

#[test]
fn inspect_labels_writes_pngs() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path());
    let out = d.path().join("labels");
    ok(&[
        "inspect-labels",
        "--checkpoint",
        s(&d.path().join("run/checkpoint.bin")),
        "--out",
        s(&out),
        "--limit",
        "3",
    ]);
    let pngs = std::fs::read_dir(&out).unwrap().count();
    assert_eq!(pngs, 3);
}

#[test]
fn usage_errors_exit_nonzero() {
    assert!(!pah(&["train", "--no-such-flag"]).status.success());
    assert!(!pah(&["eval", "--checkpoint", "/nonexistent/checkpoint.bin"]).status.success());
    assert!(!pah(&["eval", "--checkpoint", "x", "--scenario", "sideways"]).status.success());
    assert!(!pah(&[]).status.success());
}
