use std::path::Path;
use std::process::{Command, Output};

fn paged_evict(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paged-evict")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_budget_run_writes_one_record_without_evictions() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("full.csv");
    let args = ["run", "--policy", "full", "--budget", "4096", "--page-size", "16", "--prefill", "128", "--decode", "512", "--seed", "7"];
    let out = paged_evict(&[&args[..], &["--out-csv", path(&csv)]].concat());
    assert!(out.status.success(), "{}", stderr(&out));

    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let header: Vec<&str> = lines[0].split(',').collect();
    let row: Vec<&str> = lines[1].split(',').collect();
    let field = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(field("policy"), "full");
    assert_eq!(field("evictions_total"), "0");
    assert_eq!(field("seed"), "7");
}

#[test]
fn misaligned_budget_exits_two() {
    let out = paged_evict(&["run", "--budget", "1000", "--page-size", "16"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("budget must be a multiple of page size"), "{msg}");
    assert!(msg.contains("budget:"), "{msg}");
}

#[test]
fn bad_values_name_their_field() {
    for (flag, value) in [("--heads", "0"), ("--mode", "sideways"), ("--policy", "h2o"), ("--seed", "x")] {
        let out = paged_evict(&["run", flag, value]);
        assert_eq!(out.status.code(), Some(2), "{flag}");
        assert!(stderr(&out).contains(&flag[2..]), "{flag}: {}", stderr(&out));
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "colour = red\n").unwrap();
    let out = paged_evict(&["run", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("colour"));
}

#[test]
fn sweep_file_yields_fifteen_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    let csv = dir.path().join("sweep.csv");
    std::fs::write(
        &cfg,
        format!(
            "policy = paged-eviction, streaming-llm, inv-key-l2, key-diff, full\n\
             budget = 256, 512, 1024\nprefill = 64\ndecode = 32\nbatch = 1\nlayers = 1\nout-csv = {}\n",
            path(&csv)
        ),
    )
    .unwrap();
    let out = paged_evict(&["run", "--config", path(&cfg)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 16);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let csv = dir.path().join("out.csv");
    std::fs::write(&cfg, "seed = 1\nprefill = 32\ndecode = 16\nbatch = 1\n").unwrap();
    let out = paged_evict(&["sweep", "--config", path(&cfg), "--seed", "5", "--out-csv", path(&csv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(11) == Some("5")));
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let csv = dir.path().join(format!("{tag}.csv"));
        let jsonl = dir.path().join(format!("{tag}.jsonl"));
        let out = paged_evict(&[
            "sweep", "--budget", "32", "--prefill", "40", "--decode", "40", "--seed", "4",
            "--out-csv", path(&csv), "--out-jsonl", path(&jsonl),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        outputs.push((std::fs::read(csv).unwrap(), std::fs::read(jsonl).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn thread_cap_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let jsonl = dir.path().join(format!("{threads}.jsonl"));
        let out = Command::new(env!("CARGO_BIN_EXE_paged-evict"))
            .env("PAGED_EVICT_THREADS", threads)
            .args(["run", "--policy", "key-diff", "--budget", "32", "--decode", "48", "--out-jsonl", path(&jsonl)])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        outputs.push(std::fs::read(jsonl).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let out = Command::new(env!("CARGO_BIN_EXE_paged-evict")).env("PAGED_EVICT_THREADS", "0").arg("verify").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_for_several_seeds() {
    for seed in ["0", "17"] {
        let out = paged_evict(&["verify", "--seed", seed]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
        assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    }
}

#[test]
fn verify_detects_skipped_budget_guard() {
    let out = paged_evict(&["verify", "--inject-fault", "skip-budget-guard"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("trigger cadence"), "{}", stderr(&out));
}
