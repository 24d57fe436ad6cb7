//! End-to-end tests of the `fedcpsl` binary: exit codes, determinism,
//! override precedence and the comparison/check report contents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedcpsl"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .env_remove("FEDCPSL_DATA_DIR")
        .args(args)
        .output()
        .expect("spawn fedcpsl")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// The MNIST fixture shipped in the workspace `data/` directory.
fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// A few fast rounds on tiny blobs.
const TINY: &[&str] = &[
    "--n_clients",
    "4",
    "--m",
    "2",
    "--rounds",
    "2",
    "--blobs_per_class",
    "20",
    "--trace_gaps",
    "false",
];

#[test]
fn run_smoke_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &[&["run"], TINY].concat());
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "header plus one row per round");
    assert!(lines[0].starts_with("round,gap_global_gradnorm2"));
    assert!(lines[1].starts_with("1,"));
    let summary = stdout(&out);
    assert!(summary.contains("fedcpsl seed=17"), "{summary}");
    assert!(summary.contains("trace.csv"), "{summary}");
}

#[test]
fn run_emits_json_lines_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &[&["run", "--format", "jsonl"], TINY].concat());
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with('{') && lines[0].contains("\"round\":1"));
}

#[test]
fn same_seed_twice_gives_byte_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.csv", "b.csv"] {
        let out = run_in(dir.path(), &[&["run", "--out", name], TINY].concat());
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert!(!a.is_empty() && a == b);
}

#[test]
fn flag_override_beats_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("base.toml"),
        "seed = 5\nn_clients = 4\nm = 2\nrounds = 2\nblobs_per_class = 20\ntrace_gaps = false\n",
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &[
            "run",
            "--config",
            "base.toml",
            "--seed",
            "9",
            "--out",
            "file.csv",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let out = run_in(
        dir.path(),
        &[&["run", "--seed", "9", "--out", "flags.csv"], TINY].concat(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let from_file = std::fs::read(dir.path().join("file.csv")).unwrap();
    let from_flags = std::fs::read(dir.path().join("flags.csv")).unwrap();
    assert_eq!(from_file, from_flags);
}

#[test]
fn invalid_participation_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["run", "--n_clients", "2", "--m", "5"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("`m`"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "bogus_key = 3\n").unwrap();
    let out = run_in(dir.path(), &["run", "--config", "bad.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bogus_key"), "{}", stderr(&out));
}

#[test]
fn divergent_eta_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &[&["run", "--eta", "1e8"], TINY].concat());
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn data_dir_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "partition-stats",
        "--dataset",
        "mnist_subset",
        "--dataset_size",
        "400",
        "--n_clients",
        "4",
        "--m",
        "2",
    ];
    let out = bin()
        .current_dir(dir.path())
        .env("FEDCPSL_DATA_DIR", data_dir())
        .args(args)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("total"));

    // An explicit data_dir flag wins over a bogus environment value.
    let out = bin()
        .current_dir(dir.path())
        .env("FEDCPSL_DATA_DIR", "/nonexistent")
        .args(args)
        .arg("--data_dir")
        .arg(data_dir())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    // Without either, the default ./data of an empty tempdir is missing.
    let out = run_in(dir.path(), &args);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train-images"), "{}", stderr(&out));
}

fn compare_rows(text: &str) -> Vec<Vec<String>> {
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "algorithm,seed,rounds,train_loss,test_acc_global,test_acc_personalized,pseudo_label_acc,rounds_to_threshold"
    );
    lines
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn compare_single_pair_emits_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[&["compare", "--algorithms", "apfl", "--seeds", "3"], TINY].concat(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let rows = compare_rows(&stdout(&out));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "apfl");
    assert_eq!(rows[0][1], "3");
    assert_eq!(rows[0].len(), 8);
}

#[test]
fn compare_rows_are_sorted_by_name_then_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            &["compare", "--algorithms", "fedshvrp,apfl", "--seeds", "9,1"],
            TINY,
        ]
        .concat(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let rows = compare_rows(&stdout(&out));
    let order: Vec<(String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    let want = [
        ("apfl", "1"),
        ("apfl", "9"),
        ("fedshvrp", "1"),
        ("fedshvrp", "9"),
    ];
    assert_eq!(order, want.map(|(a, s)| (a.to_owned(), s.to_owned())));
}

#[test]
fn compare_unreached_threshold_reports_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "compare",
            "--algorithms",
            "fedcpsl",
            "--seeds",
            "1,2",
            "--n_clients",
            "4",
            "--m",
            "2",
            "--rounds",
            "1",
            "--blobs_per_class",
            "20",
            "--trace_gaps",
            "false",
            "--eta",
            "1e-6",
            "--acc_threshold",
            "0.999",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    for row in compare_rows(&stdout(&out)) {
        assert_eq!(row[7], "-1", "{row:?}");
    }
}

#[test]
fn compare_writes_csv_to_file_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            &[
                "compare",
                "--algorithms",
                "apsfl",
                "--seeds",
                "2",
                "--out",
                "cmp.csv",
            ],
            TINY,
        ]
        .concat(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("wrote 1 row to"));
    let text = std::fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    assert_eq!(compare_rows(&text).len(), 1);
}

/// Personalization pays off on overlapping non-IID blobs: each client sees
/// two of three classes, so its mixture model clears a 0.95 accuracy bar
/// well before the shared global model does.
#[test]
fn compare_fedcpsl_reaches_threshold_before_fedavg() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "compare",
            "--algorithms",
            "fedcpsl,fedavg_ss",
            "--seeds",
            "1,2,3,4,5",
            "--n_clients",
            "6",
            "--m",
            "3",
            "--rounds",
            "80",
            "--blobs_per_class",
            "100",
            "--blobs_spread",
            "0.8",
            "--eta",
            "0.005",
            "--acc_threshold",
            "0.95",
            "--trace_gaps",
            "false",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let mut to_threshold: BTreeMap<(String, u64), i64> = BTreeMap::new();
    for row in compare_rows(&stdout(&out)) {
        to_threshold.insert(
            (row[0].clone(), row[1].parse().unwrap()),
            row[7].parse().unwrap(),
        );
    }
    let mut wins = 0;
    for seed in 1..=5u64 {
        let fed = to_threshold[&("fedcpsl".to_owned(), seed)];
        let avg = to_threshold[&("fedavg_ss".to_owned(), seed)];
        assert_ne!(
            fed, -1,
            "fedcpsl never reached the threshold at seed {seed}"
        );
        if avg == -1 || fed < avg {
            wins += 1;
        }
    }
    assert!(wins >= 3, "fedcpsl won only {wins} of 5 seeds");
}

#[test]
fn check_reports_unchecked_bounds_without_l() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &[&["check"], TINY].concat());
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("config: ok"), "{text}");
    assert!(text.contains("stepsizes: unchecked"), "{text}");
    assert!(text.contains("gradient self-test: pass"), "{text}");
    assert!(text.contains("identity self-test: pass"), "{text}");
}

#[test]
fn check_reports_numeric_bounds_with_l() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[&["check", "--l_estimate", "1"], TINY].concat(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("vs bound"), "{text}");
    assert!(text.contains("q_eff in ["), "{text}");
}

#[test]
fn partition_stats_lists_every_client() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &[&["partition-stats"], TINY].concat());
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    // Four client rows, a header and a totals line.
    assert_eq!(text.lines().count(), 6, "{text}");
    assert!(text.lines().last().unwrap().starts_with("total"), "{text}");
}

#[test]
fn help_and_version_exit_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    for flag in ["--help", "--version"] {
        let out = run_in(dir.path(), &[flag]);
        assert_eq!(code(&out), 0);
    }
    let out = run_in(dir.path(), &["run", "--no_such_flag", "1"]);
    assert_eq!(code(&out), 1);
}

#[cfg(unix)]
#[test]
fn closed_stdout_pipe_does_not_panic() {
    // `fedcpsl partition-stats | head -1` must truncate quietly, not abort
    // with a broken-pipe panic.
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin()
        .current_dir(dir.path())
        .env_remove("FEDCPSL_DATA_DIR")
        .args(["partition-stats"])
        .args(TINY)
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .expect("spawn fedcpsl");
    drop(child.stdout.take());
    let out = child.wait_with_output().unwrap();
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(!err.contains("panicked"), "stderr: {err}");
}
