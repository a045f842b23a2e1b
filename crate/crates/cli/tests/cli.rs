use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pcmamba");

/// A one-block network small enough to train in a test.
const TINY: &str = "\
embed_dim = 4
stage_depths = 1,0,0,0
bottleneck_depth = 0
decoder_depths = 0,0,0
state_dim = 2
crn_hidden = 8
lr0 = 0.003
batch_size = 2
epochs = 2
";

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("PCMAMBA_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn gen_tiny(dir: &Path, n: &str) {
    let o = run(&[
        "gen-data",
        "--out",
        p(dir),
        "--n",
        n,
        "--size",
        "32x32",
        "--seed",
        "3",
        "--split",
        "0.75,0.25,0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["gen-data", "--out", p(d), "--n", "1", "--size", "64x64", "--seed", "7"]);
        assert_eq!(code(&o), 0);
    }
    let files = dir_bytes(&a);
    assert_eq!(files.len(), 3);
    assert_eq!(files, dir_bytes(&b));

    let c = tmp.path().join("c");
    run(&["gen-data", "--out", p(&c), "--n", "1", "--size", "64x64", "--seed", "8"]);
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn train_then_eval_writes_three_rows_per_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "4");
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = tmp.path().join("run");
    let o = run(&[
        "train",
        "--data",
        p(&data),
        "--variant",
        "ppm-only",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.pcck", "last.pcck", "history.csv", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(out.join("config.txt"))
        .unwrap()
        .contains("variant = ppm-only"));

    let csv = tmp.path().join("eval/metrics.csv");
    let o = run(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&out.join("best.pcck")),
        "--out",
        p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 3);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 10);
        assert_eq!(cols[0], (i / 3).to_string());
        assert_eq!(cols[1], (i % 3 + 1).to_string());
    }
    assert!(csv.with_extension("summary.json").exists());
    assert!(stdout(&o).contains("mean dice"));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "4");
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = tmp.path().join("run");
    let o = run(&[
        "train",
        "--data",
        p(&data),
        "--variant",
        "e2e",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(resolved.contains("epochs = 1\n"));
    assert!(resolved.contains("embed_dim = 4\n"));
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 2);
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "4");
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let train = |out: &Path, threads: &str| {
        let o = Command::new(BIN)
            .args([
                "train",
                "--data",
                p(&data),
                "--variant",
                "full",
                "--config",
                p(&cfg),
                "--out",
                p(out),
            ])
            .env("PCMAMBA_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("last.pcck")).unwrap()
    };
    assert_eq!(
        train(&tmp.path().join("one"), "1"),
        train(&tmp.path().join("three"), "3")
    );
}

#[test]
fn scan_suite_passes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let reports = tmp.path().join("reports");
    let started = std::time::Instant::now();
    let o = run(&["verify", "--suite", "scan", "--out", p(&reports)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(started.elapsed().as_secs() < 60);
    assert!(reports.join("scan_oracle.json").exists());

    let o = run(&["report", "--in", p(&reports)]);
    assert_eq!(code(&o), 0);
    let table = stdout(&o);
    assert!(table.contains("selective.f32.L1024") && table.contains("1 probe(s), 0 failed"));
}

#[test]
fn failed_threshold_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let reports = tmp.path().join("reports");
    let o = run(&[
        "verify",
        "--suite",
        "convergence",
        "--out",
        p(&reports),
        "--config",
        p(&cfg),
        "--size",
        "32x32",
        "--n",
        "6",
        "--epochs",
        "1",
        "--seeds",
        "0",
        "--dice-threshold",
        "1.0",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(reports.join("convergence.json").exists());
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(code(&run(&["gen-data", "--bogus"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["gen-data", "--out", "/tmp/x", "--size", "30x30"])), 1);
    assert_eq!(code(&run(&["bench", "--op", "scan", "--sizes", "0"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let o = run(&[
        "eval",
        "--data",
        p(&missing),
        "--checkpoint",
        p(&missing),
        "--out",
        p(&tmp.path().join("m.csv")),
    ]);
    assert_eq!(code(&o), 2);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "4");
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = run(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("run")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn bench_prints_one_row_per_size() {
    for op in ["scan", "ppm", "crn", "forward"] {
        let sizes = if op == "forward" { "32" } else { "4,8" };
        let o = run(&["bench", "--op", op, "--sizes", sizes, "--reps", "1", "--channels", "4"]);
        assert_eq!(code(&o), 0, "{op}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout(&o).lines().count(), 1 + sizes.split(',').count());
    }
}
