use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.cfg");

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccgrasp")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset plus a smoke-trained run, built once.
struct Fixture {
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = fs::remove_dir_all(&root);
        let data = root.join("data");
        let run = root.join("run");
        ok(&["gen-data", "--n", "300", "--seed", "5", "--out", s(&data)]);
        ok(&["train", "--config", SMOKE, "--data", s(&data), "--out", s(&run)]);
        Fixture { data, run }
    })
}

fn checkpoint() -> String {
    s(&fixture().run.join("best.json")).to_string()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = ok(&["gen-data", "--n", "200", "--seed", "7", "--out", s(&a), "--threads", "3"]);
    assert!(out.contains("[resolved config]") && out.contains("seed = 7"));
    ok(&["gen-data", "--n", "200", "--seed", "7", "--out", s(&b)]);
    for f in ["dataset.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["gen-data", "--n", "10"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Usage"));
    let zero = run(&["gen-data", "--n", "0", "--out", s(dir.path())]);
    assert_eq!(code(&zero), 2);
    assert!(String::from_utf8_lossy(&zero.stderr).contains("--n"));
    assert_eq!(code(&run(&["gen-data", "--n", "5", "--out", s(dir.path()), "--bogus"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn train_rejects_unknown_key_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "batch_size = 4\nlearning_rate = 0.1\n").unwrap();
    let out = run(&["train", "--config", s(&cfg), "--data", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let bad_set = run(&["train", "--set", "hidden_widht=3", "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(code(&bad_set), 2);
    assert!(String::from_utf8_lossy(&bad_set.stderr).contains("hidden_widht"));
}

#[test]
fn train_prints_resolved_config_and_writes_only_to_out() {
    let f = fixture();
    let mut names: Vec<String> = fs::read_dir(&f.run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["best.json", "last.json", "train_log.csv"]);
    let log = fs::read_to_string(f.run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 201);
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--config", SMOKE, "--data", s(&dir.path().join("nope")), "--out", s(dir.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn sample_counts_calls_and_is_reproducible() {
    let f = fixture();
    let ck = checkpoint();
    let one = ok(&["sample", "--checkpoint", &ck, "--data", s(&f.data), "--index", "3", "--steps", "1", "--seed", "9"]);
    assert!(one.contains("network calls: 1\n"), "{one}");
    let ten = ok(&["sample", "--checkpoint", &ck, "--data", s(&f.data), "--index", "3", "--steps", "10", "--seed", "9"]);
    assert!(ten.contains("network calls: 9\n"), "{ten}");
    let grasp = |o: &str| o.lines().find(|l| l.starts_with("grasp:")).unwrap().to_string();
    let again = ok(&["sample", "--checkpoint", &ck, "--data", s(&f.data), "--index", "3", "--steps", "10", "--seed", "9"]);
    assert_eq!(grasp(&ten), grasp(&again));
    let out = run(&["sample", "--checkpoint", &ck, "--data", s(&f.data), "--index", "300"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn sample_json_output() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&["sample", "--checkpoint", &checkpoint(), "--data", s(&f.data), "--index", "0", "--out", s(dir.path())]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sample.json")).unwrap()).unwrap();
    assert_eq!(v["network_calls"], 9);
    assert!(v["pose"][2].as_f64().unwrap() > 0.0);
}

fn read_traj(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn trajectory_rows_and_time_column() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&["inspect-trajectory", "--checkpoint", &checkpoint(), "--data", s(&f.data), "--grid", "2000", "--out", s(dir.path())]);
    let rows = read_traj(&dir.path().join("trajectory.csv"));
    assert_eq!(rows.len(), 2000);
    assert_eq!(rows[0][1], 1000.0);
    assert_eq!(rows[1999][1], 1.0);
    assert!(rows.windows(2).all(|w| w[1][1] < w[0][1]));
}

#[test]
fn stationary_trajectory_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["inspect-trajectory", "--field", "stationary", "--grid", "500", "--seed", "4", "--out", s(dir.path())]);
    let rows = read_traj(&dir.path().join("trajectory.csv"));
    assert_eq!(rows.len(), 500);
    for r in &rows {
        assert_eq!(&r[2..], &rows[0][2..]);
    }
}

#[test]
fn trajectory_grid_refinement_agrees() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (n, d) in [("1000", &a), ("2000", &b)] {
        ok(&["inspect-trajectory", "--checkpoint", &checkpoint(), "--data", s(&f.data), "--grid", n, "--seed", "2", "--out", s(d)]);
    }
    let ta = read_traj(&a.join("trajectory.csv"));
    let tb = read_traj(&b.join("trajectory.csv"));
    let (la, lb) = (ta.last().unwrap(), tb.last().unwrap());
    let dist: f64 = la[2..].iter().zip(&lb[2..]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = lb[2..].iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(dist <= 0.05 * norm.max(1.0), "terminal rows differ by {dist}");
}

#[test]
fn eval_report_rows_and_provenance() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint();
    let before = fs::read(&ck).unwrap();
    let out = ok(&["eval", "--checkpoint", &ck, "--data", s(&f.data), "--steps-list", "1,3,10", "--baselines", "oracle", "--out", s(dir.path())]);
    assert!(out.contains("[resolved config]"));
    assert_eq!(fs::read(&ck).unwrap(), before);
    let mut rdr = csv::Reader::from_path(dir.path().join("report.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 8);
    let llgd: Vec<_> = rows.iter().filter(|r| &r[0] == "llgd").collect();
    assert_eq!(llgd.len(), 6);
    let ck_json: serde_json::Value = serde_json::from_slice(&before).unwrap();
    let hash = ck_json["config_hash"].as_str().unwrap();
    assert!(rows.iter().all(|r| &r[10] == hash));
    let oracle: Vec<_> = rows.iter().filter(|r| &r[0] == "oracle").collect();
    assert!(oracle.iter().all(|r| &r[5] == "1.0"));
}

#[test]
fn eval_bad_sampler_exits_two() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--checkpoint", &checkpoint(), "--data", s(&f.data), "--baselines", "gan:3", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn bench_writes_latency_table() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&["bench", "--checkpoint", &checkpoint(), "--data", s(&f.data), "--steps-list", "1,3", "--ddpm-steps", "20", "--out", s(dir.path())]);
    let text = fs::read_to_string(dir.path().join("latency.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(fs::read_to_string(dir.path().join("latency.txt")).unwrap().contains("excluded"));
    let few = run(&["bench", "--checkpoint", &checkpoint(), "--data", s(&f.data), "--trials", "5", "--out", s(dir.path())]);
    assert_eq!(code(&few), 2);
}
