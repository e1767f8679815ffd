use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kobt::data::{load_csv, ColumnRef, CsvOptions, Task};
use kobt::knockoff_filter::{run_kobt, FilterConfig, SelectionResult};

const BIN: &str = env!("CARGO_BIN_EXE_kobt");

fn kobt(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn kobt")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// y depends on the first two of six columns.
fn write_data(dir: &Path) -> PathBuf {
    let path = dir.join("data.csv");
    let mut s = String::from("y,a,b,c,d,e,f\n");
    let mut state = 12345u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    for _ in 0..60 {
        let x: Vec<f64> = (0..6).map(|_| next()).collect();
        let y = 3.0 * x[0] - 2.0 * x[1] + 0.3 * next();
        s.push_str(&format!("{y}"));
        for v in x {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    std::fs::write(&path, s).unwrap();
    path
}

const FILTER: &str = r#"{"q": 3, "boost": {"max_depth": 2, "max_trees": 20, "eta": 0.3}, "tune_init": 3, "tune_iter": 2, "cv_folds": 3, "master_seed": 5}"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.json");
    let body = format!(r#"{{"data": {{"path": "data.csv", "response_column": "y"}}, "filter": {FILTER}{extra}}}"#);
    std::fs::write(&path, body).unwrap();
    write_data(dir);
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn select_matches_the_library_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = kobt(&["select", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["selected.tsv", "features.tsv", "selection.json", "run_manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let text = std::fs::read_to_string(out.join("selection.json")).unwrap();
    let from_cli: SelectionResult = serde_json::from_str(&text).unwrap();

    let options = CsvOptions {
        has_header: true,
        response_column: ColumnRef::Name("y".into()),
        covariate_columns: None,
        task: Task::Regression,
    };
    let data = load_csv(&dir.path().join("data.csv"), &options).unwrap();
    let config: FilterConfig = serde_json::from_str(FILTER).unwrap();
    let direct = run_kobt(&data, &config).unwrap();
    assert_eq!(from_cli.selected, direct.selected);
    assert_eq!(from_cli.stats, direct.stats);
    assert_eq!(serde_json::to_string_pretty(&from_cli).unwrap() + "\n", text);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "select");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn out_of_range_delta_exits_one_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = kobt(&["select", "--config", s(&cfg), "--delta", "1.5", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("delta"), "{}", stderr(&o));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert_eq!(kobt(&["select", "--config", s(&cfg), "--bogus"]).status.code(), Some(1));
    assert_eq!(kobt(&["frobnicate"]).status.code(), Some(1));
    let missing = kobt(&["select", "--config", s(&dir.path().join("nope.json"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("config"));
    std::fs::write(dir.path().join("bad.json"), r#"{"filter": {"q": 2, "typo": 1}}"#).unwrap();
    let bad = kobt(&["select", "--config", s(&dir.path().join("bad.json"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("typo"), "{}", stderr(&bad));
    assert_eq!(kobt(&["--help"]).status.code(), Some(0));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = kobt(&["select", "--config", s(&cfg), "--out", s(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn knockoff_and_tune_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "knockoff_count": 2"#);
    let out = dir.path().join("k");
    let o = kobt(&["knockoff", "--config", s(&cfg), "--out", s(&out), "--knockoff-kind", "pc2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("knockoff_2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 6);
    assert_ne!(csv, std::fs::read_to_string(out.join("knockoff_1.csv")).unwrap());
    assert!(std::fs::read_to_string(out.join("knockoff_1.json")).unwrap().contains("pc_permute"));

    let out = dir.path().join("t");
    let o = kobt(&["tune", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = std::fs::read_to_string(out.join("tune_history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3 + 2);
}

#[test]
fn simulate_reports_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sim.json");
    std::fs::write(
        &spec,
        r#"{"experiment": {"protocol": "cv_error", "design": {"n": 40, "p": 20, "pi": 0.1},
            "structures": ["main", "quadratic"], "boost": {"max_trees": 10}, "cv_folds": 4, "reps": 2}}"#,
    )
    .unwrap();
    let out = dir.path().join("sim");
    let o = kobt(&["simulate", "--spec", s(&spec), "--reps", "5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("table.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.ends_with("\t5")), "{table}");
    assert_eq!(std::fs::read_to_string(out.join("long.tsv")).unwrap().lines().count(), 1 + 2 * 5);
}
