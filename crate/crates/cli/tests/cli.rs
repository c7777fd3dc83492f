use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_polyp-audit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"seed = 3
seeds = [1, 0]
folds = 2
probes = ["heuristic_apparent", "heuristic_physics", "feature_mlp"]

[dataset.cohort]
n_patients = 30
n_polyps = 40

[dataset.confound]
frames_per_polyp = 3

[train]
epochs = 2

[[plans]]
scale = "none"

[[plans]]
scale = "oracle_frame"
probes = ["heuristic_physics", "feature_mlp"]
"#;

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn generate_reports_class_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.toml",
        "[dataset.cohort]\nn_patients = 159\nn_polyps = 232\nlarge_fraction = 0.3663793103448276\n[dataset.confound]\nframes_per_polyp = 1\n",
    );
    let out = dir.path().join("data");
    let o = run(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let small: i64 = line
        .split('(')
        .nth(1)
        .unwrap()
        .split(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(line.starts_with("232 polyps"), "{line}");
    assert!((small - 147).abs() <= 1, "{line}");
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[
            "generate",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn config_errors_name_the_key_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", "[dataset.confound]\nrho = 1.5\n");
    let o = run(&[
        "generate",
        "--config",
        &cfg,
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("confound.rho"), "{}", stderr(&o));

    let cfg = write(
        dir.path(),
        "typo.toml",
        "[dataset.confound]\nfrmes_per_polyp = 3\n",
    );
    let o = run(&[
        "generate",
        "--config",
        &cfg,
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("frmes_per_polyp"), "{}", stderr(&o));

    let cfg = write(
        dir.path(),
        "empty.toml",
        &TINY[..TINY.find("[[plans]]").unwrap()],
    );
    let o = run(&[
        "audit",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no plans"), "{}", stderr(&o));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", TINY);
    let blocker = write(dir.path(), "file", "not a directory");
    let o = run(&[
        "generate",
        "--config",
        &cfg,
        "--out",
        &format!("{blocker}/data"),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn audit_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", TINY);
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let o = run(&[
        "generate",
        "--config",
        &cfg,
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&[
        "audit",
        "--config",
        &cfg,
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    assert_eq!(fs::read_to_string(out.join("config.toml")).unwrap(), TINY);
    let folds = fs::read_to_string(out.join("folds.csv")).unwrap();
    let mut lines = folds.lines();
    assert_eq!(
        lines.next(),
        Some("probe,input,scale,mask,seed,fold,macro_f1,recall_large")
    );
    // 5 (probe, plan) rows, 2 seeds, 2 folds, sorted by probe, plan, seed, fold.
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 20);
    assert_eq!(
        (rows[0][0], rows[0][2], rows[0][4], rows[0][5]),
        ("feature_mlp", "none", "0", "0")
    );
    assert_eq!((rows[1][4], rows[1][5]), ("0", "1"));
    assert_eq!((rows[2][4], rows[2][5]), ("1", "0"));
    assert_eq!(rows[4][2], "oracle_frame");

    // A single report prints its own rows, with the delta column.
    let o = run(&["report", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 1 + 5);
    let oracle = table
        .lines()
        .find(|l| l.starts_with("feature_mlp") && l.contains("oracle_frame"))
        .unwrap();
    assert!(
        oracle.trim_end().ends_with(|c: char| c.is_ascii_digit()),
        "{table}"
    );

    let o = run(&[
        "report",
        out.to_str().unwrap(),
        out.join("report.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), table);

    // Same config twice merges; a different config is refused without --force.
    let other_cfg = write(
        dir.path(),
        "other.toml",
        &TINY.replace("seeds = [1, 0]", "seeds = [2, 3]"),
    );
    let other = dir.path().join("other");
    let o = run(&[
        "audit",
        "--config",
        &other_cfg,
        "--out",
        other.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["report", out.to_str().unwrap(), other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let merged = dir.path().join("merged.csv");
    let o = run(&[
        "report",
        out.to_str().unwrap(),
        other.to_str().unwrap(),
        "--force",
        "--csv",
        merged.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&merged).unwrap().lines().count(), 1 + 10);

    // Reports from another schema version are rejected.
    let json = fs::read_to_string(out.join("report.json")).unwrap();
    let stale = write(
        dir.path(),
        "stale.json",
        &json.replacen("\"schema_version\": 1", "\"schema_version\": 0", 1),
    );
    let o = run(&["report", &stale]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("schema version"), "{}", stderr(&o));
}

#[test]
fn probe_plan_mismatch_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.toml",
        &TINY.replace(
            "probes = [\"heuristic_physics\", \"feature_mlp\"]",
            "probes = [\"heuristic_apparent\"]",
        ),
    );
    let o = run(&[
        "audit",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("heuristic_apparent"), "{}", stderr(&o));
    assert!(!dir.path().join("o").exists());
}
