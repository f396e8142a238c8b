//! End-to-end invocations of the compiled binary: exit codes, stdout
//! summaries, and the files each subcommand leaves behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bttf_core::dataio::{synthetic_weather, write_kaggle_csv, TimeSeriesTable};

fn bttf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bttf"))
        .args(args)
        .env_remove("BTTF_THREADS")
        .output()
        .expect("binary runs")
}

fn bttf_with_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bttf"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn out_text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn err_text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic hourly weather ingested to a daily table file via the binary.
fn daily_table(dir: &Path, days: usize, seed: u64) -> PathBuf {
    let csv = dir.join("weather.csv");
    write_kaggle_csv(&csv, &synthetic_weather(days, seed).unwrap()).unwrap();
    let out = dir.join("daily.table");
    let o = bttf(&["ingest", "--input", path_str(&csv), "--out", path_str(&out), "--daily"]);
    assert_eq!(code(&o), 0, "{}", err_text(&o));
    out
}

const TINY_CONFIG: &str = r#"{
  "bttf": {
    "visionary": {
      "k": 4, "h": 1, "d_model": 8, "n_heads": 2, "n_layers": 1,
      "d_ff": 16, "epochs": 4, "batch_size": 8, "lr": 0.005, "seed": 9
    },
    "gbt": {"n_rounds": 12, "max_depth": 3, "seed": 9}
  }
}"#;

fn train_tiny_bundle(dir: &Path, table: &Path) -> PathBuf {
    let cfg = dir.join("tiny.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let bundle = dir.join("bundle");
    let o = bttf(&[
        "train",
        "--model",
        "bttf",
        "--data",
        path_str(table),
        "--out",
        path_str(&bundle),
        "--config",
        path_str(&cfg),
    ]);
    assert_eq!(code(&o), 0, "{}", err_text(&o));
    bundle
}

#[test]
fn help_documents_every_subcommand_and_flag() {
    let o = bttf(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = out_text(&o);
    for sub in ["ingest", "train", "benchmark", "predict", "importance"] {
        assert!(text.contains(sub), "top-level help misses {sub}: {text}");
    }

    let flags: [(&str, &[&str]); 5] = [
        ("ingest", &["--input", "--out", "--daily"]),
        ("train", &["--model", "--data", "--out", "--config", "--features"]),
        ("benchmark", &["--data", "--out", "--suite"]),
        ("predict", &["--model", "--data", "--out", "--from", "--steps", "--refit-interval"]),
        ("importance", &["--model", "--out"]),
    ];
    for (sub, wanted) in flags {
        let o = bttf(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub} --help failed");
        let text = out_text(&o);
        for flag in wanted {
            assert!(text.contains(flag), "{sub} help misses {flag}: {text}");
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    let o = bttf(&["ingest", "--no-such-flag"]);
    assert_eq!(code(&o), 2, "{}", err_text(&o));

    let o = bttf(&[]);
    assert_eq!(code(&o), 2);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.table");
    let o = bttf(&["ingest", "--input", "/no/such/file.csv", "--out", path_str(&out)]);
    assert_eq!(code(&o), 2, "{}", err_text(&o));
    assert!(err_text(&o).contains("does not exist"), "{}", err_text(&o));
    assert!(!out.exists());
}

#[test]
fn ingest_reports_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("w.csv");
    write_kaggle_csv(&csv, &synthetic_weather(10, 3).unwrap()).unwrap();

    let hourly = dir.path().join("hourly.table");
    let o = bttf(&["ingest", "--input", path_str(&csv), "--out", path_str(&hourly)]);
    assert_eq!(code(&o), 0, "{}", err_text(&o));
    let text = out_text(&o);
    assert!(text.contains("rows before cleaning: 240"), "{text}");
    assert!(text.contains("rows after cleaning: 240"), "{text}");
    assert_eq!(TimeSeriesTable::load(&hourly).unwrap().n_rows(), 240);

    let daily = dir.path().join("daily.table");
    let o = bttf(&[
        "ingest",
        "--input",
        path_str(&csv),
        "--out",
        path_str(&daily),
        "--daily",
    ]);
    assert_eq!(code(&o), 0, "{}", err_text(&o));
    assert!(out_text(&o).contains("daily rows: 10"), "{}", out_text(&o));
    assert_eq!(TimeSeriesTable::load(&daily).unwrap().n_rows(), 10);
}

#[test]
fn invalid_eta_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let table = daily_table(dir.path(), 30, 4);
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"bttf": {"gbt": {"eta": 0.0}}}"#).unwrap();
    let model = dir.path().join("m.json");
    let o = bttf(&[
        "train",
        "--model",
        "gbt",
        "--data",
        path_str(&table),
        "--out",
        path_str(&model),
        "--config",
        path_str(&cfg),
    ]);
    assert_eq!(code(&o), 2, "{}", err_text(&o));
    assert!(err_text(&o).contains("eta"), "{}", err_text(&o));
    assert!(!model.exists());
}

#[test]
fn gbt_training_writes_model_trace_and_importance() {
    let dir = tempfile::tempdir().unwrap();
    let table = daily_table(dir.path(), 40, 5);
    let model = dir.path().join("oneday.json");
    let o = bttf(&[
        "train",
        "--model",
        "gbt",
        "--features",
        "one-day",
        "--data",
        path_str(&table),
        "--out",
        path_str(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", err_text(&o));
    assert!(model.exists());

    let trace = fs::read_to_string(dir.path().join("oneday.curves.csv")).unwrap();
    assert!(trace.starts_with("round,objective\n"), "{trace}");
    assert!(trace.lines().count() > 1);

    let imp = dir.path().join("imp.csv");
    let o = bttf(&["importance", "--model", path_str(&model), "--out", path_str(&imp)]);
    assert_eq!(code(&o), 0, "{}", err_text(&o));
    let text = fs::read_to_string(&imp).unwrap();
    assert!(text.starts_with("feature,f_score\n"), "{text}");
    assert!(text.contains("Apparent Temperature (C)"), "{text}");
}

#[test]
fn bttf_training_is_bitwise_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let table = daily_table(dir.path(), 30, 6);
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();

    let mut bundles = Vec::new();
    for name in ["m1", "m2"] {
        let bundle = dir.path().join(name);
        let o = bttf(&[
            "train",
            "--model",
            "bttf",
            "--data",
            path_str(&table),
            "--out",
            path_str(&bundle),
            "--config",
            path_str(&cfg),
        ]);
        assert_eq!(code(&o), 0, "{}", err_text(&o));
        for part in ["bundle.json", "visionary.bttf", "decision.json", "curves.csv"] {
            assert!(bundle.join(part).exists(), "{name} misses {part}");
        }
        bundles.push(bundle);
    }
    for part in ["visionary.bttf", "decision.json", "bundle.json"] {
        let a = fs::read(bundles[0].join(part)).unwrap();
        let b = fs::read(bundles[1].join(part)).unwrap();
        assert_eq!(a, b, "{part} differs between identical runs");
    }
}

#[test]
fn predict_rows_satisfy_the_adjustment_identity() {
    let dir = tempfile::tempdir().unwrap();
    let table = daily_table(dir.path(), 30, 7);
    let bundle = train_tiny_bundle(dir.path(), &table);

    let pred = dir.path().join("pred.csv");
    let o = bttf(&[
        "predict",
        "--model",
        path_str(&bundle),
        "--data",
        path_str(&table),
        "--from",
        "12",
        "--steps",
        "5",
        "--out",
        path_str(&pred),
    ]);
    assert_eq!(code(&o), 0, "{}", err_text(&o));

    let text = fs::read_to_string(&pred).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,x_t,delta,x_adjusted,truth");
    assert_eq!(lines.len(), 1 + 5);
    for (i, line) in lines[1..].iter().enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        assert_eq!(parts.len(), 5, "{line}");
        assert_eq!(parts[0].parse::<usize>().unwrap(), 12 + i);
        let x_t: f64 = parts[1].parse().unwrap();
        let delta: f64 = parts[2].parse().unwrap();
        let x_adj: f64 = parts[3].parse().unwrap();
        assert_eq!((x_t + delta).to_bits(), x_adj.to_bits(), "{line}");
        assert!(!parts[4].is_empty(), "truth known inside the table: {line}");
    }

    // One n-step run equals n single-step runs when refits are off.
    for i in 0..3usize {
        let single = dir.path().join(format!("s{i}.csv"));
        let o = bttf(&[
            "predict",
            "--model",
            path_str(&bundle),
            "--data",
            path_str(&table),
            "--from",
            &(12 + i).to_string(),
            "--steps",
            "1",
            "--out",
            path_str(&single),
        ]);
        assert_eq!(code(&o), 0, "{}", err_text(&o));
        let line = fs::read_to_string(&single).unwrap().lines().nth(1).unwrap().to_string();
        assert_eq!(line, lines[1 + i], "step {i}");
    }

    // Out-of-range origins and step counts are usage errors.
    for (from, steps) in [("2", "1"), ("12", "0"), ("12", "1000")] {
        let o = bttf(&[
            "predict",
            "--model",
            path_str(&bundle),
            "--data",
            path_str(&table),
            "--from",
            from,
            "--steps",
            steps,
            "--out",
            path_str(&pred),
        ]);
        assert_eq!(code(&o), 2, "from {from} steps {steps}: {}", err_text(&o));
    }
}

#[test]
fn benchmark_writes_reports_and_reference_columns() {
    let dir = tempfile::tempdir().unwrap();
    let table = daily_table(dir.path(), 40, 8);
    let suite = dir.path().join("suite.json");
    fs::write(
        &suite,
        r#"{
          "kinds": ["gbt-one-day", "gbt-time-series"],
          "epochs": [1],
          "visionary": {"k": 4, "h": 1, "d_model": 8, "n_heads": 2, "n_layers": 1,
                        "d_ff": 16, "epochs": 2, "batch_size": 8},
          "gbt": {"n_rounds": 8, "max_depth": 3}
        }"#,
    )
    .unwrap();
    let out = dir.path().join("bench");
    let o = bttf(&[
        "benchmark",
        "--data",
        path_str(&table),
        "--out",
        path_str(&out),
        "--suite",
        path_str(&suite),
    ]);
    assert_eq!(code(&o), 0, "{}", err_text(&o));
    let text = out_text(&o);
    assert!(text.contains("| Model |"), "{text}");
    assert!(text.contains("gbt-one-day"), "{text}");

    let reports: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("reports.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    let table_md = fs::read_to_string(out.join("table.md")).unwrap();
    assert!(table_md.contains("(paper)"), "{table_md}");

    let o = bttf_with_env(
        &["benchmark", "--data", path_str(&table), "--out", path_str(&out)],
        "BTTF_THREADS",
        "zero",
    );
    assert_eq!(code(&o), 2, "{}", err_text(&o));
    assert!(err_text(&o).contains("BTTF_THREADS"), "{}", err_text(&o));
}
