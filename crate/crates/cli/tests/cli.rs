use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ratecost_cli::svg::{render, PlotData, PlotPoint};
use ratecost_cli::tables::{BOUND_COLUMNS, DECOMPOSE_COLUMNS, SIM_COLUMNS};
use tempfile::TempDir;

const SCALAR_PLANT: &str = r#""plant": {"a": [[2]], "b": [[1]], "q": [[1]], "r": [[1]],
    "noise_v": {"family": "FAMILY", "covariance": [[1]]}}"#;

fn plant(family: &str) -> String {
    SCALAR_PLANT.replace("FAMILY", family)
}

fn write_config(dir: &TempDir, body: &str) -> PathBuf {
    let p = dir.path().join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

fn ratecost(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratecost"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a checked-in file; `UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "output differs from {}", path.display());
}

/// Parses CSV text into a header and rows of fields.
fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

// Closed-form scalar solution for A = 2, B = Q = R = 1.
fn b_min_scalar() -> f64 {
    2.0 + 5f64.sqrt()
}

fn m_scalar() -> f64 {
    (7.0 + 3.0 * 5f64.sqrt()) / 4.0
}

#[test]
fn bound_table_rows() {
    let dir = TempDir::new().unwrap();
    let b1 = b_min_scalar() + 1.0;
    let cfg = write_config(
        &dir,
        &format!(r#"{{{}, "bounds": ["thm1"], "b_grid": [4.0, {b1}, 1000000.0]}}"#, plant("gaussian")),
    );
    let out = ratecost(&["bound"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = parse_csv(&stdout(&out));
    assert_eq!(header, BOUND_COLUMNS);
    assert_eq!(rows.len(), 3);
    let (nats, bits, status) = (column(&header, "rate_nats"), column(&header, "rate_bits"), column(&header, "status"));

    assert_eq!(rows[0][status], "infeasible (b ≤ b_min=4.236068)");
    assert_eq!(rows[0][nats], "");

    // Unit noise entropy power is 1, so the bound is log 2 + (1/2) log(1 + M).
    let oracle = 2f64.ln() + 0.5 * m_scalar().ln_1p();
    let got: f64 = rows[1][nats].parse().unwrap();
    assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    assert!((got - 1.4370).abs() < 5e-5);
    let got_bits: f64 = rows[1][bits].parse().unwrap();
    assert!((got_bits - got / 2f64.ln()).abs() < 1e-12);

    let far: f64 = rows[2][nats].parse().unwrap();
    assert!((far - 2f64.ln()).abs() < 1e-3, "{far}");
}

#[test]
fn bound_json_matches_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!(r#"{{{}, "b_offsets": [0.5, 1.0]}}"#, plant("gaussian")));
    let csv_out = stdout(&ratecost(&["bound"], &cfg));
    let json_out = ratecost(&["bound", "--format", "json"], &cfg);
    assert!(json_out.status.success());
    let rows: Vec<serde_json::Value> = serde_json::from_str(&stdout(&json_out)).unwrap();
    let (_, csv_rows) = parse_csv(&csv_out);
    assert_eq!(rows.len(), csv_rows.len());
    assert_eq!(rows[0]["kind"], "thm1");
}

#[test]
fn partially_observed_bound_row() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        r#"{"plant": {"a": [[2]], "b": [[1]], "c": [[1]], "q": [[1]], "r": [[1]],
            "noise_v": {"family": "gaussian", "covariance": [[1]]},
            "noise_w": {"family": "gaussian", "covariance": [[1]]}},
            "bounds": ["thm5"], "b_offsets": [1.0]}"#,
    );
    let out = ratecost(&["bound"], &cfg);
    assert!(out.status.success());
    let (header, rows) = parse_csv(&stdout(&out));
    let got: f64 = rows[0][column(&header, "rate_nats")].parse().unwrap();
    // N = M for this plant, so the bound is log 2 + (1/2) log(1 + M^2).
    let oracle = 2f64.ln() + 0.5 * (m_scalar() * m_scalar()).ln_1p();
    assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
}

#[test]
fn empty_distortion_grid_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!(r#"{{{}, "d_grid": []}}"#, plant("laplace")));
    let out = ratecost(&["sweep"], &cfg);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("d_grid is empty"), "{err}");
}

#[test]
fn unsorted_grid_and_missing_config_fail() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!(r#"{{{}, "b_grid": [6.0, 5.0]}}"#, plant("gaussian")));
    assert_eq!(ratecost(&["bound"], &cfg).status.code(), Some(1));
    let missing = dir.path().join("absent.json");
    assert_eq!(ratecost(&["bound"], &missing).status.code(), Some(1));
}

fn short_sweep_config(dir: &TempDir) -> PathBuf {
    write_config(
        dir,
        &format!(
            r#"{{{}, "d_grid": [1, 1.5, 2.2, 3.3, 5, 7.5, 11, 16], "horizon": 20000, "seeds": [3]}}"#,
            plant("laplace")
        ),
    )
}

#[test]
fn same_config_gives_identical_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = short_sweep_config(&dir);
    let runs: Vec<(String, String)> = ["a", "b"]
        .iter()
        .map(|name| {
            let out_dir = dir.path().join(name);
            let out = ratecost(&["sweep", "--svg", "--out", out_dir.to_str().unwrap()], &cfg);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            let csv_text = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
            assert_eq!(csv_text, stdout(&out));
            (csv_text, std::fs::read_to_string(out_dir.join("sweep.svg")).unwrap())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);

    // The thread count does not change the result.
    let single = Command::new(env!("CARGO_BIN_EXE_ratecost"))
        .args(["sweep", "--config"])
        .arg(&cfg)
        .env("RATECOST_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(stdout(&single), runs[0].0);

    let (header, rows) = parse_csv(&runs[0].0);
    assert_eq!(header, SIM_COLUMNS);
    assert_eq!(rows.len(), 8);
    let svg = &runs[0].1;
    for needle in [r#"id="axes""#, ">cost b<", ">rate (nats per step)<", r#"id="b-min""#, r#"id="lower""#, r#"id="upper""#] {
        assert!(svg.contains(needle), "missing {needle}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = short_sweep_config(&dir);
    let a = stdout(&ratecost(&["sweep"], &cfg));
    let b = stdout(&ratecost(&["sweep", "--seed", "3"], &cfg));
    let c = stdout(&ratecost(&["sweep", "--seed", "4"], &cfg));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn column_orders_are_stable() {
    let text = [BOUND_COLUMNS.join(","), SIM_COLUMNS.join(","), DECOMPOSE_COLUMNS.join(",")].join("\n") + "\n";
    check_golden("columns.txt", &text);
}

#[test]
fn svg_layout_is_stable() {
    let b_min = b_min_scalar();
    let lower: Vec<(f64, f64)> = (1..=40)
        .map(|i| {
            let b = b_min + 0.25 * i as f64;
            (b, 2f64.ln() + 0.5 * (m_scalar() / (b - b_min)).ln_1p())
        })
        .collect();
    let upper = lower.iter().map(|&(b, y)| (b, y + 0.8)).collect();
    let data = PlotData {
        title: "golden".into(),
        b_min,
        lower,
        upper,
        points: vec![
            PlotPoint { d: 0.5, b: 5.0, nats: 1.9, diverged: false },
            PlotPoint { d: 2.0, b: 7.5, nats: 1.2, diverged: false },
            PlotPoint { d: 64.0, b: f64::INFINITY, nats: 0.0, diverged: true },
        ],
    };
    check_golden("plot.svg", &render(&data));
}

#[test]
fn decompose_reports_references() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!(r#"{{{}, "distortion": 1.0, "horizon": 50000}}"#, plant("gaussian")));
    let out = ratecost(&["decompose"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = parse_csv(&stdout(&out));
    assert_eq!(header, DECOMPOSE_COLUMNS);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "quantized");
    assert_eq!(rows[1][0], "unquantized");
    let ref_c: f64 = rows[0][column(&header, "ref_c")].parse().unwrap();
    assert!((ref_c - b_min_scalar()).abs() < 1e-9);
    let ref_e: f64 = rows[0][column(&header, "ref_e")].parse().unwrap();
    assert_eq!(ref_e, 0.0);
    // With the exact estimate delivered there is no mismatch cost.
    let d_hat: f64 = rows[1][column(&header, "d_hat")].parse().unwrap();
    assert_eq!(d_hat, 0.0);
}

#[test]
fn decompose_rejects_short_window() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!(r#"{{{}, "distortion": 1.0, "horizon": 5000}}"#, plant("gaussian")));
    assert_eq!(ratecost(&["decompose"], &cfg).status.code(), Some(1));
}

#[test]
fn simulate_writes_index_streams() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        &format!(
            r#"{{{}, "distortion": 2.0, "horizon": 20000, "seeds": [1, 2], "output": {{"index_streams": true}}}}"#,
            plant("laplace")
        ),
    );
    let out_dir = dir.path().join("o");
    let out = ratecost(&["simulate", "--out", out_dir.to_str().unwrap()], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, rows) = parse_csv(&stdout(&out));
    assert_eq!(rows.len(), 2);
    for seed in [1, 2] {
        let bytes = std::fs::read(out_dir.join(format!("indices_seed{seed}.bin"))).unwrap();
        let stream = ratecost::quantizer::IndexStream::read_binary(bytes.as_slice()).unwrap();
        assert_eq!(stream.len(), 20000);
    }
}

#[test]
fn validate_prints_solution_and_rejects_bad_plants() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!(r#"{{{}, "b_offsets": [1.0]}}"#, plant("gaussian")));
    let out = ratecost(&["validate"], &cfg);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!((v["b_min"].as_f64().unwrap() - b_min_scalar()).abs() < 1e-9);
    assert!((v["control"]["m"][0][0].as_f64().unwrap() - m_scalar()).abs() < 1e-9);

    // B = 0 leaves the unstable mode uncontrollable.
    let bad = write_config(
        &dir,
        r#"{"plant": {"a": [[2]], "b": [[0]], "q": [[1]], "r": [[1]],
            "noise_v": {"family": "gaussian", "covariance": [[1]]}}, "b_offsets": [1.0]}"#,
    );
    let out = ratecost(&["validate"], &bad);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not controllable"));
}

/// Laplace scalar plant at full horizon: every point dominates the converse
/// and sits within 0.6 nat of it over the central cost range.
#[test]
fn laplace_sweep_tracks_the_converse() {
    let dir = TempDir::new().unwrap();
    let grid: Vec<String> = ratecost::simloop::log_grid(0.3, 30.0, 12).iter().map(|d| d.to_string()).collect();
    let cfg = write_config(
        &dir,
        &format!(r#"{{{}, "d_grid": [{}], "horizon": 1000000, "seeds": [20240601]}}"#, plant("laplace"), grid.join(",")),
    );
    let out = ratecost(&["sweep"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = parse_csv(&stdout(&out));
    let (b, h, l) = (column(&header, "b_hat"), column(&header, "h_hat_nats"), column(&header, "lower_bound_nats"));
    let b_min = b_min_scalar();
    let mut checked = 0;
    for row in &rows {
        let (bh, hh, lb): (f64, f64, f64) = (row[b].parse().unwrap(), row[h].parse().unwrap(), row[l].parse().unwrap());
        assert!(hh >= lb, "{row:?}");
        if bh >= b_min + 0.1 && bh <= b_min + 10.0 {
            assert!(hh - lb <= 0.6, "{row:?}");
            checked += 1;
        }
    }
    assert!(checked >= 8, "only {checked} points in range");
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = ratecost_cli::config::ExperimentConfig::load(&path).unwrap();
            cfg.solve().unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 4);
}
