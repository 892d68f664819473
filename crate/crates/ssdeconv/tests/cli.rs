//! Command-line plumbing: file formats, determinism, configuration echo,
//! and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

use ssdeconv::cli::run_cli;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ssdeconv_cli_{}_{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> i32 {
    run_cli(args.iter().map(|s| s.to_string()).collect())
}

#[test]
fn simulate_is_deterministic_and_echoes_config() {
    let dir = scratch("sim");
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    for out in [&a, &b] {
        let code = run(&[
            "simulate",
            "--model",
            "S1",
            "--n",
            "50",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    let text_a = std::fs::read(&a).unwrap();
    let text_b = std::fs::read(&b).unwrap();
    assert_eq!(text_a, text_b, "same seed must give byte-identical output");
    let text = String::from_utf8(text_a).unwrap();
    assert!(text.starts_with("# ssdeconv simulate model=S1 n=50 seed=7"));
    assert_eq!(text.lines().nth(1).unwrap(), "y1");
    assert_eq!(text.lines().count(), 52);
    std::fs::remove_dir_all(&dir).ok();
}

/// Noiseless autoregressive data: the estimated transition matrix written
/// by the estimate subcommand equals the generator to ten decimal places.
#[test]
fn estimate_recovers_noiseless_transition() {
    let dir = scratch("est");
    let series_path = dir.join("noiseless.csv");
    let mut csv = String::from("y1\n");
    let mut x = 1.3_f64;
    for _ in 0..40 {
        x *= 0.8;
        csv.push_str(&format!("{x:.16e}\n"));
    }
    std::fs::write(&series_path, csv).unwrap();
    let spec_path = dir.join("model.json");
    std::fs::write(
        &spec_path,
        r#"{"d":1,"A":[[0.5]],"B":[[1.0]],
           "eps":{"type":"GaussianIID","d":1,"sigma":1.0},
           "eta":{"type":"GaussianIID","d":1,"sigma":1.0}}"#,
    )
    .unwrap();
    let code = run(&[
        "estimate",
        series_path.to_str().unwrap(),
        "--spec",
        spec_path.to_str().unwrap(),
        "--regime",
        "super",
        "--nodes",
        "500",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let transition: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("transition.json")).unwrap())
            .unwrap();
    let a_hat = transition["a_hat"][0][0].as_f64().unwrap();
    assert!((a_hat - 0.8).abs() < 1e-10, "a_hat = {a_hat}");
    for name in ["state_density.csv", "noise_density.csv"] {
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        assert!(text.starts_with("# ssdeconv estimate"));
        assert!(text.contains("x1,value"));
        assert_eq!(text.lines().count(), 163); // comment + header + 161 points
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn intervals_emit_the_documented_json() {
    let dir = scratch("int");
    let series_path = dir.join("series.csv");
    let sim = run(&[
        "simulate",
        "--model",
        "S1",
        "--n",
        "120",
        "--seed",
        "3",
        "--out",
        series_path.to_str().unwrap(),
    ]);
    assert_eq!(sim, 0);
    let out = dir.join("intervals.json");
    let code = run(&[
        "intervals",
        series_path.to_str().unwrap(),
        "--model",
        "S1",
        "--nodes",
        "2000",
        "--mc",
        "5000",
        "--level",
        "0.9",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let payload: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(payload["config"]["level"], 0.9);
    assert!(payload["config"]["h"].as_f64().unwrap() > 0.0);
    let intervals = payload["intervals"].as_array().unwrap();
    assert_eq!(intervals.len(), 3);
    let kinds: Vec<&str> = intervals
        .iter()
        .map(|i| i["kind"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, ["filter", "state", "observation"]);
    for interval in intervals {
        assert!(interval["radius"].as_f64().unwrap() > 0.0);
        assert!(interval["center"].is_array());
        assert!(interval["evaluations"].as_u64().unwrap() > 0);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn experiment_writes_reports_deterministically() {
    let dir = scratch("exp");
    let args = [
        "experiment",
        "table2",
        "--model",
        "S1",
        "--n",
        "80",
        "--replicates",
        "3",
        "--seed",
        "2",
        "--nodes",
        "400",
        "--mc",
        "2000",
        "--out",
    ];
    let mut with_out = args.to_vec();
    let out_str = dir.to_str().unwrap();
    with_out.push(out_str);
    assert_eq!(run(&with_out), 0);
    let csv_path = dir.join("table2_S1_80.csv");
    let first = std::fs::read_to_string(&csv_path).unwrap();
    assert!(first.starts_with("# ssdeconv table2 model=S1 n=80 replicates=3 master_seed=2"));
    assert!(first.contains("config_hash="));
    assert!(first.lines().nth(1).unwrap().starts_with("model,n,method,cov_f"));
    assert_eq!(run(&with_out), 0);
    let second = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(first, second, "reports must replay byte-identically");
    assert!(dir.join("table2_S1_80.json").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn figure1_experiment_writes_band_csv() {
    let dir = scratch("fig");
    let code = run(&[
        "experiment",
        "figure1",
        "--model",
        "S1",
        "--n",
        "80",
        "--replicates",
        "3",
        "--seed",
        "2",
        "--nodes",
        "400",
        "--target",
        "noise",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(dir.join("figure1_S1_80_noise.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("grid,truth,mean,q05,q95"));
    assert_eq!(text.lines().count(), 163);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn exit_codes_classify_failures() {
    let dir = scratch("codes");
    // Usage: unknown flag.
    assert_eq!(run(&["simulate", "--frobnicate", "1"]), 2);
    // Usage: missing model source.
    assert_eq!(run(&["simulate", "--n", "10", "--out", "x.csv"]), 2);
    // Data: ragged CSV.
    let ragged = dir.join("ragged.csv");
    std::fs::write(&ragged, "y1,y2\n1.0,2.0\n3.0\n4.0,5.0\n").unwrap();
    let code = run(&[
        "estimate",
        ragged.to_str().unwrap(),
        "--model",
        "S1",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
    // Data: missing input file.
    let code = run(&[
        "intervals",
        dir.join("nope.csv").to_str().unwrap(),
        "--model",
        "S1",
        "--out",
        dir.join("o.json").to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
    std::fs::remove_dir_all(&dir).ok();
}

/// Numeric failures exit with code 4; exercised end to end through the
/// real binary. A measurement noise with a huge scale drives its
/// characteristic function below the floor on the integration cube.
#[test]
fn numeric_failures_exit_4_through_binary() {
    let dir = scratch("bin");
    let series = dir.join("series.csv");
    assert_eq!(
        run(&[
            "simulate", "--model", "S1", "--n", "60", "--seed", "1", "--out",
            series.to_str().unwrap(),
        ]),
        0
    );
    let spec_path = dir.join("wide_noise.json");
    std::fs::write(
        &spec_path,
        r#"{"d":1,"A":[[0.8]],"B":[[1.0]],
           "eps":{"type":"GaussianIID","d":1,"sigma":1.0},
           "eta":{"type":"GaussianIID","d":1,"sigma":10.0}}"#,
    )
    .unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_ssdeconv"))
        .args([
            "estimate",
            series.to_str().unwrap(),
            "--spec",
            spec_path.to_str().unwrap(),
            "--h",
            "0.5",
            "--nodes",
            "200",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.starts_with("error[numeric]:"),
        "stderr was: {stderr}"
    );
    assert_eq!(stderr.lines().count(), 1, "one machine-parseable line");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn series_round_trip_through_files_is_lossless() {
    let dir = scratch("rt");
    let first = dir.join("one.csv");
    assert_eq!(
        run(&[
            "simulate", "--model", "O1", "--n", "25", "--seed", "9", "--out",
            first.to_str().unwrap(),
        ]),
        0
    );
    let series = ssdeconv::cli::read_series(Path::new(&first)).unwrap();
    let rewritten = ssdeconv::cli::series_to_csv(&series, "rewrite");
    let reparsed_path = dir.join("two.csv");
    std::fs::write(&reparsed_path, rewritten).unwrap();
    let back = ssdeconv::cli::read_series(&reparsed_path).unwrap();
    assert_eq!(series.matrix(), back.matrix());
    std::fs::remove_dir_all(&dir).ok();
}
