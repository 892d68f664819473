//! Command-line front end: model simulation, estimation, interval
//! construction, and experiment reproduction with file-based I/O.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric error
//! (singular estimated transition, vanishing characteristic function,
//! unreachable level).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimation::{
    estimate_transition, fit_noise_density, fit_state_density, tabulation_step, DensityEstimate,
};
use crate::harness::{
    figure1_bands, run_table1, run_table2, write_atomic, BandTarget, BenchmarkModel,
    ExperimentConfig, MetricReport,
};
use crate::kernel::{build_fourier_nodes, default_bandwidth, BandwidthPolicy, KernelSpec};
use crate::model::{matrix_to_rows, ObservationSeries, SmoothnessRegime, StateSpaceSpec};
use crate::prediction::{predict_intervals, McBudget};

const DEFAULT_BURN_IN: usize = 1_000;
const DEFAULT_NODES: usize = 10_000;
const DEFAULT_MC_DRAWS: usize = 100_000;
const DEFAULT_LEVEL: f64 = 0.95;
const DEFAULT_EPS_TOL: f64 = 1e-3;
const FULL_REPLICATES: usize = 500;

const USAGE: &str = "\
ssdeconv: estimation and prediction intervals for linear state space models

USAGE:
  ssdeconv simulate   --model ID | --spec FILE  --n N --seed S --out FILE.csv
  ssdeconv estimate   SERIES.csv --model ID | --spec FILE [--h H | --regime R]
                      [--nodes K] [--seed S] [--grid-min A --grid-max B --grid-points P]
                      --out DIR
  ssdeconv intervals  SERIES.csv --model ID | --spec FILE [--h H | --regime R]
                      [--nodes K] [--mc R] [--eps-tol E] [--level L] [--seed S]
                      --out FILE.json
  ssdeconv experiment table1|table2|figure1 --model ID --n N [--replicates M]
                      [--seed S] [--nodes K] [--mc R] [--eps-tol E] [--level L]
                      [--target noise|state|observation] [--full] --out DIR

FLAGS:
  --model ID       builtin benchmark model: O1, S1, O2, S2
  --spec FILE      state space model as JSON {\"d\",\"A\",\"B\",\"eps\",\"eta\"}
  --n N            series length
  --h H            explicit bandwidth
  --regime R       bandwidth regime: ordinary (n^-1/8) or super ((ln n)^-0.1)
  --nodes K        Fourier nodes per density fit (default 10000)
  --mc R           Monte Carlo draws per CDF evaluation (default 100000)
  --eps-tol E      bisection bracket tolerance (default 1e-3)
  --level L        nominal coverage level (default 0.95)
  --seed S         master seed (default 0)
  --replicates M   experiment replicates (default 100)
  --target T       figure1 curve: noise, state, or observation (default noise)
  --full           full-scale experiment configuration (500 replicates)
  --out PATH       output file or directory

Environment: SSDECONV_THREADS caps worker threads.
";

/// Run the CLI on `args` (without the program name); returns the exit code.
pub fn run_cli(args: Vec<String>) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error[usage]: {msg}");
            eprint!("{USAGE}");
            2
        }
        Err(CliError::Lib(e)) => {
            let (class, code) = classify(&e);
            eprintln!("error[{class}]: {e}");
            code
        }
    }
}

enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

fn classify(e: &Error) -> (&'static str, i32) {
    match e {
        Error::VanishingCharFn { .. }
        | Error::NearSingularTransition { .. }
        | Error::LevelUnreachable { .. }
        | Error::SingularErrorCovariance { .. }
        | Error::SingularMatrix(_)
        | Error::DensityUnbounded(_) => ("numeric", 4),
        Error::Data { .. } | Error::Io(_) | Error::Json(_) | Error::SeriesTooShort { .. } => {
            ("data", 3)
        }
        Error::Replicate { source, .. } => classify(source),
        _ => ("usage", 2),
    }
}

struct Args {
    positionals: Vec<String>,
    flags: HashMap<&'static str, String>,
    full: bool,
}

const KNOWN_FLAGS: &[&str] = &[
    "--model",
    "--spec",
    "--n",
    "--h",
    "--regime",
    "--nodes",
    "--mc",
    "--eps-tol",
    "--level",
    "--seed",
    "--replicates",
    "--target",
    "--out",
    "--grid-min",
    "--grid-max",
    "--grid-points",
];

fn parse_args(args: &[String]) -> std::result::Result<Args, CliError> {
    let mut positionals = Vec::new();
    let mut flags = HashMap::new();
    let mut full = false;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        if arg == "--full" {
            full = true;
        } else if let Some(&name) = KNOWN_FLAGS.iter().find(|f| **f == arg.as_str()) {
            let value = it
                .next()
                .ok_or_else(|| CliError::Usage(format!("flag {name} needs a value")))?;
            flags.insert(name, value.clone());
        } else if arg.starts_with("--") {
            return Err(CliError::Usage(format!("unknown flag {arg}")));
        } else {
            positionals.push(arg.clone());
        }
    }
    Ok(Args {
        positionals,
        flags,
        full,
    })
}

impl Args {
    fn flag(&self, name: &str) -> Option<&str> {
        self.flags.get(name).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, name: &'static str) -> std::result::Result<Option<T>, CliError> {
        match self.flag(name) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("cannot parse {name} value '{v}'"))),
        }
    }

    fn required<T: std::str::FromStr>(&self, name: &'static str) -> std::result::Result<T, CliError> {
        self.parsed(name)?
            .ok_or_else(|| CliError::Usage(format!("missing required flag {name}")))
    }

    fn out(&self) -> std::result::Result<PathBuf, CliError> {
        Ok(PathBuf::from(
            self.flag("--out")
                .ok_or_else(|| CliError::Usage("missing required flag --out".into()))?,
        ))
    }
}

enum ModelSource {
    Builtin(BenchmarkModel),
    Custom(StateSpaceSpec),
}

impl ModelSource {
    fn resolve(args: &Args) -> std::result::Result<Self, CliError> {
        match (args.flag("--model"), args.flag("--spec")) {
            (Some(_), Some(_)) => Err(CliError::Usage(
                "--model and --spec are mutually exclusive".into(),
            )),
            (Some(id), None) => Ok(ModelSource::Builtin(BenchmarkModel::parse(id)?)),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path).map_err(Error::from)?;
                let spec: StateSpaceSpec =
                    serde_json::from_str(&text).map_err(|e| Error::Data {
                        line: 0,
                        message: format!("malformed model spec {path}: {e}"),
                    })?;
                Ok(ModelSource::Custom(spec))
            }
            (None, None) => Err(CliError::Usage("need --model or --spec".into())),
        }
    }

    fn spec(&self) -> StateSpaceSpec {
        match self {
            ModelSource::Builtin(m) => m.spec(),
            ModelSource::Custom(s) => s.clone(),
        }
    }

    fn describe(&self) -> String {
        match self {
            ModelSource::Builtin(m) => m.id().to_string(),
            ModelSource::Custom(_) => "custom".to_string(),
        }
    }

    fn bandwidth(&self, args: &Args, n: usize) -> std::result::Result<f64, CliError> {
        if let Some(h) = args.parsed::<f64>("--h")? {
            return Ok(default_bandwidth(n, &BandwidthPolicy::Explicit(h))?);
        }
        let policy = match args.flag("--regime") {
            Some("ordinary") => BandwidthPolicy::Regime(SmoothnessRegime::ordinary()),
            Some("super") => BandwidthPolicy::Regime(SmoothnessRegime::super_smooth()),
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "unknown regime '{other}' (expected ordinary or super)"
                )))
            }
            None => match self {
                ModelSource::Builtin(m) => m.bandwidth_policy(),
                ModelSource::Custom(_) => {
                    return Err(CliError::Usage(
                        "custom specs need --h or --regime".into(),
                    ))
                }
            },
        };
        Ok(default_bandwidth(n, &policy)?)
    }
}

fn dispatch(args: Vec<String>) -> std::result::Result<(), CliError> {
    let Some((sub, rest)) = args.split_first() else {
        return Err(CliError::Usage("missing subcommand".into()));
    };
    let parsed = parse_args(rest)?;
    match sub.as_str() {
        "simulate" => simulate(&parsed),
        "estimate" => estimate(&parsed),
        "intervals" => intervals(&parsed),
        "experiment" => experiment(&parsed),
        other => Err(CliError::Usage(format!("unknown subcommand '{other}'"))),
    }
}

// ---------------------------------------------------------------------------
// Series CSV
// ---------------------------------------------------------------------------

/// Read an observation series from CSV: optional leading '#' comment lines,
/// a header y1..yd, then one float row per observation.
pub fn read_series(path: &Path) -> Result<ObservationSeries> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim = 0usize;
    let mut saw_header = false;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            let fields: Vec<&str> = line.split(',').collect();
            let ok = !fields.is_empty()
                && fields
                    .iter()
                    .enumerate()
                    .all(|(i, f)| *f == format!("y{}", i + 1));
            if !ok {
                return Err(Error::Data {
                    line: lineno,
                    message: format!("expected header y1..yd, got '{line}'"),
                });
            }
            dim = fields.len();
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim {
            return Err(Error::Data {
                line: lineno,
                message: format!("expected {dim} columns, got {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for f in fields {
            row.push(f.trim().parse::<f64>().map_err(|_| Error::Data {
                line: lineno,
                message: format!("non-numeric cell '{f}'"),
            })?);
        }
        rows.push(row);
    }
    if !saw_header {
        return Err(Error::Data {
            line: 0,
            message: "empty series file".into(),
        });
    }
    if rows.len() < 3 {
        return Err(Error::SeriesTooShort {
            n: rows.len(),
            min: 3,
        });
    }
    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
    ObservationSeries::new(DMatrix::from_row_slice(rows.len(), dim, &flat))
}

/// Serialize a series as CSV with a configuration comment header;
/// 17 significant digits for lossless round-trips.
pub fn series_to_csv(series: &ObservationSeries, comment: &str) -> String {
    let d = series.dim();
    let mut out = String::new();
    if !comment.is_empty() {
        out.push_str("# ");
        out.push_str(comment);
        out.push('\n');
    }
    let header: Vec<String> = (1..=d).map(|i| format!("y{i}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..series.len() {
        let row: Vec<String> = (0..d)
            .map(|j| format!("{:.16e}", series.matrix()[(i, j)]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn simulate(args: &Args) -> std::result::Result<(), CliError> {
    let source = ModelSource::resolve(args)?;
    let n: usize = args.required("--n")?;
    let seed: u64 = args.parsed("--seed")?.unwrap_or(0);
    let out = args.out()?;
    let spec = source.spec();
    let sim = crate::harness::generate_series(&spec, n, seed, DEFAULT_BURN_IN)?;
    let comment = format!(
        "ssdeconv simulate model={} n={n} seed={seed} burn_in={DEFAULT_BURN_IN} d={}",
        source.describe(),
        spec.dim()
    );
    write_atomic(&out, &series_to_csv(&sim.observations, &comment))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn estimate(args: &Args) -> std::result::Result<(), CliError> {
    let input = args
        .positionals
        .first()
        .ok_or_else(|| CliError::Usage("estimate needs an input series file".into()))?;
    let source = ModelSource::resolve(args)?;
    let series = read_series(Path::new(input))?;
    let spec = source.spec();
    if spec.dim() != series.dim() {
        return Err(CliError::Lib(Error::InvalidParameter(format!(
            "series dimension {} does not match model dimension {}",
            series.dim(),
            spec.dim()
        ))));
    }
    let n = series.len();
    let h = source.bandwidth(args, n)?;
    let nodes_count: usize = args.parsed("--nodes")?.unwrap_or(DEFAULT_NODES);
    let seed: u64 = args.parsed("--seed")?.unwrap_or(0);
    let out_dir = args.out()?;
    let grid_min: f64 = args.parsed("--grid-min")?.unwrap_or(-4.0);
    let grid_max: f64 = args.parsed("--grid-max")?.unwrap_or(4.0);
    let grid_points: usize = args.parsed("--grid-points")?.unwrap_or(161);
    if grid_points < 2 || !(grid_max > grid_min) {
        return Err(CliError::Usage("need grid-max > grid-min and grid-points >= 2".into()));
    }

    let b = spec.measurement();
    let eta = spec.measurement_noise();
    let kernel = KernelSpec::default();
    let a_hat = estimate_transition(&series, b)?;
    let nodes = build_fourier_nodes(h, kernel.support_radius(), nodes_count, series.dim(), seed)?;
    let state_est = fit_state_density(&series, b, eta, &kernel, &nodes)?;
    let noise_est = fit_noise_density(&series, b, &a_hat, eta, &kernel, &nodes)?;

    let config = format!(
        "ssdeconv estimate model={} n={n} h={h:.17} a={} nodes={nodes_count} seed={seed}",
        source.describe(),
        kernel.support_radius()
    );
    let transition = serde_json::json!({
        "a_hat": matrix_to_rows(&a_hat),
        "n": n,
        "h": h,
        "support_radius": kernel.support_radius(),
        "nodes": nodes_count,
        "seed": seed,
        "model": source.describe(),
    });
    let transition_path = out_dir.join("transition.json");
    write_atomic(
        &transition_path,
        &serde_json::to_string_pretty(&transition).map_err(Error::from)?,
    )?;
    println!("wrote {}", transition_path.display());

    for (name, est) in [("state_density.csv", &state_est), ("noise_density.csv", &noise_est)] {
        let path = out_dir.join(name);
        write_atomic(&path, &density_grid_csv(est, grid_min, grid_max, grid_points, &config))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Exact density evaluations over a lattice, as CSV columns x1..xd,value.
fn density_grid_csv(
    est: &DensityEstimate,
    lo: f64,
    hi: f64,
    points: usize,
    comment: &str,
) -> String {
    let d = est.nodes().dim();
    let step = (hi - lo) / (points - 1) as f64;
    let mut out = format!("# {comment}\n");
    let cols: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    out.push_str(&cols.join(","));
    out.push_str(",value\n");
    let mut index = vec![0usize; d];
    loop {
        let point: Vec<f64> = index.iter().map(|&i| lo + i as f64 * step).collect();
        let val = est.eval(&point);
        let coords: Vec<String> = point.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&format!("{},{:.16e}\n", coords.join(","), val));
        // Odometer increment over the lattice.
        let mut k = d;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            index[k] += 1;
            if index[k] < points {
                break;
            }
            index[k] = 0;
        }
    }
}

fn intervals(args: &Args) -> std::result::Result<(), CliError> {
    let input = args
        .positionals
        .first()
        .ok_or_else(|| CliError::Usage("intervals needs an input series file".into()))?;
    let source = ModelSource::resolve(args)?;
    let series = read_series(Path::new(input))?;
    let spec = source.spec();
    let n = series.len();
    let h = source.bandwidth(args, n)?;
    let nodes_count: usize = args.parsed("--nodes")?.unwrap_or(DEFAULT_NODES);
    let mc: usize = args.parsed("--mc")?.unwrap_or(DEFAULT_MC_DRAWS);
    let eps_tol: f64 = args.parsed("--eps-tol")?.unwrap_or(DEFAULT_EPS_TOL);
    let level: f64 = args.parsed("--level")?.unwrap_or(DEFAULT_LEVEL);
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::Usage("level must lie in (0, 1)".into()));
    }
    let seed: u64 = args.parsed("--seed")?.unwrap_or(0);
    let out = args.out()?;

    let b = spec.measurement();
    let eta = spec.measurement_noise();
    let kernel = KernelSpec::default();
    let a_hat = estimate_transition(&series, b)?;
    let nodes = build_fourier_nodes(h, kernel.support_radius(), nodes_count, series.dim(), seed)?;
    let noise_est = fit_noise_density(&series, b, &a_hat, eta, &kernel, &nodes)?;
    let budget = McBudget {
        draws: mc,
        tol: eps_tol,
        max_doublings: 60,
        seed: crate::rng::derive(seed, 1),
    };
    let reports = if series.dim() == 1 {
        let range = crate::harness::search_range(&spec);
        let step = tabulation_step(nodes.half_width());
        let tab = noise_est.tabulate(&[-range], &[range], step)?;
        predict_intervals(&series, b, eta, &tab, &a_hat, level, &budget)?
    } else {
        predict_intervals(&series, b, eta, &noise_est, &a_hat, level, &budget)?
    };
    let payload = serde_json::json!({
        "config": {
            "model": source.describe(),
            "n": n,
            "h": h,
            "nodes": nodes_count,
            "mc_draws": mc,
            "eps_tol": eps_tol,
            "level": level,
            "seed": seed,
        },
        "intervals": reports.to_vec(),
    });
    write_atomic(&out, &serde_json::to_string_pretty(&payload).map_err(Error::from)?)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn experiment(args: &Args) -> std::result::Result<(), CliError> {
    let table = args
        .positionals
        .first()
        .ok_or_else(|| CliError::Usage("experiment needs table1, table2, or figure1".into()))?
        .as_str();
    let model = match args.flag("--model") {
        Some(id) => BenchmarkModel::parse(id)?,
        None => return Err(CliError::Usage("experiment needs --model".into())),
    };
    let n: usize = args.required("--n")?;
    let replicates: usize = args
        .parsed("--replicates")?
        .unwrap_or(if args.full { FULL_REPLICATES } else { 100 });
    let seed: u64 = args.parsed("--seed")?.unwrap_or(0);
    let out_dir = args.out()?;
    let mut config = ExperimentConfig::new(model, n, replicates, seed);
    config.out_dir = Some(out_dir.clone());
    if let Some(nodes) = args.parsed("--nodes")? {
        config.node_count = nodes;
    }
    if let Some(mc) = args.parsed("--mc")? {
        config.mc_draws = mc;
    }
    if let Some(tol) = args.parsed("--eps-tol")? {
        config.bracket_tol = tol;
    }
    if let Some(level) = args.parsed("--level")? {
        config.level = level;
    }

    match table {
        "table1" => {
            let report = run_table1(&config)?;
            let base = format!("table1_{}_{}", model.id(), n);
            let report = MetricReport::Estimation(report);
            write_report(&out_dir, &base, &report)?;
        }
        "table2" => {
            let report = run_table2(&config)?;
            let base = format!("table2_{}_{}", model.id(), n);
            let report = MetricReport::Coverage(report);
            write_report(&out_dir, &base, &report)?;
        }
        "figure1" => {
            let target = match args.flag("--target") {
                Some(t) => BandTarget::parse(t)?,
                None => BandTarget::Noise,
            };
            let grid: Vec<f64> = (0..161).map(|i| -4.0 + 0.05 * i as f64).collect();
            let band = figure1_bands(&config, target, &grid)?;
            let name = match target {
                BandTarget::Noise => "noise",
                BandTarget::StateRoot => "state",
                BandTarget::ObsRoot => "observation",
            };
            let path = out_dir.join(format!("figure1_{}_{}_{}.csv", model.id(), n, name));
            write_atomic(&path, &band.to_csv())?;
            println!("wrote {}", path.display());
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown experiment '{other}' (expected table1, table2, or figure1)"
            )))
        }
    }
    Ok(())
}

fn write_report(dir: &Path, base: &str, report: &MetricReport) -> Result<()> {
    let csv_path = dir.join(format!("{base}.csv"));
    write_atomic(&csv_path, &report.to_csv())?;
    println!("wrote {}", csv_path.display());
    let json_path = dir.join(format!("{base}.json"));
    write_atomic(&json_path, &report.to_json())?;
    println!("wrote {}", json_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_round_trip_preserves_floats() {
        let data = DMatrix::from_row_slice(
            3,
            2,
            &[
                0.1234567890123456,
                -1.0 / 3.0,
                std::f64::consts::PI,
                1e-308,
                -2.5e17,
                0.0,
            ],
        );
        let series = ObservationSeries::new(data).unwrap();
        let csv = series_to_csv(&series, "test");
        let dir = std::env::temp_dir().join(format!("ssdeconv_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        std::fs::write(&path, &csv).unwrap();
        let back = read_series(&path).unwrap();
        assert_eq!(back.matrix(), series.matrix());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn read_series_reports_line_numbers() {
        let dir = std::env::temp_dir().join(format!("ssdeconv_test_rl_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ragged.csv");
        std::fs::write(&path, "# comment\ny1,y2\n1.0,2.0\n3.0\n5.0,6.0\n").unwrap();
        match read_series(&path) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected data error, got {other:?}"),
        }
        let path = dir.join("bad_cell.csv");
        std::fs::write(&path, "y1\n1.0\nxyz\n2.0\n").unwrap();
        match read_series(&path) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected data error, got {other:?}"),
        }
        let path = dir.join("short.csv");
        std::fs::write(&path, "y1\n1.0\n2.0\n").unwrap();
        assert!(matches!(read_series(&path), Err(Error::SeriesTooShort { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_flags_and_subcommands_are_usage_errors() {
        assert_eq!(run_cli(vec!["bogus".into()]), 2);
        assert_eq!(
            run_cli(vec!["simulate".into(), "--bogus".into(), "1".into()]),
            2
        );
        assert_eq!(run_cli(vec![]), 2);
    }
}
