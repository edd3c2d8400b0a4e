//! Batch pipeline driver: simulate synthetic order flow, validate inputs,
//! fit models, rank them by information criteria, run rolling backtests,
//! and aggregate outputs into a report.
//!
//! Configuration precedence is flags > config file > defaults; the
//! resolved configuration is echoed into each run's `manifest.json`
//! together with its SHA-256 hash and the tool version, so identical
//! inputs rerun byte-identically. Exit codes: 0 success, 2 input error,
//! 3 estimation failure, 4 invalid comparison.

use clap::{Parser, Subcommand};
use ratioflow_core::backtest::{
    recalibration_study, run_backtest_raw, BacktestOptions, CalibrationSchedule,
};
use ratioflow_core::covariates::{
    build_dataset_aligned, catalog_model, collect_raw, model_catalog, selection_warmup,
    window_spread_mean, ModelSpec, RawSample,
};
use ratioflow_core::estimator::{fit_qmle, Dataset, FitOptions, FitResult};
use ratioflow_core::io::{self, FitReport};
use ratioflow_core::selection::{criteria, rank_models, selection_counts, Criterion, SelectionError};
use ratioflow_core::sim;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ratioflow", version, about = "Bid/ask market-order flow modeling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event stream with a ground-truth sidecar.
    Simulate {
        /// Simulation config (TOML or JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse and replay an event file, reporting stream statistics.
    IngestCheck {
        /// Canonical event file (CSV/NDJSON, optionally .gz).
        input: PathBuf,
    },
    /// Fit models over the full input and write one fit report each.
    Fit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        instrument: Option<String>,
        /// Comma-separated model names, "catalog", or a ModelSpec JSON path.
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Fit, compute information criteria, and rank models.
    Select {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        instrument: Option<String>,
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Rolling calibrate-then-predict accuracy study.
    Backtest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        instrument: Option<String>,
        #[arg(long)]
        models: Option<String>,
        /// Comma-separated lookbacks (sessions), e.g. "1,2,3,5".
        #[arg(long)]
        lookback: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        /// Verify every audited prediction against a truncated replay.
        #[arg(long)]
        audit: bool,
    },
    /// Aggregate fit/selection/accuracy outputs in a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    /// Exit 2: unreadable, unparsable, or insufficient input.
    Input(String),
    /// Exit 3: one or more estimation failures (listed).
    Estimation(Vec<String>),
    /// Exit 4: a comparison the criteria do not license.
    Comparison(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Estimation(_) => 3,
            CliError::Comparison(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Estimation(list) => {
                writeln!(f, "estimation failures:")?;
                for item in list {
                    writeln!(f, "  {item}")?;
                }
                Ok(())
            }
            CliError::Comparison(m) => write!(f, "invalid comparison: {m}"),
        }
    }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

/// File-backed run configuration; every field can be overridden by a flag.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    input: Option<PathBuf>,
    instrument: Option<String>,
    models: Option<String>,
    lookback: Option<String>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
    audit: Option<bool>,
    /// Informational metadata echoed into the manifest: the canonical
    /// input already encodes sessions and integer prices.
    tick_size: Option<f64>,
    session_open: Option<String>,
    session_close: Option<String>,
    timezone: Option<String>,
    estimator: Option<EstimatorConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EstimatorConfig {
    tolerance: Option<f64>,
    max_iter: Option<usize>,
    box_radius: Option<f64>,
    ridge: Option<f64>,
}

impl EstimatorConfig {
    fn fit_options(&self) -> FitOptions {
        let mut opts = FitOptions::default();
        if let Some(t) = self.tolerance {
            opts.tolerance = t;
        }
        if let Some(m) = self.max_iter {
            opts.max_iter = m;
        }
        if let Some(r) = self.box_radius {
            opts.box_radius = r;
        }
        opts.ridge = self.ridge;
        opts
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
            }
        }
    }
}

/// Flag-resolved settings common to fit/select/backtest.
struct Resolved {
    input: PathBuf,
    instrument: String,
    models: Vec<ModelSpec>,
    models_arg: String,
    lookbacks: Vec<usize>,
    out: PathBuf,
    audit: bool,
    fit_options: FitOptions,
    config: RunConfig,
}

fn resolve(
    config: Option<PathBuf>,
    input: Option<PathBuf>,
    instrument: Option<String>,
    models: Option<String>,
    lookback: Option<String>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
    audit: bool,
) -> Result<Resolved, CliError> {
    let file = RunConfig::load(config.as_deref())?;
    let input = input
        .or_else(|| file.input.clone())
        .ok_or_else(|| CliError::Input("no input file given (flag --input or config `input`)".into()))?;
    let instrument = instrument.or_else(|| file.instrument.clone()).unwrap_or_else(|| {
        input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".into())
    });
    let models_arg = models
        .or_else(|| file.models.clone())
        .ok_or_else(|| CliError::Input("no models given (flag --models or config `models`)".into()))?;
    let models = resolve_models(&models_arg)?;
    let lookbacks = parse_lookbacks(lookback.or_else(|| file.lookback.clone()).as_deref())?;
    let out = out
        .or_else(|| file.out.clone())
        .ok_or_else(|| CliError::Input("no output directory given (flag --out or config `out`)".into()))?;
    let audit = audit || file.audit.unwrap_or(false);
    if let Some(j) = jobs.or(file.jobs) {
        // Best effort: the global pool can only be sized once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let fit_options = file.estimator.clone().unwrap_or_default().fit_options();
    Ok(Resolved {
        input,
        instrument,
        models,
        models_arg,
        lookbacks,
        out,
        audit,
        fit_options,
        config: file,
    })
}

/// "catalog", a comma-separated list of catalog names, or a path to a
/// ModelSpec JSON file (single object or array).
fn resolve_models(arg: &str) -> Result<Vec<ModelSpec>, CliError> {
    if arg == "catalog" {
        return Ok(model_catalog());
    }
    if arg.ends_with(".json") {
        return Ok(io::read_model_specs(arg)?);
    }
    let mut out = Vec::new();
    for name in arg.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let spec = catalog_model(name)
            .ok_or_else(|| CliError::Input(format!("unknown model {name:?}: not in the catalog")))?;
        out.push(spec);
    }
    if out.is_empty() {
        return Err(CliError::Input("empty model list".into()));
    }
    Ok(out)
}

fn parse_lookbacks(arg: Option<&str>) -> Result<Vec<usize>, CliError> {
    let Some(arg) = arg else { return Ok(vec![1]) };
    let mut out = Vec::new();
    for part in arg.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let l: usize = part
            .parse()
            .map_err(|_| CliError::Input(format!("bad lookback {part:?}")))?;
        if l == 0 {
            return Err(CliError::Input("lookback must be >= 1".into()));
        }
        out.push(l);
    }
    if out.is_empty() {
        return Err(CliError::Input("empty lookback list".into()));
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Run provenance written next to every command's outputs.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    resolved_config: serde_json::Value,
    outputs: Vec<String>,
}

/// The run's config hash: SHA-256 over the canonical JSON encoding of the
/// fully resolved configuration.
fn resolved_hash(resolved: &serde_json::Value) -> Result<String, CliError> {
    let config_json = serde_json::to_vec(resolved).map_err(|e| CliError::Input(e.to_string()))?;
    Ok(sha256_hex(&config_json))
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    resolved: serde_json::Value,
    outputs: &[String],
) -> Result<String, CliError> {
    let config_hash = resolved_hash(&resolved)?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: config_hash.clone(),
        resolved_config: resolved,
        outputs: outputs.to_vec(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Input(e.to_string()))?;
    fs::write(out_dir.join("manifest.json"), text + "\n")?;
    Ok(config_hash)
}

fn load_raw(input: &Path) -> Result<(Vec<RawSample>, usize), CliError> {
    let events = io::read_events(input)?;
    if events.is_empty() {
        return Err(CliError::Input(format!("{}: no events", input.display())));
    }
    let raw = collect_raw(events).map_err(|e| CliError::Input(format!("{}: {e}", input.display())))?;
    if raw.is_empty() {
        return Err(CliError::Input(format!("{}: no market orders", input.display())));
    }
    let mut sessions = 1usize;
    for pair in raw.windows(2) {
        sessions += (pair[1].session_id != pair[0].session_id) as usize;
    }
    Ok((raw, sessions))
}

fn cmd_simulate(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut config = io::read_sim_config(config_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config
        .validate()
        .map_err(|e| CliError::Input(e.to_string()))?;
    let sessions = sim::simulate(&config).map_err(|e| CliError::Input(e.to_string()))?;
    fs::create_dir_all(out)?;
    let events = sim::concat_events(&sessions);
    let truth = sim::concat_truth(&sessions);
    io::write_events(out.join("events.csv"), &events)?;
    io::write_ground_truth(out.join("truth.ndjson"), &truth)?;
    let replayable = matches!(
        config.covariate_dynamics,
        sim::CovariateDynamics::BookDriven { .. }
    );
    let resolved = serde_json::json!({
        "seed": config.seed,
        "sim_config": config,
        "replayable_stream": replayable,
        "events": events.len(),
        "market_orders": truth.len(),
    });
    write_manifest(out, "simulate", resolved, &["events.csv".into(), "truth.ndjson".into()])?;
    println!(
        "wrote {} events, {} market orders across {} sessions to {}",
        events.len(),
        truth.len(),
        config.sessions,
        out.display()
    );
    Ok(())
}

fn cmd_ingest_check(input: &Path) -> Result<(), CliError> {
    let events = io::read_events(input)?;
    let stats = ratioflow_core::book::replay(events, |_, _| {})
        .map_err(|e| CliError::Input(format!("{}: {e}", input.display())))?;
    println!(
        "{}: ok ({} events, {} market orders, {} sessions)",
        input.display(),
        stats.events,
        stats.market_orders,
        stats.sessions
    );
    Ok(())
}

/// Fit every model over the full input window, in parallel, preserving
/// input order in the outputs. `warmup` drops that many market orders at
/// each session start for every model; pass 0 for standalone fits and the
/// family's common warmup when criterion values will be compared.
fn fit_all(
    raw: &[RawSample],
    sessions: usize,
    models: &[ModelSpec],
    options: &FitOptions,
    warmup: usize,
) -> Vec<(String, Result<FitResult, String>)> {
    use rayon::prelude::*;
    let mean = window_spread_mean(raw);
    models
        .par_iter()
        .map(|spec| {
            let built = build_dataset_aligned(spec, raw, mean, warmup);
            let result = Dataset::from_samples(&built.samples, sessions)
                .and_then(|ds| fit_qmle(&ds, options))
                .map_err(|e| e.to_string());
            (spec.name.clone(), result)
        })
        .collect()
}

/// Fit report plus run provenance; extra fields are ignored by readers of
/// the base schema.
#[derive(Serialize)]
struct FitReportFile<'a> {
    #[serde(flatten)]
    report: &'a FitReport,
    config_hash: &'a str,
    version: &'a str,
}

fn cmd_fit(r: &Resolved) -> Result<(), CliError> {
    let (raw, sessions) = load_raw(&r.input)?;
    let fits = fit_all(&raw, sessions, &r.models, &r.fit_options, 0);

    fs::create_dir_all(&r.out)?;
    let resolved = serde_json::json!({
        "input": r.input,
        "instrument": r.instrument,
        "models": r.models_arg,
        "sessions": sessions,
        "config": r.config,
    });
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (name, result) in &fits {
        match result {
            Ok(fit) => {
                if !fit.converged {
                    failures.push(format!("{name}: did not converge"));
                }
                reports.push((name.clone(), FitReport::new(name, fit)));
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    for (name, _) in &reports {
        outputs.push(format!("{}.{}.fit.json", r.instrument, name));
    }
    let config_hash = write_manifest(&r.out, "fit", resolved, &outputs)?;
    for (name, report) in &reports {
        let path = r.out.join(format!("{}.{}.fit.json", r.instrument, name));
        let file = FitReportFile {
            report,
            config_hash: &config_hash,
            version: env!("CARGO_PKG_VERSION"),
        };
        let text =
            serde_json::to_string_pretty(&file).map_err(|e| CliError::Input(e.to_string()))?;
        fs::write(path, text + "\n")?;
    }
    println!(
        "fitted {}/{} models over {} sessions ({} market orders)",
        reports.len(),
        r.models.len(),
        sessions,
        raw.len()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Estimation(failures))
    }
}

fn cmd_select(r: &Resolved) -> Result<(), CliError> {
    // Models recalibrated on longer windows have a different effective
    // session count; their criterion values are not comparable here.
    for spec in &r.models {
        if spec.recalibration_days > 1 {
            return Err(CliError::Comparison(format!(
                "model {} recalibrates every {} days; criterion values are only comparable at equal effective sample sizes",
                spec.name, spec.recalibration_days
            )));
        }
    }
    let (raw, sessions) = load_raw(&r.input)?;
    // Criterion values only compare when every candidate's likelihood is
    // summed over one common sample: condition all fits on the family's
    // deepest per-session warmup, as in autoregressive order selection.
    let fits = fit_all(&raw, sessions, &r.models, &r.fit_options, selection_warmup(&r.models));

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (name, result) in &fits {
        match result {
            Ok(fit) => reports.push(criteria(name, fit)),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    if reports.is_empty() {
        return Err(CliError::Estimation(failures));
    }

    let mut ranked_by = BTreeMap::new();
    for criterion in Criterion::ALL {
        match rank_models(&reports, criterion) {
            Ok(ranked) => {
                ranked_by.insert(
                    criterion.name().to_string(),
                    ranked.iter().map(|r| r.model.clone()).collect::<Vec<_>>(),
                );
            }
            Err(SelectionError::MixedT(ts)) => {
                return Err(CliError::Comparison(format!(
                    "criterion values span different session counts {ts:?}"
                )))
            }
            Err(SelectionError::NothingToRank) => {
                return Err(CliError::Estimation(vec![
                    "no converged fits to rank".into(),
                ]))
            }
        }
    }
    let counts = selection_counts(std::slice::from_ref(&reports)).map_err(|e| match e {
        SelectionError::MixedT(ts) => CliError::Comparison(format!(
            "criterion values span different session counts {ts:?}"
        )),
        SelectionError::NothingToRank => {
            CliError::Estimation(vec!["no converged fits to rank".into()])
        }
    })?;

    fs::create_dir_all(&r.out)?;
    let rows: Vec<(String, _)> = reports
        .iter()
        .map(|rep| (r.instrument.clone(), rep.clone()))
        .collect();
    io::write_selection_csv(r.out.join("selection.csv"), &rows)?;
    let resolved = serde_json::json!({
        "input": r.input,
        "instrument": r.instrument,
        "models": r.models_arg,
        "sessions": sessions,
        "config": r.config,
    });
    let config_hash = resolved_hash(&resolved)?;
    let summary = serde_json::json!({
        "instruments": counts.instruments,
        "counts": counts.per_criterion,
        "ranked": ranked_by,
        "config_hash": config_hash,
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(
        r.out.join("selection_counts.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Input(e.to_string()))? + "\n",
    )?;
    write_manifest(
        &r.out,
        "select",
        resolved,
        &["selection.csv".into(), "selection_counts.json".into()],
    )?;
    for (criterion, ranked) in &ranked_by {
        if let Some(best) = ranked.first() {
            println!("{criterion}: {best}");
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Estimation(failures))
    }
}

fn cmd_backtest(r: &Resolved) -> Result<(), CliError> {
    use rayon::prelude::*;
    let (raw, sessions) = load_raw(&r.input)?;
    let need = r.lookbacks.iter().copied().max().unwrap_or(1) + 1;
    if sessions < need {
        return Err(CliError::Input(format!(
            "need at least {need} sessions for the requested lookbacks, input has {sessions}"
        )));
    }
    let options = BacktestOptions {
        fit: r.fit_options.clone(),
        audit: r.audit,
    };

    let tasks: Vec<&ModelSpec> = r.models.iter().collect();
    let results: Vec<_> = tasks
        .par_iter()
        .map(|spec| {
            if r.lookbacks.len() == 1 {
                let schedule = CalibrationSchedule::with_lookback(r.lookbacks[0]);
                vec![(
                    r.lookbacks[0],
                    run_backtest_raw(&raw, &r.instrument, spec, &schedule, &options)
                        .map_err(|e| e.to_string()),
                )]
            } else {
                recalibration_study(&raw, &r.instrument, spec, &r.lookbacks, &options)
                    .into_iter()
                    .map(|row| (row.lookback, row.result.map_err(|e| e.to_string())))
                    .collect()
            }
        })
        .collect();

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut prediction_files = Vec::new();
    fs::create_dir_all(&r.out)?;
    for (spec, rows) in tasks.iter().zip(results) {
        for (l, result) in rows {
            match result {
                Ok(report) => {
                    if r.audit {
                        let name = format!("{}.{}.l{}.predictions.ndjson", r.instrument, spec.name, l);
                        io::write_predictions_ndjson(r.out.join(&name), &report.records)?;
                        prediction_files.push(name);
                    }
                    reports.push(report);
                }
                Err(e) => failures.push(format!("{} (l={l}): {e}", spec.name)),
            }
        }
    }
    if reports.is_empty() {
        return Err(CliError::Input(format!(
            "no backtest produced predictions: {}",
            failures.join("; ")
        )));
    }
    io::write_accuracy_csv(r.out.join("accuracy.csv"), &reports)?;
    let resolved = serde_json::json!({
        "input": r.input,
        "instrument": r.instrument,
        "models": r.models_arg,
        "lookbacks": r.lookbacks,
        "audit": r.audit,
        "sessions": sessions,
        "config": r.config,
    });
    let mut outputs = vec!["accuracy.csv".to_string()];
    outputs.extend(prediction_files);
    write_manifest(&r.out, "backtest", resolved, &outputs)?;
    for report in &reports {
        println!(
            "{} l={}: accuracy {} over {} predictions",
            report.model,
            report.lookback,
            report
                .accuracy
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "n/a".into()),
            report.n_predictions
        );
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Estimation(failures))
    }
}

fn cmd_report(out: &Path) -> Result<(), CliError> {
    let mut fit_files: Vec<PathBuf> = fs::read_dir(out)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(".fit.json")))
        .collect();
    fit_files.sort();
    let mut fits = Vec::new();
    for path in &fit_files {
        fits.push(io::read_fit_report(path)?);
    }
    let selection = fs::read_to_string(out.join("selection.csv")).ok();
    let counts: Option<serde_json::Value> = fs::read_to_string(out.join("selection_counts.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let accuracy = fs::read_to_string(out.join("accuracy.csv")).ok();

    let mut md = String::new();
    let _ = writeln!(md, "# Run report\n");
    if !fits.is_empty() {
        let _ = writeln!(md, "## Fits ({})\n", fits.len());
        let _ = writeln!(md, "| model | d | T | objective | converged | boundary |");
        let _ = writeln!(md, "|---|---|---|---|---|---|");
        for f in &fits {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.6} | {} | {} |",
                f.model, f.d, f.t_sessions, f.objective, f.converged, f.boundary_hit
            );
        }
        let _ = writeln!(md);
    }
    if let Some(counts) = &counts {
        let _ = writeln!(md, "## Selection\n");
        let _ = writeln!(md, "```json\n{}\n```\n", serde_json::to_string_pretty(counts).unwrap_or_default());
    } else if let Some(sel) = &selection {
        let _ = writeln!(md, "## Selection\n\n```csv\n{sel}```\n");
    }
    if let Some(acc) = &accuracy {
        let _ = writeln!(md, "## Backtest accuracy\n\n```csv\n{acc}```\n");
    }

    let resolved = serde_json::json!({ "out": out, "fit_files": fit_files.len() });
    let hash = resolved_hash(&resolved)?;
    let json = serde_json::json!({
        "fits": fits,
        "selection_counts": counts,
        "config_hash": hash,
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&json).map_err(|e| CliError::Input(e.to_string()))? + "\n",
    )?;
    write_manifest(out, "report", resolved, &["report.json".into(), "report.md".into()])?;
    let _ = writeln!(md, "---\nconfig {hash} · version {}", env!("CARGO_PKG_VERSION"));
    fs::write(out.join("report.md"), md)?;
    println!("report written to {}", out.display());
    Ok(())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { config, out, seed } => cmd_simulate(&config, &out, seed),
        Command::IngestCheck { input } => cmd_ingest_check(&input),
        Command::Fit {
            config,
            input,
            instrument,
            models,
            out,
            jobs,
        } => {
            let r = resolve(config, input, instrument, models, None, out, jobs, false)?;
            cmd_fit(&r)
        }
        Command::Select {
            config,
            input,
            instrument,
            models,
            out,
            jobs,
        } => {
            let r = resolve(config, input, instrument, models, None, out, jobs, false)?;
            cmd_select(&r)
        }
        Command::Backtest {
            config,
            input,
            instrument,
            models,
            lookback,
            out,
            jobs,
            audit,
        } => {
            let r = resolve(config, input, instrument, models, lookback, out, jobs, audit)?;
            cmd_backtest(&r)
        }
        Command::Report { out } => cmd_report(&out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("RATIOFLOW_LOG")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
