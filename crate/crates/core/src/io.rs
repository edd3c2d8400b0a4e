//! Plain-file serialization: canonical event streams, ground-truth
//! sidecars, model specs, fit reports, and the CSV report tables.
//!
//! Event files are CSV (header required) or NDJSON with the schema
//! `session_id,timestamp_ns,kind,side,price_ticks,quantity`, where kind is
//! L/C/M and side is A/B. A `.gz` suffix selects gzip compression on both
//! read and write; the format is picked from the remaining extension
//! (`.ndjson`/`.jsonl` for NDJSON, CSV otherwise).

use crate::backtest::{AccuracyReport, PredictionRecord};
use crate::book::{EventKind, OrderEvent, Side};
use crate::covariates::{MarketOrderSample, ModelSpec};
use crate::estimator::FitResult;
use crate::selection::CriterionReport;
use crate::sim::{GroundTruthRecord, SimConfig};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {0}", path = .1)]
    Json(serde_json::Error, String),
    #[error("{path}: {0}", path = .1)]
    Toml(toml::de::Error, String),
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn is_ndjson(path: &Path) -> bool {
    // Strip a trailing .gz before deciding the format.
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let base = name.strip_suffix(".gz").unwrap_or(name);
    base.ends_with(".ndjson") || base.ends_with(".jsonl")
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, IoError> {
    let file = File::open(path)?;
    Ok(if is_gz(path) {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>, IoError> {
    let file = File::create(path)?;
    Ok(if is_gz(path) {
        Box::new(BufWriter::new(GzEncoder::new(file, flate2::Compression::fast())))
    } else {
        Box::new(BufWriter::new(file))
    })
}

/// One event line; shared by the CSV and NDJSON codecs.
#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    session_id: u32,
    timestamp_ns: i64,
    kind: String,
    side: String,
    price_ticks: i64,
    quantity: u64,
}

const EVENT_HEADER: [&str; 6] = [
    "session_id",
    "timestamp_ns",
    "kind",
    "side",
    "price_ticks",
    "quantity",
];

impl EventRow {
    fn from_event(ev: &OrderEvent) -> EventRow {
        EventRow {
            session_id: ev.session_id,
            timestamp_ns: ev.timestamp,
            kind: ev.kind.code().to_string(),
            side: ev.side.code().to_string(),
            price_ticks: ev.price,
            quantity: ev.quantity,
        }
    }

    fn into_event(self, path: &Path, line: usize) -> Result<OrderEvent, IoError> {
        let kind = match self.kind.as_str() {
            "L" => EventKind::LimitInsert,
            "C" => EventKind::Cancel,
            "M" => EventKind::MarketOrder,
            other => return Err(format_err(path, line, format!("unknown kind {other:?}, expected L/C/M"))),
        };
        let side = match self.side.as_str() {
            "A" => Side::Ask,
            "B" => Side::Bid,
            other => return Err(format_err(path, line, format!("unknown side {other:?}, expected A/B"))),
        };
        Ok(OrderEvent {
            session_id: self.session_id,
            timestamp: self.timestamp_ns,
            kind,
            side,
            price: self.price_ticks,
            quantity: self.quantity,
        })
    }
}

/// Read a canonical event file (CSV or NDJSON, optionally gzipped).
pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<OrderEvent>, IoError> {
    let path = path.as_ref();
    let reader = open_reader(path)?;
    if is_ndjson(path) {
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: EventRow = serde_json::from_str(&line)
                .map_err(|e| format_err(path, i + 1, e.to_string()))?;
            out.push(row.into_event(path, i + 1)?);
        }
        Ok(out)
    } else {
        let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = csv_reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != EVENT_HEADER {
            return Err(format_err(
                path,
                1,
                format!(
                    "bad header {:?}, expected {}",
                    headers.iter().collect::<Vec<_>>().join(","),
                    EVENT_HEADER.join(",")
                ),
            ));
        }
        let mut out = Vec::new();
        for (i, row) in csv_reader.deserialize::<EventRow>().enumerate() {
            let row = row?;
            out.push(row.into_event(path, i + 2)?);
        }
        Ok(out)
    }
}

/// Write a canonical event file; format and compression follow the
/// extension exactly as in [`read_events`].
pub fn write_events(path: impl AsRef<Path>, events: &[OrderEvent]) -> Result<(), IoError> {
    let path = path.as_ref();
    let writer = open_writer(path)?;
    if is_ndjson(path) {
        let mut w = writer;
        for ev in events {
            serde_json::to_writer(&mut w, &EventRow::from_event(ev))
                .map_err(|e| IoError::Json(e, path.display().to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    } else {
        let mut w = csv::Writer::from_writer(writer);
        for ev in events {
            w.serialize(EventRow::from_event(ev))?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Ground-truth sidecar line: the contract fields `ts, side, x, r_ma`
/// plus the session and warmup markers needed for lossless round trips.
#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    ts: i64,
    side: String,
    x: Vec<f64>,
    r_ma: f64,
    #[serde(default)]
    session_id: u32,
    #[serde(default)]
    warmup: bool,
}

pub fn write_ground_truth(
    path: impl AsRef<Path>,
    records: &[GroundTruthRecord],
) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    for r in records {
        let row = TruthRow {
            ts: r.ts,
            side: r.side.code().to_string(),
            x: r.x.clone(),
            r_ma: r.r_ma,
            session_id: r.session_id,
            warmup: r.warmup,
        };
        serde_json::to_writer(&mut w, &row).map_err(|e| IoError::Json(e, path.display().to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthRecord>, IoError> {
    let path = path.as_ref();
    let reader = open_reader(path)?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TruthRow =
            serde_json::from_str(&line).map_err(|e| format_err(path, i + 1, e.to_string()))?;
        let side = match row.side.as_str() {
            "A" => Side::Ask,
            "B" => Side::Bid,
            other => return Err(format_err(path, i + 1, format!("unknown side {other:?}"))),
        };
        out.push(GroundTruthRecord {
            session_id: row.session_id,
            ts: row.ts,
            side,
            x: row.x,
            r_ma: row.r_ma,
            warmup: row.warmup,
        });
    }
    Ok(out)
}

pub fn write_model_spec(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    serde_json::to_writer_pretty(&mut w, spec)
        .map_err(|e| IoError::Json(e, path.display().to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Read one model spec or a JSON array of them; single objects are
/// returned as a one-element list.
pub fn read_model_specs(path: impl AsRef<Path>) -> Result<Vec<ModelSpec>, IoError> {
    let path = path.as_ref();
    let mut text = String::new();
    open_reader(path)?.read_to_string(&mut text)?;
    let specs: Vec<ModelSpec> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| IoError::Json(e, path.display().to_string()))?
    } else {
        vec![serde_json::from_str(&text).map_err(|e| IoError::Json(e, path.display().to_string()))?]
    };
    for spec in &specs {
        spec.validate()
            .map_err(|e| format_err(path, 0, e.to_string()))?;
    }
    Ok(specs)
}

/// Fit summary in the exchange shape: `T` is the session count behind the
/// √T scaling of the standard errors, `d` the parameter dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub model: String,
    pub theta: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub objective: f64,
    #[serde(rename = "T")]
    pub t_sessions: usize,
    pub d: usize,
    pub converged: bool,
    pub boundary_hit: bool,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn new(model: &str, fit: &FitResult) -> FitReport {
        FitReport {
            model: model.to_string(),
            theta: fit.theta.clone(),
            std_errors: fit.std_errors.clone(),
            objective: fit.objective,
            t_sessions: fit.sessions,
            d: fit.dimension,
            converged: fit.converged,
            boundary_hit: fit.boundary_hit,
            warnings: fit.warnings.clone(),
        }
    }
}

pub fn write_fit_report(path: impl AsRef<Path>, report: &FitReport) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    serde_json::to_writer_pretty(&mut w, report)
        .map_err(|e| IoError::Json(e, path.display().to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_fit_report(path: impl AsRef<Path>) -> Result<FitReport, IoError> {
    let path = path.as_ref();
    let mut text = String::new();
    open_reader(path)?.read_to_string(&mut text)?;
    serde_json::from_str(&text).map_err(|e| IoError::Json(e, path.display().to_string()))
}

/// Selection table: one row per (instrument, model) with the objective and
/// all three criteria.
pub fn write_selection_csv(
    path: impl AsRef<Path>,
    rows: &[(String, CriterionReport)],
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(open_writer(path.as_ref())?);
    w.write_record(["instrument", "model", "d", "T", "H", "qaic", "qcaic", "qbic"])?;
    for (instrument, r) in rows {
        w.write_record([
            instrument.as_str(),
            r.model.as_str(),
            &r.d.to_string(),
            &r.t_sessions.to_string(),
            &r.objective.to_string(),
            &r.qaic.to_string(),
            &r.qcaic.to_string(),
            &r.qbic.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy table `instrument,model,l,n_pred,accuracy,alternation_accuracy`;
/// absent fractions (no qualifying events) are left empty.
pub fn write_accuracy_csv(
    path: impl AsRef<Path>,
    reports: &[AccuracyReport],
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(open_writer(path.as_ref())?);
    w.write_record(["instrument", "model", "l", "n_pred", "accuracy", "alternation_accuracy"])?;
    for r in reports {
        w.write_record([
            r.instrument.as_str(),
            r.model.as_str(),
            &r.lookback.to_string(),
            &r.n_predictions.to_string(),
            &r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            &r.alternation_accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-event prediction dump for audits, one JSON object per line.
pub fn write_predictions_ndjson(
    path: impl AsRef<Path>,
    records: &[PredictionRecord],
) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| IoError::Json(e, path.display().to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Feature-matrix export `side,session_id,timestamp_ns,x_0..x_{d-1}` for
/// external cross-checks.
pub fn write_dataset_csv(
    path: impl AsRef<Path>,
    samples: &[MarketOrderSample],
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(open_writer(path.as_ref())?);
    let d = samples.first().map(|s| s.features.len()).unwrap_or(0);
    let mut header = vec!["side".to_string(), "session_id".to_string(), "timestamp_ns".to_string()];
    header.extend((0..d).map(|j| format!("x_{j}")));
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![
            s.side.code().to_string(),
            s.session_id.to_string(),
            s.timestamp.to_string(),
        ];
        row.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Simulation config from JSON or TOML, by extension.
pub fn read_sim_config(path: impl AsRef<Path>) -> Result<SimConfig, IoError> {
    let path = path.as_ref();
    let mut text = String::new();
    open_reader(path)?.read_to_string(&mut text)?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        toml::from_str(&text).map_err(|e| IoError::Toml(e, path.display().to_string()))
    } else {
        serde_json::from_str(&text).map_err(|e| IoError::Json(e, path.display().to_string()))
    }
}
