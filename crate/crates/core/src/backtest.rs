//! Rolling calibrate-then-predict experiments.
//!
//! A schedule with lookback l fits the model on sessions [k−l+1, k] and
//! predicts every market order in sessions [k+1, k+l], then advances by l.
//! Only two trained quantities cross the boundary: θ̂ and the calibration
//! window's mean spread (the reference for the spread-sign covariate).
//! Lag imbalances and the last trade sign are observable in real time, so
//! the prediction pass rebuilds them from prediction-day data itself.
//!
//! The predicted side is ask exactly when r^MA(θ̂·x) > 1/2, i.e. θ̂·x > 0;
//! the tie goes to the bid side. Accuracy is reported overall and over the
//! alternation subset (orders whose side differs from the previous order's
//! side in the same session), event-weighted and day-weighted.

use crate::book::{OrderEvent, Side};
use crate::covariates::{
    build_dataset, collect_raw, compute_features, window_spread_mean, LagBuffer, ModelSpec,
    RawSample,
};
use crate::estimator::{fit_qmle, ratio_pair, Dataset, FitOptions};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("need at least {need} sessions, dataset has {have}")]
    InsufficientSessions { need: usize, have: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("raw samples out of session order at position {0}")]
    UnsortedSamples(usize),
    #[error("look-ahead audit failed in window {window}: prediction {index} differs under truncated replay")]
    AuditFailed { window: usize, index: usize },
    #[error(transparent)]
    Replay(#[from] crate::book::ReplayError),
}

/// Rolling window layout: calibrate on `lookback` sessions, predict the
/// next `lookback`, advance by `lookback`. `first_prediction_index` is the
/// session index (0-based) of the first predicted session; raising it above
/// `lookback` aligns evaluation ranges across different lookbacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSchedule {
    pub lookback: usize,
    pub first_prediction_index: usize,
}

impl CalibrationSchedule {
    /// Calibrate on each session, predict the next.
    pub fn daily() -> CalibrationSchedule {
        CalibrationSchedule::with_lookback(1)
    }

    /// Predict from the earliest session with a full lookback behind it.
    pub fn with_lookback(lookback: usize) -> CalibrationSchedule {
        CalibrationSchedule {
            lookback,
            first_prediction_index: lookback,
        }
    }

    pub fn validate(&self) -> Result<(), BacktestError> {
        if self.lookback == 0 {
            return Err(BacktestError::InvalidSchedule("lookback must be >= 1".into()));
        }
        if self.first_prediction_index < self.lookback {
            return Err(BacktestError::InvalidSchedule(format!(
                "first prediction index {} leaves no room for a {}-session calibration window",
                self.first_prediction_index, self.lookback
            )));
        }
        Ok(())
    }

    /// Calibration/prediction session-index ranges over `n_sessions`.
    /// Prediction ranges tile [first_prediction_index, n); each calibration
    /// window ends exactly where its prediction window starts.
    pub fn windows(&self, n_sessions: usize) -> Vec<ScheduleWindow> {
        let mut out = Vec::new();
        let mut p = self.first_prediction_index;
        while p < n_sessions {
            let end = (p + self.lookback).min(n_sessions);
            out.push(ScheduleWindow {
                calibration: p - self.lookback..p,
                prediction: p..end,
            });
            p = end;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleWindow {
    pub calibration: Range<usize>,
    pub prediction: Range<usize>,
}

/// One scored market order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub session_id: u32,
    pub timestamp: i64,
    pub predicted: Side,
    pub actual: Side,
    pub r_ma: f64,
    /// Side of the previous market order in the same session; absent for
    /// the session's first order.
    pub previous_actual: Option<Side>,
}

/// Per-window accounting. A window that failed to fit contributes no
/// predictions and is kept for the audit trail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowSummary {
    pub window: usize,
    pub calibration_sessions: (u32, u32),
    pub prediction_sessions: (u32, u32),
    pub fitted: bool,
    pub theta: Vec<f64>,
    pub spread_mean: Option<f64>,
    pub n_predictions: usize,
    pub n_correct: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub instrument: String,
    pub model: String,
    pub lookback: usize,
    pub n_predictions: usize,
    pub n_correct: usize,
    /// Event-weighted fraction correct; absent with zero predictions.
    pub accuracy: Option<f64>,
    /// Accuracy over orders whose actual side differs from the previous
    /// actual side; absent when no such orders exist.
    pub alternation_accuracy: Option<f64>,
    /// Mean of per-session accuracies (sessions with >= 1 prediction).
    pub day_weighted_accuracy: Option<f64>,
    pub windows: Vec<WindowSummary>,
    pub skipped_windows: usize,
    pub records: Vec<PredictionRecord>,
}

/// Predicted side under θ̂: ask exactly when r^MA > 1/2 (θ̂·x > 0), bid on
/// ties per the strict rule.
pub fn predict_side(theta: &[f64], features: &[f64]) -> Side {
    let z: f64 = theta.iter().zip(features).map(|(t, x)| t * x).sum();
    if z > 0.0 {
        Side::Ask
    } else {
        Side::Bid
    }
}

/// Accuracy restricted to alternation events: previous actual side known
/// and different from the actual side. Empty conditioning set → `None`.
pub fn alternation_accuracy(records: &[PredictionRecord]) -> Option<f64> {
    let mut n = 0usize;
    let mut correct = 0usize;
    for r in records {
        if let Some(prev) = r.previous_actual {
            if prev != r.actual {
                n += 1;
                correct += (r.predicted == r.actual) as usize;
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some(correct as f64 / n as f64)
    }
}

#[derive(Debug, Clone)]
pub struct BacktestOptions {
    pub fit: FitOptions,
    /// Re-derive audited predictions from truncated streams and require
    /// bit equality, proving no look-ahead.
    pub audit: bool,
}

impl Default for BacktestOptions {
    fn default() -> Self {
        BacktestOptions {
            fit: FitOptions::default(),
            audit: false,
        }
    }
}

/// Backtest from a canonical event stream: replay to raw samples first.
pub fn run_backtest(
    events: Vec<OrderEvent>,
    instrument: &str,
    spec: &ModelSpec,
    schedule: &CalibrationSchedule,
    options: &BacktestOptions,
) -> Result<AccuracyReport, BacktestError> {
    let raw = collect_raw(events)?;
    run_backtest_raw(&raw, instrument, spec, schedule, options)
}

/// Session index ranges of a session-sorted raw stream.
fn session_slices(raw: &[RawSample]) -> Result<Vec<(u32, Range<usize>)>, BacktestError> {
    let mut out: Vec<(u32, Range<usize>)> = Vec::new();
    for (i, s) in raw.iter().enumerate() {
        match out.last_mut() {
            Some((id, range)) if *id == s.session_id => range.end = i + 1,
            Some((id, _)) if *id > s.session_id => return Err(BacktestError::UnsortedSamples(i)),
            _ => out.push((s.session_id, i..i + 1)),
        }
    }
    Ok(out)
}

/// Score one prediction window: walk its raw samples in order, rebuilding
/// lag state forward, and classify every qualifying order with the frozen
/// (θ̂, spread mean). Returns the records in stream order.
fn score_window(
    spec: &ModelSpec,
    theta: &[f64],
    spread_mean: Option<f64>,
    raw: &[RawSample],
) -> Vec<PredictionRecord> {
    let mut records = Vec::new();
    let mut lags = LagBuffer::new(spec.max_lag());
    let mut current_session = None;
    let mut previous_actual: Option<Side> = None;
    for s in raw {
        if current_session != Some(s.session_id) {
            lags.clear_session();
            previous_actual = None;
            current_session = Some(s.session_id);
        }
        if let Ok(x) = compute_features(spec, &s.features, &lags, spread_mean) {
            let z: f64 = theta.iter().zip(&x).map(|(t, v)| t * v).sum();
            let (r_ma, _) = ratio_pair(z);
            records.push(PredictionRecord {
                session_id: s.session_id,
                timestamp: s.timestamp,
                predicted: predict_side(theta, &x),
                actual: s.side,
                r_ma,
                previous_actual,
            });
        }
        lags.push(&s.features, s.side);
        previous_actual = Some(s.side);
    }
    records
}

/// Backtest over pre-replayed raw samples (sorted by session, then time).
pub fn run_backtest_raw(
    raw: &[RawSample],
    instrument: &str,
    spec: &ModelSpec,
    schedule: &CalibrationSchedule,
    options: &BacktestOptions,
) -> Result<AccuracyReport, BacktestError> {
    schedule.validate()?;
    let sessions = session_slices(raw)?;
    let need = schedule.first_prediction_index + 1;
    if sessions.len() < need {
        return Err(BacktestError::InsufficientSessions {
            need,
            have: sessions.len(),
        });
    }

    let mut windows = Vec::new();
    let mut records = Vec::new();
    let mut skipped = 0usize;

    for (w, win) in schedule.windows(sessions.len()).into_iter().enumerate() {
        let calib_range = sessions[win.calibration.start].1.start..sessions[win.calibration.end - 1].1.end;
        let predict_range = sessions[win.prediction.start].1.start..sessions[win.prediction.end - 1].1.end;
        let calib_raw = &raw[calib_range];
        let predict_raw = &raw[predict_range];
        let mut summary = WindowSummary {
            window: w,
            calibration_sessions: (
                sessions[win.calibration.start].0,
                sessions[win.calibration.end - 1].0,
            ),
            prediction_sessions: (
                sessions[win.prediction.start].0,
                sessions[win.prediction.end - 1].0,
            ),
            fitted: false,
            theta: Vec::new(),
            spread_mean: None,
            n_predictions: 0,
            n_correct: 0,
        };

        let built = build_dataset(spec, calib_raw);
        let fit = Dataset::from_samples(&built.samples, win.calibration.len())
            .and_then(|ds| fit_qmle(&ds, &options.fit));
        let fit = match fit {
            Ok(f) if f.converged => f,
            Ok(f) => {
                log::warn!(
                    "window {w} ({instrument}/{}): fit did not converge ({} iterations), skipping",
                    spec.name,
                    f.iterations
                );
                skipped += 1;
                windows.push(summary);
                continue;
            }
            Err(e) => {
                log::warn!("window {w} ({instrument}/{}): fit failed: {e}", spec.name);
                skipped += 1;
                windows.push(summary);
                continue;
            }
        };

        let spread_mean = window_spread_mean(calib_raw);
        let window_records = score_window(spec, &fit.theta, spread_mean, predict_raw);
        if options.audit {
            audit_window(w, spec, &fit.theta, spread_mean, predict_raw, &window_records)?;
        }

        summary.fitted = true;
        summary.theta = fit.theta.clone();
        summary.spread_mean = spread_mean;
        summary.n_predictions = window_records.len();
        summary.n_correct = window_records
            .iter()
            .filter(|r| r.predicted == r.actual)
            .count();
        windows.push(summary);
        records.extend(window_records);
    }

    let n_predictions = records.len();
    let n_correct = records.iter().filter(|r| r.predicted == r.actual).count();
    let accuracy = (n_predictions > 0).then(|| n_correct as f64 / n_predictions as f64);

    // Day-weighted: average the per-session accuracies.
    let mut day_acc = Vec::new();
    let mut i = 0usize;
    while i < records.len() {
        let sid = records[i].session_id;
        let mut n = 0usize;
        let mut c = 0usize;
        while i < records.len() && records[i].session_id == sid {
            n += 1;
            c += (records[i].predicted == records[i].actual) as usize;
            i += 1;
        }
        day_acc.push(c as f64 / n as f64);
    }
    let day_weighted_accuracy =
        (!day_acc.is_empty()).then(|| day_acc.iter().sum::<f64>() / day_acc.len() as f64);

    Ok(AccuracyReport {
        instrument: instrument.to_string(),
        model: spec.name.clone(),
        lookback: schedule.lookback,
        n_predictions,
        n_correct,
        accuracy,
        alternation_accuracy: alternation_accuracy(&records),
        day_weighted_accuracy,
        windows,
        skipped_windows: skipped,
        records,
    })
}

/// Re-derive a spread of audited records from truncated prediction streams:
/// scoring the window cut immediately after an order must reproduce that
/// order's record bit for bit, so no later information can have leaked in.
fn audit_window(
    window: usize,
    spec: &ModelSpec,
    theta: &[f64],
    spread_mean: Option<f64>,
    predict_raw: &[RawSample],
    records: &[PredictionRecord],
) -> Result<(), BacktestError> {
    const AUDIT_CAP: usize = 24;
    if records.is_empty() {
        return Ok(());
    }
    let stride = (records.len() / AUDIT_CAP).max(1);
    for index in (0..records.len()).step_by(stride) {
        let target = &records[index];
        // Truncate the raw stream right after the audited order.
        let cut = predict_raw
            .iter()
            .position(|s| s.session_id == target.session_id && s.timestamp == target.timestamp)
            .map(|p| p + 1)
            .unwrap_or(predict_raw.len());
        let replayed = score_window(spec, theta, spread_mean, &predict_raw[..cut]);
        if replayed.last() != Some(target) {
            return Err(BacktestError::AuditFailed { window, index });
        }
    }
    Ok(())
}

/// One row per lookback, all evaluated over the common prediction range
/// [max lookback, end] so the accuracies are comparable.
#[derive(Debug)]
pub struct StudyRow {
    pub lookback: usize,
    pub result: Result<AccuracyReport, BacktestError>,
}

pub fn recalibration_study(
    raw: &[RawSample],
    instrument: &str,
    spec: &ModelSpec,
    lookbacks: &[usize],
    options: &BacktestOptions,
) -> Vec<StudyRow> {
    let first = lookbacks.iter().copied().max().unwrap_or(1);
    lookbacks
        .iter()
        .map(|&l| StudyRow {
            lookback: l,
            result: run_backtest_raw(
                raw,
                instrument,
                spec,
                &CalibrationSchedule {
                    lookback: l,
                    first_prediction_index: first,
                },
                options,
            ),
        })
        .collect()
}
