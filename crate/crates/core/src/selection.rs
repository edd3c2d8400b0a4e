//! Quasi-information criteria and catalog ranking.
//!
//! Each fitted model yields three criteria built from the maximized
//! quasi-log likelihood H and the parameter dimension d:
//!
//! - QAIC  = −2H + 2d
//! - QCAIC = −2H + (ln T + 1)d
//! - QBIC  = −2H + (ln T)d
//!
//! with T the number of calibration sessions and natural logarithms.
//! Lower is better. Rankings are only meaningful across fits sharing the
//! same T, so mixed-T inputs are rejected rather than silently compared.

use crate::estimator::FitResult;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Qaic,
    Qcaic,
    Qbic,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Qaic, Criterion::Qcaic, Criterion::Qbic];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Qaic => "qaic",
            Criterion::Qcaic => "qcaic",
            Criterion::Qbic => "qbic",
        }
    }
}

/// Criteria for one fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub model: String,
    pub d: usize,
    pub t_sessions: usize,
    pub objective: f64,
    pub qaic: f64,
    pub qcaic: f64,
    pub qbic: f64,
    pub converged: bool,
    pub boundary_hit: bool,
    /// T = 1 makes ln T = 0: QBIC degenerates to −2H with no penalty.
    pub degenerate_t: bool,
}

impl CriterionReport {
    pub fn value(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Qaic => self.qaic,
            Criterion::Qcaic => self.qcaic,
            Criterion::Qbic => self.qbic,
        }
    }
}

/// Compute the three criteria from a fit.
pub fn criteria(model: &str, fit: &FitResult) -> CriterionReport {
    let d = fit.dimension as f64;
    let t = fit.sessions.max(1) as f64;
    let base = -2.0 * fit.objective;
    CriterionReport {
        model: model.to_string(),
        d: fit.dimension,
        t_sessions: fit.sessions,
        objective: fit.objective,
        qaic: base + 2.0 * d,
        qcaic: base + (t.ln() + 1.0) * d,
        qbic: base + t.ln() * d,
        converged: fit.converged,
        boundary_hit: fit.boundary_hit,
        degenerate_t: fit.sessions <= 1,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectionError {
    #[error("criteria computed over differing session counts {0:?}: not comparable")]
    MixedT(Vec<usize>),
    #[error("no converged fits to rank")]
    NothingToRank,
}

/// Rank converged reports ascending by one criterion; ties break toward
/// the smaller d, then the lexicographically smaller name. Non-converged
/// reports are excluded with a logged reason; differing T is an error.
pub fn rank_models(
    reports: &[CriterionReport],
    criterion: Criterion,
) -> Result<Vec<CriterionReport>, SelectionError> {
    let mut ranked: Vec<CriterionReport> = Vec::with_capacity(reports.len());
    for r in reports {
        if r.converged {
            ranked.push(r.clone());
        } else {
            log::warn!(
                "excluding {} from {} ranking: fit did not converge",
                r.model,
                criterion.name()
            );
        }
    }
    if ranked.is_empty() {
        return Err(SelectionError::NothingToRank);
    }
    let mut ts: Vec<usize> = ranked.iter().map(|r| r.t_sessions).collect();
    ts.sort_unstable();
    ts.dedup();
    if ts.len() > 1 {
        return Err(SelectionError::MixedT(ts));
    }
    ranked.sort_by(|a, b| {
        a.value(criterion)
            .total_cmp(&b.value(criterion))
            .then(a.d.cmp(&b.d))
            .then(a.model.cmp(&b.model))
    });
    Ok(ranked)
}

/// First-place counts per criterion across instruments, the catalog-wide
/// selection census.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionCounts {
    pub per_criterion: BTreeMap<String, BTreeMap<String, usize>>,
    pub instruments: usize,
}

/// Tally which model ranks first under each criterion for each instrument.
/// Input: per-instrument report lists (one entry per candidate model).
pub fn selection_counts(
    per_instrument: &[Vec<CriterionReport>],
) -> Result<SelectionCounts, SelectionError> {
    let mut counts = SelectionCounts {
        instruments: per_instrument.len(),
        ..SelectionCounts::default()
    };
    for reports in per_instrument {
        for criterion in Criterion::ALL {
            let ranked = rank_models(reports, criterion)?;
            *counts
                .per_criterion
                .entry(criterion.name().to_string())
                .or_default()
                .entry(ranked[0].model.clone())
                .or_insert(0) += 1;
        }
    }
    Ok(counts)
}
