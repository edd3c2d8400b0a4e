//! Feature construction at market-order arrival times.
//!
//! Every model in the catalog is a list of covariate descriptors evaluated
//! against the pre-event book, plus lagged copies of book imbalances and
//! trade-sign information. The expensive part (per-level imbalances) is
//! computed once per market order into a [`RawSample`]; any model's feature
//! vector is then assembled from raw samples without touching the book
//! again, so one replay pass serves every candidate model.
//!
//! Sign conventions:
//! - Imbalance is (bid − ask)/(bid + ask): +1 means the ask side is thin.
//! - Last trade sign ε is −1 after an ask-side market order, +1 after a
//!   bid-side one.
//! - s is +1 when the current spread strictly exceeds the reference mean,
//!   −1 otherwise (ties included).

use crate::book::{BookState, OrderEvent, ReplayError, Side};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// Deepest book level any covariate may reference.
pub const MAX_LEVEL: usize = 10;
/// Largest market-order lag any covariate may reference.
pub const MAX_LAG: usize = 5;

/// One covariate in a model's feature list.
///
/// `n` is a book level (1-based, best quote first); `m` is a lag counted in
/// market orders within the same session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateKind {
    Constant,
    Imb { n: usize },
    ImbCum { n: usize },
    LastSign,
    SignSpreadProduct,
    LagImb { n: usize, m: usize },
    LagImbCum { n: usize, m: usize },
}

impl CovariateKind {
    /// Level-1 cumulative imbalance equals the plain level-1 imbalance, so
    /// both spellings denote one covariate. Canonical form prefers the
    /// plain one; used for duplicate detection.
    pub fn canonical(self) -> CovariateKind {
        match self {
            CovariateKind::ImbCum { n: 1 } => CovariateKind::Imb { n: 1 },
            CovariateKind::LagImbCum { n: 1, m } => CovariateKind::LagImb { n: 1, m },
            other => other,
        }
    }

    /// Market-order lag this covariate reads (0 for contemporaneous ones).
    pub fn lag(self) -> usize {
        match self {
            CovariateKind::LagImb { m, .. } | CovariateKind::LagImbCum { m, .. } => m,
            _ => 0,
        }
    }

    fn level(self) -> usize {
        match self {
            CovariateKind::Imb { n }
            | CovariateKind::ImbCum { n }
            | CovariateKind::LagImb { n, .. }
            | CovariateKind::LagImbCum { n, .. } => n,
            _ => 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpecError {
    #[error("model {0:?} has an empty covariate list")]
    Empty(String),
    #[error("model {0:?}: first covariate must be the constant")]
    FirstNotConstant(String),
    #[error("model {0:?}: duplicate covariate {1:?}")]
    Duplicate(String, CovariateKind),
    #[error("model {0:?}: level {1} outside 1..={MAX_LEVEL}")]
    LevelOutOfRange(String, usize),
    #[error("model {0:?}: lag {1} outside 1..={MAX_LAG}")]
    LagOutOfRange(String, usize),
    #[error("recalibration_days must be >= 1")]
    BadRecalibration,
}

fn default_recalibration() -> u32 {
    1
}

/// A named model: an ordered covariate list plus its recalibration period
/// in sessions (1 = refit every session).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub covariates: Vec<CovariateKind>,
    #[serde(default = "default_recalibration")]
    pub recalibration_days: u32,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, covariates: Vec<CovariateKind>) -> Result<Self, SpecError> {
        let spec = ModelSpec {
            name: name.into(),
            covariates,
            recalibration_days: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_recalibration(mut self, days: u32) -> Result<Self, SpecError> {
        if days == 0 {
            return Err(SpecError::BadRecalibration);
        }
        self.recalibration_days = days;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.covariates.is_empty() {
            return Err(SpecError::Empty(self.name.clone()));
        }
        if self.covariates[0] != CovariateKind::Constant {
            return Err(SpecError::FirstNotConstant(self.name.clone()));
        }
        if self.recalibration_days == 0 {
            return Err(SpecError::BadRecalibration);
        }
        let mut seen = Vec::with_capacity(self.covariates.len());
        for &c in &self.covariates {
            let level = c.level();
            if matches!(
                c,
                CovariateKind::Imb { .. }
                    | CovariateKind::ImbCum { .. }
                    | CovariateKind::LagImb { .. }
                    | CovariateKind::LagImbCum { .. }
            ) && !(1..=MAX_LEVEL).contains(&level)
            {
                return Err(SpecError::LevelOutOfRange(self.name.clone(), level));
            }
            let lag = c.lag();
            if matches!(c, CovariateKind::LagImb { .. } | CovariateKind::LagImbCum { .. })
                && !(1..=MAX_LAG).contains(&lag)
            {
                return Err(SpecError::LagOutOfRange(self.name.clone(), lag));
            }
            let canon = c.canonical();
            if seen.contains(&canon) {
                return Err(SpecError::Duplicate(self.name.clone(), c));
            }
            seen.push(canon);
        }
        Ok(())
    }

    /// Feature dimension d.
    pub fn dimension(&self) -> usize {
        self.covariates.len()
    }

    /// Deepest lag any covariate needs; 0 for lag-free models.
    pub fn max_lag(&self) -> usize {
        self.covariates.iter().map(|c| c.lag()).max().unwrap_or(0)
    }

    pub fn needs_sign(&self) -> bool {
        self.covariates.contains(&CovariateKind::LastSign)
    }

    pub fn needs_spread(&self) -> bool {
        self.covariates.contains(&CovariateKind::SignSpreadProduct)
    }

    /// Key identifying the model's fit, for catalog deduplication: the
    /// canonicalized covariate list plus the recalibration period.
    fn dedup_key(&self) -> (Vec<CovariateKind>, u32) {
        (
            self.covariates.iter().map(|c| c.canonical()).collect(),
            self.recalibration_days,
        )
    }
}

/// Signed imbalance of one level: (bid − ask)/(bid + ask), 0 when both
/// quantities are 0 (neutral signal), always in [−1, 1].
pub fn imbalance(q_bid: u64, q_ask: u64) -> f64 {
    let denom = q_bid + q_ask;
    if denom == 0 {
        0.0
    } else {
        (q_bid as f64 - q_ask as f64) / denom as f64
    }
}

/// Imbalance of totals over the best `n` levels of each side.
pub fn cumulative_imbalance(state: &BookState, n: usize) -> f64 {
    let bid: u64 = state.ladder(Side::Bid).cumulative_depth(n);
    let ask: u64 = state.ladder(Side::Ask).cumulative_depth(n);
    imbalance(bid, ask)
}

/// ε·s with s = +1 iff `spread` strictly exceeds `mean_spread`, else −1.
pub fn sign_spread_product(eps: f64, spread: i64, mean_spread: f64) -> f64 {
    let s = if (spread as f64) > mean_spread { 1.0 } else { -1.0 };
    eps * s
}

/// Book-derived inputs shared by every covariate, computed once per
/// market-order arrival from the pre-event book.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawFeatures {
    /// Per-level imbalances i_1..i_10; 0 past the end of the book.
    pub imb: [f64; MAX_LEVEL],
    /// Cumulative imbalances ī_1..ī_10.
    pub imb_cum: [f64; MAX_LEVEL],
    /// Best-ask minus best-bid; absent when either side is empty.
    pub spread: Option<i64>,
}

impl RawFeatures {
    pub fn from_book(state: &BookState) -> RawFeatures {
        let mut bid = [0u64; MAX_LEVEL];
        let mut ask = [0u64; MAX_LEVEL];
        for (i, (_, q)) in state.ladder(Side::Bid).iter().take(MAX_LEVEL).enumerate() {
            bid[i] = q;
        }
        for (i, (_, q)) in state.ladder(Side::Ask).iter().take(MAX_LEVEL).enumerate() {
            ask[i] = q;
        }
        let mut imb = [0.0; MAX_LEVEL];
        let mut imb_cum = [0.0; MAX_LEVEL];
        let (mut bid_sum, mut ask_sum) = (0u64, 0u64);
        for n in 0..MAX_LEVEL {
            imb[n] = imbalance(bid[n], ask[n]);
            bid_sum += bid[n];
            ask_sum += ask[n];
            imb_cum[n] = imbalance(bid_sum, ask_sum);
        }
        RawFeatures {
            imb,
            imb_cum,
            spread: state.spread().ok(),
        }
    }
}

/// One market-order arrival with its pre-event book summary. The sequence
/// of raw samples (in stream order) is sufficient to build any catalog
/// model's dataset: lags and ε are reconstructed from preceding samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub session_id: u32,
    pub timestamp: i64,
    pub side: Side,
    pub features: RawFeatures,
}

/// Replay an event stream and collect one [`RawSample`] per market order.
pub fn collect_raw<I>(events: I) -> Result<Vec<RawSample>, ReplayError>
where
    I: IntoIterator<Item = OrderEvent>,
{
    let mut out = Vec::new();
    crate::book::replay(events, |arrival, book| {
        out.push(RawSample {
            session_id: arrival.session_id,
            timestamp: arrival.timestamp,
            side: arrival.side,
            features: RawFeatures::from_book(book),
        });
    })?;
    Ok(out)
}

/// Per-session rolling state: the last up-to-`capacity` market-order-time
/// imbalance vectors, the last trade sign, and running spread statistics
/// for computing a window mean.
#[derive(Debug, Clone)]
pub struct LagBuffer {
    ring: VecDeque<([f64; MAX_LEVEL], [f64; MAX_LEVEL])>,
    capacity: usize,
    eps: Option<f64>,
    spread_sum: f64,
    spread_count: usize,
}

impl LagBuffer {
    pub fn new(capacity: usize) -> LagBuffer {
        LagBuffer {
            ring: VecDeque::with_capacity(capacity + 1),
            capacity,
            eps: None,
            spread_sum: 0.0,
            spread_count: 0,
        }
    }

    /// Reset lag and sign state at a session boundary. Spread statistics
    /// survive: the reference mean spans the whole calibration window.
    pub fn clear_session(&mut self) {
        self.ring.clear();
        self.eps = None;
    }

    /// Record a processed market order: its pre-event imbalances become
    /// lag-1 for the next order, and its side becomes ε.
    pub fn push(&mut self, features: &RawFeatures, side: Side) {
        if self.capacity > 0 {
            if self.ring.len() == self.capacity {
                self.ring.pop_back();
            }
            self.ring.push_front((features.imb, features.imb_cum));
        }
        self.eps = Some(match side {
            Side::Ask => -1.0,
            Side::Bid => 1.0,
        });
    }

    pub fn observe_spread(&mut self, spread: i64) {
        self.spread_sum += spread as f64;
        self.spread_count += 1;
    }

    /// Mean of all observed spreads; absent before the first observation.
    pub fn mean_spread(&self) -> Option<f64> {
        (self.spread_count > 0).then(|| self.spread_sum / self.spread_count as f64)
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    /// Sign of the last trade this session, if any.
    pub fn eps(&self) -> Option<f64> {
        self.eps
    }

    /// Imbalance vectors of the market order `m` back (1 = most recent).
    pub fn lag(&self, m: usize) -> Option<&([f64; MAX_LEVEL], [f64; MAX_LEVEL])> {
        debug_assert!(m >= 1);
        self.ring.get(m - 1)
    }
}

/// Why a market-order sample could not be turned into a feature vector.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum FeatureError {
    #[error("lag {need} requested with only {have} prior market orders this session")]
    InsufficientLag { need: usize, have: usize },
    #[error("last trade sign requested before the first trade of the session")]
    MissingSign,
    #[error("spread covariate requested with an empty book side or no spread history")]
    MissingSpread,
}

/// Evaluate `spec`'s feature vector for one arrival.
///
/// `spread_mean` is the reference mean for s(t); pass the calibration
/// window's frozen value during prediction. Errors identify samples the
/// caller must exclude rather than fill with fabricated values.
pub fn compute_features(
    spec: &ModelSpec,
    raw: &RawFeatures,
    lags: &LagBuffer,
    spread_mean: Option<f64>,
) -> Result<Vec<f64>, FeatureError> {
    let max_lag = spec.max_lag();
    if max_lag > lags.len() {
        return Err(FeatureError::InsufficientLag {
            need: max_lag,
            have: lags.len(),
        });
    }
    if spec.needs_sign() && lags.eps().is_none() {
        return Err(FeatureError::MissingSign);
    }
    let spread_inputs = if spec.needs_spread() {
        match (raw.spread, spread_mean) {
            (Some(sp), Some(mean)) => Some((sp, mean)),
            _ => return Err(FeatureError::MissingSpread),
        }
    } else {
        None
    };

    let mut values = Vec::with_capacity(spec.covariates.len());
    for &c in &spec.covariates {
        let v = match c {
            CovariateKind::Constant => 1.0,
            CovariateKind::Imb { n } => raw.imb[n - 1],
            CovariateKind::ImbCum { n } => raw.imb_cum[n - 1],
            CovariateKind::LastSign => lags.eps().unwrap(),
            CovariateKind::SignSpreadProduct => {
                let (sp, mean) = spread_inputs.unwrap();
                // ε = 0 placeholder before the first trade when no LastSign
                // covariate enforces a skip.
                sign_spread_product(lags.eps().unwrap_or(0.0), sp, mean)
            }
            CovariateKind::LagImb { n, m } => lags.lag(m).unwrap().0[n - 1],
            CovariateKind::LagImbCum { n, m } => lags.lag(m).unwrap().1[n - 1],
        };
        values.push(v);
    }
    Ok(values)
}

/// Evaluate features straight from a book snapshot, using the buffer's own
/// running spread mean as the reference.
pub fn compute_features_from_book(
    spec: &ModelSpec,
    state: &BookState,
    lags: &LagBuffer,
) -> Result<Vec<f64>, FeatureError> {
    compute_features(spec, &RawFeatures::from_book(state), lags, lags.mean_spread())
}

/// One fitted/predicted observation: the market order's side paired with
/// the pre-event feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketOrderSample {
    pub side: Side,
    pub timestamp: i64,
    pub session_id: u32,
    pub features: Vec<f64>,
}

/// Samples excluded from a dataset, by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipCounts {
    pub insufficient_lag: usize,
    pub missing_sign: usize,
    pub missing_spread: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.insufficient_lag + self.missing_sign + self.missing_spread
    }

    fn record(&mut self, err: FeatureError) {
        match err {
            FeatureError::InsufficientLag { .. } => self.insufficient_lag += 1,
            FeatureError::MissingSign => self.missing_sign += 1,
            FeatureError::MissingSpread => self.missing_spread += 1,
        }
    }
}

/// A model-specific dataset assembled from raw samples.
#[derive(Debug, Clone)]
pub struct BuiltDataset {
    pub samples: Vec<MarketOrderSample>,
    pub skips: SkipCounts,
    /// Spread mean used for s(t): the window's own mean unless a frozen
    /// calibration value was supplied.
    pub spread_mean: Option<f64>,
    /// Distinct sessions present in the input window.
    pub sessions: usize,
    pub dimension: usize,
}

/// Build `spec`'s dataset over a window of raw samples, deriving the
/// spread mean from the window itself (calibration use).
pub fn build_dataset(spec: &ModelSpec, raw: &[RawSample]) -> BuiltDataset {
    let mean = window_spread_mean(raw);
    build_dataset_with_mean(spec, raw, mean)
}

/// Arithmetic mean of the spread over a window, sampled at market-order
/// arrivals (pre-event books, one observation per order with a two-sided
/// book).
pub fn window_spread_mean(raw: &[RawSample]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in raw {
        if let Some(sp) = s.features.spread {
            sum += sp as f64;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Build `spec`'s dataset skipping the first `warmup` market orders of
/// every session regardless of the model's own requirements.
///
/// Likelihood values are only comparable across candidate models when they
/// are summed over one common sample; lag covariates consume the first m
/// orders of each session, so a family with mixed lag depths must be fit
/// conditioning on the deepest warmup (see [`selection_warmup`]). Warmup
/// rows still feed the lag buffer.
pub fn build_dataset_aligned(
    spec: &ModelSpec,
    raw: &[RawSample],
    spread_mean: Option<f64>,
    warmup: usize,
) -> BuiltDataset {
    let mut lags = LagBuffer::new(spec.max_lag());
    let mut samples = Vec::with_capacity(raw.len());
    let mut skips = SkipCounts::default();
    let mut sessions = 0usize;
    let mut current_session: Option<u32> = None;
    let mut in_session = 0usize;

    for s in raw {
        if current_session != Some(s.session_id) {
            lags.clear_session();
            current_session = Some(s.session_id);
            sessions += 1;
            in_session = 0;
        }
        if in_session >= warmup {
            match compute_features(spec, &s.features, &lags, spread_mean) {
                Ok(features) => samples.push(MarketOrderSample {
                    side: s.side,
                    timestamp: s.timestamp,
                    session_id: s.session_id,
                    features,
                }),
                Err(e) => skips.record(e),
            }
        }
        lags.push(&s.features, s.side);
        in_session += 1;
    }

    BuiltDataset {
        samples,
        skips,
        spread_mean,
        sessions,
        dimension: spec.dimension(),
    }
}

/// The common per-session warmup that makes a candidate family comparable:
/// the deepest lag requirement, or one market order when any candidate
/// conditions on the previous trade's sign.
pub fn selection_warmup(specs: &[ModelSpec]) -> usize {
    specs
        .iter()
        .map(|s| s.max_lag().max(usize::from(s.needs_sign())))
        .max()
        .unwrap_or(0)
}

/// Build `spec`'s dataset with an externally fixed spread mean (the frozen
/// calibration-window value, during prediction).
pub fn build_dataset_with_mean(
    spec: &ModelSpec,
    raw: &[RawSample],
    spread_mean: Option<f64>,
) -> BuiltDataset {
    let mut lags = LagBuffer::new(spec.max_lag());
    let mut samples = Vec::with_capacity(raw.len());
    let mut skips = SkipCounts::default();
    let mut sessions = 0usize;
    let mut current_session: Option<u32> = None;

    for s in raw {
        if current_session != Some(s.session_id) {
            lags.clear_session();
            current_session = Some(s.session_id);
            sessions += 1;
        }
        match compute_features(spec, &s.features, &lags, spread_mean) {
            Ok(features) => samples.push(MarketOrderSample {
                side: s.side,
                timestamp: s.timestamp,
                session_id: s.session_id,
                features,
            }),
            Err(e) => skips.record(e),
        }
        lags.push(&s.features, s.side);
    }

    BuiltDataset {
        samples,
        skips,
        spread_mean,
        sessions,
        dimension: spec.dimension(),
    }
}

fn imb_list(n: usize) -> Vec<CovariateKind> {
    let mut v = vec![CovariateKind::Constant];
    v.extend((1..=n).map(|k| CovariateKind::Imb { n: k }));
    v
}

fn imb_cum_list(n: usize) -> Vec<CovariateKind> {
    let mut v = vec![CovariateKind::Constant];
    v.extend((1..=n).map(|k| CovariateKind::ImbCum { n: k }));
    v
}

fn push_lags(v: &mut Vec<CovariateKind>, n: usize, max_m: usize, cum: bool) {
    for m in 1..=max_m {
        for k in 1..=n {
            v.push(if cum {
                CovariateKind::LagImbCum { n: k, m }
            } else {
                CovariateKind::LagImb { n: k, m }
            });
        }
    }
}

fn push_signs(v: &mut Vec<CovariateKind>) {
    v.push(CovariateKind::LastSign);
    v.push(CovariateKind::SignSpreadProduct);
}

/// Recalibration periods of the l-day family.
pub const LDAY_PERIODS: [u32; 8] = [2, 3, 5, 7, 10, 14, 30, 60];

fn catalog_entries(include_lday: bool) -> Vec<ModelSpec> {
    let mut specs: Vec<ModelSpec> = Vec::new();
    let mut push = |spec: ModelSpec| {
        let key = spec.dedup_key();
        if !specs.iter().any(|s| s.dedup_key() == key) {
            specs.push(spec);
        }
    };

    for n in 1..=10 {
        push(ModelSpec::new(format!("imb{n}"), imb_list(n)).unwrap());
    }
    for n in 1..=10 {
        push(ModelSpec::new(format!("imb{n}_sum"), imb_cum_list(n)).unwrap());
    }
    for n in 1..=5 {
        let mut v = imb_list(n);
        push_lags(&mut v, n, 1, false);
        push(ModelSpec::new(format!("imb{n}_la1"), v).unwrap());
    }
    for n in 1..=5 {
        let mut v = imb_cum_list(n);
        push_lags(&mut v, n, 1, true);
        push(ModelSpec::new(format!("imb{n}_la1_sum"), v).unwrap());
    }
    for n in 1..=5 {
        let mut v = imb_list(n);
        push_signs(&mut v);
        push(ModelSpec::new(format!("imb{n}_e_es"), v).unwrap());
    }
    for n in 1..=5 {
        let mut v = imb_cum_list(n);
        push_signs(&mut v);
        push(ModelSpec::new(format!("imb{n}_e_es_sum"), v).unwrap());
    }
    for n in 1..=5 {
        let mut v = imb_list(n);
        push_lags(&mut v, n, 1, false);
        push_signs(&mut v);
        push(ModelSpec::new(format!("imb{n}_e_es_la1"), v).unwrap());
    }
    for n in 1..=5 {
        let mut v = imb_cum_list(n);
        push_lags(&mut v, n, 1, true);
        push_signs(&mut v);
        push(ModelSpec::new(format!("imb{n}_e_es_la1_sum"), v).unwrap());
    }
    for n in 1..=2 {
        for m in 1..=MAX_LAG {
            let mut v = imb_list(n);
            push_lags(&mut v, n, m, false);
            push_signs(&mut v);
            push(ModelSpec::new(format!("imb{n}_e_es_la{m}"), v).unwrap());
        }
    }
    if include_lday {
        for n in 1..=2 {
            for l in LDAY_PERIODS {
                let mut v = imb_list(n);
                push_lags(&mut v, n, 1, false);
                push_signs(&mut v);
                push(
                    ModelSpec::new(format!("imb{n}_e_es_la1_{l}day"), v)
                        .unwrap()
                        .with_recalibration(l)
                        .unwrap(),
                );
            }
        }
    }
    specs
}

/// The candidate models compared under the information criteria: every
/// catalog family except the l-day recalibration variants, with duplicate
/// parameterizations (level-1 "sum" spellings, lag-1 overlaps) removed.
pub fn model_catalog() -> Vec<ModelSpec> {
    catalog_entries(false)
}

/// The full catalog including the l-day recalibration family. Entries are
/// distinct (covariates, recalibration) pairs.
pub fn model_catalog_full() -> Vec<ModelSpec> {
    catalog_entries(true)
}

/// Look up a catalog model by name.
pub fn catalog_model(name: &str) -> Option<ModelSpec> {
    model_catalog_full().into_iter().find(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::book::EventKind;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn book_with(bids: &[(i64, u64)], asks: &[(i64, u64)]) -> BookState {
        let mut book = BookState::new();
        let mut ts = 0;
        for &(price, quantity) in bids {
            ts += 1;
            book.apply_event(&OrderEvent {
                session_id: 0,
                timestamp: ts,
                kind: EventKind::LimitInsert,
                side: Side::Bid,
                price,
                quantity,
            })
            .unwrap();
        }
        for &(price, quantity) in asks {
            ts += 1;
            book.apply_event(&OrderEvent {
                session_id: 0,
                timestamp: ts,
                kind: EventKind::LimitInsert,
                side: Side::Ask,
                price,
                quantity,
            })
            .unwrap();
        }
        book
    }

    #[test]
    fn imbalance_symmetry_and_boundaries() {
        assert_eq!(imbalance(400, 400), 0.0);
        assert_eq!(imbalance(100, 0), 1.0);
        assert_eq!(imbalance(0, 100), -1.0);
        assert_abs_diff_eq!(imbalance(100, 50), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(imbalance(0, 0), 0.0);
    }

    #[test]
    fn cumulative_imbalance_examples() {
        let book = book_with(&[(999, 100), (998, 300)], &[(1001, 200), (1002, 200)]);
        assert_eq!(cumulative_imbalance(&book, 1), imbalance(100, 200));
        assert_eq!(cumulative_imbalance(&book, 2), 0.0);

        let book = book_with(&[(999, 100)], &[(1001, 50), (1002, 150)]);
        assert_abs_diff_eq!(cumulative_imbalance(&book, 2), -1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn sign_spread_product_examples() {
        assert_eq!(sign_spread_product(1.0, 3, 1.8), 1.0);
        assert_eq!(sign_spread_product(-1.0, 1, 1.8), 1.0);
        assert_eq!(sign_spread_product(0.0, 3, 1.8), 0.0);
        // Tie resolves to s = -1 (strictly larger required).
        assert_eq!(sign_spread_product(1.0, 2, 2.0), -1.0);
    }

    #[test]
    fn raw_features_match_scalar_ops() {
        let book = book_with(&[(999, 100), (998, 300), (997, 50)], &[(1001, 200), (1003, 80)]);
        let raw = RawFeatures::from_book(&book);
        assert_eq!(raw.imb[0], imbalance(100, 200));
        assert_eq!(raw.imb[1], imbalance(300, 80));
        assert_eq!(raw.imb[2], imbalance(50, 0));
        assert_eq!(raw.imb[3], 0.0);
        for n in 1..=MAX_LEVEL {
            assert_eq!(raw.imb_cum[n - 1], cumulative_imbalance(&book, n));
        }
        assert_eq!(raw.spread, Some(2));
    }

    #[test]
    fn constant_model_features() {
        let spec = ModelSpec::new("const", vec![CovariateKind::Constant]).unwrap();
        let book = book_with(&[(999, 10)], &[(1001, 10)]);
        let lags = LagBuffer::new(0);
        let v = compute_features_from_book(&spec, &book, &lags).unwrap();
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn balanced_book_imb1_features() {
        let spec = catalog_model("imb1").unwrap();
        let book = book_with(&[(999, 250)], &[(1001, 250)]);
        let lags = LagBuffer::new(0);
        let v = compute_features_from_book(&spec, &book, &lags).unwrap();
        assert_eq!(v, vec![1.0, 0.0]);
    }

    #[test]
    fn composed_model_matches_scalar_composition() {
        let spec = catalog_model("imb2_e_es_la1").unwrap();
        assert_eq!(spec.dimension(), 7);

        let prev_book = book_with(&[(999, 120), (998, 40)], &[(1001, 60), (1002, 90)]);
        let cur_book = book_with(&[(999, 30), (997, 10)], &[(1000, 70), (1001, 20)]);

        let mut lags = LagBuffer::new(spec.max_lag());
        let prev_raw = RawFeatures::from_book(&prev_book);
        lags.push(&prev_raw, Side::Ask);

        let mean = 1.4;
        let v = compute_features(&spec, &RawFeatures::from_book(&cur_book), &lags, Some(mean))
            .unwrap();
        let expected = vec![
            1.0,
            imbalance(30, 70),
            imbalance(10, 20),
            imbalance(120, 60),
            imbalance(40, 90),
            -1.0,
            sign_spread_product(-1.0, 1, mean),
        ];
        assert_eq!(v, expected);
    }

    #[test]
    fn history_requirements_reported() {
        let lags = LagBuffer::new(1);
        let raw = RawFeatures::from_book(&book_with(&[(999, 10)], &[(1001, 10)]));

        let la = catalog_model("imb1_la1").unwrap();
        assert_eq!(
            compute_features(&la, &raw, &lags, None),
            Err(FeatureError::InsufficientLag { need: 1, have: 0 })
        );

        let es = catalog_model("imb1_e_es").unwrap();
        assert_eq!(
            compute_features(&es, &raw, &lags, Some(1.0)),
            Err(FeatureError::MissingSign)
        );

        let mut primed = LagBuffer::new(1);
        primed.push(&raw, Side::Bid);
        let one_sided = RawFeatures::from_book(&book_with(&[(999, 10)], &[]));
        assert_eq!(
            compute_features(&es, &one_sided, &primed, Some(1.0)),
            Err(FeatureError::MissingSpread)
        );
    }

    fn mo(session_id: u32, timestamp: i64, side: Side) -> OrderEvent {
        OrderEvent {
            session_id,
            timestamp,
            kind: EventKind::MarketOrder,
            side,
            price: 0,
            quantity: 1,
        }
    }

    fn seeded_session(session_id: u32, mo_sides: &[Side]) -> Vec<OrderEvent> {
        let mut events = vec![
            OrderEvent {
                session_id,
                timestamp: 0,
                kind: EventKind::LimitInsert,
                side: Side::Bid,
                price: 999,
                quantity: 1_000,
            },
            OrderEvent {
                session_id,
                timestamp: 0,
                kind: EventKind::LimitInsert,
                side: Side::Ask,
                price: 1001,
                quantity: 1_000,
            },
        ];
        for (i, &side) in mo_sides.iter().enumerate() {
            events.push(mo(session_id, 10 * (i as i64 + 1), side));
        }
        events
    }

    #[test]
    fn empty_window_builds_empty_dataset() {
        let spec = catalog_model("imb1").unwrap();
        let events = vec![seeded_session(0, &[])].concat();
        let raw = collect_raw(events).unwrap();
        let built = build_dataset(&spec, &raw);
        assert!(built.samples.is_empty());
        assert_eq!(built.skips.total(), 0);
    }

    #[test]
    fn lag_model_skips_first_order_per_session() {
        let spec = catalog_model("imb1_la1").unwrap();
        let sides = [Side::Ask, Side::Bid, Side::Bid, Side::Ask, Side::Bid];
        let raw = collect_raw(seeded_session(0, &sides)).unwrap();
        let built = build_dataset(&spec, &raw);
        assert_eq!(built.samples.len(), 4);
        assert_eq!(built.skips.insufficient_lag, 1);
        assert_eq!(built.skips.total(), 1);
    }

    #[test]
    fn session_boundary_resets_history() {
        let spec = catalog_model("imb1_e_es_la1").unwrap();
        let mut events = seeded_session(0, &[Side::Ask, Side::Bid, Side::Ask]);
        events.extend(seeded_session(1, &[Side::Bid, Side::Ask]));
        let raw = collect_raw(events).unwrap();
        let built = build_dataset(&spec, &raw);
        // First order of each session lacks lag and sign history.
        assert_eq!(built.samples.len(), 3);
        assert_eq!(built.skips.total(), 2);
        assert_eq!(built.sessions, 2);
    }

    #[test]
    fn aligned_builder_puts_mixed_lag_models_on_one_sample() {
        let shallow = catalog_model("imb1").unwrap();
        let deep = catalog_model("imb1_e_es_la3").unwrap();
        let specs = vec![shallow.clone(), deep.clone()];
        assert_eq!(selection_warmup(&specs), 3);

        let mut events = seeded_session(
            0,
            &[Side::Ask, Side::Bid, Side::Bid, Side::Ask, Side::Bid, Side::Ask],
        );
        events.extend(seeded_session(1, &[Side::Bid, Side::Ask, Side::Ask, Side::Bid, Side::Bid]));
        let raw = collect_raw(events).unwrap();

        let a = build_dataset_aligned(&shallow, &raw, Some(2.0), 3);
        let b = build_dataset_aligned(&deep, &raw, Some(2.0), 3);
        assert_eq!(a.samples.len(), (6 - 3) + (5 - 3));
        assert_eq!(a.samples.len(), b.samples.len());
        assert_eq!(a.skips.total(), 0);
        assert_eq!(b.skips.total(), 0);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!((x.session_id, x.timestamp, x.side), (y.session_id, y.timestamp, y.side));
        }

        // The per-model builder keeps rows the aligned one conditions away.
        assert_eq!(build_dataset(&shallow, &raw).samples.len(), 11);
        assert_eq!(build_dataset_aligned(&shallow, &raw, Some(2.0), 0).samples.len(), 11);
    }

    #[test]
    fn lag_features_equal_previous_contemporaneous_features() {
        let spec_now = catalog_model("imb2").unwrap();
        let spec_lag = ModelSpec::new(
            "lag_probe",
            vec![
                CovariateKind::Constant,
                CovariateKind::LagImb { n: 1, m: 1 },
                CovariateKind::LagImb { n: 2, m: 1 },
            ],
        )
        .unwrap();

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let mut events = seeded_session(0, &[]);
        for i in 0..60 {
            let side = if rng.gen_bool(0.5) { Side::Ask } else { Side::Bid };
            events.push(mo(0, 10 * (i + 1), side));
            if rng.gen_bool(0.4) {
                let ins_side = if rng.gen_bool(0.5) { Side::Ask } else { Side::Bid };
                events.push(OrderEvent {
                    session_id: 0,
                    timestamp: 10 * (i + 1) + 1,
                    kind: EventKind::LimitInsert,
                    side: ins_side,
                    price: if ins_side == Side::Ask { 1001 } else { 999 },
                    quantity: rng.gen_range(1..100),
                });
            }
        }
        let raw = collect_raw(events).unwrap();
        let now = build_dataset(&spec_now, &raw);
        let lagged = build_dataset(&spec_lag, &raw);
        assert_eq!(lagged.samples.len(), now.samples.len() - 1);
        for (k, s) in lagged.samples.iter().enumerate() {
            assert_eq!(s.features[1], now.samples[k].features[1]);
            assert_eq!(s.features[2], now.samples[k].features[2]);
        }
    }

    #[test]
    fn catalog_counts_per_family() {
        let full = model_catalog_full();
        let ranked = model_catalog();
        let count = |prefix: &dyn Fn(&str) -> bool| full.iter().filter(|s| prefix(&s.name)).count();

        assert_eq!(ranked.len(), 54);
        assert_eq!(full.len(), 70);
        assert_eq!(full.iter().filter(|s| s.recalibration_days > 1).count(), 16);

        // Family-by-family census after deduplication.
        assert_eq!(count(&|n| n.starts_with("imb") && !n.contains('_')), 10);
        assert_eq!(count(&|n| n.ends_with("_sum") && !n.contains("la") && !n.contains("e_es")), 9);
        assert_eq!(count(&|n| n.ends_with("_la1") && !n.contains("e_es")), 5);
        assert_eq!(count(&|n| n.ends_with("_la1_sum") && !n.contains("e_es")), 4);
        assert_eq!(count(&|n| n.ends_with("_e_es")), 5);
        assert_eq!(count(&|n| n.ends_with("_e_es_sum")), 4);
        assert_eq!(count(&|n| n.contains("_e_es_la") && n.ends_with("_sum")), 4);
        assert_eq!(count(&|n| n.ends_with("day")), 16);
        // e_es_la m (m = 1..5, n = 1..5 at m = 1): 5 + 5 + 8 distinct.
        assert_eq!(
            count(&|n| n.contains("_e_es_la") && !n.ends_with("_sum") && !n.ends_with("day")),
            13
        );
    }

    #[test]
    fn catalog_examples_and_uniqueness() {
        let full = model_catalog_full();
        let imb3 = full.iter().find(|s| s.name == "imb3").unwrap();
        assert_eq!(
            imb3.covariates,
            vec![
                CovariateKind::Constant,
                CovariateKind::Imb { n: 1 },
                CovariateKind::Imb { n: 2 },
                CovariateKind::Imb { n: 3 },
            ]
        );
        assert_eq!(imb3.dimension(), 4);

        // The table row is 1, i_1, i_2, lag-1 copies, ε, εs: 7 covariates.
        let la1 = full.iter().find(|s| s.name == "imb2_e_es_la1").unwrap();
        assert_eq!(la1.dimension(), 7);

        let mut names: Vec<&str> = full.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), full.len(), "catalog names must be unique");

        let mut keys: Vec<_> = full.iter().map(|s| s.dedup_key()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), full.len(), "catalog entries must be distinct fits");

        for spec in &full {
            spec.validate().unwrap();
            assert_eq!(spec.covariates[0], CovariateKind::Constant);
        }

        // Level-1 deduplication keeps the unsuffixed spelling.
        assert!(full.iter().all(|s| s.name != "imb1_sum"));
        assert!(full.iter().all(|s| s.name != "imb1_e_es_la1_sum" || s.dimension() == 5));
        assert!(catalog_model("imb1_e_es_la1").is_some());

        for l in LDAY_PERIODS {
            for n in 1..=2 {
                let m = catalog_model(&format!("imb{n}_e_es_la1_{l}day")).unwrap();
                assert_eq!(m.recalibration_days, l);
            }
        }
    }

    #[test]
    fn spec_serialization_round_trip() {
        let spec = catalog_model("imb2_e_es_la1_7day").unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"lag_imb\""));
        assert!(json.contains("\"recalibration_days\":7"));
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);

        let parsed: ModelSpec = serde_json::from_str(
            r#"{"name":"custom","covariates":[{"kind":"constant"},{"kind":"imb_cum","n":3}]}"#,
        )
        .unwrap();
        assert_eq!(parsed.recalibration_days, 1);
        assert_eq!(parsed.covariates[1], CovariateKind::ImbCum { n: 3 });
    }

    #[test]
    fn spec_validation_rejects_malformed_lists() {
        assert!(matches!(
            ModelSpec::new("x", vec![CovariateKind::Imb { n: 1 }]),
            Err(SpecError::FirstNotConstant(_))
        ));
        assert!(matches!(
            ModelSpec::new(
                "x",
                vec![
                    CovariateKind::Constant,
                    CovariateKind::Imb { n: 1 },
                    CovariateKind::ImbCum { n: 1 },
                ]
            ),
            Err(SpecError::Duplicate(..))
        ));
        assert!(matches!(
            ModelSpec::new("x", vec![CovariateKind::Constant, CovariateKind::Imb { n: 11 }]),
            Err(SpecError::LevelOutOfRange(..))
        ));
        assert!(matches!(
            ModelSpec::new(
                "x",
                vec![CovariateKind::Constant, CovariateKind::LagImb { n: 1, m: 6 }]
            ),
            Err(SpecError::LagOutOfRange(..))
        ));
    }

    /// Mirror a book: swap sides and negate prices so ladder order stays
    /// legal while per-level quantities trade places.
    fn mirrored(bids: &[(i64, u64)], asks: &[(i64, u64)]) -> BookState {
        let m_bids: Vec<(i64, u64)> = asks.iter().map(|&(p, q)| (-p, q)).collect();
        let m_asks: Vec<(i64, u64)> = bids.iter().map(|&(p, q)| (-p, q)).collect();
        book_with(&m_bids, &m_asks)
    }

    proptest! {
        #[test]
        fn prop_imbalances_bounded_and_antisymmetric(
            bid_qty in proptest::collection::vec(0u64..5_000, 0..12),
            ask_qty in proptest::collection::vec(0u64..5_000, 0..12),
        ) {
            let bids: Vec<(i64, u64)> = bid_qty.iter().enumerate()
                .filter(|(_, &q)| q > 0)
                .map(|(i, &q)| (999 - i as i64, q)).collect();
            let asks: Vec<(i64, u64)> = ask_qty.iter().enumerate()
                .filter(|(_, &q)| q > 0)
                .map(|(i, &q)| (1001 + i as i64, q)).collect();
            let book = book_with(&bids, &asks);
            let raw = RawFeatures::from_book(&book);
            let flipped = RawFeatures::from_book(&mirrored(&bids, &asks));

            for n in 0..MAX_LEVEL {
                prop_assert!(raw.imb[n].abs() <= 1.0);
                prop_assert!(raw.imb_cum[n].abs() <= 1.0);
                prop_assert_eq!(raw.imb[n], -flipped.imb[n]);
                prop_assert_eq!(raw.imb_cum[n], -flipped.imb_cum[n]);
            }
            prop_assert_eq!(raw.spread, flipped.spread);

            // Cumulative imbalance is a quantity-weighted mean of levels.
            for n in 0..MAX_LEVEL {
                let max_level = raw.imb[..=n].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                prop_assert!(raw.imb_cum[n].abs() <= max_level + 1e-12);
            }
        }
    }
}
