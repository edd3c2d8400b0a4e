//! Synthetic order-flow generation with known ground truth.
//!
//! Market orders arrive as a Cox process: intensity λ0(t)·exp(ϑ^i·X(t))
//! for side i, with λ0 an unobservable baseline shared by both sides.
//! Conditional on an arrival at t, the side is ask with probability
//! r^MA = 1/(1 + exp(−θ*·X(t−))), θ* = ϑ^MA − ϑ^MB, which is exactly the
//! law the estimator targets. Arrival times are drawn by thinning against
//! a piecewise-constant envelope; the covariate factor cancels in the
//! acceptance ratio because covariates only change at emitted events.
//!
//! Two covariate regimes:
//! - `OuPaths`: level imbalances follow independent mean-reverting paths
//!   (clamped to [−1, 1]); cumulative imbalances are their running means,
//!   which is the exact book relation when all levels carry equal depth.
//!   Fast, no event stream to replay; used for Monte-Carlo studies.
//! - `BookDriven`: limit/cancel flows maintain a real book via the book
//!   engine, and the generative covariates are recomputed from that book
//!   with the covariate engine itself, so the emitted stream reproduces
//!   the ground-truth features end to end.
//!
//! Every draw comes from a counter-based generator seeded from the config:
//! identical configs give bit-identical output, and sessions/replications
//! use disjoint streams.

use crate::book::{BookError, BookState, EventKind, OrderEvent, Session, Side};
use crate::covariates::{
    compute_features, LagBuffer, ModelSpec, RawFeatures, RawSample, MAX_LEVEL,
};
use crate::estimator::{self, ratio_pair, Dataset, FitOptions};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error("intensity {intensity} exceeded envelope {envelope} at t = {t}s")]
    EnvelopeViolation { t: f64, intensity: f64, envelope: f64 },
    #[error("internal book inconsistency: {0}")]
    Book(#[from] BookError),
}

/// Baseline intensity λ0(t), per side, events per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Baseline {
    ConstantRate { rate: f64 },
    /// Piecewise-linear intraday multiplier through (open, mid, close)
    /// times a mean-one lognormal daily factor, i.i.d. across sessions.
    UShape {
        base_rate: f64,
        morning: f64,
        noon: f64,
        close: f64,
        daily_vol: f64,
    },
    /// log λ0 follows a mean-reverting path on a one-second grid, clamped
    /// five stationary deviations above its mean so an envelope exists.
    LogOu { mean_rate: f64, reversion: f64, vol: f64 },
}

impl Baseline {
    fn validate(&self) -> Result<(), SimError> {
        let ok = match self {
            Baseline::ConstantRate { rate } => *rate > 0.0,
            Baseline::UShape {
                base_rate,
                morning,
                noon,
                close,
                daily_vol,
            } => *base_rate > 0.0 && *morning > 0.0 && *noon > 0.0 && *close > 0.0 && *daily_vol >= 0.0,
            Baseline::LogOu {
                mean_rate,
                reversion,
                vol,
            } => *mean_rate > 0.0 && *reversion > 0.0 && *vol >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::ConfigInvalid("baseline must be strictly positive".into()))
        }
    }
}

/// One session's realized baseline: a step function on a uniform grid.
struct BaselinePath {
    step: f64,
    values: Vec<f64>,
    max: f64,
}

impl BaselinePath {
    fn draw(baseline: &Baseline, length: f64, rng: &mut ChaCha12Rng) -> BaselinePath {
        match baseline {
            Baseline::ConstantRate { rate } => BaselinePath {
                step: length,
                values: vec![*rate],
                max: *rate,
            },
            Baseline::UShape {
                base_rate,
                morning,
                noon,
                close,
                daily_vol,
            } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let factor = (daily_vol * z - 0.5 * daily_vol * daily_vol).exp();
                // One-second cells; λ0 constant within a cell keeps the
                // thinning envelope exact.
                let cells = (length.ceil() as usize).max(1);
                let mid = length / 2.0;
                let mut values = Vec::with_capacity(cells);
                for c in 0..cells {
                    let t = (c as f64 + 0.5).min(length);
                    let mult = if t <= mid {
                        morning + (noon - morning) * (t / mid)
                    } else {
                        noon + (close - noon) * ((t - mid) / mid)
                    };
                    values.push(base_rate * factor * mult);
                }
                let max = values.iter().fold(0.0f64, |a, &b| a.max(b));
                BaselinePath {
                    step: length / cells as f64,
                    values,
                    max,
                }
            }
            Baseline::LogOu {
                mean_rate,
                reversion,
                vol,
            } => {
                let mu = mean_rate.ln();
                let stat_sd = vol / (2.0 * reversion).sqrt();
                let cap = mu + 5.0 * stat_sd;
                let cells = (length.ceil() as usize).max(1);
                let h = length / cells as f64;
                let decay = (-reversion * h).exp();
                let noise_sd = stat_sd * (1.0 - decay * decay).sqrt();
                let mut x = mu + stat_sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
                let mut values = Vec::with_capacity(cells);
                for _ in 0..cells {
                    values.push(x.min(cap).exp());
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    x = mu + (x - mu) * decay + noise_sd * z;
                }
                let max = values.iter().fold(0.0f64, |a, &b| a.max(b));
                BaselinePath { step: h, values, max }
            }
        }
    }

    fn at(&self, t: f64) -> f64 {
        let idx = ((t / self.step) as usize).min(self.values.len() - 1);
        self.values[idx]
    }
}

/// How the book-side covariates evolve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariateDynamics {
    /// Mean-zero OU paths for the level imbalances, stepped at event
    /// arrivals and clamped to [−1, 1]. Spreads are drawn i.i.d. from
    /// `spread_choices`; `spread_reference` is the generative mean used by
    /// the spread-sign covariate.
    OuPaths {
        reversion: f64,
        vol: f64,
        #[serde(default = "default_spread_choices")]
        spread_choices: Vec<i64>,
        #[serde(default)]
        spread_reference: Option<f64>,
    },
    /// Full order-flow generation through the book engine. Rates are per
    /// side, events per second.
    BookDriven {
        limit_rate: f64,
        cancel_rate: f64,
        #[serde(default = "default_initial_levels")]
        initial_levels: usize,
        #[serde(default = "default_initial_qty")]
        initial_qty: u64,
        #[serde(default = "default_max_qty")]
        max_order_qty: u64,
        #[serde(default = "default_offset_range")]
        price_offset_range: i64,
        #[serde(default)]
        spread_reference: Option<f64>,
    },
}

fn default_spread_choices() -> Vec<i64> {
    vec![1, 2, 3]
}
fn default_initial_levels() -> usize {
    5
}
fn default_initial_qty() -> u64 {
    500
}
fn default_max_qty() -> u64 {
    60
}
fn default_offset_range() -> i64 {
    3
}

/// Full generative description: side-specific true parameters, baseline,
/// covariate dynamics, and horizon. `model` names the covariates ϑ acts
/// on; its coefficient order defines the ϑ vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelSpec,
    pub vartheta_ma: Vec<f64>,
    pub vartheta_mb: Vec<f64>,
    pub baseline: Baseline,
    pub covariate_dynamics: CovariateDynamics,
    pub sessions: u32,
    /// Session length in seconds.
    pub session_length: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn theta_star(&self) -> Vec<f64> {
        self.vartheta_ma
            .iter()
            .zip(&self.vartheta_mb)
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.model
            .validate()
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        let d = self.model.dimension();
        if self.vartheta_ma.len() != d || self.vartheta_mb.len() != d {
            return Err(SimError::ConfigInvalid(format!(
                "vartheta length must match model dimension {d}"
            )));
        }
        self.baseline.validate()?;
        if self.sessions == 0 || self.session_length <= 0.0 {
            return Err(SimError::ConfigInvalid(
                "need at least one session of positive length".into(),
            ));
        }
        match &self.covariate_dynamics {
            CovariateDynamics::OuPaths {
                reversion,
                vol,
                spread_choices,
                spread_reference,
            } => {
                if *reversion <= 0.0 || *vol < 0.0 {
                    return Err(SimError::ConfigInvalid("OU needs reversion > 0, vol >= 0".into()));
                }
                if spread_choices.is_empty() || spread_choices.iter().any(|&s| s <= 0) {
                    return Err(SimError::ConfigInvalid("spread choices must be positive".into()));
                }
                if self.model.needs_spread() && spread_reference.is_none() {
                    return Err(SimError::ConfigInvalid(
                        "model uses the spread sign: set spread_reference".into(),
                    ));
                }
            }
            CovariateDynamics::BookDriven {
                limit_rate,
                cancel_rate,
                initial_levels,
                initial_qty,
                max_order_qty,
                spread_reference,
                ..
            } => {
                if *limit_rate <= 0.0 || *cancel_rate < 0.0 {
                    return Err(SimError::ConfigInvalid("book flow rates must be positive".into()));
                }
                if *initial_levels == 0 || *initial_qty == 0 || *max_order_qty == 0 {
                    return Err(SimError::ConfigInvalid("book seeding must be nonzero".into()));
                }
                if self.model.needs_spread() && spread_reference.is_none() {
                    return Err(SimError::ConfigInvalid(
                        "model uses the spread sign: set spread_reference".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn spread_reference(&self) -> Option<f64> {
        match &self.covariate_dynamics {
            CovariateDynamics::OuPaths { spread_reference, .. } => *spread_reference,
            CovariateDynamics::BookDriven { spread_reference, .. } => *spread_reference,
        }
    }
}

/// Ground truth for one market order: the generative feature vector and
/// ask-side probability. Warmup orders (insufficient lag/sign history)
/// are labeled at r^MA = 1/2 with an empty feature vector; the pipeline
/// skips exactly these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub session_id: u32,
    pub ts: i64,
    pub side: Side,
    pub x: Vec<f64>,
    pub r_ma: f64,
    pub warmup: bool,
}

/// One generated session: canonical events (full order flow in BookDriven
/// mode, market orders only under OuPaths), the labeled pre-event raw
/// samples, and the per-order ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedSession {
    pub session: Session,
    pub events: Vec<OrderEvent>,
    pub raw: Vec<RawSample>,
    pub ground_truth: Vec<GroundTruthRecord>,
}

/// Side-intensity factor Σ_i exp(ϑ^i·x); 2 during warmup (x undefined,
/// both exponents treated as 0).
fn side_factor(config: &SimConfig, x: Option<&[f64]>) -> f64 {
    match x {
        Some(x) => {
            let za: f64 = config.vartheta_ma.iter().zip(x).map(|(a, b)| a * b).sum();
            let zb: f64 = config.vartheta_mb.iter().zip(x).map(|(a, b)| a * b).sum();
            za.exp() + zb.exp()
        }
        None => 2.0,
    }
}

fn seconds_to_ns(t: f64, prev: i64) -> i64 {
    ((t * 1e9).round() as i64).max(prev + 1)
}

/// Derive the RNG for (seed, session) or (seed, replication): one ChaCha
/// stream per index, disjoint by construction.
fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Label pre-arranged market-order contexts: walk the covariate paths and
/// event times in order, maintain the lag buffer over them, and draw each
/// side Bernoulli(r^MA(θ*·X)). Returns the labeled samples plus ground
/// truth. This is the fast path for Monte-Carlo studies: no book, no
/// thinning.
pub fn simulate_labels_only(
    model: &ModelSpec,
    theta_star: &[f64],
    contexts: &[(u32, i64, RawFeatures)],
    spread_reference: Option<f64>,
    rng: &mut ChaCha12Rng,
) -> (Vec<RawSample>, Vec<GroundTruthRecord>) {
    let mut lags = LagBuffer::new(model.max_lag());
    let mut current_session = None;
    let mut raw_out = Vec::with_capacity(contexts.len());
    let mut truth = Vec::with_capacity(contexts.len());

    for &(session_id, ts, features) in contexts {
        if current_session != Some(session_id) {
            lags.clear_session();
            current_session = Some(session_id);
        }
        let (x, r_ma, warmup) = match compute_features(model, &features, &lags, spread_reference) {
            Ok(x) => {
                let z: f64 = theta_star.iter().zip(&x).map(|(t, v)| t * v).sum();
                let (r_ma, _) = ratio_pair(z);
                (x, r_ma, false)
            }
            Err(_) => (Vec::new(), 0.5, true),
        };
        let side = if rng.gen_bool(r_ma) { Side::Ask } else { Side::Bid };
        truth.push(GroundTruthRecord {
            session_id,
            ts,
            side,
            x,
            r_ma,
            warmup,
        });
        lags.push(&features, side);
        raw_out.push(RawSample {
            session_id,
            timestamp: ts,
            side,
            features,
        });
    }
    (raw_out, truth)
}

/// Generate all sessions of `config`. Deterministic in (config, seed).
pub fn simulate(config: &SimConfig) -> Result<Vec<SimulatedSession>, SimError> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.sessions as usize);
    for k in 0..config.sessions {
        let mut rng = stream_rng(config.seed, k as u64);
        let session = match &config.covariate_dynamics {
            CovariateDynamics::OuPaths { .. } => simulate_ou_session(config, k, &mut rng)?,
            CovariateDynamics::BookDriven { .. } => simulate_book_session(config, k, &mut rng)?,
        };
        out.push(session);
    }
    Ok(out)
}

/// Thinning state shared by both modes: candidate times at the envelope
/// rate, acceptance by the ratio of true to envelope intensity.
fn accept_mo(
    t: f64,
    lambda0: &BaselinePath,
    rng: &mut ChaCha12Rng,
) -> Result<bool, SimError> {
    let rate = lambda0.at(t);
    if rate > lambda0.max * (1.0 + 1e-12) {
        return Err(SimError::EnvelopeViolation {
            t,
            intensity: rate,
            envelope: lambda0.max,
        });
    }
    Ok(rng.gen::<f64>() < rate / lambda0.max)
}

fn simulate_ou_session(
    config: &SimConfig,
    session_id: u32,
    rng: &mut ChaCha12Rng,
) -> Result<SimulatedSession, SimError> {
    let (reversion, vol, spread_choices) = match &config.covariate_dynamics {
        CovariateDynamics::OuPaths {
            reversion,
            vol,
            spread_choices,
            ..
        } => (*reversion, *vol, spread_choices.clone()),
        _ => unreachable!(),
    };
    let spread_reference = config.spread_reference();
    let length = config.session_length;
    let lambda0 = BaselinePath::draw(&config.baseline, length, rng);
    let stat_sd = vol / (2.0 * reversion).sqrt();

    // Level imbalances start at their stationary law, clamped.
    let mut levels = [0.0f64; MAX_LEVEL];
    for l in levels.iter_mut() {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        *l = (stat_sd * z).clamp(-1.0, 1.0);
    }
    let raw_from_levels = |levels: &[f64; MAX_LEVEL], spread: i64| {
        let mut imb = [0.0; MAX_LEVEL];
        let mut imb_cum = [0.0; MAX_LEVEL];
        let mut sum = 0.0;
        for n in 0..MAX_LEVEL {
            imb[n] = levels[n];
            sum += levels[n];
            // Equal depth at every level makes the cumulative imbalance
            // the running mean of the level imbalances.
            imb_cum[n] = sum / (n + 1) as f64;
        }
        RawFeatures {
            imb,
            imb_cum,
            spread: Some(spread),
        }
    };

    // Worst-case side factor over the bounded feature space.
    let bound: f64 = config
        .vartheta_ma
        .iter()
        .map(|v| v.abs())
        .sum::<f64>()
        .max(config.vartheta_mb.iter().map(|v| v.abs()).sum::<f64>());
    let factor_cap = 2.0 * bound.exp();
    let envelope = lambda0.max * factor_cap;

    let mut lags = LagBuffer::new(config.model.max_lag());
    let theta_star = config.theta_star();
    let mut t = 0.0f64;
    let mut prev_ts = -1i64;
    let mut events = Vec::new();
    let mut raw_out = Vec::new();
    let mut truth = Vec::new();

    let exp_dist = rand_distr::Exp::new(envelope)
        .map_err(|e| SimError::ConfigInvalid(format!("bad envelope rate: {e}")))?;
    loop {
        let gap: f64 = rng.sample(exp_dist);
        t += gap;
        if t >= length {
            break;
        }
        // Covariates are constant between candidates and take an exact
        // mean-reverting transition over each gap.
        let decay = (-reversion * gap).exp();
        let noise_sd = stat_sd * (1.0 - decay * decay).sqrt();
        for l in levels.iter_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *l = (*l * decay + noise_sd * z).clamp(-1.0, 1.0);
        }
        let spread = spread_choices[rng.gen_range(0..spread_choices.len())];
        let features = raw_from_levels(&levels, spread);

        let (x, r_ma, warmup) =
            match compute_features(&config.model, &features, &lags, spread_reference) {
                Ok(x) => {
                    let z: f64 = theta_star.iter().zip(&x).map(|(a, b)| a * b).sum();
                    let (r_ma, _) = ratio_pair(z);
                    (Some(x), r_ma, false)
                }
                Err(_) => (None, 0.5, true),
            };
        let factor = side_factor(config, x.as_deref());
        let rate = lambda0.at(t) * factor;
        if rate > envelope * (1.0 + 1e-12) {
            return Err(SimError::EnvelopeViolation {
                t,
                intensity: rate,
                envelope,
            });
        }
        let accepted = rng.gen::<f64>() < rate / envelope;

        if accepted {
            let side = if rng.gen_bool(r_ma) { Side::Ask } else { Side::Bid };
            let ts = seconds_to_ns(t, prev_ts);
            prev_ts = ts;
            truth.push(GroundTruthRecord {
                session_id,
                ts,
                side,
                x: x.unwrap_or_default(),
                r_ma,
                warmup,
            });
            raw_out.push(RawSample {
                session_id,
                timestamp: ts,
                side,
                features,
            });
            events.push(OrderEvent {
                session_id,
                timestamp: ts,
                kind: EventKind::MarketOrder,
                side,
                price: 0,
                quantity: 1,
            });
            lags.push(&features, side);
        }
    }

    Ok(SimulatedSession {
        session: Session {
            session_id,
            open: 0,
            close: (length * 1e9) as i64,
        },
        events,
        raw: raw_out,
        ground_truth: truth,
    })
}

fn simulate_book_session(
    config: &SimConfig,
    session_id: u32,
    rng: &mut ChaCha12Rng,
) -> Result<SimulatedSession, SimError> {
    let (limit_rate, cancel_rate, initial_levels, initial_qty, max_order_qty, offset_range) =
        match &config.covariate_dynamics {
            CovariateDynamics::BookDriven {
                limit_rate,
                cancel_rate,
                initial_levels,
                initial_qty,
                max_order_qty,
                price_offset_range,
                ..
            } => (
                *limit_rate,
                *cancel_rate,
                *initial_levels,
                *initial_qty,
                *max_order_qty,
                *price_offset_range,
            ),
            _ => unreachable!(),
        };
    let spread_reference = config.spread_reference();
    let length = config.session_length;
    let lambda0 = BaselinePath::draw(&config.baseline, length, rng);
    let theta_star = config.theta_star();

    let mut book = BookState::new();
    let mut lags = LagBuffer::new(config.model.max_lag());
    let mut events = Vec::new();
    let mut raw_out = Vec::new();
    let mut truth = Vec::new();

    // Seed the opening book; seeding events are part of the stream so a
    // replay reconstructs the same state.
    for i in 0..initial_levels {
        for (side, price) in [
            (Side::Bid, 1000 - i as i64),
            (Side::Ask, 1002 + i as i64),
        ] {
            let ev = OrderEvent {
                session_id,
                timestamp: 0,
                kind: EventKind::LimitInsert,
                side,
                price,
                quantity: initial_qty,
            };
            book.apply_event(&ev)?;
            events.push(ev);
        }
    }

    let mut t = 0.0f64;
    let mut prev_ts = 0i64;
    loop {
        // Current per-stream rates; the market-order envelope embeds the
        // current covariate factor, which is exact because covariates only
        // change when an event is emitted.
        let raw_now = RawFeatures::from_book(&book);
        let (x_now, r_ma, warmup) =
            match compute_features(&config.model, &raw_now, &lags, spread_reference) {
                Ok(x) => {
                    let z: f64 = theta_star.iter().zip(&x).map(|(a, b)| a * b).sum();
                    let (r, _) = ratio_pair(z);
                    (Some(x), r, false)
                }
                Err(_) => (None, 0.5, true),
            };
        let mo_env = lambda0.max * side_factor(config, x_now.as_deref());
        let limit_total = 2.0 * limit_rate;
        let cancel_total = cancel_rate
            * ((!book.ladder(Side::Ask).is_empty()) as u8 + (!book.ladder(Side::Bid).is_empty()) as u8)
                as f64;
        let total = limit_total + cancel_total + mo_env;

        t += rng.sample::<f64, _>(rand_distr::Exp::new(total).map_err(|e| {
            SimError::ConfigInvalid(format!("bad total rate: {e}"))
        })?);
        if t >= length {
            break;
        }
        let pick = rng.gen::<f64>() * total;

        if pick < limit_total {
            let side = if rng.gen_bool(0.5) { Side::Ask } else { Side::Bid };
            let off = rng.gen_range(-offset_range..=offset_range);
            let price = match side {
                Side::Ask => {
                    let floor = book.best_bid().map(|(p, _)| p + 1).unwrap_or(1001);
                    book.best_ask().map(|(p, _)| (p + off).max(floor)).unwrap_or(floor + 1)
                }
                Side::Bid => {
                    let cap = book.best_ask().map(|(p, _)| p - 1).unwrap_or(1001);
                    book.best_bid().map(|(p, _)| (p - off).min(cap)).unwrap_or(cap - 1)
                }
            };
            let ev = OrderEvent {
                session_id,
                timestamp: seconds_to_ns(t, prev_ts),
                kind: EventKind::LimitInsert,
                side,
                price,
                quantity: rng.gen_range(1..=max_order_qty),
            };
            prev_ts = ev.timestamp;
            book.apply_event(&ev)?;
            events.push(ev);
        } else if pick < limit_total + cancel_total {
            let mut side = if rng.gen_bool(0.5) { Side::Ask } else { Side::Bid };
            if book.ladder(side).is_empty() {
                side = side.opposite();
            }
            let ladder = book.ladder(side);
            let k = rng.gen_range(0..ladder.len());
            let (price, resting) = ladder.iter().nth(k).unwrap();
            let ev = OrderEvent {
                session_id,
                timestamp: seconds_to_ns(t, prev_ts),
                kind: EventKind::Cancel,
                side,
                price,
                quantity: rng.gen_range(1..=resting),
            };
            prev_ts = ev.timestamp;
            book.apply_event(&ev)?;
            events.push(ev);
        } else {
            if !accept_mo(t, &lambda0, rng)? {
                continue;
            }
            let side = if rng.gen_bool(r_ma) { Side::Ask } else { Side::Bid };
            let available = book.ladder(side).cumulative_depth(usize::MAX);
            if available <= 1 {
                continue; // nothing to consume without emptying the side
            }
            let quantity = rng.gen_range(1..=max_order_qty).min(available - 1);
            let ts = seconds_to_ns(t, prev_ts);
            prev_ts = ts;
            truth.push(GroundTruthRecord {
                session_id,
                ts,
                side,
                x: x_now.unwrap_or_default(),
                r_ma,
                warmup,
            });
            raw_out.push(RawSample {
                session_id,
                timestamp: ts,
                side,
                features: raw_now,
            });
            let ev = OrderEvent {
                session_id,
                timestamp: ts,
                kind: EventKind::MarketOrder,
                side,
                price: 0,
                quantity,
            };
            book.apply_event(&ev)?;
            events.push(ev);
            lags.push(&raw_now, side);
        }
    }

    Ok(SimulatedSession {
        session: Session {
            session_id,
            open: 0,
            close: (length * 1e9) as i64,
        },
        events,
        raw: raw_out,
        ground_truth: truth,
    })
}

/// Concatenate per-session event streams in session order.
pub fn concat_events(sessions: &[SimulatedSession]) -> Vec<OrderEvent> {
    sessions.iter().flat_map(|s| s.events.iter().copied()).collect()
}

pub fn concat_raw(sessions: &[SimulatedSession]) -> Vec<RawSample> {
    sessions.iter().flat_map(|s| s.raw.iter().cloned()).collect()
}

pub fn concat_truth(sessions: &[SimulatedSession]) -> Vec<GroundTruthRecord> {
    sessions.iter().flat_map(|s| s.ground_truth.iter().cloned()).collect()
}

/// The oracle prediction ceiling: mean of max(r^MA, r^MB) over non-warmup
/// orders. No predictor computable from X can beat it in expectation.
pub fn bayes_accuracy(truth: &[GroundTruthRecord]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in truth.iter().filter(|r| !r.warmup) {
        sum += r.r_ma.max(1.0 - r.r_ma);
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Per-coordinate diagnostics of the standardized estimation error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordinateStats {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    /// Kolmogorov-Smirnov distance against the standard normal.
    pub ks_distance: f64,
    /// Fraction of replications whose 95% interval θ̂_j ± 1.96·se_j covers
    /// the true value.
    pub ci_coverage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalityReport {
    pub replications: usize,
    pub used: usize,
    pub excluded: usize,
    pub coordinates: Vec<CoordinateStats>,
    /// |mean| band 3/√M and variance band 1 ± 5/√M implied by M.
    pub mean_band: f64,
    pub variance_band: (f64, f64),
}

impl NormalityReport {
    /// True when every coordinate sits inside the mean and variance bands.
    pub fn within_bands(&self) -> bool {
        self.coordinates.iter().all(|c| {
            c.mean.abs() < self.mean_band
                && c.variance > self.variance_band.0
                && c.variance < self.variance_band.1
        })
    }
}

/// Standard normal CDF via the Abramowitz-Stegun rational approximation
/// (max absolute error below 1e-7, ample for a KS diagnostic).
pub fn normal_cdf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.2316419 * x.abs());
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let tail = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt() * poly;
    if x >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

fn ks_distance(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &v) in sorted.iter().enumerate() {
        let cdf = normal_cdf(v);
        d = d.max((cdf - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - cdf).abs());
    }
    d
}

/// Monte-Carlo check of the √T asymptotics: replicate the simulation,
/// fit each replication, standardize û = √T(θ̂ − θ*) by the replication's
/// own Γ̂^{1/2}, and summarize the coordinates against N(0, 1).
/// Replications whose fit fails or does not converge are excluded and
/// counted.
pub fn monte_carlo_normality(
    config: &SimConfig,
    replications: usize,
    options: &FitOptions,
) -> Result<NormalityReport, SimError> {
    config.validate()?;
    if replications < 100 {
        return Err(SimError::ConfigInvalid("need at least 100 replications".into()));
    }
    let theta_star = config.theta_star();
    let d = theta_star.len();
    let t_sessions = config.sessions as usize;
    let sqrt_t = (t_sessions as f64).sqrt();

    let mut standardized: Vec<Vec<f64>> = vec![Vec::with_capacity(replications); d];
    let mut covered: Vec<usize> = vec![0; d];
    let mut used = 0usize;
    let mut excluded = 0usize;

    for rep in 0..replications {
        // Per-replication seed: one SplitMix64 step keeps streams disjoint
        // from the session streams inside simulate().
        let rep_seed = config
            .seed
            .wrapping_add((rep as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let rep_config = SimConfig {
            seed: rep_seed,
            ..config.clone()
        };
        let sessions = simulate(&rep_config)?;
        let raw = concat_raw(&sessions);
        let built = crate::covariates::build_dataset_with_mean(
            &config.model,
            &raw,
            config.spread_reference(),
        );
        let dataset = match Dataset::from_samples(&built.samples, t_sessions) {
            Ok(ds) => ds,
            Err(_) => {
                excluded += 1;
                continue;
            }
        };
        let fit = match estimator::fit_qmle(&dataset, options) {
            Ok(f) if f.converged && !f.boundary_hit => f,
            _ => {
                excluded += 1;
                continue;
            }
        };
        let gamma_sqrt = matrix_sqrt(&fit.gamma);
        let u: Vec<f64> = fit
            .theta
            .iter()
            .zip(&theta_star)
            .map(|(hat, star)| sqrt_t * (hat - star))
            .collect();
        for j in 0..d {
            let v: f64 = (0..d).map(|k| gamma_sqrt[(j, k)] * u[k]).sum();
            standardized[j].push(v);
        }
        if let Some(se) = &fit.std_errors {
            for j in 0..d {
                if (fit.theta[j] - theta_star[j]).abs() <= 1.96 * se[j] {
                    covered[j] += 1;
                }
            }
        }
        used += 1;
    }

    let m = used.max(1) as f64;
    let coordinates = standardized
        .iter()
        .zip(&covered)
        .map(|(vals, &cov)| {
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let skew = if var > 0.0 {
                vals.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / m / var.powf(1.5)
            } else {
                0.0
            };
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            CoordinateStats {
                mean,
                variance: var,
                skewness: skew,
                ks_distance: ks_distance(&sorted),
                ci_coverage: cov as f64 / m,
            }
        })
        .collect();

    Ok(NormalityReport {
        replications,
        used,
        excluded,
        coordinates,
        mean_band: 3.0 / m.sqrt(),
        variance_band: (1.0 - 5.0 / m.sqrt(), 1.0 + 5.0 / m.sqrt()),
    })
}

/// Symmetric positive-semidefinite square root via eigendecomposition.
fn matrix_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = m.nrows();
    let mut out = DMatrix::zeros(d, d);
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += lam * v[i] * v[j];
            }
        }
    }
    out
}
