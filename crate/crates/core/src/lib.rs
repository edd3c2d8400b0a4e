//! Intensity-ratio modeling of limit-order-book market-order flow.
//!
//! The crate fits a relative-intensity (logistic ratio) model of bid/ask
//! market-order arrivals to order-book event streams, predicts the side of
//! the next market order, and ranks competing covariate models with
//! quasi-information criteria. A built-in synthetic order-flow simulator
//! with known ground truth backs the statistical test suite.
//!
//! Pipeline stages, one module each:
//!
//! - [`book`]: event-stream replay and level-2 book maintenance, exposing
//!   the pre-event book snapshot at every market-order arrival.
//! - [`covariates`]: per-arrival feature vectors (depth imbalances, lagged
//!   imbalances, trade-sign and spread-sign covariates) and the model
//!   catalog.
//! - [`estimator`]: quasi-maximum-likelihood fit of the ratio model over a
//!   box-constrained parameter space, with observed-information standard
//!   errors.
//! - [`selection`]: QAIC / QCAIC / QBIC computation and model ranking.
//! - [`backtest`]: rolling calibrate-then-predict experiments with overall
//!   and sign-alternation accuracy.
//! - [`sim`]: synthetic order flow with known parameters, both a full
//!   book-driven event simulator and a fast label-only mode.
//! - [`io`]: canonical event-file schema (CSV/NDJSON, gzip), model-spec and
//!   fit-report serialization.

pub mod backtest;
pub mod book;
pub mod covariates;
pub mod estimator;
pub mod io;
pub mod selection;
pub mod sim;
