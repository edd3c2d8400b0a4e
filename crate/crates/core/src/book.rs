//! Level-2 limit-order-book maintenance and event-stream replay.
//!
//! The book tracks aggregate resting quantity per price level on each side.
//! [`replay`] walks an ordered event stream and hands the caller the book
//! state as of the instant *before* each market order executes, which is
//! the snapshot every downstream covariate is computed from.
//!
//! Conventions:
//! - Prices are integer ticks, quantities integer shares.
//! - An ask-side market order consumes ask liquidity (an aggressive buy);
//!   a bid-side market order consumes bid liquidity (an aggressive sell).
//! - The book is rebuilt from scratch at every session boundary; feeds are
//!   expected to re-seed the opening book each session.
//! - Events with equal timestamps are applied in input order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Book side. `Ask` is the sell side (consumed by buys), `Bid` the buy side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Ask,
    Bid,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Ask => Side::Bid,
            Side::Bid => Side::Ask,
        }
    }

    /// Single-letter code used by the canonical file schema.
    pub fn code(self) -> char {
        match self {
            Side::Ask => 'A',
            Side::Bid => 'B',
        }
    }
}

/// Event kind in the canonical schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    LimitInsert,
    Cancel,
    MarketOrder,
}

impl EventKind {
    pub fn code(self) -> char {
        match self {
            EventKind::LimitInsert => 'L',
            EventKind::Cancel => 'C',
            EventKind::MarketOrder => 'M',
        }
    }
}

/// One order-flow event.
///
/// `timestamp` is nanoseconds since session open. Market orders carry the
/// side whose liquidity they consume; their `price` field is ignored by
/// matching (execution walks the best levels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderEvent {
    pub session_id: u32,
    pub timestamp: i64,
    pub kind: EventKind,
    pub side: Side,
    pub price: i64,
    pub quantity: u64,
}

/// One trading session `[open, close]`; sessions are disjoint, ordered and
/// of equal length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: u32,
    pub open: i64,
    pub close: i64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BookError {
    #[error("crossed book after insert: best bid {bid} >= best ask {ask}")]
    CrossedBook { bid: i64, ask: i64 },
    #[error("{side:?} {price}: removing {want} exceeds resting {have}")]
    NegativeQuantity {
        side: Side,
        price: i64,
        have: u64,
        want: u64,
    },
    #[error("market order on empty {side:?} side")]
    EmptySide { side: Side },
    #[error("event timestamp {event} precedes book time {book}")]
    NonMonotonicTimestamp { event: i64, book: i64 },
    #[error("event quantity must be positive")]
    ZeroQuantity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PriceLevel {
    price: i64,
    quantity: u64,
}

/// One side of the book: levels sorted best-first (asks ascending by price,
/// bids descending). Kept as a flat vector; activity concentrates near the
/// top so shifts stay short.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ladder {
    levels: Vec<PriceLevel>,
    ascending: bool,
}

impl Ladder {
    fn new(side: Side) -> Self {
        Ladder {
            levels: Vec::new(),
            ascending: side == Side::Ask,
        }
    }

    fn position(&self, price: i64) -> Result<usize, usize> {
        if self.ascending {
            self.levels.binary_search_by(|l| l.price.cmp(&price))
        } else {
            self.levels.binary_search_by(|l| price.cmp(&l.price))
        }
    }

    fn insert(&mut self, price: i64, quantity: u64) {
        match self.position(price) {
            Ok(i) => self.levels[i].quantity += quantity,
            Err(i) => self.levels.insert(i, PriceLevel { price, quantity }),
        }
    }

    fn cancel(&mut self, side: Side, price: i64, quantity: u64) -> Result<(), BookError> {
        match self.position(price) {
            Ok(i) => {
                let have = self.levels[i].quantity;
                if quantity > have {
                    return Err(BookError::NegativeQuantity {
                        side,
                        price,
                        have,
                        want: quantity,
                    });
                }
                if quantity == have {
                    self.levels.remove(i);
                } else {
                    self.levels[i].quantity -= quantity;
                }
                Ok(())
            }
            Err(_) => Err(BookError::NegativeQuantity {
                side,
                price,
                have: 0,
                want: quantity,
            }),
        }
    }

    /// Consume `quantity` from the best level, walking deeper on overflow.
    fn consume(&mut self, side: Side, quantity: u64) -> Result<(), BookError> {
        if self.levels.is_empty() {
            return Err(BookError::EmptySide { side });
        }
        let mut remaining = quantity;
        let mut removed = 0usize;
        for level in self.levels.iter_mut() {
            if remaining == 0 {
                break;
            }
            if level.quantity <= remaining {
                remaining -= level.quantity;
                level.quantity = 0;
                removed += 1;
            } else {
                level.quantity -= remaining;
                remaining = 0;
            }
        }
        if remaining > 0 {
            // Roll back is unnecessary: callers treat this as malformed
            // input and abandon the replay.
            return Err(BookError::NegativeQuantity {
                side,
                price: self.levels.last().map(|l| l.price).unwrap_or(0),
                have: quantity - remaining,
                want: quantity,
            });
        }
        if removed > 0 {
            self.levels.drain(..removed);
        }
        Ok(())
    }

    pub fn best(&self) -> Option<(i64, u64)> {
        self.levels.first().map(|l| (l.price, l.quantity))
    }

    /// Quantity at the n-th best level (1-indexed); 0 when fewer levels exist.
    pub fn depth(&self, n: usize) -> u64 {
        debug_assert!(n >= 1);
        self.levels.get(n - 1).map(|l| l.quantity).unwrap_or(0)
    }

    /// Total quantity over the best `n` levels.
    pub fn cumulative_depth(&self, n: usize) -> u64 {
        self.levels.iter().take(n).map(|l| l.quantity).sum()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// (price, quantity) pairs best-first.
    pub fn iter(&self) -> impl Iterator<Item = (i64, u64)> + '_ {
        self.levels.iter().map(|l| (l.price, l.quantity))
    }
}

/// Mutable level-2 book state for one instrument within one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BookState {
    asks: Ladder,
    bids: Ladder,
    pub last_update: i64,
}

impl Default for BookState {
    fn default() -> Self {
        Self::new()
    }
}

impl BookState {
    pub fn new() -> Self {
        BookState {
            asks: Ladder::new(Side::Ask),
            bids: Ladder::new(Side::Bid),
            last_update: 0,
        }
    }

    pub fn ladder(&self, side: Side) -> &Ladder {
        match side {
            Side::Ask => &self.asks,
            Side::Bid => &self.bids,
        }
    }

    fn ladder_mut(&mut self, side: Side) -> &mut Ladder {
        match side {
            Side::Ask => &mut self.asks,
            Side::Bid => &mut self.bids,
        }
    }

    /// Quantity at the n-th best level of `side` (1-indexed); absent levels
    /// report 0.
    pub fn depth(&self, side: Side, n: usize) -> u64 {
        self.ladder(side).depth(n)
    }

    pub fn best_ask(&self) -> Option<(i64, u64)> {
        self.asks.best()
    }

    pub fn best_bid(&self) -> Option<(i64, u64)> {
        self.bids.best()
    }

    /// Best ask minus best bid, in ticks.
    pub fn spread(&self) -> Result<i64, BookError> {
        match (self.best_bid(), self.best_ask()) {
            (Some((bid, _)), Some((ask, _))) => Ok(ask - bid),
            (None, _) => Err(BookError::EmptySide { side: Side::Bid }),
            (_, None) => Err(BookError::EmptySide { side: Side::Ask }),
        }
    }

    /// Apply one event, mutating the book.
    ///
    /// Limit inserts add quantity at their price and a resulting crossed
    /// book is rejected as malformed input. Cancels subtract resting
    /// quantity exactly. Market orders consume from the best level of their
    /// target side, walking deeper on overflow; emptied levels are removed.
    pub fn apply_event(&mut self, ev: &OrderEvent) -> Result<(), BookError> {
        if ev.timestamp < self.last_update {
            return Err(BookError::NonMonotonicTimestamp {
                event: ev.timestamp,
                book: self.last_update,
            });
        }
        if ev.quantity == 0 {
            return Err(BookError::ZeroQuantity);
        }
        match ev.kind {
            EventKind::LimitInsert => {
                self.ladder_mut(ev.side).insert(ev.price, ev.quantity);
                if let (Some((bid, _)), Some((ask, _))) = (self.best_bid(), self.best_ask()) {
                    if bid >= ask {
                        return Err(BookError::CrossedBook { bid, ask });
                    }
                }
            }
            EventKind::Cancel => {
                self.ladder_mut(ev.side).cancel(ev.side, ev.price, ev.quantity)?;
            }
            EventKind::MarketOrder => {
                self.ladder_mut(ev.side).consume(ev.side, ev.quantity)?;
            }
        }
        self.last_update = ev.timestamp;
        Ok(())
    }
}

/// A market-order arrival surfaced by [`replay`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarketOrderArrival {
    pub session_id: u32,
    pub timestamp: i64,
    pub side: Side,
    pub quantity: u64,
    /// Index of the event within the replayed stream.
    pub event_index: usize,
}

/// Replay error with the offending event's stream index attached.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplayError {
    #[error("event {index}: {source}")]
    Book {
        index: usize,
        #[source]
        source: BookError,
    },
    #[error("event {index}: stream not sorted by (session_id, timestamp)")]
    Unsorted { index: usize },
}

/// Summary counters from a replay pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayStats {
    pub events: usize,
    pub market_orders: usize,
    pub sessions: usize,
}

/// Replay an event stream sorted by `(session_id, timestamp)`, invoking
/// `on_market_order` with each market-order arrival and the book as of the
/// instant before that order executes.
///
/// The pass is single-pass and bounded-memory: the callback borrows the
/// live book, so callers that need a snapshot must clone it (see
/// [`replay_collect`]). The book is reset at each session boundary.
pub fn replay<I, F>(events: I, mut on_market_order: F) -> Result<ReplayStats, ReplayError>
where
    I: IntoIterator<Item = OrderEvent>,
    F: FnMut(&MarketOrderArrival, &BookState),
{
    let mut book = BookState::new();
    let mut stats = ReplayStats::default();
    let mut current_session: Option<u32> = None;

    for (index, ev) in events.into_iter().enumerate() {
        match current_session {
            Some(sid) if ev.session_id == sid => {
                if ev.timestamp < book.last_update {
                    return Err(ReplayError::Unsorted { index });
                }
            }
            Some(sid) if ev.session_id < sid => {
                return Err(ReplayError::Unsorted { index });
            }
            _ => {
                // New session: fresh book.
                book = BookState::new();
                current_session = Some(ev.session_id);
                stats.sessions += 1;
            }
        }

        if ev.kind == EventKind::MarketOrder {
            let arrival = MarketOrderArrival {
                session_id: ev.session_id,
                timestamp: ev.timestamp,
                side: ev.side,
                quantity: ev.quantity,
                event_index: index,
            };
            on_market_order(&arrival, &book);
            stats.market_orders += 1;
        }
        book.apply_event(&ev)
            .map_err(|source| ReplayError::Book { index, source })?;
        stats.events += 1;
    }
    Ok(stats)
}

/// An owned pre-event emission, for callers that want materialized snapshots.
#[derive(Debug, Clone)]
pub struct ReplayEmission {
    pub arrival: MarketOrderArrival,
    pub book: BookState,
}

/// Replay and collect one owned snapshot per market order. Convenient for
/// tests and small datasets; the streaming [`replay`] is the bulk path.
pub fn replay_collect<I>(events: I) -> Result<Vec<ReplayEmission>, ReplayError>
where
    I: IntoIterator<Item = OrderEvent>,
{
    let mut out = Vec::new();
    replay(events, |arrival, book| {
        out.push(ReplayEmission {
            arrival: *arrival,
            book: book.clone(),
        });
    })?;
    Ok(out)
}
