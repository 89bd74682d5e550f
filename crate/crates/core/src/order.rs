//! Market orders, per-agent windows of consecutive orders, and the order-log CSV format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of consecutive market orders in one sample.
pub const WINDOW_LEN: usize = 50;

/// Trading session length in seconds (9:00 to 17:00).
pub const SESSION_SECONDS: f64 = 8.0 * 3600.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Buy => 1.0,
            Side::Sell => -1.0,
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Buy => Side::Sell,
            Side::Sell => Side::Buy,
        }
    }
}

impl TryFrom<i8> for Side {
    type Error = String;

    fn try_from(v: i8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Side::Buy),
            -1 => Ok(Side::Sell),
            other => Err(format!("side must be 1 or -1, got {other}")),
        }
    }
}

impl From<Side> for i8 {
    fn from(s: Side) -> i8 {
        match s {
            Side::Buy => 1,
            Side::Sell => -1,
        }
    }
}

mod flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("flag must be 0 or 1, got {other}"))),
        }
    }
}

/// One executed aggressive trade together with the best-level book state just before it.
///
/// Field order matches the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketOrder {
    pub day: u32,
    /// Seconds since session open.
    pub t: f64,
    pub agent: AgentId,
    pub side: Side,
    pub q_filled: u32,
    pub q_intended: u32,
    /// Limit order modified into an aggressive one.
    #[serde(with = "flag")]
    pub modif: bool,
    /// Prices in ticks.
    pub best_bid: i64,
    pub best_ask: i64,
    pub bid_qty: u32,
    pub ask_qty: u32,
}

impl MarketOrder {
    pub fn validate(&self) -> Result<()> {
        if !(self.t.is_finite() && (0.0..=SESSION_SECONDS).contains(&self.t)) {
            return Err(Error::InvalidOrder(format!("t = {} outside session", self.t)));
        }
        if self.best_ask <= self.best_bid {
            return Err(Error::InvalidOrder(format!(
                "non-positive spread: bid {} ask {}",
                self.best_bid, self.best_ask
            )));
        }
        if self.q_filled == 0 {
            return Err(Error::InvalidOrder("q_filled must be positive".into()));
        }
        if self.q_filled > self.q_intended {
            return Err(Error::InvalidOrder(format!(
                "q_filled {} exceeds q_intended {}",
                self.q_filled, self.q_intended
            )));
        }
        Ok(())
    }

    /// Best-level queue on the side this order consumes (the ask for a buy).
    pub fn same_side_queue(&self) -> u32 {
        match self.side {
            Side::Buy => self.ask_qty,
            Side::Sell => self.bid_qty,
        }
    }

    pub fn opposite_queue(&self) -> u32 {
        match self.side {
            Side::Buy => self.bid_qty,
            Side::Sell => self.ask_qty,
        }
    }

    pub fn spread(&self) -> i64 {
        self.best_ask - self.best_bid
    }

    pub fn mid(&self) -> f64 {
        (self.best_bid + self.best_ask) as f64 / 2.0
    }
}

/// A window of [`WINDOW_LEN`] consecutive orders from one agent on one day.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    agent: AgentId,
    day: u32,
    /// Position of the first order within the agent-day order sequence.
    offset: usize,
    orders: Vec<MarketOrder>,
}

impl Sample {
    pub fn new(orders: Vec<MarketOrder>, offset: usize) -> Result<Self> {
        if orders.len() != WINDOW_LEN {
            return Err(Error::InvalidSample(format!(
                "expected {WINDOW_LEN} orders, got {}",
                orders.len()
            )));
        }
        let (agent, day) = (orders[0].agent, orders[0].day);
        for pair in orders.windows(2) {
            if pair[1].t < pair[0].t {
                return Err(Error::InvalidSample("timestamps decrease".into()));
            }
        }
        for o in &orders {
            if o.agent != agent || o.day != day {
                return Err(Error::InvalidSample("orders span several agents or days".into()));
            }
            o.validate()?;
        }
        Ok(Sample { agent, day, offset, orders })
    }

    pub fn agent(&self) -> AgentId {
        self.agent
    }

    pub fn day(&self) -> u32 {
        self.day
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn orders(&self) -> &[MarketOrder] {
        &self.orders
    }

    pub fn start_time(&self) -> f64 {
        self.orders[0].t
    }

    /// True when both windows contain at least one common order.
    pub fn shares_orders_with(&self, other: &Sample) -> bool {
        self.agent == other.agent
            && self.day == other.day
            && self.offset < other.offset + WINDOW_LEN
            && other.offset < self.offset + WINDOW_LEN
    }
}

/// Cuts one agent-day order sequence into windows starting every `stride` orders.
pub fn build_windows(orders: &[MarketOrder], stride: usize) -> Result<Vec<Sample>> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    if orders.len() < WINDOW_LEN {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity((orders.len() - WINDOW_LEN) / stride + 1);
    let mut start = 0;
    while start + WINDOW_LEN <= orders.len() {
        out.push(Sample::new(orders[start..start + WINDOW_LEN].to_vec(), start)?);
        start += stride;
    }
    Ok(out)
}

/// Splits a mixed log into per-(agent, day) sequences, keeping file order within each.
pub fn group_by_agent_day(orders: &[MarketOrder]) -> BTreeMap<(AgentId, u32), Vec<MarketOrder>> {
    let mut groups: BTreeMap<(AgentId, u32), Vec<MarketOrder>> = BTreeMap::new();
    for o in orders {
        groups.entry((o.agent, o.day)).or_default().push(o.clone());
    }
    groups
}

/// Windows for a whole log, ordered by (agent, day, offset). The position in the
/// returned vector is the sample id used by every downstream file.
pub fn windows_for_log(orders: &[MarketOrder], stride: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (_, seq) in group_by_agent_day(orders) {
        out.extend(build_windows(&seq, stride)?);
    }
    Ok(out)
}

pub fn write_orders<W: Write>(w: W, orders: &[MarketOrder]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for o in orders {
        wtr.serialize(o)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_orders<R: Read>(r: R) -> Result<Vec<MarketOrder>> {
    let mut rdr = csv::Reader::from_reader(r);
    let expected = [
        "day", "t", "agent", "side", "q_filled", "q_intended", "modif", "best_bid", "best_ask",
        "bid_qty", "ask_qty",
    ];
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::InvalidOrder(format!("unexpected header {:?}", headers)));
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let o: MarketOrder = rec?;
        o.validate()?;
        out.push(o);
    }
    Ok(out)
}

pub fn write_orders_file(path: &Path, orders: &[MarketOrder]) -> Result<()> {
    write_orders(std::io::BufWriter::new(std::fs::File::create(path)?), orders)
}

pub fn read_orders_file(path: &Path) -> Result<Vec<MarketOrder>> {
    read_orders(std::io::BufReader::new(std::fs::File::open(path)?)).map_err(|e| match e {
        Error::Io(_) => e,
        other => Error::Malformed { path: path.to_owned(), msg: other.to_string() },
    })
}
