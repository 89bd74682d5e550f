//! Synthetic multi-agent market-order flow with labeled behavioral archetypes.
//!
//! Agents do not interact. Each trading day has one shared best-bid path (a lazy random
//! walk on a one-second grid); every agent draws its own trades against it. Archetype
//! parameters map one-to-one onto the indicator axes, so clusters have a known answer.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Geometric, LogNormal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::order::{AgentId, MarketOrder, Side, SESSION_SECONDS};
use crate::rng::seeded;

/// Orders every agent emits on each active day, whatever its rate.
pub const MIN_DAILY_ORDERS: usize = 200;

const BASE_PRICE: i64 = 9_000;
const PRICE_MOVE_PROB: f64 = 0.05;
const QUEUE_SIGMA: f64 = 0.5;
const FILL_CONCENTRATION: f64 = 8.0;
/// Per-order regime flip probability for a fully unbiased agent.
const BASE_FLIP_PROB: f64 = 0.05;

const TAG_PRICE: u64 = 1;
const TAG_ORDERS: u64 = 2;
const TAG_PASSIVE: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionPhase {
    pub start: f64,
    pub end: f64,
}

impl SessionPhase {
    pub const MORNING: SessionPhase = SessionPhase { start: 0.0, end: 4.0 * 3600.0 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentArchetype {
    pub name: String,
    /// Mean trades per minute while active.
    pub trade_rate: f64,
    /// Mean intended order size.
    pub size_mean: f64,
    /// Mean of `q_filled / q_intended`.
    pub fill_ratio_mean: f64,
    /// Share of orders that follow the current directional regime; the rest are coin flips.
    pub direction_bias: f64,
    pub modif_prob: f64,
    /// Mean spread in ticks at the agent's trades.
    pub spread_regime: f64,
    /// Mean best-level queue size before queue reaction.
    pub queue_scale: f64,
    /// Opposite-side queue scale relative to `queue_scale`.
    pub impatience: f64,
    #[serde(default)]
    pub session_phase: Option<SessionPhase>,
    /// Mean passive fills per aggressive trade.
    #[serde(default)]
    pub passive_ratio: f64,
}

impl AgentArchetype {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("archetype {}: {what}", self.name)));
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !pos(self.trade_rate) {
            return bad("trade_rate must be > 0");
        }
        if !(self.size_mean.is_finite() && self.size_mean >= 1.0) {
            return bad("size_mean must be >= 1");
        }
        if !(self.fill_ratio_mean > 0.0 && self.fill_ratio_mean <= 1.0) {
            return bad("fill_ratio_mean must be in (0, 1]");
        }
        if !unit(self.direction_bias) || !unit(self.modif_prob) {
            return bad("direction_bias and modif_prob must be in [0, 1]");
        }
        if !(self.spread_regime.is_finite() && self.spread_regime >= 1.0) {
            return bad("spread_regime must be >= 1");
        }
        if !pos(self.queue_scale) || !pos(self.impatience) {
            return bad("queue_scale and impatience must be > 0");
        }
        if !(self.passive_ratio.is_finite() && self.passive_ratio >= 0.0) {
            return bad("passive_ratio must be >= 0");
        }
        if let Some(ph) = self.session_phase {
            if !(0.0 <= ph.start && ph.start < ph.end && ph.end <= SESSION_SECONDS) {
                return bad("session_phase must lie inside the session");
            }
        }
        Ok(())
    }

    fn active_window(&self) -> (f64, f64) {
        self.session_phase.map_or((0.0, SESSION_SECONDS), |p| (p.start, p.end))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSwitch {
    /// First day on which the new archetype applies.
    pub day: u32,
    pub archetype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: AgentId,
    pub archetype: String,
    #[serde(default)]
    pub switch: Option<RegimeSwitch>,
}

/// Prices are integer ticks (tick size 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub n_days: u32,
    pub seed: u64,
    pub archetypes: Vec<AgentArchetype>,
    pub agents: Vec<AgentSpec>,
}

/// One resting limit order of the agent filled by someone else's market order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassiveFill {
    pub day: u32,
    pub t: f64,
    pub agent: AgentId,
    pub side: Side,
    pub qty: u32,
}

pub fn default_archetypes() -> Vec<AgentArchetype> {
    let a = |name: &str,
             trade_rate,
             size_mean,
             fill_ratio_mean,
             direction_bias,
             modif_prob,
             spread_regime,
             queue_scale,
             impatience,
             session_phase,
             passive_ratio| AgentArchetype {
        name: name.to_string(),
        trade_rate,
        size_mean,
        fill_ratio_mean,
        direction_bias,
        modif_prob,
        spread_regime,
        queue_scale,
        impatience,
        session_phase,
        passive_ratio,
    };
    vec![
        a("fast_taker", 6.0, 2.0, 0.95, 0.2, 0.05, 1.0, 30.0, 1.0, None, 0.3),
        a("market_maker", 1.5, 3.0, 0.9, 0.1, 0.6, 1.3, 20.0, 3.0, None, 4.0),
        a("directional", 1.0, 10.0, 0.7, 0.95, 0.1, 1.6, 15.0, 1.0, None, 0.2),
        a("block_trader", 0.6, 40.0, 0.5, 0.6, 0.05, 2.5, 60.0, 1.0, None, 0.1),
        a("morning_scalper", 2.5, 5.0, 0.85, 0.4, 0.3, 1.0, 10.0, 0.5, Some(SessionPhase::MORNING), 1.0),
        a("queue_sniper", 2.0, 4.0, 1.0, 0.3, 0.9, 1.0, 5.0, 6.0, None, 0.5),
    ]
}

impl MarketConfig {
    /// `n_agents` agents assigned round-robin over the six default archetypes, ids from 1.
    pub fn preset(n_agents: u32, n_days: u32, seed: u64) -> Self {
        let archetypes = default_archetypes();
        let agents = (0..n_agents)
            .map(|i| AgentSpec {
                id: AgentId(i + 1),
                archetype: archetypes[i as usize % archetypes.len()].name.clone(),
                switch: None,
            })
            .collect();
        MarketConfig { n_days, seed, archetypes, agents }
    }

    pub fn with_switch(mut self, agent: AgentId, day: u32, archetype: &str) -> Result<Self> {
        let spec = self
            .agents
            .iter_mut()
            .find(|a| a.id == agent)
            .ok_or(Error::UnknownAgent(agent.0))?;
        spec.switch = Some(RegimeSwitch { day, archetype: archetype.to_string() });
        self.validate()?;
        Ok(self)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: MarketConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("market config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_days == 0 {
            return Err(Error::Config("n_days must be >= 1".into()));
        }
        let mut names = HashSet::new();
        for a in &self.archetypes {
            a.validate()?;
            if !names.insert(a.name.as_str()) {
                return Err(Error::Config(format!("duplicate archetype {}", a.name)));
            }
        }
        let mut ids = HashSet::new();
        for s in &self.agents {
            if !ids.insert(s.id) {
                return Err(Error::Config(format!("duplicate agent id {}", s.id)));
            }
            let known = |n: &str| names.contains(n);
            if !known(&s.archetype) || s.switch.as_ref().is_some_and(|w| !known(&w.archetype)) {
                return Err(Error::Config(format!("agent {}: unknown archetype", s.id)));
            }
        }
        Ok(())
    }

    fn archetype(&self, name: &str) -> &AgentArchetype {
        self.archetypes.iter().find(|a| a.name == name).expect("validated archetype name")
    }

    /// Archetype name driving `agent` on `day` (ground-truth label).
    pub fn archetype_of(&self, agent: AgentId, day: u32) -> Option<&str> {
        let spec = self.agents.iter().find(|a| a.id == agent)?;
        Some(match &spec.switch {
            Some(w) if day >= w.day => w.archetype.as_str(),
            _ => spec.archetype.as_str(),
        })
    }
}

/// Best bid per second of one day.
fn price_path(seed: u64, day: u32) -> Vec<i64> {
    let mut rng = seeded(seed, &[TAG_PRICE, u64::from(day)]);
    let mut p = BASE_PRICE;
    (0..=SESSION_SECONDS as usize)
        .map(|_| {
            if rng.gen_bool(PRICE_MOVE_PROB) {
                p += if rng.gen_bool(0.5) { 1 } else { -1 };
            }
            p
        })
        .collect()
}

fn lognormal_with_mean(mean: f64) -> LogNormal<f64> {
    LogNormal::new(mean.ln() - QUEUE_SIGMA * QUEUE_SIGMA / 2.0, QUEUE_SIGMA).expect("valid lognormal")
}

fn sorted_uniform_times(rng: &mut ChaCha8Rng, n: usize, (start, end): (f64, f64)) -> Vec<f64> {
    let mut ts: Vec<f64> = (0..n).map(|_| rng.gen_range(start..=end)).collect();
    ts.sort_by(f64::total_cmp);
    ts
}

/// Conditional on its count, a Poisson process is a sorted uniform sample, so drawing the
/// count first lets the daily floor be enforced without distorting the gaps much.
fn agent_day(seed: u64, agent: AgentId, day: u32, arch: &AgentArchetype, prices: &[i64]) -> Vec<MarketOrder> {
    let mut rng = seeded(seed, &[TAG_ORDERS, u64::from(agent.0), u64::from(day)]);
    let window = arch.active_window();
    let expected = arch.trade_rate * (window.1 - window.0) / 60.0;
    let drawn = Poisson::new(expected).expect("positive rate").sample(&mut rng) as usize;
    let n = drawn.max(MIN_DAILY_ORDERS);
    let times = sorted_uniform_times(&mut rng, n, window);

    let size = Geometric::new(1.0 / arch.size_mean).expect("size_mean >= 1");
    let fill = (arch.fill_ratio_mean < 1.0).then(|| {
        let m = arch.fill_ratio_mean;
        Beta::new(FILL_CONCENTRATION * m, FILL_CONCENTRATION * (1.0 - m)).expect("valid beta")
    });
    let extra_spread = (arch.spread_regime > 1.0)
        .then(|| Poisson::new(arch.spread_regime - 1.0).expect("positive mean"));
    // Fast agents fire into thinner same-side queues.
    let same_queue = lognormal_with_mean(arch.queue_scale / (1.0 + arch.trade_rate / 10.0));
    let opp_queue = lognormal_with_mean(arch.queue_scale * arch.impatience);
    let flip_prob = BASE_FLIP_PROB * (1.0 - arch.direction_bias);

    let mut regime = if rng.gen_bool(0.5) { Side::Buy } else { Side::Sell };
    times
        .into_iter()
        .map(|t| {
            if rng.gen_bool(flip_prob) {
                regime = regime.opposite();
            }
            let side = if rng.gen_bool(arch.direction_bias) {
                regime
            } else if rng.gen_bool(0.5) {
                Side::Buy
            } else {
                Side::Sell
            };
            let q_intended = 1 + size.sample(&mut rng) as u32;
            let q_filled = match &fill {
                None => q_intended,
                Some(beta) => {
                    let rho: f64 = beta.sample(&mut rng);
                    ((rho * f64::from(q_intended)).round() as u32).clamp(1, q_intended)
                }
            };
            let spread = 1 + extra_spread.as_ref().map_or(0, |p| p.sample(&mut rng) as i64);
            let best_bid = prices[t as usize];
            let same = (same_queue.sample(&mut rng).round() as u32).max(1);
            let opp = (opp_queue.sample(&mut rng).round() as u32).max(1);
            let (bid_qty, ask_qty) = match side {
                Side::Buy => (opp, same),
                Side::Sell => (same, opp),
            };
            let modif = rng.gen_bool(arch.modif_prob);
            MarketOrder {
                day,
                t,
                agent,
                side,
                q_filled,
                q_intended,
                modif,
                best_bid,
                best_ask: best_bid + spread,
                bid_qty,
                ask_qty,
            }
        })
        .collect()
}

fn day_orders(config: &MarketConfig, day: u32) -> Vec<MarketOrder> {
    let prices = price_path(config.seed, day);
    let mut out: Vec<MarketOrder> = config
        .agents
        .iter()
        .flat_map(|spec| {
            let arch = config.archetype(config.archetype_of(spec.id, day).expect("listed agent"));
            agent_day(config.seed, spec.id, day, arch, &prices)
        })
        .collect();
    out.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.agent.cmp(&b.agent)));
    out
}

/// Aggressive order log sorted by (day, t, agent). Days are generated in parallel from
/// independent sub-seeds, so the result does not depend on the thread count.
pub fn generate(config: &MarketConfig) -> Result<Vec<MarketOrder>> {
    config.validate()?;
    let days: Vec<Vec<MarketOrder>> =
        (0..config.n_days).into_par_iter().map(|day| day_orders(config, day)).collect();
    Ok(days.into_iter().flatten().collect())
}

/// Passive fills consistent with `orders` (as produced by [`generate`] for `config`).
pub fn generate_passive(config: &MarketConfig, orders: &[MarketOrder]) -> Result<Vec<PassiveFill>> {
    config.validate()?;
    let mut counts: BTreeMap<(u32, AgentId), usize> = BTreeMap::new();
    for o in orders {
        *counts.entry((o.day, o.agent)).or_default() += 1;
    }
    let mut out = Vec::new();
    for (&(day, agent), &aggressive) in &counts {
        let name = config.archetype_of(agent, day).ok_or(Error::UnknownAgent(agent.0))?;
        let arch = config.archetype(name);
        if arch.passive_ratio == 0.0 {
            continue;
        }
        let mut rng = seeded(config.seed, &[TAG_PASSIVE, u64::from(agent.0), u64::from(day)]);
        let mean = arch.passive_ratio * aggressive as f64;
        let n = Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize;
        let size = Geometric::new(1.0 / arch.size_mean).expect("size_mean >= 1");
        for t in sorted_uniform_times(&mut rng, n, arch.active_window()) {
            let side = if rng.gen_bool(0.5) { Side::Buy } else { Side::Sell };
            let qty = 1 + size.sample(&mut rng) as u32;
            out.push(PassiveFill { day, t, agent, side, qty });
        }
    }
    out.sort_by(|a, b| a.day.cmp(&b.day).then(a.t.total_cmp(&b.t)).then(a.agent.cmp(&b.agent)));
    Ok(out)
}

/// Agents with at least `min_orders_per_day` orders on more than `min_days` distinct days.
pub fn select_active_agents(
    orders: &[MarketOrder],
    min_orders_per_day: usize,
    min_days: usize,
) -> BTreeSet<AgentId> {
    let mut per_day: BTreeMap<(AgentId, u32), usize> = BTreeMap::new();
    for o in orders {
        *per_day.entry((o.agent, o.day)).or_default() += 1;
    }
    let mut qualifying: BTreeMap<AgentId, usize> = BTreeMap::new();
    for (&(agent, _), &n) in &per_day {
        if n >= min_orders_per_day {
            *qualifying.entry(agent).or_default() += 1;
        }
    }
    qualifying.into_iter().filter(|&(_, d)| d > min_days).map(|(a, _)| a).collect()
}

pub fn write_passive<W: std::io::Write>(w: W, fills: &[PassiveFill]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for f in fills {
        wtr.serialize(f)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_passive<R: std::io::Read>(r: R) -> Result<Vec<PassiveFill>> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::order::windows_for_log;

    fn single(rate: f64) -> MarketConfig {
        let mut arch = default_archetypes().remove(0);
        arch.trade_rate = rate;
        MarketConfig {
            n_days: 1,
            seed: 3,
            agents: vec![AgentSpec { id: AgentId(1), archetype: arch.name.clone(), switch: None }],
            archetypes: vec![arch],
        }
    }

    #[test]
    fn slow_agent_meets_daily_floor() {
        let orders = generate(&single(200.0 / 480.0)).unwrap();
        assert!(orders.len() >= 200);
        assert!(orders.iter().all(|o| o.agent == AgentId(1)));
    }

    #[test]
    fn deterministic() {
        let cfg = MarketConfig::preset(6, 2, 11);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn thread_count_does_not_matter() {
        let cfg = MarketConfig::preset(6, 3, 5);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        assert_eq!(one.install(|| generate(&cfg)).unwrap(), four.install(|| generate(&cfg)).unwrap());
    }

    #[test]
    fn full_bias_gives_one_sided_windows() {
        let mut cfg = single(2.0);
        cfg.archetypes[0].direction_bias = 1.0;
        cfg.n_days = 3;
        let orders = generate(&cfg).unwrap();
        for w in windows_for_log(&orders, 50).unwrap() {
            let first = w.orders()[0].side;
            assert!(w.orders().iter().all(|o| o.side == first));
        }
    }

    #[test]
    fn generated_orders_are_valid_and_sorted() {
        let cfg = MarketConfig::preset(12, 2, 1);
        let orders = generate(&cfg).unwrap();
        for o in &orders {
            o.validate().unwrap();
        }
        for w in orders.windows(2) {
            assert!((w[0].day, w[0].t) <= (w[1].day, w[1].t));
        }
        let active = select_active_agents(&orders, MIN_DAILY_ORDERS, 1);
        assert_eq!(active.len(), 12);
    }

    #[test]
    fn morning_phase_respected() {
        let cfg = MarketConfig::preset(6, 1, 2);
        let orders = generate(&cfg).unwrap();
        let scalper = AgentId(5);
        assert!(orders.iter().filter(|o| o.agent == scalper).all(|o| o.t <= 4.0 * 3600.0));
    }

    #[test]
    fn selection_rule() {
        let mk = |agent: u32, day: u32, n: usize| {
            (0..n).map(move |i| {
                let mut o = crate::order::tests::order(agent, day, i as f64);
                o.agent = AgentId(agent);
                o
            })
        };
        let mut orders = Vec::new();
        for day in 0..46 {
            orders.extend(mk(1, day, 200));
            orders.extend(mk(2, day, 199));
        }
        let sel = select_active_agents(&orders, 200, 45);
        assert_eq!(sel, BTreeSet::from([AgentId(1)]));
        // 45 qualifying days is not "more than 45".
        let fewer: Vec<MarketOrder> = orders.iter().filter(|o| o.day < 45).cloned().collect();
        assert!(select_active_agents(&fewer, 200, 45).is_empty());
        assert!(select_active_agents(&[], 200, 45).is_empty());
    }

    #[test]
    fn invalid_archetype_rejected() {
        let mut cfg = single(1.0);
        cfg.archetypes[0].fill_ratio_mean = 0.0;
        assert!(generate(&cfg).is_err());
        let mut cfg = single(1.0);
        cfg.archetypes[0].trade_rate = -1.0;
        assert!(generate(&cfg).is_err());
        let mut cfg = single(1.0);
        cfg.agents.push(cfg.agents[0].clone());
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn regime_switch_labels() {
        let cfg = MarketConfig::preset(6, 10, 1).with_switch(AgentId(3), 5, "fast_taker").unwrap();
        assert_eq!(cfg.archetype_of(AgentId(3), 4), Some("directional"));
        assert_eq!(cfg.archetype_of(AgentId(3), 5), Some("fast_taker"));
        assert_eq!(cfg.archetype_of(AgentId(99), 5), None);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = MarketConfig::preset(4, 3, 9).with_switch(AgentId(2), 1, "block_trader").unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(MarketConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn passive_fills_follow_ratio() {
        let cfg = MarketConfig::preset(6, 2, 4);
        let orders = generate(&cfg).unwrap();
        let fills = generate_passive(&cfg, &orders).unwrap();
        let count = |a: u32| fills.iter().filter(|f| f.agent == AgentId(a)).count() as f64;
        let aggressive = |a: u32| orders.iter().filter(|o| o.agent == AgentId(a)).count() as f64;
        let mm = count(2) / aggressive(2);
        assert!((mm - 4.0).abs() < 0.3, "{mm}");
        let mut buf = Vec::new();
        write_passive(&mut buf, &fills).unwrap();
        assert_eq!(read_passive(buf.as_slice()).unwrap(), fills);
    }
}
