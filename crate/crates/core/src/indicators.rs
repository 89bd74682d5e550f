//! Behavioral indicators of a window and their quantile summaries per cluster and agent.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::order::{AgentId, MarketOrder, Sample, SESSION_SECONDS, WINDOW_LEN};
use crate::synth::PassiveFill;

pub const INDICATOR_NAMES: [&str; 11] = [
    "frequency",
    "order_size",
    "trade_size",
    "fill_rate",
    "spread",
    "qs",
    "opp_qs",
    "rqs",
    "opp_rqs",
    "direction",
    "modif_frac",
];

/// Session opens at 9:00.
pub const SESSION_OPEN_HOUR: u32 = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSet {
    /// Trades per minute.
    pub frequency: f64,
    /// Mean intended size.
    pub order_size: f64,
    /// Mean executed size.
    pub trade_size: f64,
    pub fill_rate: f64,
    /// Mean spread in ticks.
    pub spread: f64,
    /// Mean best queue on the side the order consumes.
    pub qs: f64,
    pub opp_qs: f64,
    /// Mean same-side queue relative to the trade size.
    pub rqs: f64,
    pub opp_rqs: f64,
    /// 1 when every order is on one side, 0 when signed volume balances.
    pub direction: f64,
    pub modif_frac: f64,
}

impl IndicatorSet {
    pub fn values(&self) -> [f64; 11] {
        [
            self.frequency,
            self.order_size,
            self.trade_size,
            self.fill_rate,
            self.spread,
            self.qs,
            self.opp_qs,
            self.rqs,
            self.opp_rqs,
            self.direction,
            self.modif_frac,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("indicator".into()));
        }
        let unit = 0.0..=1.0;
        if !(self.fill_rate > 0.0 && self.fill_rate <= 1.0)
            || !unit.contains(&self.direction)
            || !unit.contains(&self.modif_frac)
        {
            return Err(Error::InvalidSample(format!("indicator out of range: {self:?}")));
        }
        Ok(())
    }
}

pub fn indicators(sample: &Sample) -> Result<IndicatorSet> {
    let o = sample.orders();
    let span = o[WINDOW_LEN - 1].t - o[0].t;
    if span <= 0.0 {
        return Err(Error::Degenerate("all orders of the window share one timestamp".into()));
    }
    let n = WINDOW_LEN as f64;
    let mut acc = [0.0f64; 9];
    let mut signed = 0.0;
    for m in o {
        let q = f64::from(m.q_filled);
        let (qs, opp) = (f64::from(m.same_side_queue()), f64::from(m.opposite_queue()));
        acc[0] += f64::from(m.q_intended);
        acc[1] += q;
        acc[2] += m.spread() as f64;
        acc[3] += qs;
        acc[4] += opp;
        acc[5] += qs / q;
        acc[6] += opp / q;
        acc[7] += f64::from(u8::from(m.modif));
        acc[8] += q;
        signed += q * m.side.sign();
    }
    let dt = span / (n - 1.0);
    let set = IndicatorSet {
        frequency: 60.0 / dt,
        order_size: acc[0] / n,
        trade_size: acc[1] / n,
        fill_rate: acc[1] / acc[0],
        spread: acc[2] / n,
        qs: acc[3] / n,
        opp_qs: acc[4] / n,
        rqs: acc[5] / n,
        opp_rqs: acc[6] / n,
        direction: signed.abs() / acc[8],
        modif_frac: acc[7] / n,
    };
    set.validate()?;
    Ok(set)
}

/// Linear interpolation between closest ranks on sorted data (`q` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn quartiles_in_place(values: &mut [f64]) -> [f64; 3] {
    values.sort_by(f64::total_cmp);
    [quantile_sorted(values, 0.25), quantile_sorted(values, 0.5), quantile_sorted(values, 0.75)]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rating {
    None,
    Low,
    Mid,
    High,
}

impl Rating {
    pub fn symbol(self) -> &'static str {
        match self {
            Rating::None => "none",
            Rating::Low => "+",
            Rating::Mid => "++",
            Rating::High => "+++",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub cluster: usize,
    pub n: usize,
    /// 25th, 50th and 75th percentile of each indicator, in [`INDICATOR_NAMES`] order.
    pub quartiles: [[f64; 3]; 11],
}

fn summarize(sets: &[IndicatorSet], labels: &[usize]) -> Result<Vec<GroupSummary>> {
    if sets.len() != labels.len() {
        return Err(Error::Shape("indicator and label lists differ in length".into()));
    }
    let mut groups: BTreeMap<usize, Vec<&IndicatorSet>> = BTreeMap::new();
    for (s, &l) in sets.iter().zip(labels) {
        groups.entry(l).or_default().push(s);
    }
    Ok(groups
        .into_iter()
        .map(|(cluster, members)| {
            let mut quartiles = [[0.0; 3]; 11];
            for (j, q) in quartiles.iter_mut().enumerate() {
                let mut col: Vec<f64> = members.iter().map(|s| s.values()[j]).collect();
                *q = quartiles_in_place(&mut col);
            }
            GroupSummary { cluster, n: members.len(), quartiles }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSummary {
    pub groups: Vec<GroupSummary>,
    /// Per group and indicator: the tercile of its median among all group medians.
    pub ratings: Vec<[Rating; 11]>,
}

/// Rates each median against the 1/3 and 2/3 quantiles of all medians; values on a
/// boundary take the lower rating and zero medians are rated `None`.
pub fn rate(medians: &[f64]) -> Vec<Rating> {
    let mut sorted = medians.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (b1, b2) = (quantile_sorted(&sorted, 1.0 / 3.0), quantile_sorted(&sorted, 2.0 / 3.0));
    medians
        .iter()
        .map(|&m| {
            if m == 0.0 {
                Rating::None
            } else if m <= b1 {
                Rating::Low
            } else if m <= b2 {
                Rating::Mid
            } else {
                Rating::High
            }
        })
        .collect()
}

/// Quartiles of every indicator per cluster, plus tercile ratings of the medians.
/// Clusters without members do not appear.
pub fn cluster_summary(sets: &[IndicatorSet], labels: &[usize]) -> Result<ClusterSummary> {
    let groups = summarize(sets, labels)?;
    let mut ratings = vec![[Rating::None; 11]; groups.len()];
    if !groups.is_empty() {
        for j in 0..11 {
            let medians: Vec<f64> = groups.iter().map(|g| g.quartiles[j][1]).collect();
            for (r, rating) in ratings.iter_mut().zip(rate(&medians)) {
                r[j] = rating;
            }
        }
    }
    Ok(ClusterSummary { groups, ratings })
}

/// Per-sample context needed for agent profiles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleInfo {
    pub sample_id: usize,
    pub agent: AgentId,
    pub day: u32,
    pub start_time: f64,
}

impl SampleInfo {
    pub fn of(sample_id: usize, s: &Sample) -> Self {
        SampleInfo { sample_id, agent: s.agent(), day: s.day(), start_time: s.start_time() }
    }

    /// Clock hour (9..=16) in which the window starts.
    pub fn hour(&self) -> u32 {
        let h = (self.start_time / 3600.0).floor() as u32;
        SESSION_OPEN_HOUR + h.min((SESSION_SECONDS / 3600.0) as u32 - 1)
    }

    /// Fractional clock time of the window start, e.g. 10.5 for 10:30.
    pub fn clock(&self) -> f64 {
        f64::from(SESSION_OPEN_HOUR) + self.start_time / 3600.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentProfile {
    pub agent: AgentId,
    pub groups: Vec<GroupSummary>,
    /// Window counts by (cluster, clock hour).
    pub hours: BTreeMap<(usize, u32), usize>,
    /// (sample id, day, clock time, cluster) of every window of the agent.
    pub timeline: Vec<(usize, u32, f64, usize)>,
}

impl AgentProfile {
    /// Cluster holding the most windows of the agent among those passing `keep`
    /// (ties go to the lower cluster index).
    pub fn dominant_cluster(&self, keep: impl Fn(u32) -> bool) -> Option<usize> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &(_, day, _, c) in &self.timeline {
            if keep(day) {
                *counts.entry(c).or_default() += 1;
            }
        }
        counts.into_iter().fold(None, |best: Option<(usize, usize)>, (c, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((c, n)),
        })
        .map(|(c, _)| c)
    }

    /// Share of the agent's windows starting before the given clock hour.
    pub fn share_before(&self, hour: u32) -> f64 {
        let total: usize = self.hours.values().sum();
        let early: usize = self.hours.iter().filter(|((_, h), _)| *h < hour).map(|(_, n)| n).sum();
        early as f64 / total as f64
    }
}

pub fn agent_profile(
    agent: AgentId,
    sets: &[IndicatorSet],
    labels: &[usize],
    info: &[SampleInfo],
) -> Result<AgentProfile> {
    if sets.len() != labels.len() || sets.len() != info.len() {
        return Err(Error::Shape("indicator, label and sample lists differ in length".into()));
    }
    let mine: Vec<usize> = (0..info.len()).filter(|&i| info[i].agent == agent).collect();
    if mine.is_empty() {
        return Err(Error::UnknownAgent(agent.0));
    }
    let sub_sets: Vec<IndicatorSet> = mine.iter().map(|&i| sets[i]).collect();
    let sub_labels: Vec<usize> = mine.iter().map(|&i| labels[i]).collect();
    let groups = summarize(&sub_sets, &sub_labels)?;
    let mut hours = BTreeMap::new();
    let mut timeline = Vec::with_capacity(mine.len());
    for &i in &mine {
        *hours.entry((labels[i], info[i].hour())).or_default() += 1;
        timeline.push((info[i].sample_id, info[i].day, info[i].clock(), labels[i]));
    }
    Ok(AgentProfile { agent, groups, hours, timeline })
}

/// Passive fills per aggressive order for one agent.
pub fn passive_aggressive_ratio(orders: &[MarketOrder], passive: &[PassiveFill], agent: AgentId) -> Result<f64> {
    let aggressive = orders.iter().filter(|o| o.agent == agent).count();
    if aggressive == 0 {
        return Err(Error::Degenerate(format!("agent {agent} has no aggressive trades")));
    }
    let p = passive.iter().filter(|f| f.agent == agent).count();
    Ok(p as f64 / aggressive as f64)
}

/// `sample_id,agent,cluster,<indicators>`.
pub fn write_indicators<W: Write>(
    w: W,
    info: &[SampleInfo],
    labels: &[usize],
    sets: &[IndicatorSet],
) -> Result<()> {
    if info.len() != labels.len() || info.len() != sets.len() {
        return Err(Error::Shape("indicator table columns differ in length".into()));
    }
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["sample_id", "agent", "cluster"];
    header.extend(INDICATOR_NAMES);
    wtr.write_record(&header)?;
    for ((i, l), s) in info.iter().zip(labels).zip(sets) {
        let mut rec = vec![i.sample_id.to_string(), i.agent.to_string(), l.to_string()];
        rec.extend(s.values().iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_groups<W: Write>(wtr: &mut csv::Writer<W>, groups: &[GroupSummary], ratings: Option<&[[Rating; 11]]>) -> Result<()> {
    for (gi, g) in groups.iter().enumerate() {
        for (j, name) in INDICATOR_NAMES.iter().enumerate() {
            let [q25, q50, q75] = g.quartiles[j];
            let mut rec = vec![g.cluster.to_string(), g.n.to_string(), name.to_string(), q25.to_string(), q50.to_string(), q75.to_string()];
            if let Some(r) = ratings {
                rec.push(r[gi][j].symbol().to_string());
            }
            wtr.write_record(&rec)?;
        }
    }
    Ok(())
}

/// `cluster,n,indicator,q25,median,q75,rating`.
pub fn write_cluster_summary<W: Write>(w: W, summary: &ClusterSummary) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["cluster", "n", "indicator", "q25", "median", "q75", "rating"])?;
    write_groups(&mut wtr, &summary.groups, Some(&summary.ratings))?;
    wtr.flush()?;
    Ok(())
}

/// `cluster,n,indicator,q25,median,q75` for one agent.
pub fn write_profile_quantiles<W: Write>(w: W, profile: &AgentProfile) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["cluster", "n", "indicator", "q25", "median", "q75"])?;
    write_groups(&mut wtr, &profile.groups, None)?;
    wtr.flush()?;
    Ok(())
}

/// `cluster,hour,count`.
pub fn write_profile_hours<W: Write>(w: W, profile: &AgentProfile) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["cluster", "hour", "count"])?;
    for (&(c, h), n) in &profile.hours {
        wtr.write_record([c.to_string(), h.to_string(), n.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// `sample_id,day,hour,cluster`, hour being fractional clock time.
pub fn write_profile_timeline<W: Write>(w: W, profile: &AgentProfile) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["sample_id", "day", "hour", "cluster"])?;
    for &(id, day, clock, c) in &profile.timeline {
        wtr.write_record([id.to_string(), day.to_string(), clock.to_string(), c.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
