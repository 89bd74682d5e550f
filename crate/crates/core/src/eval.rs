//! Failure rate of an encoder on held-out triplets, globally and per anchor agent.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::nn::{sq_dist, Embedding};
use crate::order::AgentId;
use crate::triplets::Triplet;

/// z for a two-sided 95% normal interval.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCount {
    pub triplets: usize,
    /// Negative strictly closer to the anchor than the positive.
    pub failures: usize,
    /// Negative and positive exactly equidistant (counted as non-failures).
    pub ties: usize,
}

impl FailureCount {
    pub fn rate(&self) -> f64 {
        if self.triplets == 0 {
            return 0.0;
        }
        self.failures as f64 / self.triplets as f64
    }

    /// Half-width of the 95% normal-approximation binomial interval around [`rate`](Self::rate).
    pub fn ci_half_width(&self) -> f64 {
        binomial_half_width(self.rate(), self.triplets)
    }

    fn add(&mut self, other: FailureCount) {
        self.triplets += other.triplets;
        self.failures += other.failures;
        self.ties += other.ties;
    }
}

pub fn binomial_half_width(rate: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    Z95 * (rate * (1.0 - rate) / n as f64).sqrt()
}

fn outcome(emb: &[Embedding], t: &Triplet) -> Result<FailureCount> {
    let get = |i: usize| {
        emb.get(i).ok_or_else(|| Error::Shape(format!("no embedding for index {i}")))
    };
    let (a, p, n) = (get(t.anchor)?, get(t.positive)?, get(t.negative)?);
    if a.dim() != p.dim() || a.dim() != n.dim() {
        return Err(Error::Shape("embedding dimensions differ".into()));
    }
    let (dp, dn) = (sq_dist(&a.0, &p.0), sq_dist(&a.0, &n.0));
    Ok(FailureCount { triplets: 1, failures: usize::from(dn < dp), ties: usize::from(dn == dp) })
}

/// Counts triplets whose negative embeds strictly closer to the anchor than the positive.
/// Triplet indices refer to positions in `emb`.
pub fn failure_rate(emb: &[Embedding], triplets: &[Triplet]) -> Result<FailureCount> {
    if triplets.is_empty() {
        return Err(Error::Empty("no test triplets".into()));
    }
    let mut total = FailureCount::default();
    for t in triplets {
        total.add(outcome(emb, t)?);
    }
    Ok(total)
}

/// Failure counts conditional on the anchor's agent. `agents[i]` labels `emb[i]`.
pub fn failure_rate_per_agent(
    emb: &[Embedding],
    agents: &[AgentId],
    triplets: &[Triplet],
) -> Result<BTreeMap<AgentId, FailureCount>> {
    let mut out: BTreeMap<AgentId, FailureCount> = BTreeMap::new();
    for t in triplets {
        let agent = *agents
            .get(t.anchor)
            .ok_or_else(|| Error::Shape(format!("no agent label for index {}", t.anchor)))?;
        out.entry(agent).or_default().add(outcome(emb, t)?);
    }
    Ok(out)
}

/// The distinct sample ids a triplet list touches, and the list rewritten to index into them.
pub fn compact(triplets: &[Triplet]) -> (Vec<usize>, Vec<Triplet>) {
    let ids: Vec<usize> = triplets
        .iter()
        .flat_map(|t| [t.anchor, t.positive, t.negative])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pos = |id: usize| ids.binary_search(&id).expect("id collected above");
    let remapped = triplets
        .iter()
        .map(|t| Triplet { anchor: pos(t.anchor), positive: pos(t.positive), negative: pos(t.negative) })
        .collect();
    (ids, remapped)
}

/// One row of the evaluation report; `agent` is `None` for the global row.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub feature_set: FeatureSet,
    pub agent: Option<AgentId>,
    pub count: FailureCount,
}

pub fn report_rows(
    fs: FeatureSet,
    global: FailureCount,
    per_agent: &BTreeMap<AgentId, FailureCount>,
) -> Vec<ReportRow> {
    let mut rows = vec![ReportRow { feature_set: fs, agent: None, count: global }];
    rows.extend(per_agent.iter().map(|(&a, &c)| ReportRow { feature_set: fs, agent: Some(a), count: c }));
    rows
}

/// CSV with header `feature_set,agent,n_anchors,failure_rate,ties`.
pub fn write_report<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["feature_set", "agent", "n_anchors", "failure_rate", "ties"])?;
    for r in rows {
        let agent = r.agent.map_or_else(|| "ALL".to_string(), |a| a.to_string());
        wtr.write_record([
            r.feature_set.label().to_string(),
            agent,
            r.count.triplets.to_string(),
            format!("{:.6}", r.count.rate()),
            r.count.ties.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
