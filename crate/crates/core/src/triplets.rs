//! Day-level train/test splitting and temporally local triplet sampling.
//!
//! Triplets are index triples into a window list. Each index is a sample id: the position
//! of the window in the list produced by [`crate::order::windows_for_log`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::order::{group_by_agent_day, AgentId, MarketOrder, Sample, WINDOW_LEN};
use crate::rng::seeded;

/// Two hours, in seconds.
pub const DEFAULT_HORIZON: f64 = 7200.0;
pub const MIN_DAYS: usize = 5;
const SPLIT_TAG: u64 = 0x5911;
const SAMPLE_TAG: u64 = 0x7419;
/// Triplets drawn from one derived stream; blocks are sampled independently.
const BLOCK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaySplit {
    pub train_days: BTreeSet<u32>,
    pub test_days: BTreeSet<u32>,
}

impl DaySplit {
    pub fn is_train(&self, day: u32) -> bool {
        self.train_days.contains(&day)
    }

    pub fn is_test(&self, day: u32) -> bool {
        self.test_days.contains(&day)
    }
}

/// Randomly assigns days to train and test in the proportion `ratio.0 : ratio.1`.
pub fn split_days(days: &[u32], ratio: (usize, usize), seed: u64) -> Result<DaySplit> {
    let mut unique: Vec<u32> = days.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.len() < MIN_DAYS {
        return Err(Error::Config(format!(
            "need at least {MIN_DAYS} distinct days to split, got {}",
            unique.len()
        )));
    }
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(Error::Config("split ratio parts must be positive".into()));
    }
    let n = unique.len();
    let n_test = ((n * ratio.1) as f64 / (ratio.0 + ratio.1) as f64).round() as usize;
    let n_test = n_test.clamp(1, n - 1);
    unique.shuffle(&mut seeded(seed, &[SPLIT_TAG]));
    let test_days = unique[..n_test].iter().copied().collect();
    let train_days = unique[n_test..].iter().copied().collect();
    Ok(DaySplit { train_days, test_days })
}

/// Sample ids of the windows whose day satisfies `keep`.
pub fn pool_where(windows: &[Sample], keep: impl Fn(u32) -> bool) -> Vec<usize> {
    (0..windows.len()).filter(|&i| keep(windows[i].day())).collect()
}

/// Candidate structure for one anchor: contiguous ranges of sorted id lists.
#[derive(Clone, Copy, Debug)]
struct Candidates {
    /// Range of the agent-day list within the horizon.
    pos: (usize, usize),
    /// Range of that list sharing orders with the anchor (a sub-range of `pos`).
    overlap: (usize, usize),
    /// Range of the day list within the horizon.
    day: (usize, usize),
    /// Windows of the anchor's own agent inside `day`.
    own_in_day: usize,
}

impl Candidates {
    fn positives(&self) -> usize {
        (self.pos.1 - self.pos.0) - (self.overlap.1 - self.overlap.0)
    }

    fn negatives(&self) -> usize {
        (self.day.1 - self.day.0) - self.own_in_day
    }
}

struct Index<'a> {
    windows: &'a [Sample],
    /// Per (agent, day): ids sorted by offset (hence by start time).
    agent_day: HashMap<(AgentId, u32), Vec<usize>>,
    /// Per day: ids sorted by (start time, id).
    by_day: HashMap<u32, Vec<usize>>,
}

impl<'a> Index<'a> {
    fn new(windows: &'a [Sample], pool: &[usize]) -> Result<Self> {
        let mut agent_day: HashMap<(AgentId, u32), Vec<usize>> = HashMap::new();
        let mut by_day: HashMap<u32, Vec<usize>> = HashMap::new();
        for &id in pool {
            let w = windows.get(id).ok_or_else(|| Error::Config(format!("sample id {id} out of range")))?;
            agent_day.entry((w.agent(), w.day())).or_default().push(id);
            by_day.entry(w.day()).or_default().push(id);
        }
        for ids in agent_day.values_mut() {
            ids.sort_by_key(|&i| windows[i].offset());
            ids.dedup();
        }
        for ids in by_day.values_mut() {
            ids.sort_by(|&a, &b| windows[a].start_time().total_cmp(&windows[b].start_time()).then(a.cmp(&b)));
            ids.dedup();
        }
        Ok(Index { windows, agent_day, by_day })
    }

    fn time_range(&self, ids: &[usize], lo: f64, hi: f64) -> (usize, usize) {
        let a = ids.partition_point(|&i| self.windows[i].start_time() < lo);
        let b = ids.partition_point(|&i| self.windows[i].start_time() <= hi);
        (a, b.max(a))
    }

    fn candidates(&self, anchor: usize, horizon: f64) -> Candidates {
        let w = &self.windows[anchor];
        let (lo, hi) = (w.start_time() - horizon, w.start_time() + horizon);
        let own = &self.agent_day[&(w.agent(), w.day())];
        let pos = self.time_range(own, lo, hi);
        let o0 = own.partition_point(|&i| self.windows[i].offset() + WINDOW_LEN <= w.offset());
        let o1 = own.partition_point(|&i| self.windows[i].offset() < w.offset() + WINDOW_LEN);
        // Clipped to `pos`: with a tiny horizon some overlapping windows fall outside it.
        let overlap = (o0.max(pos.0), o1.min(pos.1).max(o0.max(pos.0)));
        let day_ids = &self.by_day[&w.day()];
        let day = self.time_range(day_ids, lo, hi);
        Candidates { pos, overlap, day, own_in_day: pos.1 - pos.0 }
    }
}

/// Draws `count` triplets from the windows listed in `pool`.
///
/// Anchors are uniform over pool windows that have at least one eligible positive and one
/// eligible negative; positive and negative are uniform over their eligible sets.
pub fn sample_triplets(
    windows: &[Sample],
    pool: &[usize],
    horizon: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if !(horizon >= 0.0) {
        return Err(Error::Config(format!("horizon must be non-negative, got {horizon}")));
    }
    let index = Index::new(windows, pool)?;
    let mut anchors: Vec<usize> = index.agent_day.values().flatten().copied().collect();
    anchors.sort_unstable();
    let eligible: Vec<(usize, Candidates)> = anchors
        .into_iter()
        .map(|a| (a, index.candidates(a, horizon)))
        .filter(|(_, c)| c.positives() > 0 && c.negatives() > 0)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Infeasible("no window has both an eligible positive and negative".into()));
    }

    let blocks: Vec<usize> = (0..count.div_ceil(BLOCK)).collect();
    let drawn: Vec<Vec<Triplet>> = blocks
        .par_iter()
        .map(|&b| {
            let mut rng = seeded(seed, &[SAMPLE_TAG, b as u64]);
            let n = BLOCK.min(count - b * BLOCK);
            (0..n)
                .map(|_| {
                    let (anchor, c) = eligible[rng.gen_range(0..eligible.len())];
                    let w = &windows[anchor];
                    let own = &index.agent_day[&(w.agent(), w.day())];
                    let mut k = c.pos.0 + rng.gen_range(0..c.positives());
                    if k >= c.overlap.0 {
                        k += c.overlap.1 - c.overlap.0;
                    }
                    let positive = own[k];
                    let day_ids = &index.by_day[&w.day()];
                    let negative = loop {
                        let cand = day_ids[rng.gen_range(c.day.0..c.day.1)];
                        if windows[cand].agent() != w.agent() {
                            break cand;
                        }
                    };
                    Triplet { anchor, positive, negative }
                })
                .collect()
        })
        .collect();
    Ok(drawn.into_iter().flatten().collect())
}

/// Checks every triplet invariant directly against the windows.
pub fn validate_triplet(windows: &[Sample], t: &Triplet, horizon: f64) -> Result<()> {
    let get = |i: usize| {
        windows.get(i).ok_or_else(|| Error::InvalidSample(format!("sample id {i} out of range")))
    };
    let (a, p, n) = (get(t.anchor)?, get(t.positive)?, get(t.negative)?);
    let fail = |m: &str| Err(Error::InvalidSample(format!("triplet {t:?}: {m}")));
    if a.agent() != p.agent() {
        return fail("positive from another agent");
    }
    if a.agent() == n.agent() {
        return fail("negative from the anchor's agent");
    }
    if a.day() != p.day() || a.day() != n.day() {
        return fail("windows from different days");
    }
    if a.shares_orders_with(p) {
        return fail("anchor and positive share orders");
    }
    if (p.start_time() - a.start_time()).abs() > horizon || (n.start_time() - a.start_time()).abs() > horizon {
        return fail("outside the locality horizon");
    }
    Ok(())
}

pub fn write_triplets<W: Write>(w: W, triplets: &[Triplet]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for t in triplets {
        wtr.serialize(t)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_triplets<R: Read>(r: R) -> Result<Vec<Triplet>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(["anchor", "positive", "negative"]) {
        return Err(Error::InvalidSample(format!("unexpected triplet header {headers:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// One manifest row: where a sample id's window lives in the order log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: usize,
    pub agent: AgentId,
    pub day: u32,
    pub offset: usize,
    pub start_time: f64,
}

pub fn manifest(windows: &[Sample]) -> Vec<ManifestRow> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| ManifestRow {
            sample_id: i,
            agent: w.agent(),
            day: w.day(),
            offset: w.offset(),
            start_time: w.start_time(),
        })
        .collect()
}

pub fn write_manifest<W: Write>(w: W, windows: &[Sample]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in manifest(windows) {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_manifest<R: Read>(r: R) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows: Vec<ManifestRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    for (i, row) in rows.iter().enumerate() {
        if row.sample_id != i {
            return Err(Error::InvalidSample(format!("manifest row {i} has sample id {}", row.sample_id)));
        }
    }
    Ok(rows)
}

/// Rebuilds the windows named by a manifest from the order log they were cut from.
pub fn resolve_manifest(orders: &[MarketOrder], rows: &[ManifestRow]) -> Result<Vec<Sample>> {
    let groups: BTreeMap<(AgentId, u32), Vec<MarketOrder>> = group_by_agent_day(orders);
    rows.iter()
        .map(|row| {
            let seq = groups.get(&(row.agent, row.day)).ok_or_else(|| {
                Error::InvalidSample(format!("no orders for agent {} on day {}", row.agent, row.day))
            })?;
            let slice = seq.get(row.offset..row.offset + WINDOW_LEN).ok_or_else(|| {
                Error::InvalidSample(format!("window of sample {} runs past the agent-day", row.sample_id))
            })?;
            let s = Sample::new(slice.to_vec(), row.offset)?;
            if s.start_time() != row.start_time {
                return Err(Error::InvalidSample(format!(
                    "sample {} starts at {} in the log but {} in the manifest",
                    row.sample_id,
                    s.start_time(),
                    row.start_time
                )));
            }
            Ok(s)
        })
        .collect()
}

pub fn write_triplets_file(path: &Path, triplets: &[Triplet]) -> Result<()> {
    write_triplets(std::io::BufWriter::new(std::fs::File::create(path)?), triplets)
}

pub fn read_triplets_file(path: &Path) -> Result<Vec<Triplet>> {
    read_triplets(std::io::BufReader::new(std::fs::File::open(path)?))
        .map_err(|e| Error::Malformed { path: path.to_owned(), msg: e.to_string() })
}

pub fn write_manifest_file(path: &Path, windows: &[Sample]) -> Result<()> {
    write_manifest(std::io::BufWriter::new(std::fs::File::create(path)?), windows)
}

pub fn read_manifest_file(path: &Path) -> Result<Vec<ManifestRow>> {
    read_manifest(std::io::BufReader::new(std::fs::File::open(path)?))
        .map_err(|e| Error::Malformed { path: path.to_owned(), msg: e.to_string() })
}
