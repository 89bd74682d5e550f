//! Stage glue shared by the command line and the end-to-end tests.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{compact, failure_rate, failure_rate_per_agent, FailureCount};
use crate::features::{featurize, fit_normalization, FeatureMatrix, FeatureSet, NormalizationStats};
use crate::nn::{encode_all, EncoderConfig, Embedding, EncoderParams};
use crate::order::{windows_for_log, AgentId, MarketOrder, Sample};
use crate::rng::derive_seed;
use crate::synth::{AgentArchetype, AgentSpec, MarketConfig};
use crate::train::{train, Checkpoint, TrainConfig};
use crate::triplets::{pool_where, sample_triplets, split_days, DaySplit, Triplet};

/// Window stride used for triplet mining.
pub const TRIPLET_STRIDE: usize = 10;
/// Non-overlapping windows for clustering and indicator analysis.
pub const CLUSTER_STRIDE: usize = 50;
pub const TEST_TRIPLETS: usize = 20_000;
pub const SPLIT_RATIO: (usize, usize) = (4, 1);

const TRAIN_TRIPLET_TAG: u64 = 0x7a1;
const TEST_TRIPLET_TAG: u64 = 0x7e5;

/// Days of an order log.
pub fn days_of(orders: &[MarketOrder]) -> Vec<u32> {
    orders.iter().map(|o| o.day).collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn split_log(orders: &[MarketOrder], seed: u64) -> Result<DaySplit> {
    split_days(&days_of(orders), SPLIT_RATIO, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSets {
    pub train: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

/// Train triplets from training days and test triplets from test days, each from its own
/// seed stream.
pub fn sample_sets(
    windows: &[Sample],
    split: &DaySplit,
    n_train: usize,
    n_test: usize,
    horizon: f64,
    seed: u64,
) -> Result<TripletSets> {
    let train_pool = pool_where(windows, |d| split.is_train(d));
    let test_pool = pool_where(windows, |d| split.is_test(d));
    Ok(TripletSets {
        train: sample_triplets(windows, &train_pool, horizon, n_train, derive_seed(seed, &[TRAIN_TRIPLET_TAG]))?,
        test: sample_triplets(windows, &test_pool, horizon, n_test, derive_seed(seed, &[TEST_TRIPLET_TAG]))?,
    })
}

/// Normalization fitted on the windows the training triplets touch.
pub fn fit_on_triplets(windows: &[Sample], triplets: &[Triplet], fs: FeatureSet) -> Result<NormalizationStats> {
    let (ids, _) = compact(triplets);
    let used: Vec<Sample> = ids.iter().map(|&i| windows[i].clone()).collect();
    fit_normalization(&used, fs)
}

pub fn featurize_all(windows: &[Sample], fs: FeatureSet, norm: &NormalizationStats) -> Result<Vec<FeatureMatrix>> {
    windows.par_iter().map(|w| featurize(w, fs, norm)).collect()
}

/// Embeds windows with a trained checkpoint.
pub fn embed(ck: &Checkpoint, windows: &[Sample]) -> Result<Vec<Embedding>> {
    embed_with(&ck.params, &ck.norm, windows)
}

pub fn embed_with(params: &EncoderParams, norm: &NormalizationStats, windows: &[Sample]) -> Result<Vec<Embedding>> {
    encode_all(params, &featurize_all(windows, norm.feature_set, norm)?)
}

/// Trains one encoder on `triplets`, featurizing only the windows they touch.
pub fn train_encoder(
    windows: &[Sample],
    triplets: &[Triplet],
    fs: FeatureSet,
    cfg: TrainConfig,
    on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let norm = fit_on_triplets(windows, triplets, fs)?;
    let ck = Checkpoint::fresh(norm, EncoderConfig::new(fs.width()), cfg)?;
    resume(ck, windows, triplets, on_checkpoint)
}

/// Continues a run from its checkpoint.
pub fn resume(
    ck: Checkpoint,
    windows: &[Sample],
    triplets: &[Triplet],
    on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let (ids, local) = compact(triplets);
    let used: Vec<Sample> = ids.iter().map(|&i| windows.get(i).cloned()).collect::<Option<_>>().ok_or_else(|| {
        Error::Shape("triplet references a window outside the manifest".into())
    })?;
    let inputs = featurize_all(&used, ck.feature_set, &ck.norm)?;
    train(ck, &inputs, &local, on_checkpoint)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub global: FailureCount,
    pub per_agent: BTreeMap<AgentId, FailureCount>,
}

pub fn evaluate(params: &EncoderParams, norm: &NormalizationStats, windows: &[Sample], triplets: &[Triplet]) -> Result<Evaluation> {
    let (ids, local) = compact(triplets);
    let used: Vec<Sample> = ids.iter().map(|&i| windows.get(i).cloned()).collect::<Option<_>>().ok_or_else(|| {
        Error::Shape("triplet references a window outside the manifest".into())
    })?;
    let emb = embed_with(params, norm, &used)?;
    let agents: Vec<AgentId> = used.iter().map(Sample::agent).collect();
    Ok(Evaluation { global: failure_rate(&emb, &local)?, per_agent: failure_rate_per_agent(&emb, &agents, &local)? })
}

#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub feature_set: FeatureSet,
    pub checkpoint: Checkpoint,
    pub evaluation: Evaluation,
}

/// One encoder per feature set, all on the same triplets with the same training config.
pub fn ablate(windows: &[Sample], sets: &TripletSets, cfg: TrainConfig) -> Result<Vec<AblationEntry>> {
    FeatureSet::ALL
        .iter()
        .map(|&fs| {
            let checkpoint = train_encoder(windows, &sets.train, fs, cfg, |_| Ok(()))?;
            let evaluation = evaluate(&checkpoint.params, &checkpoint.norm, windows, &sets.test)?;
            Ok(AblationEntry { feature_set: fs, checkpoint, evaluation })
        })
        .collect()
}

/// `feature_set,n_triplets,failure_rate,ci_half_width,ties`.
pub fn write_ablation<W: Write>(w: W, entries: &[AblationEntry]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["feature_set", "n_triplets", "failure_rate", "ci_half_width", "ties"])?;
    for e in entries {
        let c = e.evaluation.global;
        wtr.write_record([
            e.feature_set.label().to_string(),
            c.triplets.to_string(),
            format!("{:.6}", c.rate()),
            format!("{:.6}", c.ci_half_width()),
            c.ties.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Four archetypes identical in everything the basic features see, crossing a low and a
/// high modification probability with a thin and a deep queue profile.
pub fn ablation_archetypes() -> Vec<AgentArchetype> {
    let base = |name: String, modif_prob, queue_scale, impatience| AgentArchetype {
        name,
        trade_rate: 2.0,
        size_mean: 5.0,
        fill_ratio_mean: 0.85,
        direction_bias: 0.4,
        modif_prob,
        spread_regime: 1.3,
        queue_scale,
        impatience,
        session_phase: None,
        passive_ratio: 0.5,
    };
    let mut out = Vec::new();
    for (m, modif) in [("low", 0.05), ("high", 0.6)] {
        for (q, scale, imp) in [("thin", 5.0, 4.0), ("deep", 40.0, 0.5)] {
            out.push(base(format!("modif_{m}_queue_{q}"), modif, scale, imp));
        }
    }
    out
}

/// `n_agents` agents round-robin over [`ablation_archetypes`].
pub fn ablation_market(n_agents: u32, n_days: u32, seed: u64) -> MarketConfig {
    let archetypes = ablation_archetypes();
    let agents = (0..n_agents)
        .map(|i| AgentSpec {
            id: AgentId(i + 1),
            archetype: archetypes[i as usize % archetypes.len()].name.clone(),
            switch: None,
        })
        .collect();
    MarketConfig { n_days, seed, archetypes, agents }
}

/// Windows at the triplet stride.
pub fn triplet_windows(orders: &[MarketOrder]) -> Result<Vec<Sample>> {
    windows_for_log(orders, TRIPLET_STRIDE)
}
