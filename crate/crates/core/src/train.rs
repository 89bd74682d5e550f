//! Mini-batch Adam training of the encoder over a fixed triplet corpus.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureSet, NormalizationStats};
use crate::nn::{adam_step, batch_gradient, AdamConfig, AdamState, EncoderConfig, EncoderParams};
use crate::rng::seeded;
use crate::triplets::Triplet;

pub const DESK_EPOCHS: usize = 50;
pub const DESK_TRIPLETS: usize = 20_000;
pub const PAPER_EPOCHS: usize = 500;
pub const PAPER_TRIPLETS: usize = 100_000;
pub const CHECKPOINT_VERSION: u32 = 1;
const SHUFFLE_TAG: u64 = 0x5afe;
/// Triplets per gradient task. Fixed so the summation order never depends on thread count.
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig { epochs: DESK_EPOCHS, batch_size: 64, adam: AdamConfig::default(), seed, checkpoint_every: 10 }
    }

    pub fn paper_scale(seed: u64) -> Self {
        TrainConfig { epochs: PAPER_EPOCHS, checkpoint_every: 50, ..Self::desk(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// Everything needed to resume or reuse a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub feature_set: FeatureSet,
    pub norm: NormalizationStats,
    pub train: TrainConfig,
    pub params: EncoderParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean training loss of each completed epoch.
    pub history: Vec<f64>,
}

impl Checkpoint {
    /// A run at epoch 0 with freshly initialized parameters.
    pub fn fresh(norm: NormalizationStats, encoder: EncoderConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        if encoder.input_width != norm.feature_set.width() {
            return Err(Error::Shape(format!(
                "encoder width {} does not match feature set {}",
                encoder.input_width,
                norm.feature_set.label()
            )));
        }
        let params = EncoderParams::init(encoder, train.seed)?;
        let adam = AdamState::new(&params);
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            feature_set: norm.feature_set,
            norm,
            train,
            params,
            adam,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(f)
            .map_err(|e| Error::Malformed { path: path.to_owned(), msg: e.to_string() })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Malformed {
                path: path.to_owned(),
                msg: format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", ck.version),
            });
        }
        ck.params.validate()?;
        if ck.history.len() != ck.epoch {
            return Err(Error::Malformed { path: path.to_owned(), msg: "history length differs from epoch".into() });
        }
        Ok(ck)
    }
}

/// Summed loss and summed gradient of one mini-batch, reduced in a fixed order.
fn batch_step(params: &EncoderParams, inputs: &[FeatureMatrix], batch: &[Triplet]) -> Result<(f64, EncoderParams)> {
    let parts: Vec<Result<_>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let refs: Vec<[&FeatureMatrix; 3]> =
                chunk.iter().map(|t| [&inputs[t.anchor], &inputs[t.positive], &inputs[t.negative]]).collect();
            batch_gradient(params, &refs, params.config.margin)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = params.zeros_like();
    for part in parts {
        let part = part?;
        loss += part.loss_sum;
        grad.add_assign(&part.grad_sum);
    }
    Ok((loss, grad))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, &[SHUFFLE_TAG, epoch as u64]));
    order
}

/// Runs epochs from `ck.epoch` up to `ck.train.epochs`. `inputs[i]` is the featurized window
/// with index `i` in the triplets. `on_checkpoint` is called at the configured cadence and
/// after the last epoch.
pub fn train(
    mut ck: Checkpoint,
    inputs: &[FeatureMatrix],
    triplets: &[Triplet],
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    ck.train.validate()?;
    ck.params.validate()?;
    if ck.epoch >= ck.train.epochs {
        return Ok(ck);
    }
    if triplets.is_empty() {
        return Err(Error::Empty("no training triplets".into()));
    }
    let width = ck.params.config.input_width;
    for t in triplets {
        for i in [t.anchor, t.positive, t.negative] {
            let x = inputs.get(i).ok_or_else(|| Error::Shape(format!("triplet references input {i}")))?;
            if x.width() != width {
                return Err(Error::Shape(format!("input {i} has width {}, encoder expects {width}", x.width())));
            }
        }
    }
    while ck.epoch < ck.train.epochs {
        let order = epoch_order(triplets.len(), ck.train.seed, ck.epoch);
        let mut total = 0.0;
        let mut batch = Vec::with_capacity(ck.train.batch_size);
        for ids in order.chunks(ck.train.batch_size) {
            batch.clear();
            batch.extend(ids.iter().map(|&i| triplets[i]));
            let (loss, mut grad) = batch_step(&ck.params, inputs, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss in epoch {}", ck.epoch + 1)));
            }
            total += loss;
            grad.scale(1.0 / batch.len() as f64);
            adam_step(&mut ck.params, &grad, &mut ck.adam, &ck.train.adam)?;
        }
        ck.epoch += 1;
        ck.history.push(total / triplets.len() as f64);
        let every = ck.train.checkpoint_every;
        if ck.epoch == ck.train.epochs || (every > 0 && ck.epoch % every == 0) {
            on_checkpoint(&ck)?;
        }
    }
    Ok(ck)
}

/// Mean loss of the current parameters over a corpus, without updating anything.
pub fn mean_loss(params: &EncoderParams, inputs: &[FeatureMatrix], triplets: &[Triplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Empty("no triplets".into()));
    }
    let parts: Vec<Result<f64>> = triplets
        .par_chunks(CHUNK)
        .map(|chunk| {
            let refs: Vec<[&FeatureMatrix; 3]> =
                chunk.iter().map(|t| [&inputs[t.anchor], &inputs[t.positive], &inputs[t.negative]]).collect();
            let emb = crate::nn::encode_batch(params, &refs.iter().flatten().copied().collect::<Vec<_>>())?;
            emb.chunks_exact(3)
                .map(|e| crate::nn::triplet_loss(&e[0], &e[1], &e[2], params.config.margin))
                .sum()
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / triplets.len() as f64)
}

/// CSV with header `epoch,mean_loss`, epochs counted from 1.
pub fn write_history<W: Write>(w: W, history: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["epoch", "mean_loss"])?;
    for (i, l) in history.iter().enumerate() {
        wtr.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
