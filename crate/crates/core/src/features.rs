//! Per-order feature columns, the three feature sets, and train-fitted standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::order::{Sample, WINDOW_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Column {
    Interevent,
    Quantity,
    Side,
    Modif,
    BestBid,
    BestAsk,
    BidQty,
    AskQty,
}

/// How a column is treated before it reaches the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    /// `log(1 + x)`, then standardized.
    Log1p,
    /// Standardized as is.
    Linear,
    /// Left untouched (already in {-1, 1} or {0, 1}).
    Passthrough,
}

impl Column {
    pub fn transform(self) -> Transform {
        match self {
            Column::Interevent | Column::Quantity | Column::BidQty | Column::AskQty => {
                Transform::Log1p
            }
            Column::BestBid | Column::BestAsk => Transform::Linear,
            Column::Side | Column::Modif => Transform::Passthrough,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Column::Interevent => "interevent",
            Column::Quantity => "quantity",
            Column::Side => "side",
            Column::Modif => "modif",
            Column::BestBid => "best_bid",
            Column::BestAsk => "best_ask",
            Column::BidQty => "bid_qty",
            Column::AskQty => "ask_qty",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSet {
    Basic,
    BasicM,
    BasicMQS,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [FeatureSet::Basic, FeatureSet::BasicM, FeatureSet::BasicMQS];

    pub fn columns(self) -> &'static [Column] {
        use Column::*;
        match self {
            FeatureSet::Basic => &[Interevent, Quantity, Side, BestBid, BestAsk],
            FeatureSet::BasicM => &[Interevent, Quantity, Side, Modif, BestBid, BestAsk],
            FeatureSet::BasicMQS => {
                &[Interevent, Quantity, Side, Modif, BestBid, BestAsk, BidQty, AskQty]
            }
        }
    }

    pub fn width(self) -> usize {
        self.columns().len()
    }

    pub fn label(self) -> &'static str {
        match self {
            FeatureSet::Basic => "Basic",
            FeatureSet::BasicM => "Basic+M",
            FeatureSet::BasicMQS => "Basic+M+QS",
        }
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['+', '-', '_'], "").as_str() {
            "basic" => Ok(FeatureSet::Basic),
            "basicm" => Ok(FeatureSet::BasicM),
            "basicmqs" => Ok(FeatureSet::BasicMQS),
            _ => Err(Error::Config(format!("unknown feature set {s:?}"))),
        }
    }
}

/// A `WINDOW_LEN x width` row-major matrix ready for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    width: usize,
}

impl FeatureMatrix {
    pub fn new(values: Vec<f64>, width: usize) -> Result<Self> {
        if width == 0 || values.len() != WINDOW_LEN * width {
            return Err(Error::Shape(format!(
                "expected {WINDOW_LEN}x{width} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix entry".into()));
        }
        Ok(FeatureMatrix { values, width })
    }

    pub fn zeros(width: usize) -> Self {
        FeatureMatrix { values: vec![0.0; WINDOW_LEN * width], width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        WINDOW_LEN
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Column values after the log transform and price re-referencing, before standardization.
pub fn raw_features(sample: &Sample, fs: FeatureSet) -> Vec<f64> {
    let orders = sample.orders();
    let first_mid = orders[0].mid();
    let cols = fs.columns();
    let mut out = Vec::with_capacity(WINDOW_LEN * cols.len());
    for (i, o) in orders.iter().enumerate() {
        for &c in cols {
            let v = match c {
                Column::Interevent => {
                    if i == 0 {
                        0.0
                    } else {
                        o.t - orders[i - 1].t
                    }
                }
                Column::Quantity => o.q_filled as f64,
                Column::Side => o.side.sign(),
                Column::Modif => f64::from(u8::from(o.modif)),
                Column::BestBid => o.best_bid as f64 - first_mid,
                Column::BestAsk => o.best_ask as f64 - first_mid,
                Column::BidQty => o.bid_qty as f64,
                Column::AskQty => o.ask_qty as f64,
            };
            out.push(match c.transform() {
                Transform::Log1p => v.ln_1p(),
                Transform::Linear | Transform::Passthrough => v,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub column: Column,
    pub mean: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub feature_set: FeatureSet,
    pub columns: Vec<ColumnStats>,
}

impl NormalizationStats {
    /// Maps a standardized value of column `col` back to the transformed (log) scale.
    pub fn destandardize(&self, col: usize, z: f64) -> f64 {
        let s = &self.columns[col];
        z * s.scale + s.mean
    }
}

/// Population mean and standard deviation of every standardized column over all rows
/// of the training samples. Constant columns get scale 1.
pub fn fit_normalization(train: &[Sample], fs: FeatureSet) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(Error::Empty("normalization needs at least one training sample".into()));
    }
    let cols = fs.columns();
    let w = cols.len();
    let mut sum = vec![0.0; w];
    let mut n = 0usize;
    let raws: Vec<Vec<f64>> = train.iter().map(|s| raw_features(s, fs)).collect();
    for raw in &raws {
        for row in raw.chunks_exact(w) {
            for (acc, v) in sum.iter_mut().zip(row) {
                *acc += v;
            }
            n += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut sq = vec![0.0; w];
    for raw in &raws {
        for row in raw.chunks_exact(w) {
            for j in 0..w {
                let d = row[j] - mean[j];
                sq[j] += d * d;
            }
        }
    }
    let columns = cols
        .iter()
        .enumerate()
        .map(|(j, &column)| {
            if column.transform() == Transform::Passthrough {
                return ColumnStats { column, mean: 0.0, scale: 1.0 };
            }
            let sd = (sq[j] / n as f64).sqrt();
            let scale = if sd > 1e-12 { sd } else { 1.0 };
            ColumnStats { column, mean: mean[j], scale }
        })
        .collect();
    Ok(NormalizationStats { feature_set: fs, columns })
}

pub fn featurize(sample: &Sample, fs: FeatureSet, norm: &NormalizationStats) -> Result<FeatureMatrix> {
    if norm.feature_set != fs {
        return Err(Error::Shape(format!(
            "normalization fitted for {:?}, asked for {:?}",
            norm.feature_set, fs
        )));
    }
    let w = fs.width();
    let mut values = raw_features(sample, fs);
    for row in values.chunks_exact_mut(w) {
        for (v, s) in row.iter_mut().zip(&norm.columns) {
            *v = (*v - s.mean) / s.scale;
        }
    }
    FeatureMatrix::new(values, w)
}
