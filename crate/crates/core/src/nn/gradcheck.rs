//! Central finite-difference check of the analytic triplet-loss gradient.

use rand_distr::{Distribution, StandardNormal};

use super::{backward, encode, triplet_loss, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::features::FeatureMatrix;
use crate::order::WINDOW_LEN;
use crate::rng::seeded;

const STEP: f64 = 1e-5;

/// Entries where both gradients are below this magnitude are compared on an absolute
/// scale; finite differences cannot resolve relative error there.
const ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor, named as in [`EncoderParams::TENSOR_NAMES`].
    pub per_tensor: Vec<(&'static str, f64)>,
    pub loss: f64,
    pub hinge_active: bool,
    pub parameters: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn loss_at(params: &EncoderParams, x: [&FeatureMatrix; 3], margin: f64) -> Result<f64> {
    let a = encode(params, x[0])?;
    let p = encode(params, x[1])?;
    let n = encode(params, x[2])?;
    triplet_loss(&a, &p, &n, margin)
}

/// Compares the analytic gradient of one triplet against central differences.
pub fn check_triplet(
    params: &EncoderParams,
    x: [&FeatureMatrix; 3],
    margin: f64,
) -> Result<GradCheckReport> {
    let (loss, grad) = backward(params, x[0], x[1], x[2], margin)?;
    let mut probe = params.clone();
    let mut per_tensor = Vec::new();
    for (k, name) in EncoderParams::TENSOR_NAMES.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..grad.tensors()[k].len() {
            let orig = params.tensors()[k][i];
            probe.tensors_mut()[k][i] = orig + STEP;
            let up = loss_at(&probe, x, margin)?;
            probe.tensors_mut()[k][i] = orig - STEP;
            let down = loss_at(&probe, x, margin)?;
            probe.tensors_mut()[k][i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(grad.tensors()[k][i], numeric));
        }
        per_tensor.push((*name, worst));
    }
    let max_rel_error = per_tensor.iter().map(|t| t.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_tensor,
        loss,
        hinge_active: loss > 0.0,
        parameters: params.len(),
    })
}

/// Random parameters and a random triplet of standard-normal inputs, both drawn from `seed`.
pub fn grad_check(config: EncoderConfig, seed: u64) -> Result<GradCheckReport> {
    let params = EncoderParams::init(config, seed)?;
    let mut rng = seeded(seed, &[0x6c4e]);
    let mut draw = || {
        let v = (0..WINDOW_LEN * config.input_width).map(|_| StandardNormal.sample(&mut rng)).collect();
        FeatureMatrix::new(v, config.input_width)
    };
    let (a, p, n) = (draw()?, draw()?, draw()?);
    check_triplet(&params, [&a, &p, &n], config.margin)
}
