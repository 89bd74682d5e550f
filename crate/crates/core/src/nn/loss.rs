use super::lstm::{self, OutputGrad};
use super::{forward_batch, sq_dist, Embedding, EncoderParams};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::order::WINDOW_LEN;

fn hinge_argument(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    sq_dist(a, p) - sq_dist(a, n) + margin
}

/// `max(|a - p|^2 - |a - n|^2 + margin, 0)`.
pub fn triplet_loss(a: &Embedding, p: &Embedding, n: &Embedding, margin: f64) -> Result<f64> {
    if a.dim() != p.dim() || a.dim() != n.dim() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} / {} / {}",
            a.dim(),
            p.dim(),
            n.dim()
        )));
    }
    Ok(hinge_argument(&a.0, &p.0, &n.0, margin).max(0.0))
}

/// Summed loss and summed parameter gradient over a group of triplets.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss_sum: f64,
    pub grad_sum: EncoderParams,
    pub triplets: usize,
    /// Triplets whose hinge was active.
    pub active: usize,
}

/// Forward all `3n` sequences together, then backpropagate only through triplets with an
/// active hinge; the others contribute exactly zero.
pub fn batch_gradient(
    params: &EncoderParams,
    triplets: &[[&FeatureMatrix; 3]],
    margin: f64,
) -> Result<BatchGradient> {
    let n = triplets.len();
    let d = params.config.hidden2;
    let mut grad_sum = params.zeros_like();
    if n == 0 {
        return Ok(BatchGradient { loss_sum: 0.0, grad_sum, triplets: 0, active: 0 });
    }
    // Row order: anchors, positives, negatives.
    let xs: Vec<&FeatureMatrix> = (0..3).flat_map(|k| triplets.iter().map(move |t| t[k])).collect();
    let trace = forward_batch(params, &xs)?;
    let emb = trace.second.last_output();
    let row = |r: usize| &emb[r * d..(r + 1) * d];

    let mut loss_sum = 0.0;
    let mut active = Vec::new();
    for i in 0..n {
        let arg = hinge_argument(row(i), row(n + i), row(2 * n + i), margin);
        if arg > 0.0 {
            loss_sum += arg;
            active.push(i);
        }
    }
    if !loss_sum.is_finite() {
        return Err(Error::NonFinite("triplet loss".into()));
    }
    if active.is_empty() {
        return Ok(BatchGradient { loss_sum, grad_sum, triplets: n, active: 0 });
    }

    let m = active.len();
    let rows: Vec<usize> = (0..3).flat_map(|k| active.iter().map(move |&i| k * n + i)).collect();
    let mut dlast = vec![0.0; 3 * m * d];
    for (slot, &i) in active.iter().enumerate() {
        let (a, p, ng) = (row(i), row(n + i), row(2 * n + i));
        for j in 0..d {
            dlast[slot * d + j] = 2.0 * (ng[j] - p[j]);
            dlast[(m + slot) * d + j] = -2.0 * (a[j] - p[j]);
            dlast[(2 * m + slot) * d + j] = 2.0 * (a[j] - ng[j]);
        }
    }

    let batch = 3 * n;
    let width = params.config.input_width;
    // With every hinge active the rows are already in order and need no gathering.
    let selected = (m < n).then(|| {
        (
            lstm::select_rows(&trace.input, WINDOW_LEN, batch, width, &rows),
            trace.first.select(&rows),
            trace.second.select(&rows),
        )
    });
    let (input, first, second) = match &selected {
        Some((i, f, s)) => (i, f, s),
        None => (&trace.input, &trace.first, &trace.second),
    };
    let [g1, g2] = &mut grad_sum.layers;
    let dh1 = lstm::backward(
        &params.layers[1],
        first.outputs(),
        second,
        OutputGrad::Last(&dlast),
        g2,
        true,
    )
    .expect("input gradient requested");
    lstm::backward(&params.layers[0], input, first, OutputGrad::All(&dh1), g1, false);

    Ok(BatchGradient { loss_sum, grad_sum, triplets: n, active: m })
}

/// Loss and exact gradient for a single triplet.
pub fn backward(
    params: &EncoderParams,
    anchor: &FeatureMatrix,
    positive: &FeatureMatrix,
    negative: &FeatureMatrix,
    margin: f64,
) -> Result<(f64, EncoderParams)> {
    let g = batch_gradient(params, &[[anchor, positive, negative]], margin)?;
    Ok((g.loss_sum, g.grad_sum))
}
