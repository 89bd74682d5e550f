//! K-means (Lloyd with k-means++ seeding), elbow selection of k, and PCA.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sq_dist;
use crate::order::AgentId;
use crate::rng::seeded;

const RESTART_TAG: u64 = 0xc1a5;
/// Knees whose normalized chord distance falls below this are reported as low confidence.
pub const KNEE_CONFIDENCE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub n_init: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { n_init: 10, max_iter: 300, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// Ordered by descending cluster size on the fitted data.
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    pub iterations: usize,
    pub seed: u64,
}

/// A fitted model together with the assignment of the points it was fitted on.
#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub model: ClusterModel,
    pub labels: Vec<usize>,
    /// WCSS after each assignment step of the winning restart.
    pub trace: Vec<f64>,
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all<P: AsRef<[f64]>>(centroids: &[Vec<f64>], points: &[P]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(centroids, p.as_ref())).unzip()
}

/// Index drawn with probability proportional to `d2`; uniform when all are zero.
fn draw_weighted(d2: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    if total <= 0.0 {
        return rng.gen_range(0..d2.len());
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, &d) in d2.iter().enumerate() {
        if u < d {
            return i;
        }
        u -= d;
    }
    d2.len() - 1
}

/// Greedy k-means++: each new center is the best of `2 + ln k` D²-sampled candidates,
/// judged by the potential it leaves.
fn plus_plus<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = vec![points[rng.gen_range(0..n)].as_ref().to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p.as_ref(), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = draw_weighted(&d2, total, rng);
            let c = points[cand].as_ref();
            let next: Vec<f64> = d2.iter().zip(points).map(|(&d, p)| d.min(sq_dist(p.as_ref(), c))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, next));
            }
        }
        let (_, cand, next) = best.expect("at least two trials");
        centroids.push(points[cand].as_ref().to_vec());
        d2 = next;
    }
    centroids
}

struct Run {
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    wcss: f64,
    iterations: usize,
    trace: Vec<f64>,
}

fn lloyd<P: AsRef<[f64]>>(points: &[P], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> Run {
    let k = centroids.len();
    let dim = centroids[0].len();
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let (mut labels, mut dists) = assign_all(&centroids, points);
        trace.push(dists.iter().sum());
        if iterations == cfg.max_iter {
            let wcss = *trace.last().expect("one entry");
            return Run { centroids, labels, wcss, iterations, trace };
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        // Empty clusters take over the point farthest from its centroid.
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| counts[labels[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            let Some(i) = far else { continue };
            let old = labels[i];
            for (s, v) in sums[old].iter_mut().zip(points[i].as_ref()) {
                *s -= v;
            }
            counts[old] -= 1;
            sums[j] = points[i].as_ref().to_vec();
            counts[j] = 1;
            labels[i] = j;
            dists[i] = 0.0;
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&mean, &centroids[j]).sqrt());
            centroids[j] = mean;
        }
        if shift < cfg.tol {
            let (labels, dists) = assign_all(&centroids, points);
            trace.push(dists.iter().sum());
            let wcss = *trace.last().expect("one entry");
            return Run { centroids, labels, wcss, iterations, trace };
        }
    }
}

fn check_points<P: AsRef<[f64]>>(points: &[P], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::Degenerate(format!("{} points cannot form {k} clusters", points.len())));
    }
    let dim = points[0].as_ref().len();
    for p in points {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::Shape("points have different dimensions".into()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cluster input".into()));
        }
    }
    Ok(dim)
}

/// Relabels clusters by descending size (ties keep the original order).
fn canonicalize(run: Run, seed: u64) -> Fit {
    let k = run.centroids.len();
    let mut counts = vec![0usize; k];
    for &l in &run.labels {
        counts[l] += 1;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut new_of = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        new_of[old] = new;
    }
    let centroids = order.iter().map(|&o| run.centroids[o].clone()).collect();
    let model = ClusterModel { k, centroids, wcss: run.wcss, iterations: run.iterations, seed };
    Fit { model, labels: run.labels.iter().map(|&l| new_of[l]).collect(), trace: run.trace }
}

fn best_of<P: AsRef<[f64]> + Sync>(
    points: &[P],
    inits: Vec<Vec<Vec<f64>>>,
    cfg: &KMeansConfig,
    seed: u64,
) -> Fit {
    let runs: Vec<Run> = inits.into_par_iter().map(|c| lloyd(points, c, cfg)).collect();
    // Lowest WCSS wins; the earliest restart breaks ties.
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.wcss < a.wcss { b } else { a })
        .expect("at least one restart");
    canonicalize(best, seed)
}

fn restart_inits<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64, n_init: usize) -> Vec<Vec<Vec<f64>>> {
    (0..n_init.max(1)).map(|r| plus_plus(points, k, &mut seeded(seed, &[RESTART_TAG, k as u64, r as u64]))).collect()
}

/// Best of `cfg.n_init` k-means++ restarts.
pub fn kmeans<P: AsRef<[f64]> + Sync>(points: &[P], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<Fit> {
    check_points(points, k)?;
    Ok(best_of(points, restart_inits(points, k, seed, cfg.n_init), cfg, seed))
}

/// Nearest-centroid index for each point; ties go to the lower index.
pub fn assign<P: AsRef<[f64]>>(model: &ClusterModel, points: &[P]) -> Result<Vec<usize>> {
    let dim = model.centroids.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::Shape(format!("model expects dimension {dim}")));
    }
    Ok(assign_all(&model.centroids, points).0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Elbow {
    pub ks: Vec<usize>,
    pub wcss: Vec<f64>,
    pub knee: usize,
    /// Normalized distance of the knee below the chord joining the curve's endpoints.
    pub knee_distance: f64,
    pub low_confidence: bool,
}

/// Chord-distance knee of a decreasing curve: the point farthest below the straight line
/// joining the first and last points, after scaling both axes to [0, 1].
pub fn knee(ks: &[usize], wcss: &[f64]) -> (usize, f64) {
    let n = ks.len();
    if n < 3 {
        return (ks[0], 0.0);
    }
    let (x0, x1) = (ks[0] as f64, ks[n - 1] as f64);
    let (hi, lo) = (wcss[0], wcss[n - 1]);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut best = (ks[0], f64::NEG_INFINITY);
    for (&k, &w) in ks.iter().zip(wcss) {
        let x = (k as f64 - x0) / (x1 - x0);
        let y = (w - lo) / span;
        // The chord runs from (0, 1) to (1, 0).
        let d = ((1.0 - x) - y) / std::f64::consts::SQRT_2;
        if d > best.1 {
            best = (k, d);
        }
    }
    best
}

/// Fits every k in `ks` (ascending) and picks the knee.
///
/// Each k beyond the first gets one extra restart seeded from the previous best centroids
/// plus the point farthest from them, so the curve can never increase with k.
pub fn elbow_select<P: AsRef<[f64]> + Sync>(
    points: &[P],
    ks: &[usize],
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<(Elbow, Vec<Fit>)> {
    if ks.is_empty() || ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("k range must be non-empty and strictly increasing".into()));
    }
    check_points(points, *ks.last().expect("non-empty"))?;
    let mut fits: Vec<Fit> = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut inits = restart_inits(points, k, seed, cfg.n_init);
        if let Some(prev) = fits.last() {
            let mut c = prev.model.centroids.clone();
            while c.len() < k {
                let (_, d) = assign_all(&c, points);
                let far = (0..points.len()).fold(0, |b, i| if d[i] > d[b] { i } else { b });
                c.push(points[far].as_ref().to_vec());
            }
            inits.push(c);
        }
        fits.push(best_of(points, inits, cfg, seed));
    }
    let wcss: Vec<f64> = fits.iter().map(|f| f.model.wcss).collect();
    let (k_star, dist) = knee(ks, &wcss);
    let elbow = Elbow { ks: ks.to_vec(), wcss, knee: k_star, knee_distance: dist, low_confidence: dist < KNEE_CONFIDENCE };
    Ok((elbow, fits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Principal axes as rows, strongest first.
    pub components: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
}

impl Pca {
    pub fn project(&self, p: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(p).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, zi) in self.components.iter().zip(z) {
            for (o, a) in out.iter_mut().zip(c) {
                *o += zi * a;
            }
        }
        out
    }
}

/// Mean-centred PCA onto the top `out_dim` axes of the sample covariance.
pub fn pca<P: AsRef<[f64]>>(points: &[P], out_dim: usize) -> Result<(Pca, Vec<Vec<f64>>)> {
    if points.len() < 2 {
        return Err(Error::Degenerate("PCA needs at least two points".into()));
    }
    let d = check_points(points, 1)?;
    if out_dim == 0 || out_dim > d {
        return Err(Error::Config(format!("PCA output dimension {out_dim} not in 1..={d}")));
    }
    let n = points.len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| points[i].as_ref()[j] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(out_dim);
    let mut explained_ratio = Vec::with_capacity(out_dim);
    for &j in order.iter().take(out_dim) {
        let mut axis: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        // Sign convention: the largest-magnitude coordinate is positive.
        let lead = (0..d).fold(0, |b, i| if axis[i].abs() > axis[b].abs() { i } else { b });
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(axis);
        explained_ratio.push(if total > 0.0 { eig.eigenvalues[j].max(0.0) / total } else { 0.0 });
    }
    let model = Pca { mean, components, explained_ratio };
    let projected = points.iter().map(|p| model.project(p.as_ref())).collect();
    Ok((model, projected))
}

pub fn write_model<W: Write>(w: W, model: &ClusterModel) -> Result<()> {
    serde_json::to_writer_pretty(w, model)?;
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<ClusterModel> {
    let m: ClusterModel = serde_json::from_reader(r)?;
    if m.k != m.centroids.len() || m.k == 0 {
        return Err(Error::Shape(format!("model declares k = {} with {} centroids", m.k, m.centroids.len())));
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub sample_id: usize,
    pub agent: AgentId,
    pub cluster: usize,
}

pub fn write_assignments<W: Write>(w: W, rows: &[AssignmentRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_assignments<R: Read>(r: R) -> Result<Vec<AssignmentRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape("labelings differ in length".into()));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let expected = sum_a * sum_b / c2(n as u64);
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn blobs(centres: &[Vec<f64>], per: usize, sd: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = seeded(seed, &[]);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (l, c) in centres.iter().enumerate() {
            for _ in 0..per {
                pts.push(c.iter().map(|v| v + noise.sample(&mut rng)).collect());
                labels.push(l);
            }
        }
        (pts, labels)
    }

    /// Exhaustive optimum over all 2-partitions of at most 12 points.
    fn brute_force_two(points: &[Vec<f64>]) -> (f64, Vec<usize>) {
        let n = points.len();
        let cost = |members: &[&Vec<f64>]| -> f64 {
            let d = members[0].len();
            let mean: Vec<f64> =
                (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
            members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum()
        };
        let mut best = (f64::INFINITY, vec![]);
        // Point 0 always in group 0; both groups non-empty.
        for mask in 0u32..(1 << (n - 1)) {
            let labels: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize }).collect();
            let g0: Vec<&Vec<f64>> = (0..n).filter(|&i| labels[i] == 0).map(|i| &points[i]).collect();
            let g1: Vec<&Vec<f64>> = (0..n).filter(|&i| labels[i] == 1).map(|i| &points[i]).collect();
            if g1.is_empty() {
                continue;
            }
            let c = cost(&g0) + cost(&g1);
            if c < best.0 {
                best = (c, labels);
            }
        }
        best
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn exact_locations_give_zero_wcss() {
        let locs = vec![vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 7.0]];
        let pts: Vec<Vec<f64>> = locs.iter().flat_map(|l| vec![l.clone(); 4]).collect();
        let fit = kmeans(&pts, 3, 1, &KMeansConfig::default()).unwrap();
        assert_eq!(fit.model.wcss, 0.0);
        let mut got = fit.model.centroids.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = locs.clone();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn k1_is_the_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]];
        let fit = kmeans(&pts, 1, 2, &KMeansConfig::default()).unwrap();
        assert!((fit.model.centroids[0][0] - 3.0).abs() < 1e-12);
        assert!((fit.model.centroids[0][1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_blobs_match_brute_force() {
        let (pts, _) = blobs(&[vec![0.0, 0.0], vec![4.0, 3.0]], 6, 0.8, 5);
        let fit = kmeans(&pts, 2, 3, &KMeansConfig::default()).unwrap();
        let (opt, labels) = brute_force_two(&pts);
        assert!(same_partition(&fit.labels, &labels));
        assert!((fit.model.wcss - opt).abs() < 1e-9 * opt.max(1.0));
    }

    #[test]
    fn fewer_points_than_k() {
        assert!(matches!(kmeans(&[vec![0.0]], 2, 1, &KMeansConfig::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn assign_ties_and_exact_hits() {
        let model = ClusterModel {
            k: 4,
            centroids: vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![9.0, 9.0], vec![5.0, 5.0]],
            wcss: 0.0,
            iterations: 0,
            seed: 0,
        };
        assert_eq!(assign(&model, &[vec![5.0, 5.0]]).unwrap(), vec![3]);
        assert_eq!(assign(&model, &[vec![1.0, 0.0]]).unwrap(), vec![0]);
        assert!(assign(&model, &[vec![1.0]]).is_err());
    }

    #[test]
    fn assign_matches_naive_loop() {
        let mut rng = seeded(4, &[]);
        let pts: Vec<Vec<f64>> = (0..300).map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let fit = kmeans(&pts, 6, 9, &KMeansConfig::default()).unwrap();
        let got = assign(&fit.model, &pts).unwrap();
        for (p, g) in pts.iter().zip(&got) {
            let mut best = 0;
            for j in 1..6 {
                let dj: f64 = p.iter().zip(&fit.model.centroids[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                let db: f64 = p.iter().zip(&fit.model.centroids[best]).map(|(a, b)| (a - b) * (a - b)).sum();
                if dj < db {
                    best = j;
                }
            }
            assert_eq!(*g, best);
        }
        // The stored assignment is reproduced.
        assert_eq!(got, fit.labels);
    }

    #[test]
    fn wcss_matches_final_assignment() {
        let (pts, _) = blobs(&[vec![0.0; 3], vec![3.0; 3], vec![-3.0, 0.0, 3.0]], 40, 1.0, 8);
        let fit = kmeans(&pts, 3, 1, &KMeansConfig::default()).unwrap();
        let direct: f64 = pts.iter().zip(&fit.labels).map(|(p, &l)| sq_dist(p, &fit.model.centroids[l])).sum();
        assert_eq!(direct, fit.model.wcss);
        let sizes: Vec<usize> = (0..3).map(|c| fit.labels.iter().filter(|&&l| l == c).count()).collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    }

    fn seven_blobs(per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = seeded(seed, &[1]);
        let centres: Vec<Vec<f64>> =
            (0..7).map(|_| (0..40).map(|_| 6.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>()).collect();
        blobs(&centres, per, 1.0, seed)
    }

    #[test]
    fn elbow_finds_seven_blobs() {
        let (pts, _) = seven_blobs(60, 3);
        let ks: Vec<usize> = (2..=12).collect();
        let (elbow, _) = elbow_select(&pts, &ks, 5, &KMeansConfig::default()).unwrap();
        assert_eq!(elbow.knee, 7, "{elbow:?}");
        assert!(!elbow.low_confidence);
        assert!(elbow.wcss.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn single_blob_knee_is_low_confidence() {
        let (pts, _) = blobs(&[vec![0.0; 40]], 400, 1.0, 6);
        let ks: Vec<usize> = (2..=12).collect();
        let (elbow, _) = elbow_select(&pts, &ks, 5, &KMeansConfig::default()).unwrap();
        assert!(elbow.low_confidence, "{elbow:?}");
        assert!(elbow.wcss.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn knee_of_hand_curve() {
        let (k, d) = knee(&[1, 2, 3, 4, 5], &[100.0, 20.0, 10.0, 5.0, 0.0]);
        // (x, y) = (0.25, 0.2) after scaling.
        assert_eq!(k, 2);
        assert!((d - 0.55 / std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(knee(&[1, 2, 3], &[3.0, 2.0, 1.0]).0, 1);
    }

    #[test]
    fn pca_line_and_isotropic() {
        let line: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0, -(i as f64)]).collect();
        let (m, _) = pca(&line, 1).unwrap();
        assert!((m.explained_ratio[0] - 1.0).abs() < 1e-12);

        let mut rng = seeded(2, &[]);
        let iso: Vec<Vec<f64>> = (0..20000).map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let (m, _) = pca(&iso, 4).unwrap();
        for r in &m.explained_ratio {
            assert!((r - 0.25).abs() < 0.02, "{:?}", m.explained_ratio);
        }
        assert!(m.explained_ratio.windows(2).all(|w| w[0] >= w[1]));
        assert!(m.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn pca_rank_preserving_roundtrip() {
        // Rank-2 data in R^4, projected to 2 dimensions and back.
        let pts: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let (a, b) = ((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos());
                vec![a + b, a - b, 2.0 * a + 3.0, -b]
            })
            .collect();
        let (m, proj) = pca(&pts, 2).unwrap();
        for (p, z) in pts.iter().zip(&proj) {
            let back = m.reconstruct(z);
            for (x, y) in p.iter().zip(&back) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_errors() {
        assert!(matches!(pca(&[vec![1.0, 2.0]], 1), Err(Error::Degenerate(_))));
        assert!(pca(&[vec![1.0, 2.0], vec![0.0, 1.0]], 3).is_err());
    }

    #[test]
    fn ari_known_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((v - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn model_and_assignment_io() {
        let model = ClusterModel { k: 1, centroids: vec![vec![0.1, 1.0 / 3.0]], wcss: 2.5, iterations: 3, seed: 7 };
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        assert_eq!(read_model(&buf[..]).unwrap(), model);
        let rows = vec![AssignmentRow { sample_id: 0, agent: AgentId(3), cluster: 0 }];
        let mut buf = Vec::new();
        write_assignments(&mut buf, &rows).unwrap();
        assert!(buf.starts_with(b"sample_id,agent,cluster\n"));
        assert_eq!(read_assignments(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn restarts_thread_independent() {
        let (pts, _) = seven_blobs(20, 1);
        let a = kmeans(&pts, 5, 4, &KMeansConfig::default()).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| kmeans(&pts, 5, 4, &KMeansConfig::default()).unwrap());
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn lloyd_trace_never_increases(seed in 0u64..5000, k in 1usize..6) {
            let mut rng = seeded(seed, &[]);
            let pts: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
            let fit = kmeans(&pts, k, seed, &KMeansConfig::default()).unwrap();
            for w in fit.trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.trace);
            }
        }

        #[test]
        fn small_two_partition_optimal(seed in 0u64..5000, n in 4usize..=12) {
            let mut rng = seeded(seed, &[3]);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let off = if i % 2 == 0 { 0.0 } else { 6.0 };
                    (0..2).map(|_| off + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect()
                })
                .collect();
            let fit = kmeans(&pts, 2, seed, &KMeansConfig::default()).unwrap();
            let (opt, labels) = brute_force_two(&pts);
            prop_assert!((fit.model.wcss - opt).abs() <= 1e-9 * opt.max(1.0));
            if (fit.model.wcss - opt).abs() > 0.0 {
                // Equal-cost partitions aside, the optimum is unique.
                prop_assert!(same_partition(&fit.labels, &labels));
            }
        }

        #[test]
        fn permutation_keeps_best_wcss(seed in 0u64..5000) {
            let (pts, _) = blobs(&[vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]], 15, 0.7, seed);
            let mut rev = pts.clone();
            rev.reverse();
            let a = kmeans(&pts, 3, 1, &KMeansConfig::default()).unwrap();
            let b = kmeans(&rev, 3, 1, &KMeansConfig::default()).unwrap();
            prop_assert!((a.model.wcss - b.model.wcss).abs() <= 1e-9 * a.model.wcss);
        }
    }
}
