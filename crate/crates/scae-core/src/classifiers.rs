//! Classifiers layered on capsule presences: unsupervised k-means heads with
//! optimal cluster→label matching, and a supervised linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which presence tensor a classifier consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PresenceSource {
    /// Prior object presences `[B,K]`.
    Prior,
    /// Posterior object presences summed over parts, `[B,K]`.
    Posterior,
}

/// k-means clustering over `[B,K]` presence features with a cluster→label
/// permutation chosen by optimal bipartite matching against training labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansClassifier<F: Real> {
    /// Cluster centers `[k, K]`.
    pub centers: Tensor<F>,
    /// Bijection cluster-id → class label.
    pub permutation: Vec<usize>,
    pub source: PresenceSource,
}

/// Linear softmax classifier over `[B,K]` reduced posterior presences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearClassifier<F: Real> {
    /// Weights `[K, C]`.
    pub weights: Tensor<F>,
    /// Bias `[C]`.
    pub bias: Tensor<F>,
}

/// Any classifier that maps capsule presences to labels; the attack and
/// evaluation code is generic over which head drives it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ClassifierHead<F: Real> {
    KMeans(KMeansClassifier<F>),
    Linear(LinearClassifier<F>),
}

impl<F: Real> ClassifierHead<F> {
    /// Predict labels from prior `[B,K]` and posterior `[B,K,M]` presences,
    /// consuming whichever tensor this head was fitted on.
    pub fn predict(&self, prior: &Tensor<F>, posterior: &Tensor<F>) -> Vec<u8> {
        match self {
            ClassifierHead::KMeans(c) => {
                let features = match c.source {
                    PresenceSource::Prior => prior.clone(),
                    PresenceSource::Posterior => reduce_posterior(posterior),
                };
                predict_kmeans(c, &features)
            }
            ClassifierHead::Linear(c) => predict_linear(c, &reduce_posterior(posterior)),
        }
    }
}

/// The fitted heads that travel with a trained model: the two unsupervised
/// k-means classifiers plus the linear head the training-time generator
/// targets. Any subset may be present.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassifierSet<F: Real> {
    pub prior_kmeans: Option<KMeansClassifier<F>>,
    pub posterior_kmeans: Option<KMeansClassifier<F>>,
    pub linear: Option<LinearClassifier<F>>,
}

/// Sum posterior presences over the part axis: `[B,K,M] → [B,K]`.
pub fn reduce_posterior<F: Real>(posterior: &Tensor<F>) -> Tensor<F> {
    let shape = posterior.shape();
    assert_eq!(shape.len(), 3, "posterior must be [B,K,M]");
    let (b, k, m) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(&[b, k]);
    for i in 0..b * k {
        let mut s = F::zero();
        for j in 0..m {
            s += posterior.data()[i * m + j];
        }
        out.data_mut()[i] = s;
    }
    out
}

/// Minimum-cost perfect matching on a square cost matrix (Kuhn–Munkres with
/// potentials, O(n³)). Returns `assign` with `assign[row] = column`.
pub fn hungarian_match<F: Real>(cost: &Tensor<F>) -> Result<Vec<usize>> {
    let shape = cost.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!(
            "matching needs a square cost matrix, got {shape:?}"
        )));
    }
    let n = shape[0];
    if n == 0 {
        return Ok(Vec::new());
    }
    let c: Vec<f64> = cost.data().iter().map(|&v| v.as_f64()).collect();
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("matching cost matrix must be finite".into()));
    }

    // Potentials over rows/columns; p[j] is the row matched to column j.
    // 1-indexed with a virtual 0th row/column, per the classic formulation.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

fn sq_dist<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .fold(F::zero(), |acc, d| acc + d)
}

/// Index of the nearest center (squared L2; ties take the lowest index).
fn nearest_center<F: Real>(centers: &Tensor<F>, feat: &[F]) -> usize {
    let k = centers.shape()[0];
    let d = centers.shape()[1];
    let mut best = 0usize;
    let mut best_d = sq_dist(&centers.data()[0..d], feat);
    for c in 1..k {
        let dist = sq_dist(&centers.data()[c * d..(c + 1) * d], feat);
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    best
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the chosen set.
fn kmeans_pp_init<F: Real>(features: &Tensor<F>, k: usize, rng: &mut ChaCha12Rng) -> Tensor<F> {
    let n = features.shape()[0];
    let d = features.shape()[1];
    let row = |i: usize| &features.data()[i * d..(i + 1) * d];
    let mut centers: Tensor<F> = Tensor::zeros(&[k, d]);
    let first = rng.random_range(0..n);
    centers.data_mut()[0..d].copy_from_slice(row(first));
    let mut best_d: Vec<f64> = (0..n)
        .map(|i| sq_dist(row(i), &centers.data()[0..d]).as_f64())
        .collect();
    for c in 1..k {
        let total: f64 = best_d.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in best_d.iter().enumerate() {
                if t < w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let start = c * d;
        let picked = row(pick).to_vec();
        centers.data_mut()[start..start + d].copy_from_slice(&picked);
        for i in 0..n {
            let dist = sq_dist(row(i), &centers.data()[start..start + d]).as_f64();
            if dist < best_d[i] {
                best_d[i] = dist;
            }
        }
    }
    centers
}

const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITERS: usize = 300;

/// Fit k-means on `[N,K]` features, then map clusters to labels by maximizing
/// the matched counts via optimal bipartite matching.
pub fn fit_kmeans_classifier<F: Real>(
    features: &Tensor<F>,
    labels: &[u8],
    k: usize,
    seed: u64,
    source: PresenceSource,
) -> Result<KMeansClassifier<F>> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("features must be [N,K], got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    if n < k {
        return Err(Error::Config(format!("need at least k={k} points, got {n}")));
    }
    if labels.iter().any(|&y| y as usize >= k) {
        return Err(Error::Config(format!("labels must lie in 0..{k}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp_init(features, k, &mut rng);
    let row = |i: usize| &features.data()[i * d..(i + 1) * d];

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest_center(&centers, row(i));
        }
        // New centers as cluster means; empty clusters reseed from the point
        // farthest from its current center (lowest index on ties).
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for j in 0..d {
                sums[assign[i] * d + j] += row(i)[j].as_f64();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Candidates must come from clusters that can spare a point, so
            // no donor cluster goes empty in turn; lowest index on ties.
            let mut far_i: Option<usize> = None;
            let mut far_d = -1.0f64;
            for i in 0..n {
                if counts[assign[i]] < 2 {
                    continue;
                }
                let dist =
                    sq_dist(row(i), &centers.data()[assign[i] * d..(assign[i] + 1) * d]).as_f64();
                if dist > far_d {
                    far_d = dist;
                    far_i = Some(i);
                }
            }
            // n ≥ k guarantees a donor exists whenever some cluster is empty.
            let far_i = far_i.expect("a cluster with at least two points exists");
            let old = assign[far_i];
            counts[old] -= 1;
            for j in 0..d {
                sums[old * d + j] -= row(far_i)[j].as_f64();
            }
            assign[far_i] = c;
            counts[c] = 1;
            for j in 0..d {
                sums[c * d + j] = row(far_i)[j].as_f64();
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let mut s = 0.0;
            for j in 0..d {
                let new = sums[c * d + j] / counts[c] as f64;
                let old = centers.data()[c * d + j].as_f64();
                s += (new - old) * (new - old);
                centers.data_mut()[c * d + j] = F::of(new);
            }
            shift = shift.max(s.sqrt());
        }
        if shift < KMEANS_TOL {
            break;
        }
    }

    // Cost[c][y] = −(# label-y points in cluster c): minimizing total cost
    // maximizes the matched counts.
    let mut cost = Tensor::<f64>::zeros(&[k, k]);
    for (i, &y) in labels.iter().enumerate() {
        let a = nearest_center(&centers, row(i));
        cost.data_mut()[a * k + y as usize] -= 1.0;
    }
    let permutation = hungarian_match(&cost)?;
    Ok(KMeansClassifier { centers, permutation, source })
}

/// Predict labels for `[B,K]` features: nearest center, mapped through the
/// fitted permutation.
pub fn predict_kmeans<F: Real>(clf: &KMeansClassifier<F>, features: &Tensor<F>) -> Vec<u8> {
    let shape = features.shape();
    assert_eq!(shape.len(), 2, "features must be [B,K]");
    let d = shape[1];
    assert_eq!(d, clf.centers.shape()[1], "feature width mismatch");
    (0..shape[0])
        .map(|i| {
            let c = nearest_center(&clf.centers, &features.data()[i * d..(i + 1) * d]);
            clf.permutation[c] as u8
        })
        .collect()
}

/// Softmax cross-entropy loss and gradients of a linear classifier on one
/// batch; `y` holds class indices.
pub fn linear_ce_loss_and_grads<F: Real>(
    weights: &Tensor<F>,
    bias: &Tensor<F>,
    features: &Tensor<F>,
    labels: &[u8],
) -> (f64, Tensor<F>, Tensor<F>) {
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let c = bias.shape()[0];
    let mut gw = Tensor::zeros(&[d, c]);
    let mut gb = Tensor::zeros(&[c]);
    let mut loss = 0.0f64;
    let mut logits = vec![0.0f64; c];
    for i in 0..n {
        let x = &features.data()[i * d..(i + 1) * d];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut s = bias.data()[j].as_f64();
            for (jj, &xv) in x.iter().enumerate() {
                s += xv.as_f64() * weights.data()[jj * c + j].as_f64();
            }
            *l = s;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let y = labels[i] as usize;
        loss -= (exps[y] / z).ln();
        for j in 0..c {
            let p = exps[j] / z - if j == y { 1.0 } else { 0.0 };
            gb.data_mut()[j] += F::of(p / n as f64);
            for (jj, &xv) in x.iter().enumerate() {
                gw.data_mut()[jj * c + j] += F::of(p * xv.as_f64() / n as f64);
            }
        }
    }
    (loss / n as f64, gw, gb)
}

/// Train a linear softmax classifier by full-batch gradient descent.
/// Deterministic: zero init, fixed epoch count.
pub fn train_linear<F: Real>(
    features: &Tensor<F>,
    labels: &[u8],
    classes: usize,
    epochs: usize,
    lr: f64,
) -> LinearClassifier<F> {
    let d = features.shape()[1];
    let mut clf = LinearClassifier {
        weights: Tensor::zeros(&[d, classes]),
        bias: Tensor::zeros(&[classes]),
    };
    for _ in 0..epochs {
        let (_, gw, gb) = linear_ce_loss_and_grads(&clf.weights, &clf.bias, features, labels);
        for (w, g) in clf.weights.data_mut().iter_mut().zip(gw.data()) {
            *w -= F::of(lr) * *g;
        }
        for (b, g) in clf.bias.data_mut().iter_mut().zip(gb.data()) {
            *b -= F::of(lr) * *g;
        }
    }
    clf
}

/// Argmax-logit prediction; ties take the lowest class index.
pub fn predict_linear<F: Real>(clf: &LinearClassifier<F>, features: &Tensor<F>) -> Vec<u8> {
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let c = clf.bias.shape()[0];
    assert_eq!(d, clf.weights.shape()[0], "feature width mismatch");
    (0..n)
        .map(|i| {
            let x = &features.data()[i * d..(i + 1) * d];
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for j in 0..c {
                let mut s = clf.bias.data()[j].as_f64();
                for (jj, &xv) in x.iter().enumerate() {
                    s += xv.as_f64() * clf.weights.data()[jj * c + j].as_f64();
                }
                if s > best_v {
                    best_v = s;
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

/// Fraction of agreeing labels.
pub fn accuracy(pred: &[u8], truth: &[u8]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduce_posterior_sums_over_parts() {
        let ones = Tensor::<f64>::full(&[1, 2, 3], 1.0);
        assert_eq!(reduce_posterior(&ones).data(), &[3.0, 3.0]);
        let zeros = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert!(reduce_posterior(&zeros).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matching_prefers_zero_diagonal() {
        let mut cost = Tensor::<f64>::full(&[4, 4], 1.0);
        for i in 0..4 {
            cost.data_mut()[i * 4 + i] = 0.0;
        }
        assert_eq!(hungarian_match(&cost).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn matching_one_by_one() {
        let cost = Tensor::<f64>::full(&[1, 1], 3.5);
        assert_eq!(hungarian_match(&cost).unwrap(), vec![0]);
    }

    #[test]
    fn matching_rejects_non_square() {
        let cost = Tensor::<f64>::zeros(&[2, 3]);
        assert!(hungarian_match(&cost).is_err());
    }

    #[test]
    fn predict_center_hit_and_tie_rule() {
        let clf = KMeansClassifier {
            centers: Tensor::<f64>::from_vec(vec![0.0, 0.0, 2.0, 0.0, 4.0, 0.0], &[3, 2]),
            permutation: vec![2, 0, 1],
            source: PresenceSource::Prior,
        };
        // Exactly on center 1 → its label 0.
        let on_center = Tensor::from_vec(vec![2.0, 0.0], &[1, 2]);
        assert_eq!(predict_kmeans(&clf, &on_center), vec![0]);
        // Equidistant between centers 0 and 1 → lowest index wins → label 2.
        let midpoint = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]);
        assert_eq!(predict_kmeans(&clf, &midpoint), vec![2]);
    }

    #[test]
    fn zero_weight_linear_predicts_lowest_class() {
        let clf = LinearClassifier {
            weights: Tensor::<f64>::zeros(&[3, 5]),
            bias: Tensor::zeros(&[5]),
        };
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0], &[2, 3]);
        assert_eq!(predict_linear(&clf, &x), vec![0, 0]);
    }

    #[test]
    fn separable_two_class_linear_reaches_full_accuracy() {
        // Class 0 near (-1, 0), class 1 near (1, 0).
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..20 {
            let off = (i as f64) * 0.01;
            xs.extend([-1.0 - off, 0.2 * off]);
            ys.push(0u8);
            xs.extend([1.0 + off, -0.2 * off]);
            ys.push(1u8);
        }
        let x = Tensor::<f64>::from_vec(xs, &[40, 2]);
        let clf = train_linear(&x, &ys, 2, 200, 0.5);
        assert_eq!(accuracy(&predict_linear(&clf, &x), &ys), 1.0);
    }

    #[test]
    fn kmeans_separable_clouds_classify_perfectly() {
        // 10 tight clouds on a line, labels shuffled relative to position.
        let label_of_cloud = [3u8, 1, 4, 0, 9, 2, 7, 8, 5, 6];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for cloud in 0..10 {
            for p in 0..8 {
                let center = cloud as f64 * 10.0;
                xs.extend([center + 0.1 * p as f64, center - 0.05 * p as f64]);
                ys.push(label_of_cloud[cloud]);
            }
        }
        let x = Tensor::<f64>::from_vec(xs, &[80, 2]);
        let clf = fit_kmeans_classifier(&x, &ys, 10, 0, PresenceSource::Posterior).unwrap();
        assert_eq!(accuracy(&predict_kmeans(&clf, &x), &ys), 1.0);
        // Permutation is a bijection.
        let mut seen = vec![false; 10];
        for &p in &clf.permutation {
            assert!(!seen[p]);
            seen[p] = true;
        }
    }

    #[test]
    fn kmeans_duplicate_points_force_reseed_without_panic() {
        // Only two distinct locations but three clusters: one must reseed.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..12 {
            let v = if i % 2 == 0 { 0.0 } else { 5.0 };
            xs.extend([v, v]);
            ys.push((i % 2) as u8);
        }
        let x = Tensor::<f64>::from_vec(xs, &[12, 2]);
        let a = fit_kmeans_classifier(&x, &ys, 3, 7, PresenceSource::Prior).unwrap();
        let b = fit_kmeans_classifier(&x, &ys, 3, 7, PresenceSource::Prior).unwrap();
        assert!(a.centers.data().iter().all(|v| v.is_finite()));
        assert_eq!(a.centers.data(), b.centers.data());
        assert_eq!(a.permutation, b.permutation);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let x = Tensor::<f64>::zeros(&[3, 2]);
        assert!(fit_kmeans_classifier(&x, &[0, 1, 2], 10, 0, PresenceSource::Prior).is_err());
    }
}
