//! Embedding quality: linear-probe accuracy, KMeans clustering with NMI,
//! Recall@K and the Welch t statistic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distributions::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_loss, LinearClassifier};

fn sq_dist(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Fits softmax regression on the train set by full-batch gradient descent
/// from zero and returns the classifier.
pub fn fit_linear_probe(
    train: ArrayView2<'_, f64>,
    labels: &[usize],
    num_classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<LinearClassifier> {
    let batch = EmbeddingBatch::unnormalized(train.to_owned(), labels.to_vec(), num_classes)?;
    if batch.present_classes().len() < 2 {
        return Err(Error::DegenerateBatch("linear probe needs at least two classes".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::param("lr", "must be positive"));
    }
    let mut classifier = LinearClassifier::zeros(num_classes, train.ncols());
    for _ in 0..epochs {
        let (_, _, grad) = cross_entropy_loss(&batch, &classifier)?;
        classifier.weights.scaled_add(-lr, &grad.weights);
        classifier.bias.scaled_add(-lr, &grad.bias);
    }
    Ok(classifier)
}

pub fn accuracy(classifier: &LinearClassifier, z: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    if z.nrows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: z.nrows(), got: labels.len() });
    }
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let hits = z.rows().into_iter().zip(labels).filter(|(row, &y)| classifier.predict(*row) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Test accuracy of a linear probe trained on `(train, train_labels)`.
pub fn linear_probe(
    train: ArrayView2<'_, f64>,
    train_labels: &[usize],
    test: ArrayView2<'_, f64>,
    test_labels: &[usize],
    num_classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    if train.ncols() != test.ncols() {
        return Err(Error::DimensionMismatch { expected: train.ncols(), got: test.ncols() });
    }
    if let Some(&label) = test_labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::LabelOutOfRange { label, classes: num_classes });
    }
    let classifier = fit_linear_probe(train, train_labels, num_classes, epochs, lr)?;
    accuracy(&classifier, test, test_labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

/// Lloyd's algorithm from `k` distinct data points chosen by a seeded
/// shuffle. Empty clusters keep their previous center.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::param("k", "must be positive"));
    }
    if n < k {
        return Err(Error::param("k", format!("{k} clusters for {n} points")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if chosen.iter().all(|&c| points.row(c) != points.row(i)) {
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    let mut centers = Array2::zeros((k, points.ncols()));
    for (c, &i) in chosen.iter().enumerate() {
        centers.row_mut(c).assign(&points.row(i));
    }

    let nearest = |centers: &Array2<f64>, row: ArrayView1<'_, f64>| {
        let mut best = (0, f64::INFINITY);
        for (c, center) in centers.rows().into_iter().enumerate() {
            let d = sq_dist(row, center);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    };

    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut changed = false;
        for (i, row) in points.rows().into_iter().enumerate() {
            let c = nearest(&centers, row).0;
            changed |= assignment[i] != c;
            assignment[i] = c;
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for (row, &c) in points.rows().into_iter().zip(&assignment) {
            sums.row_mut(c).scaled_add(1.0, &row);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    if assignment[0] == usize::MAX {
        for (i, row) in points.rows().into_iter().enumerate() {
            assignment[i] = nearest(&centers, row).0;
        }
    }
    let inertia = points.rows().into_iter().zip(&assignment).map(|(row, &c)| sq_dist(row, centers.row(c))).sum();
    Ok(KMeansResult { assignment, centers, inertia, iterations })
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies. Two constant partitions score 1, one constant partition 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.is_empty() {
        return Err(Error::Empty("assignments"));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ca.len() == 1 && cb.len() == 1 {
        return Ok(1.0);
    }
    if ca.len() == 1 || cb.len() == 1 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        mi += pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln();
    }
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

/// For each `k`, the fraction of points whose `k` nearest neighbours
/// (self excluded, ties broken by index) include one of the same label.
pub fn recall_at_k(z: ArrayView2<'_, f64>, labels: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = labels.len();
    if z.nrows() != n {
        return Err(Error::DimensionMismatch { expected: z.nrows(), got: n });
    }
    for &k in ks {
        if k == 0 || k >= n {
            return Err(Error::param("k", format!("need 1 <= k < {n}, got {k}")));
        }
    }
    // rank of the first same-label neighbour, None if there is none
    let first_hit: Vec<Option<usize>> = (0..n)
        .map(|q| {
            let mut others: Vec<(f64, usize)> =
                (0..n).filter(|&j| j != q).map(|j| (sq_dist(z.row(q), z.row(j)), j)).collect();
            others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            others.iter().position(|&(_, j)| labels[j] == labels[q])
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

/// `(mean_a - mean_b) / sqrt(std_a^2/n_a + std_b^2/n_b)`
pub fn welch_t(mean_a: f64, std_a: f64, n_a: usize, mean_b: f64, std_b: f64, n_b: usize) -> Result<f64> {
    if n_a < 2 || n_b < 2 {
        return Err(Error::param("n", "each group needs at least two samples"));
    }
    if !(std_a >= 0.0) || !(std_b >= 0.0) {
        return Err(Error::param("std", "standard deviations must be nonnegative"));
    }
    let se = (std_a * std_a / n_a as f64 + std_b * std_b / n_b as f64).sqrt();
    if se == 0.0 && mean_a == mean_b {
        return Err(Error::NonFinite("welch_t: zero variance and equal means"));
    }
    Ok((mean_a - mean_b) / se)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub nmi: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub notes: String,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("accuracy={}\nnmi={}\n", self.accuracy, self.nmi);
        for (k, r) in &self.recall_at {
            writeln!(out, "recall@{k}={r}").unwrap();
        }
        if !self.notes.is_empty() {
            writeln!(out, "notes={}", self.notes.replace('\n', " ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut report = Self { accuracy: f64::NAN, nmi: f64::NAN, recall_at: BTreeMap::new(), notes: String::new() };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |reason: &str| Error::Parse { line: i + 1, reason: reason.to_string() };
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let number = || value.trim().parse::<f64>().map_err(|_| bad("bad number"));
            match key.trim() {
                "accuracy" => report.accuracy = number()?,
                "nmi" => report.nmi = number()?,
                "notes" => report.notes = value.to_string(),
                other => {
                    let k = other
                        .strip_prefix("recall@")
                        .and_then(|k| k.parse().ok())
                        .ok_or_else(|| bad(&format!("unknown key `{other}`")))?;
                    report.recall_at.insert(k, number()?);
                }
            }
        }
        if report.accuracy.is_nan() || report.nmi.is_nan() {
            return Err(Error::Parse { line: 0, reason: "missing accuracy or nmi".into() });
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub kmeans_seed: u64,
    pub kmeans_iters: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: vec![1, 2, 4], probe_epochs: 300, probe_lr: 2.0, kmeans_seed: 0, kmeans_iters: 100 }
    }
}

/// Probe accuracy on the test set, NMI of a KMeans clustering of the test
/// embeddings against their labels, and test-set Recall@K.
pub fn evaluate(
    train: ArrayView2<'_, f64>,
    train_labels: &[usize],
    test: ArrayView2<'_, f64>,
    test_labels: &[usize],
    num_classes: usize,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let accuracy = linear_probe(train, train_labels, test, test_labels, num_classes, opts.probe_epochs, opts.probe_lr)?;
    let clusters = kmeans(test, num_classes, opts.kmeans_seed, opts.kmeans_iters)?;
    let nmi = nmi(&clusters.assignment, test_labels)?;
    let recall_at = recall_at_k(test, test_labels, &opts.ks)?;
    Ok(EvalReport { accuracy, nmi, recall_at, notes: String::new() })
}
