//! Datasets: text ingestion, synthetic Gaussian mixtures, label-noise
//! protocols and class-balanced mini-batch sampling.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Raw feature rows with integer class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: features.nrows(), got: labels.len() });
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, classes: num_classes });
        }
        if labels.len() < num_classes {
            return Err(Error::param("dataset", format!("{} rows cannot cover {num_classes} classes", labels.len())));
        }
        Ok(Self { features, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.num_classes, self.split)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Serializes to the line format read by [`parse_dataset`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (y, row) in self.labels.iter().zip(self.features.rows()) {
            write!(out, "{y}").unwrap();
            for x in row {
                write!(out, ",{x}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Reads a dataset file: one sample per line, `label,x1,...,xd`. Lines
/// starting with `#` and blank lines are ignored.
pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_dataset(&text, split)
}

pub fn parse_dataset(text: &str, split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let token = fields.next().unwrap_or_default();
        let label: usize = token
            .parse()
            .map_err(|_| Error::Parse { line: lineno, reason: format!("unknown label token `{token}`") })?;
        let row: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Parse { line: lineno, reason: format!("bad feature value `{f}`") })
            })
            .collect::<Result<_>>()?;
        match dim {
            None if row.is_empty() => {
                return Err(Error::Parse { line: lineno, reason: "row has no features".into() })
            }
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::Parse {
                    line: lineno,
                    reason: format!("expected {d} features, found {}", row.len()),
                })
            }
            _ => {}
        }
        labels.push(label);
        values.extend(row);
    }
    let dim = dim.ok_or(Error::Empty("dataset file"))?;
    let features = Array2::from_shape_vec((labels.len(), dim), values).expect("rows checked for arity");
    let num_classes = labels.iter().max().map_or(0, |&k| k + 1);
    Dataset::new(features, labels, num_classes, split)
}

/// Isotropic unit-variance Gaussian classes around well separated means.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub means: Array2<f64>,
}

/// Largest cosine allowed between two mean directions (60 degrees).
const MAX_MEAN_COSINE: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 1000;

impl GaussianMixture {
    /// Means at `separation` times random unit directions whose pairwise
    /// angles are at least 60 degrees.
    pub fn new(classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::param("classes", "need at least two classes"));
        }
        if dim == 0 {
            return Err(Error::param("dim", "must be at least 1"));
        }
        if !(separation >= 0.0) || !separation.is_finite() {
            return Err(Error::param("separation", "must be finite and nonnegative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut directions: Vec<Array1<f64>> = Vec::with_capacity(classes);
        let mut attempts = 0;
        while directions.len() < classes {
            attempts += 1;
            if attempts > PLACEMENT_ATTEMPTS * classes {
                return Err(Error::RejectionFailed { classes, dim, attempts: attempts - 1 });
            }
            let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
            let norm = v.dot(&v).sqrt();
            if norm < 1e-12 {
                continue;
            }
            let v = v / norm;
            if directions.iter().all(|d| d.dot(&v) <= MAX_MEAN_COSINE) {
                directions.push(v);
            }
        }
        let mut means = Array2::zeros((classes, dim));
        for (k, d) in directions.iter().enumerate() {
            means.row_mut(k).assign(&(d * separation));
        }
        Ok(Self { means })
    }

    pub fn num_classes(&self) -> usize {
        self.means.nrows()
    }

    /// `per_class` rows per class, grouped by class.
    pub fn sample(&self, per_class: usize, split: Split, seed: u64) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::param("per_class", "must be positive"));
        }
        let (k, dim) = self.means.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Array2::zeros((k * per_class, dim));
        let mut labels = Vec::with_capacity(k * per_class);
        for class in 0..k {
            for r in 0..per_class {
                let mut row = features.row_mut(class * per_class + r);
                for (x, &m) in row.iter_mut().zip(self.means.row(class)) {
                    *x = m + rng.sample::<f64, _>(StandardNormal);
                }
                labels.push(class);
            }
        }
        Dataset::new(features, labels, k, split)
    }
}

pub fn synth_gaussian_mixture(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if per_class < 2 {
        return Err(Error::param("per_class", "need at least two samples per class"));
    }
    GaussianMixture::new(classes, dim, separation, seed)?.sample(per_class, Split::Train, seed.wrapping_add(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Clean,
    Symmetric,
    Asymmetric,
}

/// Label-noise protocol. `delta` is the corruption probability.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub delta: f64,
    pub transition_map: Vec<(usize, usize)>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn clean() -> Self {
        Self { kind: NoiseKind::Clean, delta: 0.0, transition_map: Vec::new(), seed: 0 }
    }

    pub fn symmetric(delta: f64, seed: u64) -> Self {
        Self { kind: NoiseKind::Symmetric, delta, transition_map: Vec::new(), seed }
    }

    pub fn asymmetric(delta: f64, transition_map: Vec<(usize, usize)>, seed: u64) -> Self {
        Self { kind: NoiseKind::Asymmetric, delta, transition_map, seed }
    }

    /// Class confusions for the ten-class object benchmark, by index:
    /// truck -> automobile, bird -> airplane, deer -> horse, cat <-> dog.
    pub fn cifar10_pairs() -> Vec<(usize, usize)> {
        vec![(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::param("delta", format!("must lie in [0, 1], got {}", self.delta)));
        }
        match self.kind {
            NoiseKind::Asymmetric if self.transition_map.is_empty() => {
                return Err(Error::param("transition_map", "asymmetric noise needs at least one pair"))
            }
            NoiseKind::Clean | NoiseKind::Symmetric if !self.transition_map.is_empty() => {
                return Err(Error::param("transition_map", "only asymmetric noise uses a transition map"))
            }
            _ => {}
        }
        for &(from, to) in &self.transition_map {
            if from >= num_classes || to >= num_classes {
                return Err(Error::LabelOutOfRange { label: from.max(to), classes: num_classes });
            }
        }
        let mut sources: Vec<usize> = self.transition_map.iter().map(|p| p.0).collect();
        sources.sort_unstable();
        if sources.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::param("transition_map", "a class is mapped more than once"));
        }
        Ok(())
    }

    pub fn mapped(&self, label: usize) -> usize {
        self.transition_map.iter().find(|p| p.0 == label).map_or(label, |p| p.1)
    }
}

/// Corrupts labels according to `spec`. Returns the new labels and a mask of
/// rows whose stored label changed.
pub fn inject_noise(labels: &[usize], spec: &NoiseSpec, num_classes: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    spec.validate(num_classes)?;
    if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::LabelOutOfRange { label, classes: num_classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noisy: Vec<usize> = labels
        .iter()
        .map(|&y| {
            if spec.kind == NoiseKind::Clean {
                return y;
            }
            let corrupt = rng.random::<f64>() < spec.delta;
            match (corrupt, spec.kind) {
                (true, NoiseKind::Symmetric) => rng.random_range(0..num_classes),
                (true, NoiseKind::Asymmetric) => spec.mapped(y),
                _ => y,
            }
        })
        .collect();
    let mask = labels.iter().zip(&noisy).map(|(a, b)| a != b).collect();
    Ok((noisy, mask))
}

/// Class-balanced mini-batches: every class drawn into a batch contributes
/// at least `per_class` rows, classes are visited round-robin in a seeded
/// order, and an epoch ends once every row has been emitted.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    members: Vec<Vec<usize>>,
    classes_per_batch: usize,
    batch_size: usize,
    seed: u64,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], num_classes: usize, batch_size: usize, per_class: usize, seed: u64) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::param("per_class", "must be positive"));
        }
        let mut members = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::LabelOutOfRange { label: y, classes: num_classes });
            }
            members[y].push(i);
        }
        for (class, m) in members.iter().enumerate() {
            if !m.is_empty() && m.len() < per_class {
                return Err(Error::InsufficientClass { class, have: m.len(), need: per_class });
            }
        }
        members.retain(|m| !m.is_empty());
        if members.is_empty() {
            return Err(Error::Empty("labels"));
        }
        let classes_per_batch = (batch_size / per_class).min(members.len());
        if classes_per_batch == 0 {
            return Err(Error::param("batch_size", format!("{batch_size} cannot hold {per_class} rows of one class")));
        }
        if members.len() >= 2 && classes_per_batch < 2 {
            return Err(Error::param("batch_size", "a batch must hold at least two classes"));
        }
        Ok(Self { members, classes_per_batch, batch_size, seed })
    }

    pub fn classes_per_batch(&self) -> usize {
        self.classes_per_batch
    }

    /// Index lists for epoch `epoch`. Deterministic in `(seed, epoch)`.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.members.len()).collect();
        order.shuffle(&mut rng);
        let mut queues: Vec<Vec<usize>> = self.members.clone();
        for q in &mut queues {
            q.shuffle(&mut rng);
        }
        let mut cursors = vec![0usize; queues.len()];
        let mut covered = vec![false; queues.len()];
        let mut next_class = 0;
        let mut batches = Vec::new();

        let base = self.batch_size / self.classes_per_batch;
        let extra = self.batch_size % self.classes_per_batch;
        while !covered.iter().all(|&c| c) {
            let mut batch = Vec::with_capacity(self.batch_size);
            for slot in 0..self.classes_per_batch {
                let class = order[next_class];
                next_class = (next_class + 1) % order.len();
                let want = (base + usize::from(slot < extra)).min(self.members[class].len());
                let start = batch.len();
                while batch.len() - start < want {
                    if cursors[class] == queues[class].len() {
                        covered[class] = true;
                        queues[class].shuffle(&mut rng);
                        cursors[class] = 0;
                    }
                    let row = queues[class][cursors[class]];
                    cursors[class] += 1;
                    if !batch[start..].contains(&row) {
                        batch.push(row);
                    }
                }
                if cursors[class] == queues[class].len() {
                    covered[class] = true;
                }
            }
            batches.push(batch);
        }
        batches
    }
}

/// Gathers rows of `features` in the given order.
pub fn gather_rows(features: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    features.select(Axis(0), indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dataset_text() {
        let d = parse_dataset("# label,x,y\n0,1.0,2.0\n1,0.5,-1\n\n0,3,4\n", Split::Train).unwrap();
        assert_eq!((d.len(), d.dim(), d.num_classes), (3, 2, 2));
        assert_eq!(d.labels, vec![0, 1, 0]);
        let again = parse_dataset(&d.to_text(), Split::Train).unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn parse_errors_name_lines() {
        let err = parse_dataset("0,1,2\n1,3\n", Split::Train).unwrap_err();
        assert_eq!(err, Error::Parse { line: 2, reason: "expected 2 features, found 1".into() });
        assert!(matches!(parse_dataset("", Split::Train), Err(Error::Empty(_))));
        assert!(matches!(parse_dataset("# only\n", Split::Train), Err(Error::Empty(_))));
        assert!(matches!(parse_dataset("cat,1,2\n", Split::Train), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_dataset("0,1,x\n", Split::Train), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_gaussian_mixture(3, 5, 4, 3.0, 7).unwrap();
        let b = synth_gaussian_mixture(3, 5, 4, 3.0, 7).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let c = synth_gaussian_mixture(3, 5, 4, 3.0, 8).unwrap();
        assert_ne!(a.to_text(), c.to_text());
        assert_eq!(a.class_counts(), vec![5, 5, 5]);
    }

    #[test]
    fn mean_directions_are_spread() {
        let g = GaussianMixture::new(5, 8, 2.0, 3).unwrap();
        for i in 0..5 {
            assert!((g.means.row(i).dot(&g.means.row(i)).sqrt() - 2.0).abs() < 1e-12);
            for j in 0..i {
                assert!(g.means.row(i).dot(&g.means.row(j)) / 4.0 <= 0.5 + 1e-12);
            }
        }
        assert!(matches!(GaussianMixture::new(3, 1, 1.0, 0), Err(Error::RejectionFailed { .. })));
        assert!(synth_gaussian_mixture(1, 5, 2, 1.0, 0).is_err());
        assert!(synth_gaussian_mixture(2, 1, 2, 1.0, 0).is_err());
    }

    #[test]
    fn clean_noise_is_identity() {
        let labels = vec![0, 1, 2, 1];
        for spec in [NoiseSpec::clean(), NoiseSpec::symmetric(0.0, 3), NoiseSpec::asymmetric(0.0, vec![(0, 1)], 3)] {
            let (noisy, mask) = inject_noise(&labels, &spec, 3).unwrap();
            assert_eq!(noisy, labels);
            assert!(mask.iter().all(|&m| !m));
        }
    }

    #[test]
    fn forced_asymmetric_flip() {
        let (noisy, mask) = inject_noise(&[0; 20], &NoiseSpec::asymmetric(1.0, vec![(0, 1)], 1), 2).unwrap();
        assert!(noisy.iter().all(|&y| y == 1));
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn noise_spec_validation() {
        assert!(inject_noise(&[0], &NoiseSpec::asymmetric(0.5, vec![(0, 3)], 1), 2).is_err());
        assert!(inject_noise(&[0], &NoiseSpec::asymmetric(0.5, vec![], 1), 2).is_err());
        assert!(inject_noise(&[0], &NoiseSpec::symmetric(1.5, 1), 2).is_err());
        assert!(inject_noise(&[0], &NoiseSpec::asymmetric(0.5, vec![(0, 1), (0, 0)], 1), 2).is_err());
        assert!(NoiseSpec::asymmetric(0.1, NoiseSpec::cifar10_pairs(), 0).validate(10).is_ok());
    }

    #[test]
    fn balanced_batches_cover_epoch() {
        let labels: Vec<usize> = (0..10).flat_map(|k| std::iter::repeat(k).take(25)).collect();
        let sampler = BalancedSampler::new(&labels, 10, 100, 10, 5).unwrap();
        let batches = sampler.epoch(0);
        let mut seen = vec![false; labels.len()];
        for b in &batches {
            assert_eq!(b.len(), 100);
            let mut counts = [0; 10];
            for &i in b {
                counts[labels[i]] += 1;
                seen[i] = true;
            }
            assert!(counts.iter().all(|&c| c == 10));
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(batches, sampler.epoch(0));
        assert_ne!(batches, sampler.epoch(1));

        let pairs = BalancedSampler::new(&labels, 10, 20, 2, 5).unwrap();
        for b in pairs.epoch(3) {
            let mut counts = [0; 10];
            b.iter().for_each(|&i| counts[labels[i]] += 1);
            assert!(counts.iter().all(|&c| c == 2));
        }
    }

    #[test]
    fn sampler_rejects_small_class() {
        let labels = vec![0, 0, 0, 1];
        assert!(matches!(
            BalancedSampler::new(&labels, 2, 4, 2, 0),
            Err(Error::InsufficientClass { class: 1, have: 1, need: 2 })
        ));
    }
}
