//! Local metric losses, the class-wise discrepancy loss and their weighted
//! combination, each with analytic gradients with respect to the embeddings.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::discrepancy::{phi_with_gradient, DiscrepancyKind};
use crate::distributions::{DiscreteDistribution, EmbeddingBatch};
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_LAMBDA_ANG: f64 = 2.0;
pub const DEFAULT_LAMBDA_XENT: f64 = 1.0;
pub const DEFAULT_LAMBDA_MMD: f64 = 0.2;
pub const DEFAULT_LAMBDA_WASSERSTEIN: f64 = 0.5;
pub const DEFAULT_ALPHA_ANGULAR: f64 = 30.0;
pub const DEFAULT_ALPHA_ANGULAR_NPAIRS: f64 = 45.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalLoss {
    Triplet,
    NPairs,
    Angular,
    AngularNPairs,
    None,
}

impl LocalLoss {
    /// Pair-based losses only need two rows per class.
    pub fn default_samples_per_class(self) -> usize {
        match self {
            LocalLoss::Triplet | LocalLoss::None => 10,
            _ => 2,
        }
    }

    pub fn default_alpha(self) -> f64 {
        match self {
            LocalLoss::AngularNPairs => DEFAULT_ALPHA_ANGULAR_NPAIRS,
            _ => DEFAULT_ALPHA_ANGULAR,
        }
    }
}

/// Discrepancy weight that goes with a discrepancy kind by default.
pub fn default_lambda(kind: &DiscrepancyKind) -> f64 {
    if kind.is_mmd() {
        DEFAULT_LAMBDA_MMD
    } else {
        DEFAULT_LAMBDA_WASSERSTEIN
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub local: LocalLoss,
    pub discrepancy: Option<DiscrepancyKind>,
    pub lambda: f64,
    pub lambda_xent: f64,
    pub lambda_ang: f64,
    pub tau: f64,
    pub alpha_degrees: f64,
    pub use_xent: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            local: LocalLoss::Triplet,
            discrepancy: None,
            lambda: DEFAULT_LAMBDA_MMD,
            lambda_xent: DEFAULT_LAMBDA_XENT,
            lambda_ang: DEFAULT_LAMBDA_ANG,
            tau: DEFAULT_TAU,
            alpha_degrees: DEFAULT_ALPHA_ANGULAR,
            use_xent: false,
        }
    }
}

impl LossConfig {
    /// A local loss plus an optional discrepancy, with the matching default
    /// weight and angle.
    pub fn new(local: LocalLoss, discrepancy: Option<DiscrepancyKind>) -> Self {
        Self {
            local,
            discrepancy,
            lambda: discrepancy.as_ref().map_or(DEFAULT_LAMBDA_MMD, default_lambda),
            alpha_degrees: local.default_alpha(),
            ..Self::default()
        }
    }
}

/// Multinomial linear classifier `logits = W z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearClassifier {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self { weights: Array2::zeros((classes, dim)), bias: Array1::zeros(classes) }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn logits(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weights.dot(&z) + &self.bias
    }

    /// Arg-max class, lowest index on ties.
    pub fn predict(&self, z: ArrayView1<'_, f64>) -> usize {
        let logits = self.logits(z);
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Loss parts and the gradient with respect to every embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub local_part: f64,
    pub phi_part: f64,
    pub xent_part: f64,
    pub gradient: Array2<f64>,
    pub classifier_gradient: Option<ClassifierGradient>,
}

/// Class-specific and class-distinct sets for class `k`, uniformly weighted.
pub fn group_classwise(batch: &EmbeddingBatch, k: usize) -> Result<(DiscreteDistribution, DiscreteDistribution)> {
    let (pos, neg) = split_indices(batch, k)?;
    let z = batch.vectors();
    let positive = DiscreteDistribution::uniform(z.select(Axis(0), &pos))?;
    let negative = DiscreteDistribution::uniform(z.select(Axis(0), &neg))?;
    Ok((positive, negative))
}

fn split_indices(batch: &EmbeddingBatch, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..batch.len()).partition(|&i| batch.labels()[i] == k);
    if pos.is_empty() {
        return Err(Error::ClassAbsent(k));
    }
    if neg.is_empty() {
        return Err(Error::DegenerateBatch(format!("class {k} has no class-distinct rows")));
    }
    Ok((pos, neg))
}

/// `-sum_k phi([Z]+_k, [Z]-_k)` over the classes present in the batch.
pub fn dcdl_loss(batch: &EmbeddingBatch, kind: &DiscrepancyKind) -> Result<(f64, Array2<f64>)> {
    let classes = batch.present_classes();
    if classes.len() < 2 {
        return Err(Error::DegenerateBatch("the discrepancy loss needs at least two classes".into()));
    }
    let z = batch.vectors();
    let mut value = 0.0;
    let mut grad = Array2::zeros(z.raw_dim());
    for k in classes {
        let (pos, neg) = split_indices(batch, k)?;
        let u = z.select(Axis(0), &pos);
        let v = z.select(Axis(0), &neg);
        let (phi, gu, gv) = phi_with_gradient(u.view(), v.view(), kind)?;
        value -= phi;
        for (row, &i) in pos.iter().enumerate() {
            grad.row_mut(i).scaled_add(-1.0, &gu.row(row));
        }
        for (row, &i) in neg.iter().enumerate() {
            grad.row_mut(i).scaled_add(-1.0, &gv.row(row));
        }
    }
    Ok((value, grad))
}

fn squared_distances(batch: &EmbeddingBatch) -> Array2<f64> {
    let z = batch.vectors();
    let n = z.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        z.row(i).iter().zip(z.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    })
}

/// Triplet hinge loss averaged over one mined triplet per anchor-positive
/// pair. The negative is the closest one farther than the positive
/// (semi-hard); if none is farther, the closest negative overall.
pub fn triplet_loss(batch: &EmbeddingBatch, tau: f64) -> Result<(f64, Array2<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", format!("margin must be positive, got {tau}")));
    }
    let labels = batch.labels();
    let n = batch.len();
    let d = squared_distances(batch);
    let z = batch.vectors();

    let mut triplets = Vec::new();
    for a in 0..n {
        let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
        if negatives.is_empty() {
            continue;
        }
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            let d_ap = d[[a, p]];
            let closest = |pred: &dyn Fn(f64) -> bool| {
                negatives.iter().copied().filter(|&j| pred(d[[a, j]])).fold(None, |best: Option<usize>, j| match best {
                    Some(b) if d[[a, b]] <= d[[a, j]] => Some(b),
                    _ => Some(j),
                })
            };
            let neg = closest(&|x| x > d_ap).or_else(|| closest(&|_| true)).expect("negatives non-empty");
            triplets.push((a, p, neg));
        }
    }
    if triplets.is_empty() {
        return Err(Error::DegenerateBatch("no valid triplet in batch".into()));
    }

    let count = triplets.len() as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(z.raw_dim());
    for (a, p, neg) in triplets {
        let margin = d[[a, p]] - d[[a, neg]] + tau;
        if margin <= 0.0 {
            continue;
        }
        value += margin;
        let (za, zp, zn) = (z.row(a), z.row(p), z.row(neg));
        grad.row_mut(a).scaled_add(2.0 / count, &(&zn - &zp));
        grad.row_mut(p).scaled_add(-2.0 / count, &(&za - &zp));
        grad.row_mut(neg).scaled_add(2.0 / count, &(&za - &zn));
    }
    Ok((value / count, grad))
}

/// Anchor, its designated positive and its negatives. The positive is the
/// next row of the same class in index order, wrapping around. Rows whose
/// class has a single member in the batch only serve as negatives.
fn anchor_pairs(batch: &EmbeddingBatch) -> Result<Vec<(usize, usize, Vec<usize>)>> {
    let labels = batch.labels();
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let mut members = vec![Vec::new(); batch.num_classes()];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let class = &members[labels[a]];
        if class.len() < 2 {
            continue;
        }
        let pos = class.iter().position(|&i| i == a).expect("row is a member of its class");
        let p = class[(pos + 1) % class.len()];
        let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a] && labels[j] != labels[p]).collect();
        if negatives.is_empty() {
            return Err(Error::DegenerateBatch(format!("row {a} has no negatives")));
        }
        out.push((a, p, negatives));
    }
    if out.is_empty() {
        return Err(Error::DegenerateBatch("no row has a positive partner".into()));
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum PairForm {
    NPairs,
    /// `t2 = tan^2(alpha)`
    Angular { t2: f64 },
}

/// Mean over anchors of `log(1 + sum_n exp(x_n))`, `x_n` given by `form`.
fn softplus_pair_loss(batch: &EmbeddingBatch, form: PairForm) -> Result<(f64, Array2<f64>)> {
    let z = batch.vectors();
    let anchors = anchor_pairs(batch)?;
    let count = anchors.len() as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(z.raw_dim());
    for (a, p, negatives) in anchors {
        let (za, zp) = (z.row(a), z.row(p));
        let ap = za.dot(&zp);
        let exponents: Vec<f64> = negatives
            .iter()
            .map(|&j| match form {
                PairForm::NPairs => za.dot(&z.row(j)) - ap,
                PairForm::Angular { t2 } => 4.0 * t2 * (&za + &zp).dot(&z.row(j)) - 2.0 * (1.0 + t2) * ap,
            })
            .collect();
        let max = exponents.iter().copied().fold(0.0, f64::max);
        let denom = (-max).exp() + exponents.iter().map(|x| (x - max).exp()).sum::<f64>();
        value += max + denom.ln();
        for (&j, &x) in negatives.iter().zip(&exponents) {
            let s = (x - max).exp() / denom / count;
            let zn = z.row(j);
            match form {
                PairForm::NPairs => {
                    grad.row_mut(a).scaled_add(s, &(&zn - &zp));
                    grad.row_mut(p).scaled_add(-s, &za);
                    grad.row_mut(j).scaled_add(s, &za);
                }
                PairForm::Angular { t2 } => {
                    let (c1, c2) = (4.0 * t2, 2.0 * (1.0 + t2));
                    grad.row_mut(a).scaled_add(s * c1, &zn);
                    grad.row_mut(a).scaled_add(-s * c2, &zp);
                    grad.row_mut(p).scaled_add(s * c1, &zn);
                    grad.row_mut(p).scaled_add(-s * c2, &za);
                    grad.row_mut(j).scaled_add(s * c1, &(&za + &zp));
                }
            }
        }
    }
    Ok((value / count, grad))
}

/// N-pairs loss `mean_a log(1 + sum_n exp(z_a.z_n - z_a.z_p))`.
pub fn npairs_loss(batch: &EmbeddingBatch) -> Result<(f64, Array2<f64>)> {
    softplus_pair_loss(batch, PairForm::NPairs)
}

/// Angular loss with angle bound `alpha_degrees`, which must lie in (0, 90).
pub fn angular_loss(batch: &EmbeddingBatch, alpha_degrees: f64) -> Result<(f64, Array2<f64>)> {
    if !(alpha_degrees > 0.0 && alpha_degrees < 90.0) {
        return Err(Error::param("alpha", format!("angle must lie in (0, 90) degrees, got {alpha_degrees}")));
    }
    let t = alpha_degrees.to_radians().tan();
    softplus_pair_loss(batch, PairForm::Angular { t2: t * t })
}

pub fn angular_npairs_loss(batch: &EmbeddingBatch, alpha_degrees: f64, lambda_ang: f64) -> Result<(f64, Array2<f64>)> {
    let (np, mut grad) = npairs_loss(batch)?;
    let (ang, ang_grad) = angular_loss(batch, alpha_degrees)?;
    grad.scaled_add(lambda_ang, &ang_grad);
    Ok((np + lambda_ang * ang, grad))
}

/// Mean negative log-softmax of the true class, with gradients for the
/// embeddings and for the classifier.
pub fn cross_entropy_loss(
    batch: &EmbeddingBatch,
    classifier: &LinearClassifier,
) -> Result<(f64, Array2<f64>, ClassifierGradient)> {
    let z = batch.vectors();
    let classes = classifier.num_classes();
    if classifier.weights.ncols() != batch.dim() {
        return Err(Error::DimensionMismatch { expected: classifier.weights.ncols(), got: batch.dim() });
    }
    if let Some(&label) = batch.labels().iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n = batch.len() as f64;
    let logits = z.dot(&classifier.weights.t()) + &classifier.bias;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    // residual = softmax - onehot, scaled by 1/N
    let mut residual = Array2::zeros(logits.raw_dim());
    let mut value = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let y = batch.labels()[i];
        value += lse - row[y];
        for k in 0..classes {
            residual[[i, k]] = (row[k] - lse).exp() / n;
        }
        residual[[i, y]] -= 1.0 / n;
    }
    let grad_z = residual.dot(&classifier.weights);
    let grad_w = residual.t().dot(&z);
    let grad_b = residual.sum_axis(Axis(0));
    Ok((value / n, grad_z, ClassifierGradient { weights: grad_w, bias: grad_b }))
}

/// `L_local + lambda * L_phi (+ lambda_xent * L_xent)`.
pub fn train_loss(
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
    classifier: Option<&LinearClassifier>,
) -> Result<LossValue> {
    if cfg.use_xent != classifier.is_some() {
        return Err(Error::param("classifier", "a classifier is required exactly when cross-entropy is enabled"));
    }
    if cfg.local == LocalLoss::None && cfg.discrepancy.is_none() && !cfg.use_xent {
        return Err(Error::param("loss", "no loss term selected"));
    }
    if !(cfg.lambda >= 0.0) || !(cfg.lambda_xent >= 0.0) {
        return Err(Error::param("lambda", "weights must be nonnegative"));
    }

    let (local_part, mut gradient) = match cfg.local {
        LocalLoss::Triplet => triplet_loss(batch, cfg.tau)?,
        LocalLoss::NPairs => npairs_loss(batch)?,
        LocalLoss::Angular => angular_loss(batch, cfg.alpha_degrees)?,
        LocalLoss::AngularNPairs => angular_npairs_loss(batch, cfg.alpha_degrees, cfg.lambda_ang)?,
        LocalLoss::None => (0.0, Array2::zeros((batch.len(), batch.dim()))),
    };

    let mut phi_part = 0.0;
    if let Some(kind) = &cfg.discrepancy {
        let (value, grad) = dcdl_loss(batch, kind)?;
        phi_part = value;
        gradient.scaled_add(cfg.lambda, &grad);
    }

    let mut xent_part = 0.0;
    let mut classifier_gradient = None;
    if let Some(classifier) = classifier {
        let (value, grad_z, mut grad_c) = cross_entropy_loss(batch, classifier)?;
        xent_part = value;
        gradient.scaled_add(cfg.lambda_xent, &grad_z);
        grad_c.weights *= cfg.lambda_xent;
        grad_c.bias *= cfg.lambda_xent;
        classifier_gradient = Some(grad_c);
    }

    let lambda = if cfg.discrepancy.is_some() { cfg.lambda } else { 0.0 };
    let lambda_xent = if cfg.use_xent { cfg.lambda_xent } else { 0.0 };
    Ok(LossValue {
        total: local_part + lambda * phi_part + lambda_xent * xent_part,
        local_part,
        phi_part,
        xent_part,
        gradient,
        classifier_gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn batch(v: Array2<f64>, labels: Vec<usize>) -> EmbeddingBatch {
        let k = labels.iter().max().unwrap() + 1;
        EmbeddingBatch::unnormalized(v, labels, k).unwrap()
    }

    #[test]
    fn grouping() {
        let b = batch(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], vec![0, 0, 1, 1]);
        let (p, n) = group_classwise(&b, 0).unwrap();
        assert_eq!((p.len(), n.len()), (2, 2));

        let b = batch(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], vec![0, 1, 2]);
        let (_, n) = group_classwise(&b, 1).unwrap();
        assert_eq!(n.supports(), array![[1.0, 0.0], [0.6, 0.8]]);

        let b = batch(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 0]);
        assert!(matches!(group_classwise(&b, 0), Err(Error::DegenerateBatch(_))));
        let b = EmbeddingBatch::unnormalized(array![[1.0, 0.0]], vec![0], 3).unwrap();
        assert!(matches!(group_classwise(&b, 2), Err(Error::ClassAbsent(2))));
    }

    #[test]
    fn dcdl_singletons() {
        let b = batch(array![[1.0, 0.0], [1.0, 0.05]], vec![0, 1]);
        let (value, _) = dcdl_loss(&b, &DiscrepancyKind::laplacian()).unwrap();
        let expected = -2.0 * (2.0 - 2.0 * (-1f64).exp());
        assert!((value - expected).abs() < 1e-12, "{value} vs {expected}");
    }

    #[test]
    fn dcdl_collapsed_classes() {
        let b = batch(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]], vec![0, 0, 1, 1]);
        for kind in [DiscrepancyKind::laplacian(), DiscrepancyKind::gaussian(), DiscrepancyKind::wasserstein()] {
            let (value, _) = dcdl_loss(&b, &kind).unwrap();
            assert!(value.abs() < 1e-6, "{kind:?}: {value}");
        }
        let single = batch(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 0]);
        assert!(dcdl_loss(&single, &DiscrepancyKind::laplacian()).is_err());
    }

    #[test]
    fn triplet_cases() {
        let b = batch(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![0, 0, 1]);
        assert_eq!(triplet_loss(&b, 0.5).unwrap().0, 0.0);
        let b = batch(array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], vec![0, 0, 1]);
        assert_eq!(triplet_loss(&b, 0.5).unwrap().0, 0.5);
        let b = batch(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1]);
        assert!(triplet_loss(&b, 0.5).is_err());
    }

    #[test]
    fn npairs_cases() {
        let same = batch(array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], vec![0, 0, 1]);
        assert!((npairs_loss(&same).unwrap().0 - 2f64.ln()).abs() < 1e-15);
        let ortho = batch(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![0, 0, 1]);
        assert!((npairs_loss(&ortho).unwrap().0 - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        let lonely = batch(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], vec![0, 1, 2]);
        assert!(matches!(npairs_loss(&lonely), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn angular_cases() {
        let ortho = batch(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![0, 0, 1]);
        let (v, _) = angular_loss(&ortho, 45.0).unwrap();
        assert!((v - (1.0 + (-4f64).exp()).ln()).abs() < 1e-12);
        assert!(angular_loss(&ortho, 90.0).is_err());
        let no_neg = batch(array![[1.0, 0.0], [1.0, 0.0]], vec![0, 0]);
        assert!(matches!(angular_loss(&no_neg, 45.0), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn angular_npairs_is_linear() {
        let b = batch(array![[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [-0.6, 0.8]], vec![0, 0, 1, 1]);
        let (np, gnp) = npairs_loss(&b).unwrap();
        let (ang, gang) = angular_loss(&b, 45.0).unwrap();
        let (zero, gzero) = angular_npairs_loss(&b, 45.0, 0.0).unwrap();
        assert_eq!(zero, np);
        assert_eq!(gzero, gnp);
        let (two, gtwo) = angular_npairs_loss(&b, 45.0, 2.0).unwrap();
        assert!((two - (np + 2.0 * ang)).abs() < 1e-12);
        assert!((&gtwo - &(&gnp + &(&gang * 2.0))).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_cases() {
        let b = batch(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 3]);
        let uniform = LinearClassifier::zeros(4, 2);
        assert!((cross_entropy_loss(&b, &uniform).unwrap().0 - 4f64.ln()).abs() < 1e-15);

        let mut sharp = LinearClassifier::zeros(2, 2);
        sharp.weights = array![[20.0, 0.0], [0.0, 20.0]];
        let b = batch(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1]);
        assert!(cross_entropy_loss(&b, &sharp).unwrap().0 < 1e-6);

        let b = EmbeddingBatch::unnormalized(array![[1.0, 0.0]], vec![2], 3).unwrap();
        assert!(matches!(cross_entropy_loss(&b, &sharp), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn train_loss_composition() {
        let b = batch(array![[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [-0.6, 0.8]], vec![0, 0, 1, 1]);
        let cfg = LossConfig { lambda: 0.0, ..LossConfig::new(LocalLoss::Triplet, Some(DiscrepancyKind::laplacian())) };
        let v = train_loss(&b, &cfg, None).unwrap();
        assert_eq!(v.total, v.local_part);

        let cfg = LossConfig { lambda: 1.0, ..LossConfig::new(LocalLoss::None, Some(DiscrepancyKind::wasserstein())) };
        let v = train_loss(&b, &cfg, None).unwrap();
        assert_eq!(v.total, v.phi_part);

        let none = LossConfig::new(LocalLoss::None, None);
        assert!(train_loss(&b, &none, None).is_err());
        let xent = LossConfig { use_xent: true, ..LossConfig::default() };
        assert!(train_loss(&b, &xent, None).is_err());
        let c = LinearClassifier::zeros(2, 2);
        let v = train_loss(&b, &xent, Some(&c)).unwrap();
        assert!((v.total - (v.local_part + v.xent_part)).abs() < 1e-12);
        assert!(v.classifier_gradient.is_some());
    }

    #[test]
    fn defaults() {
        let w = LossConfig::new(LocalLoss::Triplet, Some(DiscrepancyKind::wasserstein()));
        assert_eq!(w.lambda, 0.5);
        let l = LossConfig::new(LocalLoss::Triplet, Some(DiscrepancyKind::laplacian()));
        assert_eq!(l.lambda, 0.2);
        assert_eq!(LossConfig::new(LocalLoss::AngularNPairs, None).alpha_degrees, 45.0);
        assert_eq!(LossConfig::new(LocalLoss::Angular, None).alpha_degrees, 30.0);
        assert_eq!(w.tau, 0.5);
        assert_eq!(w.lambda_ang, 2.0);
    }
}
