//! Weighted point clouds, pairwise cost matrices and embedding batches.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Weights below this are treated as zero mass after normalization.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Tolerance used when validating that embeddings lie on the unit sphere.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A finite, weighted set of support points in `R^l`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    supports: Array2<f64>,
    weights: Array1<f64>,
}

impl DiscreteDistribution {
    /// Builds a distribution from a row-per-point matrix. Omitted weights
    /// default to uniform.
    pub fn new(supports: Array2<f64>, weights: Option<Array1<f64>>) -> Result<Self> {
        let (n, l) = supports.dim();
        if n == 0 {
            return Err(Error::Empty("support points"));
        }
        if l == 0 {
            return Err(Error::param("supports", "dimension must be at least 1"));
        }
        if supports.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("support points"));
        }
        let weights = match weights {
            None => Array1::from_elem(n, 1.0 / n as f64),
            Some(w) => {
                if w.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: w.len() });
                }
                normalize_weights(w)?
            }
        };
        Ok(Self { supports, weights })
    }

    /// Uniform distribution over the given rows.
    pub fn uniform(supports: Array2<f64>) -> Result<Self> {
        Self::new(supports, None)
    }

    pub fn supports(&self) -> ArrayView2<'_, f64> {
        self.supports.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn len(&self) -> usize {
        self.supports.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.supports.ncols()
    }
}

/// Builds a distribution from a list of points and optional weights.
pub fn make_distribution(points: &[Vec<f64>], weights: Option<&[f64]>) -> Result<DiscreteDistribution> {
    let first = points.first().ok_or(Error::Empty("support points"))?;
    let l = first.len();
    for p in points {
        if p.len() != l {
            return Err(Error::DimensionMismatch { expected: l, got: p.len() });
        }
    }
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let supports = Array2::from_shape_vec((points.len(), l), flat)
        .map_err(|e| Error::param("points", e.to_string()))?;
    DiscreteDistribution::new(supports, weights.map(|w| Array1::from(w.to_vec())))
}

/// Normalizes nonnegative weights to sum to one. Entries that fall below
/// [`WEIGHT_FLOOR`] are zeroed and the remainder renormalized. A vector that
/// already sums to one is returned unchanged, which makes the map idempotent.
pub fn normalize_weights(mut w: Array1<f64>) -> Result<Array1<f64>> {
    for (index, &value) in w.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite("weights"));
        }
        if value < 0.0 {
            return Err(Error::NegativeWeight { index, value });
        }
    }
    let total: f64 = w.sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let already_normalized = (total - 1.0).abs() <= WEIGHT_FLOOR && w.iter().all(|&x| x == 0.0 || x >= WEIGHT_FLOOR);
    if already_normalized {
        return Ok(w);
    }
    w.mapv_inplace(|x| x / total);
    if w.iter().any(|&x| x > 0.0 && x < WEIGHT_FLOOR) {
        w.mapv_inplace(|x| if x < WEIGHT_FLOOR { 0.0 } else { x });
        let total: f64 = w.sum();
        w.mapv_inplace(|x| x / total);
    }
    Ok(w)
}

/// Dense `n x m` matrix of transport costs `scale * d(u_i, v_j)^p`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
    exponent: f64,
    scale: f64,
}

impl CostMatrix {
    /// Wraps an explicit matrix. Entries must be finite and nonnegative.
    pub fn from_entries(entries: Array2<f64>, exponent: f64, scale: f64) -> Result<Self> {
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("cost entries"));
        }
        if entries.iter().any(|&x| x < 0.0) {
            return Err(Error::param("cost", "entries must be nonnegative"));
        }
        Ok(Self { entries, exponent, scale })
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.dim()
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }
}

/// Cost of moving unit mass from `u` to `v`: `scale * |u - v|^p`.
pub fn ground_cost(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, p: f64, scale: f64) -> f64 {
    let sq: f64 = u.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    if p == 2.0 {
        scale * sq
    } else {
        scale * sq.sqrt().powf(p)
    }
}

/// Pairwise cost matrix between the supports of `a` and `b`.
pub fn pairwise_cost(a: &DiscreteDistribution, b: &DiscreteDistribution, p: f64, scale: f64) -> Result<CostMatrix> {
    pairwise_cost_points(a.supports(), b.supports(), p, scale)
}

pub(crate) fn pairwise_cost_points(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    p: f64,
    scale: f64,
) -> Result<CostMatrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch { expected: a.ncols(), got: b.ncols() });
    }
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::param("p", format!("exponent must be >= 1, got {p}")));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::param("scale", format!("must be positive, got {scale}")));
    }
    let mut entries = Array2::zeros((a.nrows(), b.nrows()));
    for (i, u) in a.axis_iter(Axis(0)).enumerate() {
        for (j, v) in b.axis_iter(Axis(0)).enumerate() {
            entries[[i, j]] = ground_cost(u, v, p, scale);
        }
    }
    CostMatrix::from_entries(entries, p, scale)
}

/// Mini-batch of embeddings with their integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl EmbeddingBatch {
    /// Validated constructor: rows must have unit norm.
    pub fn new(vectors: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let batch = Self::unnormalized(vectors, labels, num_classes)?;
        for (i, row) in batch.vectors.axis_iter(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::param("vectors", format!("row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(batch)
    }

    /// Skips the unit-norm check. The losses are defined for arbitrary
    /// vectors, which is what finite-difference probes need.
    pub fn unnormalized(vectors: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if vectors.nrows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: vectors.nrows(), got: labels.len() });
        }
        if vectors.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embeddings"));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, classes: num_classes });
        }
        Ok(Self { vectors, labels, num_classes })
    }

    /// Rescales every row to unit norm before validating.
    pub fn normalized(mut vectors: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        for mut row in vectors.axis_iter_mut(Axis(0)) {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::param("vectors", "cannot normalize a zero row"));
            }
            row.mapv_inplace(|x| x / norm);
        }
        Self::new(vectors, labels, num_classes)
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<usize>) {
        (self.vectors, self.labels)
    }

    /// Classes that occur in the batch, in increasing order.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for &y in &self.labels {
            seen[y] = true;
        }
        seen.iter().enumerate().filter_map(|(k, &s)| s.then_some(k)).collect()
    }

    /// Same labels, different vectors. Used by gradient probes.
    pub fn with_vectors(&self, vectors: Array2<f64>) -> Result<Self> {
        Self::unnormalized(vectors, self.labels.clone(), self.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn uniform_default_weights() {
        let d = make_distribution(&[vec![0.0], vec![1.0], vec![2.0]], None).unwrap();
        for &w in d.weights() {
            assert_eq!(w, 1.0 / 3.0);
        }
    }

    #[test]
    fn weights_are_normalized() {
        let d = make_distribution(&[vec![0.0], vec![1.0]], Some(&[2.0, 2.0])).unwrap();
        assert_eq!(d.weights().to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            make_distribution(&[vec![0.0], vec![1.0]], Some(&[1.0, -1.0])),
            Err(Error::NegativeWeight { index: 1, .. })
        ));
        assert!(matches!(make_distribution(&[], None), Err(Error::Empty(_))));
        assert!(matches!(
            make_distribution(&[vec![0.0], vec![1.0, 2.0]], None),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(make_distribution(&[vec![0.0]], Some(&[0.0])), Err(Error::ZeroMass)));
    }

    #[test]
    fn tiny_weights_are_clamped() {
        let w = normalize_weights(array![1.0, 1e-14, 1.0]).unwrap();
        assert_eq!(w[1], 0.0);
        assert_eq!(w[0], 0.5);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn scaled_squared_cost() {
        let a = make_distribution(&[vec![0.0]], None).unwrap();
        let b = make_distribution(&[vec![2.0]], None).unwrap();
        let c = pairwise_cost(&a, &b, 2.0, 0.5).unwrap();
        assert_eq!(c.entries(), array![[2.0]]);

        let a = make_distribution(&[vec![0.0, 0.0], vec![1.0, 0.0]], None).unwrap();
        let b = make_distribution(&[vec![0.0, 1.0]], None).unwrap();
        let c = pairwise_cost(&a, &b, 2.0, 0.5).unwrap();
        assert_eq!(c.entries(), array![[0.5], [1.0]]);
    }

    #[test]
    fn cost_rejects_small_exponent() {
        let a = make_distribution(&[vec![0.0]], None).unwrap();
        assert!(pairwise_cost(&a, &a, 0.5, 1.0).is_err());
        let b = make_distribution(&[vec![0.0, 1.0]], None).unwrap();
        assert!(matches!(pairwise_cost(&a, &b, 2.0, 1.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn non_integer_exponent() {
        let a = make_distribution(&[vec![0.0, 0.0]], None).unwrap();
        let b = make_distribution(&[vec![3.0, 4.0]], None).unwrap();
        let c = pairwise_cost(&a, &b, 1.5, 1.0).unwrap();
        assert!((c.entries()[[0, 0]] - 5f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn batch_validation() {
        assert!(EmbeddingBatch::new(array![[1.0, 0.0], [0.6, 0.8]], vec![0, 1], 2).is_ok());
        assert!(EmbeddingBatch::new(array![[1.0, 1.0]], vec![0], 2).is_err());
        assert!(matches!(
            EmbeddingBatch::new(array![[1.0, 0.0]], vec![2], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        let b = EmbeddingBatch::normalized(array![[3.0, 4.0]], vec![0], 1).unwrap();
        assert!((b.vectors()[[0, 1]] - 0.8).abs() < 1e-15);
    }

    fn points(max_n: usize, dim: usize) -> impl Strategy<Value = Array2<f64>> {
        (1..=max_n).prop_flat_map(move |n| {
            prop::collection::vec(-3.0f64..3.0, n * dim)
                .prop_map(move |v| Array2::from_shape_vec((n, dim), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(w in prop::collection::vec(0.0f64..10.0, 1..12)) {
            prop_assume!(w.iter().sum::<f64>() > 0.0);
            let once = normalize_weights(Array1::from(w)).unwrap();
            let twice = normalize_weights(once.clone()).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!((once.sum() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cost_is_nonnegative_and_symmetric(a in points(6, 3), b in points(6, 3), p in 1.0f64..3.0) {
            let a = DiscreteDistribution::uniform(a).unwrap();
            let b = DiscreteDistribution::uniform(b).unwrap();
            let ab = pairwise_cost(&a, &b, p, 0.5).unwrap();
            let ba = pairwise_cost(&b, &a, p, 0.5).unwrap();
            prop_assert!(ab.entries().iter().all(|&x| x >= 0.0));
            for i in 0..a.len() {
                for j in 0..b.len() {
                    prop_assert!((ab.entries()[[i, j]] - ba.entries()[[j, i]]).abs() <= 1e-12);
                }
            }
            let aa = pairwise_cost(&a, &a, p, 0.5).unwrap();
            for i in 0..a.len() {
                prop_assert_eq!(aa.entries()[[i, i]], 0.0);
            }
        }
    }
}
