//! Kernel discrepancies between point clouds: MMD with Laplacian or Gaussian
//! kernels, the energy distance, and the `phi` dispatcher used by the
//! class-wise loss.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::distributions::{ground_cost, pairwise_cost_points, DiscreteDistribution};
use crate::error::{Error, Result};
use crate::ot::{sinkhorn_marginals, SinkhornConfig};

pub const DEFAULT_SIGMA: f64 = 0.05;

/// Below this separation the Laplacian kernel gradient is taken as zero.
const LAPLACIAN_GRAD_FLOOR: f64 = 1e-12;

/// Which discrepancy `phi` computes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiscrepancyKind {
    MmdLaplacian { sigma: f64 },
    MmdGaussian { sigma: f64 },
    /// Sharp cost `<C, T>` of the entropic plan, `C = scale * |u - v|^p`.
    Wasserstein { sinkhorn: SinkhornConfig, p: f64, scale: f64 },
}

impl DiscrepancyKind {
    pub fn laplacian() -> Self {
        Self::MmdLaplacian { sigma: DEFAULT_SIGMA }
    }

    pub fn gaussian() -> Self {
        Self::MmdGaussian { sigma: DEFAULT_SIGMA }
    }

    /// `p = 2`, `scale = 1/2`, default Sinkhorn settings.
    pub fn wasserstein() -> Self {
        Self::Wasserstein { sinkhorn: SinkhornConfig::default(), p: 2.0, scale: 0.5 }
    }

    pub fn is_mmd(&self) -> bool {
        !matches!(self, Self::Wasserstein { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::MmdLaplacian { sigma } | Self::MmdGaussian { sigma } => {
                if !(sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
                }
                Ok(())
            }
            Self::Wasserstein { sinkhorn, p, scale } => {
                sinkhorn.validate()?;
                if !(p >= 1.0) {
                    return Err(Error::param("p", format!("exponent must be >= 1, got {p}")));
                }
                if !(scale > 0.0) {
                    return Err(Error::param("scale", format!("must be positive, got {scale}")));
                }
                Ok(())
            }
        }
    }
}

fn sq_dist(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    u.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Pointwise kernel value. Only defined for the MMD kinds.
pub fn kernel_eval(kind: &DiscrepancyKind, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), got: v.len() });
    }
    if !kind.is_mmd() {
        return Err(Error::param("kind", "the Wasserstein discrepancy has no pointwise kernel"));
    }
    kind.validate()?;
    Ok(kernel_value(kind, u, v))
}

/// Kernel value and its gradient with respect to `u`.
fn kernel_with_grad(kind: &DiscrepancyKind, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
    let diff = &u - &v;
    let sq = diff.dot(&diff);
    match *kind {
        DiscrepancyKind::MmdLaplacian { sigma } => {
            let r = sq.sqrt();
            let k = (-r / sigma).exp();
            if r < LAPLACIAN_GRAD_FLOOR {
                (k, Array1::zeros(u.len()))
            } else {
                (k, diff * (-k / (sigma * r)))
            }
        }
        DiscrepancyKind::MmdGaussian { sigma } => {
            let s2 = sigma * sigma;
            let k = (-sq / (2.0 * s2)).exp();
            (k, diff * (-k / s2))
        }
        DiscrepancyKind::Wasserstein { .. } => unreachable!("no pointwise kernel"),
    }
}

/// Uniform-average MMD expansion for an arbitrary kernel:
/// `mean k(u, u') - 2 mean k(u, v) + mean k(v, v')`.
pub fn mmd_with_kernel<K>(u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, kernel: K) -> Result<f64>
where
    K: Fn(ArrayView1<'_, f64>, ArrayView1<'_, f64>) -> f64,
{
    if u.ncols() != v.ncols() {
        return Err(Error::DimensionMismatch { expected: u.ncols(), got: v.ncols() });
    }
    if u.nrows() == 0 || v.nrows() == 0 {
        return Err(Error::Empty("point set"));
    }
    let mean = |x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>| -> f64 {
        let mut acc = 0.0;
        for a in x.rows() {
            for b in y.rows() {
                acc += kernel(a, b);
            }
        }
        acc / (x.nrows() * y.nrows()) as f64
    };
    Ok(mean(u, u) - 2.0 * mean(u, v) + mean(v, v))
}

/// MMD between the supports of `a` and `b`. Weights are ignored: every
/// support point counts equally.
pub fn mmd(a: &DiscreteDistribution, b: &DiscreteDistribution, kind: &DiscrepancyKind) -> Result<f64> {
    mmd_points(a.supports(), b.supports(), kind)
}

pub fn mmd_points(u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, kind: &DiscrepancyKind) -> Result<f64> {
    if !kind.is_mmd() {
        return Err(Error::param("kind", "mmd requires a kernel discrepancy"));
    }
    kind.validate()?;
    mmd_with_kernel(u, v, |x, y| kernel_value(kind, x, y))
}

fn kernel_value(kind: &DiscrepancyKind, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    match *kind {
        DiscrepancyKind::MmdLaplacian { sigma } => (-sq_dist(u, v).sqrt() / sigma).exp(),
        DiscrepancyKind::MmdGaussian { sigma } => (-sq_dist(u, v) / (2.0 * sigma * sigma)).exp(),
        DiscrepancyKind::Wasserstein { .. } => unreachable!("checked by caller"),
    }
}

/// MMD value with gradients with respect to every point of `u` and `v`.
pub fn mmd_with_gradient(
    u: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    kind: &DiscrepancyKind,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if !kind.is_mmd() {
        return Err(Error::param("kind", "mmd requires a kernel discrepancy"));
    }
    kind.validate()?;
    if u.ncols() != v.ncols() {
        return Err(Error::DimensionMismatch { expected: u.ncols(), got: v.ncols() });
    }
    let (n, m) = (u.nrows() as f64, v.nrows() as f64);
    let mut grad_u = Array2::zeros(u.raw_dim());
    let mut grad_v = Array2::zeros(v.raw_dim());
    let (mut uu, mut uv, mut vv) = (0.0, 0.0, 0.0);

    // Symmetric kernel: d/dx_a sum_{i,i'} k(x_i, x_i') = 2 sum_i' dk(x_a, x_i').
    for (a, xa) in u.rows().into_iter().enumerate() {
        for xb in u.rows() {
            let (k, g) = kernel_with_grad(kind, xa, xb);
            uu += k;
            grad_u.row_mut(a).scaled_add(2.0 / (n * n), &g);
        }
        for (b, yb) in v.rows().into_iter().enumerate() {
            let (k, g) = kernel_with_grad(kind, xa, yb);
            uv += k;
            grad_u.row_mut(a).scaled_add(-2.0 / (n * m), &g);
            grad_v.row_mut(b).scaled_add(2.0 / (n * m), &g);
        }
    }
    for (b, yb) in v.rows().into_iter().enumerate() {
        for yc in v.rows() {
            let (k, g) = kernel_with_grad(kind, yb, yc);
            vv += k;
            grad_v.row_mut(b).scaled_add(2.0 / (m * m), &g);
        }
    }
    let value = uu / (n * n) - 2.0 * uv / (n * m) + vv / (m * m);
    Ok((value, grad_u, grad_v))
}

/// Energy distance `E(a, b) - (E(a, a) + E(b, b)) / 2` with
/// `E(a, b) = sum_ij w_i w~_j scale |u_i - v_j|^p`.
pub fn energy_distance(a: &DiscreteDistribution, b: &DiscreteDistribution, p: f64, scale: f64) -> Result<f64> {
    let cross = weighted_energy(a, b, p, scale)?;
    let self_a = weighted_energy(a, a, p, scale)?;
    let self_b = weighted_energy(b, b, p, scale)?;
    Ok(cross - 0.5 * (self_a + self_b))
}

fn weighted_energy(a: &DiscreteDistribution, b: &DiscreteDistribution, p: f64, scale: f64) -> Result<f64> {
    let cost = pairwise_cost_points(a.supports(), b.supports(), p, scale)?;
    Ok(a.weights().dot(&cost.entries().dot(&b.weights())))
}

/// Class-wise discrepancy: MMD for the kernel kinds, sharp entropic transport
/// cost for the Wasserstein kind.
pub fn phi(a: &DiscreteDistribution, b: &DiscreteDistribution, kind: &DiscrepancyKind) -> Result<f64> {
    kind.validate()?;
    match *kind {
        DiscrepancyKind::MmdLaplacian { .. } | DiscrepancyKind::MmdGaussian { .. } => mmd(a, b, kind),
        DiscrepancyKind::Wasserstein { sinkhorn, p, scale } => {
            let cost = pairwise_cost_points(a.supports(), b.supports(), p, scale)?;
            let plan = sinkhorn_marginals(a.weights(), b.weights(), cost.entries(), &sinkhorn)?;
            Ok((&plan.coupling * &cost.entries()).sum())
        }
    }
}

/// `phi` between uniform point sets with gradients for every point. For the
/// Wasserstein kind the plan is held fixed (envelope gradient).
pub fn phi_with_gradient(
    u: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    kind: &DiscrepancyKind,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    kind.validate()?;
    match *kind {
        DiscrepancyKind::MmdLaplacian { .. } | DiscrepancyKind::MmdGaussian { .. } => mmd_with_gradient(u, v, kind),
        DiscrepancyKind::Wasserstein { sinkhorn, p, scale } => {
            let cost = pairwise_cost_points(u, v, p, scale)?;
            let wu = Array1::from_elem(u.nrows(), 1.0 / u.nrows() as f64);
            let wv = Array1::from_elem(v.nrows(), 1.0 / v.nrows() as f64);
            let plan = sinkhorn_marginals(wu.view(), wv.view(), cost.entries(), &sinkhorn)?;
            let value = (&plan.coupling * &cost.entries()).sum();
            let (grad_u, grad_v) = fixed_plan_gradient(u, v, plan.coupling.view(), p, scale);
            Ok((value, grad_u, grad_v))
        }
    }
}

/// Gradient of `sum_ij T_ij scale |u_i - v_j|^p` with `T` held constant.
pub fn fixed_plan_gradient(
    u: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    plan: ArrayView2<'_, f64>,
    p: f64,
    scale: f64,
) -> (Array2<f64>, Array2<f64>) {
    let mut grad_u = Array2::zeros(u.raw_dim());
    let mut grad_v = Array2::zeros(v.raw_dim());
    for (i, ui) in u.axis_iter(Axis(0)).enumerate() {
        for (j, vj) in v.axis_iter(Axis(0)).enumerate() {
            let t = plan[[i, j]];
            if t == 0.0 {
                continue;
            }
            let diff = &ui - &vj;
            let coef = if p == 2.0 {
                2.0 * scale
            } else {
                let r = diff.dot(&diff).sqrt();
                if r == 0.0 {
                    0.0
                } else {
                    scale * p * r.powf(p - 2.0)
                }
            };
            grad_u.row_mut(i).scaled_add(t * coef, &diff);
            grad_v.row_mut(j).scaled_add(-t * coef, &diff);
        }
    }
    (grad_u, grad_v)
}

/// Uniform-weight energy distance in kernel form, `MMD` with `k = -C / 2`.
/// Exposed for the duality check against [`energy_distance`].
pub fn energy_distance_kernel_form(u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, p: f64, scale: f64) -> Result<f64> {
    mmd_with_kernel(u, v, |x, y| -0.5 * ground_cost(x, y, p, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::make_distribution;
    use ndarray::array;

    #[test]
    fn kernel_values() {
        let u = array![0.0, 0.0];
        let v = array![0.03, 0.04];
        for kind in [DiscrepancyKind::laplacian(), DiscrepancyKind::gaussian()] {
            assert_eq!(kernel_eval(&kind, u.view(), u.view()).unwrap(), 1.0);
        }
        let l = kernel_eval(&DiscrepancyKind::laplacian(), u.view(), v.view()).unwrap();
        assert!((l - 0.367_879_441_171_442_3).abs() < 1e-12);
        let g = kernel_eval(&DiscrepancyKind::gaussian(), u.view(), v.view()).unwrap();
        assert!((g - 0.606_530_659_712_633_4).abs() < 1e-12);
        assert!(kernel_eval(&DiscrepancyKind::wasserstein(), u.view(), v.view()).is_err());
    }

    #[test]
    fn singleton_mmd() {
        let a = make_distribution(&[vec![0.0, 0.0]], None).unwrap();
        let b = make_distribution(&[vec![0.03, 0.04]], None).unwrap();
        let value = mmd(&a, &b, &DiscrepancyKind::laplacian()).unwrap();
        assert!((value - (2.0 - 2.0 * (-1f64).exp())).abs() < 1e-12);
        assert!(mmd(&a, &a, &DiscrepancyKind::laplacian()).unwrap().abs() < 1e-12);
        assert!(mmd(&a, &b, &DiscrepancyKind::wasserstein()).is_err());
    }

    #[test]
    fn mmd_ignores_weights_but_not_duplicates() {
        let a = make_distribution(&[vec![0.0], vec![0.1]], Some(&[0.9, 0.1])).unwrap();
        let a_uniform = make_distribution(&[vec![0.0], vec![0.1]], None).unwrap();
        let a_dup = make_distribution(&[vec![0.0], vec![0.0], vec![0.1]], None).unwrap();
        let b = make_distribution(&[vec![0.05]], None).unwrap();
        let kind = DiscrepancyKind::laplacian();
        assert_eq!(mmd(&a, &b, &kind).unwrap(), mmd(&a_uniform, &b, &kind).unwrap());
        assert!((mmd(&a_dup, &b, &kind).unwrap() - mmd(&a_uniform, &b, &kind).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn energy_distance_cases() {
        let a = make_distribution(&[vec![0.0, 0.0]], None).unwrap();
        let b = make_distribution(&[vec![3.0, 4.0]], None).unwrap();
        assert!((energy_distance(&a, &b, 2.0, 0.5).unwrap() - 12.5).abs() < 1e-12);
        assert!((energy_distance(&a, &b, 1.0, 1.0).unwrap() - 5.0).abs() < 1e-12);
        let c = make_distribution(&[vec![0.0, 1.0], vec![2.0, 0.5]], Some(&[0.3, 0.7])).unwrap();
        assert!(energy_distance(&c, &c, 2.0, 0.5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn phi_dispatch() {
        let a = make_distribution(&[vec![0.0], vec![1.0]], None).unwrap();
        let b = make_distribution(&[vec![2.0]], None).unwrap();
        assert!((phi(&a, &b, &DiscrepancyKind::wasserstein()).unwrap() - 1.25).abs() < 1e-12);
        assert!(phi(&a, &a, &DiscrepancyKind::laplacian()).unwrap().abs() < 1e-12);
        assert!(phi(&a, &a, &DiscrepancyKind::wasserstein()).unwrap().abs() < 1e-6);
    }

    #[test]
    fn laplacian_gradient_vanishes_at_coincident_points() {
        let u = array![[0.2, 0.1]];
        let (_, g) = kernel_with_grad(&DiscrepancyKind::laplacian(), u.row(0), u.row(0));
        assert_eq!(g, array![0.0, 0.0]);
    }

    #[test]
    fn invalid_sigma() {
        let kind = DiscrepancyKind::MmdGaussian { sigma: 0.0 };
        let u = array![0.0];
        assert!(kernel_eval(&kind, u.view(), u.view()).is_err());
    }
}
