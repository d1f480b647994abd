//! Invariant suite behind `dcdl selftest`: marginal feasibility, epsilon
//! limits, oracle equivalences and finite-difference gradient checks on
//! small seeded instances.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::discrepancy::{energy_distance, energy_distance_kernel_form, fixed_plan_gradient, kernel_eval, mmd_with_kernel, DiscrepancyKind};
use crate::distributions::{pairwise_cost, DiscreteDistribution, EmbeddingBatch};
use crate::error::Result;
use crate::eval::{nmi, recall_at_k, welch_t};
use crate::losses::{
    angular_loss, angular_npairs_loss, cross_entropy_loss, dcdl_loss, npairs_loss, triplet_loss, LinearClassifier,
};
use crate::ot::{exact_ot, regularized_objective, sinkhorn, sinkhorn_divergence, transport_cost, SinkhornConfig};
use crate::reference;
use crate::trainer::EmbeddingModel;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Test harness hooks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SelftestOptions {
    /// Multiplies the kernel used by the MMD oracle check by `1 + x`.
    pub kernel_perturbation: f64,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, spread: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal) * spread)
}

fn uniform_dist(points: Array2<f64>) -> DiscreteDistribution {
    DiscreteDistribution::uniform(points).expect("nonempty")
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let w = Array1::from_shape_simple_fn(n, || rng.random_range(0.1..1.0));
    let s = w.sum();
    w / s
}

fn labels_for(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

/// Unit vectors scattered around one random direction per class.
fn clustered_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize, spread: f64) -> EmbeddingBatch {
    let labels = labels_for(n, classes);
    let centers = gaussian(rng, classes, dim, 1.0);
    let mut z = gaussian(rng, n, dim, spread);
    for (mut row, &y) in z.rows_mut().into_iter().zip(&labels) {
        row += &centers.row(y);
    }
    EmbeddingBatch::normalized(z, labels, classes).expect("nonzero rows")
}

/// Like `f64::max`, but a NaN candidate poisons the result.
fn worse(current: f64, candidate: f64) -> f64 {
    if candidate.is_nan() {
        f64::INFINITY
    } else {
        current.max(candidate)
    }
}

fn record(checks: &mut Vec<Check>, name: &'static str, worst: f64, limit: f64) {
    checks.push(Check { name, passed: worst <= limit, detail: format!("worst {worst:.3e}, limit {limit:.0e}") });
}

type GradFn = dyn Fn(&EmbeddingBatch) -> Result<(f64, Array2<f64>)>;

fn gradient_error(batch: &EmbeddingBatch, f: &GradFn, h: f64) -> Result<f64> {
    let (_, analytic) = f(batch)?;
    let numeric = reference::central_difference(
        |x| f(&batch.with_vectors(x.clone()).expect("finite")).map(|v| v.0).unwrap_or(f64::NAN),
        &batch.vectors().to_owned(),
        h,
    );
    Ok(reference::relative_error(analytic.iter(), numeric.iter(), 1e-8))
}

pub fn run(opts: &SelftestOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checks = Vec::new();

    // sinkhorn marginals
    let mut worst: f64 = 0.0;
    for (t, eps) in [2.5e-3, 0.1, 1.0].iter().cycle().take(15).enumerate() {
        let (n, m) = (1 + t % 7, 2 + (t * 3) % 8);
        let a = DiscreteDistribution::new(gaussian(&mut rng, n, 2, 0.5), Some(random_weights(&mut rng, n)))?;
        let b = DiscreteDistribution::new(gaussian(&mut rng, m, 2, 0.5), Some(random_weights(&mut rng, m)))?;
        let cost = pairwise_cost(&a, &b, 2.0, 0.5)?;
        let cfg = SinkhornConfig { max_iterations: 200_000, ..SinkhornConfig::with_epsilon(*eps) };
        let plan = sinkhorn(&a, &b, &cost, &cfg)?;
        worst = worse(worst, if plan.converged { plan.max_marginal_violation() } else { f64::INFINITY });
    }
    record(&mut checks, "sinkhorn marginals", worst, 1e-6);

    // small epsilon limit against the exact solver
    let mut worst: f64 = 0.0;
    for t in 0..8 {
        let (n, m) = (2 + t % 4, 2 + (t * 5) % 5);
        let a = uniform_dist(gaussian(&mut rng, n, 2, 0.5));
        let b = uniform_dist(gaussian(&mut rng, m, 2, 0.5));
        let cost = pairwise_cost(&a, &b, 2.0, 0.5)?;
        let cfg = SinkhornConfig { max_iterations: 500_000, ..SinkhornConfig::with_epsilon(1e-3 * cost.max()) };
        let plan = sinkhorn(&a, &b, &cost, &cfg)?;
        let (_, exact) = exact_ot(&a, &b, &cost)?;
        worst = worse(worst, (transport_cost(&plan, &cost)? - exact).abs() / exact);
    }
    record(&mut checks, "small-epsilon limit", worst, 1e-2);

    // large epsilon limit against the energy distance
    let mut worst: f64 = 0.0;
    for t in 0..8 {
        let a = uniform_dist(gaussian(&mut rng, 2 + t % 3, 2, 1.0));
        let b = uniform_dist(gaussian(&mut rng, 3 + t % 2, 2, 1.0));
        let sd = sinkhorn_divergence(&a, &b, 2.0, 0.5, &SinkhornConfig::with_epsilon(1e6))?;
        let ed = energy_distance(&a, &b, 2.0, 0.5)?;
        worst = worse(worst, (sd - ed).abs() / ed.abs());
    }
    record(&mut checks, "large-epsilon limit", worst, 1e-4);

    // energy distance as an MMD
    let mut worst: f64 = 0.0;
    for t in 0..8 {
        let u = gaussian(&mut rng, 2 + t % 4, 3, 1.0);
        let v = gaussian(&mut rng, 3 + t % 3, 3, 1.0);
        let p = [1.0, 1.5, 2.0][t % 3];
        let ed = energy_distance(&uniform_dist(u.clone()), &uniform_dist(v.clone()), p, 0.5)?;
        worst = worse(worst, (ed - energy_distance_kernel_form(u.view(), v.view(), p, 0.5)?).abs());
    }
    record(&mut checks, "kernel duality", worst, 1e-12);

    // exact solver against assignment enumeration
    let mut worst: f64 = 0.0;
    for n in 1..=6 {
        let a = uniform_dist(gaussian(&mut rng, n, 2, 1.0));
        let b = uniform_dist(gaussian(&mut rng, n, 2, 1.0));
        let cost = pairwise_cost(&a, &b, 2.0, 0.5)?;
        let (_, exact) = exact_ot(&a, &b, &cost)?;
        worst = worse(worst, (exact - reference::assignment_cost(cost.entries())).abs());
    }
    record(&mut checks, "exact transport oracle", worst, 1e-9);

    // MMD against the closed-form reference; the perturbation hook feeds in here
    let mut worst: f64 = 0.0;
    for t in 0..6 {
        let u = gaussian(&mut rng, 2 + t % 3, 3, 0.05);
        let v = gaussian(&mut rng, 3 + t % 2, 3, 0.05);
        for kind in [DiscrepancyKind::laplacian(), DiscrepancyKind::gaussian()] {
            let value = mmd_with_kernel(u.view(), v.view(), |x, y| {
                kernel_eval(&kind, x, y).expect("kernel kind") * (1.0 + opts.kernel_perturbation)
            })?;
            let expected = match kind {
                DiscrepancyKind::MmdLaplacian { sigma } => reference::mmd_laplacian(u.view(), v.view(), sigma),
                _ => reference::mmd_gaussian(u.view(), v.view(), 0.05),
            };
            worst = worse(worst, (value - expected).abs());
        }
    }
    record(&mut checks, "mmd oracle", worst, 1e-12);

    // local losses and recall against brute force
    let (mut trip, mut np, mut ang, mut rec) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for t in 0..10 {
        let n = 6 + t % 7;
        let batch = clustered_batch(&mut rng, n, 3, 2 + t % 3, 0.6);
        let (z, y) = (batch.vectors(), batch.labels());
        trip = worse(trip, (triplet_loss(&batch, 0.5)?.0 - reference::triplet_loss(z, y, 0.5).unwrap_or(f64::NAN)).abs());
        np = worse(np, (npairs_loss(&batch)?.0 - reference::npairs_loss(z, y).unwrap_or(f64::NAN)).abs());
        ang = worse(ang, (angular_loss(&batch, 30.0)?.0 - reference::angular_loss(z, y, 30.0).unwrap_or(f64::NAN)).abs());
        let ks: Vec<usize> = (1..n).collect();
        for (k, r) in recall_at_k(z, y, &ks)? {
            rec = worse(rec, (r - reference::recall_at_k(z, y, k)).abs());
        }
    }
    record(&mut checks, "triplet oracle", trip, 1e-12);
    record(&mut checks, "npairs oracle", np, 1e-12);
    record(&mut checks, "angular oracle", ang, 1e-12);
    record(&mut checks, "recall oracle", rec, 1e-12);

    // analytic gradients against central differences
    let classifier = LinearClassifier { weights: gaussian(&mut rng, 3, 4, 1.0), bias: gaussian(&mut rng, 1, 3, 1.0).row(0).to_owned() };
    let w_kind = DiscrepancyKind::Wasserstein {
        sinkhorn: SinkhornConfig { epsilon: 1e-4, max_iterations: 1_000_000, tolerance: 1e-10, log_domain: true },
        p: 2.0,
        scale: 0.5,
    };
    let cases: Vec<(&'static str, Box<GradFn>, f64, f64, f64)> = vec![
        ("triplet gradient", Box::new(|b: &EmbeddingBatch| triplet_loss(b, 0.5)), 0.6, 1e-6, 1e-4),
        ("npairs gradient", Box::new(npairs_loss), 0.6, 1e-6, 1e-4),
        ("angular gradient", Box::new(|b: &EmbeddingBatch| angular_loss(b, 30.0)), 0.6, 1e-6, 1e-4),
        ("angular-npairs gradient", Box::new(|b: &EmbeddingBatch| angular_npairs_loss(b, 45.0, 2.0)), 0.6, 1e-6, 1e-4),
        (
            "cross-entropy gradient",
            Box::new(move |b: &EmbeddingBatch| cross_entropy_loss(b, &classifier).map(|(v, g, _)| (v, g))),
            0.6,
            1e-6,
            1e-4,
        ),
        ("mmd discrepancy gradient", Box::new(|b: &EmbeddingBatch| dcdl_loss(b, &DiscrepancyKind::laplacian())), 0.03, 1e-6, 1e-4),
        ("wasserstein discrepancy gradient", Box::new(move |b: &EmbeddingBatch| dcdl_loss(b, &w_kind)), 1.0, 1e-5, 1e-2),
    ];
    for (name, f, spread, h, limit) in cases {
        let mut worst: f64 = 0.0;
        for t in 0..4 {
            let batch = clustered_batch(&mut rng, 6 + t, 4, 3, spread);
            worst = worse(worst, gradient_error(&batch, f.as_ref(), h)?);
        }
        record(&mut checks, name, worst, limit);
    }

    // envelope gradient of the regularized objective
    let mut worst: f64 = 0.0;
    let cfg = SinkhornConfig { epsilon: 0.1, max_iterations: 1_000_000, tolerance: 1e-14, log_domain: true };
    for t in 0..4 {
        let u = gaussian(&mut rng, 3 + t % 2, 2, 0.5);
        let v = gaussian(&mut rng, 4, 2, 0.5);
        let value = |u: &Array2<f64>| -> f64 {
            let (a, b) = (uniform_dist(u.clone()), uniform_dist(v.clone()));
            let cost = pairwise_cost(&a, &b, 2.0, 0.5).expect("valid");
            let plan = sinkhorn(&a, &b, &cost, &cfg).expect("valid");
            regularized_objective(&plan, &cost, cfg.epsilon).expect("valid")
        };
        let (a, b) = (uniform_dist(u.clone()), uniform_dist(v.clone()));
        let cost = pairwise_cost(&a, &b, 2.0, 0.5)?;
        let plan = sinkhorn(&a, &b, &cost, &cfg)?;
        let (analytic, _) = fixed_plan_gradient(u.view(), v.view(), plan.coupling.view(), 2.0, 0.5);
        let numeric = reference::central_difference(value, &u, 1e-5);
        worst = worse(worst, reference::relative_error(analytic.iter(), numeric.iter(), 1e-8));
    }
    record(&mut checks, "envelope gradient", worst, 1e-3);

    // model backward pass
    let mut worst: f64 = 0.0;
    for t in 0..3 {
        let model = EmbeddingModel::new(3, Some(5), 4, t)?;
        let x = gaussian(&mut rng, 5, 3, 1.0).mapv(|v| v.abs() + 0.5);
        let g = gaussian(&mut rng, 5, 4, 1.0);
        let cache = model.forward_cached(x.view())?;
        let analytic = model.backward(&cache, g.view())?.flatten();
        let numeric = reference::central_difference_flat(
            |p| {
                let mut m = model.clone();
                m.set_params(p).expect("length");
                (&m.forward(x.view()).expect("dims") * &g).sum()
            },
            &model.flatten(),
            1e-6,
        );
        worst = worse(worst, reference::relative_error(analytic.iter(), numeric.iter(), 1e-8));
    }
    record(&mut checks, "model backward", worst, 1e-4);

    // metric sanity
    let perfect = nmi(&[0, 0, 1, 1, 2], &[2, 2, 0, 0, 1])?;
    let t = welch_t(1.0, 1.0, 4, 0.0, 1.0, 4)?;
    let z = gaussian(&mut rng, 12, 2, 1.0);
    let y = labels_for(12, 3);
    let r = recall_at_k(z.view(), &y, &(1..12).collect::<Vec<_>>())?;
    let monotone = r.values().zip(r.values().skip(1)).all(|(a, b)| a <= b);
    let worst = (perfect - 1.0).abs().max((t - 2f64.sqrt()).abs()) + if monotone { 0.0 } else { 1.0 };
    record(&mut checks, "metric sanity", worst, 1e-9);

    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_control_fails_mmd_check() {
        let checks = run(&SelftestOptions { kernel_perturbation: 1e-3 }).unwrap();
        let mmd = checks.iter().find(|c| c.name == "mmd oracle").unwrap();
        assert!(!mmd.passed);
    }
}
