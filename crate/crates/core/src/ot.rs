//! Entropic optimal transport and an exact transportation-simplex oracle.
//!
//! The entropic problem `min <C, T> + eps * sum T (ln T - 1)` over couplings of
//! `w` and `w~` has the solution `T = diag(r) exp(-C/eps) diag(c)`. The scalings
//! are found by alternately fitting rows and columns, starting from `c = 1`.
//! In the log domain the scalings are carried as potentials `f = eps ln r` and
//! `g = eps ln c`, which keeps small `eps` from underflowing `exp(-C/eps)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use crate::distributions::{pairwise_cost, CostMatrix, DiscreteDistribution};
use crate::error::{Error, Result};

/// Entropy weight used by default for the Wasserstein discrepancy.
pub const DEFAULT_EPSILON: f64 = 2.5e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

/// Largest `n * m` accepted by [`exact_ot`].
const WARM_SWEEPS: usize = 20;
const WARM_FACTOR: f64 = 0.5;

pub const EXACT_OT_MAX_CELLS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Largest accepted L1 violation of either marginal.
    pub tolerance: f64,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::param("epsilon", format!("must be positive and finite, got {}", self.epsilon)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::param("tolerance", format!("must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::param("max_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

/// A coupling between two discrete marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    /// Sinkhorn sweeps at the target epsilon, or simplex pivots for the
    /// exact solver.
    pub iterations_used: usize,
    pub converged: bool,
}

impl TransportPlan {
    /// L1 violation of the row and column marginals.
    pub fn marginal_violation(&self) -> (f64, f64) {
        marginal_violation(self.coupling.view(), self.row_marginal.view(), self.col_marginal.view())
    }

    pub fn max_marginal_violation(&self) -> f64 {
        let (r, c) = self.marginal_violation();
        r.max(c)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coupling.dim()
    }
}

fn marginal_violation(t: ArrayView2<'_, f64>, w: ArrayView1<'_, f64>, wt: ArrayView1<'_, f64>) -> (f64, f64) {
    let rows: f64 = t.rows().into_iter().zip(w.iter()).map(|(r, &x)| (r.sum() - x).abs()).sum();
    let cols: f64 = t.columns().into_iter().zip(wt.iter()).map(|(c, &x)| (c.sum() - x).abs()).sum();
    (rows, cols)
}

fn check_shapes(a: &DiscreteDistribution, b: &DiscreteDistribution, cost: &CostMatrix) -> Result<()> {
    let (n, m) = cost.shape();
    if n != a.len() || m != b.len() {
        return Err(Error::ShapeMismatch(a.len(), b.len(), n, m));
    }
    if cost.entries().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cost entries"));
    }
    Ok(())
}

/// Entropic transport plan between `a` and `b` under `cost`.
pub fn sinkhorn(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    check_shapes(a, b, cost)?;
    sinkhorn_marginals(a.weights(), b.weights(), cost.entries(), cfg)
}

/// Same as [`sinkhorn`] on raw marginals and cost entries.
pub fn sinkhorn_marginals(
    w: ArrayView1<'_, f64>,
    wt: ArrayView1<'_, f64>,
    cost: ArrayView2<'_, f64>,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = cost.dim();
    if w.len() != n || wt.len() != m {
        return Err(Error::ShapeMismatch(w.len(), wt.len(), n, m));
    }
    if cost.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cost entries"));
    }
    let (coupling, iterations_used) = if cfg.log_domain {
        sinkhorn_log(w, wt, cost, cfg)
    } else {
        sinkhorn_direct(w, wt, cost, cfg)?
    };
    let (rv, cv) = marginal_violation(coupling.view(), w, wt);
    let converged = rv.max(cv) <= cfg.tolerance;
    Ok(TransportPlan {
        coupling,
        row_marginal: w.to_owned(),
        col_marginal: wt.to_owned(),
        iterations_used,
        converged,
    })
}

/// `out_i = eps * (log_w_i - LSE_j (pot_j - C_ij) / eps)` over the rows of
/// `cost`, with `buf` as scratch.
fn half_step(pot: &[f64], cost: &[f64], log_w: &[f64], eps: f64, buf: &mut [f64], out: &mut [f64]) {
    let m = pot.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &cost[i * m..(i + 1) * m];
        let mut max = f64::NEG_INFINITY;
        for ((b, &p), &c) in buf.iter_mut().zip(pot).zip(row) {
            *b = p - c;
            max = max.max(*b);
        }
        let sum: f64 = buf.iter().map(|&b| ((b - max) / eps).exp()).sum();
        *o = eps * (log_w[i] - (max / eps + sum.ln()));
    }
}

fn sinkhorn_log(
    w: ArrayView1<'_, f64>,
    wt: ArrayView1<'_, f64>,
    cost: ArrayView2<'_, f64>,
    cfg: &SinkhornConfig,
) -> (Array2<f64>, usize) {
    let eps = cfg.epsilon;
    let (n, m) = cost.dim();
    let log_w: Vec<f64> = w.iter().map(|x| x.ln()).collect();
    let log_wt: Vec<f64> = wt.iter().map(|x| x.ln()).collect();
    let rows: Vec<f64> = cost.iter().copied().collect();
    let cols: Vec<f64> = cost.t().iter().copied().collect();
    let mut buf = vec![0.0; n.max(m)];

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut next_f = vec![0.0; n];
    let mut iterations = 0;
    // Warm start: a few sweeps at geometrically decreasing epsilon, from
    // the cost scale down to the target. Only target sweeps are counted.
    let mut stage = rows.iter().fold(0.0f64, |a, &c| a.max(c.abs())).max(eps);
    'stages: loop {
        let last = stage <= eps;
        let stage_eps = if last { eps } else { stage };
        let budget = if last { cfg.max_iterations } else { WARM_SWEEPS };
        half_step(&g, &rows, &log_w, stage_eps, &mut buf[..m], &mut f);
        for _ in 0..budget {
            if last {
                iterations += 1;
            }
            half_step(&f, &cols, &log_wt, stage_eps, &mut buf[..n], &mut g);
            half_step(&g, &rows, &log_w, stage_eps, &mut buf[..m], &mut next_f);
            // Row sums of the current plan are w_i exp((f_i - next_f_i) / eps).
            let violation: f64 = (0..n)
                .filter(|&i| w[i] > 0.0)
                .map(|i| (w[i] * ((f[i] - next_f[i]) / stage_eps).exp() - w[i]).abs())
                .sum();
            if last && violation <= cfg.tolerance {
                break 'stages;
            }
            std::mem::swap(&mut f, &mut next_f);
        }
        if last {
            break;
        }
        stage *= WARM_FACTOR;
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| {
        if w[i] == 0.0 || wt[j] == 0.0 {
            0.0
        } else {
            ((f[i] + g[j] - cost[[i, j]]) / eps).exp()
        }
    });
    (plan, iterations)
}

fn sinkhorn_direct(
    w: ArrayView1<'_, f64>,
    wt: ArrayView1<'_, f64>,
    cost: ArrayView2<'_, f64>,
    cfg: &SinkhornConfig,
) -> Result<(Array2<f64>, usize)> {
    let kernel = cost.mapv(|c| (-c / cfg.epsilon).exp());
    let mut c = Array1::<f64>::ones(cost.ncols());
    let mut r = &w / &kernel.dot(&c);
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        c = &wt / &kernel.t().dot(&r);
        if r.iter().chain(c.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("sinkhorn scalings (kernel underflow; use the log domain)"));
        }
        let kc = kernel.dot(&c);
        let violation: f64 = Zip::from(&r).and(&kc).and(&w).fold(0.0, |acc, &ri, &k, &wi| acc + (ri * k - wi).abs());
        if violation <= cfg.tolerance {
            break;
        }
        r = &w / &kc;
    }
    let mut plan = kernel;
    for (i, mut row) in plan.rows_mut().into_iter().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x *= r[i] * c[j];
        }
    }
    Ok((plan, iterations))
}

/// `Tr(C T^T) = sum_ij C_ij T_ij`.
pub fn transport_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    if plan.shape() != cost.shape() {
        let (n, m) = cost.shape();
        let (pn, pm) = plan.shape();
        return Err(Error::ShapeMismatch(n, m, pn, pm));
    }
    Ok(Zip::from(&plan.coupling).and(&cost.entries()).fold(0.0, |acc, &t, &c| acc + t * c))
}

/// Entropic objective `<C, T> + eps * sum T (ln T - 1)` with `0 ln 0 = 0`.
pub fn regularized_objective(plan: &TransportPlan, cost: &CostMatrix, epsilon: f64) -> Result<f64> {
    let sharp = transport_cost(plan, cost)?;
    if epsilon == 0.0 {
        return Ok(sharp);
    }
    let entropy: f64 = plan.coupling.iter().map(|&t| if t > 0.0 { t * (t.ln() - 1.0) } else { 0.0 }).sum();
    Ok(sharp + epsilon * entropy)
}

/// Exact optimal transport by the transportation simplex: a northwest-corner
/// basis improved by cycle pivots until every reduced cost is nonnegative.
/// Bland's rule picks entering and leaving cells, so degenerate pivots
/// cannot cycle and the returned plan is deterministic.
pub fn exact_ot(a: &DiscreteDistribution, b: &DiscreteDistribution, cost: &CostMatrix) -> Result<(TransportPlan, f64)> {
    check_shapes(a, b, cost)?;
    exact_ot_marginals(a.weights(), b.weights(), cost.entries())
}

pub fn exact_ot_marginals(
    supply: ArrayView1<'_, f64>,
    demand: ArrayView1<'_, f64>,
    cost: ArrayView2<'_, f64>,
) -> Result<(TransportPlan, f64)> {
    let (n, m) = cost.dim();
    if supply.len() != n || demand.len() != m {
        return Err(Error::ShapeMismatch(supply.len(), demand.len(), n, m));
    }
    if n * m > EXACT_OT_MAX_CELLS {
        return Err(Error::TooLarge { n, m, limit: EXACT_OT_MAX_CELLS });
    }
    if (supply.sum() - demand.sum()).abs() > 1e-9 {
        return Err(Error::param("marginals", "supply and demand masses differ"));
    }

    let mut flow = Array2::<f64>::zeros((n, m));
    let mut basic = Array2::from_elem((n, m), false);

    // Northwest corner: exactly n + m - 1 basic cells forming a spanning tree.
    let mut s = supply.to_owned();
    let mut d = demand.to_owned();
    let (mut i, mut j) = (0, 0);
    loop {
        let q = s[i].min(d[j]);
        flow[[i, j]] = q;
        basic[[i, j]] = true;
        s[i] -= q;
        d[j] -= q;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if i == n - 1 {
            j += 1;
        } else if j == m - 1 || s[i] <= d[j] {
            i += 1;
        } else {
            j += 1;
        }
    }

    let scale = 1.0 + cost.iter().copied().fold(0.0, f64::max);
    let tol = 1e-12 * scale;
    let max_pivots = 50 * (n * m).max(16) * (n + m);
    let mut pivots = 0;
    loop {
        let (u, v) = basis_potentials(&basic, cost);
        let entering = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .find(|&(i, j)| !basic[[i, j]] && cost[[i, j]] - u[i] - v[j] < -tol);
        let Some((ei, ej)) = entering else { break };

        let path = tree_path(&basic, ei, ej);
        // path alternates: first edge leaves row ei (minus), then plus, ...
        let minus: Vec<(usize, usize)> = path.iter().step_by(2).copied().collect();
        let plus: Vec<(usize, usize)> = path.iter().skip(1).step_by(2).copied().collect();
        let theta = minus.iter().map(|&(i, j)| flow[[i, j]]).fold(f64::INFINITY, f64::min);
        let leaving = minus
            .iter()
            .copied()
            .filter(|&(i, j)| flow[[i, j]] == theta)
            .min_by_key(|&(i, j)| i * m + j)
            .expect("cycle has at least one minus cell");

        flow[[ei, ej]] += theta;
        for &(i, j) in &plus {
            flow[[i, j]] += theta;
        }
        for &(i, j) in &minus {
            flow[[i, j]] = (flow[[i, j]] - theta).max(0.0);
        }
        flow[leaving] = 0.0;
        basic[leaving] = false;
        basic[[ei, ej]] = true;

        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::param("exact_ot", "pivot limit exceeded"));
        }
    }

    let total = Zip::from(&flow).and(&cost).fold(0.0, |acc, &t, &c| acc + t * c);
    let plan = TransportPlan {
        coupling: flow,
        row_marginal: supply.to_owned(),
        col_marginal: demand.to_owned(),
        iterations_used: pivots,
        converged: true,
    };
    Ok((plan, total))
}

/// Dual potentials with `u_i + v_j = C_ij` on every basic cell, `u_0 = 0`.
fn basis_potentials(basic: &Array2<bool>, cost: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = basic.dim();
    let mut u = vec![f64::NAN; n];
    let mut v = vec![f64::NAN; m];
    u[0] = 0.0;
    // Nodes 0..n are rows, n..n+m columns.
    let mut stack = vec![0usize];
    while let Some(node) = stack.pop() {
        if node < n {
            for j in 0..m {
                if basic[[node, j]] && v[j].is_nan() {
                    v[j] = cost[[node, j]] - u[node];
                    stack.push(n + j);
                }
            }
        } else {
            let j = node - n;
            for i in 0..n {
                if basic[[i, j]] && u[i].is_nan() {
                    u[i] = cost[[i, j]] - v[j];
                    stack.push(i);
                }
            }
        }
    }
    (u, v)
}

/// Cells on the basis-tree path from row `ei` to column `ej`, in order.
fn tree_path(basic: &Array2<bool>, ei: usize, ej: usize) -> Vec<(usize, usize)> {
    let (n, m) = basic.dim();
    let mut parent = vec![usize::MAX; n + m];
    let mut queue = std::collections::VecDeque::from([ei]);
    parent[ei] = ei;
    while let Some(node) = queue.pop_front() {
        if node == n + ej {
            break;
        }
        if node < n {
            for j in 0..m {
                if basic[[node, j]] && parent[n + j] == usize::MAX {
                    parent[n + j] = node;
                    queue.push_back(n + j);
                }
            }
        } else {
            let j = node - n;
            for i in 0..n {
                if basic[[i, j]] && parent[i] == usize::MAX {
                    parent[i] = node;
                    queue.push_back(i);
                }
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = n + ej;
    while node != ei {
        let p = parent[node];
        let cell = if node < n { (node, p - n) } else { (p, node - n) };
        cells.push(cell);
        node = p;
    }
    cells.reverse();
    cells
}

/// Components of a debiased entropic transport cost.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornDivergence {
    pub value: f64,
    pub cross: f64,
    pub self_a: f64,
    pub self_b: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `W(a, b) - (W(a, a) + W(b, b)) / 2` where each `W` is the sharp cost of
/// the converged entropic plan.
pub fn sinkhorn_divergence(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    p: f64,
    scale: f64,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    sinkhorn_divergence_detailed(a, b, p, scale, cfg).map(|d| d.value)
}

pub fn sinkhorn_divergence_detailed(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    p: f64,
    scale: f64,
    cfg: &SinkhornConfig,
) -> Result<SinkhornDivergence> {
    let mut converged = true;
    let mut iterations = 0;
    let mut sharp = |x: &DiscreteDistribution, y: &DiscreteDistribution| -> Result<f64> {
        let cost = pairwise_cost(x, y, p, scale)?;
        let plan = sinkhorn(x, y, &cost, cfg)?;
        converged &= plan.converged;
        iterations = iterations.max(plan.iterations_used);
        transport_cost(&plan, &cost)
    };
    let cross = sharp(a, b)?;
    let self_a = sharp(a, a)?;
    let self_b = sharp(b, b)?;
    Ok(SinkhornDivergence {
        value: cross - 0.5 * (self_a + self_b),
        cross,
        self_a,
        self_b,
        converged,
        iterations,
    })
}
