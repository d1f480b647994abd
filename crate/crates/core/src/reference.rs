//! Brute-force reference implementations and finite differences.
//!
//! Everything here is written independently of the optimized code paths,
//! favouring direct enumeration over speed. The self-test command and the
//! test suites compare the library against these.

use ndarray::{Array2, ArrayView1, ArrayView2};

fn sq(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    let mut s = 0.0;
    for k in 0..u.len() {
        s += (u[k] - v[k]) * (u[k] - v[k]);
    }
    s
}

fn dot(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    let mut s = 0.0;
    for k in 0..u.len() {
        s += u[k] * v[k];
    }
    s
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference<F>(f: F, x: &Array2<f64>, h: f64) -> Array2<f64>
where
    F: Fn(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + h;
        let up = f(&probe);
        probe[[i, j]] = orig - h;
        let down = f(&probe);
        probe[[i, j]] = orig;
        grad[[i, j]] = (up - down) / (2.0 * h);
    }
    grad
}

/// Central differences over a flat parameter vector.
pub fn central_difference_flat<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|b|, floor)` in the Euclidean norm over all entries.
pub fn relative_error<'a>(
    analytic: impl IntoIterator<Item = &'a f64>,
    numeric: impl IntoIterator<Item = &'a f64>,
    floor: f64,
) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    for (a, b) in analytic.into_iter().zip(numeric) {
        diff += (a - b) * (a - b);
        norm += b * b;
    }
    diff.sqrt() / norm.sqrt().max(floor)
}

/// Triplet loss by enumerating every (anchor, positive, negative) triple,
/// then applying the semi-hard rule per anchor-positive pair by sorting.
pub fn triplet_loss(z: ArrayView2<'_, f64>, labels: &[usize], tau: f64) -> Option<f64> {
    let n = labels.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let d_ap = sq(z.row(a), z.row(p));
            let mut candidates: Vec<(f64, usize)> =
                (0..n).filter(|&j| labels[j] != labels[a]).map(|j| (sq(z.row(a), z.row(j)), j)).collect();
            if candidates.is_empty() {
                continue;
            }
            candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let chosen = candidates.iter().find(|c| c.0 > d_ap).unwrap_or(&candidates[0]);
            total += (d_ap - chosen.0 + tau).max(0.0);
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

fn designated_positive(labels: &[usize], a: usize) -> Option<usize> {
    let n = labels.len();
    (1..n).map(|step| (a + step) % n).find(|&j| labels[j] == labels[a])
}

fn pair_loss(labels: &[usize], exponent: impl Fn(usize, usize, usize) -> f64) -> Option<f64> {
    let n = labels.len();
    let mut total = 0.0;
    let mut anchors = 0usize;
    for a in 0..n {
        let Some(p) = designated_positive(labels, a) else { continue };
        let mut s = 0.0;
        let mut any = false;
        for j in 0..n {
            if labels[j] != labels[a] {
                s += exponent(a, p, j).exp();
                any = true;
            }
        }
        if !any {
            return None;
        }
        total += (1.0 + s).ln();
        anchors += 1;
    }
    (anchors > 0).then(|| total / anchors as f64)
}

/// N-pairs loss by direct double loop.
pub fn npairs_loss(z: ArrayView2<'_, f64>, labels: &[usize]) -> Option<f64> {
    pair_loss(labels, |a, p, j| dot(z.row(a), z.row(j)) - dot(z.row(a), z.row(p)))
}

/// Angular loss by direct double loop.
pub fn angular_loss(z: ArrayView2<'_, f64>, labels: &[usize], alpha_degrees: f64) -> Option<f64> {
    let t2 = alpha_degrees.to_radians().tan().powi(2);
    pair_loss(labels, |a, p, j| {
        let mut ap_n = 0.0;
        for k in 0..z.ncols() {
            ap_n += (z[[a, k]] + z[[p, k]]) * z[[j, k]];
        }
        4.0 * t2 * ap_n - 2.0 * (1.0 + t2) * dot(z.row(a), z.row(p))
    })
}

/// Uniform MMD with an explicit closed-form kernel, by triple loops.
pub fn mmd_laplacian(u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, sigma: f64) -> f64 {
    mmd_generic(u, v, |x, y| (-sq(x, y).sqrt() / sigma).exp())
}

pub fn mmd_gaussian(u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, sigma: f64) -> f64 {
    mmd_generic(u, v, |x, y| (-sq(x, y) / (2.0 * sigma * sigma)).exp())
}

fn mmd_generic(u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, k: impl Fn(ArrayView1<'_, f64>, ArrayView1<'_, f64>) -> f64) -> f64 {
    let (n, m) = (u.nrows() as f64, v.nrows() as f64);
    let mut uu = 0.0;
    for i in 0..u.nrows() {
        for j in 0..u.nrows() {
            uu += k(u.row(i), u.row(j));
        }
    }
    let mut uv = 0.0;
    for i in 0..u.nrows() {
        for j in 0..v.nrows() {
            uv += k(u.row(i), v.row(j));
        }
    }
    let mut vv = 0.0;
    for i in 0..v.nrows() {
        for j in 0..v.nrows() {
            vv += k(v.row(i), v.row(j));
        }
    }
    uu / (n * n) - 2.0 * uv / (n * m) + vv / (m * m)
}

/// Optimal assignment cost between equal-size uniform point sets, by trying
/// every permutation. Equals the exact transport cost (Birkhoff).
pub fn assignment_cost(cost: ArrayView2<'_, f64>) -> f64 {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        best = best.min(c / n as f64);
    });
    best
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

/// Recall@k by fully sorting every query's neighbour list.
pub fn recall_at_k(z: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let mut hits = 0usize;
    for q in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != q).map(|j| (sq(z.row(q), z.row(j)), j)).collect();
        others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        if others.iter().take(k).any(|&(_, j)| labels[j] == labels[q]) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}
