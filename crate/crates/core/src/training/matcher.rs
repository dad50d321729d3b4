//! Minimum-cost one-to-one assignment of queries to ground-truth instances.
//!
//! Exact Hungarian algorithm (shortest augmenting paths with potentials).
//! Among equal-cost optima the assignment whose query list, read in gt order,
//! is lexicographically smallest wins.

use crate::error::{Error, Result};

/// Relative slack under which two assignment costs count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// `cost[q][g]` for `n_q` queries and `n_g` gt instances; returns the query assigned to each gt.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n_q = cost.len();
    let n_g = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|row| row.len() != n_g) {
        return Err(Error::shape(
            "hungarian",
            &[n_q, n_g],
            &[cost.iter().map(Vec::len).max().unwrap_or(0)],
        ));
    }
    if n_g > n_q {
        return Err(Error::Config(format!(
            "{n_g} ground-truth instances but only {n_q} queries; raise heads.num_queries"
        )));
    }
    if let Some(bad) = cost.iter().flatten().find(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            op: format!("matching cost {bad}"),
        });
    }
    if n_g == 0 {
        return Ok(Vec::new());
    }
    let queries: Vec<usize> = (0..n_q).collect();
    let gts: Vec<usize> = (0..n_g).collect();
    let (best, _) = solve(cost, &gts, &queries);
    let tol = TIE_TOLERANCE * (1.0 + best.abs());

    // Fix gts in order to the smallest query that still admits an optimum.
    let mut free = queries;
    let mut fixed = 0.0;
    let mut out = Vec::with_capacity(n_g);
    for g in 0..n_g {
        let rest: Vec<usize> = (g + 1..n_g).collect();
        let mut chosen = None;
        for (slot, &q) in free.iter().enumerate() {
            let others: Vec<usize> = free.iter().copied().filter(|&o| o != q).collect();
            let (tail, _) = solve(cost, &rest, &others);
            if fixed + cost[q][g] + tail <= best + tol {
                chosen = Some((slot, q));
                break;
            }
        }
        // The optimum always extends, so a candidate exists; fall back defensively.
        let (slot, q) = chosen.unwrap_or((0, free[0]));
        fixed += cost[q][g];
        out.push(q);
        free.remove(slot);
    }
    Ok(out)
}

/// Min cost of assigning every `rows` entry (gt) to a distinct `cols` entry (query).
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let (m, n) = (rows.len(), cols.len());
    if m == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost[cols[j - 1]][rows[i - 1]];
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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
    let mut assign = vec![0; m];
    for j in 1..=n {
        if p[j] != 0 {
            assign[p[j] - 1] = cols[j - 1];
        }
    }
    let total = assign.iter().enumerate().map(|(g, &q)| cost[q][rows[g]]).sum();
    (total, assign)
}
