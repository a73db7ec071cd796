//! Minibatch endpoint pairing: identity pairing for independent coupling, or
//! the exact minimum-cost assignment under squared Euclidean cost for the
//! optimal-transport variant.
//!
//! The assignment solver is the O(b^3) shortest-augmenting-path scheme with
//! potentials (Hungarian family). Batches here are small (<= a few hundred),
//! so exactness is affordable and testable against factorial brute force.
//! Ties between equal-cost assignments resolve to the lowest column index.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A bijection from x0 row index to x1 row index, with its mean squared
/// Euclidean pair distance.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairing {
    pub permutation: Vec<usize>,
    pub cost: f64,
}

pub fn identity_permutation(b: usize) -> Result<Vec<usize>> {
    if b == 0 {
        return Err(Error::Contract(String::from("batch size must be >= 1")));
    }
    Ok((0..b).collect())
}

/// Mean squared distance over the pairs (x0[i], x1[perm[i]]).
pub fn pairing_cost(x0: &Tensor, x1: &Tensor, permutation: &[usize]) -> Result<f64> {
    let (b, d) = x0.dims2()?;
    let (b1, d1) = x1.dims2()?;
    if b != b1 || d != d1 {
        return Err(Error::Dim(format!("batch shapes [{b},{d}] vs [{b1},{d1}]")));
    }
    if permutation.len() != b {
        return Err(Error::Contract(format!(
            "permutation length {} vs batch size {b}",
            permutation.len()
        )));
    }
    let mut total = 0.0;
    for (i, &j) in permutation.iter().enumerate() {
        total += sq_dist(x0.row(i), x1.row(j));
    }
    Ok(total / b as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Identity pairing — x1 rows are already i.i.d. draws, so keeping the given
/// order is lossless for independent coupling.
pub fn pair_independent(x0: &Tensor, x1: &Tensor) -> Result<Pairing> {
    let (b, _) = x0.dims2()?;
    let permutation = identity_permutation(b)?;
    let cost = pairing_cost(x0, x1, &permutation)?;
    Ok(Pairing { permutation, cost })
}

/// Exact minimum-cost bijection under squared Euclidean cost.
pub fn pair_optimal(x0: &Tensor, x1: &Tensor) -> Result<Pairing> {
    let (b, d) = x0.dims2()?;
    let (b1, d1) = x1.dims2()?;
    if b != b1 || d != d1 {
        return Err(Error::Contract(format!(
            "pair_optimal: batch shapes [{b},{d}] vs [{b1},{d1}]"
        )));
    }
    let mut cost_matrix = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            cost_matrix[i * b + j] = sq_dist(x0.row(i), x1.row(j));
        }
    }
    let permutation = assign_min_cost(&cost_matrix, b);
    let cost = pairing_cost(x0, x1, &permutation)?;
    Ok(Pairing { permutation, cost })
}

/// Shortest-augmenting-path assignment on a square cost matrix (row-major).
/// Returns the column assigned to each row.
fn assign_min_cost(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based potentials; p[j] is the row currently matched to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}
