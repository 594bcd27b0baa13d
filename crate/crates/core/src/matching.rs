//! Bipartite matching between predictions and ground truth.
//!
//! [`hungarian`] computes a minimum-cost assignment by shortest augmenting
//! paths (Jonker–Volgenant), processing rows in ascending order and breaking
//! ties toward the lowest column, so results are deterministic and match the
//! lexicographic tie-break contract on tied instances. Rectangular inputs are
//! supported; `min(rows, cols)` pairs are always produced.
//!
//! The matching costs and losses built on top of it live in
//! [`crate::matching::losses`].

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

mod losses;
pub use losses::{
    decoder_loss, perception_cost, DecoderLossBreakdown, GtObject, LAMBDA_LOC, NO_OBJECT_WEIGHT,
};

/// A minimum-cost assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Matched (row, column) pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    /// Rows left unmatched (only when rows > columns).
    pub unmatched_rows: Vec<usize>,
    /// Columns left unmatched (only when columns > rows).
    pub unmatched_cols: Vec<usize>,
    /// Sum of the cost entries over `pairs`.
    pub total_cost: f64,
}

/// Minimum-cost bipartite assignment of `min(n, m)` pairs for an `n×m` cost
/// matrix. Rejects NaN entries; infinities are allowed and never selected
/// while finite alternatives exist.
pub fn hungarian<F: Scalar>(cost: ArrayView2<'_, F>) -> Result<MatchResult> {
    let (n, m) = cost.dim();
    if cost.iter().any(|c| c.as_f64().is_nan()) {
        return Err(Error::Model("cost matrix contains NaN".into()));
    }
    if n == 0 || m == 0 {
        return Ok(MatchResult {
            pairs: vec![],
            unmatched_rows: (0..n).collect(),
            unmatched_cols: (0..m).collect(),
            total_cost: 0.0,
        });
    }
    if n > m {
        // Solve the transpose so rows ≤ cols, then swap the roles back.
        let t: Array2<f64> = Array2::from_shape_fn((m, n), |(j, i)| cost[(i, j)].as_f64());
        let r = solve(&t.view());
        let mut pairs: Vec<(usize, usize)> = r.pairs.iter().map(|&(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        return Ok(MatchResult {
            pairs,
            unmatched_rows: r.unmatched_cols,
            unmatched_cols: r.unmatched_rows,
            total_cost: r.total_cost,
        });
    }
    let c: Array2<f64> = cost.map(|v| v.as_f64());
    Ok(solve(&c.view()))
}

/// Core solver for n ≤ m. Augments one row at a time in ascending order; the
/// candidate-column scan uses strict `<`, so the first (lowest) column always
/// wins ties.
fn solve(cost: &ArrayView2<'_, f64>) -> MatchResult {
    let (n, m) = cost.dim();
    debug_assert!(n <= m);
    // Potentials for rows/columns and, per column, the matched row.
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; m];
    let mut col_row: Vec<Option<usize>> = vec![None; m];

    for start_row in 0..n {
        // Shortest augmenting path from start_row using Dijkstra over columns.
        let mut min_to = vec![f64::INFINITY; m]; // best reduced distance per column
        let mut prev_col: Vec<Option<usize>> = vec![None; m]; // path reconstruction
        let mut used = vec![false; m];
        let mut cur_row = start_row;
        let mut cur_col: Option<usize> = None;

        loop {
            let mut best: Option<usize> = None;
            for j in 0..m {
                if used[j] {
                    continue;
                }
                let d = cost[(cur_row, j)] - u[cur_row] - v[j];
                if d < min_to[j] {
                    min_to[j] = d;
                    prev_col[j] = cur_col;
                }
                if best.is_none_or(|b| min_to[j] < min_to[b]) {
                    best = Some(j);
                }
            }
            let j = best.expect("m >= n guarantees a free column exists");
            let delta = min_to[j];
            // Update potentials so reduced costs stay non-negative.
            u[start_row] += delta;
            for k in 0..m {
                if used[k] {
                    u[col_row[k].expect("used columns are matched")] += delta;
                    v[k] -= delta;
                } else {
                    min_to[k] -= delta;
                }
            }
            used[j] = true;
            cur_col = Some(j);
            match col_row[j] {
                Some(r) => cur_row = r,
                None => break,
            }
        }

        // Walk the path backwards, flipping assignments.
        let mut j = cur_col.expect("loop ends on a free column");
        loop {
            match prev_col[j] {
                Some(pj) => {
                    col_row[j] = col_row[pj];
                    j = pj;
                }
                None => {
                    col_row[j] = Some(start_row);
                    break;
                }
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = col_row
        .iter()
        .enumerate()
        .filter_map(|(j, r)| r.map(|i| (i, j)))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
    let matched_cols: std::collections::HashSet<usize> = pairs.iter().map(|p| p.1).collect();
    MatchResult {
        pairs,
        unmatched_rows: vec![],
        unmatched_cols: (0..m).filter(|j| !matched_cols.contains(j)).collect(),
        total_cost,
    }
}
