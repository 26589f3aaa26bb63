//! Minimum-cost one-to-one assignment (shortest augmenting path with
//! potentials).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, gt)` pairs sorted by query index.
    pub assignment: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
    pub total_cost: f64,
}

impl MatchResult {
    /// GT index matched to each query, if any.
    pub fn target_of(&self, queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; queries];
        for &(q, g) in &self.assignment {
            out[q] = Some(g);
        }
        out
    }
}

/// Rows are assigned to distinct columns; requires `rows <= cols`.
/// Returns the column of each row.
fn solve(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut row_to_col = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum-total-cost matching between `N` queries (rows) and `G` ground
/// truth segments (columns).
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    if cost.ndim() != 2 {
        return Err(Error::shape(format!("cost must be 2-D, got {:?}", cost.shape())));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite("matching cost".into()));
    }
    let (n, g) = (cost.rows(), cost.cols());
    let mut assignment: Vec<(usize, usize)> = if n == 0 || g == 0 {
        Vec::new()
    } else if n <= g {
        solve(cost.data(), n, g).into_iter().enumerate().collect()
    } else {
        let t = cost.transpose();
        solve(t.data(), g, n)
            .into_iter()
            .enumerate()
            .map(|(gt, q)| (q, gt))
            .collect()
    };
    assignment.sort_unstable();
    let total_cost = assignment.iter().map(|&(q, gt)| cost.at(q, gt)).sum();
    let matched: Vec<bool> = {
        let mut m = vec![false; n];
        for &(q, _) in &assignment {
            m[q] = true;
        }
        m
    };
    Ok(MatchResult {
        assignment,
        unmatched_queries: (0..n).filter(|&q| !matched[q]).collect(),
        total_cost,
    })
}
