use crate::{Error, Result};

/// Minimum-cost bipartite assignment between rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(row, col)` pairs in ascending row order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    /// Sum of matched costs, accumulated in ascending row order.
    pub cost: f64,
}

impl MatchResult {
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(r, _)| r == row).map(|&(_, c)| c)
    }

    pub fn row_of(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, c)| c == col).map(|&(r, _)| r)
    }
}

/// Solves the rectangular assignment problem; `min(rows, cols)` pairs are
/// returned. Shortest augmenting paths with row and column potentials,
/// O(n^2 m). Rows are inserted in ascending order and the first column of
/// minimal reduced cost wins, so results are deterministic.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::shape("hungarian", "ragged cost matrix"));
    }
    if let Some(v) = cost.iter().flatten().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("cost matrix contains {v}")));
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched_rows: (0..rows).collect(),
            unmatched_cols: (0..cols).collect(),
            cost: 0.0,
        });
    }

    let mut pairs = if rows <= cols {
        solve(rows, cols, |r, c| cost[r][c])
    } else {
        let mut p: Vec<(usize, usize)> =
            solve(cols, rows, |r, c| cost[c][r]).into_iter().map(|(a, b)| (b, a)).collect();
        p.sort_unstable();
        p
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    let unmatched_rows = (0..rows).filter(|r| !pairs.iter().any(|p| p.0 == *r)).collect();
    let unmatched_cols = (0..cols).filter(|c| !pairs.iter().any(|p| p.1 == *c)).collect();
    Ok(MatchResult { pairs, unmatched_rows, unmatched_cols, cost: total })
}

/// `n <= m`; every row is assigned.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based indices; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect()
}
