//! Minimum-cost bipartite assignment.

use crate::{Error, Result};

/// One-to-one matching of rows to columns covering the smaller side.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Column matched to each row, `None` for unmatched rows.
    pub row_to_col: Vec<Option<usize>>,
    pub cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
    }
}

/// Shortest augmenting path solver for `n <= m`. Returns the column of
/// each row.
fn solve_wide(cost: &[Vec<f64>], n: usize, m: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
            for j in 0..=m {
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
    let mut row = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row[p[j] - 1] = j - 1;
        }
    }
    row
}

/// Minimum total cost over rows `rows` and columns `cols` of `cost`.
fn min_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        let sub: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
            .collect();
        let a = solve_wide(&sub, rows.len(), cols.len());
        a.iter().enumerate().map(|(i, &j)| sub[i][j]).sum()
    } else {
        let sub: Vec<Vec<f64>> = cols
            .iter()
            .map(|&c| rows.iter().map(|&r| cost[r][c]).collect())
            .collect();
        let a = solve_wide(&sub, cols.len(), rows.len());
        a.iter().enumerate().map(|(i, &j)| sub[i][j]).sum()
    }
}

/// Minimum-cost assignment of an `n x m` cost matrix. Among optimal
/// assignments the lexicographically smallest `row_to_col` is returned,
/// with `None` ordered after every column.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    if n == 0 || m == 0 {
        return Ok(Assignment {
            row_to_col: vec![None; n],
            cost: 0.0,
        });
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = min_cost(cost, &all_rows, &all_cols);
    let scale: f64 = cost.iter().flatten().map(|c| c.abs()).fold(1.0, f64::max);
    let tol = 1e-9 * scale * n.max(m) as f64;

    let target = n.min(m);
    let mut row_to_col = vec![None; n];
    let mut matched = 0;
    let mut fixed = 0.0;
    let mut free_cols: Vec<usize> = all_cols;
    for r in 0..n {
        let rest: Vec<usize> = (r + 1..n).collect();
        for (idx, &c) in free_cols.iter().enumerate() {
            let mut cols = free_cols.clone();
            cols.remove(idx);
            if matched + 1 + rest.len().min(cols.len()) < target {
                continue;
            }
            let total = fixed + cost[r][c] + min_cost(cost, &rest, &cols);
            if total <= best + tol {
                row_to_col[r] = Some(c);
                matched += 1;
                fixed += cost[r][c];
                free_cols.remove(idx);
                break;
            }
        }
    }
    let cost_total = row_to_col
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost[r][c]))
        .sum();
    Ok(Assignment {
        row_to_col,
        cost: cost_total,
    })
}

