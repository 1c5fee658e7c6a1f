//! Maximum-weight item/position matching.
//!
//! `km_match` is the Kuhn-Munkres (Hungarian) algorithm in its O(n^3)
//! shortest-augmenting-path form with row/column potentials.
//! `brute_force_match` enumerates permutations and serves as a test oracle.

use serde::{Deserialize, Serialize};

use crate::data::validate_permutation;
use crate::error::{Error, Result};

/// `n_items x n_positions` edge weights, row-major. Entry `(i, k)` is the
/// value of showing item `i` at position `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    n_items: usize,
    n_positions: usize,
    data: Vec<f64>,
}

impl WeightMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_items = rows.len();
        let n_positions = rows.first().map_or(0, Vec::len);
        if n_items == 0 || n_positions == 0 {
            return Err(Error::Validation("weight matrix is empty".into()));
        }
        if rows.iter().any(|r| r.len() != n_positions) {
            return Err(Error::Validation(
                "weight matrix rows differ in length".into(),
            ));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("weight {v}")));
        }
        Ok(WeightMatrix {
            n_items,
            n_positions,
            data,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_positions(&self) -> usize {
        self.n_positions
    }

    #[inline]
    pub fn get(&self, item: usize, pos_index: usize) -> f64 {
        self.data[item * self.n_positions + pos_index]
    }

    pub fn row(&self, item: usize) -> &[f64] {
        &self.data[item * self.n_positions..(item + 1) * self.n_positions]
    }

    pub fn scaled(&self, factor: f64) -> WeightMatrix {
        WeightMatrix {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingResult {
    /// 1-based position per item; `None` for items left unplaced.
    pub assignment: Vec<Option<usize>>,
    pub total_weight: f64,
}

impl MatchingResult {
    /// Items in position order, followed by unplaced items in index order.
    pub fn to_order(&self) -> Vec<usize> {
        let mut placed: Vec<(usize, usize)> = self
            .assignment
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (p, i)))
            .collect();
        placed.sort_unstable();
        let mut order: Vec<usize> = placed.into_iter().map(|(_, i)| i).collect();
        order.extend(
            self.assignment
                .iter()
                .enumerate()
                .filter(|(_, p)| p.is_none())
                .map(|(i, _)| i),
        );
        order
    }
}

/// Exact maximum-weight matching. Rectangular inputs are padded to a square
/// with zero-weight virtual rows/columns; items matched to a virtual position
/// are reported as unplaced.
pub fn km_match(weights: &WeightMatrix) -> Result<MatchingResult> {
    let (rows, cols) = (weights.n_items, weights.n_positions);
    let n = rows.max(cols);
    // Minimize negated weights; 1-based arrays with a sentinel column 0.
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights.get(i, j)
        } else {
            0.0
        }
    };
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; rows];
    let mut total = 0.0;
    for (j, &i) in row_of_col.iter().enumerate().take(n + 1).skip(1) {
        if i >= 1 && i <= rows && j <= cols {
            assignment[i - 1] = Some(j);
            total += weights.get(i - 1, j - 1);
        }
    }
    Ok(MatchingResult {
        assignment,
        total_weight: total,
    })
}

pub const BRUTE_FORCE_MAX_ITEMS: usize = 8;

/// Exhaustive search over all item orders. Ties keep the first order found
/// in lexicographic enumeration.
pub fn brute_force_match(weights: &WeightMatrix) -> Result<MatchingResult> {
    let n = weights.n_items;
    if n > BRUTE_FORCE_MAX_ITEMS {
        return Err(Error::Validation(format!(
            "brute force limited to {BRUTE_FORCE_MAX_ITEMS} items, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut best_total = f64::NEG_INFINITY;
    let mut best = order.clone();
    loop {
        let total = placed_sum(weights, &order);
        if total > best_total {
            best_total = total;
            best.clone_from(&order);
        }
        if !next_permutation(&mut order) {
            break;
        }
    }
    let mut assignment = vec![None; n];
    for (p, &i) in best.iter().enumerate().take(weights.n_positions) {
        assignment[i] = Some(p + 1);
    }
    Ok(MatchingResult {
        assignment,
        total_weight: best_total,
    })
}

/// Value of showing `order[p]` at position `p + 1`; items past the last
/// position earn nothing.
pub fn utility_of_ranking(weights: &WeightMatrix, order: &[usize]) -> Result<f64> {
    validate_permutation(order, weights.n_items)?;
    Ok(placed_sum(weights, order))
}

fn placed_sum(weights: &WeightMatrix, order: &[usize]) -> f64 {
    order
        .iter()
        .take(weights.n_positions)
        .enumerate()
        .map(|(p, &i)| weights.get(i, p))
        .sum()
}

pub(crate) fn next_permutation(a: &mut [usize]) -> bool {
    if a.len() < 2 {
        return false;
    }
    let mut i = a.len() - 1;
    while i > 0 && a[i - 1] >= a[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = a.len() - 1;
    while a[j] <= a[i - 1] {
        j -= 1;
    }
    a.swap(i - 1, j);
    a[i..].reverse();
    true
}

/// Reads a matrix from CSV text: one item per line, comma-separated weights.
/// Blank lines and lines starting with `#` are ignored.
pub fn parse_csv_matrix(text: &str) -> Result<WeightMatrix> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: "<matrix>".into(),
                    line: lineno + 1,
                    msg: format!("bad number {t:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    WeightMatrix::from_rows(rows)
}
