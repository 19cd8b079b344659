use std::cmp::Ordering;
use std::ops::{Add, AddAssign, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use super::TrackingError;

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TrackingError> {
        if data.len() != rows * cols {
            return Err(TrackingError::Input(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TrackingError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TrackingError::Input("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Sorted by row.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    /// Sum of matched costs, accumulated in row order.
    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.matches.iter().map(|&(r, c)| costs.get(r, c)).sum()
    }
}

/// Lexicographic cost: number of forbidden (or padding) cells used, then
/// the real cost. Minimizing it first maximizes the number of allowed
/// matches, then minimizes their total cost.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Lex(i64, f64);

const INF: Lex = Lex(i64::MAX / 4, f64::INFINITY);
const ZERO: Lex = Lex(0, 0.0);

impl Add for Lex {
    type Output = Lex;
    fn add(self, o: Lex) -> Lex {
        Lex(self.0 + o.0, self.1 + o.1)
    }
}

impl Sub for Lex {
    type Output = Lex;
    fn sub(self, o: Lex) -> Lex {
        Lex(self.0 - o.0, self.1 - o.1)
    }
}

impl AddAssign for Lex {
    fn add_assign(&mut self, o: Lex) {
        *self = *self + o;
    }
}

impl SubAssign for Lex {
    fn sub_assign(&mut self, o: Lex) {
        *self = *self - o;
    }
}

impl Lex {
    fn lt(self, o: Lex) -> bool {
        match self.0.cmp(&o.0) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => self.1 < o.1,
        }
    }
}

/// Optimal one-to-one assignment on the gated matrix: entries above `gate`
/// are never matched. Among assignments using only allowed entries, the
/// result has the most matches and, among those, the least total cost.
///
/// Shortest-augmenting-path solver with row/column potentials on the square
/// padding of the matrix; columns are scanned in ascending order and only
/// strict improvements are taken, so ties resolve deterministically.
pub fn assign(costs: &CostMatrix, gate: f64) -> Result<Assignment, TrackingError> {
    if gate.is_nan() {
        return Err(TrackingError::Input("gate is NaN".into()));
    }
    if let Some(i) = costs.data.iter().position(|v| v.is_nan()) {
        return Err(TrackingError::Input(format!(
            "NaN cost at ({}, {})",
            i / costs.cols.max(1),
            i % costs.cols.max(1)
        )));
    }
    let (n, m) = (costs.rows, costs.cols);
    let size = n.max(m);
    let cell = |r: usize, c: usize| -> Lex {
        if r < n && c < m {
            let v = costs.get(r, c);
            if v <= gate && v.is_finite() {
                return Lex(0, v);
            }
        }
        Lex(1, 0.0)
    };

    // 1-based arrays; index 0 is the virtual source
    let mut u = vec![ZERO; size + 1];
    let mut v = vec![ZERO; size + 1];
    let mut row_of = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let cur = cell(i0 - 1, j - 1) - u[i0] - v[j];
                if cur.lt(minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j].lt(delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![None; n];
    for j in 1..=size {
        let (r, c) = (row_of[j] - 1, j - 1);
        if r < n && c < m && cell(r, c).0 == 0 {
            col_of_row[r] = Some(c);
        }
    }
    let mut out = Assignment::default();
    let mut col_used = vec![false; m];
    for (r, c) in col_of_row.iter().enumerate() {
        match c {
            Some(c) => {
                out.matches.push((r, *c));
                col_used[*c] = true;
            }
            None => out.unmatched_rows.push(r),
        }
    }
    out.unmatched_cols = (0..m).filter(|&c| !col_used[c]).collect();
    Ok(out)
}
