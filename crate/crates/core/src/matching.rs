//! Teacher/student instance matching: centroid distance matrix, optimal
//! assignment, and the equivalent-radius acceptance test.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::raster::InstanceLabelMap;

/// Default acceptance factor applied to the pair's mean equivalent radius.
pub const DEFAULT_R_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                w.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParam(
                "cost entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { rows, cols, w })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub teacher: u32,
    pub student: u32,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// Assigned pairs that passed the radius test.
    pub pairs: Vec<MatchPair>,
    /// Assigned pairs dropped by the radius test.
    pub rejected: Vec<MatchPair>,
    pub unmatched_teacher: Vec<u32>,
    pub unmatched_student: Vec<u32>,
}

/// Euclidean distances between the centroids of every teacher instance
/// (rows) and every student instance (columns).
pub fn distance_matrix(teacher: &InstanceLabelMap, student: &InstanceLabelMap) -> DistanceMatrix {
    let ct = teacher.centroids();
    let cs = student.centroids();
    let mut w = Vec::with_capacity(ct.len() * cs.len());
    for &(tr, tc) in &ct {
        for &(sr, sc) in &cs {
            w.push(((tr - sr).powi(2) + (tc - sc).powi(2)).sqrt());
        }
    }
    DistanceMatrix {
        rows: ct.len(),
        cols: cs.len(),
        w,
    }
}

/// Hungarian algorithm with row/column potentials on an `n x n` cost
/// matrix. Returns the column for each row and the final potentials.
fn hungarian_square(a: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-indexed internally; index 0 is the virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
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
                if !used[j] {
                    let cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Kuhn augmenting path on the tight-edge graph for rows `>= first_row`.
fn try_augment(
    row: usize,
    adj: &[Vec<usize>],
    col_owner: &mut [Option<usize>],
    blocked: &[bool],
    seen: &mut [bool],
) -> bool {
    for &j in &adj[row] {
        if blocked[j] || seen[j] {
            continue;
        }
        seen[j] = true;
        if col_owner[j].is_none()
            || try_augment(col_owner[j].unwrap(), adj, col_owner, blocked, seen)
        {
            col_owner[j] = Some(row);
            return true;
        }
    }
    false
}

fn rows_perfectly_matchable(adj: &[Vec<usize>], first_row: usize, blocked: &[bool]) -> bool {
    let n = adj.len();
    let mut col_owner = vec![None; n];
    for row in first_row..n {
        let mut seen = vec![false; n];
        if !try_augment(row, adj, &mut col_owner, blocked, &mut seen) {
            return false;
        }
    }
    true
}

/// Among all minimum-cost assignments (perfect matchings on edges whose
/// reduced cost is zero), pick the lexicographically smallest by row.
fn lexicographic_optimum(a: &[f64], n: usize, u: &[f64], v: &[f64]) -> Vec<usize> {
    let scale = a.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-10 * scale;
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| a[i * n + j] - u[i] - v[j] <= tol).collect())
        .collect();
    let mut blocked = vec![false; n];
    let mut out = vec![0usize; n];
    for i in 0..n {
        let mut chosen = None;
        for &j in &adj[i] {
            if blocked[j] {
                continue;
            }
            blocked[j] = true;
            if rows_perfectly_matchable(&adj, i + 1, &blocked) {
                chosen = Some(j);
                break;
            }
            blocked[j] = false;
        }
        match chosen {
            Some(j) => out[i] = j,
            // tolerance left the tight graph without a perfect matching
            None => return Vec::new(),
        }
    }
    out
}

/// Minimum-cost assignment of size `min(n, m)`.
///
/// Rectangular inputs are padded to square with a sentinel cost of
/// `1 + 2 * max(w)`; padded pairs are stripped from the result. Among equal
/// cost assignments the lexicographically smallest `(row, col)` list wins.
/// Pairs are returned sorted by row.
pub fn munkres(w: &DistanceMatrix) -> Vec<(usize, usize)> {
    let (rows, cols) = (w.rows, w.cols);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let n = rows.max(cols);
    let max = w.w.iter().cloned().fold(0.0, f64::max);
    let sentinel = 1.0 + 2.0 * max;
    let mut a = vec![sentinel; n * n];
    for i in 0..rows {
        a[i * n..i * n + cols].copy_from_slice(&w.w[i * cols..(i + 1) * cols]);
    }
    let (hungarian, u, v) = hungarian_square(&a, n);
    let total = |assign: &[usize]| -> f64 { (0..n).map(|i| a[i * n + assign[i]]).sum() };
    let lex = lexicographic_optimum(&a, n, &u, &v);
    let assign = if !lex.is_empty() && total(&lex) <= total(&hungarian) {
        lex
    } else {
        hungarian
    };
    assign
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < rows && j < cols)
        .collect()
}

fn equivalent_radius(area: usize) -> f64 {
    (area as f64 / PI).sqrt()
}

/// Optimal centroid matching followed by the acceptance test
/// `w_ij <= r_factor * (rho_i + rho_j) / 2`, with `rho = sqrt(area / pi)`.
pub fn match_instances(
    teacher: &InstanceLabelMap,
    student: &InstanceLabelMap,
    r_factor: f64,
) -> Result<MatchResult> {
    if !(r_factor > 0.0) {
        return Err(Error::InvalidParam(format!(
            "r_factor must be positive, got {r_factor}"
        )));
    }
    if teacher.height() != student.height() || teacher.width() != student.width() {
        return Err(Error::Shape("teacher and student maps differ in size".into()));
    }
    let w = distance_matrix(teacher, student);
    let ta = teacher.areas();
    let sa = student.areas();
    let mut result = MatchResult::default();
    let mut t_used = vec![false; w.rows];
    let mut s_used = vec![false; w.cols];
    for (i, j) in munkres(&w) {
        let pair = MatchPair {
            teacher: i as u32 + 1,
            student: j as u32 + 1,
            distance: w.get(i, j),
        };
        let rho = 0.5 * (equivalent_radius(ta[i]) + equivalent_radius(sa[j]));
        if pair.distance <= r_factor * rho {
            t_used[i] = true;
            s_used[j] = true;
            result.pairs.push(pair);
        } else {
            result.rejected.push(pair);
        }
    }
    result.unmatched_teacher = (0..w.rows)
        .filter(|&i| !t_used[i])
        .map(|i| i as u32 + 1)
        .collect();
    result.unmatched_student = (0..w.cols)
        .filter(|&j| !s_used[j])
        .map(|j| j as u32 + 1)
        .collect();
    Ok(result)
}
