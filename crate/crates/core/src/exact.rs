//! Exact transportation solver used as ground truth.
//!
//! [`solve_transport_exact`] runs the transportation simplex: a northwest
//! corner start followed by MODI (u-v potential) pivoting with Bland's rule,
//! which guarantees termination on degenerate bases. [`enumerate_tiny`] is a
//! brute-force grid search over the free coordinates of very small problems,
//! kept around to check the simplex itself.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ot::{CostMatrix, MarginalWeights};

const BALANCE_TOL: f64 = 1e-9;
const REDUCED_COST_TOL: f64 = 1e-12;
const TIE_TOL: f64 = 1e-10;

/// Dual potentials certifying optimality: `c[i][j] - row[i] - col[j] >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub row: Vec<f64>,
    pub col: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub flow: Array2<f64>,
    pub objective: f64,
    /// Set when some off-basis reduced cost is zero, i.e. the optimum is
    /// not unique.
    pub basis_degenerate: bool,
    pub duals: Option<Duals>,
    pub pivots: usize,
}

fn balanced_marginals(weights: &MarginalWeights, n: usize, m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if weights.a.len() != n || weights.b.len() != m {
        return Err(Error::Dimension(format!(
            "cost is {n}x{m} but marginals have lengths {} and {}",
            weights.a.len(),
            weights.b.len()
        )));
    }
    let (a, b) = weights.normalized()?;
    let row_mass: f64 = weights.a.iter().sum();
    let col_mass: f64 = weights.b.iter().sum();
    if (row_mass - col_mass).abs() > BALANCE_TOL * row_mass.max(col_mass) {
        return Err(Error::Unbalanced { row_mass, col_mass });
    }
    Ok((a.to_vec(), b.to_vec()))
}

/// Vertex-optimal plan for `min sum C X` subject to the marginal constraints.
///
/// Both marginals must carry the same total mass (relative tolerance 1e-9);
/// they are rescaled to unit mass before solving.
pub fn solve_transport_exact(cost: &CostMatrix, weights: &MarginalWeights) -> Result<LpSolution> {
    let (n, m) = cost.shape();
    let (a, b) = balanced_marginals(weights, n, m)?;
    let c = cost.view();

    let mut flow = Array2::<f64>::zeros((n, m));
    let mut basic = Array2::from_elem((n, m), false);
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(n + m - 1);

    // Northwest corner. When a row and a column are exhausted together only
    // the row advances, leaving a zero-flow basic cell so the basis stays a
    // spanning tree with n + m - 1 cells.
    let (mut ra, mut rb) = (a.clone(), b.clone());
    let (mut i, mut j) = (0, 0);
    loop {
        let q = ra[i].min(rb[j]);
        flow[[i, j]] = q;
        basic[[i, j]] = true;
        basis.push((i, j));
        ra[i] -= q;
        rb[j] -= q;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if j == m - 1 || (i < n - 1 && ra[i] <= rb[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(basis.len(), n + m - 1);

    let max_pivots = 50 * n * m + 1000;
    let mut pivots = 0;
    loop {
        let (row_pot, col_pot) = potentials(&c, &basis, n, m);
        // Bland: first cell in row-major order with a negative reduced cost.
        let entering = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .find(|&(i, j)| !basic[[i, j]] && c[[i, j]] - row_pot[i] - col_pot[j] < -REDUCED_COST_TOL);
        let Some((ei, ej)) = entering else {
            let basis_degenerate = (0..n).any(|i| {
                (0..m).any(|j| !basic[[i, j]] && (c[[i, j]] - row_pot[i] - col_pot[j]).abs() <= TIE_TOL)
            });
            let objective = c.iter().zip(flow.iter()).map(|(c, x)| c * x).sum();
            return Ok(LpSolution {
                flow,
                objective,
                basis_degenerate,
                duals: Some(Duals {
                    row: row_pot,
                    col: col_pot,
                }),
                pivots,
            });
        };

        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::NoConvergence(format!(
                "transportation simplex exceeded {max_pivots} pivots"
            )));
        }

        let path = tree_path(&basis, n, m, ei, ej);
        // Path edges alternate starting with a donor (-) cell.
        let donors: Vec<(usize, usize)> = path.iter().step_by(2).copied().collect();
        let theta = donors
            .iter()
            .map(|&(i, j)| flow[[i, j]])
            .fold(f64::INFINITY, f64::min);
        let leaving = donors
            .iter()
            .copied()
            .filter(|&(i, j)| flow[[i, j]] <= theta)
            .min()
            .expect("cycle has at least one donor");

        flow[[ei, ej]] = theta;
        for (k, &(i, j)) in path.iter().enumerate() {
            if k % 2 == 0 {
                flow[[i, j]] = (flow[[i, j]] - theta).max(0.0);
            } else {
                flow[[i, j]] += theta;
            }
        }
        flow[[leaving.0, leaving.1]] = 0.0;
        basic[[leaving.0, leaving.1]] = false;
        basic[[ei, ej]] = true;
        let slot = basis
            .iter()
            .position(|&cell| cell == leaving)
            .expect("leaving cell is basic");
        basis[slot] = (ei, ej);
    }
}

/// Row and column potentials with `row[0] = 0` and `row[i] + col[j] = c[i][j]`
/// on every basic cell.
fn potentials(
    c: &ndarray::ArrayView2<f64>,
    basis: &[(usize, usize)],
    n: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>) {
    let adjacency = adjacency(basis, n, m);
    let mut row = vec![f64::NAN; n];
    let mut col = vec![f64::NAN; m];
    row[0] = 0.0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(node) = queue.pop_front() {
        for &other in &adjacency[node] {
            if node < n {
                let j = other - n;
                if col[j].is_nan() {
                    col[j] = c[[node, j]] - row[node];
                    queue.push_back(other);
                }
            } else {
                let i = other;
                let j = node - n;
                if row[i].is_nan() {
                    row[i] = c[[i, j]] - col[j];
                    queue.push_back(other);
                }
            }
        }
    }
    (row, col)
}

/// Row nodes are `0..n`, column nodes `n..n + m`.
fn adjacency(basis: &[(usize, usize)], n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut adjacency = vec![Vec::new(); n + m];
    for &(i, j) in basis {
        adjacency[i].push(n + j);
        adjacency[n + j].push(i);
    }
    adjacency
}

/// Basic cells on the tree path from column `ej` back to row `ei`, listed so
/// that the first cell touches column `ej`.
fn tree_path(basis: &[(usize, usize)], n: usize, m: usize, ei: usize, ej: usize) -> Vec<(usize, usize)> {
    let adjacency = adjacency(basis, n, m);
    let mut parent = vec![usize::MAX; n + m];
    let start = n + ej;
    parent[start] = start;
    let mut queue = VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == ei {
            break;
        }
        for &other in &adjacency[node] {
            if parent[other] == usize::MAX {
                parent[other] = node;
                queue.push_back(other);
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = ei;
    while node != start {
        let prev = parent[node];
        let cell = if node < n { (node, prev - n) } else { (prev, node - n) };
        cells.push(cell);
        node = prev;
    }
    // Walked from the row end; reverse so the cell on column `ej` is first.
    cells.reverse();
    cells
}

/// Brute-force optimum over a grid of the free coordinates.
///
/// The top-left `(n-1) x (m-1)` block is free, the last row and column are
/// implied by the marginals. Each free coordinate ranges over multiples of
/// `1/grid` inside its feasible interval plus the interval endpoints.
pub fn enumerate_tiny(cost: &CostMatrix, weights: &MarginalWeights, grid: usize) -> Result<LpSolution> {
    let (n, m) = cost.shape();
    if n > 3 || m > 3 {
        return Err(Error::TooLarge(format!("{n}x{m} exceeds 3x3")));
    }
    if grid == 0 || grid > 200 {
        return Err(Error::InvalidConfig(format!("grid must be in 1..=200, got {grid}")));
    }
    let (a, b) = balanced_marginals(weights, n, m)?;

    let free: Vec<(usize, usize)> = (0..n.saturating_sub(1))
        .flat_map(|i| (0..m.saturating_sub(1)).map(move |j| (i, j)))
        .collect();
    let mut search = GridSearch {
        c: cost.view().to_owned(),
        a,
        b,
        free,
        grid: grid as f64,
        current: Array2::zeros((n, m)),
        best: None,
    };
    search.descend(0);
    let (objective, flow) = search
        .best
        .ok_or_else(|| Error::NoConvergence("no feasible grid point".into()))?;
    Ok(LpSolution {
        flow,
        objective,
        basis_degenerate: false,
        duals: None,
        pivots: 0,
    })
}

struct GridSearch {
    c: Array2<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    free: Vec<(usize, usize)>,
    grid: f64,
    current: Array2<f64>,
    best: Option<(f64, Array2<f64>)>,
}

impl GridSearch {
    fn descend(&mut self, depth: usize) {
        let (n, m) = self.current.dim();
        if depth == self.free.len() {
            self.complete(n, m);
            return;
        }
        let (i, j) = self.free[depth];
        let row_used: f64 = (0..j).map(|l| self.current[[i, l]]).sum();
        let col_used: f64 = (0..i).map(|l| self.current[[l, j]]).sum();
        let hi = (self.a[i] - row_used).min(self.b[j] - col_used).max(0.0);
        let mut lo = 0.0;
        if depth + 1 == self.free.len() {
            // Corner cell x[n-1][m-1] = sum(free) - (sum_{j<m-1} b_j - a_{n-1}).
            let assigned: f64 = self.free[..depth].iter().map(|&(p, q)| self.current[[p, q]]).sum();
            let need: f64 = self.b[..m - 1].iter().sum::<f64>() - self.a[n - 1];
            lo = (need - assigned).max(0.0);
        }
        if lo > hi + 1e-12 {
            return;
        }
        let mut candidates = vec![lo, hi];
        let first = (lo * self.grid).ceil() as usize;
        let last = (hi * self.grid).floor() as usize;
        candidates.extend((first..=last).map(|k| k as f64 / self.grid));
        for x in candidates {
            if x < lo || x > hi {
                continue;
            }
            self.current[[i, j]] = x;
            self.descend(depth + 1);
        }
        self.current[[i, j]] = 0.0;
    }

    fn complete(&mut self, n: usize, m: usize) {
        let mut flow = self.current.clone();
        for i in 0..n - 1 {
            let used: f64 = (0..m - 1).map(|j| flow[[i, j]]).sum();
            flow[[i, m - 1]] = self.a[i] - used;
        }
        for j in 0..m {
            let used: f64 = (0..n - 1).map(|i| flow[[i, j]]).sum();
            flow[[n - 1, j]] = self.b[j] - used;
        }
        if flow.iter().any(|&x| x < -1e-12) {
            return;
        }
        flow.mapv_inplace(|x| x.max(0.0));
        let objective: f64 = self.c.iter().zip(flow.iter()).map(|(c, x)| c * x).sum();
        if self.best.as_ref().is_none_or(|(best, _)| objective < *best) {
            self.best = Some((objective, flow));
        }
    }
}
