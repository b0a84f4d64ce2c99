//! Dense two-phase primal simplex with bounded variables.
//!
//! Variables at their upper bound are kept as complemented columns
//! (`x = u - x'`), so every nonbasic variable sits at zero in the working
//! representation and bound flips never touch the basis.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimplexError {
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
    #[error("malformed program: {0}")]
    Malformed(String),
}

/// `min c·x` subject to `A x <= b` and `lower <= x <= upper`.
///
/// Rows are stored sparsely; lower bounds must be finite, upper bounds may
/// be infinite.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn add_var(&mut self, cost: f64, lower: f64, upper: f64) -> usize {
        self.objective.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.objective.len() - 1
    }

    /// Adds `sum coeffs <= rhs`.
    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.rows.push(coeffs);
        self.rhs.push(rhs);
        self.rows.len() - 1
    }

    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_vars()];
        for &(j, a) in &self.rows[i] {
            row[j] += a;
        }
        row
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest violation of any row or bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let rows = self.rows.iter().zip(&self.rhs).map(|(row, b)| {
            let lhs: f64 = row.iter().map(|&(j, a)| a * x[j]).sum();
            lhs - b
        });
        let bounds = x.iter().enumerate().map(|(j, v)| (self.lower[j] - v).max(v - self.upper[j]));
        rows.chain(bounds).fold(0.0, f64::max)
    }

    fn check(&self) -> Result<(), SimplexError> {
        let n = self.num_vars();
        if self.lower.len() != n || self.upper.len() != n || self.rhs.len() != self.rows.len() {
            return Err(SimplexError::Malformed("inconsistent dimensions".into()));
        }
        for j in 0..n {
            if !self.lower[j].is_finite() || self.upper[j] < self.lower[j] || !self.objective[j].is_finite() {
                return Err(SimplexError::Malformed(format!("variable {j} has bounds [{}, {}]", self.lower[j], self.upper[j])));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if !self.rhs[i].is_finite() || row.iter().any(|&(j, a)| j >= n || !a.is_finite()) {
                return Err(SimplexError::Malformed(format!("row {i} is malformed")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexOptions {
    pub pivot_tol: f64,
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub max_iterations: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { pivot_tol: 1e-9, feasibility_tol: 1e-7, optimality_tol: 1e-9, max_iterations: 1_000_000 }
    }
}

pub fn solve(lp: &LinearProgram) -> Result<LpSolution, SimplexError> {
    solve_with(lp, &SimplexOptions::default())
}

pub fn solve_with(lp: &LinearProgram, opts: &SimplexOptions) -> Result<LpSolution, SimplexError> {
    lp.check()?;
    let mut tab = Tableau::build(lp);
    let mut iterations = 0;

    if tab.artificials > 0 {
        let n0 = lp.num_vars() + tab.m;
        let cost: Vec<f64> = (0..tab.n).map(|k| if k >= n0 { 1.0 } else { 0.0 }).collect();
        tab.price(&cost);
        if tab.optimize(opts, &mut iterations)? == Outcome::Unbounded {
            return Err(SimplexError::Malformed("phase one reported unbounded".into()));
        }
        let infeasibility: f64 = (0..tab.m).filter(|&i| tab.basis[i] >= n0).map(|i| tab.b[i]).sum();
        if infeasibility > opts.feasibility_tol {
            return Ok(LpSolution { status: LpStatus::Infeasible, x: vec![], objective: f64::NAN, iterations });
        }
        for k in n0..tab.n {
            tab.upper[k] = 0.0;
            tab.blocked[k] = true;
        }
    }

    let mut cost = vec![0.0; tab.n];
    cost[..lp.num_vars()].copy_from_slice(&lp.objective);
    tab.price(&cost);
    let status = match tab.optimize(opts, &mut iterations)? {
        Outcome::Optimal => LpStatus::Optimal,
        Outcome::Unbounded => LpStatus::Unbounded,
    };
    let x = tab.primal(lp);
    let objective = if status == LpStatus::Optimal { lp.evaluate(&x) } else { f64::NEG_INFINITY };
    Ok(LpSolution { status, x, objective, iterations })
}

#[derive(Debug, PartialEq)]
enum Outcome {
    Optimal,
    Unbounded,
}

struct Tableau {
    m: usize,
    n: usize,
    artificials: usize,
    /// Row-major `m x n`, holds `B^-1 A` in the working representation.
    a: Vec<f64>,
    b: Vec<f64>,
    /// Reduced costs.
    d: Vec<f64>,
    upper: Vec<f64>,
    flipped: Vec<bool>,
    blocked: Vec<bool>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let (m, nv) = (lp.num_rows(), lp.num_vars());
        let mut shifted = lp.rhs.clone();
        for (i, row) in lp.rows.iter().enumerate() {
            shifted[i] -= row.iter().map(|&(j, a)| a * lp.lower[j]).sum::<f64>();
        }
        let artificials = shifted.iter().filter(|b| **b < 0.0).count();
        let n = nv + m + artificials;
        let mut a = vec![0.0; m * n];
        let mut b = vec![0.0; m];
        let mut basis = vec![0; m];
        let mut next_art = nv + m;
        for (i, row) in lp.rows.iter().enumerate() {
            let sign = if shifted[i] < 0.0 { -1.0 } else { 1.0 };
            let r = &mut a[i * n..(i + 1) * n];
            for &(j, v) in row {
                r[j] += sign * v;
            }
            r[nv + i] = sign;
            b[i] = sign * shifted[i];
            if sign < 0.0 {
                r[next_art] = 1.0;
                basis[i] = next_art;
                next_art += 1;
            } else {
                basis[i] = nv + i;
            }
        }
        let mut upper = vec![f64::INFINITY; n];
        for j in 0..nv {
            upper[j] = lp.upper[j] - lp.lower[j];
        }
        let mut in_basis = vec![false; n];
        for &k in &basis {
            in_basis[k] = true;
        }
        Self {
            m,
            n,
            artificials,
            a,
            b,
            d: vec![0.0; n],
            upper,
            flipped: vec![false; n],
            blocked: vec![false; n],
            basis,
            in_basis,
        }
    }

    /// Recomputes reduced costs for `cost` given in the original orientation.
    fn price(&mut self, cost: &[f64]) {
        let work = |k: usize| if self.flipped[k] { -cost[k] } else { cost[k] };
        let mut d: Vec<f64> = (0..self.n).map(work).collect();
        for i in 0..self.m {
            let cb = work(self.basis[i]);
            if cb != 0.0 {
                let row = &self.a[i * self.n..(i + 1) * self.n];
                for (dk, ak) in d.iter_mut().zip(row) {
                    *dk -= cb * ak;
                }
            }
        }
        for &k in &self.basis {
            d[k] = 0.0;
        }
        self.d = d;
    }

    fn optimize(&mut self, opts: &SimplexOptions, iterations: &mut usize) -> Result<Outcome, SimplexError> {
        let bland_after = 2 * (self.m + self.n);
        let mut local = 0usize;
        loop {
            if *iterations >= opts.max_iterations {
                return Err(SimplexError::IterationLimit(opts.max_iterations));
            }
            let bland = local >= bland_after;
            let Some(j) = self.entering(opts.optimality_tol, bland) else {
                return Ok(Outcome::Optimal);
            };
            *iterations += 1;
            local += 1;

            let mut theta = self.upper[j];
            let mut leave: Option<(usize, bool)> = None;
            let mut best_alpha = 0.0;
            for i in 0..self.m {
                let alpha = self.a[i * self.n + j];
                let bi = self.basis[i];
                let (ratio, at_upper) = if alpha > opts.pivot_tol {
                    (self.b[i].max(0.0) / alpha, false)
                } else if alpha < -opts.pivot_tol && self.upper[bi].is_finite() {
                    ((self.upper[bi] - self.b[i]).max(0.0) / -alpha, true)
                } else {
                    continue;
                };
                let better = match leave {
                    _ if ratio < theta - 1e-12 => true,
                    Some((r, _)) if ratio <= theta + 1e-12 => {
                        if bland {
                            bi < self.basis[r]
                        } else {
                            alpha.abs() > best_alpha
                        }
                    }
                    _ => false,
                };
                if better {
                    theta = ratio.min(theta);
                    leave = Some((i, at_upper));
                    best_alpha = alpha.abs();
                }
            }
            if theta.is_infinite() {
                return Ok(Outcome::Unbounded);
            }
            match leave {
                None => self.flip_column(j),
                Some((r, at_upper)) => {
                    if at_upper {
                        self.complement_basic(r);
                    }
                    self.pivot(r, j);
                }
            }
        }
    }

    fn entering(&self, tol: f64, bland: bool) -> Option<usize> {
        let candidates = (0..self.n).filter(|&k| !self.in_basis[k] && !self.blocked[k] && self.d[k] < -tol);
        if bland {
            candidates.into_iter().next()
        } else {
            candidates.min_by(|&x, &y| self.d[x].total_cmp(&self.d[y]))
        }
    }

    /// Moves nonbasic `j` to its opposite bound.
    fn flip_column(&mut self, j: usize) {
        let u = self.upper[j];
        for i in 0..self.m {
            let cell = &mut self.a[i * self.n + j];
            self.b[i] -= *cell * u;
            *cell = -*cell;
        }
        self.d[j] = -self.d[j];
        self.flipped[j] = !self.flipped[j];
    }

    /// Rewrites the basic variable of row `r` as its complement.
    fn complement_basic(&mut self, r: usize) {
        let k = self.basis[r];
        let row = &mut self.a[r * self.n..(r + 1) * self.n];
        for v in row.iter_mut() {
            *v = -*v;
        }
        row[k] = 1.0;
        self.b[r] = self.upper[k] - self.b[r];
        self.flipped[k] = !self.flipped[k];
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let n = self.n;
        let inv = 1.0 / self.a[r * n + j];
        let mut pivot_row: Vec<(usize, f64)> = Vec::new();
        for k in 0..n {
            let v = &mut self.a[r * n + k];
            if *v != 0.0 {
                *v *= inv;
                pivot_row.push((k, *v));
            }
        }
        self.a[r * n + j] = 1.0;
        self.b[r] *= inv;
        let br = self.b[r];
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.a[i * n + j];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.a[i * n..(i + 1) * n];
            for &(k, v) in &pivot_row {
                let x = row[k] - f * v;
                row[k] = if x.abs() < 1e-14 { 0.0 } else { x };
            }
            row[j] = 0.0;
            self.b[i] -= f * br;
        }
        let f = self.d[j];
        if f != 0.0 {
            for &(k, v) in &pivot_row {
                self.d[k] -= f * v;
            }
        }
        self.d[j] = 0.0;
        self.in_basis[self.basis[r]] = false;
        self.in_basis[j] = true;
        self.basis[r] = j;
    }

    fn primal(&self, lp: &LinearProgram) -> Vec<f64> {
        let mut w = vec![0.0; self.n];
        for (i, &k) in self.basis.iter().enumerate() {
            w[k] = self.b[i];
        }
        (0..lp.num_vars())
            .map(|j| {
                let v = if self.flipped[j] { self.upper[j] - w[j] } else { w[j] };
                lp.lower[j] + v
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_variable_corner() {
        let mut lp = LinearProgram::new();
        let x = lp.add_var(-1.0, 0.0, f64::INFINITY);
        let y = lp.add_var(-1.0, 0.0, f64::INFINITY);
        lp.add_row(vec![(x, 1.0), (y, 1.0)], 1.0);
        let s = solve(&lp).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective + 1.0).abs() < 1e-12);
    }

    #[test]
    fn greater_equal_row_needs_phase_one() {
        let mut lp = LinearProgram::new();
        let x = lp.add_var(1.0, 0.0, f64::INFINITY);
        lp.add_row(vec![(x, -1.0)], -3.0);
        let s = solve(&lp).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut lp = LinearProgram::new();
        let x = lp.add_var(1.0, 0.0, 1.0);
        lp.add_row(vec![(x, -1.0)], -2.0);
        assert_eq!(solve(&lp).unwrap().status, LpStatus::Infeasible);

        let mut lp = LinearProgram::new();
        let x = lp.add_var(-1.0, 0.0, f64::INFINITY);
        let y = lp.add_var(0.0, 0.0, f64::INFINITY);
        lp.add_row(vec![(x, 1.0), (y, -1.0)], 1.0);
        assert_eq!(solve(&lp).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn upper_bounds_flip_without_rows() {
        let mut lp = LinearProgram::new();
        lp.add_var(-2.0, -1.0, 4.0);
        lp.add_var(3.0, -1.0, 4.0);
        let s = solve(&lp).unwrap();
        assert_eq!(s.x, vec![4.0, -1.0]);
        assert_eq!(s.objective, -11.0);
    }

    #[test]
    fn rejects_infinite_lower_bound() {
        let mut lp = LinearProgram::new();
        lp.add_var(1.0, f64::NEG_INFINITY, 0.0);
        assert!(matches!(solve(&lp), Err(SimplexError::Malformed(_))));
    }

    #[test]
    fn iteration_cap_is_reported() {
        let mut lp = LinearProgram::new();
        let x = lp.add_var(-1.0, 0.0, f64::INFINITY);
        lp.add_row(vec![(x, 1.0)], 1.0);
        let opts = SimplexOptions { max_iterations: 0, ..Default::default() };
        assert_eq!(solve_with(&lp, &opts), Err(SimplexError::IterationLimit(0)));
    }
}
