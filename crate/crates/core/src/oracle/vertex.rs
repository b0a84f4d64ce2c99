//! Exhaustive vertex enumeration for tiny bounded programs.
//!
//! Used as an independent reference for the simplex solver: every choice of
//! `n` tight constraints is solved directly and the best feasible point wins.

use super::simplex::LinearProgram;

const SINGULAR: f64 = 1e-10;
const FEASIBLE: f64 = 1e-9;

/// Best vertex as `(objective, x)`, or `None` when no vertex is feasible.
///
/// Meaningful only when every variable has a finite upper bound, so the
/// feasible set is a polytope and its minimum is attained at a vertex.
pub fn enumerate_vertices(lp: &LinearProgram) -> Option<(f64, Vec<f64>)> {
    let n = lp.num_vars();
    let mut planes: Vec<(Vec<f64>, f64)> = (0..lp.num_rows()).map(|i| (lp.dense_row(i), lp.rhs[i])).collect();
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = -1.0;
        planes.push((e.clone(), -lp.lower[j]));
        if lp.upper[j].is_finite() {
            e[j] = 1.0;
            planes.push((e, lp.upper[j]));
        }
    }
    if n == 0 {
        let ok = lp.rhs.iter().all(|b| *b >= -FEASIBLE);
        return ok.then(|| (0.0, vec![]));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut pick: Vec<usize> = (0..n).collect();
    loop {
        if let Some(x) = solve_square(&pick.iter().map(|&k| &planes[k]).collect::<Vec<_>>()) {
            if lp.max_violation(&x) <= FEASIBLE {
                let obj = lp.evaluate(&x);
                if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                    best = Some((obj, x));
                }
            }
        }
        if !next_combination(&mut pick, planes.len()) {
            break;
        }
    }
    best
}

fn next_combination(pick: &mut [usize], total: usize) -> bool {
    let k = pick.len();
    for i in (0..k).rev() {
        if pick[i] < total - k + i {
            pick[i] += 1;
            for j in i + 1..k {
                pick[j] = pick[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Gaussian elimination with partial pivoting on the chosen hyperplanes.
fn solve_square(planes: &[&(Vec<f64>, f64)]) -> Option<Vec<f64>> {
    let n = planes.len();
    let mut m: Vec<Vec<f64>> = planes
        .iter()
        .map(|(a, b)| {
            let mut row = a.clone();
            row.push(*b);
            row
        })
        .collect();
    for col in 0..n {
        let p = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if m[p][col].abs() < SINGULAR {
            return None;
        }
        m.swap(col, p);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                if f != 0.0 {
                    for c in col..=n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_simplex_corner() {
        let mut lp = LinearProgram::new();
        let x = lp.add_var(-1.0, 0.0, 5.0);
        let y = lp.add_var(-2.0, 0.0, 5.0);
        lp.add_row(vec![(x, 1.0), (y, 1.0)], 1.0);
        let (obj, v) = enumerate_vertices(&lp).unwrap();
        assert_eq!(obj, -2.0);
        assert_eq!(v, vec![0.0, 1.0]);
    }

    #[test]
    fn infeasible_has_no_vertex() {
        let mut lp = LinearProgram::new();
        let x = lp.add_var(0.0, 0.0, 1.0);
        lp.add_row(vec![(x, -1.0)], -2.0);
        assert!(enumerate_vertices(&lp).is_none());
    }
}
