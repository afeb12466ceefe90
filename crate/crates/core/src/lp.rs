//! Dense phase-one simplex for small linear feasibility problems.
//!
//! Finds `x ≥ 0` with `A_eq x = b_eq` and `A_ub x ≤ b_ub`, or reports that no
//! such point exists. Used by the equilibrium oracle and by region checks;
//! deliberately independent of the NLP solver.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    Feasible(DVector<f64>),
    Infeasible,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible(_))
    }
}

const PIVOT_TOL: f64 = 1e-11;

/// Phase-one simplex with Bland's anti-cycling rule.
pub fn find_feasible(a_eq: &DMatrix<f64>, b_eq: &DVector<f64>, a_ub: &DMatrix<f64>, b_ub: &DVector<f64>) -> Feasibility {
    let n = a_eq.ncols().max(a_ub.ncols());
    let m_eq = a_eq.nrows();
    let m_ub = a_ub.nrows();
    assert!(m_eq == 0 || a_eq.ncols() == n);
    assert!(m_ub == 0 || a_ub.ncols() == n);
    let m = m_eq + m_ub;
    if m == 0 {
        return Feasibility::Feasible(DVector::zeros(n));
    }

    // Columns: x (n), slacks (m_ub), artificials (m), rhs.
    let n_cols = n + m_ub + m;
    let mut a = DMatrix::<f64>::zeros(m, n_cols);
    let mut b = DVector::<f64>::zeros(m);
    for r in 0..m_eq {
        for c in 0..n {
            a[(r, c)] = a_eq[(r, c)];
        }
        b[r] = b_eq[r];
    }
    for r in 0..m_ub {
        let row = m_eq + r;
        for c in 0..n {
            a[(row, c)] = a_ub[(r, c)];
        }
        a[(row, n + r)] = 1.0;
        b[row] = b_ub[r];
    }
    for r in 0..m {
        if b[r] < 0.0 {
            b[r] = -b[r];
            for c in 0..n + m_ub {
                a[(r, c)] = -a[(r, c)];
            }
        }
        a[(r, n + m_ub + r)] = 1.0;
    }
    let scale = 1.0 + b.amax() + a.amax();

    let mut tab = DMatrix::<f64>::zeros(m + 1, n_cols + 1);
    tab.view_mut((0, 0), (m, n_cols)).copy_from(&a);
    for r in 0..m {
        tab[(r, n_cols)] = b[r];
    }
    // Reduced costs of the phase-one objective (sum of artificials).
    for c in 0..n + m_ub {
        let s: f64 = (0..m).map(|r| a[(r, c)]).sum();
        tab[(m, c)] = -s;
    }
    tab[(m, n_cols)] = -b.sum();
    let mut basis: Vec<usize> = (0..m).map(|r| n + m_ub + r).collect();

    let max_iter = 50 * (m + n_cols) + 1000;
    for _ in 0..max_iter {
        let Some(enter) = (0..n_cols).find(|&c| tab[(m, c)] < -PIVOT_TOL * scale) else {
            break;
        };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..m {
            let coef = tab[(r, enter)];
            if coef > PIVOT_TOL * scale {
                let ratio = tab[(r, n_cols)] / coef;
                leave = match leave {
                    None => Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - 1e-14 * scale || (ratio <= lratio + 1e-14 * scale && basis[r] < basis[lr]) {
                            Some((r, ratio))
                        } else {
                            Some((lr, lratio))
                        }
                    }
                };
            }
        }
        let Some((row, _)) = leave else {
            // Unbounded direction in phase one cannot happen (objective ≥ 0).
            break;
        };
        pivot(&mut tab, row, enter);
        basis[row] = enter;
    }

    let infeasibility = -tab[(m, n_cols)];
    if infeasibility > 1e-9 * scale {
        return Feasibility::Infeasible;
    }

    // Recover x by re-solving the basis system on the original data.
    let mut basis_matrix = DMatrix::<f64>::zeros(m, m);
    for (k, &col) in basis.iter().enumerate() {
        basis_matrix.set_column(k, &a.column(col));
    }
    let xb = basis_matrix
        .clone()
        .lu()
        .solve(&b)
        .unwrap_or_else(|| DVector::from_iterator(m, (0..m).map(|r| tab[(r, n_cols)])));
    let mut x = DVector::zeros(n);
    for (k, &col) in basis.iter().enumerate() {
        if col < n {
            x[col] = xb[k].max(0.0);
        }
    }
    Feasibility::Feasible(x)
}

fn pivot(tab: &mut DMatrix<f64>, row: usize, col: usize) {
    let p = tab[(row, col)];
    let ncols = tab.ncols();
    for c in 0..ncols {
        tab[(row, c)] /= p;
    }
    for r in 0..tab.nrows() {
        if r == row {
            continue;
        }
        let f = tab[(r, col)];
        if f != 0.0 {
            for c in 0..ncols {
                let v = tab[(row, c)];
                tab[(r, c)] -= f * v;
            }
        }
    }
}

/// Whether `{p : A p ≤ b}` over free variables `p ∈ ℝⁿ` is nonempty.
pub fn polyhedron_nonempty(a: &DMatrix<f64>, b: &DVector<f64>) -> bool {
    if a.nrows() == 0 {
        return true;
    }
    let n = a.ncols();
    // p = p⁺ − p⁻ with both parts nonnegative.
    let mut split = DMatrix::zeros(a.nrows(), 2 * n);
    split.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    split.view_mut((0, n), (a.nrows(), n)).copy_from(&(-a));
    find_feasible(&DMatrix::zeros(0, 2 * n), &DVector::zeros(0), &split, b).is_feasible()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_feasible_system() {
        // x + y = 1, x ≤ 0.3
        let a_eq = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b_eq = DVector::from_row_slice(&[1.0]);
        let a_ub = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b_ub = DVector::from_row_slice(&[0.3]);
        let Feasibility::Feasible(x) = find_feasible(&a_eq, &b_eq, &a_ub, &b_ub) else { panic!() };
        assert!((x[0] + x[1] - 1.0).abs() < 1e-12);
        assert!(x[0] <= 0.3 + 1e-12);
        assert!(x.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn detects_infeasibility() {
        // x + y = 1, x + y ≤ 0.5
        let a_eq = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b_eq = DVector::from_row_slice(&[1.0]);
        let a_ub = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b_ub = DVector::from_row_slice(&[0.5]);
        assert_eq!(find_feasible(&a_eq, &b_eq, &a_ub, &b_ub), Feasibility::Infeasible);
    }

    #[test]
    fn negative_right_hand_sides() {
        // −x ≤ −2 (x ≥ 2), x ≤ 3, x = y
        let a_eq = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let b_eq = DVector::from_row_slice(&[0.0]);
        let a_ub = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, 0.0]);
        let b_ub = DVector::from_row_slice(&[-2.0, 3.0]);
        let Feasibility::Feasible(x) = find_feasible(&a_eq, &b_eq, &a_ub, &b_ub) else { panic!() };
        assert!(x[0] >= 2.0 - 1e-12 && x[0] <= 3.0 + 1e-12);
        assert!((x[0] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cycling_prone_problem() {
        // Beale's classic cycling example recast as feasibility with an
        // equality fixing the objective level.
        let a_ub = DMatrix::from_row_slice(
            3,
            4,
            &[0.25, -60.0, -0.04, 9.0, 0.5, -90.0, -0.02, 3.0, 0.0, 0.0, 1.0, 0.0],
        );
        let b_ub = DVector::from_row_slice(&[0.0, 0.0, 1.0]);
        let a_eq = DMatrix::from_row_slice(1, 4, &[0.75, -150.0, 0.02, -6.0]);
        let b_eq = DVector::from_row_slice(&[0.05]);
        let Feasibility::Feasible(x) = find_feasible(&a_eq, &b_eq, &a_ub, &b_ub) else { panic!() };
        assert!(((&a_eq * &x)[0] - 0.05).abs() < 1e-10);
        assert!((&a_ub * &x - &b_ub).iter().all(|&v| v <= 1e-10));
    }

    #[test]
    fn polyhedron_checks() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        assert!(polyhedron_nonempty(&a, &DVector::from_row_slice(&[1.0, -0.5])));
        assert!(!polyhedron_nonempty(&a, &DVector::from_row_slice(&[0.0, -0.5])));
    }
}
