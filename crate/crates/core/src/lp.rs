//! Phase-one simplex for small dense feasibility problems.
//!
//! Decides whether `{x >= 0 : A x = b}` is nonempty. Bland's rule keeps the
//! method finite on degenerate problems, which are the norm for convex-hull
//! membership queries with points on the boundary.

const PIVOT_EPS: f64 = 1e-12;

/// Whether some `x >= 0` solves `A x = b` up to `tol` in total residual.
///
/// `rows` is `A` in row-major order; every row must have the same length.
pub fn feasible(rows: &[Vec<f64>], rhs: &[f64], tol: f64) -> bool {
    let m = rows.len();
    assert_eq!(m, rhs.len(), "one right-hand side per row");
    if m == 0 {
        return true;
    }
    let n = rows[0].len();
    let width = n + m + 1;

    // Tableau rows: [A | I | b] with b made nonnegative.
    let mut tab: Vec<Vec<f64>> = rows
        .iter()
        .zip(rhs)
        .enumerate()
        .map(|(i, (row, &b))| {
            assert_eq!(row.len(), n, "ragged constraint matrix");
            let sign = if b < 0.0 { -1.0 } else { 1.0 };
            let mut r: Vec<f64> = row.iter().map(|v| sign * v).collect();
            r.extend((0..m).map(|j| if j == i { 1.0 } else { 0.0 }));
            r.push(sign * b);
            r
        })
        .collect();
    let mut basis: Vec<usize> = (n..n + m).collect();

    // Reduced costs of the phase-one objective (sum of artificials).
    let mut cost = vec![0.0; width];
    for r in &tab {
        for j in 0..n {
            cost[j] -= r[j];
        }
        cost[width - 1] -= r[width - 1];
    }

    loop {
        let Some(enter) = (0..n + m).find(|&j| cost[j] < -PIVOT_EPS) else {
            break;
        };
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for (i, r) in tab.iter().enumerate() {
            if r[enter] > PIVOT_EPS {
                let ratio = r[width - 1] / r[enter];
                let better = ratio < best - PIVOT_EPS
                    || (ratio <= best + PIVOT_EPS && leave.is_some_and(|l| basis[i] < basis[l]));
                if leave.is_none() || better {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        // Phase one is bounded below by zero, so this cannot really happen.
        let Some(row) = leave else { break };

        let piv = tab[row][enter];
        for v in tab[row].iter_mut() {
            *v /= piv;
        }
        let pivot_row = tab[row].clone();
        for (i, r) in tab.iter_mut().enumerate() {
            if i != row && r[enter] != 0.0 {
                let f = r[enter];
                for (v, p) in r.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
        let f = cost[enter];
        for (v, p) in cost.iter_mut().zip(&pivot_row) {
            *v -= f * p;
        }
        basis[row] = enter;
    }

    let residual: f64 = tab
        .iter()
        .zip(&basis)
        .filter(|(_, &b)| b >= n)
        .map(|(r, _)| r[width - 1])
        .sum();
    residual <= tol
}

/// Whether `target` is a convex combination of `points`.
pub fn in_convex_hull(points: &[Vec<f64>], target: &[f64], tol: f64) -> bool {
    if points.is_empty() {
        return false;
    }
    let d = target.len();
    let mut rows: Vec<Vec<f64>> = (0..d).map(|i| points.iter().map(|p| p[i]).collect()).collect();
    rows.push(vec![1.0; points.len()]);
    let mut rhs = target.to_vec();
    rhs.push(1.0);
    feasible(&rows, &rhs, tol)
}
