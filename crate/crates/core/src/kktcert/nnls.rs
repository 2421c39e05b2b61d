//! Lawson–Hanson active-set method for `min ‖A x − b‖₂` subject to `x ≥ 0`.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    pub residual_norm: f64,
    /// `Aᵀ(b − A x)`; nonpositive on zero coordinates and zero on positive ones at optimality.
    pub dual: Vec<f64>,
    pub iterations: usize,
}

fn least_squares(a: &DMatrix<f64>, cols: &[usize], b: &DVector<f64>) -> Vec<f64> {
    let sub = a.select_columns(cols);
    let svd = sub.svd(true, true);
    let cutoff = 1e-13 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let z = svd.solve(b, cutoff).expect("both factors were computed");
    z.iter().copied().collect()
}

pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> NnlsSolution {
    let n = a.ncols();
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())) * b.amax().max(1.0);
    let tol = 1e-13 * scale.max(1.0);
    let max_iter = 3 * n + 30;
    let dual_of = |x: &[f64]| -> DVector<f64> { a.transpose() * (b - a * DVector::from_column_slice(x)) };

    let mut iterations = 0;
    while iterations < max_iter {
        let w = dual_of(&x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(t) = candidate else { break };
        passive[t] = true;
        loop {
            iterations += 1;
            let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let zp = least_squares(a, &cols, b);
            let mut z = vec![0.0; n];
            for (k, &j) in cols.iter().enumerate() {
                z[j] = zp[k];
            }
            if cols.iter().all(|&j| z[j] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &j in &cols {
                if z[j] <= 0.0 {
                    let denom = x[j] - z[j];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for j in 0..n {
                x[j] += alpha * (z[j] - x[j]);
            }
            for &j in &cols {
                if x[j] <= tol * 1e-3 || (z[j] <= 0.0 && x[j] <= f64::EPSILON * scale) {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) || iterations >= max_iter {
                break;
            }
        }
    }
    let xv = DVector::from_column_slice(&x);
    let residual_norm = (b - a * &xv).norm();
    let dual = dual_of(&x).iter().copied().collect();
    NnlsSolution {
        x,
        residual_norm,
        dual,
        iterations,
    }
}
