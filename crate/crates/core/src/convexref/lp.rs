//! `min ‖β‖₁` s.t. `Zβ ≥ 1` by enumerating basic feasible solutions of the standard form
//! `[Z −Z −I] (β⁺, β⁻, s) = 1`, all variables nonnegative.

use nalgebra::{DMatrix, DVector};

use super::ConvexError;

/// Largest number of candidate bases we are willing to enumerate.
pub const MAX_BASES: u128 = 20_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn lex_less(a: &[f64], b: &[f64], tol: f64) -> bool {
    for (x, y) in a.iter().zip(b) {
        if (x - y).abs() > tol {
            return x < y;
        }
    }
    false
}

/// Returns the lexicographically smallest optimizer among optimal vertices.
pub fn l1_vertex_enumeration(rows: &[Vec<f64>]) -> Result<Vec<f64>, ConvexError> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let cols = 2 * d + n;
    let count = binomial(cols, n);
    if count > MAX_BASES {
        return Err(ConvexError::TooLarge(format!("{count} candidate bases for n={n}, d={d}")));
    }
    let column = |j: usize, i: usize| -> f64 {
        if j < d {
            rows[i][j]
        } else if j < 2 * d {
            -rows[i][j - d]
        } else if j - 2 * d == i {
            -1.0
        } else {
            0.0
        }
    };
    let ones = DVector::from_element(n, 1.0);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut basis: Vec<usize> = (0..n).collect();
    loop {
        // Columns for β⁺_j and β⁻_j are parallel, so a basis holding both is singular.
        let paired = basis.iter().any(|&j| j < d && basis.contains(&(j + d)));
        if !paired {
            let mat = DMatrix::from_fn(n, n, |i, c| column(basis[c], i));
            let lu = mat.clone().lu();
            if lu.is_invertible() {
                if let Some(x) = lu.solve(&ones) {
                    let residual = (&mat * &x - &ones).amax();
                    if residual < 1e-9 && x.amax() < 1e12 && x.iter().all(|&v| v >= -1e-11) {
                        let mut beta = vec![0.0; d];
                        for (c, &j) in basis.iter().enumerate() {
                            let v = x[c].max(0.0);
                            if j < d {
                                beta[j] += v;
                            } else if j < 2 * d {
                                beta[j - d] -= v;
                            }
                        }
                        let obj: f64 = beta.iter().map(|b| b.abs()).sum();
                        let tol = 1e-11 * obj.max(1.0);
                        let better = match &best {
                            None => true,
                            Some((bo, bb)) => obj < bo - tol || ((obj - bo).abs() <= tol && lex_less(&beta, bb, 1e-11)),
                        };
                        if better {
                            best = Some((obj, beta));
                        }
                    }
                }
            }
        }
        // Next combination in lexicographic order.
        let mut k = n;
        loop {
            if k == 0 {
                return best.map(|(_, b)| b).ok_or(ConvexError::Infeasible { certificate: Vec::new() });
            }
            k -= 1;
            if basis[k] < cols - n + k {
                break;
            }
        }
        basis[k] += 1;
        for j in k + 1..n {
            basis[j] = basis[j - 1] + 1;
        }
    }
}
