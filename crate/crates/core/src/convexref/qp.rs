//! Dual active-set method (Goldfarb–Idnani) for `min ½‖x‖²` subject to `r_i · x ≥ b_i`.
//!
//! Starting from the unconstrained minimizer, the most violated constraint is added while dual
//! feasibility is preserved; a violated constraint whose normal is a nonpositive combination of
//! the active normals is a Farkas certificate of infeasibility.

use nalgebra::{DMatrix, DVector};

use super::ConvexError;

#[derive(Debug, Clone, PartialEq)]
pub struct UnitQp {
    pub x: Vec<f64>,
    /// One multiplier per constraint, zero off the active set.
    pub multipliers: Vec<f64>,
    pub active: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn solve_unit_qp(rows: &[Vec<f64>], rhs: &[f64]) -> Result<UnitQp, ConvexError> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) || rhs.len() != n {
        return Err(ConvexError::Shape("constraint rows have inconsistent lengths".into()));
    }
    let row_scale: Vec<f64> = rows.iter().map(|r| dot(r, r).sqrt()).collect();
    let mut x = vec![0.0; d];
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let max_iter = 20 * (n + d) + 50;
    let mut iter = 0;

    loop {
        let slack = |x: &[f64], i: usize| dot(&rows[i], x) - rhs[i];
        let violated = (0..n)
            .filter(|i| !active.contains(i))
            .map(|i| (i, slack(&x, i) / row_scale[i].max(f64::MIN_POSITIVE)))
            .filter(|&(i, s)| s < -1e-13 * (1.0 + rhs[i].abs() / row_scale[i].max(f64::MIN_POSITIVE)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((p, _)) = violated else { break };
        if row_scale[p] == 0.0 {
            return Err(ConvexError::Infeasible {
                certificate: unit_vector(n, p),
            });
        }
        let np = &rows[p];
        let mut up = 0.0;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(ConvexError::Numerical("active-set iteration limit reached".into()));
            }
            let (z, r) = if active.is_empty() {
                (np.clone(), Vec::new())
            } else {
                let nmat = DMatrix::from_fn(d, active.len(), |i, j| rows[active[j]][i]);
                let svd = nmat.clone().svd(true, true);
                let cutoff = 1e-13 * svd.singular_values.max().max(f64::MIN_POSITIVE);
                let r = svd
                    .solve(&DVector::from_column_slice(np), cutoff)
                    .map_err(|e| ConvexError::Numerical(e.to_string()))?;
                let proj = &nmat * &r;
                let z: Vec<f64> = np.iter().zip(proj.iter()).map(|(a, b)| a - b).collect();
                (z, r.iter().copied().collect())
            };
            let blocking = r
                .iter()
                .enumerate()
                .filter(|(_, &rj)| rj > 1e-14)
                .map(|(j, &rj)| (j, mult[j] / rj))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let znorm = dot(&z, &z).sqrt();
            if znorm <= 1e-10 * row_scale[p] {
                let Some((k, t)) = blocking else {
                    let mut cert = vec![0.0; n];
                    cert[p] = 1.0;
                    for (j, &i) in active.iter().enumerate() {
                        cert[i] = -r[j];
                    }
                    return Err(ConvexError::Infeasible { certificate: cert });
                };
                for (j, m) in mult.iter_mut().enumerate() {
                    *m -= t * r[j];
                }
                up += t;
                active.remove(k);
                mult.remove(k);
                continue;
            }
            let sp = slack(&x, p);
            let full = -sp / dot(&z, np);
            let (t, drop) = match blocking {
                Some((k, t)) if t < full => (t, Some(k)),
                _ => (full, None),
            };
            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi += t * zi;
            }
            for (j, m) in mult.iter_mut().enumerate() {
                *m -= t * r[j];
            }
            up += t;
            match drop {
                Some(k) => {
                    active.remove(k);
                    mult.remove(k);
                }
                None => {
                    active.push(p);
                    mult.push(up);
                    break;
                }
            }
        }
    }

    // Re-solve the active equalities directly; the incremental updates accumulate rounding that
    // large multipliers amplify in the complementarity residual.
    if !active.is_empty() {
        let nmat = DMatrix::from_fn(d, active.len(), |i, j| rows[active[j]][i]);
        let svd = nmat.transpose().svd(true, true);
        let cutoff = 1e-13 * svd.singular_values.max();
        let target = DVector::from_iterator(active.len(), active.iter().map(|&i| rhs[i]));
        if let Ok(polished) = svd.solve(&target, cutoff) {
            let svd = nmat.svd(true, true);
            if let Ok(lam) = svd.solve(&polished, cutoff) {
                x = polished.iter().copied().collect();
                mult = lam.iter().copied().collect();
            }
        }
    }
    let mut multipliers = vec![0.0; n];
    for (j, &i) in active.iter().enumerate() {
        multipliers[i] = mult[j].max(0.0);
    }
    Ok(UnitQp { x, multipliers, active })
}

fn unit_vector(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_constraints() {
        let rows = vec![vec![1.0, 0.25], vec![-1.0, 0.25]];
        let s = solve_unit_qp(&rows, &[1.0, 1.0]).unwrap();
        assert!((s.x[0]).abs() < 1e-14 && (s.x[1] - 4.0).abs() < 1e-13, "{:?}", s.x);
    }

    #[test]
    fn dependent_constraints_drop_and_add() {
        let rows = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![1.0, 1.0]];
        let s = solve_unit_qp(&rows, &[1.0, 3.0, 1.0]).unwrap();
        assert!((s.x[0] - 1.5).abs() < 1e-13 && s.x[1].abs() < 1e-13, "{:?}", s.x);
        assert_eq!(s.active, vec![1]);
    }

    #[test]
    fn contradictory_constraints() {
        let rows = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let err = solve_unit_qp(&rows, &[1.0, 1.0]).unwrap_err();
        let ConvexError::Infeasible { certificate } = err else { panic!("{err:?}") };
        let combo: Vec<f64> = (0..2).map(|c| rows.iter().zip(&certificate).map(|(r, w)| w * r[c]).sum()).collect();
        assert!(combo.iter().all(|v| v.abs() < 1e-12));
        assert!(certificate.iter().all(|&w| w >= 0.0));
    }
}
