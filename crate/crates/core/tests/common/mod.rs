//! Brute-force oracles shared by the solver tests and the acceptance harness.
#![allow(dead_code)]

use marginlab::netcore::{Dataset, Example};
use nalgebra::{DMatrix, DVector};

fn subsets(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (1u32..(1 << n)).map(move |mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
}

/// Minimum norm over projections of the origin onto faces of the feasible set.
pub fn qp_oracle(rows: &[Vec<f64>]) -> Option<f64> {
    let d = rows[0].len();
    let mut best: Option<f64> = None;
    for s in subsets(rows.len()) {
        let r = DMatrix::from_fn(s.len(), d, |i, j| rows[s[i]][j]);
        let ones = DVector::from_element(s.len(), 1.0);
        let Some(mu) = (&r * r.transpose()).lu().solve(&ones) else { continue };
        let x = r.transpose() * mu;
        // Tolerances scale with ‖r‖‖x‖, the size of the rounding in each product.
        let slack = |row: &[f64]| {
            let scale = row.iter().map(|v| v * v).sum::<f64>().sqrt() * x.norm();
            (row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>(), 1e-9 * (1.0 + scale))
        };
        if !x.iter().all(|v| v.is_finite()) || s.iter().any(|&i| (slack(&rows[i]).0 - 1.0).abs() > slack(&rows[i]).1) {
            continue;
        }
        let feasible = rows.iter().all(|row| {
            let (m, tol) = slack(row);
            m >= 1.0 - tol
        });
        if feasible {
            let n = x.norm();
            best = Some(best.map_or(n, |b: f64| b.min(n)));
        }
    }
    best
}

/// Dual of the ℓ1 problem, `max 1ᵀλ` s.t. `‖Zᵀλ‖∞ ≤ 1`, `λ ≥ 0`, by vertex enumeration.
pub fn l1_dual_oracle(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let d = rows[0].len();
    let mut cons: Vec<(Vec<f64>, f64)> = Vec::new();
    for j in 0..d {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        cons.push((col.clone(), 1.0));
        cons.push((col.iter().map(|v| -v).collect(), 1.0));
    }
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = -1.0;
        cons.push((e, 0.0));
    }
    let m = cons.len();
    let mut best = f64::NEG_INFINITY;
    let mut pick: Vec<usize> = (0..n).collect();
    loop {
        let a = DMatrix::from_fn(n, n, |i, j| cons[pick[i]].0[j]);
        let b = DVector::from_fn(n, |i, _| cons[pick[i]].1);
        if let Some(lam) = a.lu().solve(&b) {
            let ok = lam.iter().all(|v| v.is_finite())
                && cons.iter().all(|(c, rhs)| c.iter().zip(lam.iter()).map(|(x, y)| x * y).sum::<f64>() <= rhs + 1e-9);
            if ok {
                best = best.max(lam.sum());
            }
        }
        let mut k = n;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if pick[k] < m - n + k {
                break;
            }
        }
        pick[k] += 1;
        for j in k + 1..n {
            pick[j] = pick[j - 1] + 1;
        }
    }
}

pub fn dataset(points: &[Vec<f64>], labels: &[bool]) -> Dataset {
    Dataset::new(
        points
            .iter()
            .zip(labels)
            .map(|(x, &y)| Example::new(x.clone(), if y { 1.0 } else { -1.0 }))
            .collect(),
    )
    .unwrap()
}

/// Two-group problem `min ‖u₁‖ + ‖u₂‖` over rows split at column `split`.
///
/// `(‖u₁‖ + ‖u₂‖)² = min over η ∈ [0,1] of ‖u₁‖²/η + ‖u₂‖²/(1−η)`, which is convex in η and
/// evaluates as the ℓ2 problem on rows scaled by `(√η, √(1−η))`.
pub fn two_group_oracle(rows: &[Vec<f64>], split: usize) -> Option<f64> {
    let value = |eta: f64| -> f64 {
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, v)| v * if j < split { eta.sqrt() } else { (1.0 - eta).sqrt() })
                    .collect()
            })
            .collect();
        qp_oracle(&scaled).map_or(f64::INFINITY, |n| n * n)
    };
    qp_oracle(rows)?;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut fa, mut fb) = (value(a), value(b));
    for _ in 0..90 {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = value(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = value(b);
        }
    }
    let best = [value(0.0), value(1.0), fa, fb].into_iter().fold(f64::INFINITY, f64::min);
    Some(best.sqrt())
}
