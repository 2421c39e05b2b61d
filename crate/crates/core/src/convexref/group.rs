//! Group-norm max-margin problem `min Σ_l ‖u_l‖` s.t. `y_i Σ_l A_il ⟨u_l, x_i^l⟩ ≥ 1`.
//!
//! Projected subgradient with Polyak-style steps gets close; reweighted least-norm QPs
//! (`η_l = ‖u_l‖`) identify the support and active constraints, and Newton steps on the KKT
//! equations finish. The multipliers found serve as the dual certificate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::qp::solve_unit_qp;
use super::ConvexError;

/// One group: per-example features and optional fixed gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gates: Option<Vec<bool>>,
}

impl Group {
    pub fn new(features: Vec<Vec<f64>>) -> Self {
        Self { features, gates: None }
    }

    pub fn gated(features: Vec<Vec<f64>>, gates: Vec<bool>) -> Self {
        Self {
            features,
            gates: Some(gates),
        }
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn gate(&self, i: usize) -> f64 {
        match &self.gates {
            Some(g) if !g[i] => 0.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub subgradient_iters: usize,
    pub polish_iters: usize,
    /// Convex-KKT residual required for a certified solution.
    pub tolerance: f64,
    /// A group is zero when `‖u_l‖ ≤ zero_threshold · objective`.
    pub zero_threshold: f64,
    /// Groups below `drop_threshold · objective` that pass the dual-norm test are set to zero
    /// and the remaining support re-solved.
    pub drop_threshold: f64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            subgradient_iters: 300,
            polish_iters: 3000,
            tolerance: 1e-6,
            zero_threshold: 1e-9,
            drop_threshold: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSolution {
    pub groups: Vec<Vec<f64>>,
    pub objective: f64,
    /// One multiplier per example.
    pub multipliers: Vec<f64>,
    pub residual: f64,
    pub zero_groups: Vec<usize>,
    pub certified: bool,
    pub iterations: usize,
}

struct Problem<'a> {
    groups: &'a [Group],
    /// `rows[i][l]` is `y_i A_il x_i^l`.
    rows: Vec<Vec<Vec<f64>>>,
    offsets: Vec<usize>,
    dim: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl<'a> Problem<'a> {
    fn new(groups: &'a [Group], labels: &[f64]) -> Result<Self, ConvexError> {
        let n = labels.len();
        if n == 0 || groups.is_empty() {
            return Err(ConvexError::Shape("need at least one group and one example".into()));
        }
        let mut offsets = Vec::with_capacity(groups.len());
        let mut dim = 0;
        for (l, g) in groups.iter().enumerate() {
            let k = g.dim();
            if g.features.len() != n || g.features.iter().any(|f| f.len() != k) {
                return Err(ConvexError::Shape(format!("groups[{l}].features must be {n} vectors of equal length")));
            }
            if g.gates.as_ref().is_some_and(|a| a.len() != n) {
                return Err(ConvexError::Shape(format!("groups[{l}].gates must have {n} entries")));
            }
            offsets.push(dim);
            dim += k;
        }
        let rows = (0..n)
            .map(|i| {
                groups
                    .iter()
                    .map(|g| g.features[i].iter().map(|v| labels[i] * g.gate(i) * v).collect())
                    .collect()
            })
            .collect();
        Ok(Self {
            groups,
            rows,
            offsets,
            dim,
        })
    }

    fn split(&self, flat: &[f64]) -> Vec<Vec<f64>> {
        self.groups
            .iter()
            .zip(&self.offsets)
            .map(|(g, &o)| flat[o..o + g.dim()].to_vec())
            .collect()
    }

    fn flat_rows(&self, weights: &[f64]) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|row| row.iter().zip(weights).flat_map(|(r, w)| r.iter().map(move |v| v * w)).collect())
            .collect()
    }

    fn objective(&self, flat: &[f64]) -> f64 {
        self.split(flat).iter().map(|u| norm(u)).sum()
    }

    fn margins(&self, groups: &[Vec<f64>]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().zip(groups).map(|(r, u)| r.iter().zip(u).map(|(a, b)| a * b).sum::<f64>()).sum())
            .collect()
    }

    /// Euclidean projection onto the feasible polyhedron.
    fn project(&self, z: &[f64]) -> Result<Vec<f64>, ConvexError> {
        let rows = self.flat_rows(&vec![1.0; self.groups.len()]);
        let rhs: Vec<f64> = rows.iter().map(|r| 1.0 - r.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()).collect();
        let shift = solve_unit_qp(&rows, &rhs)?;
        Ok(z.iter().zip(&shift.x).map(|(a, b)| a + b).collect())
    }

    /// `Σ_i λ_i y_i A_il x_i^l` per group.
    fn dual_combinations(&self, lambda: &[f64]) -> Vec<Vec<f64>> {
        self.groups
            .iter()
            .enumerate()
            .map(|(l, g)| {
                let mut combo = vec![0.0; g.dim()];
                for (i, row) in self.rows.iter().enumerate() {
                    for (c, v) in combo.iter_mut().zip(&row[l]) {
                        *c += lambda[i] * v;
                    }
                }
                combo
            })
            .collect()
    }

    /// Reweighted least-norm iterations over the groups in `support`, others held at zero.
    /// Returns the iterate, its multipliers and the number of QPs solved (at least one).
    fn reweighted(
        &self,
        start: &[Vec<f64>],
        support: &[bool],
        max_iter: usize,
        target: f64,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>, usize), ConvexError> {
        let mut parts = start.to_vec();
        let zero: Vec<bool> = support.iter().map(|s| !s).collect();
        let n = self.rows.len();
        let mut lambda = vec![0.0; n];
        let mut used = 0;
        while used < max_iter.max(1) {
            used += 1;
            // Groups that have all but vanished would only make the weighted QP ill-conditioned.
            let total: f64 = parts.iter().map(|p| norm(p)).sum();
            let roots: Vec<f64> = parts
                .iter()
                .zip(support)
                .map(|(p, &s)| {
                    let n = norm(p);
                    if s && n > 1e-12 * total {
                        n.sqrt()
                    } else {
                        0.0
                    }
                })
                .collect();
            let qp = solve_unit_qp(&self.flat_rows(&roots), &vec![1.0; n])?;
            parts = self
                .split(&qp.x)
                .iter()
                .zip(&roots)
                .map(|(p, r)| p.iter().map(|v| v * r).collect())
                .collect();
            lambda = qp.multipliers;
            let collapsed = parts.iter().zip(support).any(|(p, &s)| s && norm(p) == 0.0);
            if collapsed || self.residual_on(&parts, &lambda, &zero, false) <= target {
                break;
            }
        }
        Ok((parts, lambda, used))
    }

    /// Newton iterations on the KKT equations of the groups in `support` and the constraints in
    /// `active`, which are smooth once every supported group is nonzero.
    fn newton(
        &self,
        start: &[Vec<f64>],
        lambda: &[f64],
        support: &[bool],
        active: &[usize],
    ) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
        let groups: Vec<usize> = (0..start.len()).filter(|&l| support[l] && norm(&start[l]) > 0.0).collect();
        if groups.is_empty() || active.is_empty() {
            return None;
        }
        let mut offsets = Vec::with_capacity(groups.len());
        let mut nu = 0;
        for &l in &groups {
            offsets.push(nu);
            nu += start[l].len();
        }
        let dim = nu + active.len();
        let unpack = |z: &[f64]| -> Vec<Vec<f64>> {
            groups
                .iter()
                .zip(&offsets)
                .map(|(&l, &o)| z[o..o + start[l].len()].to_vec())
                .collect()
        };
        let eval = |z: &[f64]| -> Vec<f64> {
            let us = unpack(z);
            let mut f = Vec::with_capacity(dim);
            for (g, &l) in groups.iter().enumerate() {
                let n = norm(&us[g]);
                for c in 0..us[g].len() {
                    let combo: f64 = active.iter().enumerate().map(|(a, &i)| z[nu + a] * self.rows[i][l][c]).sum();
                    f.push(us[g][c] / n - combo);
                }
            }
            for &i in active {
                let m: f64 = groups
                    .iter()
                    .enumerate()
                    .map(|(g, &l)| self.rows[i][l].iter().zip(&us[g]).map(|(a, b)| a * b).sum::<f64>())
                    .sum();
                f.push(m - 1.0);
            }
            f
        };
        let jacobian = |z: &[f64]| -> DMatrix<f64> {
            let us = unpack(z);
            let mut jac = DMatrix::zeros(dim, dim);
            for (g, &l) in groups.iter().enumerate() {
                let o = offsets[g];
                let k = us[g].len();
                let n = norm(&us[g]);
                for r in 0..k {
                    for c in 0..k {
                        let delta = if r == c { 1.0 } else { 0.0 };
                        jac[(o + r, o + c)] = (delta - us[g][r] * us[g][c] / (n * n)) / n;
                    }
                    for (a, &i) in active.iter().enumerate() {
                        jac[(o + r, nu + a)] = -self.rows[i][l][r];
                        jac[(nu + a, o + r)] = self.rows[i][l][r];
                    }
                }
            }
            jac
        };
        let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));

        let mut z: Vec<f64> = groups.iter().flat_map(|&l| start[l].iter().copied()).collect();
        z.extend(active.iter().map(|&i| lambda[i]));
        let mut f = eval(&z);
        for _ in 0..50 {
            let current = max_abs(&f);
            if current <= 1e-14 {
                break;
            }
            let svd = jacobian(&z).svd(true, true);
            let cutoff = 1e-12 * svd.singular_values.max();
            let step = svd.solve(&DVector::from_vec(f.clone()), cutoff).ok()?;
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a - t * d).collect();
                let ft = eval(&trial);
                if max_abs(&ft) < current {
                    z = trial;
                    f = ft;
                    break;
                }
                t *= 0.5;
                if t < 1e-6 {
                    return None;
                }
            }
        }
        let lam_scale = z[nu..].iter().sum::<f64>().abs().max(1.0);
        if z[nu..].iter().any(|&l| l < -1e-12 * lam_scale) {
            return None;
        }
        let us = unpack(&z);
        if us.iter().any(|u| norm(u) == 0.0 || u.iter().any(|v| !v.is_finite())) {
            return None;
        }
        let mut parts: Vec<Vec<f64>> = start.iter().map(|u| vec![0.0; u.len()]).collect();
        for (g, &l) in groups.iter().enumerate() {
            parts[l] = us[g].clone();
        }
        let mut lam = vec![0.0; lambda.len()];
        for (a, &i) in active.iter().enumerate() {
            lam[i] = z[nu + a].max(0.0);
        }
        Some((parts, lam))
    }

    fn residual(&self, groups: &[Vec<f64>], lambda: &[f64], zero: &[bool]) -> f64 {
        self.residual_on(groups, lambda, zero, true)
    }

    /// Largest violation of the convex KKT system with multipliers `lambda`.
    fn residual_on(&self, groups: &[Vec<f64>], lambda: &[f64], zero: &[bool], check_zero: bool) -> f64 {
        let mut worst = 0.0f64;
        for ((u, combo), &z) in groups.iter().zip(self.dual_combinations(lambda)).zip(zero) {
            let nu = norm(u);
            if z || nu == 0.0 {
                if check_zero {
                    worst = worst.max(norm(&combo) - 1.0);
                }
            } else {
                let diff: Vec<f64> = u.iter().zip(&combo).map(|(a, b)| a / nu - b).collect();
                worst = worst.max(norm(&diff));
            }
        }
        // Σλ_i equals the objective at the optimum.
        let lam_scale = lambda.iter().sum::<f64>().max(1.0);
        for (m, l) in self.margins(groups).iter().zip(lambda) {
            worst = worst.max(1.0 - m).max(l * (m - 1.0).abs() / lam_scale);
        }
        worst
    }
}

/// Reweighted iterations between Newton attempts.
const NEWTON_EVERY: usize = 100;

pub fn solve_group_maxmargin(
    groups: &[Group],
    labels: &[f64],
    config: &GroupConfig,
) -> Result<GroupSolution, ConvexError> {
    let problem = Problem::new(groups, labels)?;
    let k = groups.len();
    let mut u = problem.project(&vec![0.0; problem.dim])?;
    let mut best = u.clone();
    let mut best_obj = problem.objective(&u);
    let mut iterations = 0;

    for it in 0..config.subgradient_iters {
        iterations += 1;
        let parts = problem.split(&u);
        let g: Vec<f64> = parts
            .iter()
            .flat_map(|p| {
                let nrm = norm(p);
                p.iter().map(move |v| if nrm > 0.0 { v / nrm } else { 0.0 })
            })
            .collect();
        let gsq: f64 = g.iter().map(|v| v * v).sum();
        if gsq == 0.0 {
            break;
        }
        let target = best_obj * (1.0 - 0.5 / (it as f64 + 2.0));
        let step = (problem.objective(&u) - target) / gsq;
        let z: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        u = problem.project(&z)?;
        let obj = problem.objective(&u);
        if obj < best_obj {
            best_obj = obj;
            best = u.clone();
        }
    }

    let mut parts = problem.split(&best);
    let mut support: Vec<bool> = parts.iter().map(|p| norm(p) > config.zero_threshold * best_obj).collect();
    let mut lambda = vec![0.0; labels.len()];
    let mut residual;
    let mut remaining = config.polish_iters;
    let mut reactivations = 0;
    loop {
        let chunk = remaining.min(NEWTON_EVERY);
        let (next, lam, used) = problem.reweighted(&parts, &support, chunk, config.tolerance * 1e-3)?;
        remaining = remaining.saturating_sub(used);
        iterations += used;
        parts = next;
        lambda = lam;
        let mut zero: Vec<bool> = support.iter().map(|s| !s).collect();
        // Groups with the smallest dual norms are the likeliest to vanish at the optimum; try
        // Newton on every support made of the groups with the largest dual norms.
        let norms: Vec<f64> = problem.dual_combinations(&lambda).iter().map(|c| norm(c)).collect();
        let mut order: Vec<usize> = (0..k).filter(|&l| support[l]).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
        let candidates = (1..=order.len()).map(|j| {
            let mut cand = vec![false; k];
            order[..j].iter().for_each(|&l| cand[l] = true);
            cand
        });
        let mut best_residual = problem.residual(&parts, &lambda, &zero);
        let (base_parts, base_lambda) = (parts.clone(), lambda.clone());
        // Constraints with positive multipliers, extended by the remaining ones in order of
        // increasing slack: slow progress along a flat face leaves active constraints slack.
        let margins = problem.margins(&parts);
        let mut active: Vec<usize> = (0..labels.len()).filter(|&i| lambda[i] > 0.0).collect();
        let mut rest: Vec<usize> = (0..labels.len()).filter(|&i| lambda[i] <= 0.0).collect();
        rest.sort_by(|&a, &b| margins[a].total_cmp(&margins[b]));
        let mut active_sets = vec![active.clone()];
        for i in rest {
            active.push(i);
            active_sets.push(active.clone());
        }
        let trials = candidates.flat_map(|cand| active_sets.iter().map(move |a| (cand.clone(), a)));
        for (cand, active) in trials {
            if let Some((p, l)) = problem.newton(&base_parts, &base_lambda, &cand, active) {
                let cand_zero: Vec<bool> = cand.iter().map(|s| !s).collect();
                let r = problem.residual(&p, &l, &cand_zero);
                if r < best_residual {
                    best_residual = r;
                    parts = p;
                    lambda = l;
                    support = cand;
                    zero = cand_zero;
                }
            }
        }
        let objective: f64 = parts.iter().map(|p| norm(p)).sum();
        let combos = problem.dual_combinations(&lambda);
        // Negligible groups whose dual norm allows them to vanish are removed and the rest re-solved.
        let mut dropped = false;
        for l in 0..k {
            if support[l] && norm(&parts[l]) <= config.drop_threshold * objective && norm(&combos[l]) <= 1.0 + config.tolerance {
                support[l] = false;
                parts[l].iter_mut().for_each(|v| *v = 0.0);
                dropped = true;
            }
        }
        if dropped {
            continue;
        }
        residual = problem.residual(&parts, &lambda, &zero);
        if residual <= config.tolerance {
            break;
        }
        let worst = (0..k)
            .filter(|&l| !support[l])
            .map(|l| (l, norm(&combos[l])))
            .filter(|&(_, n)| n > 1.0 + config.tolerance)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((l, n)) if reactivations < 2 * k + 2 => {
                reactivations += 1;
                support[l] = true;
                parts[l] = combos[l].iter().map(|v| 1e-3 * objective * v / n).collect();
            }
            _ if remaining == 0 => break,
            _ => {}
        }
    }
    let zero: Vec<bool> = support.iter().map(|s| !s).collect();
    let objective = parts.iter().map(|p| norm(p)).sum();
    let solution = GroupSolution {
        objective,
        multipliers: lambda,
        residual,
        zero_groups: (0..k).filter(|&l| zero[l]).collect(),
        certified: residual <= config.tolerance,
        iterations,
        groups: parts,
    };
    if solution.certified {
        Ok(solution)
    } else {
        Err(ConvexError::NotCertified(Box::new(solution)))
    }
}
