//! Newton polishing of an approximate KKT point.
//!
//! With the activation pattern frozen, the network output is affine in every single parameter,
//! so the KKT system `θ = Σ_{i∈A} λ_i y_i ∇Φ_i(θ)`, `y_i Φ_i(θ) = 1` is a polynomial system whose
//! Jacobian central differences reproduce exactly. Least-squares Newton steps handle the rank
//! deficiency caused by continuous symmetries (e.g. hidden-space rotations of linear networks).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::KktError;
use crate::netcore::{self, Activation, ArchSpec, Dataset, Gates, ParamVec, ZERO_PREACTIVATION_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub max_iter: usize,
    /// Stop when the largest KKT residual falls below `tol · max(1, ‖θ‖)`.
    pub tol: f64,
    /// Reject a polished point farther than this fraction of `‖θ‖` from the start.
    pub max_relative_shift: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iter: 60,
            tol: 1e-13,
            max_relative_shift: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedPoint {
    pub theta: ParamVec,
    /// One multiplier per example, zero off the active set.
    pub multipliers: Vec<f64>,
    pub active_set: Vec<usize>,
    pub iterations: usize,
    pub residual: f64,
    pub relative_shift: f64,
}

struct System<'a> {
    arch: &'a ArchSpec,
    data: &'a Dataset,
    active: &'a [usize],
    gates: Vec<Gates>,
    p: usize,
}

impl System<'_> {
    fn residual(&self, z: &[f64]) -> Vec<f64> {
        let theta = ParamVec::from_flat(self.arch, &z[..self.p]).expect("length checked");
        let mut out: Vec<f64> = z[..self.p].to_vec();
        let mut cons = Vec::with_capacity(self.active.len());
        for (c, &i) in self.active.iter().enumerate() {
            let ex = &self.data.examples()[i];
            let (f, g) = netcore::gated_value_and_grad(self.arch, &theta, &ex.x, &self.gates[i]).expect("shapes checked");
            let lam = z[self.p + c];
            for (o, gv) in out.iter_mut().zip(g.iter()) {
                *o -= lam * ex.y * gv;
            }
            cons.push(ex.y * f - 1.0);
        }
        out.extend(cons);
        out
    }

    fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let dim = z.len();
        let mut jac = DMatrix::zeros(dim, dim);
        let mut probe = z.to_vec();
        for k in 0..dim {
            let h = 1e-3 * z[k].abs().max(1.0);
            probe[k] = z[k] + h;
            let plus = self.residual(&probe);
            probe[k] = z[k] - h;
            let minus = self.residual(&probe);
            probe[k] = z[k];
            for r in 0..dim {
                jac[(r, k)] = (plus[r] - minus[r]) / (2.0 * h);
            }
        }
        jac
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Polishes `theta` with active set `active` and starting multipliers `lambda0` (one per example).
pub fn refine_kkt_point(
    arch: &ArchSpec,
    theta: &ParamVec,
    data: &Dataset,
    active: &[usize],
    lambda0: &[f64],
    config: &RefineConfig,
) -> Result<RefinedPoint, KktError> {
    theta.check_shape(arch)?;
    if active.is_empty() {
        return Err(KktError::RefinementFailed("empty active set".into()));
    }
    let pattern = match arch.activation() {
        Activation::Relu => Some(netcore::activation_pattern(arch, theta, data, ZERO_PREACTIVATION_TOL)?),
        Activation::Linear => None,
    };
    let gates = (0..data.len())
        .map(|i| match &pattern {
            Some(p) => p.gates(i, arch.relu_zero_slope()),
            None => Gates {
                layers: arch.hidden_widths().iter().map(|&w| vec![1.0; w]).collect(),
            },
        })
        .collect();
    let system = System {
        arch,
        data,
        active,
        gates,
        p: theta.len(),
    };
    let mut z = theta.flat();
    z.extend(active.iter().map(|&i| lambda0.get(i).copied().unwrap_or(0.0)));
    let scale = theta.norm().max(1.0);
    let mut f = system.residual(&z);
    let mut iterations = 0;
    while max_abs(&f) > config.tol * scale && iterations < config.max_iter {
        iterations += 1;
        let jac = system.jacobian(&z);
        let svd = jac.svd(true, true);
        let cutoff = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
        let step = svd
            .solve(&DVector::from_vec(f.clone()), cutoff)
            .map_err(|e| KktError::RefinementFailed(e.to_string()))?;
        let mut t = 1.0;
        let current = max_abs(&f);
        loop {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a - t * d).collect();
            let ft = system.residual(&trial);
            if max_abs(&ft) < current || t < 1e-6 {
                z = trial;
                f = ft;
                break;
            }
            t *= 0.5;
        }
    }
    let residual = max_abs(&f);
    if !(residual <= config.tol * scale * 1e3) {
        return Err(KktError::RefinementFailed(format!(
            "residual {residual:.3e} after {iterations} iterations"
        )));
    }

    let refined = ParamVec::from_flat(arch, &z[..system.p])?;
    let mut multipliers = vec![0.0; data.len()];
    for (c, &i) in active.iter().enumerate() {
        let lam = z[system.p + c];
        if lam < -1e-10 * scale {
            return Err(KktError::RefinementFailed(format!("negative multiplier {lam:.3e} for example {i}")));
        }
        multipliers[i] = lam.max(0.0);
    }
    if let Some(before) = &pattern {
        let after = netcore::activation_pattern(arch, &refined, data, ZERO_PREACTIVATION_TOL)?;
        let flipped = before
            .signs
            .iter()
            .flatten()
            .flatten()
            .zip(after.signs.iter().flatten().flatten())
            .any(|(a, b)| a * b < 0);
        if flipped {
            return Err(KktError::RefinementFailed("activation pattern changed".into()));
        }
    }
    let min_margin = netcore::min_margin(arch, &refined, data)?;
    if min_margin < 1.0 - 1e-10 {
        return Err(KktError::RefinementFailed(format!("polished point infeasible (margin {min_margin})")));
    }
    let relative_shift = refined.distance(theta) / theta.norm().max(f64::MIN_POSITIVE);
    if relative_shift > config.max_relative_shift {
        return Err(KktError::RefinementFailed(format!("moved {relative_shift:.3e} relative to the start")));
    }
    Ok(RefinedPoint {
        theta: refined,
        multipliers,
        active_set: active.to_vec(),
        iterations,
        residual,
        relative_shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kktcert::{kkt_certificate, KktTolerances, KktVerdict};

    #[test]
    fn polishes_perturbed_relu_limit() {
        let arch = ArchSpec::fully_connected(&[2, 2, 1], Activation::Relu).unwrap();
        let data = Dataset::positives(vec![vec![1.0, 0.25], vec![-1.0, 0.25]]).unwrap();
        let approx = ParamVec::new(vec![vec![0.0, 2.0, 0.0, -8e-4], vec![2.0, 8e-4]]);
        let cert = kkt_certificate(&arch, &approx, &data, &KktTolerances::default()).unwrap();
        let r = refine_kkt_point(&arch, &approx, &data, &cert.active_set, &cert.multipliers, &RefineConfig::default())
            .unwrap();
        let exact = ParamVec::new(vec![vec![0.0, 2.0, 0.0, 0.0], vec![2.0, 0.0]]);
        assert!(r.theta.max_abs_diff(&exact) < 1e-12, "{:?}", r.theta);
        assert!((r.multipliers[0] - 2.0).abs() < 1e-10);
        let after = kkt_certificate(&arch, &r.theta, &data, &KktTolerances::default()).unwrap();
        assert_eq!(after.verdict, KktVerdict::Kkt);
        assert!(after.relative_residual < 1e-12);
    }

    #[test]
    fn polishes_two_neuron_local_optimum() {
        let arch = ArchSpec::fully_connected(&[2, 2, 1], Activation::Relu).unwrap();
        let data = Dataset::positives(vec![vec![1.0, 0.25], vec![-1.0, 0.25], vec![0.0, -1.0]]).unwrap();
        let b = 1.00004;
        let approx = ParamVec::new(vec![vec![0.0, 2.0, 0.0, -b], vec![2.0, b]]);
        let tol = KktTolerances::default();
        let cert = kkt_certificate(&arch, &approx, &data, &tol).unwrap();
        let r = refine_kkt_point(&arch, &approx, &data, &cert.active_set, &cert.multipliers, &RefineConfig::default())
            .unwrap();
        assert!((r.theta.layer(1)[0] - 2.0).abs() < 1e-12);
        assert!((r.theta.layer(1)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refuses_large_moves() {
        let arch = ArchSpec::diagonal(2, 2, Activation::Linear).unwrap();
        let data = Dataset::positives(vec![vec![1.0, 2.0]]).unwrap();
        let far = ParamVec::new(vec![vec![1.0, 0.3], vec![1.0, 0.3]]);
        let cfg = RefineConfig {
            max_relative_shift: 1e-6,
            ..RefineConfig::default()
        };
        assert!(refine_kkt_point(&arch, &far, &data, &[0], &[1.0], &cfg).is_err());
    }
}
