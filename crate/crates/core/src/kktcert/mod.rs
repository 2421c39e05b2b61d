//! KKT certification of unit-margin points for `min ½‖θ‖²` s.t. `y_i Φ(θ; x_i) ≥ 1`.

mod nnls;
mod refine;

pub use nnls::{nnls, NnlsSolution};
pub use refine::{refine_kkt_point, RefineConfig, RefinedPoint};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::netcore::margins;
use crate::netcore::{self, Activation, ArchSpec, Dataset, NetError, ParamVec, ZERO_PREACTIVATION_TOL};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KktError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("direction does not separate the data: minimum margin {min_margin}")]
    NotSeparatingDirection { min_margin: f64 },
    #[error("KKT refinement failed: {0}")]
    RefinementFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktTolerances {
    /// `|m_i − 1| ≤ act` puts example `i` in the active set.
    pub act: f64,
    pub feas: f64,
    /// Relative stationarity residual.
    pub stat: f64,
    pub comp: f64,
    /// Relative zero band for pre-activations when reporting kink contact.
    pub zero_preactivation: f64,
}

impl Default for KktTolerances {
    fn default() -> Self {
        Self {
            act: 1e-4,
            feas: 1e-8,
            stat: 1e-3,
            comp: 1e-6,
            zero_preactivation: ZERO_PREACTIVATION_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KktVerdict {
    Kkt,
    NotKkt,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktCertificate {
    pub theta: ParamVec,
    /// Factor applied to the input direction to reach unit minimum margin (1 when certifying a given point).
    pub scale: f64,
    pub margins: Vec<f64>,
    pub min_margin: f64,
    pub active_set: Vec<usize>,
    /// One multiplier per example, zero off the active set.
    pub multipliers: Vec<f64>,
    pub stationarity_residual: f64,
    pub relative_residual: f64,
    pub complementarity: f64,
    /// Some hidden pre-activation is zero; gradients there use the configured `σ′(0)`.
    pub kink_contact: bool,
    pub zero_contacts: Vec<(usize, usize, usize)>,
    pub verdict: KktVerdict,
    pub tolerances: KktTolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rescaled {
    pub theta: ParamVec,
    pub scale: f64,
    /// Minimum margin of the input direction.
    pub direction_margin: f64,
}

/// Scales a direction by `m̄^{-1/L}` so that the smallest margin becomes exactly one.
pub fn rescale_to_unit_margin(arch: &ArchSpec, direction: &ParamVec, data: &Dataset) -> Result<Rescaled, KktError> {
    let m = netcore::min_margin(arch, direction, data)?;
    if !(m > 0.0) {
        return Err(KktError::NotSeparatingDirection { min_margin: m });
    }
    let scale = m.powf(-1.0 / netcore::homogeneity_degree(arch) as f64);
    Ok(Rescaled {
        theta: direction.scaled(scale),
        scale,
        direction_margin: m,
    })
}

/// Builds the certificate at `theta` (expected at unit minimum margin).
pub fn kkt_certificate(
    arch: &ArchSpec,
    theta: &ParamVec,
    data: &Dataset,
    tol: &KktTolerances,
) -> Result<KktCertificate, KktError> {
    let margins = netcore::margins(arch, theta, data)?;
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let active_set: Vec<usize> = (0..data.len()).filter(|&i| (margins[i] - 1.0).abs() <= tol.act).collect();

    let p = theta.len();
    let mut g = DMatrix::zeros(p, active_set.len());
    for (c, &i) in active_set.iter().enumerate() {
        let ex = &data.examples()[i];
        let gi = netcore::grad(arch, theta, &ex.x)?;
        for (r, v) in gi.iter().enumerate() {
            g[(r, c)] = ex.y * v;
        }
    }
    let target = DVector::from_vec(theta.flat());
    let sol = nnls(&g, &target);
    let mut multipliers = vec![0.0; data.len()];
    for (c, &i) in active_set.iter().enumerate() {
        multipliers[i] = sol.x[c];
    }
    let norm = theta.norm();
    let relative_residual = if norm > 0.0 { sol.residual_norm / norm } else { 0.0 };
    let complementarity = margins
        .iter()
        .zip(&multipliers)
        .map(|(m, l)| l * (m - 1.0).abs())
        .fold(0.0, f64::max);

    let zero_contacts = match arch.activation() {
        Activation::Relu => netcore::activation_pattern(arch, theta, data, tol.zero_preactivation)?.zero_contacts(),
        Activation::Linear => Vec::new(),
    };
    let verdict = if min_margin < 1.0 - tol.feas {
        KktVerdict::Infeasible
    } else if relative_residual <= tol.stat && complementarity <= tol.comp {
        KktVerdict::Kkt
    } else {
        KktVerdict::NotKkt
    };
    Ok(KktCertificate {
        theta: theta.clone(),
        scale: 1.0,
        margins,
        min_margin,
        active_set,
        multipliers,
        stationarity_residual: sol.residual_norm,
        relative_residual,
        complementarity,
        kink_contact: !zero_contacts.is_empty(),
        zero_contacts,
        verdict,
        tolerances: *tol,
    })
}

/// Rescales a unit direction and certifies the result.
pub fn certify_direction(
    arch: &ArchSpec,
    direction: &ParamVec,
    data: &Dataset,
    tol: &KktTolerances,
) -> Result<KktCertificate, KktError> {
    let r = rescale_to_unit_margin(arch, direction, data)?;
    let mut cert = kkt_certificate(arch, &r.theta, data, tol)?;
    cert.scale = r.scale;
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Example;
    use approx::assert_abs_diff_eq;

    fn diag_d2() -> (ArchSpec, Dataset, ParamVec) {
        let arch = ArchSpec::diagonal(2, 2, Activation::Linear).unwrap();
        let data = Dataset::positives(vec![vec![1.0, 2.0]]).unwrap();
        (arch, data, ParamVec::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]))
    }

    fn relu_d2() -> (ArchSpec, Dataset, ParamVec) {
        let arch = ArchSpec::fully_connected(&[2, 2, 1], Activation::Relu).unwrap();
        let data = Dataset::positives(vec![vec![1.0, 0.25], vec![-1.0, 0.25]]).unwrap();
        (arch, data, ParamVec::new(vec![vec![0.0, 2.0, 0.0, 0.0], vec![2.0, 0.0]]))
    }

    #[test]
    fn margin_examples() {
        let (arch, data, theta) = diag_d2();
        assert_eq!(margins(&arch, &theta, &data).unwrap(), vec![1.0]);
        assert_eq!(margins(&arch, &theta.scaled(2.0), &data).unwrap(), vec![4.0]);
    }

    #[test]
    fn rescale_examples() {
        let (arch, data, theta) = relu_d2();
        let dir = theta.normalized().unwrap();
        let r = rescale_to_unit_margin(&arch, &dir, &data).unwrap();
        assert_abs_diff_eq!(r.direction_margin, 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(r.scale, 8f64.sqrt(), epsilon = 1e-14);
        assert!(r.theta.max_abs_diff(&theta) < 1e-14);

        let (arch, data, theta) = diag_d2();
        let r = rescale_to_unit_margin(&arch, &theta, &data).unwrap();
        assert_eq!(r.scale, 1.0);

        let deep = ArchSpec::diagonal(2, 3, Activation::Linear).unwrap();
        let data = Dataset::positives(vec![vec![1.0, 1.0]]).unwrap();
        let c = 6f64.sqrt().recip();
        let dir = ParamVec::new(vec![vec![c, c]; 3]);
        let r = rescale_to_unit_margin(&deep, &dir, &data).unwrap();
        assert_abs_diff_eq!(r.direction_margin, 2.0 * 6f64.powf(-1.5), epsilon = 1e-15);
        for v in r.theta.iter() {
            assert_abs_diff_eq!(*v, 2f64.powf(-1.0 / 3.0), epsilon = 1e-14);
        }

        let flipped = ParamVec::new(vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
        let (arch, data, _) = diag_d2();
        assert!(matches!(
            rescale_to_unit_margin(&arch, &flipped, &data),
            Err(KktError::NotSeparatingDirection { .. })
        ));
    }

    #[test]
    fn certificate_examples() {
        let (arch, data, theta) = diag_d2();
        let cert = kkt_certificate(&arch, &theta, &data, &KktTolerances::default()).unwrap();
        assert_eq!(cert.active_set, vec![0]);
        assert_abs_diff_eq!(cert.multipliers[0], 1.0, epsilon = 1e-14);
        assert!(cert.stationarity_residual < 1e-14);
        assert_eq!(cert.verdict, KktVerdict::Kkt);

        let doubled = kkt_certificate(&arch, &theta.scaled(2.0), &data, &KktTolerances::default()).unwrap();
        assert!(doubled.active_set.is_empty());
        assert_abs_diff_eq!(doubled.stationarity_residual, theta.scaled(2.0).norm(), epsilon = 1e-14);
        assert_eq!(doubled.verdict, KktVerdict::NotKkt);

        let (arch, data, theta) = relu_d2();
        let cert = kkt_certificate(&arch, &theta, &data, &KktTolerances::default()).unwrap();
        assert_eq!(cert.active_set, vec![0, 1]);
        assert_abs_diff_eq!(cert.multipliers[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.multipliers[1], 2.0, epsilon = 1e-12);
        assert!(cert.relative_residual <= 1e-10);
        assert!(cert.kink_contact);
        assert_eq!(cert.verdict, KktVerdict::Kkt);
    }

    #[test]
    fn infeasible_point() {
        let (arch, data, theta) = diag_d2();
        let cert = kkt_certificate(&arch, &theta.scaled(0.9), &data, &KktTolerances::default()).unwrap();
        assert_eq!(cert.verdict, KktVerdict::Infeasible);
    }

    #[test]
    fn order_invariance() {
        let arch = ArchSpec::fully_connected(&[2, 2, 1], Activation::Linear).unwrap();
        let data = Dataset::new(vec![
            Example::new(vec![1.0, 0.5], 1.0),
            Example::new(vec![-1.0, 0.2], -1.0),
            Example::new(vec![0.3, 1.0], 1.0),
        ])
        .unwrap();
        let theta = ParamVec::new(vec![vec![0.7, 0.1, 0.4, -0.2], vec![1.1, 0.6]]);
        let r = rescale_to_unit_margin(&arch, &theta, &data).unwrap();
        let a = kkt_certificate(&arch, &r.theta, &data, &KktTolerances::default()).unwrap();
        let b = kkt_certificate(&arch, &r.theta, &data.permuted(&[2, 0, 1]).unwrap(), &KktTolerances::default())
            .unwrap();
        assert_eq!(a.verdict, b.verdict);
        assert!((a.stationarity_residual - b.stationarity_residual).abs() <= 1e-12);
    }
}
