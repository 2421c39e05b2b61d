//! Convex reference problems: the linear hard-margin QP, the ℓ1 predictor LP, the neuron-space
//! group-norm problem and the single-layer QP with all other layers frozen.

mod group;
mod lp;
mod qp;

pub use group::{solve_group_maxmargin, Group, GroupConfig, GroupSolution};
pub use lp::MAX_BASES;
pub use qp::{solve_unit_qp, UnitQp};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{self, Activation, ArchSpec, Dataset, NetError, ParamVec, ZERO_PREACTIVATION_TOL};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConvexError {
    #[error(transparent)]
    Net(#[from] NetError),
    /// `certificate` holds nonnegative constraint weights whose normals cancel (empty for the LP).
    #[error("constraints are infeasible")]
    Infeasible { certificate: Vec<f64> },
    #[error("group solver stopped at residual {:.3e} without certification", .0.residual)]
    NotCertified(Box<GroupSolution>),
    #[error("pre-activation of neuron {neuron} in hidden layer {layer} is zero on example {example}")]
    ZeroPreactivation { example: usize, layer: usize, neuron: usize },
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub optimizer: Vec<f64>,
    /// `‖u*‖`.
    pub objective: f64,
    pub active_set: Vec<usize>,
    /// One multiplier per constraint.
    pub multipliers: Vec<f64>,
    /// Largest of relative stationarity, feasibility and relative complementarity.
    pub kkt_residual: f64,
}

impl QpSolution {
    fn from_unit(rows: &[Vec<f64>], qp: UnitQp) -> Self {
        let mut stat = qp.x.clone();
        let mut worst = 0.0f64;
        // Σλ_i equals ‖u*‖² at the optimum and sets the scale of the complementarity products.
        let lam_scale = qp.multipliers.iter().sum::<f64>().max(1.0);
        for (row, &lam) in rows.iter().zip(&qp.multipliers) {
            for (s, r) in stat.iter_mut().zip(row) {
                *s -= lam * r;
            }
            let m: f64 = row.iter().zip(&qp.x).map(|(a, b)| a * b).sum();
            worst = worst.max(1.0 - m).max(lam * (m - 1.0).abs() / lam_scale);
        }
        let norm = qp.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let stat_norm = stat.iter().map(|v| v * v).sum::<f64>().sqrt() / norm.max(1.0);
        Self {
            objective: norm,
            optimizer: qp.x,
            active_set: qp.active,
            multipliers: qp.multipliers,
            kkt_residual: worst.max(stat_norm),
        }
    }
}

fn solve_rows(rows: Vec<Vec<f64>>) -> Result<QpSolution, ConvexError> {
    let qp = solve_unit_qp(&rows, &vec![1.0; rows.len()])?;
    Ok(QpSolution::from_unit(&rows, qp))
}

/// `min ‖u‖` s.t. `y_i ⟨u, x_i⟩ ≥ 1`.
pub fn solve_linear_maxmargin(data: &Dataset) -> Result<QpSolution, ConvexError> {
    solve_rows(data.signed_inputs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Solution {
    pub beta: Vec<f64>,
    pub objective: f64,
}

/// `min ‖β‖₁` s.t. `y_i ⟨β, x_i⟩ ≥ 1`, lexicographically smallest among optimizers.
pub fn solve_l1_maxmargin(data: &Dataset) -> Result<L1Solution, ConvexError> {
    let rows = data.signed_inputs();
    // The feasible set is shared with the ℓ2 problem, which also yields a Farkas certificate.
    solve_unit_qp(&rows, &vec![1.0; rows.len()])?;
    let beta = lp::l1_vertex_enumeration(&rows)?;
    let objective = beta.iter().map(|b| b.abs()).sum();
    Ok(L1Solution { beta, objective })
}

/// Optimizes layer `layer` (0-based) alone with every other layer frozen at `theta`.
///
/// For ReLU networks the activation pattern of every neuron downstream of the layer must be
/// strict; the result is then optimal only among parameters keeping that pattern.
pub fn solve_per_layer_qp(
    arch: &ArchSpec,
    theta: &ParamVec,
    layer: usize,
    data: &Dataset,
) -> Result<QpSolution, ConvexError> {
    theta.check_shape(arch)?;
    if layer >= arch.depth() {
        return Err(ConvexError::Shape(format!("layer {layer} out of range for depth {}", arch.depth())));
    }
    if arch.activation() == Activation::Relu {
        let pattern = netcore::activation_pattern(arch, theta, data, ZERO_PREACTIVATION_TOL)?;
        if let Some(&(example, hidden, neuron)) = pattern.zero_contacts().iter().find(|c| c.1 >= layer) {
            return Err(ConvexError::ZeroPreactivation {
                example,
                layer: hidden,
                neuron,
            });
        }
    }
    let rows = data
        .iter()
        .map(|ex| {
            let g = netcore::grad(arch, theta, &ex.x)?;
            Ok(g.layer(layer).iter().map(|v| ex.y * v).collect())
        })
        .collect::<Result<Vec<Vec<f64>>, NetError>>()?;
    solve_rows(rows)
}

/// Per hidden neuron of a depth-2 no-share network: input coordinates of its incoming weights
/// (in parameter order) and the index of its single outgoing weight.
fn neuron_wiring(arch: &ArchSpec) -> Result<Vec<(Vec<(usize, usize)>, usize)>, ConvexError> {
    if arch.depth() != 2 || !arch.no_share() {
        return Err(NetError::NotApplicable.into());
    }
    arch.neuron_links()
        .into_iter()
        .map(|link| {
            let [out] = link.outgoing[..] else {
                return Err(ConvexError::Shape(format!("neuron {} needs exactly one outgoing weight", link.neuron)));
            };
            let mut inputs: Vec<(usize, usize)> = arch
                .layer(0)
                .entries()
                .iter()
                .filter(|e| e.row == link.neuron)
                .map(|e| (e.param, e.col))
                .collect();
            inputs.sort_unstable();
            Ok((inputs, out))
        })
        .collect()
}

/// Neuron-space groups `x_i^l` of a depth-2 no-share network, gated by `pattern` when given.
pub fn neuron_groups(
    arch: &ArchSpec,
    data: &Dataset,
    pattern: Option<&netcore::ActivationPattern>,
) -> Result<Vec<Group>, ConvexError> {
    let wiring = neuron_wiring(arch)?;
    Ok(wiring
        .iter()
        .enumerate()
        .map(|(j, (inputs, _))| {
            let features = data.iter().map(|ex| inputs.iter().map(|&(_, c)| ex.x[c]).collect()).collect();
            match pattern {
                Some(p) => Group::gated(features, (0..data.len()).map(|i| p.indicator(i, 0, j)).collect()),
                None => Group::new(features),
            }
        })
        .collect())
}

/// Products `v_l w_l` in the layout of [`neuron_groups`].
pub fn neuron_products(arch: &ArchSpec, theta: &ParamVec) -> Result<Vec<Vec<f64>>, ConvexError> {
    theta.check_shape(arch)?;
    let wiring = neuron_wiring(arch)?;
    Ok(wiring
        .iter()
        .map(|(inputs, out)| {
            let v = theta.layer(1)[*out];
            inputs.iter().map(|&(p, _)| v * theta.layer(0)[p]).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Example;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pos(points: Vec<Vec<f64>>) -> Dataset {
        Dataset::positives(points).unwrap()
    }

    #[test]
    fn linear_examples() {
        let s = solve_linear_maxmargin(&pos(vec![vec![1.0, 0.25], vec![-1.0, 0.25]])).unwrap();
        assert_abs_diff_eq!(s.optimizer[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.optimizer[1], 4.0, epsilon = 1e-13);
        assert_abs_diff_eq!(s.objective, 4.0, epsilon = 1e-13);
        assert!(s.kkt_residual <= 1e-10);

        let s = solve_linear_maxmargin(&pos(vec![vec![1.0, 2.0]])).unwrap();
        assert_abs_diff_eq!(s.optimizer[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.optimizer[1], 0.4, epsilon = 1e-15);

        let four = pos(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]);
        assert!(matches!(solve_linear_maxmargin(&four), Err(ConvexError::Infeasible { .. })));
        assert!(matches!(solve_l1_maxmargin(&four), Err(ConvexError::Infeasible { .. })));
    }

    #[test]
    fn l1_examples() {
        let s = solve_l1_maxmargin(&pos(vec![vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert_eq!(s.beta, vec![1.0, 1.0]);
        let s = solve_l1_maxmargin(&pos(vec![vec![1.0, 2.0]])).unwrap();
        assert_eq!(s.beta, vec![0.0, 0.5]);
        assert_abs_diff_eq!(s.objective, 0.5);
    }

    #[test]
    fn group_diagonal_reduction() {
        let groups = vec![Group::new(vec![vec![1.0]]), Group::new(vec![vec![2.0]])];
        let s = solve_group_maxmargin(&groups, &[1.0], &GroupConfig::default()).unwrap();
        assert_abs_diff_eq!(s.objective, 0.5, epsilon = 1e-9);
        assert_eq!(s.zero_groups, vec![0]);
        assert_abs_diff_eq!(s.groups[1][0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn single_group_matches_qp() {
        let data = Dataset::new(vec![
            Example::new(vec![1.0, 0.5, -0.2], 1.0),
            Example::new(vec![-0.3, 1.0, 0.4], -1.0),
            Example::new(vec![0.8, -0.1, 1.0], 1.0),
        ])
        .unwrap();
        let qp = solve_linear_maxmargin(&data).unwrap();
        let features = data.iter().map(|e| e.x.clone()).collect();
        let labels: Vec<f64> = data.iter().map(|e| e.y).collect();
        let g = solve_group_maxmargin(&[Group::new(features)], &labels, &GroupConfig::default()).unwrap();
        assert_abs_diff_eq!(g.objective, qp.objective, epsilon = 1e-8);
    }

    #[test]
    fn gated_four_directions() {
        let arch = ArchSpec::fully_connected(&[2, 4, 1], Activation::Relu).unwrap();
        let data = pos(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]);
        let theta = ParamVec::new(vec![
            vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0],
            vec![1.0, 1.0, 1.0, 1.0],
        ]);
        let pattern = netcore::activation_pattern(&arch, &theta, &data, ZERO_PREACTIVATION_TOL).unwrap();
        let groups = neuron_groups(&arch, &data, Some(&pattern)).unwrap();
        let s = solve_group_maxmargin(&groups, &[1.0; 4], &GroupConfig::default()).unwrap();
        assert_abs_diff_eq!(s.objective, 4.0, epsilon = 1e-8);
        let products = neuron_products(&arch, &theta).unwrap();
        let current: f64 = products.iter().map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
        assert_abs_diff_eq!(current, 4.0);
    }

    #[test]
    fn per_layer_examples() {
        let arch = ArchSpec::diagonal(2, 2, Activation::Linear).unwrap();
        let data = pos(vec![vec![1.0, 2.0]]);
        let theta = ParamVec::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let s = solve_per_layer_qp(&arch, &theta, 0, &data).unwrap();
        assert_abs_diff_eq!(s.optimizer[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.optimizer[1], 0.0, epsilon = 1e-15);

        let relu = ArchSpec::fully_connected(&[2, 2, 1], Activation::Relu).unwrap();
        let data = pos(vec![vec![1.0, 0.25], vec![-1.0, 0.25]]);
        let kink = ParamVec::new(vec![vec![0.0, 2.0, 0.0, 0.0], vec![2.0, 0.0]]);
        assert!(matches!(
            solve_per_layer_qp(&relu, &kink, 0, &data),
            Err(ConvexError::ZeroPreactivation { layer: 0, neuron: 1, .. })
        ));
        let last = solve_per_layer_qp(&relu, &kink, 1, &data).unwrap();
        assert_abs_diff_eq!(last.optimizer[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(last.optimizer[1], 0.0, epsilon = 1e-14);
        assert!(last.kkt_residual < 1e-12);
    }

    #[test]
    fn last_layer_single_example_projection() {
        let arch = ArchSpec::fully_connected(&[2, 2, 1], Activation::Linear).unwrap();
        let data = pos(vec![vec![1.0, 1.0]]);
        let theta = ParamVec::new(vec![vec![1.0, 0.5, -0.5, 2.0], vec![0.3, 0.7]]);
        let a = netcore::grad(&arch, &theta, &data.examples()[0].x).unwrap().layer(1).to_vec();
        let s = solve_per_layer_qp(&arch, &theta, 1, &data).unwrap();
        let asq: f64 = a.iter().map(|v| v * v).sum();
        for (u, ai) in s.optimizer.iter().zip(&a) {
            assert_abs_diff_eq!(*u, ai / asq, epsilon = 1e-14);
        }
    }

    proptest! {
        #[test]
        fn neuron_space_bound(flat in proptest::collection::vec(-2.0f64..2.0, 9)) {
            let arch = ArchSpec::fully_connected(&[2, 3, 1], Activation::Relu).unwrap();
            let theta = ParamVec::from_flat(&arch, &flat).unwrap();
            let products = neuron_products(&arch, &theta).unwrap();
            let group_sum: f64 = products.iter().map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
            prop_assert!(group_sum <= 0.5 * theta.norm_sq() + 1e-12);
        }

        #[test]
        fn balanced_equality(w in proptest::collection::vec(-2.0f64..2.0, 6), signs in proptest::collection::vec(any::<bool>(), 3)) {
            let arch = ArchSpec::fully_connected(&[2, 3, 1], Activation::Relu).unwrap();
            let v: Vec<f64> = (0..3)
                .map(|j| {
                    let n = (w[2 * j].powi(2) + w[2 * j + 1].powi(2)).sqrt();
                    if signs[j] { n } else { -n }
                })
                .collect();
            let theta = ParamVec::new(vec![w.clone(), v]);
            let products = neuron_products(&arch, &theta).unwrap();
            let group_sum: f64 = products.iter().map(|u| u.iter().map(|x| x * x).sum::<f64>().sqrt()).sum();
            prop_assert!((group_sum - 0.5 * theta.norm_sq()).abs() <= 1e-12 * (1.0 + theta.norm_sq()));
        }
    }
}
