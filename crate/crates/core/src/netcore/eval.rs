use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Activation, ArchSpec, Dataset, NetError, ParamVec};

/// Fixed slopes for every hidden neuron, indexed `[hidden layer][neuron]`.
/// Evaluating with gates turns the network into a multilinear map of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gates {
    pub layers: Vec<Vec<f64>>,
}

struct Trace {
    /// Inputs to each layer: `h_0 = x`, then hidden outputs.
    inputs: Vec<Vec<f64>>,
    /// Derivative of the activation at each hidden pre-activation.
    slopes: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: f64,
}

fn check_input(arch: &ArchSpec, x: &[f64]) -> Result<(), NetError> {
    if x.len() != arch.input_dim() {
        return Err(NetError::DimensionMismatch {
            expected: arch.input_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

fn trace(arch: &ArchSpec, params: &ParamVec, x: &[f64], gates: Option<&Gates>) -> Trace {
    let depth = arch.depth();
    let s0 = arch.relu_zero_slope();
    let mut inputs = Vec::with_capacity(depth);
    let mut slopes = Vec::with_capacity(depth - 1);
    let mut pre = Vec::with_capacity(depth - 1);
    let mut h = x.to_vec();
    for l in 0..depth {
        let u = params.layer(l);
        let mut z = vec![0.0; arch.dims()[l + 1]];
        for e in arch.layer(l).entries() {
            z[e.row] += u[e.param] * h[e.col];
        }
        inputs.push(std::mem::take(&mut h));
        if l + 1 == depth {
            return Trace {
                inputs,
                slopes,
                pre,
                out: z[0],
            };
        }
        let slope: Vec<f64> = match (gates, arch.activation()) {
            (Some(g), _) => g.layers[l].clone(),
            (None, Activation::Linear) => vec![1.0; z.len()],
            (None, Activation::Relu) => z
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else if v == 0.0 { s0 } else { 0.0 })
                .collect(),
        };
        h = match (gates, arch.activation()) {
            (None, Activation::Relu) => z.iter().map(|&v| v.max(0.0)).collect(),
            _ => z.iter().zip(&slope).map(|(v, s)| v * s).collect(),
        };
        slopes.push(slope);
        pre.push(z);
    }
    unreachable!("depth is at least 2")
}

fn backward(arch: &ArchSpec, params: &ParamVec, t: &Trace) -> ParamVec {
    let depth = arch.depth();
    let mut grad = ParamVec::zeros(arch);
    let mut delta = vec![1.0];
    for l in (0..depth).rev() {
        let u = params.layer(l);
        let h = &t.inputs[l];
        let g = grad.layer_mut(l);
        let mut back = vec![0.0; arch.dims()[l]];
        for e in arch.layer(l).entries() {
            g[e.param] += delta[e.row] * h[e.col];
            if l > 0 {
                back[e.col] += u[e.param] * delta[e.row];
            }
        }
        if l > 0 {
            delta = back.iter().zip(&t.slopes[l - 1]).map(|(b, s)| b * s).collect();
        }
    }
    grad
}

/// Dense weight matrices `W^(1..m)`; entry `(i, j)` of layer `l` holds `u^(l)_k` for each triple.
pub fn materialize(arch: &ArchSpec, params: &ParamVec) -> Result<Vec<DMatrix<f64>>, NetError> {
    params.check_shape(arch)?;
    Ok((0..arch.depth())
        .map(|l| {
            let mut w = DMatrix::zeros(arch.dims()[l + 1], arch.dims()[l]);
            for e in arch.layer(l).entries() {
                w[(e.row, e.col)] = params.layer(l)[e.param];
            }
            w
        })
        .collect())
}

/// Network output `Φ(θ; x)`.
pub fn forward(arch: &ArchSpec, params: &ParamVec, x: &[f64]) -> Result<f64, NetError> {
    params.check_shape(arch)?;
    check_input(arch, x)?;
    Ok(trace(arch, params, x, None).out)
}

/// Gradient of `Φ(θ; x)` with respect to the parameters. At a zero pre-activation the ReLU
/// slope is the architecture's `relu_zero_slope`; shared parameters accumulate every position.
pub fn grad(arch: &ArchSpec, params: &ParamVec, x: &[f64]) -> Result<ParamVec, NetError> {
    value_and_grad(arch, params, x).map(|(_, g)| g)
}

pub fn value_and_grad(arch: &ArchSpec, params: &ParamVec, x: &[f64]) -> Result<(f64, ParamVec), NetError> {
    params.check_shape(arch)?;
    check_input(arch, x)?;
    let t = trace(arch, params, x, None);
    let g = backward(arch, params, &t);
    Ok((t.out, g))
}

/// Output and gradient with hidden slopes frozen to `gates`.
pub fn gated_value_and_grad(
    arch: &ArchSpec,
    params: &ParamVec,
    x: &[f64],
    gates: &Gates,
) -> Result<(f64, ParamVec), NetError> {
    params.check_shape(arch)?;
    check_input(arch, x)?;
    let widths = arch.hidden_widths();
    if gates.layers.len() != widths.len() || gates.layers.iter().zip(widths).any(|(g, &w)| g.len() != w) {
        return Err(NetError::ShapeMismatch("gate layout does not match hidden widths".into()));
    }
    let t = trace(arch, params, x, Some(gates));
    let g = backward(arch, params, &t);
    Ok((t.out, g))
}

/// Hidden pre-activations `[layer][neuron]` for one input.
pub fn preactivations(arch: &ArchSpec, params: &ParamVec, x: &[f64]) -> Result<Vec<Vec<f64>>, NetError> {
    params.check_shape(arch)?;
    check_input(arch, x)?;
    Ok(trace(arch, params, x, None).pre)
}

/// `y_i Φ(θ; x_i)` for every example.
pub fn margins(arch: &ArchSpec, params: &ParamVec, data: &Dataset) -> Result<Vec<f64>, NetError> {
    data.iter()
        .map(|ex| forward(arch, params, &ex.x).map(|f| ex.y * f))
        .collect()
}

pub fn min_margin(arch: &ArchSpec, params: &ParamVec, data: &Dataset) -> Result<f64, NetError> {
    Ok(margins(arch, params, data)?.into_iter().fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "exp", alias = "exponential")]
    Exponential,
    #[serde(rename = "log", alias = "logistic")]
    Logistic,
}

impl LossKind {
    pub fn value(self, q: f64) -> f64 {
        match self {
            LossKind::Exponential => (-q).exp(),
            LossKind::Logistic => softplus(-q),
        }
    }

    /// `ℓ'(q)`, always negative.
    pub fn derivative(self, q: f64) -> f64 {
        -self.log_neg_derivative(q).exp()
    }

    /// `ln(-ℓ'(q))`, finite even when `ℓ'(q)` underflows.
    pub fn log_neg_derivative(self, q: f64) -> f64 {
        match self {
            LossKind::Exponential => -q,
            LossKind::Logistic => -softplus(q),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Exponential => "exp",
            LossKind::Logistic => "log",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exp" | "exponential" => Ok(LossKind::Exponential),
            "log" | "logistic" => Ok(LossKind::Logistic),
            other => Err(format!("unknown loss '{other}' (expected exp or log)")),
        }
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Empirical loss `Σ ℓ(y_i Φ(θ; x_i))` and its gradient.
pub fn loss_and_grad(
    arch: &ArchSpec,
    params: &ParamVec,
    data: &Dataset,
    loss: LossKind,
) -> Result<(f64, ParamVec), NetError> {
    let mut total = 0.0;
    let mut g = ParamVec::zeros(arch);
    for ex in data.iter() {
        let (f, gi) = value_and_grad(arch, params, &ex.x)?;
        let q = ex.y * f;
        total += loss.value(q);
        g = g.add_scaled(loss.derivative(q) * ex.y, &gi);
    }
    Ok((total, g))
}

/// Degree `L` with `Φ(αθ; x) = α^L Φ(θ; x)`; equals the depth.
pub fn homogeneity_degree(arch: &ArchSpec) -> usize {
    arch.depth()
}

/// `|Φ(αθ; x) − α^L Φ(θ; x)|` for a sampled `α > 0`.
pub fn homogeneity_residual(arch: &ArchSpec, params: &ParamVec, x: &[f64], alpha: f64) -> Result<f64, NetError> {
    let scaled = forward(arch, &params.scaled(alpha), x)?;
    let base = forward(arch, params, x)?;
    Ok((scaled - alpha.powi(homogeneity_degree(arch) as i32) * base).abs())
}

/// Default relative zero tolerance for pre-activations.
pub const ZERO_PREACTIVATION_TOL: f64 = 1e-8;

/// Signs of hidden pre-activations per example, `[example][hidden layer][neuron]` in `{-1, 0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationPattern {
    pub signs: Vec<Vec<Vec<i8>>>,
}

impl ActivationPattern {
    /// `(example, hidden layer, neuron)` triples whose pre-activation was reported as zero.
    pub fn zero_contacts(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (i, layers) in self.signs.iter().enumerate() {
            for (l, neurons) in layers.iter().enumerate() {
                for (j, &s) in neurons.iter().enumerate() {
                    if s == 0 {
                        out.push((i, l, j));
                    }
                }
            }
        }
        out
    }

    pub fn has_zero(&self) -> bool {
        self.signs.iter().flatten().flatten().any(|&s| s == 0)
    }

    /// Indicator `1(pre ≥ 0)` used by fixed-pattern constraints.
    pub fn indicator(&self, example: usize, layer: usize, neuron: usize) -> bool {
        self.signs[example][layer][neuron] >= 0
    }

    /// Slopes reproducing this pattern for one example, with `zero_slope` at zero contacts.
    pub fn gates(&self, example: usize, zero_slope: f64) -> Gates {
        Gates {
            layers: self.signs[example]
                .iter()
                .map(|neurons| {
                    neurons
                        .iter()
                        .map(|&s| match s {
                            1 => 1.0,
                            0 => zero_slope,
                            _ => 0.0,
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

/// Pre-activation signs with zero tolerance `tol · ‖θ‖^l · ‖x‖` at hidden layer `l` (1-based),
/// matching the degree of homogeneity of that layer's pre-activations.
pub fn activation_pattern(
    arch: &ArchSpec,
    params: &ParamVec,
    data: &Dataset,
    tol: f64,
) -> Result<ActivationPattern, NetError> {
    if arch.activation() != Activation::Relu {
        return Err(NetError::NotApplicable);
    }
    let norm = params.norm();
    let mut signs = Vec::with_capacity(data.len());
    for ex in data.iter() {
        let xnorm = ex.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let pre = preactivations(arch, params, &ex.x)?;
        signs.push(
            pre.iter()
                .enumerate()
                .map(|(l, z)| {
                    let thresh = tol * norm.powi(l as i32 + 1) * xnorm;
                    z.iter()
                        .map(|&v| if v.abs() <= thresh { 0 } else if v > 0.0 { 1 } else { -1 })
                        .collect()
                })
                .collect(),
        );
    }
    Ok(ActivationPattern { signs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn relu_d2_limit() -> (ArchSpec, ParamVec) {
        let arch = ArchSpec::fully_connected(&[2, 2, 1], Activation::Relu).unwrap();
        let p = ParamVec::new(vec![vec![0.0, 2.0, 0.0, 0.0], vec![2.0, 0.0]]);
        (arch, p)
    }

    #[test]
    fn forward_examples() {
        let (arch, p) = relu_d2_limit();
        assert_abs_diff_eq!(forward(&arch, &p, &[1.0, 0.25]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(forward(&arch, &ParamVec::zeros(&arch), &[3.0, -1.0]).unwrap(), 0.0);
        let diag = ArchSpec::diagonal(2, 3, Activation::Linear).unwrap();
        let c = 2f64.powf(-1.0 / 3.0);
        let q = ParamVec::new(vec![vec![c, c], vec![c, c], vec![c, c]]);
        assert_abs_diff_eq!(forward(&diag, &q, &[1.0, 1.0]).unwrap(), 1.0, epsilon = 1e-14);
        assert!(forward(&arch, &p, &[1.0]).is_err());
    }

    #[test]
    fn materialize_examples() {
        let diag = ArchSpec::diagonal(2, 2, Activation::Linear).unwrap();
        let w = materialize(&diag, &ParamVec::new(vec![vec![1.0, 0.0], vec![1.0, 1.0]])).unwrap();
        assert_eq!(w[0], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let conv = ArchSpec::patch_conv(4, 2, Activation::Relu).unwrap();
        let w = materialize(&conv, &ParamVec::new(vec![vec![0.0, 1.0], vec![1.0, 1.0]])).unwrap();
        assert_eq!(w[0], DMatrix::from_row_slice(2, 4, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn gradient_examples() {
        let (arch, p) = relu_d2_limit();
        let g = grad(&arch, &p, &[1.0, 0.25]).unwrap();
        assert_abs_diff_eq!(g.layer(1)[0], 0.5, epsilon = 1e-15);
        let inactive = ParamVec::new(vec![vec![0.0, 1.0, 0.0, -1.0], vec![1.0, 1.0]]);
        let g = grad(&arch, &inactive, &[1.0, 0.25]).unwrap();
        assert_eq!(&g.layer(0)[2..], &[0.0, 0.0]);
        let lin = ArchSpec::fully_connected(&[2, 2, 1], Activation::Linear).unwrap();
        let p = ParamVec::new(vec![vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 2.0]]);
        let g = grad(&lin, &p, &[3.0, 4.0]).unwrap();
        assert_eq!(g.layer(0), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn loss_examples() {
        let diag = ArchSpec::diagonal(2, 2, Activation::Linear).unwrap();
        let data = Dataset::positives(vec![vec![1.0, 2.0]]).unwrap();
        let p = ParamVec::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let (l, _) = loss_and_grad(&diag, &p, &data, LossKind::Exponential).unwrap();
        assert_abs_diff_eq!(l, (-1.0f64).exp(), epsilon = 1e-15);
        let (l, _) = loss_and_grad(&diag, &ParamVec::zeros(&diag), &data, LossKind::Logistic).unwrap();
        assert_abs_diff_eq!(l, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn logistic_is_stable() {
        let l = LossKind::Logistic;
        assert!(l.value(800.0) >= 0.0 && l.value(800.0) < 1e-300);
        assert_abs_diff_eq!(l.value(-800.0), 800.0, epsilon = 1e-9);
        assert_abs_diff_eq!(l.log_neg_derivative(800.0), -800.0, epsilon = 1e-9);
        assert_abs_diff_eq!(l.derivative(0.0), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn homogeneity() {
        let (arch, p) = relu_d2_limit();
        assert_eq!(homogeneity_degree(&arch), 2);
        assert!(homogeneity_residual(&arch, &p, &[1.0, 0.25], 2.0).unwrap() < 1e-14);
        assert_abs_diff_eq!(forward(&arch, &p.scaled(2.0), &[1.0, 0.25]).unwrap(), 4.0, epsilon = 1e-14);
        let diag = ArchSpec::diagonal(2, 3, Activation::Linear).unwrap();
        let q = ParamVec::new(vec![vec![1.0, 0.5], vec![0.3, 1.0], vec![2.0, 1.0]]);
        let base = forward(&diag, &q, &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(forward(&diag, &q.scaled(3.0), &[1.0, 1.0]).unwrap(), 27.0 * base, epsilon = 1e-12);
        assert_eq!(homogeneity_residual(&diag, &q, &[1.0, 1.0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn patterns() {
        let (arch, p) = relu_d2_limit();
        let data = Dataset::positives(vec![vec![1.0, 0.25], vec![-1.0, 0.25]]).unwrap();
        let pat = activation_pattern(&arch, &p, &data, ZERO_PREACTIVATION_TOL).unwrap();
        assert_eq!(pat.signs[0][0], vec![1, 0]);
        assert_eq!(pat.signs[1][0], vec![1, 0]);
        assert_eq!(pat.zero_contacts(), vec![(0, 0, 1), (1, 0, 1)]);
        let lin = ArchSpec::fully_connected(&[2, 2, 1], Activation::Linear).unwrap();
        assert_eq!(activation_pattern(&lin, &p, &data, 1e-8), Err(NetError::NotApplicable));
    }

    #[test]
    fn gated_matches_ungated_off_kinks() {
        let arch = ArchSpec::fully_connected(&[2, 3, 1], Activation::Relu).unwrap();
        let p = ParamVec::new(vec![vec![1.0, -0.5, -1.0, 0.3, 0.2, 0.7], vec![1.0, -2.0, 0.5]]);
        let data = Dataset::positives(vec![vec![0.4, 1.0]]).unwrap();
        let pat = activation_pattern(&arch, &p, &data, 1e-8).unwrap();
        let (f1, g1) = value_and_grad(&arch, &p, &data.examples()[0].x).unwrap();
        let (f2, g2) = gated_value_and_grad(&arch, &p, &data.examples()[0].x, &pat.gates(0, 0.0)).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(g1, g2);
    }
}
