//! Local and global optimality probes for unit-margin points of `min ½‖θ‖²` s.t. `y_i Φ(θ; x_i) ≥ 1`.
//!
//! A NOT_LOCAL verdict always carries a re-verifiable witness. NO_WITNESS_FOUND is evidence
//! only: the random search is one-sided.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convexref::{self, ConvexError, QpSolution};
use crate::netcore::{self, Activation, ArchSpec, Dataset, NetError, ParamVec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Convex(#[from] ConvexError),
    #[error("reference candidate is infeasible: minimum margin {min_margin}")]
    InfeasibleReference { min_margin: f64 },
    #[error("global reference not applicable: {0}")]
    ReferenceNotApplicable(String),
}

/// Margin slack allowed for a witness.
pub const FEASIBILITY_TOL: f64 = 1e-8;
/// Required decrease of `‖θ‖²`, relative to `‖θ̃‖²`.
pub const IMPROVEMENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WitnessVerdict {
    NotLocal,
    NoWitnessFound,
    InvalidWitness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WitnessSource {
    Supplied,
    Registered { name: String, parameter: f64 },
    RandomSearch { iteration: u64, refined: bool },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    /// Ball radius, when the report comes from a probe.
    pub eps: Option<f64>,
    pub theta_prime: ParamVec,
    pub distance: f64,
    pub margins: Vec<f64>,
    /// `‖θ′‖² − ‖θ̃‖²`.
    pub norm_delta: f64,
    pub verdict: WitnessVerdict,
    pub source: WitnessSource,
}

impl WitnessReport {
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Checks feasibility and norm decrease of `candidate` against `theta`; no optimization.
pub fn verify_witness(
    arch: &ArchSpec,
    theta: &ParamVec,
    candidate: &ParamVec,
    data: &Dataset,
) -> Result<WitnessReport, ProbeError> {
    theta.check_shape(arch)?;
    candidate.check_shape(arch)?;
    let margins = netcore::margins(arch, candidate, data)?;
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let base = theta.norm_sq();
    let norm_delta = candidate.norm_sq() - base;
    let verdict = if !(min_margin >= 1.0 - FEASIBILITY_TOL) {
        WitnessVerdict::InvalidWitness
    } else if norm_delta < -IMPROVEMENT_TOL * base {
        WitnessVerdict::NotLocal
    } else {
        WitnessVerdict::NoWitnessFound
    };
    Ok(WitnessReport {
        eps: None,
        theta_prime: candidate.clone(),
        distance: candidate.distance(theta),
        margins,
        norm_delta,
        verdict,
        source: WitnessSource::Supplied,
    })
}

/// A closed-form family `θ′(t)` of candidate improvements near a known point.
pub trait WitnessGenerator: Sync {
    fn name(&self) -> &str;
    /// Largest parameter for which the family is valid (open interval `(0, max)`).
    fn max_parameter(&self) -> f64;
    fn generate(&self, parameter: f64) -> Option<ParamVec>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub eps: f64,
    pub budget: u64,
    pub seed: u64,
    /// Coordinate-refinement sweeps applied to a sample whose rescaling improves the norm.
    pub refine_sweeps: usize,
}

impl ProbeConfig {
    pub fn new(eps: f64, budget: u64, seed: u64) -> Self {
        Self {
            eps,
            budget,
            seed,
            refine_sweeps: 20,
        }
    }
}

fn no_witness(arch: &ArchSpec, theta: &ParamVec, data: &Dataset, eps: f64) -> Result<WitnessReport, ProbeError> {
    let mut r = verify_witness(arch, theta, theta, data)?;
    r.eps = Some(eps);
    r.verdict = WitnessVerdict::NoWitnessFound;
    r.source = WitnessSource::None;
    Ok(r)
}

/// Unit-margin rescaling of `theta`, or `None` when some margin is nonpositive.
fn rescaled(arch: &ArchSpec, theta: &ParamVec, data: &Dataset) -> Option<ParamVec> {
    let m = netcore::min_margin(arch, theta, data).ok()?;
    (m > 0.0).then(|| theta.scaled(m.powf(-1.0 / netcore::homogeneity_degree(arch) as f64)))
}

struct Ball<'a> {
    arch: &'a ArchSpec,
    center: &'a ParamVec,
    data: &'a Dataset,
    eps: f64,
    target: f64,
}

impl Ball<'_> {
    /// Norm² after rescaling, if the rescaled point stays in the ball.
    fn score(&self, theta: &ParamVec) -> Option<(f64, ParamVec)> {
        let r = rescaled(self.arch, theta, self.data)?;
        (r.distance(self.center) <= self.eps).then(|| (r.norm_sq(), r))
    }

    fn accepts(&self, candidate: &ParamVec) -> bool {
        candidate.distance(self.center) <= self.eps && candidate.norm_sq() < self.target
    }

    /// Coordinate descent on the rescaled norm, starting from `start`.
    fn refine(&self, start: &ParamVec, sweeps: usize) -> Option<ParamVec> {
        let mut point = start.clone();
        let mut best = self.score(&point).map(|s| s.0).unwrap_or(f64::INFINITY);
        let mut step = self.eps / 4.0;
        let n = point.len();
        for _ in 0..sweeps {
            let mut improved = false;
            for k in 0..n {
                for sign in [1.0, -1.0] {
                    let mut flat = point.flat();
                    flat[k] += sign * step;
                    let trial = ParamVec::new(split_like(&point, flat));
                    if let Some((s, _)) = self.score(&trial) {
                        if s < best {
                            best = s;
                            point = trial;
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        self.score(&point).map(|s| s.1).filter(|r| self.accepts(r))
    }
}

fn split_like(shape: &ParamVec, flat: Vec<f64>) -> Vec<Vec<f64>> {
    let mut it = flat.into_iter();
    shape.layers().iter().map(|l| it.by_ref().take(l.len()).collect()).collect()
}

fn sphere_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Searches the ε-ball around `theta` for a feasible point of smaller norm: first the
/// registered witness families, then `budget` random sphere perturbations (rescaled to unit
/// margin and coordinate-refined when they improve). Deterministic given the seed.
pub fn local_probe(
    arch: &ArchSpec,
    theta: &ParamVec,
    data: &Dataset,
    config: &ProbeConfig,
    generators: &[&dyn WitnessGenerator],
) -> Result<WitnessReport, ProbeError> {
    theta.check_shape(arch)?;
    let eps = config.eps;
    if !(eps > 0.0) {
        return no_witness(arch, theta, data, eps);
    }
    for generator in generators {
        let mut t = generator.max_parameter().min(eps);
        for _ in 0..60 {
            // The families are only valid on an open interval.
            t *= if t >= generator.max_parameter() { 0.5 } else { 1.0 };
            let Some(candidate) = generator.generate(t) else { break };
            if candidate.check_shape(arch).is_ok() && candidate.distance(theta) <= eps {
                let mut report = verify_witness(arch, theta, &candidate, data)?;
                if report.verdict == WitnessVerdict::NotLocal {
                    report.eps = Some(eps);
                    report.source = WitnessSource::Registered {
                        name: generator.name().to_string(),
                        parameter: t,
                    };
                    return Ok(report);
                }
                break;
            }
            t *= 0.5;
        }
    }

    let base = theta.norm_sq();
    let ball = Ball {
        arch,
        center: theta,
        data,
        eps,
        target: base - IMPROVEMENT_TOL * base,
    };
    let flat = theta.flat();
    let found = (0..config.budget).into_par_iter().find_map_first(|iteration| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(iteration);
        let dir = sphere_direction(&mut rng, flat.len());
        let sample: Vec<f64> = flat.iter().zip(&dir).map(|(a, d)| a + eps * d).collect();
        let sample = ParamVec::new(split_like(theta, sample));
        let r = rescaled(arch, &sample, data)?;
        if ball.accepts(&r) {
            return Some((iteration, r, false));
        }
        if r.norm_sq() < base {
            return ball.refine(&sample, config.refine_sweeps).map(|p| (iteration, p, true));
        }
        None
    });
    match found {
        Some((iteration, candidate, refined)) => {
            let mut report = verify_witness(arch, theta, &candidate, data)?;
            report.eps = Some(eps);
            report.source = WitnessSource::RandomSearch { iteration, refined };
            Ok(report)
        }
        None => no_witness(arch, theta, data, eps),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GapVerdict {
    Global,
    NotGlobal,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GlobalReference {
    /// `m‖u*‖^{2/m}` for fully connected linear networks, from the linear max-margin QP.
    LinearFc,
    /// Twice the neuron-space group-norm optimum, for depth-2 no-share linear networks.
    GroupNorm,
    /// An explicit feasible point; only an upper bound on the optimum.
    Candidate { theta: ParamVec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub theta_norm_sq: f64,
    pub reference_value: f64,
    /// `‖θ̃‖² / reference`.
    pub ratio: f64,
    /// The reference is the optimal value itself; otherwise only a feasible value.
    pub certified_optimum: bool,
    pub reference: String,
    pub verdict: GapVerdict,
}

/// Ratio tolerance separating GLOBAL from NOT_GLOBAL.
pub const GAP_TOL: f64 = 1e-2;

pub fn global_gap(
    arch: &ArchSpec,
    theta: &ParamVec,
    data: &Dataset,
    reference: &GlobalReference,
) -> Result<GapReport, ProbeError> {
    theta.check_shape(arch)?;
    let (reference_value, certified_optimum, label) = match reference {
        GlobalReference::LinearFc => {
            if arch.activation() != Activation::Linear || !arch.is_fully_connected() {
                return Err(ProbeError::ReferenceNotApplicable("needs a fully connected linear network".into()));
            }
            let qp = convexref::solve_linear_maxmargin(data)?;
            let m = arch.depth() as f64;
            (m * qp.objective.powf(2.0 / m), true, "linear_fc")
        }
        GlobalReference::GroupNorm => {
            if arch.activation() != Activation::Linear {
                return Err(ProbeError::ReferenceNotApplicable("group-norm bound needs a linear network".into()));
            }
            let groups = convexref::neuron_groups(arch, data, None)?;
            let labels: Vec<f64> = data.iter().map(|e| e.y).collect();
            let sol = convexref::solve_group_maxmargin(&groups, &labels, &Default::default())?;
            (2.0 * sol.objective, true, "group_norm")
        }
        GlobalReference::Candidate { theta: candidate } => {
            candidate.check_shape(arch)?;
            let min_margin = netcore::min_margin(arch, candidate, data)?;
            if !(min_margin >= 1.0 - FEASIBILITY_TOL) {
                return Err(ProbeError::InfeasibleReference { min_margin });
            }
            (candidate.norm_sq(), false, "candidate")
        }
    };
    let theta_norm_sq = theta.norm_sq();
    let ratio = theta_norm_sq / reference_value;
    let verdict = if ratio > 1.0 + GAP_TOL {
        GapVerdict::NotGlobal
    } else if certified_optimum {
        GapVerdict::Global
    } else {
        GapVerdict::Inconclusive
    };
    Ok(GapReport {
        theta_norm_sq,
        reference_value,
        ratio,
        certified_optimum,
        reference: label.to_string(),
        verdict,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayerVerdict {
    /// Linear network: the layer solves its convex problem.
    Global,
    /// ReLU network: optimal among layers keeping the activation pattern.
    Local,
    NotLocal,
    /// A pre-activation downstream is zero, so the convex reduction does not apply.
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// 0-based parameter layer.
    pub layer: usize,
    pub verdict: LayerVerdict,
    pub layer_norm: f64,
    pub optimum_norm: Option<f64>,
    /// `max |u*_k − ũ_k|`.
    pub max_abs_diff: Option<f64>,
    pub qp: Option<QpSolution>,
}

/// Per-layer optimality of `theta` with all other layers frozen.
pub fn per_layer_check(
    arch: &ArchSpec,
    theta: &ParamVec,
    data: &Dataset,
    layer: usize,
    tol: f64,
) -> Result<LayerReport, ProbeError> {
    let layer_norm = theta.layer_norm_sq(layer).sqrt();
    let qp = match convexref::solve_per_layer_qp(arch, theta, layer, data) {
        Ok(qp) => qp,
        Err(ConvexError::ZeroPreactivation { .. }) => {
            return Ok(LayerReport {
                layer,
                verdict: LayerVerdict::Undetermined,
                layer_norm,
                optimum_norm: None,
                max_abs_diff: None,
                qp: None,
            })
        }
        Err(e) => return Err(e.into()),
    };
    let max_abs_diff = qp
        .optimizer
        .iter()
        .zip(theta.layer(layer))
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let verdict = if qp.objective < layer_norm * (1.0 - tol) {
        LayerVerdict::NotLocal
    } else if arch.activation() == Activation::Linear {
        LayerVerdict::Global
    } else {
        LayerVerdict::Local
    };
    Ok(LayerReport {
        layer,
        verdict,
        layer_norm,
        optimum_norm: Some(qp.objective),
        max_abs_diff: Some(max_abs_diff),
        qp: Some(qp),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn relu_d2() -> (ArchSpec, Dataset, ParamVec) {
        let arch = ArchSpec::fully_connected(&[2, 2, 1], Activation::Relu).unwrap();
        let data = Dataset::positives(vec![vec![1.0, 0.25], vec![-1.0, 0.25]]).unwrap();
        (arch, data, ParamVec::new(vec![vec![0.0, 2.0, 0.0, 0.0], vec![2.0, 0.0]]))
    }

    fn diag_d2() -> (ArchSpec, Dataset, ParamVec) {
        let arch = ArchSpec::diagonal(2, 2, Activation::Linear).unwrap();
        let data = Dataset::positives(vec![vec![1.0, 2.0]]).unwrap();
        (arch, data, ParamVec::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]))
    }

    #[test]
    fn witness_examples() {
        let (arch, data, theta) = relu_d2();
        let e: f64 = 0.1;
        let witness = ParamVec::new(vec![vec![e / 2.0, 2.0 - 2.0 * e, -(2.0 * e).sqrt(), 0.0], vec![2.0, (2.0 * e).sqrt()]]);
        let r = verify_witness(&arch, &theta, &witness, &data).unwrap();
        assert_eq!(r.verdict, WitnessVerdict::NotLocal);
        assert_abs_diff_eq!(witness.norm_sq(), 7.6425, epsilon = 1e-12);
        for m in &r.margins {
            assert_abs_diff_eq!(*m, 1.0, epsilon = 1e-12);
        }

        let same = verify_witness(&arch, &theta, &theta, &data).unwrap();
        assert_eq!(same.verdict, WitnessVerdict::NoWitnessFound);
        assert_eq!(same.norm_delta, 0.0);

        let (arch, data, theta) = diag_d2();
        let s = 0.9f64.sqrt();
        let shrunk = ParamVec::new(vec![vec![s, 0.0], vec![s, 0.0]]);
        let r = verify_witness(&arch, &theta, &shrunk, &data).unwrap();
        assert_eq!(r.verdict, WitnessVerdict::InvalidWitness);
        assert_abs_diff_eq!(r.min_margin(), 0.9, epsilon = 1e-15);
    }

    struct DiagFamily;

    impl WitnessGenerator for DiagFamily {
        fn name(&self) -> &str {
            "diag"
        }
        fn max_parameter(&self) -> f64 {
            1.0
        }
        fn generate(&self, e: f64) -> Option<ParamVec> {
            let w = vec![(1.0 - e).sqrt(), (e / 2.0).sqrt()];
            Some(ParamVec::new(vec![w.clone(), w]))
        }
    }

    #[test]
    fn probe_uses_registered_witness() {
        let (arch, data, theta) = diag_d2();
        let r = local_probe(&arch, &theta, &data, &ProbeConfig::new(0.5, 0, 1), &[&DiagFamily]).unwrap();
        assert_eq!(r.verdict, WitnessVerdict::NotLocal);
        assert!(r.distance <= 0.5);
        assert!(matches!(r.source, WitnessSource::Registered { .. }));
    }

    #[test]
    fn random_search_finds_improvement_and_is_deterministic() {
        let (arch, data, theta) = diag_d2();
        let cfg = ProbeConfig::new(0.2, 2000, 7);
        let a = local_probe(&arch, &theta, &data, &cfg, &[]).unwrap();
        assert_eq!(a.verdict, WitnessVerdict::NotLocal);
        assert!(a.distance <= 0.2 && a.min_margin() >= 1.0 - FEASIBILITY_TOL);
        let b = local_probe(&arch, &theta, &data, &cfg, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_ball() {
        let (arch, data, theta) = relu_d2();
        let r = local_probe(&arch, &theta, &data, &ProbeConfig::new(0.0, 100, 1), &[]).unwrap();
        assert_eq!(r.verdict, WitnessVerdict::NoWitnessFound);
    }

    #[test]
    fn strict_local_minimum_has_no_witness() {
        let (arch, data, _) = diag_d2();
        let optimum = ParamVec::new(vec![vec![0.0, 0.5f64.sqrt()], vec![0.0, 0.5f64.sqrt()]]);
        let r = local_probe(&arch, &optimum, &data, &ProbeConfig::new(0.05, 500, 3), &[]).unwrap();
        assert_eq!(r.verdict, WitnessVerdict::NoWitnessFound);
    }

    #[test]
    fn gap_references() {
        let (arch, data, theta) = diag_d2();
        let g = global_gap(&arch, &theta, &data, &GlobalReference::GroupNorm).unwrap();
        assert_abs_diff_eq!(g.reference_value, 1.0, epsilon = 1e-8);
        assert_eq!(g.verdict, GapVerdict::NotGlobal);

        let (arch, data, theta) = relu_d2();
        // One neuron aligned to each input; the other neuron is inactive on it.
        let norm_x = 17f64.sqrt() / 4.0;
        let a = (1.0 / norm_x).sqrt();
        let w = |x: f64, y: f64| [a * x / norm_x, a * y / norm_x];
        let (w1, w2) = (w(1.0, 0.25), w(-1.0, 0.25));
        let candidate = ParamVec::new(vec![vec![w1[0], w1[1], w2[0], w2[1]], vec![a, a]]);
        let g = global_gap(&arch, &theta, &data, &GlobalReference::Candidate { theta: candidate.clone() }).unwrap();
        assert_abs_diff_eq!(g.reference_value, 16.0 / 17f64.sqrt(), epsilon = 1e-12);
        assert_eq!(g.verdict, GapVerdict::NotGlobal);
        let bad = candidate.scaled(0.9);
        assert!(matches!(
            global_gap(&arch, &theta, &data, &GlobalReference::Candidate { theta: bad }),
            Err(ProbeError::InfeasibleReference { .. })
        ));
    }

    #[test]
    fn per_layer_verdicts() {
        let (arch, data, theta) = diag_d2();
        for layer in 0..2 {
            assert_eq!(per_layer_check(&arch, &theta, &data, layer, 1e-6).unwrap().verdict, LayerVerdict::Global);
        }
        let (arch, data, theta) = relu_d2();
        assert_eq!(per_layer_check(&arch, &theta, &data, 0, 1e-6).unwrap().verdict, LayerVerdict::Undetermined);
        assert_eq!(per_layer_check(&arch, &theta, &data, 1, 1e-6).unwrap().verdict, LayerVerdict::Local);
        let (arch, data, _) = diag_d2();
        let loose = ParamVec::new(vec![vec![1.0, 0.3], vec![2.0, 0.0]]);
        assert_eq!(per_layer_check(&arch, &loose, &data, 0, 1e-6).unwrap().verdict, LayerVerdict::NotLocal);
    }
}
