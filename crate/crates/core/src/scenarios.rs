//! Catalog of reproducible constructions: dataset, architecture, initialization, flow budget,
//! expected limit, closed-form witness family and expected verdicts.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convexref::{self, ConvexError};
use crate::flowsim::FlowConfig;
use crate::kktcert::{KktTolerances, KktVerdict};
use crate::netcore::{self, Activation, ArchSpec, Dataset, Example, LossKind, NetError, ParamVec};
use crate::optprobe::{GlobalReference, LayerVerdict, WitnessGenerator};

pub const CATALOG: [&str; 10] = [
    "FC_LIN_DEEP",
    "FC_RELU_D2",
    "DIAG_D2",
    "NOSHARE_NONZERO_W",
    "FC_RELU_4N",
    "RELU_LOCAL_NOT_GLOBAL",
    "CONV_D2",
    "DIAG_DEEP_M3",
    "PER_LAYER_LIN",
    "PER_LAYER_RELU",
];

pub fn catalog() -> Vec<&'static str> {
    CATALOG.to_vec()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("{id}: witness parameter {eps} outside ({lo}, {hi})")]
    EpsOutOfRange { id: String, eps: f64, lo: f64, hi: f64 },
    #[error("{0}: no witness family registered")]
    NoWitness(String),
    #[error("{id}: precondition `{check}` failed: {reason}")]
    Precondition { id: String, check: String, reason: String },
    #[error("{id}: invalid override: {reason}")]
    InvalidOverride { id: String, reason: String },
    #[error("invalid scenario document: {0}")]
    Parse(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Convex(#[from] ConvexError),
}

/// Closed-form improving perturbations `θ′(ε)` of the expected limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum WitnessFamily {
    /// Two-neuron ReLU net with a dead second neuron: revive it on `x₂` and tilt the first.
    DeadNeuronRevival,
    /// Depth-2 diagonal net: move mass onto the unused coordinate.
    DiagonalSpread,
    /// Four-neuron ReLU net with `w̃_j = x_j`: tilt every incoming vector towards its neighbour.
    QuadrantTilt,
    /// Two-patch convolution: rotate the filter and unbalance the output weights.
    PatchShift,
    /// Depth-`depth` diagonal net on `x = (1,1)`: split the product unevenly.
    DeepSpread { depth: usize },
}

impl WitnessFamily {
    pub fn name(&self) -> &'static str {
        match self {
            Self::DeadNeuronRevival => "dead_neuron_revival",
            Self::DiagonalSpread => "diagonal_spread",
            Self::QuadrantTilt => "quadrant_tilt",
            Self::PatchShift => "patch_shift",
            Self::DeepSpread { .. } => "deep_spread",
        }
    }

    /// Open validity interval of the parameter.
    pub fn interval(&self) -> (f64, f64) {
        match self {
            Self::DeadNeuronRevival | Self::DiagonalSpread => (0.0, 1.0),
            Self::QuadrantTilt => (0.0, 0.5 * FRAC_1_SQRT_2),
            Self::PatchShift | Self::DeepSpread { .. } => (0.0, 0.5),
        }
    }

    /// `θ′(eps)` without range checks.
    pub fn evaluate(&self, eps: f64) -> ParamVec {
        match *self {
            Self::DeadNeuronRevival => {
                let r = (2.0 * eps).sqrt();
                ParamVec::new(vec![vec![eps / 2.0, 2.0 - 2.0 * eps, -r, 0.0], vec![2.0, r]])
            }
            Self::DiagonalSpread => {
                let w = vec![(1.0 - eps).sqrt(), (eps / 2.0).sqrt()];
                ParamVec::new(vec![w.clone(), w])
            }
            Self::QuadrantTilt => {
                let e = eps;
                ParamVec::new(vec![
                    vec![e, 1.0 - e, 1.0 - e, -e, -e, -1.0 + e, -1.0 + e, e],
                    vec![1.0; 4],
                ])
            }
            Self::PatchShift => {
                let r = eps.sqrt();
                ParamVec::new(vec![vec![r, 1.0 - eps], vec![FRAC_1_SQRT_2 + r / 2.0, FRAC_1_SQRT_2 - r / 2.0]])
            }
            Self::DeepSpread { depth } => {
                let p = 1.0 / depth as f64;
                let w = vec![((1.0 + eps) / 2.0).powf(p), ((1.0 - eps) / 2.0).powf(p)];
                ParamVec::new(vec![w; depth])
            }
        }
    }

    pub fn generate_checked(&self, id: &str, eps: f64) -> Result<ParamVec, ScenarioError> {
        let (lo, hi) = self.interval();
        if !(eps > lo && eps < hi) {
            return Err(ScenarioError::EpsOutOfRange {
                id: id.to_string(),
                eps,
                lo,
                hi,
            });
        }
        Ok(self.evaluate(eps))
    }
}

impl WitnessGenerator for WitnessFamily {
    fn name(&self) -> &str {
        WitnessFamily::name(self)
    }

    fn max_parameter(&self) -> f64 {
        self.interval().1
    }

    fn generate(&self, parameter: f64) -> Option<ParamVec> {
        let (lo, hi) = self.interval();
        (parameter > lo && parameter < hi).then(|| self.evaluate(parameter))
    }
}

/// How to obtain the global comparison point for a limit `θ̃`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    None,
    /// Exact optimum of a fully connected linear network.
    LinearFc,
    /// Exact optimum of a depth-2 no-share linear network.
    GroupNorm,
    /// Depth-2 ReLU net with positive labels and at least `n` neurons: neuron `j` serves `x_j`
    /// alone with `w_j = a_j x̂_j`, `v_j = a_j`, `a_j² = 1/‖x_j‖`.
    AlignedNeurons,
    /// Two-neuron ReLU net on `(1,¼), (−1,¼), (0,−1)`: keep `ṽ`, point neuron 1 at `x₁` and
    /// neuron 2 at `(−5/4, −1)`, scaled by `1/α̃` and `1/β̃`.
    SplitNeurons,
}

impl ReferenceSpec {
    pub fn resolve(&self, arch: &ArchSpec, data: &Dataset, theta: &ParamVec) -> Result<Option<GlobalReference>, ScenarioError> {
        Ok(match self {
            Self::None => None,
            Self::LinearFc => Some(GlobalReference::LinearFc),
            Self::GroupNorm => Some(GlobalReference::GroupNorm),
            Self::AlignedNeurons => Some(GlobalReference::Candidate {
                theta: aligned_neurons(arch, data)?,
            }),
            Self::SplitNeurons => {
                theta.check_shape(arch)?;
                let v = theta.layer(1);
                let (alpha, beta) = (v[0], v[1]);
                let x1 = &data.examples()[0].x;
                let n1 = (x1[0] * x1[0] + x1[1] * x1[1]).sqrt();
                Some(GlobalReference::Candidate {
                    theta: ParamVec::new(vec![
                        vec![x1[0] / (alpha * n1), x1[1] / (alpha * n1), -1.25 / beta, -1.0 / beta],
                        vec![alpha, beta],
                    ]),
                })
            }
        })
    }
}

fn aligned_neurons(arch: &ArchSpec, data: &Dataset) -> Result<ParamVec, ScenarioError> {
    let id = "aligned_neurons";
    let fail = |reason: &str| ScenarioError::Precondition {
        id: id.to_string(),
        check: "aligned_neurons".to_string(),
        reason: reason.to_string(),
    };
    if arch.depth() != 2 || !arch.is_fully_connected() || arch.activation() != Activation::Relu {
        return Err(fail("needs a fully connected depth-2 ReLU network"));
    }
    let width = arch.dims()[1];
    if data.len() > width || data.iter().any(|e| e.y != 1.0) {
        return Err(fail("needs positive labels and at least one neuron per example"));
    }
    let d = data.dim();
    let mut first = vec![0.0; width * d];
    let mut second = vec![0.0; width];
    for (j, ex) in data.iter().enumerate() {
        let norm = ex.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let a = norm.recip().sqrt();
        for (k, xk) in ex.x.iter().enumerate() {
            first[j * d + k] = a * xk / norm;
        }
        second[j] = a;
    }
    Ok(ParamVec::new(vec![first, second]))
}

/// Load-time checks on the initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Precondition {
    /// Initial loss below one for every configured loss.
    InitialLossBelowOne,
    /// Neuron 1 active on every input with positive output weight, neuron 2 inactive on every input.
    OneLiveOneDead,
    /// The data is linearly separable.
    LinearlySeparable,
}

impl Precondition {
    fn name(&self) -> &'static str {
        match self {
            Self::InitialLossBelowOne => "initial_loss_below_one",
            Self::OneLiveOneDead => "one_live_one_dead",
            Self::LinearlySeparable => "linearly_separable",
        }
    }

    fn check(&self, s: &Scenario) -> Result<(), String> {
        match self {
            Self::InitialLossBelowOne => {
                for &loss in &s.losses {
                    let (value, _) = netcore::loss_and_grad(&s.arch, &s.init, &s.data, loss).map_err(|e| e.to_string())?;
                    if !(value < 1.0) {
                        return Err(format!("{} loss at initialization is {value}", loss.label()));
                    }
                }
                Ok(())
            }
            Self::OneLiveOneDead => {
                if s.arch.dims() != [2, 2, 1] || !s.arch.is_fully_connected() {
                    return Err("needs a fully connected 2-2-1 network".into());
                }
                let w = s.init.layer(0);
                for (i, ex) in s.data.iter().enumerate() {
                    let live = w[0] * ex.x[0] + w[1] * ex.x[1];
                    let dead = w[2] * ex.x[0] + w[3] * ex.x[1];
                    if !(live > 0.0) {
                        return Err(format!("<w1, x{}> = {live} is not positive", i + 1));
                    }
                    if !(dead < 0.0) {
                        return Err(format!("<w2, x{}> = {dead} is not negative", i + 1));
                    }
                }
                if !(s.init.layer(1)[0] > 0.0) {
                    return Err("v1 is not positive".into());
                }
                Ok(())
            }
            Self::LinearlySeparable => match convexref::solve_linear_maxmargin(&s.data) {
                Ok(_) => Ok(()),
                Err(ConvexError::Infeasible { .. }) => Err("no linear separator exists".into()),
                Err(e) => Err(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LocalExpectation {
    NotLocal,
    /// No improving point should be found near `θ̃`.
    LocalExpected,
    Unchecked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GlobalExpectation {
    NotGlobal,
    GlobalExpected,
    Unchecked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerExpectation {
    /// 0-based parameter layer.
    pub layer: usize,
    pub verdict: LayerVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    /// Unit-margin limit, compared in max-norm.
    #[serde(default)]
    pub theta: Option<ParamVec>,
    #[serde(default = "default_theta_tol")]
    pub theta_tol: f64,
    pub kkt: KktVerdict,
    pub local: LocalExpectation,
    pub global: GlobalExpectation,
    #[serde(default)]
    pub per_layer: Vec<LayerExpectation>,
    /// Every hidden neuron must end with a nonzero incoming vector before globality is asserted.
    #[serde(default)]
    pub requires_nonzero_neurons: bool,
}

fn default_theta_tol() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    /// Parameter passed to the witness family.
    pub witness_eps: f64,
    /// Radius of the randomized local search.
    pub eps: f64,
    pub budget: u64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            witness_eps: 0.1,
            eps: 0.1,
            budget: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub summary: String,
    pub arch: ArchSpec,
    pub data: Dataset,
    pub init: ParamVec,
    pub losses: Vec<LossKind>,
    pub flow: FlowConfig,
    #[serde(default)]
    pub kkt: KktTolerances,
    #[serde(default)]
    pub preconditions: Vec<Precondition>,
    #[serde(default)]
    pub witness: Option<WitnessFamily>,
    #[serde(default = "no_reference")]
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub probe: ProbeSettings,
    pub expected: Expected,
}

fn no_reference() -> ReferenceSpec {
    ReferenceSpec::None
}

impl Scenario {
    /// Shape checks plus every listed precondition.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let precondition = |check: &str, reason: String| ScenarioError::Precondition {
            id: self.id.clone(),
            check: check.to_string(),
            reason,
        };
        self.init.check_shape(&self.arch)?;
        if self.data.dim() != self.arch.input_dim() {
            return Err(precondition(
                "shapes",
                format!("data dimension {} differs from input width {}", self.data.dim(), self.arch.input_dim()),
            ));
        }
        if let Some(theta) = &self.expected.theta {
            theta.check_shape(&self.arch)?;
        }
        if self.losses.is_empty() {
            return Err(precondition("losses", "no loss kind configured".into()));
        }
        for p in &self.preconditions {
            p.check(self).map_err(|reason| precondition(p.name(), reason))?;
        }
        Ok(())
    }

    pub fn witness(&self, eps: f64) -> Result<ParamVec, ScenarioError> {
        self.witness
            .ok_or_else(|| ScenarioError::NoWitness(self.id.clone()))?
            .generate_checked(&self.id, eps)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Parses and validates a scenario document.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ScenarioError::Parse(format!("at `{path}`: {}", e.into_inner()))
        })?;
        s.validate()?;
        Ok(s)
    }
}

/// Settings a caller may change without touching data or architecture.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub witness_eps: Option<f64>,
    pub probe_eps: Option<f64>,
    pub budget: Option<u64>,
    pub seed: Option<u64>,
    pub s_budget: Option<f64>,
    pub loss: Option<LossKind>,
    pub tol_stat: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, s: &mut Scenario) -> Result<(), ScenarioError> {
        let invalid = |reason: String| ScenarioError::InvalidOverride {
            id: s.id.clone(),
            reason,
        };
        if let Some(e) = self.probe_eps {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(invalid(format!("probe radius {e} must be nonnegative")));
            }
            s.probe.eps = e;
        }
        if let Some(e) = self.witness_eps {
            s.probe.witness_eps = e;
        }
        if let Some(b) = self.budget {
            s.probe.budget = b;
        }
        if let Some(seed) = self.seed {
            s.probe.seed = seed;
        }
        if let Some(sb) = self.s_budget {
            if !(sb > 0.0 && sb.is_finite()) {
                return Err(invalid(format!("s budget {sb} must be positive")));
            }
            s.flow.s_budget = sb;
        }
        if let Some(loss) = self.loss {
            s.losses = vec![loss];
        }
        if let Some(t) = self.tol_stat {
            if !(t > 0.0) {
                return Err(invalid(format!("stationarity tolerance {t} must be positive")));
            }
            s.kkt.stat = t;
        }
        Ok(())
    }
}

/// Builds and validates a catalog scenario.
pub fn build(id: &str, overrides: &Overrides) -> Result<Scenario, ScenarioError> {
    let mut s = match id {
        "FC_LIN_DEEP" => fc_lin_deep()?,
        "FC_RELU_D2" => relu_pair_family(0.25)?,
        "DIAG_D2" => diag_d2()?,
        "NOSHARE_NONZERO_W" => noshare_nonzero_w()?,
        "FC_RELU_4N" => fc_relu_4n()?,
        "RELU_LOCAL_NOT_GLOBAL" => relu_local_not_global()?,
        "CONV_D2" => conv_d2("CONV_D2", Activation::Linear)?,
        "DIAG_DEEP_M3" => diag_deep("DIAG_DEEP_M3", 3)?,
        "PER_LAYER_LIN" => diag_deep("PER_LAYER_LIN", 3)?,
        "PER_LAYER_RELU" => conv_d2("PER_LAYER_RELU", Activation::Relu)?,
        other => return Err(ScenarioError::UnknownScenario(other.to_string())),
    };
    overrides.apply(&mut s)?;
    s.validate()?;
    Ok(s)
}

/// The catalog witness `θ′(eps)` for `id`.
pub fn witness(id: &str, eps: f64) -> Result<ParamVec, ScenarioError> {
    build(id, &Overrides::default())?.witness(eps)
}

fn both_losses() -> Vec<LossKind> {
    vec![LossKind::Exponential, LossKind::Logistic]
}

fn expected(theta: Option<ParamVec>, local: LocalExpectation, global: GlobalExpectation) -> Expected {
    Expected {
        theta,
        theta_tol: 1e-2,
        kkt: KktVerdict::Kkt,
        local,
        global,
        per_layer: Vec::new(),
        requires_nonzero_neurons: false,
    }
}

fn layers(verdict: LayerVerdict, layers: impl IntoIterator<Item = usize>) -> Vec<LayerExpectation> {
    layers.into_iter().map(|layer| LayerExpectation { layer, verdict }).collect()
}

/// Seed for the random instance behind FC_LIN_DEEP.
pub const FC_LIN_DEEP_SEED: u64 = 0;

/// Separable data (labels from a random linear teacher) and a small random initialization.
fn fc_lin_deep() -> Result<Scenario, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(FC_LIN_DEEP_SEED);
    let (n, d) = (4, 3);
    let teacher: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let examples = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let score: f64 = x.iter().zip(&teacher).map(|(a, b)| a * b).sum();
            Example::new(x, score.signum())
        })
        .collect();
    let arch = ArchSpec::fully_connected(&[3, 3, 2, 1], Activation::Linear)?;
    let flat: Vec<f64> = (0..arch.total_params()).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
    let init = ParamVec::from_flat(&arch, &flat)?;
    let mut flow = FlowConfig::default();
    flow.direction_tolerance = 2e-5;
    flow.s_budget = 2000.0;
    // Step size is set by stiffness here, so the tighter tolerance is nearly free.
    flow.rel_tol = 1e-10;
    let mut exp = expected(None, LocalExpectation::LocalExpected, GlobalExpectation::GlobalExpected);
    exp.per_layer = layers(LayerVerdict::Global, 0..3);
    Ok(Scenario {
        id: "FC_LIN_DEEP".into(),
        summary: "Depth-3 fully connected linear network on a seeded separable dataset; the limit is a global optimum".into(),
        arch,
        data: Dataset::new(examples)?,
        init,
        losses: both_losses(),
        flow,
        kkt: KktTolerances::default(),
        preconditions: vec![Precondition::LinearlySeparable],
        witness: None,
        reference: ReferenceSpec::LinearFc,
        probe: ProbeSettings::default(),
        expected: exp,
    })
}

/// Two-neuron ReLU network on `(±1, b)` with one neuron live on both inputs and the other dead.
/// `b = ¼` is FC_RELU_D2; smaller `b` makes the limit arbitrarily worse than the optimum.
pub fn relu_pair_family(b: f64) -> Result<Scenario, ScenarioError> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(ScenarioError::InvalidOverride {
            id: "FC_RELU_D2".into(),
            reason: format!("input offset {b} must be positive"),
        });
    }
    let arch = ArchSpec::fully_connected(&[2, 2, 1], Activation::Relu)?;
    let data = Dataset::positives(vec![vec![1.0, b], vec![-1.0, b]])?;
    let c = b.sqrt().recip();
    let witness = (b == 0.25).then_some(WitnessFamily::DeadNeuronRevival);
    let mut flow = FlowConfig::default();
    flow.s_budget = 2e4;
    Ok(Scenario {
        id: if b == 0.25 { "FC_RELU_D2".into() } else { format!("FC_RELU_D2[b={b}]") },
        summary: "Two-neuron ReLU network whose second neuron never activates; the limit is a KKT point but not a local optimum".into(),
        arch,
        data,
        init: ParamVec::new(vec![vec![0.0, 1.0, 0.0, -1.0], vec![1.0, 1.0]]),
        losses: both_losses(),
        flow,
        kkt: KktTolerances::default(),
        preconditions: vec![Precondition::OneLiveOneDead],
        witness,
        reference: ReferenceSpec::AlignedNeurons,
        probe: ProbeSettings::default(),
        expected: expected(
            Some(ParamVec::new(vec![vec![0.0, c, 0.0, 0.0], vec![c, 0.0]])),
            if witness.is_some() { LocalExpectation::NotLocal } else { LocalExpectation::Unchecked },
            GlobalExpectation::NotGlobal,
        ),
    })
}

fn diag_d2() -> Result<Scenario, ScenarioError> {
    let mut exp = expected(
        Some(ParamVec::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]])),
        LocalExpectation::NotLocal,
        GlobalExpectation::NotGlobal,
    );
    exp.theta_tol = 1e-3;
    exp.per_layer = layers(LayerVerdict::Global, 0..2);
    Ok(Scenario {
        id: "DIAG_D2".into(),
        summary: "Depth-2 diagonal linear network with an unused coordinate; the limit is not a local optimum".into(),
        arch: ArchSpec::diagonal(2, 2, Activation::Linear)?,
        data: Dataset::positives(vec![vec![1.0, 2.0]])?,
        init: ParamVec::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]),
        losses: both_losses(),
        flow: FlowConfig::default(),
        kkt: KktTolerances::default(),
        preconditions: vec![Precondition::InitialLossBelowOne],
        witness: Some(WitnessFamily::DiagonalSpread),
        reference: ReferenceSpec::GroupNorm,
        probe: ProbeSettings::default(),
        expected: exp,
    })
}

fn noshare_nonzero_w() -> Result<Scenario, ScenarioError> {
    let mut exp = expected(
        Some(ParamVec::new(vec![vec![1.0, 1.0], vec![1.0, 1.0]])),
        LocalExpectation::LocalExpected,
        GlobalExpectation::GlobalExpected,
    );
    exp.per_layer = layers(LayerVerdict::Global, 0..2);
    exp.requires_nonzero_neurons = true;
    Ok(Scenario {
        id: "NOSHARE_NONZERO_W".into(),
        summary: "Depth-2 diagonal linear network whose limit keeps every neuron alive; the limit is a global optimum".into(),
        arch: ArchSpec::diagonal(2, 2, Activation::Linear)?,
        data: Dataset::positives(vec![vec![1.0, 0.0], vec![0.0, 1.0]])?,
        init: ParamVec::new(vec![vec![1.5, 1.0], vec![1.5, 1.0]]),
        losses: both_losses(),
        flow: FlowConfig::default(),
        kkt: KktTolerances::default(),
        preconditions: vec![Precondition::InitialLossBelowOne],
        witness: None,
        reference: ReferenceSpec::GroupNorm,
        probe: ProbeSettings::default(),
        expected: exp,
    })
}

fn fc_relu_4n() -> Result<Scenario, ScenarioError> {
    let dirs = [[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]];
    let unit: Vec<f64> = dirs.iter().flatten().copied().collect();
    let mut exp = expected(
        Some(ParamVec::new(vec![unit.clone(), vec![1.0; 4]])),
        LocalExpectation::NotLocal,
        GlobalExpectation::Unchecked,
    );
    exp.per_layer = layers(LayerVerdict::NotLocal, [0]);
    Ok(Scenario {
        id: "FC_RELU_4N".into(),
        summary: "Four-neuron ReLU network on the four axis directions; no neuron is zero, yet the limit is not a local optimum, even for the first layer alone".into(),
        arch: ArchSpec::fully_connected(&[2, 4, 1], Activation::Relu)?,
        data: Dataset::positives(dirs.iter().map(|d| d.to_vec()).collect())?,
        init: ParamVec::new(vec![unit.iter().map(|v| 2.0 * v).collect(), vec![2.0; 4]]),
        losses: both_losses(),
        flow: FlowConfig::default(),
        kkt: KktTolerances::default(),
        preconditions: vec![Precondition::InitialLossBelowOne],
        witness: Some(WitnessFamily::QuadrantTilt),
        reference: ReferenceSpec::None,
        probe: ProbeSettings::default(),
        expected: exp,
    })
}

fn relu_local_not_global() -> Result<Scenario, ScenarioError> {
    let mut exp = expected(
        Some(ParamVec::new(vec![vec![0.0, 2.0, 0.0, -1.0], vec![2.0, 1.0]])),
        LocalExpectation::LocalExpected,
        GlobalExpectation::NotGlobal,
    );
    exp.per_layer = layers(LayerVerdict::Local, 0..2);
    Ok(Scenario {
        id: "RELU_LOCAL_NOT_GLOBAL".into(),
        summary: "Two-neuron ReLU network with nonzero pre-activations everywhere; the limit is a local but not a global optimum".into(),
        arch: ArchSpec::fully_connected(&[2, 2, 1], Activation::Relu)?,
        data: Dataset::positives(vec![vec![1.0, 0.25], vec![-1.0, 0.25], vec![0.0, -1.0]])?,
        init: ParamVec::new(vec![vec![0.0, 3.0, 0.0, -2.0], vec![3.0, 2.0]]),
        losses: both_losses(),
        flow: FlowConfig::default(),
        kkt: KktTolerances::default(),
        preconditions: vec![Precondition::InitialLossBelowOne],
        witness: None,
        reference: ReferenceSpec::SplitNeurons,
        probe: ProbeSettings {
            eps: 0.05,
            budget: 10_000,
            seed: 7,
            ..ProbeSettings::default()
        },
        expected: exp,
    })
}

/// Both pre-activations stay positive along the flow, so the linear and ReLU versions share
/// their trajectory and limit. The witness margin is `1 + 3ε` for the linear network; with ReLU
/// the second patch switches off once `4√ε > (1−ε)/√2`, which only raises the margin.
fn conv_d2(id: &str, activation: Activation) -> Result<Scenario, ScenarioError> {
    let s = FRAC_1_SQRT_2;
    let mut exp = expected(
        Some(ParamVec::new(vec![vec![0.0, 1.0], vec![s, s]])),
        LocalExpectation::NotLocal,
        GlobalExpectation::Unchecked,
    );
    let (summary, layer_verdict) = match activation {
        Activation::Linear => (
            "Depth-2 linear network with one filter shared over two disjoint patches; both patches stay active, yet the limit is not a local optimum",
            LayerVerdict::Global,
        ),
        Activation::Relu => (
            "ReLU network with one filter shared over two disjoint patches; pre-activations are nonzero, each layer is locally optimal, the whole is not",
            LayerVerdict::Local,
        ),
    };
    exp.per_layer = layers(layer_verdict, 0..2);
    Ok(Scenario {
        id: id.into(),
        summary: summary.into(),
        arch: ArchSpec::patch_conv(4, 2, activation)?,
        data: Dataset::positives(vec![vec![4.0, s, -4.0, s]])?,
        init: ParamVec::new(vec![vec![0.0, 1.0], vec![s, s]]),
        losses: both_losses(),
        flow: FlowConfig::default(),
        kkt: KktTolerances::default(),
        preconditions: vec![Precondition::InitialLossBelowOne],
        witness: Some(WitnessFamily::PatchShift),
        reference: ReferenceSpec::None,
        probe: ProbeSettings::default(),
        expected: exp,
    })
}

fn diag_deep(id: &str, depth: usize) -> Result<Scenario, ScenarioError> {
    let c = 2f64.powf(-1.0 / depth as f64);
    let mut exp = expected(
        Some(ParamVec::new(vec![vec![c, c]; depth])),
        LocalExpectation::NotLocal,
        GlobalExpectation::Unchecked,
    );
    exp.per_layer = layers(LayerVerdict::Global, 0..depth);
    Ok(Scenario {
        id: id.into(),
        summary: format!(
            "Depth-{depth} diagonal linear network on x = (1,1); every layer is optimal on its own, the whole is not a local optimum"
        ),
        arch: ArchSpec::diagonal(2, depth, Activation::Linear)?,
        data: Dataset::positives(vec![vec![1.0, 1.0]])?,
        init: ParamVec::new(vec![vec![1.0, 1.0]; depth]),
        losses: both_losses(),
        flow: FlowConfig::default(),
        kkt: KktTolerances::default(),
        preconditions: vec![Precondition::InitialLossBelowOne],
        witness: Some(WitnessFamily::DeepSpread { depth }),
        reference: ReferenceSpec::None,
        probe: ProbeSettings::default(),
        expected: exp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub samples: u64,
    pub qualifying: u64,
    pub frequency: f64,
    pub seed: u64,
}

/// Draws `w₁, w₂, v` i.i.d. from `N(0, ½I)` and counts draws that fall into the live/dead
/// pattern of FC_RELU_D2 up to swapping the two neurons.
pub fn qualifying_init_frequency(samples: u64, seed: u64) -> MonteCarloReport {
    let data = [[1.0, 0.25], [-1.0, 0.25]];
    let normal = Normal::new(0.0, FRAC_1_SQRT_2).expect("valid deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut qualifying = 0;
    for _ in 0..samples {
        let draw: Vec<f64> = (0..6).map(|_| normal.sample(&mut rng)).collect();
        let w = [[draw[0], draw[1]], [draw[2], draw[3]]];
        let v = [draw[4], draw[5]];
        let sign = |j: usize, x: &[f64; 2]| w[j][0] * x[0] + w[j][1] * x[1];
        let ok = |live: usize, dead: usize| {
            v[live] > 0.0 && data.iter().all(|x| sign(live, x) > 0.0 && sign(dead, x) < 0.0)
        };
        if ok(0, 1) || ok(1, 0) {
            qualifying += 1;
        }
    }
    MonteCarloReport {
        samples,
        qualifying,
        frequency: if samples == 0 { 0.0 } else { qualifying as f64 / samples as f64 },
        seed,
    }
}
