//! Gradient-flow integration to directional convergence.
//!
//! The default mode follows the unit-speed path `dθ/ds = −∇L/‖∇L‖`, which traces the same
//! curve as `dθ/dt = −∇L` but with arc length as the clock. The direction is assembled from
//! loss-derivative weights normalized in log space, so it stays well defined after the loss
//! itself has underflowed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{
    self, Activation, ArchSpec, Dataset, LossKind, NetError, NeuronLink, ParamVec, ZERO_PREACTIVATION_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reparam {
    /// `dθ/ds = −∇L/‖∇L‖`.
    UnitSpeed,
    /// `dθ/dt = −∇L`.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub loss: LossKind,
    pub mode: Reparam,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub s_budget: f64,
    pub loss_target: f64,
    pub direction_tolerance: f64,
    pub window: usize,
    pub checkpoint_stride: f64,
    pub initial_step: f64,
    /// Stop as soon as the loss reaches this value, locating the crossing inside the last step.
    pub stop_at_loss: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Exponential,
            mode: Reparam::UnitSpeed,
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            s_budget: 1e4,
            loss_target: 1e-10,
            direction_tolerance: 1e-6,
            window: 10,
            checkpoint_stride: 1.0,
            initial_step: 1e-3,
            stop_at_loss: None,
        }
    }
}

impl FlowConfig {
    pub fn with_loss(loss: LossKind) -> Self {
        Self {
            loss,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let positive = [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("s_budget", self.s_budget),
            ("loss_target", self.loss_target),
            ("direction_tolerance", self.direction_tolerance),
            ("checkpoint_stride", self.checkpoint_stride),
            ("initial_step", self.initial_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FlowError::InvalidConfig(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.window < 2 {
            return Err(FlowError::InvalidConfig("window must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub s: f64,
    pub params: ParamVec,
    pub loss: f64,
    pub norm: f64,
    pub margins: Vec<f64>,
    /// `‖u^(j)‖² − ‖u^(j+1)‖²` for each adjacent layer pair.
    pub layer_balance: Vec<f64>,
    /// Squared incoming minus squared outgoing norm for each hidden neuron, when the
    /// neuron-wise law applies.
    pub neuron_balance: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn direction(&self) -> Option<ParamVec> {
        self.params.normalized()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    BudgetExhausted,
    LossReached,
    Stalled,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub checkpoints: Vec<Checkpoint>,
    pub stop: StopReason,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub kink_rejections: usize,
}

impl Trajectory {
    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn first(&self) -> Option<&Checkpoint> {
        self.checkpoints.first()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("integration produced non-finite values at s = {s}")]
    DivergedNumerically { s: f64, trajectory: Box<Trajectory> },
    #[error("gradient vanished at s = {s}: the flow is stalled at a critical point")]
    StalledAtCriticalPoint { s: f64, trajectory: Box<Trajectory> },
    #[error("trajectory has no checkpoints")]
    EmptyTrajectory,
    #[error("direction not converged: deviation {deviation:.3e} over the last {window} checkpoints")]
    NotConverged { deviation: f64, window: usize },
}

/// Gradient norms below this are treated as an exact critical point.
const STALL_NORM: f64 = 1e-300;

enum FieldFailure {
    NonFinite,
    Stalled,
}

struct Problem<'a> {
    arch: &'a ArchSpec,
    data: &'a Dataset,
    config: &'a FlowConfig,
    links: Option<Vec<NeuronLink>>,
}

impl Problem<'_> {
    fn params(&self, flat: &[f64]) -> ParamVec {
        ParamVec::from_flat(self.arch, flat).expect("state length matches the architecture")
    }

    /// Velocity of the configured reparameterization at `flat`.
    fn field(&self, flat: &[f64]) -> Result<Vec<f64>, FieldFailure> {
        let theta = self.params(flat);
        let mut logw = Vec::with_capacity(self.data.len());
        let mut grads = Vec::with_capacity(self.data.len());
        for ex in self.data.iter() {
            let (f, g) = netcore::value_and_grad(self.arch, &theta, &ex.x).expect("validated shapes");
            let q = ex.y * f;
            if !q.is_finite() {
                return Err(FieldFailure::NonFinite);
            }
            logw.push(self.config.loss.log_neg_derivative(q));
            grads.push((ex.y, g));
        }
        let shift = match self.config.mode {
            Reparam::UnitSpeed => logw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Reparam::Raw => 0.0,
        };
        let mut v = vec![0.0; flat.len()];
        for (lw, (y, g)) in logw.iter().zip(&grads) {
            let c = (lw - shift).exp() * y;
            for (vi, gi) in v.iter_mut().zip(g.iter()) {
                *vi += c * gi;
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !n.is_finite() {
            return Err(FieldFailure::NonFinite);
        }
        if n < STALL_NORM {
            return Err(FieldFailure::Stalled);
        }
        if self.config.mode == Reparam::UnitSpeed {
            v.iter_mut().for_each(|a| *a /= n);
        }
        Ok(v)
    }

    /// Increment of one classical RK4 step of size `h`.
    fn rk4_increment(&self, y: &[f64], h: f64) -> Result<Vec<f64>, FieldFailure> {
        let shifted = |k: &[f64], c: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + c * b).collect() };
        let k1 = self.field(y)?;
        let k2 = self.field(&shifted(&k1, h / 2.0))?;
        let k3 = self.field(&shifted(&k2, h / 2.0))?;
        let k4 = self.field(&shifted(&k3, h))?;
        Ok((0..y.len())
            .map(|i| h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect())
    }

    /// One step by two half steps, with the full step as error reference.
    fn double_step(&self, y: &[f64], h: f64) -> Result<(Vec<f64>, f64), FieldFailure> {
        let full = self.rk4_increment(y, h)?;
        let d1 = self.rk4_increment(y, h / 2.0)?;
        let mid: Vec<f64> = y.iter().zip(&d1).map(|(a, b)| a + b).collect();
        let d2 = self.rk4_increment(&mid, h / 2.0)?;
        let incr: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| a + b).collect();
        if incr.iter().any(|v| !v.is_finite()) {
            return Err(FieldFailure::NonFinite);
        }
        let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let tol = self.config.abs_tol + self.config.rel_tol * scale;
        let err = incr
            .iter()
            .zip(&full)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / 15.0;
        Ok((incr, err / tol))
    }

    fn checkpoint(&self, s: f64, flat: &[f64]) -> Checkpoint {
        let params = self.params(flat);
        let margins = netcore::margins(self.arch, &params, self.data).expect("validated shapes");
        let loss = margins.iter().map(|&q| self.config.loss.value(q)).sum();
        let layer_balance = (0..params.depth() - 1)
            .map(|j| params.layer_norm_sq(j) - params.layer_norm_sq(j + 1))
            .collect();
        let neuron_balance = self.links.as_ref().map(|links| neuron_balance(&params, links));
        Checkpoint {
            s,
            norm: params.norm(),
            params,
            loss,
            margins,
            layer_balance,
            neuron_balance,
        }
    }

    /// Strict sign crossings (+ to − or − to +) of any hidden pre-activation.
    fn crosses_kink(&self, a: &[f64], b: &[f64]) -> bool {
        if self.arch.activation() != Activation::Relu {
            return false;
        }
        let pa = netcore::activation_pattern(self.arch, &self.params(a), self.data, ZERO_PREACTIVATION_TOL);
        let pb = netcore::activation_pattern(self.arch, &self.params(b), self.data, ZERO_PREACTIVATION_TOL);
        match (pa, pb) {
            (Ok(pa), Ok(pb)) => pa
                .signs
                .iter()
                .flatten()
                .flatten()
                .zip(pb.signs.iter().flatten().flatten())
                .any(|(x, y)| x * y < 0),
            _ => false,
        }
    }
}

/// Hidden neurons for which the neuron-wise balance law holds: fully-connected networks of any
/// depth and depth-2 networks without shared weights.
pub fn balanced_neurons(arch: &ArchSpec) -> Option<Vec<NeuronLink>> {
    (arch.no_share() && (arch.is_fully_connected() || arch.depth() == 2)).then(|| arch.neuron_links())
}

fn neuron_balance(params: &ParamVec, links: &[NeuronLink]) -> Vec<f64> {
    links
        .iter()
        .map(|n| {
            let inc: f64 = n.incoming.iter().map(|&k| params.layer(n.layer)[k].powi(2)).sum();
            let out: f64 = n.outgoing.iter().map(|&k| params.layer(n.layer + 1)[k].powi(2)).sum();
            inc - out
        })
        .collect()
}

/// Compensated accumulation `hi + lo += d`, so that long runs do not lose the small
/// increments against large parameter magnitudes.
fn compensated_add(hi: &mut [f64], lo: &mut [f64], d: &[f64]) {
    for i in 0..hi.len() {
        let y = d[i] - lo[i];
        let t = hi[i] + y;
        lo[i] = (t - hi[i]) - y;
        hi[i] = t;
    }
}

fn window_deviation(checkpoints: &[Checkpoint]) -> f64 {
    let dirs: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|c| c.direction().map(|d| d.flat()).unwrap_or_else(|| vec![0.0; c.params.len()]))
        .collect();
    let mut worst: f64 = 0.0;
    for a in 0..dirs.len() {
        for b in a + 1..dirs.len() {
            let d = dirs[a]
                .iter()
                .zip(&dirs[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(d);
        }
    }
    worst
}

/// Integrates the flow from `params0` until the loss target is met with a stable direction,
/// the budget runs out, or `stop_at_loss` is reached.
pub fn integrate(
    arch: &ArchSpec,
    params0: &ParamVec,
    data: &Dataset,
    config: &FlowConfig,
) -> Result<Trajectory, FlowError> {
    config.validate()?;
    params0.check_shape(arch)?;
    if data.dim() != arch.input_dim() {
        return Err(NetError::DimensionMismatch {
            expected: arch.input_dim(),
            got: data.dim(),
        }
        .into());
    }
    let problem = Problem {
        arch,
        data,
        config,
        links: balanced_neurons(arch),
    };
    let mut traj = Trajectory {
        checkpoints: Vec::new(),
        stop: StopReason::BudgetExhausted,
        accepted_steps: 0,
        rejected_steps: 0,
        kink_rejections: 0,
    };
    let mut y = params0.flat();
    let mut lo = vec![0.0; y.len()];
    let mut s = 0.0;
    let mut h = config.initial_step;
    let mut next_cp = config.checkpoint_stride;
    traj.checkpoints.push(problem.checkpoint(0.0, &y));
    if let Some(target) = config.stop_at_loss {
        if traj.checkpoints[0].loss <= target {
            traj.stop = StopReason::LossReached;
            return Ok(traj);
        }
    }

    loop {
        if s >= config.s_budget * (1.0 - 1e-15) {
            traj.stop = StopReason::BudgetExhausted;
            return Ok(traj);
        }
        if let Err(failure) = problem.field(&y) {
            return Err(terminal(failure, s, &problem, &y, traj));
        }
        let room = (next_cp - s).min(config.s_budget - s);
        let step = h.min(room);
        let min_step = 1e-12 * (1.0 + s);
        let (incr, err) = match problem.double_step(&y, step) {
            Ok(r) => r,
            Err(failure) => {
                if step > min_step {
                    h = step / 4.0;
                    traj.rejected_steps += 1;
                    continue;
                }
                return Err(terminal(failure, s, &problem, &y, traj));
            }
        };
        if err > 1.0 && step > min_step {
            h = step * (0.9 * err.powf(-0.2)).max(0.1);
            traj.rejected_steps += 1;
            continue;
        }
        let mut y_new = y.clone();
        let mut lo_new = lo.clone();
        compensated_add(&mut y_new, &mut lo_new, &incr);
        let kink_floor = 1e-9 * (1.0 + s);
        if step > kink_floor && problem.crosses_kink(&y, &y_new) {
            h = step / 2.0;
            traj.kink_rejections += 1;
            continue;
        }

        if let Some(target) = config.stop_at_loss {
            let cp = problem.checkpoint(s + step, &y_new);
            if cp.loss <= target {
                let (s_hit, y_hit) = locate_loss(&problem, &y, s, step, target);
                traj.accepted_steps += 1;
                traj.checkpoints.push(problem.checkpoint(s_hit, &y_hit));
                traj.stop = StopReason::LossReached;
                return Ok(traj);
            }
        }

        y = y_new;
        lo = lo_new;
        s += step;
        traj.accepted_steps += 1;
        let grow = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 4.0 };
        let proposal = step * grow.clamp(0.2, 4.0);
        // A step clipped to land on a checkpoint says nothing against the previous proposal.
        h = if step < h { proposal.max(h) } else { proposal };

        if s >= next_cp * (1.0 - 1e-14) {
            s = s.max(next_cp);
            next_cp += config.checkpoint_stride;
            let cp = problem.checkpoint(s, &y);
            traj.checkpoints.push(cp);
            let n = traj.checkpoints.len();
            if n >= config.window && traj.checkpoints[n - 1].loss <= config.loss_target {
                let dev = window_deviation(&traj.checkpoints[n - config.window..]);
                if dev <= config.direction_tolerance {
                    traj.stop = StopReason::Converged;
                    return Ok(traj);
                }
            }
        }
    }
}

fn terminal(failure: FieldFailure, s: f64, problem: &Problem, y: &[f64], mut traj: Trajectory) -> FlowError {
    if traj.last().map_or(true, |c| c.s < s) {
        traj.checkpoints.push(problem.checkpoint(s, y));
    }
    match failure {
        FieldFailure::Stalled => {
            traj.stop = StopReason::Stalled;
            FlowError::StalledAtCriticalPoint {
                s,
                trajectory: Box::new(traj),
            }
        }
        FieldFailure::NonFinite => {
            traj.stop = StopReason::Diverged;
            FlowError::DivergedNumerically {
                s,
                trajectory: Box::new(traj),
            }
        }
    }
}

/// Bisects the step length so that the loss lands on `target`.
fn locate_loss(problem: &Problem, y: &[f64], s: f64, step: f64, target: f64) -> (f64, Vec<f64>) {
    let advance = |h: f64| -> Vec<f64> {
        let mut hi = y.to_vec();
        let mut lo = vec![0.0; y.len()];
        if let Ok((incr, _)) = problem.double_step(y, h) {
            compensated_add(&mut hi, &mut lo, &incr);
        }
        hi
    };
    let loss_at = |flat: &[f64]| problem.checkpoint(0.0, flat).loss;
    let (mut a, mut b) = (0.0, step);
    let mut best = advance(b);
    for _ in 0..80 {
        let mid = 0.5 * (a + b);
        let cand = advance(mid);
        let l = loss_at(&cand);
        if l <= target {
            b = mid;
            best = cand;
        } else {
            a = mid;
        }
        if (l - target).abs() <= 1e-15 * target || b - a <= 1e-16 * step {
            break;
        }
    }
    (s + b, best)
}

/// Final unit direction when the last `window` checkpoints agree to `tolerance`.
pub fn direction_limit(traj: &Trajectory, window: usize, tolerance: f64) -> Result<ParamVec, FlowError> {
    let last = traj.last().ok_or(FlowError::EmptyTrajectory)?;
    let n = traj.checkpoints.len();
    if n < window.max(2) {
        return Err(FlowError::NotConverged {
            deviation: f64::INFINITY,
            window,
        });
    }
    let deviation = window_deviation(&traj.checkpoints[n - window..]);
    if deviation > tolerance {
        return Err(FlowError::NotConverged { deviation, window });
    }
    last.direction().ok_or(FlowError::NotConverged { deviation, window })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    /// Per adjacent layer pair, largest drift of `‖u^(j)‖² − ‖u^(j+1)‖²` from its initial value.
    pub layer_drift: Vec<f64>,
    /// Per hidden neuron, largest drift of squared in-norm minus squared out-norm.
    pub neuron_drift: Option<Vec<f64>>,
    /// Per hidden neuron at the unit-margin rescaling of the final state, `|‖in‖ − ‖out‖|`.
    pub limit_gap: Option<Vec<f64>>,
}

impl BalanceReport {
    pub fn max_layer_drift(&self) -> f64 {
        self.layer_drift.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_neuron_drift(&self) -> f64 {
        self.neuron_drift.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn max_limit_gap(&self) -> f64 {
        self.limit_gap.iter().flatten().copied().fold(0.0, f64::max)
    }
}

pub fn balance_report(traj: &Trajectory, arch: &ArchSpec) -> Result<BalanceReport, FlowError> {
    let first = traj.first().ok_or(FlowError::EmptyTrajectory)?;
    let last = traj.last().ok_or(FlowError::EmptyTrajectory)?;
    let mut layer_drift = vec![0.0f64; first.layer_balance.len()];
    let mut neuron_drift = first.neuron_balance.as_ref().map(|v| vec![0.0f64; v.len()]);
    for cp in &traj.checkpoints {
        for (d, (a, b)) in layer_drift.iter_mut().zip(cp.layer_balance.iter().zip(&first.layer_balance)) {
            *d = d.max((a - b).abs());
        }
        if let (Some(drift), Some(now), Some(start)) =
            (neuron_drift.as_mut(), cp.neuron_balance.as_ref(), first.neuron_balance.as_ref())
        {
            for (d, (a, b)) in drift.iter_mut().zip(now.iter().zip(start)) {
                *d = d.max((a - b).abs());
            }
        }
    }
    let limit_gap = balanced_neurons(arch).map(|links| {
        let m = last.min_margin();
        let scaled = if m > 0.0 {
            last.params.scaled(m.powf(-1.0 / arch.depth() as f64))
        } else {
            last.direction().unwrap_or_else(|| last.params.clone())
        };
        links
            .iter()
            .map(|n| {
                let inc: f64 = n.incoming.iter().map(|&k| scaled.layer(n.layer)[k].powi(2)).sum();
                let out: f64 = n.outgoing.iter().map(|&k| scaled.layer(n.layer + 1)[k].powi(2)).sum();
                (inc.sqrt() - out.sqrt()).abs()
            })
            .collect()
    });
    Ok(BalanceReport {
        layer_drift,
        neuron_drift,
        limit_gap,
    })
}

/// Writes the trajectory as CSV: `s, loss, norm, min_margin, dir_*`, then the absolute drift of
/// every balance quantity from its initial value. Numbers use 17 significant digits.
pub fn write_csv<W: std::io::Write>(traj: &Trajectory, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = traj.first() else {
        w.flush()?;
        return Ok(());
    };
    let mut header: Vec<String> = ["s", "loss", "norm", "min_margin"].iter().map(|s| s.to_string()).collect();
    header.extend((0..first.params.len()).map(|i| format!("dir_{i}")));
    header.extend((0..first.layer_balance.len()).map(|j| format!("balance_layer_{}", j + 1)));
    if let Some(nb) = &first.neuron_balance {
        header.extend((0..nb.len()).map(|j| format!("balance_neuron_{}", j + 1)));
    }
    w.write_record(&header)?;
    let fmt = |v: f64| format!("{v:.16e}");
    for cp in &traj.checkpoints {
        let mut row = vec![fmt(cp.s), fmt(cp.loss), fmt(cp.norm), fmt(cp.min_margin())];
        let dir = cp.direction().map(|d| d.flat()).unwrap_or_else(|| vec![0.0; cp.params.len()]);
        row.extend(dir.into_iter().map(fmt));
        row.extend(cp.layer_balance.iter().zip(&first.layer_balance).map(|(a, b)| fmt((a - b).abs())));
        if let (Some(now), Some(start)) = (&cp.neuron_balance, &first.neuron_balance) {
            row.extend(now.iter().zip(start).map(|(a, b)| fmt((a - b).abs())));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Example;

    fn diag_d2() -> (ArchSpec, Dataset, ParamVec) {
        let arch = ArchSpec::diagonal(2, 2, Activation::Linear).unwrap();
        let data = Dataset::positives(vec![vec![1.0, 2.0]]).unwrap();
        let init = ParamVec::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        (arch, data, init)
    }

    #[test]
    fn diagonal_flow_reaches_target_direction() {
        let (arch, data, init) = diag_d2();
        let traj = integrate(&arch, &init, &data, &FlowConfig::default()).unwrap();
        assert_eq!(traj.stop, StopReason::Converged);
        assert!(traj.last().unwrap().loss <= 1e-10);
        let dir = direction_limit(&traj, 10, 1e-6).unwrap();
        let expected = ParamVec::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).scaled(0.5f64.sqrt());
        assert!(dir.max_abs_diff(&expected) <= 1e-3);
        let s: Vec<f64> = traj.checkpoints.iter().map(|c| c.s).collect();
        assert!(s.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_relu_init_stalls() {
        let arch = ArchSpec::diagonal(2, 2, Activation::Relu).unwrap();
        let data = Dataset::positives(vec![vec![1.0, 2.0]]).unwrap();
        let err = integrate(&arch, &ParamVec::zeros(&arch), &data, &FlowConfig::default()).unwrap_err();
        let FlowError::StalledAtCriticalPoint { trajectory, .. } = err else {
            panic!("expected a stall, got {err:?}");
        };
        let report = balance_report(&trajectory, &arch).unwrap();
        assert!(report.layer_drift.iter().all(|&d| d == 0.0));
        assert!(report.neuron_drift.unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn short_trajectory_is_not_converged() {
        let (arch, data, init) = diag_d2();
        let config = FlowConfig {
            s_budget: 0.5,
            ..FlowConfig::default()
        };
        let traj = integrate(&arch, &init, &data, &config).unwrap();
        assert_eq!(traj.stop, StopReason::BudgetExhausted);
        assert!(matches!(direction_limit(&traj, 10, 1e-6), Err(FlowError::NotConverged { .. })));
        let empty = Trajectory {
            checkpoints: vec![],
            ..traj
        };
        assert_eq!(direction_limit(&empty, 10, 1e-6), Err(FlowError::EmptyTrajectory));
    }

    #[test]
    fn loss_non_increasing_and_conserved() {
        let (arch, data, init) = diag_d2();
        let traj = integrate(&arch, &init, &data, &FlowConfig::with_loss(LossKind::Logistic)).unwrap();
        assert!(traj.checkpoints.windows(2).all(|w| w[1].loss <= w[0].loss + 1e-9));
        let report = balance_report(&traj, &arch).unwrap();
        assert!(report.max_layer_drift() <= 1e-6, "{report:?}");
        assert!(report.max_neuron_drift() <= 1e-6, "{report:?}");
    }

    #[test]
    fn path_matches_raw_flow_at_equal_loss() {
        let arch = ArchSpec::fully_connected(&[2, 2, 1], Activation::Linear).unwrap();
        let data = Dataset::new(vec![
            Example::new(vec![1.0, 0.3], 1.0),
            Example::new(vec![-0.4, 1.0], -1.0),
        ])
        .unwrap();
        let init = ParamVec::new(vec![vec![0.3, -0.2, 0.1, 0.4], vec![0.5, -0.3]]);
        let base = FlowConfig {
            rel_tol: 1e-11,
            abs_tol: 1e-14,
            stop_at_loss: Some(0.5),
            ..FlowConfig::default()
        };
        let unit = integrate(&arch, &init, &data, &base).unwrap();
        let raw = integrate(&arch, &init, &data, &FlowConfig { mode: Reparam::Raw, ..base.clone() }).unwrap();
        assert_eq!(unit.stop, StopReason::LossReached);
        assert_eq!(raw.stop, StopReason::LossReached);
        let a = unit.last().unwrap().direction().unwrap();
        let b = raw.last().unwrap().direction().unwrap();
        assert!(a.distance(&b) <= 1e-6, "{}", a.distance(&b));
    }

    #[test]
    fn csv_has_expected_columns() {
        let (arch, data, init) = diag_d2();
        let traj = integrate(&arch, &init, &data, &FlowConfig { s_budget: 3.0, ..FlowConfig::default() }).unwrap();
        let mut buf = Vec::new();
        write_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "s,loss,norm,min_margin,dir_0,dir_1,dir_2,dir_3,balance_layer_1,balance_neuron_1,balance_neuron_2"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "0.0000000000000000e0");
        assert_eq!(text.lines().count(), traj.checkpoints.len() + 1);
    }

    #[test]
    fn rejects_bad_config() {
        let (arch, data, init) = diag_d2();
        let config = FlowConfig {
            rel_tol: -1.0,
            ..FlowConfig::default()
        };
        assert!(matches!(integrate(&arch, &init, &data, &config), Err(FlowError::InvalidConfig(_))));
    }
}
