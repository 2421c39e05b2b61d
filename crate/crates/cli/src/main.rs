//! `marginlab` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 load or parse failure, 3 flow direction not
//! converged, 4 verdict mismatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use marginlab::convexref::{self, ConvexError, GroupConfig};
use marginlab::flowsim;
use marginlab::kktcert::{self, KktTolerances};
use marginlab::netcore::{ArchSpec, Dataset, LossKind, ParamVec};
use marginlab::optprobe::{self, ProbeConfig, WitnessGenerator};
use marginlab::runner::{self, RunError, RunReport, TrajectorySummary};
use marginlab::scenarios::{self, Overrides, Scenario, ScenarioError};

#[derive(Parser)]
#[command(name = "marginlab", version, about = "Gradient-flow limits of homogeneous networks and their optimality")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the scenario catalog.
    List,
    /// Run the full pipeline on a catalog id or a scenario JSON file.
    Run(RunArgs),
    /// Integrate the flow only.
    Flow(RunArgs),
    /// Certify a parameter vector (JSON) against a scenario's network and data.
    Kkt(KktArgs),
    /// Search the ε-ball around a point for a feasible point of smaller norm.
    Probe(ProbeArgs),
    /// Solve a convex reference problem on a dataset file.
    Solve(SolveArgs),
    /// Summarize run reports (files, catalog ids, or `all`) as one CSV table.
    Report(ReportArgs),
}

#[derive(Args, Clone, Default)]
struct Settings {
    /// Loss kind: exp or log. Defaults to every loss the scenario lists.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Probe radius.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, env = "MARGINLAB_SEED")]
    seed: Option<u64>,
    /// Number of random probe samples.
    #[arg(long)]
    budget: Option<u64>,
    /// Relative stationarity tolerance of the KKT certificate.
    #[arg(long = "tol-stat")]
    tol_stat: Option<f64>,
    /// Arc-length budget of the flow.
    #[arg(long = "s-budget")]
    s_budget: Option<f64>,
}

impl Settings {
    fn overrides(&self) -> Overrides {
        Overrides {
            probe_eps: self.eps,
            budget: self.budget,
            seed: self.seed,
            s_budget: self.s_budget,
            loss: self.loss,
            tol_stat: self.tol_stat,
            ..Overrides::default()
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Catalog id or path to a scenario JSON file.
    scenario: String,
    #[command(flatten)]
    settings: Settings,
    /// Directory for the JSON report (and CSV trajectories with --csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write trajectories as CSV.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct KktArgs {
    #[arg(long)]
    scenario: String,
    /// Parameter vector as nested per-layer arrays.
    #[arg(long)]
    theta: PathBuf,
    #[arg(long = "tol-stat")]
    tol_stat: Option<f64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    scenario: String,
    /// Point to probe; defaults to the scenario's expected limit.
    #[arg(long)]
    theta: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Clone, Copy, ValueEnum)]
enum Problem {
    /// ℓ2 max-margin linear predictor.
    Linear,
    /// ℓ1 max-margin linear predictor.
    L1,
    /// Group-norm problem of a depth-2 no-share network (needs --arch).
    Group,
    /// One layer with the others frozen (needs --arch, --theta, --layer).
    Layer,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_enum)]
    problem: Problem,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    theta: Option<PathBuf>,
    /// 0-based parameter layer.
    #[arg(long)]
    layer: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// RunReport JSON files, catalog ids, or `all`.
    #[arg(required = true)]
    inputs: Vec<String>,
    #[command(flatten)]
    settings: Settings,
    /// Directory receiving one JSON report per executed scenario.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Runtime(String),
    Load(String),
    NotConverged(String),
    Mismatch(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Load(_) => 2,
            Failure::NotConverged(_) => 3,
            Failure::Mismatch(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Runtime(m) | Failure::Load(m) | Failure::NotConverged(m) | Failure::Mismatch(m) => m,
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Load(e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Scenario(e) => Failure::Load(e.to_string()),
            RunError::Flow(e) => Failure::NotConverged(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::List => list(),
        Command::Run(args) => run(args),
        Command::Flow(args) => flow(args),
        Command::Kkt(args) => kkt(args),
        Command::Probe(args) => probe(args),
        Command::Solve(args) => solve(args),
        Command::Report(args) => report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("marginlab: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Load(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Failure::Load(format!("{}: at `{field}`: {}", path.display(), e.into_inner()))
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    println!("{text}");
    Ok(())
}

/// Writes through a sibling temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path)).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_scenario(arg: &str, overrides: &Overrides) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    if !path.is_file() {
        return Ok(scenarios::build(arg, overrides)?);
    }
    let text = fs::read_to_string(path).map_err(|e| Failure::Load(format!("{arg}: {e}")))?;
    let mut s = Scenario::from_json(&text).map_err(|e| Failure::Load(format!("{arg}: {e}")))?;
    overrides.apply(&mut s)?;
    s.validate()?;
    Ok(s)
}

fn list() -> Result<(), Failure> {
    for id in scenarios::catalog() {
        let s = scenarios::build(id, &Overrides::default())?;
        println!("{id:<22} {}", s.summary);
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let s = load_scenario(&args.scenario, &args.settings.overrides())?;
    let (report, trajectories) = runner::run_with_trajectories(&s)?;
    let out = args.out.clone().or_else(|| args.csv.then(|| PathBuf::from(".")));
    if let Some(dir) = &out {
        ensure_dir(dir)?;
        if args.csv {
            for (r, traj) in report.runs.iter().zip(&trajectories) {
                let mut buf = Vec::new();
                flowsim::write_csv(traj, &mut buf).map_err(runtime)?;
                write_atomic(&dir.join(format!("{}_{}.csv", s.id, r.loss.label())), &buf)?;
            }
        }
    }
    match &args.out {
        Some(dir) => {
            let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
            write_atomic(&dir.join(format!("{}.json", s.id)), text.as_bytes())?;
            println!("{} {}", s.id, if report.pass { "PASS" } else { "FAIL" });
        }
        None => print_json(&report)?,
    }
    verdict(&report)
}

fn verdict(report: &RunReport) -> Result<(), Failure> {
    if !report.converged() {
        return Err(Failure::NotConverged(format!("{}: flow direction did not converge", report.scenario)));
    }
    if !report.pass {
        let failed: Vec<String> = report
            .runs
            .iter()
            .flat_map(|r| r.checks.iter().filter(|c| !c.pass).map(move |c| format!("{}:{}", r.loss.label(), c.name)))
            .collect();
        return Err(Failure::Mismatch(format!("{}: failed checks {}", report.scenario, failed.join(", "))));
    }
    Ok(())
}

#[derive(Serialize)]
struct FlowSummary {
    scenario: String,
    loss: LossKind,
    trajectory: TrajectorySummary,
    direction_converged: bool,
    direction: Option<ParamVec>,
}

fn flow(args: RunArgs) -> Result<(), Failure> {
    let s = load_scenario(&args.scenario, &args.settings.overrides())?;
    let mut converged = true;
    let mut summaries = Vec::new();
    for &loss in &s.losses {
        let traj = runner::integrate_scenario(&s, loss)?;
        let limit = flowsim::direction_limit(&traj, s.flow.window, s.flow.direction_tolerance);
        converged &= limit.is_ok();
        if args.csv {
            let mut buf = Vec::new();
            flowsim::write_csv(&traj, &mut buf).map_err(runtime)?;
            match &args.out {
                Some(dir) => {
                    ensure_dir(dir)?;
                    write_atomic(&dir.join(format!("{}_{}.csv", s.id, loss.label())), &buf)?;
                }
                None => std::io::stdout().write_all(&buf).map_err(runtime)?,
            }
        }
        summaries.push(FlowSummary {
            scenario: s.id.clone(),
            loss,
            trajectory: TrajectorySummary::new(&traj),
            direction_converged: limit.is_ok(),
            direction: limit.ok(),
        });
    }
    if !args.csv || args.out.is_some() {
        print_json(&summaries)?;
    }
    if !converged {
        return Err(Failure::NotConverged(format!("{}: flow direction did not converge", s.id)));
    }
    Ok(())
}

fn kkt(args: KktArgs) -> Result<(), Failure> {
    let s = load_scenario(&args.scenario, &Overrides::default())?;
    let theta: ParamVec = read_json(&args.theta)?;
    theta.check_shape(&s.arch).map_err(|e| Failure::Load(format!("{}: {e}", args.theta.display())))?;
    let tol = KktTolerances {
        stat: args.tol_stat.unwrap_or(s.kkt.stat),
        ..s.kkt
    };
    let cert = kktcert::certify_direction(&s.arch, &theta, &s.data, &tol).map_err(runtime)?;
    print_json(&cert)
}

fn probe(args: ProbeArgs) -> Result<(), Failure> {
    let s = load_scenario(&args.scenario, &args.settings.overrides())?;
    let theta = match &args.theta {
        Some(path) => {
            let theta: ParamVec = read_json(path)?;
            theta.check_shape(&s.arch).map_err(|e| Failure::Load(format!("{}: {e}", path.display())))?;
            kktcert::rescale_to_unit_margin(&s.arch, &theta, &s.data).map_err(runtime)?.theta
        }
        None => s
            .expected
            .theta
            .clone()
            .ok_or_else(|| Failure::Load(format!("{} has no expected limit; pass --theta", s.id)))?,
    };
    let generators: Vec<&dyn WitnessGenerator> = s.witness.iter().map(|f| f as &dyn WitnessGenerator).collect();
    let config = ProbeConfig::new(s.probe.eps, s.probe.budget, s.probe.seed);
    let report = optprobe::local_probe(&s.arch, &theta, &s.data, &config, &generators).map_err(runtime)?;
    print_json(&report)
}

#[derive(Serialize)]
struct Infeasible {
    status: &'static str,
    certificate: Vec<f64>,
}

fn solve(args: SolveArgs) -> Result<(), Failure> {
    let data: Dataset = read_json(&args.data)?;
    let arch = || -> Result<ArchSpec, Failure> {
        let path = args.arch.as_ref().ok_or_else(|| Failure::Load("--arch is required for this problem".into()))?;
        read_json(path)
    };
    let result = match args.problem {
        Problem::Linear => convexref::solve_linear_maxmargin(&data).map(|s| serde_json::to_value(s)),
        Problem::L1 => convexref::solve_l1_maxmargin(&data).map(|s| serde_json::to_value(s)),
        Problem::Group => {
            let arch = arch()?;
            let labels: Vec<f64> = data.iter().map(|e| e.y).collect();
            convexref::neuron_groups(&arch, &data, None)
                .and_then(|g| convexref::solve_group_maxmargin(&g, &labels, &GroupConfig::default()))
                .map(|s| serde_json::to_value(s))
        }
        Problem::Layer => {
            let arch = arch()?;
            let path = args.theta.as_ref().ok_or_else(|| Failure::Load("--theta is required for --problem layer".into()))?;
            let theta: ParamVec = read_json(path)?;
            let layer = args.layer.ok_or_else(|| Failure::Load("--layer is required for --problem layer".into()))?;
            convexref::solve_per_layer_qp(&arch, &theta, layer, &data).map(|s| serde_json::to_value(s))
        }
    };
    match result {
        Ok(value) => print_json(&value.map_err(runtime)?),
        Err(ConvexError::Infeasible { certificate }) => print_json(&Infeasible {
            status: "infeasible",
            certificate,
        }),
        Err(e) => Err(runtime(e)),
    }
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let mut loaded = Vec::new();
    let mut ids = Vec::new();
    for input in &args.inputs {
        if Path::new(input).is_file() {
            loaded.push(read_json::<RunReport>(Path::new(input))?);
        } else if input == "all" {
            ids.extend(scenarios::catalog().into_iter().map(String::from));
        } else {
            ids.push(input.clone());
        }
    }
    let overrides = args.settings.overrides();
    let scenarios: Vec<Scenario> = ids.iter().map(|id| load_scenario(id, &overrides)).collect::<Result<_, _>>()?;
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
    }
    let executed: Vec<RunReport> = scenarios
        .par_iter()
        .map(|s| {
            let report = runner::run(s)?;
            if let Some(dir) = &args.out {
                let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
                write_atomic(&dir.join(format!("{}.json", s.id)), text.as_bytes())?;
            }
            Ok(report)
        })
        .collect::<Result<_, Failure>>()?;
    loaded.extend(executed);
    let mut buf = Vec::new();
    runner::summary_csv(&loaded, &mut buf).map_err(runtime)?;
    std::io::stdout().write_all(&buf).map_err(runtime)
}
