//! Subcommand dispatch and exit-code mapping.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use thiserror::Error;

use potflow::{
    analyze, branch_and_bound, build_spanning_tree, check_feasibility, edge_capacity, minimize_continuous,
    solve_with_realizability, tighten_potential_intervals, BnbOptions, BoxAxis, Bounds, ContinuousError,
    ContinuousProblem, Control, ControlKind, IndependentVariables, MonteCarloSpec, Network, NetworkState,
    ParameterSpec, ParameterTarget, RealizeOptions, SearchOptions, SolveError, SolverOptions, StabilityError,
    StabilityProblem, SteadyStateSolver, TreeDecomposition, VariableKind,
};

use crate::document::{
    load_network, load_scenario, ControlKindDoc, InputError, ParameterKindDoc, Range, ScenarioDocument,
};
use crate::report::{
    render, write_report, CapacityReport, CapacityRow, Counters, EdgeRow, Format, IntervalDoc, IntervalRow,
    MonteCarloDocOut, NodeRow, OptimizeReport, ParameterRow, Report, SimulateReport, StabilityReportDoc, StateDoc,
    TightenReport, VariableRow, ViolationRow,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;
pub const EXIT_INPUT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "potflow", version, about = "Steady-state potential-flow networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Network document.
    #[arg(long)]
    net: PathBuf,
    /// Scenario document.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Report file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Reject unknown fields instead of warning.
    #[arg(long)]
    strict: bool,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the branch-and-bound fragment budget.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Bnb,
    Dominant,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Steady state at the scenario's independent values.
    Simulate(Common),
    /// Best model choices and continuous values.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Method::Bnb)]
        method: Method,
    },
    /// Stability intervals and Monte Carlo verdict for the scenario parameter.
    Stability(Common),
    /// Largest flow per edge.
    Capacity(Common),
    /// Potential intervals compatible with the simulated flows.
    Tighten(Common),
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("{0}")]
    Invalid(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("{path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Invalid(_) | CliError::Output { .. } => EXIT_INPUT,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::NonConvergence(_) => EXIT_NONCONVERGENCE,
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::NoPositiveSolution { .. } => CliError::Infeasible(e.to_string()),
            SolveError::NonConvergence { .. } => CliError::NonConvergence(e.to_string()),
            SolveError::InvalidInput(_) | SolveError::InvalidChordKind { .. } => CliError::Invalid(e.to_string()),
        }
    }
}

/// Network with the scenario applied and the values a simulation starts from.
struct Setup {
    net: Network,
    tree: TreeDecomposition,
    scenario: ScenarioDocument,
    root_potential: f64,
    intensities: Vec<f64>,
    choices: Vec<usize>,
    params: Vec<Vec<f64>>,
    /// Scenario-fixed 1-based choice per edge.
    fixed: Vec<Option<usize>>,
}

impl Setup {
    /// `pin_root` turns a scalar scenario root potential into the root's
    /// bounds; otherwise it is only the operating value.
    fn load(common: &Common, pin_root: bool) -> Result<Self, CliError> {
        let base = load_network(&common.net, common.strict)?;
        let scenario = match &common.scenario {
            Some(path) => load_scenario(path, &base, common.strict)?,
            None => ScenarioDocument::default(),
        };
        let (mut nodes, edges, root_id) = base.to_parts();
        let root = base.root().expect("validated network");
        for (id, range) in &scenario.intensities {
            nodes[base.node_index(id).expect("checked id")].intensity = range.bounds();
        }
        match scenario.root_potential {
            Some(r @ Range::Pair(_)) => nodes[root].potential = r.bounds(),
            Some(Range::Value(v)) if pin_root => nodes[root].potential = Bounds::point(v),
            _ => {}
        }
        let net = Network::new(nodes, edges, root_id);
        let tree = build_spanning_tree(&net, net.root_id()).map_err(|e| CliError::Invalid(e.to_string()))?;
        let root_potential = match scenario.root_potential {
            Some(Range::Value(v)) => v,
            _ => net.node(root).potential.midpoint(),
        };
        let intensities = net.nodes().iter().map(|n| n.intensity.midpoint()).collect();
        let fixed: Vec<Option<usize>> = net.edges().iter().map(|e| scenario.choices.get(&e.id).copied()).collect();
        let choices: Vec<usize> = fixed.iter().map(|d| d.unwrap_or(1)).collect();
        let mut params = Vec::with_capacity(net.edges().len());
        for (e, spec) in net.edges().iter().enumerate() {
            let model = &spec.models[choices[e] - 1];
            let p = match scenario.params.get(&spec.id) {
                Some(p) if p.len() == model.param_arity() => p.clone(),
                Some(p) => {
                    return Err(CliError::Input(InputError::Schema {
                        path: common.scenario.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                        field: format!("params.{}", spec.id),
                        message: format!("{} values for a model with {} parameters", p.len(), model.param_arity()),
                    }))
                }
                None => model.param_bounds.iter().map(|b| b.midpoint()).collect(),
            };
            params.push(p);
        }
        Ok(Self { net, tree, scenario, root_potential, intensities, choices, params, fixed })
    }

    fn search_options(&self) -> SearchOptions {
        let s = &self.scenario.solver;
        let mut o = SearchOptions::default();
        if let Some(v) = s.max_evaluations {
            o.max_evaluations = v;
        }
        if let Some(v) = s.rounds {
            o.rounds = v;
        }
        if let Some(v) = s.feasibility_tolerance {
            o.feasibility_tolerance = v;
        }
        o
    }

    fn solver_options(&self) -> SolverOptions {
        let s = &self.scenario.solver;
        let mut o = SolverOptions::default();
        if let Some(v) = s.newton_tolerance {
            o.tolerance = v;
        }
        if let Some(v) = s.newton_iterations {
            o.max_iterations = v;
        }
        o
    }

    fn independent(&self) -> IndependentVariables {
        IndependentVariables {
            chord_flows: vec![0.0; self.tree.chords().len()],
            root_potential: self.root_potential,
            intensities: self.intensities.clone(),
            edge_params: self.params.clone(),
            edge_choice: self.choices.clone(),
        }
    }

    fn simulate(&self) -> Result<NetworkState, CliError> {
        let opts = self.solver_options();
        let mut solver = SteadyStateSolver::new(&self.net, &self.tree, opts);
        Ok(solver.solve(&self.independent())?)
    }

    /// The network with scenario-fixed edges reduced to their chosen model.
    fn restricted(&self) -> Network {
        let (nodes, mut edges, root) = self.net.to_parts();
        for (e, d) in self.fixed.iter().enumerate() {
            if let Some(d) = d {
                edges[e].models = vec![edges[e].models[d - 1].clone()];
            }
        }
        Network::new(nodes, edges, root)
    }

    fn original_choice(&self, e: usize, d: usize) -> usize {
        self.fixed[e].unwrap_or(d)
    }
}

fn state_doc(net: &Network, state: &NetworkState, choice_of: impl Fn(usize, usize) -> usize) -> StateDoc {
    let report = check_feasibility(net, state);
    let nodes = net
        .nodes()
        .iter()
        .enumerate()
        .map(|(v, n)| NodeRow { id: n.id.clone(), potential: state.node_potential[v], intensity: state.node_intensity[v] })
        .collect();
    let edges = net
        .edges()
        .iter()
        .enumerate()
        .map(|(e, spec)| {
            let (a, b) = net.ends(e);
            let d = state.edge_choice[e];
            let residual = spec.models[d - 1]
                .residual(&state.edge_params[e], state.node_potential[a], state.node_potential[b], state.edge_flow[e])
                .unwrap_or(f64::NAN);
            EdgeRow {
                id: spec.id.clone(),
                from: spec.from.clone(),
                to: spec.to.clone(),
                choice: choice_of(e, d),
                params: state.edge_params[e].clone(),
                flow: state.edge_flow[e],
                residual,
            }
        })
        .collect();
    let violations = report
        .violations
        .iter()
        .map(|v| ViolationRow { constraint: v.constraint.describe(net), magnitude: v.magnitude })
        .collect();
    StateDoc { nodes, edges, violations, max_violation: report.max_violation }
}

fn variable_name(net: &Network, kind: VariableKind) -> String {
    match kind {
        VariableKind::RootPotential => "root_potential".to_string(),
        VariableKind::Intensity(v) => format!("intensity:{}", net.node(v).id),
        VariableKind::Param { edge, index } => format!("param:{}:{index}", net.edge(edge).id),
        VariableKind::ChordFlow(e) => format!("chord_flow:{}", net.edge(e).id),
        VariableKind::Tension(e) => format!("tension:{}", net.edge(e).id),
    }
}

fn free_variables(problem: &ContinuousProblem, x: &[f64]) -> Vec<VariableRow> {
    problem
        .variables()
        .iter()
        .zip(x)
        .filter(|(v, _)| v.is_free())
        .map(|(v, &value)| VariableRow { variable: variable_name(problem.net(), v.kind), value })
        .collect()
}

fn simulate(setup: &Setup) -> Result<(Report, i32), CliError> {
    let state = setup.simulate()?;
    let doc = state_doc(&setup.net, &state, |_, d| d);
    let feasible = doc.violations.is_empty();
    let code = if feasible { EXIT_OK } else { EXIT_INFEASIBLE };
    Ok((Report::Simulate(SimulateReport { feasible, state: doc }), code))
}

fn optimize_bnb(setup: &Setup, budget: Option<usize>) -> Result<(Report, i32), CliError> {
    let net = setup.restricted();
    let tree = build_spanning_tree(&net, net.root_id()).map_err(|e| CliError::Invalid(e.to_string()))?;
    let base = ContinuousProblem::full_dominant(&net, tree.clone())?;
    let mut options = BnbOptions { search: setup.search_options(), ..BnbOptions::default() };
    if let Some(b) = budget.or(setup.scenario.solver.budget) {
        options.budget = b;
    }
    let r = branch_and_bound(&base, &options)?;
    info!("branch-and-bound visited {} fragments", r.nodes_visited);
    let feasible = r.best_choice.is_some();
    let edge_choice = r.edge_choice.clone().unwrap_or_default();
    let (state, continuous) = match (&r.best_state, &r.best_x, &r.edge_choice) {
        (Some(s), Some(x), Some(choice)) => {
            let fixed = ContinuousProblem::fixed(&net, tree, choice)?;
            (Some(state_doc(&net, s, |e, d| setup.original_choice(e, d))), free_variables(&fixed, x))
        }
        _ => (None, Vec::new()),
    };
    let report = OptimizeReport {
        method: "bnb".to_string(),
        feasible,
        objective: feasible.then_some(r.best_value),
        lower_bound: None,
        discrete_edges: r.discrete_edges.iter().map(|&e| net.edge(e).id.clone()).collect(),
        best_choice: r.best_choice.clone(),
        edge_choice: edge_choice
            .iter()
            .enumerate()
            .map(|(e, &d)| (net.edge(e).id.clone(), setup.original_choice(e, d)))
            .collect(),
        continuous,
        state,
        counters: Counters {
            nodes_visited: r.nodes_visited,
            nodes_pruned: r.nodes_pruned,
            nodes_bounded: r.nodes_bounded,
            evaluations: 0,
        },
        proven_exhaustive: r.proven_exhaustive,
        budget_exhausted: r.budget_exhausted,
        incumbent_history: r.incumbent_history.clone(),
        restarted: false,
    };
    Ok((Report::Optimize(report), if feasible { EXIT_OK } else { EXIT_INFEASIBLE }))
}

fn optimize_dominant(setup: &Setup) -> Result<(Report, i32), CliError> {
    let net = setup.restricted();
    let tree = build_spanning_tree(&net, net.root_id()).map_err(|e| CliError::Invalid(e.to_string()))?;
    let problem = ContinuousProblem::full_dominant(&net, tree.clone())?;
    let search = setup.search_options();
    let relaxed = minimize_continuous(&problem, None, &search);
    let lower_bound = relaxed.feasible.then_some(relaxed.objective);
    let discrete_edges: Vec<String> = problem.relaxed_edges().map(|e| net.edge(e).id.clone()).collect();
    let realize = RealizeOptions { search: SearchOptions { rounds: search.rounds.max(10), ..search }, restart_root: None };
    let empty = |exhausted| OptimizeReport {
        method: "dominant".to_string(),
        feasible: false,
        objective: None,
        lower_bound,
        discrete_edges: discrete_edges.clone(),
        best_choice: None,
        edge_choice: Vec::new(),
        continuous: Vec::new(),
        state: None,
        counters: Counters { nodes_visited: 0, nodes_pruned: 0, nodes_bounded: 0, evaluations: relaxed.evaluations },
        proven_exhaustive: false,
        budget_exhausted: exhausted,
        incumbent_history: Vec::new(),
        restarted: false,
    };
    match solve_with_realizability(&problem, &realize) {
        Ok(sol) => {
            let fixed = ContinuousProblem::fixed(&net, tree, &sol.choices)?;
            let mut report = empty(sol.result.budget_exhausted);
            report.feasible = true;
            report.objective = Some(sol.objective);
            report.best_choice =
                Some(problem.relaxed_edges().map(|e| setup.original_choice(e, sol.choices[e])).collect());
            report.edge_choice =
                sol.choices.iter().enumerate().map(|(e, &d)| (net.edge(e).id.clone(), setup.original_choice(e, d))).collect();
            report.continuous = free_variables(&fixed, &sol.result.x);
            report.state = Some(state_doc(&net, &sol.state, |e, d| setup.original_choice(e, d)));
            report.counters.evaluations += sol.result.evaluations;
            report.restarted = sol.restarted;
            Ok((Report::Optimize(report), EXIT_OK))
        }
        Err(ContinuousError::Solve(e)) => Err(e.into()),
        Err(e) => {
            log::warn!("{e}");
            Ok((Report::Optimize(empty(relaxed.budget_exhausted)), EXIT_INFEASIBLE))
        }
    }
}

fn target(net: &Network, kind: ParameterKindDoc, id: &str, model: Option<usize>) -> ParameterTarget {
    match kind {
        ParameterKindDoc::NodeDemand => ParameterTarget::NodeDemand(net.node_index(id).expect("checked id")),
        ParameterKindDoc::NodeIntensity => ParameterTarget::NodeIntensity(net.node_index(id).expect("checked id")),
        ParameterKindDoc::PotentialLower => ParameterTarget::PotentialLower(net.node_index(id).expect("checked id")),
        ParameterKindDoc::PotentialUpper => ParameterTarget::PotentialUpper(net.node_index(id).expect("checked id")),
        ParameterKindDoc::ModelCoefficient => ParameterTarget::ModelCoefficient {
            edge: net.edge_index(id).expect("checked id"),
            model: model.expect("checked model"),
        },
    }
}

fn kind_name(kind: ParameterKindDoc) -> &'static str {
    match kind {
        ParameterKindDoc::NodeDemand => "node_demand",
        ParameterKindDoc::NodeIntensity => "node_intensity",
        ParameterKindDoc::PotentialLower => "potential_lower",
        ParameterKindDoc::PotentialUpper => "potential_upper",
        ParameterKindDoc::ModelCoefficient => "model_coefficient",
    }
}

fn capacities(net: &Network) -> Vec<CapacityRow> {
    (0..net.edges().len())
        .map(|e| {
            let (a, b) = net.ends(e);
            CapacityRow {
                edge: net.edge(e).id.clone(),
                capacity: edge_capacity(net.edge(e), net.node(a).potential, net.node(b).potential).ok(),
            }
        })
        .collect()
}

fn interval_rows(net: &Network, bounds: &[Bounds]) -> Vec<IntervalRow> {
    net.nodes()
        .iter()
        .zip(bounds)
        .map(|(n, b)| IntervalRow {
            node: n.id.clone(),
            raw_lower: n.potential.lo,
            raw_upper: n.potential.hi,
            lower: b.lo,
            upper: b.hi,
        })
        .collect()
}

fn stability(setup: &Setup, seed: Option<u64>) -> Result<(Report, i32), CliError> {
    let net = &setup.net;
    let sc = &setup.scenario;
    let p = sc.parameter.as_ref().ok_or_else(|| CliError::Invalid("stability needs a scenario with `parameter`".into()))?;
    let controls = sc
        .controls
        .iter()
        .map(|c| {
            let kind = match c.kind {
                ControlKindDoc::RootPotential => ControlKind::RootPotential,
                ControlKindDoc::MachineRatio => {
                    ControlKind::MachineRatio(net.edge_index(c.target.as_deref().expect("checked")).expect("checked id"))
                }
                ControlKindDoc::Intensity => {
                    ControlKind::Intensity(net.node_index(c.target.as_deref().expect("checked")).expect("checked id"))
                }
            };
            Control { kind, value: c.value, neighborhood: Bounds::new(c.neighborhood[0], c.neighborhood[1]), switch_weight: c.switch_weight }
        })
        .collect();
    let problem = StabilityProblem {
        net,
        root_potential: setup.root_potential,
        intensities: setup.intensities.clone(),
        params: setup.params.clone(),
        choices: setup.choices.clone(),
        controls,
        eta: sc.eta.unwrap_or(1.0),
    };
    let mut spec = ParameterSpec::new(target(net, p.kind, &p.target, p.model), p.base, p.radius, p.tolerance);
    if let Some([lo, hi]) = p.domain {
        spec.domain = spec.domain.intersect(&Bounds::new(lo, hi));
    }
    let seed = seed.or(sc.seed).unwrap_or(0);
    let mc = sc.monte_carlo.as_ref().map(|m| MonteCarloSpec {
        axes: m
            .axes
            .iter()
            .map(|a| BoxAxis { target: target(net, a.kind, &a.target, a.model), center: a.center, radius: a.radius })
            .collect(),
        samples: m.samples,
        threshold: m.threshold,
        seed,
    });
    let r = match analyze(&problem, &spec, p.weak, mc.as_ref(), &setup.search_options()) {
        Ok(r) => r,
        Err(e @ StabilityError::BaseInfeasible { .. }) => return Err(CliError::Infeasible(e.to_string())),
        Err(e) => return Err(CliError::Invalid(e.to_string())),
    };
    let interval = |scan: &potflow::ScanResult, stable: bool| IntervalDoc {
        lower: scan.lower,
        upper: scan.upper,
        lower_capped: scan.lower_capped,
        upper_capped: scan.upper_capped,
        stable,
        probes: scan.probes.len(),
        warnings: scan.warnings.clone(),
    };
    let report = StabilityReportDoc {
        parameter: ParameterRow {
            kind: kind_name(p.kind).to_string(),
            target: p.target.clone(),
            base: p.base,
            radius: p.radius,
            tolerance: p.tolerance,
        },
        strong: interval(&r.strong.scan, r.strong.stable),
        weak: r.weak.as_ref().map(|w| interval(&w.scan, w.stable)),
        weak_nearest_reference: r.weak.as_ref().is_some_and(|w| w.used_nearest_reference()),
        monte_carlo: r.monte_carlo.as_ref().zip(mc.as_ref()).map(|(m, spec)| MonteCarloDocOut {
            samples: m.samples,
            passed: m.passed,
            fraction: m.fraction,
            threshold: spec.threshold,
            verdict: m.verdict,
            seed: spec.seed,
            base_feasible: m.base_feasible,
        }),
        capacities: capacities(net),
        tightened: r.tightened_bounds.as_ref().map(|b| interval_rows(net, b)),
    };
    Ok((Report::Stability(report), EXIT_OK))
}

fn tighten(setup: &Setup) -> Result<(Report, i32), CliError> {
    let state = setup.simulate()?;
    match tighten_potential_intervals(&setup.net, &state.edge_flow, &setup.choices) {
        Ok(bounds) => Ok((Report::Tighten(TightenReport { nodes: interval_rows(&setup.net, &bounds) }), EXIT_OK)),
        Err(e) => Err(CliError::Infeasible(e.to_string())),
    }
}

fn execute(command: &Command) -> Result<(Report, i32, &Common), CliError> {
    let (report, code, common) = match command {
        Command::Simulate(c) => {
            let (r, code) = simulate(&Setup::load(c, false)?)?;
            (r, code, c)
        }
        Command::Optimize { common, method } => {
            let setup = Setup::load(common, true)?;
            let (r, code) = match method {
                Method::Bnb => optimize_bnb(&setup, common.budget)?,
                Method::Dominant => optimize_dominant(&setup)?,
            };
            (r, code, common)
        }
        Command::Stability(c) => {
            let (r, code) = stability(&Setup::load(c, false)?, c.seed)?;
            (r, code, c)
        }
        Command::Capacity(c) => {
            let setup = Setup::load(c, false)?;
            (Report::Capacity(CapacityReport { edges: capacities(&setup.net) }), EXIT_OK, c)
        }
        Command::Tighten(c) => {
            let (r, code) = tighten(&Setup::load(c, false)?)?;
            (r, code, c)
        }
    };
    Ok((report, code, common))
}

/// Runs one command line, writing the report to `--out` or `stdout` and
/// diagnostics to `stderr`; returns the process exit code.
pub fn run_command<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok((report, code, common)) => {
            let written = match &common.out {
                Some(path) => write_report(&report, common.format, path)
                    .map_err(|source| CliError::Output { path: path.display().to_string(), source }),
                None => stdout.write_all(render(&report, common.format).as_bytes()).map_err(|source| CliError::Output {
                    path: "<stdout>".to_string(),
                    source,
                }),
            };
            match written {
                Ok(()) => code,
                Err(e) => {
                    let _ = writeln!(stderr, "error: {e}");
                    e.exit_code()
                }
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
