//! Stability of an operating point with respect to a parameter.
//!
//! With the controls frozen, the feasible parameter range around the base
//! value is found by doubling steps then bisection. The weak variant lets
//! the controls move inside their neighborhood and asks that the
//! re-optimized objective, switch cost included, stays within `eta` of the
//! frozen one. A Monte Carlo test samples a multi-parameter box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::continuous::{minimize_continuous, ContinuousProblem, SearchOptions, SwitchTerm, VariableKind};
use crate::models::{EdgeModel, ModelKind};
use crate::network::{build_spanning_tree, Bounds, EdgeIx, EdgeSpec, Network, NetworkState, NodeIx, TreeDecomposition};
use crate::state::{check_feasibility, solve_steady_state, IndependentVariables};
use crate::tighten::{tighten_potential_intervals, TightenError};

/// Violation magnitude still counted as feasible when probing.
pub const PROBE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("the base point {value} is infeasible with the frozen controls")]
    BaseInfeasible { value: f64 },
    #[error("edge {edge}: capacity undefined (no flow-determined model)")]
    CapacityUndefined { edge: String },
    #[error(transparent)]
    Tighten(#[from] TightenError),
    #[error("invalid stability input: {0}")]
    InvalidInput(String),
}

/// Scalar of the problem a parameter drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParameterTarget {
    /// Demand `pi` at a node, i.e. intensity `-pi`.
    NodeDemand(NodeIx),
    NodeIntensity(NodeIx),
    PotentialLower(NodeIx),
    PotentialUpper(NodeIx),
    /// Resistance or pipe coefficient of one model (1-based) of an edge.
    ModelCoefficient { edge: EdgeIx, model: usize },
}

impl ParameterTarget {
    /// Values the parameter can take at all.
    pub fn natural_domain(&self) -> Bounds {
        match self {
            ParameterTarget::NodeDemand(_) => Bounds::new(0.0, f64::INFINITY),
            ParameterTarget::ModelCoefficient { .. } => Bounds::new(f64::MIN_POSITIVE, f64::INFINITY),
            _ => Bounds::new(f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterSpec {
    pub target: ParameterTarget,
    pub base_value: f64,
    /// Required margin `delta_0` on both sides.
    pub radius: f64,
    /// Endpoint resolution.
    pub tolerance: f64,
    pub domain: Bounds,
}

impl ParameterSpec {
    pub fn new(target: ParameterTarget, base_value: f64, radius: f64, tolerance: f64) -> Self {
        Self { target, base_value, radius, tolerance, domain: target.natural_domain() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlKind {
    RootPotential,
    MachineRatio(EdgeIx),
    Intensity(NodeIx),
}

impl ControlKind {
    fn variable(&self) -> VariableKind {
        match *self {
            ControlKind::RootPotential => VariableKind::RootPotential,
            ControlKind::MachineRatio(edge) => VariableKind::Param { edge, index: 0 },
            ControlKind::Intensity(v) => VariableKind::Intensity(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Control {
    pub kind: ControlKind,
    /// `u_0` component.
    pub value: f64,
    /// `U_0` component.
    pub neighborhood: Bounds,
    /// Weight of `|u - u_0|` in the switch cost.
    pub switch_weight: f64,
}

/// Operating point: fixed choices and independent values, some of which
/// are controls that may be re-optimized within their neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityProblem<'a> {
    pub net: &'a Network,
    pub root_potential: f64,
    /// Intensity per node (root entry ignored).
    pub intensities: Vec<f64>,
    pub params: Vec<Vec<f64>>,
    /// 1-based choice per edge.
    pub choices: Vec<usize>,
    pub controls: Vec<Control>,
    pub eta: f64,
}

/// One point of the parameter space: target/value pairs.
pub type ParameterPoint = [(ParameterTarget, f64)];

struct Instance {
    net: Network,
    iv: IndependentVariables,
}

impl StabilityProblem<'_> {
    fn check(&self) -> Result<(), StabilityError> {
        let bad = |m: String| Err(StabilityError::InvalidInput(m));
        if self.eta <= 0.0 {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        for c in &self.controls {
            if !c.neighborhood.contains(c.value) {
                return bad(format!("control {:?}: u0 = {} outside its neighborhood", c.kind, c.value));
            }
        }
        Ok(())
    }

    fn instance(&self, tree: &TreeDecomposition, point: &ParameterPoint) -> Instance {
        let (mut nodes, mut edges, root) = self.net.to_parts();
        let mut iv = IndependentVariables {
            chord_flows: vec![0.0; tree.chords().len()],
            root_potential: self.root_potential,
            intensities: self.intensities.clone(),
            edge_params: self.params.clone(),
            edge_choice: self.choices.clone(),
        };
        for c in &self.controls {
            match c.kind {
                ControlKind::RootPotential => iv.root_potential = c.value,
                ControlKind::MachineRatio(e) => iv.edge_params[e] = vec![c.value],
                ControlKind::Intensity(v) => iv.intensities[v] = c.value,
            }
        }
        for &(target, value) in point {
            match target {
                ParameterTarget::NodeDemand(v) => {
                    iv.intensities[v] = -value;
                    nodes[v].intensity = Bounds::point(-value);
                }
                ParameterTarget::NodeIntensity(v) => {
                    iv.intensities[v] = value;
                    nodes[v].intensity = Bounds::point(value);
                }
                ParameterTarget::PotentialLower(v) => nodes[v].potential.lo = value,
                ParameterTarget::PotentialUpper(v) => nodes[v].potential.hi = value,
                ParameterTarget::ModelCoefficient { edge, model } => {
                    let m = &mut edges[edge].models[model - 1];
                    m.kind = match m.kind {
                        ModelKind::LinearResistor { .. } => ModelKind::LinearResistor { resistance: value },
                        ModelKind::QuadraticPipe { .. } => ModelKind::QuadraticPipe { coefficient: value },
                        kind => kind,
                    };
                }
            }
        }
        Instance { net: Network::new(nodes, edges, root), iv }
    }

    /// Frozen-control state and objective at a parameter point, if feasible.
    fn frozen(&self, tree: &TreeDecomposition, point: &ParameterPoint) -> Option<(NetworkState, f64)> {
        let inst = self.instance(tree, point);
        let state = solve_steady_state(&inst.net, tree, &inst.iv).ok()?;
        if check_feasibility(&inst.net, &state).max_violation > PROBE_TOLERANCE {
            return None;
        }
        let problem = ContinuousProblem::fixed(&inst.net, tree.clone(), &self.choices).ok()?;
        let f = problem.objective(&state);
        Some((state, f))
    }

    /// Best `F + psi` over the control neighborhood at a parameter point,
    /// with the controls found; `None` when no feasible control was found.
    fn reoptimize(&self, tree: &TreeDecomposition, point: &ParameterPoint, opts: &SearchOptions) -> Option<(f64, Vec<f64>)> {
        let inst = self.instance(tree, point);
        let switch = self
            .controls
            .iter()
            .map(|c| SwitchTerm { kind: c.kind.variable(), reference: c.value, weight: c.switch_weight })
            .collect();
        let mut problem = ContinuousProblem::fixed(&inst.net, tree.clone(), &self.choices).ok()?.with_switch_cost(switch);
        let frozen_x: Vec<(VariableKind, f64)> = problem
            .variables()
            .iter()
            .map(|v| {
                let value = match v.kind {
                    VariableKind::RootPotential => inst.iv.root_potential,
                    VariableKind::Intensity(n) => inst.iv.intensities[n],
                    VariableKind::Param { edge, index } => inst.iv.edge_params[edge][index],
                    VariableKind::ChordFlow(_) | VariableKind::Tension(_) => unreachable!("all edges fixed"),
                };
                (v.kind, value)
            })
            .collect();
        for &(kind, value) in &frozen_x {
            let bounds = match self.controls.iter().find(|c| c.kind.variable() == kind) {
                Some(c) => c.neighborhood,
                None => Bounds::point(value),
            };
            problem.set_bounds(kind, bounds).ok()?;
        }
        let x0: Vec<f64> = frozen_x.iter().map(|&(_, v)| v).collect();
        let r = minimize_continuous(&problem, Some(&x0), opts);
        if !r.feasible {
            return None;
        }
        let controls = self.controls.iter().map(|c| r.x[problem.index_of(c.kind.variable()).expect("control variable")]).collect();
        Some((r.objective, controls))
    }
}

/// Feasible parameter range found by a one-dimensional scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub lower: f64,
    pub upper: f64,
    /// The endpoint is the scan cap (domain bound or ten radii), not a boundary.
    pub lower_capped: bool,
    pub upper_capped: bool,
    /// Every probed value with its verdict, in probe order.
    pub probes: Vec<(f64, bool)>,
    pub warnings: Vec<String>,
}

fn scan(spec: &ParameterSpec, mut feasible: impl FnMut(f64) -> bool) -> ScanResult {
    let mut probes = Vec::new();
    let mut probe = |v: f64, probes: &mut Vec<(f64, bool)>| {
        let ok = feasible(v);
        probes.push((v, ok));
        ok
    };
    let mut warnings = Vec::new();
    let mut side = |dir: f64, probes: &mut Vec<(f64, bool)>, warnings: &mut Vec<String>| -> (f64, bool) {
        let p0 = spec.base_value;
        let reach = 10.0 * spec.radius;
        let cap = if dir > 0.0 { (p0 + reach).min(spec.domain.hi) } else { (p0 - reach).max(spec.domain.lo) };
        let mut good = p0;
        let mut step = spec.tolerance;
        let bad = loop {
            let v = p0 + dir * step;
            if dir * (v - cap) >= 0.0 {
                if probe(cap, probes) {
                    return (cap, true);
                }
                break cap;
            }
            if probe(v, probes) {
                good = v;
                step *= 2.0;
            } else {
                break v;
            }
        };
        let mut bad_end = bad;
        while (bad_end - good).abs() > spec.tolerance {
            let mid = 0.5 * (good + bad_end);
            if probe(mid, probes) {
                good = mid;
            } else {
                bad_end = mid;
            }
        }
        // the definition presumes an interval; look past the first failure
        for k in 1..=4 {
            let v = bad + (cap - bad) * k as f64 / 4.0;
            if v != bad && probe(v, probes) {
                warnings.push(format!("feasible probe at {v} beyond the infeasible value {bad}: set is not an interval"));
                break;
            }
        }
        (good, false)
    };
    let (upper, upper_capped) = side(1.0, &mut probes, &mut warnings);
    let (lower, lower_capped) = side(-1.0, &mut probes, &mut warnings);
    ScanResult { lower, upper, lower_capped, upper_capped, probes, warnings }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrongStability {
    pub scan: ScanResult,
    pub stable: bool,
}

impl StrongStability {
    pub fn interval(&self) -> Bounds {
        Bounds::new(self.scan.lower, self.scan.upper)
    }
}

fn margin_ok(spec: &ParameterSpec, scan: &ScanResult) -> bool {
    (spec.base_value - scan.lower).min(scan.upper - spec.base_value) >= spec.radius
}

fn tree_of(net: &Network) -> Result<TreeDecomposition, StabilityError> {
    build_spanning_tree(net, net.root_id()).map_err(|e| StabilityError::InvalidInput(e.to_string()))
}

/// Feasible interval of the parameter with frozen controls.
pub fn strong_stability_interval(
    problem: &StabilityProblem,
    spec: &ParameterSpec,
) -> Result<StrongStability, StabilityError> {
    problem.check()?;
    let tree = tree_of(problem.net)?;
    if problem.frozen(&tree, &[(spec.target, spec.base_value)]).is_none() {
        return Err(StabilityError::BaseInfeasible { value: spec.base_value });
    }
    let scan = scan(spec, |v| problem.frozen(&tree, &[(spec.target, v)]).is_some());
    Ok(StrongStability { stable: margin_ok(spec, &scan), scan })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakProbe {
    pub value: f64,
    pub frozen_feasible: bool,
    pub weak: bool,
    /// Re-optimized control values, when a feasible control exists.
    pub witness: Option<Vec<f64>>,
    /// Reference objective taken at the nearest feasible frozen probe.
    pub nearest_reference: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakStability {
    pub scan: ScanResult,
    pub stable: bool,
    pub probes: Vec<WeakProbe>,
}

impl WeakStability {
    pub fn interval(&self) -> Bounds {
        Bounds::new(self.scan.lower, self.scan.upper)
    }

    /// Whether some probe used the nearest-feasible reference rule.
    pub fn used_nearest_reference(&self) -> bool {
        self.probes.iter().any(|p| p.nearest_reference)
    }
}

/// Weak-stability interval: at each probe, some control of the
/// neighborhood must be feasible with `|F(u0) - min(F + psi)| < eta`.
pub fn weak_stability_check(
    problem: &StabilityProblem,
    spec: &ParameterSpec,
    opts: &SearchOptions,
) -> Result<WeakStability, StabilityError> {
    problem.check()?;
    let tree = tree_of(problem.net)?;
    let base = problem.frozen(&tree, &[(spec.target, spec.base_value)]);
    let mut frozen_seen: Vec<(f64, f64)> = base.iter().map(|(_, f)| (spec.base_value, *f)).collect();
    let mut probes = Vec::new();
    let scan = scan(spec, |v| {
        let point = [(spec.target, v)];
        let frozen = problem.frozen(&tree, &point);
        let (reference, nearest) = match &frozen {
            Some((_, f)) => {
                frozen_seen.push((v, *f));
                (Some(*f), false)
            }
            None => {
                let near = frozen_seen
                    .iter()
                    .min_by(|a, b| (a.0 - v).abs().total_cmp(&(b.0 - v).abs()))
                    .map(|&(_, f)| f);
                (near, true)
            }
        };
        let reopt = problem.reoptimize(&tree, &point, opts);
        let weak = match (&reopt, reference) {
            (Some((f1, _)), Some(f0)) => (f0 - f1).abs() < problem.eta,
            (Some(_), None) => true,
            (None, _) => false,
        };
        probes.push(WeakProbe {
            value: v,
            frozen_feasible: frozen.is_some(),
            weak,
            witness: reopt.map(|(_, u)| u),
            nearest_reference: nearest,
        });
        weak
    });
    Ok(WeakStability { stable: margin_ok(spec, &scan), scan, probes })
}

/// One axis of a Monte Carlo box: `center +- radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxAxis {
    pub target: ParameterTarget,
    pub center: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub samples: usize,
    pub passed: usize,
    pub fraction: f64,
    pub verdict: bool,
    /// Whether the base point itself was frozen-feasible (reference value).
    pub base_feasible: bool,
}

pub const DEFAULT_SAMPLES: usize = 200;
pub const DEFAULT_THRESHOLD: f64 = 0.95;

/// Fraction of uniform samples of the box passing the weak test; samples
/// are drawn from a seeded generator and evaluated in parallel.
pub fn monte_carlo_stability(
    problem: &StabilityProblem,
    pbox: &[BoxAxis],
    samples: usize,
    threshold: f64,
    seed: u64,
    opts: &SearchOptions,
) -> Result<MonteCarloResult, StabilityError> {
    problem.check()?;
    if samples == 0 || !(threshold > 0.0 && threshold <= 1.0) {
        return Err(StabilityError::InvalidInput(format!("samples {samples} / threshold {threshold}")));
    }
    let tree = tree_of(problem.net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<(ParameterTarget, f64)>> = (0..samples)
        .map(|_| {
            pbox.iter()
                .map(|a| {
                    let u: f64 = rng.random();
                    (a.target, a.center - a.radius + 2.0 * a.radius * u)
                })
                .collect()
        })
        .collect();
    let center: Vec<(ParameterTarget, f64)> = pbox.iter().map(|a| (a.target, a.center)).collect();
    let base = problem.frozen(&tree, &center).map(|(_, f)| f);
    let passed = points
        .par_iter()
        .filter(|point| {
            let reference = problem.frozen(&tree, point).map(|(_, f)| f).or(base);
            match (problem.reoptimize(&tree, point, opts), reference) {
                (Some((f1, _)), Some(f0)) => (f0 - f1).abs() < problem.eta,
                (Some(_), None) => true,
                (None, _) => false,
            }
        })
        .count();
    let fraction = passed as f64 / samples as f64;
    Ok(MonteCarloResult { samples, passed, fraction, verdict: fraction >= threshold, base_feasible: base.is_some() })
}

/// Flow along the envelope is piecewise linear in the ratio with breaks at
/// vertex ratios, so its maximum over the reachable ratio interval sits at
/// an interval end or a vertex.
fn machine_capacity(model: &EdgeModel, p_i: Bounds, p_k: Bounds) -> Option<f64> {
    let envelope = model.envelope.as_ref()?;
    if p_i.hi <= 0.0 {
        return None;
    }
    let reach = Bounds::new(p_k.lo / p_i.hi, p_k.hi / p_i.lo.max(f64::MIN_POSITIVE)).intersect(&model.param_bounds[0]);
    if !reach.is_ordered() {
        return None;
    }
    let candidates = [reach.lo, reach.hi].into_iter().chain(envelope.vertices().iter().map(|v| v.1).filter(|c| reach.contains(*c)));
    candidates.filter_map(|c| envelope.max_flow_at(c)).reduce(f64::max)
}

/// Largest flow the edge can carry over its models and in-bound endpoint
/// potentials.
pub fn edge_capacity(edge: &EdgeSpec, p_i: Bounds, p_k: Bounds) -> Result<f64, StabilityError> {
    let mut best: Option<f64> = None;
    for model in &edge.models {
        let q = if model.flow_determined() {
            let c: Vec<f64> = model.param_bounds.iter().map(|b| b.hi).collect();
            model.solve_flow(&c, p_i.hi, p_k.lo).ok()
        } else {
            machine_capacity(model, p_i, p_k)
        };
        if let Some(q) = q {
            best = Some(best.map_or(q, |m: f64| m.max(q)));
        }
    }
    best.ok_or_else(|| StabilityError::CapacityUndefined { edge: edge.id.clone() })
}

/// Everything the stability toolkit reports for one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub strong: StrongStability,
    pub weak: Option<WeakStability>,
    pub monte_carlo: Option<MonteCarloResult>,
    /// Capacity per edge; `None` where undefined.
    pub capacities: Vec<Option<f64>>,
    /// Tightened potential intervals at the base state, `None` if empty.
    pub tightened_bounds: Option<Vec<Bounds>>,
}

/// Monte Carlo settings for [`analyze`].
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSpec {
    pub axes: Vec<BoxAxis>,
    pub samples: usize,
    pub threshold: f64,
    pub seed: u64,
}

/// Runs every analysis on one operating point.
pub fn analyze(
    problem: &StabilityProblem,
    spec: &ParameterSpec,
    weak: bool,
    monte_carlo: Option<&MonteCarloSpec>,
    opts: &SearchOptions,
) -> Result<StabilityReport, StabilityError> {
    let strong = strong_stability_interval(problem, spec)?;
    let weak = if weak { Some(weak_stability_check(problem, spec, opts)?) } else { None };
    let monte_carlo = match monte_carlo {
        Some(mc) => Some(monte_carlo_stability(problem, &mc.axes, mc.samples, mc.threshold, mc.seed, opts)?),
        None => None,
    };
    let net = problem.net;
    let capacities = (0..net.edges().len())
        .map(|e| {
            let (a, b) = net.ends(e);
            edge_capacity(net.edge(e), net.node(a).potential, net.node(b).potential).ok()
        })
        .collect();
    let tree = tree_of(net)?;
    let tightened_bounds = problem
        .frozen(&tree, &[(spec.target, spec.base_value)])
        .and_then(|(state, _)| tighten_potential_intervals(net, &state.edge_flow, &problem.choices).ok());
    Ok(StabilityReport { strong, weak, monte_carlo, capacities, tightened_bounds })
}
