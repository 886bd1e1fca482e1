//! Network state computation on a spanning-tree decomposition.
//!
//! Tree-edge flows follow from the node balances once the chord flows are
//! fixed (leaves first, reverse breadth-first order). Potentials are then
//! propagated from the root along the tree in depth-first pre-order. The
//! chord equations are the only coupled part of the system; they are driven
//! to zero by a damped Newton iteration on the chord flows with a
//! forward-difference Jacobian.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::models::{Direction, ModelError, POTENTIAL_FLOOR};
use crate::network::{EdgeIx, Network, NetworkState, NodeIx, TreeDecomposition};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
    #[error("edge {edge}: the chosen model does not determine flow and cannot be a chord")]
    InvalidChordKind { edge: String },
    #[error("edge {edge}: no positive potential solves the edge equation (deficit {deficit:.6e})")]
    NoPositiveSolution { edge: String, deficit: f64 },
    #[error("chord iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
}

/// The independent quantities a state is computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct IndependentVariables {
    /// Flow per chord, aligned with [`TreeDecomposition::chords`].
    pub chord_flows: Vec<f64>,
    pub root_potential: f64,
    /// Intensity per node; the root entry is ignored (the root takes up the balance).
    pub intensities: Vec<f64>,
    pub edge_params: Vec<Vec<f64>>,
    /// 1-based model choice per edge.
    pub edge_choice: Vec<usize>,
}

impl IndependentVariables {
    /// Zero flows and intensities, first model everywhere, parameters at their lower bounds.
    pub fn defaults(net: &Network, tree: &TreeDecomposition, root_potential: f64) -> Self {
        Self {
            chord_flows: vec![0.0; tree.chords().len()],
            root_potential,
            intensities: vec![0.0; net.nodes().len()],
            edge_params: net.edges().iter().map(|e| e.models[0].param_bounds.iter().map(|b| b.lo).collect()).collect(),
            edge_choice: vec![1; net.edges().len()],
        }
    }

    fn check(&self, net: &Network, tree: &TreeDecomposition) -> Result<(), SolveError> {
        let bad = |msg: String| Err(SolveError::InvalidInput(msg));
        if self.chord_flows.len() != tree.chords().len() {
            return bad(format!("{} chord flows for {} chords", self.chord_flows.len(), tree.chords().len()));
        }
        if self.intensities.len() != net.nodes().len() {
            return bad(format!("{} intensities for {} nodes", self.intensities.len(), net.nodes().len()));
        }
        if self.edge_choice.len() != net.edges().len() || self.edge_params.len() != net.edges().len() {
            return bad("edge choices/parameters do not cover every edge".to_string());
        }
        for (e, spec) in net.edges().iter().enumerate() {
            let Some(model) = spec.model(self.edge_choice[e]) else {
                return bad(format!("edge {}: choice {} outside 1..={}", spec.id, self.edge_choice[e], spec.arity()));
            };
            if model.param_arity() != self.edge_params[e].len() {
                return bad(format!(
                    "edge {}: model expects {} parameter(s), got {}",
                    spec.id,
                    model.param_arity(),
                    self.edge_params[e].len()
                ));
            }
        }
        if !(self.root_potential > 0.0) {
            return bad(format!("root potential must be positive, got {}", self.root_potential));
        }
        Ok(())
    }
}

/// What a constraint violation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConstraintRef {
    Intensity(NodeIx),
    Potential(NodeIx),
    Param { edge: EdgeIx, index: usize },
    Side { edge: EdgeIx, index: usize },
    Envelope(EdgeIx),
    /// Potential propagation across the edge had no positive solution.
    Propagation(EdgeIx),
    /// Chord equation left unsatisfied.
    LoopResidual(EdgeIx),
}

impl ConstraintRef {
    pub fn describe(&self, net: &Network) -> String {
        match *self {
            ConstraintRef::Intensity(v) => format!("node {} intensity", net.node(v).id),
            ConstraintRef::Potential(v) => format!("node {} potential", net.node(v).id),
            ConstraintRef::Param { edge, index } => format!("edge {} parameter {}", net.edge(edge).id, index),
            ConstraintRef::Side { edge, index } => {
                let e = net.edge(edge);
                format!("edge {} {}", e.id, e.side_constraints[index].kind.name())
            }
            ConstraintRef::Envelope(e) => format!("edge {} envelope", net.edge(e).id),
            ConstraintRef::Propagation(e) => format!("edge {} propagation", net.edge(e).id),
            ConstraintRef::LoopResidual(e) => format!("edge {} loop residual", net.edge(e).id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub constraint: ConstraintRef,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
    pub max_violation: f64,
}

impl FeasibilityReport {
    pub(crate) fn push(&mut self, constraint: ConstraintRef, magnitude: f64) {
        if magnitude > 0.0 {
            self.violations.push(Violation { constraint, magnitude });
            self.max_violation = self.max_violation.max(magnitude);
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.violations.iter().map(|v| v.magnitude * v.magnitude).sum()
    }
}

/// Fills `flows` for all edges given the chord flows and node intensities;
/// returns the intensity implied at the root.
pub(crate) fn fill_tree_flows(
    net: &Network,
    tree: &TreeDecomposition,
    chord_flows: &[f64],
    intensities: &[f64],
    flows: &mut [f64],
    outflow: &mut [f64],
) -> f64 {
    flows.iter_mut().for_each(|q| *q = 0.0);
    outflow.iter_mut().for_each(|o| *o = 0.0);
    for (&e, &q) in tree.chords().iter().zip(chord_flows) {
        flows[e] = q;
        let (a, b) = net.ends(e);
        outflow[a] += q;
        outflow[b] -= q;
    }
    for &v in tree.node_order().iter().skip(1).rev() {
        let (_, e) = tree.parent(v).expect("non-root node has a parent");
        let need = intensities[v] - outflow[v];
        let (a, b) = net.ends(e);
        let q = if a == v { need } else { -need };
        flows[e] = q;
        outflow[a] += q;
        outflow[b] -= q;
    }
    outflow[tree.root()]
}

/// Tree-edge flows from chord flows and node balances; every node balance
/// `sum(outflow) = Q_i` holds and the root takes the remainder.
pub fn distribute_flows(net: &Network, tree: &TreeDecomposition, iv: &IndependentVariables) -> Vec<f64> {
    let mut flows = vec![0.0; net.edges().len()];
    let mut outflow = vec![0.0; net.nodes().len()];
    fill_tree_flows(net, tree, &iv.chord_flows, &iv.intensities, &mut flows, &mut outflow);
    flows
}

/// Net outflow minus intensity at every node; zero for a balanced state.
pub fn balance_residuals(net: &Network, state: &NetworkState) -> Vec<f64> {
    let mut out = vec![0.0; net.nodes().len()];
    for (e, &q) in state.edge_flow.iter().enumerate() {
        let (a, b) = net.ends(e);
        out[a] += q;
        out[b] -= q;
    }
    out.iter().zip(&state.node_intensity).map(|(o, q)| o - q).collect()
}

/// Potential propagation along the tree. An edge with choice 0 is relaxed:
/// its tension `p_from - p_to` is given instead of a model.
pub(crate) struct Propagator<'a> {
    pub net: &'a Network,
    pub tree: &'a TreeDecomposition,
    pub preorder: Vec<NodeIx>,
}

impl<'a> Propagator<'a> {
    pub fn new(net: &'a Network, tree: &'a TreeDecomposition) -> Self {
        Self { net, tree, preorder: tree.preorder() }
    }

    /// Lenient propagation: a failed solve puts the node at
    /// [`POTENTIAL_FLOOR`] and records the deficit.
    pub fn run(
        &self,
        root_potential: f64,
        flows: &[f64],
        choices: &[usize],
        params: &[Vec<f64>],
        relaxed_tension: &[Option<f64>],
        potentials: &mut [f64],
        deficits: &mut Vec<(EdgeIx, f64)>,
    ) {
        deficits.clear();
        potentials[self.tree.root()] = root_potential;
        for &v in self.preorder.iter().skip(1) {
            let (p, e) = self.tree.parent(v).expect("non-root node has a parent");
            let (from, _) = self.net.ends(e);
            let solved = if choices[e] == 0 {
                let t = relaxed_tension[e].expect("relaxed tree edge without a tension");
                let value = if from == p { potentials[p] - t } else { potentials[p] + t };
                if value > 0.0 {
                    Ok(value)
                } else {
                    Err(POTENTIAL_FLOOR - value)
                }
            } else {
                let model = self.net.edge(e).model(choices[e]).expect("choice validated");
                let dir = if from == p { Direction::Downstream } else { Direction::Upstream };
                model.propagate(&params[e], potentials[p], flows[e], dir)
            };
            potentials[v] = match solved {
                Ok(value) => value,
                Err(deficit) => {
                    deficits.push((e, deficit.max(POTENTIAL_FLOOR)));
                    POTENTIAL_FLOOR
                }
            };
        }
    }
}

/// Node potentials from the root outwards in depth-first pre-order.
pub fn distribute_potentials(
    net: &Network,
    tree: &TreeDecomposition,
    flows: &[f64],
    iv: &IndependentVariables,
) -> Result<Vec<f64>, SolveError> {
    iv.check(net, tree)?;
    let prop = Propagator::new(net, tree);
    let mut potentials = vec![0.0; net.nodes().len()];
    let mut deficits = Vec::new();
    let relaxed = vec![None; net.edges().len()];
    prop.run(iv.root_potential, flows, &iv.edge_choice, &iv.edge_params, &relaxed, &mut potentials, &mut deficits);
    // report the first failure along the traversal
    if let Some(&(e, deficit)) = deficits.first() {
        return Err(SolveError::NoPositiveSolution { edge: net.edge(e).id.clone(), deficit });
    }
    Ok(potentials)
}

/// Residual of each chord's own equation at the tree-derived potentials.
/// Chords without a chosen model are skipped.
pub fn chord_residuals(net: &Network, tree: &TreeDecomposition, state: &NetworkState) -> Vec<(EdgeIx, f64)> {
    tree.chords()
        .iter()
        .filter_map(|&e| {
            let model = net.edge(e).model(state.edge_choice[e])?;
            let (a, b) = net.ends(e);
            let r = model
                .residual(&state.edge_params[e], state.node_potential[a], state.node_potential[b], state.edge_flow[e])
                .ok()?;
            Some((e, r))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Max-norm target for the chord residuals.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-9, max_iterations: 200, max_halvings: 60 }
    }
}

/// Inputs of one solve, including relaxed edges (choice 0).
pub(crate) struct SolveInputs<'b> {
    pub root_potential: f64,
    pub intensities: &'b [f64],
    pub choices: &'b [usize],
    pub params: &'b [Vec<f64>],
    /// Tension of every relaxed tree edge.
    pub relaxed_tension: &'b [Option<f64>],
    /// Value for relaxed chords, initial guess for the others.
    pub chord_flows: &'b [f64],
}

#[derive(Debug, Clone)]
pub(crate) struct RawSolution {
    pub flows: Vec<f64>,
    pub potentials: Vec<f64>,
    pub root_intensity: f64,
    pub deficits: Vec<(EdgeIx, f64)>,
    /// `(chord, residual)` for every chord with a fixed model.
    pub loop_residuals: Vec<(EdgeIx, f64)>,
    pub converged: bool,
    pub iterations: usize,
}

impl RawSolution {
    pub fn max_loop_residual(&self) -> f64 {
        self.loop_residuals.iter().fold(0.0, |m, (_, r)| m.max(r.abs()))
    }
}

/// Reusable steady-state solver; holds per-solve scratch buffers.
pub struct SteadyStateSolver<'a> {
    prop: Propagator<'a>,
    options: SolverOptions,
    flows: Vec<f64>,
    outflow: Vec<f64>,
    potentials: Vec<f64>,
    deficits: Vec<(EdgeIx, f64)>,
    chord_buf: Vec<f64>,
}

impl<'a> SteadyStateSolver<'a> {
    pub fn new(net: &'a Network, tree: &'a TreeDecomposition, options: SolverOptions) -> Self {
        Self {
            prop: Propagator::new(net, tree),
            options,
            flows: vec![0.0; net.edges().len()],
            outflow: vec![0.0; net.nodes().len()],
            potentials: vec![0.0; net.nodes().len()],
            deficits: Vec::new(),
            chord_buf: vec![0.0; tree.chords().len()],
        }
    }

    fn net(&self) -> &'a Network {
        self.prop.net
    }

    fn tree(&self) -> &'a TreeDecomposition {
        self.prop.tree
    }

    /// Chords whose equations are unknowns of the Newton iteration.
    fn active_chords(&self, choices: &[usize]) -> Vec<usize> {
        (0..self.tree().chords().len()).filter(|&k| choices[self.tree().chords()[k]] != 0).collect()
    }

    fn evaluate(&mut self, inputs: &SolveInputs, active: &[usize], x: &[f64], residuals: &mut [f64]) {
        self.chord_buf.copy_from_slice(inputs.chord_flows);
        for (slot, &k) in active.iter().enumerate() {
            self.chord_buf[k] = x[slot];
        }
        let net = self.net();
        let tree = self.tree();
        fill_tree_flows(net, tree, &self.chord_buf, inputs.intensities, &mut self.flows, &mut self.outflow);
        self.prop.run(
            inputs.root_potential,
            &self.flows,
            inputs.choices,
            inputs.params,
            inputs.relaxed_tension,
            &mut self.potentials,
            &mut self.deficits,
        );
        for (slot, &k) in active.iter().enumerate() {
            let e = tree.chords()[k];
            let (a, b) = net.ends(e);
            let model = net.edge(e).model(inputs.choices[e]).expect("active chord has a model");
            residuals[slot] = model
                .residual(&inputs.params[e], self.potentials[a], self.potentials[b], self.flows[e])
                .expect("parameter arity validated");
        }
    }

    pub(crate) fn solve_raw(&mut self, inputs: &SolveInputs) -> Result<RawSolution, SolveError> {
        let net = self.net();
        let tree = self.tree();
        let active = self.active_chords(inputs.choices);
        for &k in &active {
            let e = tree.chords()[k];
            let model = net.edge(e).model(inputs.choices[e]).expect("choice validated");
            if !model.flow_determined() {
                return Err(SolveError::InvalidChordKind { edge: net.edge(e).id.clone() });
            }
        }
        let n = active.len();
        let mut x: Vec<f64> = active.iter().map(|&k| inputs.chord_flows[k]).collect();
        let mut r = vec![0.0; n];
        self.evaluate(inputs, &active, &x, &mut r);
        let opts = self.options;
        let max_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        let two_norm = |v: &[f64]| v.iter().map(|r| r * r).sum::<f64>().sqrt();

        let mut converged = max_norm(&r) <= opts.tolerance;
        let mut iterations = 0;
        let mut trial = vec![0.0; n];
        let mut r_trial = vec![0.0; n];
        while !converged && iterations < opts.max_iterations {
            iterations += 1;
            let mut jac = DMatrix::<f64>::zeros(n, n);
            for j in 0..n {
                let h = 1e-6 * x[j].abs().max(1.0);
                trial.copy_from_slice(&x);
                trial[j] += h;
                self.evaluate(inputs, &active, &trial, &mut r_trial);
                for i in 0..n {
                    jac[(i, j)] = (r_trial[i] - r[i]) / h;
                }
            }
            let Some(dx) = newton_step(jac, &r) else { break };

            let base = two_norm(&r);
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..=opts.max_halvings {
                for i in 0..n {
                    trial[i] = x[i] + lambda * dx[i];
                }
                self.evaluate(inputs, &active, &trial, &mut r_trial);
                if two_norm(&r_trial) < base {
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                break;
            }
            x.copy_from_slice(&trial);
            r.copy_from_slice(&r_trial);
            converged = max_norm(&r) <= opts.tolerance;
        }
        // leave the scratch buffers describing the returned iterate
        self.evaluate(inputs, &active, &x, &mut r);
        let root_intensity = self.outflow[tree.root()];
        Ok(RawSolution {
            flows: self.flows.clone(),
            potentials: self.potentials.clone(),
            root_intensity,
            deficits: self.deficits.clone(),
            loop_residuals: active.iter().zip(&r).map(|(&k, &res)| (tree.chords()[k], res)).collect(),
            converged,
            iterations,
        })
    }

    /// Solves the flow/potential system for fixed choices and parameters;
    /// `iv.chord_flows` is the initial guess.
    pub fn solve(&mut self, iv: &IndependentVariables) -> Result<NetworkState, SolveError> {
        let net = self.net();
        let tree = self.tree();
        iv.check(net, tree)?;
        let relaxed = vec![None; net.edges().len()];
        let raw = self.solve_raw(&SolveInputs {
            root_potential: iv.root_potential,
            intensities: &iv.intensities,
            choices: &iv.edge_choice,
            params: &iv.edge_params,
            relaxed_tension: &relaxed,
            chord_flows: &iv.chord_flows,
        })?;
        if let Some(&(e, deficit)) = raw.deficits.first() {
            return Err(SolveError::NoPositiveSolution { edge: net.edge(e).id.clone(), deficit });
        }
        if !raw.converged {
            return Err(SolveError::NonConvergence { iterations: raw.iterations, residual: raw.max_loop_residual() });
        }
        let mut intensities = iv.intensities.clone();
        intensities[tree.root()] = raw.root_intensity;
        Ok(NetworkState {
            edge_flow: raw.flows,
            node_intensity: intensities,
            node_potential: raw.potentials,
            edge_params: iv.edge_params.clone(),
            edge_choice: iv.edge_choice.clone(),
        })
    }
}

/// Solves `J dx = -r`, regularising the diagonal once if `J` is singular.
fn newton_step(jac: DMatrix<f64>, r: &[f64]) -> Option<Vec<f64>> {
    let n = r.len();
    let rhs = -DVector::from_column_slice(r);
    let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
    if let Some(dx) = jac.clone().lu().solve(&rhs).filter(finite) {
        return Some(dx.iter().copied().collect());
    }
    let regular = jac + DMatrix::<f64>::identity(n, n) * 1e-12;
    regular.lu().solve(&rhs).filter(finite).map(|dx| dx.iter().copied().collect())
}

/// One-shot steady-state solve with default options.
pub fn solve_steady_state(
    net: &Network,
    tree: &TreeDecomposition,
    iv: &IndependentVariables,
) -> Result<NetworkState, SolveError> {
    SteadyStateSolver::new(net, tree, SolverOptions::default()).solve(iv)
}

/// Evaluates every bound: intensities, potentials, parameters, side
/// constraints and operating envelopes. Edges with choice 0 skip the
/// model-dependent checks.
pub fn check_feasibility(net: &Network, state: &NetworkState) -> FeasibilityReport {
    let mut report = FeasibilityReport::default();
    for (v, node) in net.nodes().iter().enumerate() {
        report.push(ConstraintRef::Intensity(v), node.intensity.excess(state.node_intensity[v]));
        report.push(ConstraintRef::Potential(v), node.potential.excess(state.node_potential[v]));
    }
    for (e, edge) in net.edges().iter().enumerate() {
        let (a, b) = net.ends(e);
        let (p_i, p_k, q) = (state.node_potential[a], state.node_potential[b], state.edge_flow[e]);
        for (index, sc) in edge.side_constraints.iter().enumerate() {
            report.push(ConstraintRef::Side { edge: e, index }, sc.bounds.excess(sc.value(p_i, p_k, q)));
        }
        let Some(model) = edge.model(state.edge_choice[e]) else { continue };
        let params = &state.edge_params[e];
        for (index, b) in model.param_bounds.iter().enumerate() {
            if let Some(&c) = params.get(index) {
                report.push(ConstraintRef::Param { edge: e, index }, b.excess(c));
            }
        }
        if let (Some(env), Some(&c)) = (&model.envelope, params.first()) {
            report.push(ConstraintRef::Envelope(e), env.violation(q, c));
        }
    }
    report
}

impl From<ModelError> for SolveError {
    fn from(e: ModelError) -> Self {
        SolveError::InvalidInput(e.to_string())
    }
}
