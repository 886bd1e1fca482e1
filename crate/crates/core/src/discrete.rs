//! Branch-and-bound over fragments of the discrete choice vector.
//!
//! Fragments are visited in lexicographic order: a feasible fragment of
//! length `m < M` is lengthened by appending a 1, anything else is advanced
//! by incrementing its last given position with carry. An infeasible
//! fragment is never lengthened, which prunes all its completions.

use log::debug;

use crate::continuous::{
    build_dominant, find_feasible, minimize_continuous, seeded_start, solve_fixed, ContinuousProblem,
    ContinuousResult, SearchOptions,
};
use crate::network::{fragment_order, EdgeIx, Fragment, NetworkState};
use crate::state::SolveError;

/// Position of a lexicographic fragment enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnumerationCursor {
    current: Fragment,
    arity: Vec<usize>,
    exhausted: bool,
}

impl EnumerationCursor {
    /// Starts at the empty fragment.
    pub fn new(arity: Vec<usize>) -> Self {
        Self { current: Fragment::empty(arity.len()), arity, exhausted: false }
    }

    pub fn at(fragment: Fragment, arity: Vec<usize>) -> Result<Self, String> {
        let fragment = Fragment::new(fragment.values().to_vec(), &arity)?;
        Ok(Self { current: fragment, arity, exhausted: false })
    }

    pub fn current(&self) -> &Fragment {
        &self.current
    }

    pub fn arity(&self) -> &[usize] {
        &self.arity
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }
}

/// Advances the cursor; `None` once the enumeration is exhausted.
pub fn next_fragment(cursor: &mut EnumerationCursor, current_is_feasible: bool) -> Option<Fragment> {
    if cursor.exhausted {
        return None;
    }
    let mut d = cursor.current.values().to_vec();
    let m = cursor.current.length();
    if current_is_feasible && m < d.len() {
        d[m] = 1;
    } else {
        // increment d_m, or carry to the largest position that can grow
        let Some(pos) = (0..m).rev().find(|&j| d[j] < cursor.arity[j]) else {
            cursor.exhausted = true;
            return None;
        };
        d[pos] += 1;
        d[pos + 1..].iter_mut().for_each(|v| *v = 0);
    }
    cursor.current = Fragment::from_raw(d);
    Some(cursor.current.clone())
}

/// Verdict on a partial fragment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probe {
    Infeasible,
    Feasible { lower_bound: Option<f64> },
}

/// Problem-specific side of the enumeration.
pub trait FragmentOracle {
    type Solution;
    fn probe(&mut self, fragment: &Fragment, incumbent: Option<f64>) -> Probe;
    /// Objective and solution of a full-length vector, `None` if infeasible.
    fn evaluate(&mut self, full: &Fragment) -> Option<(f64, Self::Solution)>;
}

#[derive(Debug, Clone)]
pub struct EnumerationOutcome<S> {
    pub best: Option<(Fragment, f64, S)>,
    pub nodes_visited: usize,
    /// Fragments found infeasible (their completions are skipped).
    pub nodes_pruned: usize,
    /// Fragments cut by the lower bound.
    pub nodes_bounded: usize,
    pub proven_exhaustive: bool,
    pub budget_exhausted: bool,
    /// Incumbent value after each improvement.
    pub incumbent_history: Vec<f64>,
    /// Every full-length vector evaluated, in visit order.
    pub full_vectors: Vec<Fragment>,
}

/// Runs the enumeration for at most `budget` fragment visits.
pub fn enumerate<O: FragmentOracle>(
    arity: &[usize],
    oracle: &mut O,
    budget: usize,
    bound_tolerance: f64,
) -> EnumerationOutcome<O::Solution> {
    let mut out = EnumerationOutcome {
        best: None,
        nodes_visited: 0,
        nodes_pruned: 0,
        nodes_bounded: 0,
        proven_exhaustive: false,
        budget_exhausted: false,
        incumbent_history: Vec::new(),
        full_vectors: Vec::new(),
    };
    let mut cursor = EnumerationCursor::new(arity.to_vec());
    loop {
        if out.nodes_visited >= budget {
            out.budget_exhausted = true;
            break;
        }
        out.nodes_visited += 1;
        let fragment = cursor.current().clone();
        let incumbent = out.best.as_ref().map(|b| b.1);
        let feasible = if fragment.is_full() {
            out.full_vectors.push(fragment.clone());
            match oracle.evaluate(&fragment) {
                Some((value, solution)) => {
                    debug!("full {fragment}: {value}");
                    if incumbent.is_none_or(|v| value < v) {
                        out.incumbent_history.push(value);
                        out.best = Some((fragment.clone(), value, solution));
                    }
                    true
                }
                None => {
                    debug!("full {fragment}: infeasible");
                    false
                }
            }
        } else {
            match oracle.probe(&fragment, incumbent) {
                Probe::Infeasible => {
                    debug!("fragment {fragment}: infeasible");
                    out.nodes_pruned += 1;
                    false
                }
                Probe::Feasible { lower_bound: Some(lb) }
                    if incumbent.is_some_and(|v| lb > v + bound_tolerance * (1.0 + v.abs())) =>
                {
                    debug!("fragment {fragment}: bound {lb} above incumbent");
                    out.nodes_bounded += 1;
                    false
                }
                Probe::Feasible { .. } => true,
            }
        };
        if next_fragment(&mut cursor, feasible).is_none() {
            out.proven_exhaustive = true;
            break;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbOptions {
    /// Maximum number of fragment visits.
    pub budget: usize,
    /// Cut fragments whose dominant optimum exceeds the incumbent.
    pub lower_bound_pruning: bool,
    pub search: SearchOptions,
    /// Evaluation budget of one fragment feasibility probe.
    pub feasibility_evaluations: usize,
}

impl Default for BnbOptions {
    fn default() -> Self {
        Self { budget: 100_000, lower_bound_pruning: true, search: SearchOptions::default(), feasibility_evaluations: 2000 }
    }
}

#[derive(Debug, Clone)]
pub struct BnbResult {
    /// Discrete edges in fragment order.
    pub discrete_edges: Vec<EdgeIx>,
    /// Best choice per discrete edge (fragment order).
    pub best_choice: Option<Vec<usize>>,
    /// Best choice per edge of the network.
    pub edge_choice: Option<Vec<usize>>,
    pub best_state: Option<NetworkState>,
    pub best_x: Option<Vec<f64>>,
    pub best_value: f64,
    pub nodes_visited: usize,
    pub nodes_pruned: usize,
    pub nodes_bounded: usize,
    pub proven_exhaustive: bool,
    pub budget_exhausted: bool,
    pub incumbent_history: Vec<f64>,
}

/// Feasibility verdict for a fragment with the witness point found.
#[derive(Debug, Clone)]
pub struct FragmentProbe {
    pub feasible: bool,
    pub max_violation: f64,
    pub witness: Option<Vec<f64>>,
}

/// Feasibility of the fragment's dominant: a feasibility-phase search,
/// preceded by interval tightening whenever all flows are fixed.
pub fn fragment_feasible(
    base: &ContinuousProblem,
    order: &[EdgeIx],
    fragment: &Fragment,
    options: &BnbOptions,
) -> FragmentProbe {
    let infeasible = |v: f64| FragmentProbe { feasible: false, max_violation: v, witness: None };
    let Ok(dominant) = build_dominant(base, order, fragment) else { return infeasible(f64::INFINITY) };
    let Ok(x0) = seeded_start(&dominant) else { return infeasible(f64::INFINITY) };
    let opts = SearchOptions { max_evaluations: options.feasibility_evaluations, ..options.search };
    let r = find_feasible(&dominant, Some(&x0), &opts);
    FragmentProbe { feasible: r.feasible, max_violation: r.max_violation(), witness: r.feasible.then_some(r.x) }
}

struct NetworkOracle<'p, 'a> {
    base: &'p ContinuousProblem<'a>,
    order: &'p [EdgeIx],
    options: &'p BnbOptions,
}

impl FragmentOracle for NetworkOracle<'_, '_> {
    type Solution = ContinuousResult;

    fn probe(&mut self, fragment: &Fragment, incumbent: Option<f64>) -> Probe {
        let probe = fragment_feasible(self.base, self.order, fragment, self.options);
        if !probe.feasible {
            return Probe::Infeasible;
        }
        if !self.options.lower_bound_pruning || incumbent.is_none() {
            return Probe::Feasible { lower_bound: None };
        }
        let dominant = build_dominant(self.base, self.order, fragment).expect("built during the probe");
        let r = minimize_continuous(&dominant, probe.witness.as_deref(), &self.options.search);
        Probe::Feasible { lower_bound: r.feasible.then_some(r.objective) }
    }

    fn evaluate(&mut self, full: &Fragment) -> Option<(f64, ContinuousResult)> {
        let fixed = build_dominant(self.base, self.order, full).ok()?;
        let r = solve_fixed(&fixed, &self.options.search)?;
        r.feasible.then_some((r.objective, r))
    }
}

/// Branch-and-bound over every edge with more than one model. The base
/// problem supplies variable boxes; its edge modes are ignored.
pub fn branch_and_bound(base: &ContinuousProblem, options: &BnbOptions) -> Result<BnbResult, SolveError> {
    let net = base.net();
    let discrete: Vec<EdgeIx> = (0..net.edges().len()).filter(|&e| net.edge(e).arity() > 1).collect();
    let order = fragment_order(net, base.tree(), &discrete).map_err(|e| SolveError::InvalidInput(e.to_string()))?;
    let arity: Vec<usize> = order.iter().map(|&e| net.edge(e).arity()).collect();
    let mut oracle = NetworkOracle { base, order: &order, options };
    let out = enumerate(&arity, &mut oracle, options.budget, 1e-6);
    let mut result = BnbResult {
        discrete_edges: order.clone(),
        best_choice: None,
        edge_choice: None,
        best_state: None,
        best_x: None,
        best_value: f64::INFINITY,
        nodes_visited: out.nodes_visited,
        nodes_pruned: out.nodes_pruned,
        nodes_bounded: out.nodes_bounded,
        proven_exhaustive: out.proven_exhaustive,
        budget_exhausted: out.budget_exhausted,
        incumbent_history: out.incumbent_history,
    };
    if let Some((fragment, value, solution)) = out.best {
        result.edge_choice = Some(solution.state().edge_choice.clone());
        result.best_choice = Some(fragment.values().to_vec());
        result.best_state = Some(solution.state().clone());
        result.best_x = Some(solution.x);
        result.best_value = value;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::{fixture_d, path};
    use crate::network::{build_spanning_tree, Bounds, EdgeSpec, Network, NodeSpec};
    use crate::models::EdgeModel;
    use crate::state::{check_feasibility, solve_steady_state, IndependentVariables};

    fn cursor_at(values: &[usize], arity: &[usize]) -> EnumerationCursor {
        EnumerationCursor::at(Fragment::new(values.to_vec(), arity).unwrap(), arity.to_vec()).unwrap()
    }

    #[test]
    fn successor_examples() {
        let mut c = cursor_at(&[0, 0, 0], &[2, 2, 2]);
        assert_eq!(next_fragment(&mut c, true).unwrap().values(), &[1, 0, 0]);
        let mut c = cursor_at(&[1, 2, 0], &[3, 2, 2]);
        assert_eq!(next_fragment(&mut c, false).unwrap().values(), &[2, 0, 0]);
        let mut c = cursor_at(&[3, 2, 0], &[3, 2, 2]);
        assert!(next_fragment(&mut c, false).is_none());
        assert!(c.is_exhausted());
        assert!(next_fragment(&mut c, true).is_none());
    }

    struct AlwaysFeasible;

    impl FragmentOracle for AlwaysFeasible {
        type Solution = ();
        fn probe(&mut self, _: &Fragment, _: Option<f64>) -> Probe {
            Probe::Feasible { lower_bound: None }
        }
        fn evaluate(&mut self, _: &Fragment) -> Option<(f64, ())> {
            Some((0.0, ()))
        }
    }

    #[test]
    fn flat_enumeration_counts() {
        let out = enumerate(&[2, 2, 2], &mut AlwaysFeasible, usize::MAX, 1e-6);
        assert_eq!(out.full_vectors.len(), 8);
        assert_eq!(out.nodes_visited, 15);
        assert!(out.proven_exhaustive);
        let mut expected = Vec::new();
        for a in 1..=2 {
            for b in 1..=2 {
                for c in 1..=2 {
                    expected.push(vec![a, b, c]);
                }
            }
        }
        let got: Vec<Vec<usize>> = out.full_vectors.iter().map(|f| f.values().to_vec()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn budget_stops_without_proof() {
        let out = enumerate(&[3, 3], &mut AlwaysFeasible, 5, 1e-6);
        assert_eq!(out.nodes_visited, 5);
        assert!(out.budget_exhausted);
        assert!(!out.proven_exhaustive);
    }

    fn base(net: &Network) -> ContinuousProblem<'_> {
        let tree = build_spanning_tree(net, net.root_id()).unwrap();
        ContinuousProblem::full_dominant(net, tree).unwrap()
    }

    #[test]
    fn fragment_feasibility_on_fixture_d() {
        let net = fixture_d();
        let b = base(&net);
        let order = vec![0, 1];
        let opts = BnbOptions::default();
        assert!(fragment_feasible(&b, &order, &Fragment::empty(2), &opts).feasible);
        // R = 3 at 5 units drops 15: p_A <= 19 - 15 = 4 < 5
        let f = Fragment::new(vec![2, 0], &[2, 2]).unwrap();
        assert!(!fragment_feasible(&b, &order, &f, &opts).feasible);
        let full = Fragment::new(vec![1, 2], &[2, 2]).unwrap();
        let probe = fragment_feasible(&b, &order, &full, &opts);
        assert!(probe.feasible);
        let tree = build_spanning_tree(&net, "S").unwrap();
        let mut iv = IndependentVariables::defaults(&net, &tree, probe.witness.unwrap()[0]);
        iv.intensities = vec![0.0, -2.0, -3.0];
        iv.edge_choice = vec![1, 2];
        let s = solve_steady_state(&net, &tree, &iv).unwrap();
        assert!(check_feasibility(&net, &s).max_violation <= 1e-6);
    }

    #[test]
    fn fixture_d_matches_enumeration() {
        let net = fixture_d();
        let b = base(&net);
        for lb in [true, false] {
            let r = branch_and_bound(&b, &BnbOptions { lower_bound_pruning: lb, ..BnbOptions::default() }).unwrap();
            assert_eq!(r.best_choice, Some(vec![1, 2]));
            assert!((r.best_value - 26.0).abs() <= 1e-3);
            assert!(r.proven_exhaustive);
            assert!(r.nodes_pruned >= 1);
            assert!(r.incumbent_history.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn deterministic_results() {
        let net = fixture_d();
        let b = base(&net);
        let r1 = branch_and_bound(&b, &BnbOptions::default()).unwrap();
        let r2 = branch_and_bound(&b, &BnbOptions::default()).unwrap();
        assert_eq!(r1.best_x, r2.best_x);
        assert_eq!(r1.best_value, r2.best_value);
        assert_eq!(
            (r1.nodes_visited, r1.nodes_pruned, r1.nodes_bounded),
            (r2.nodes_visited, r2.nodes_pruned, r2.nodes_bounded)
        );
    }

    #[test]
    fn pure_discrete_tree_is_exact() {
        // fixed root potential and demands: nothing continuous remains
        let (mut nodes, mut edges, root) = path(4, EdgeModel::resistor(1.0)).to_parts();
        nodes[0].potential = Bounds::point(20.0);
        nodes[0].intensity = Bounds::new(0.0, 10.0);
        for (i, n) in nodes.iter_mut().enumerate().skip(1) {
            n.intensity = Bounds::point(-1.0);
            n.potential = Bounds::new(2.0 + i as f64, 30.0);
        }
        for (i, e) in edges.iter_mut().enumerate() {
            e.models = vec![
                EdgeModel::resistor(1.0).with_cost(5.0 + i as f64),
                EdgeModel::resistor(3.0).with_cost(1.0),
                EdgeModel::pipe(2.0).with_cost(2.0),
            ];
        }
        let net = Network::new(nodes, edges, root);
        let b = base(&net);
        assert_eq!(b.free_count(), 3, "only tensions of relaxed edges are free");
        let r = branch_and_bound(&b, &BnbOptions::default()).unwrap();
        assert!(r.proven_exhaustive);

        let tree = build_spanning_tree(&net, "1").unwrap();
        let mut best = (f64::INFINITY, vec![]);
        for a in 1..=3 {
            for bb in 1..=3 {
                for c in 1..=3 {
                    let d = vec![a, bb, c];
                    let mut iv = IndependentVariables::defaults(&net, &tree, 20.0);
                    iv.intensities = vec![0.0, -1.0, -1.0, -1.0];
                    iv.edge_choice = d.clone();
                    let Ok(s) = solve_steady_state(&net, &tree, &iv) else { continue };
                    if !check_feasibility(&net, &s).is_feasible() {
                        continue;
                    }
                    let f: f64 = (0..3).map(|e| net.edge(e).models[d[e] - 1].cost).sum();
                    if f < best.0 {
                        best = (f, d);
                    }
                }
            }
        }
        assert_eq!(r.best_value, best.0);
        assert_eq!(r.best_choice, Some(best.1));
    }

    #[test]
    fn single_model_edges_are_not_discrete() {
        let nodes = vec![
            NodeSpec::new("s", Bounds::new(0.0, 5.0), Bounds::new(5.0, 10.0)),
            NodeSpec::new("k", Bounds::point(-1.0), Bounds::new(1.0, 10.0)),
        ];
        let net = Network::new(nodes, vec![EdgeSpec::new("e", "s", "k", vec![EdgeModel::pipe(1.0)])], "s");
        let r = branch_and_bound(&base(&net), &BnbOptions::default()).unwrap();
        assert!(r.discrete_edges.is_empty());
        assert_eq!(r.nodes_visited, 1);
        assert_eq!(r.best_choice, Some(vec![]));
        assert!(r.proven_exhaustive);
    }
}
