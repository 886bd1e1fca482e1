//! Seeded instance generators and brute-force oracles shared by the
//! integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use potflow::{
    build_spanning_tree, check_feasibility, solve_steady_state, Bounds, EdgeModel, EdgeSpec, IndependentVariables,
    Network, NetworkState, NodeCost, NodeSpec,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn node_id(v: usize) -> String {
    format!("n{v}")
}

pub fn edge_id(e: usize) -> String {
    format!("e{e:02}")
}

/// Random connected graph: a random tree plus extra edges between distinct
/// non-adjacent pairs, with random orientation and shuffled edge ids.
pub fn connected_pairs(rng: &mut ChaCha8Rng, nodes: usize, edges: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for v in 1..nodes {
        let u = rng.random_range(0..v);
        pairs.push(if rng.random_bool(0.5) { (u, v) } else { (v, u) });
    }
    let adjacent = |pairs: &[(usize, usize)], a: usize, b: usize| pairs.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a));
    for _ in 0..1000 {
        if pairs.len() >= edges {
            break;
        }
        let (a, b) = (rng.random_range(0..nodes), rng.random_range(0..nodes));
        if a != b && !adjacent(&pairs, a, b) {
            pairs.push((a, b));
        }
    }
    pairs.shuffle(rng);
    pairs
}

pub fn assemble(nodes: Vec<NodeSpec>, pairs: &[(usize, usize)], mut models: impl FnMut(usize) -> Vec<EdgeModel>) -> Network {
    let edges = pairs
        .iter()
        .enumerate()
        .map(|(e, &(a, b))| EdgeSpec::new(edge_id(e), node_id(a), node_id(b), models(e)))
        .collect();
    Network::new(nodes, edges, node_id(0))
}

/// Resistor network with fixed intensities at every node but the root.
pub fn linear_network(rng: &mut ChaCha8Rng) -> Network {
    let n = rng.random_range(4..=8);
    let m = rng.random_range(n - 1..=n + 3);
    let pairs = connected_pairs(rng, n, m);
    let nodes = (0..n)
        .map(|v| {
            let q = if v == 0 { Bounds::new(-100.0, 100.0) } else { Bounds::point(rng.random_range(-2.0..2.0)) };
            NodeSpec::new(node_id(v), q, Bounds::new(1.0, 1e4))
        })
        .collect();
    let resistances: Vec<f64> = (0..pairs.len()).map(|_| rng.random_range(0.5..3.0)).collect();
    assemble(nodes, &pairs, |e| vec![EdgeModel::resistor(resistances[e])])
}

pub fn fixed_intensities(net: &Network) -> Vec<f64> {
    net.nodes().iter().map(|n| if n.intensity.width() == 0.0 { n.intensity.lo } else { 0.0 }).collect()
}

/// Potentials and flows of a resistor network from a dense Laplacian solve
/// with the root potential pinned.
pub fn dense_linear_oracle(net: &Network, root_potential: f64, intensities: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = net.nodes().len();
    let root = net.root().unwrap();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (e, spec) in net.edges().iter().enumerate() {
        let r = match spec.models[0].kind {
            potflow::ModelKind::LinearResistor { resistance } => resistance,
            _ => panic!("resistors only"),
        };
        let (i, k) = net.ends(e);
        let g = 1.0 / r;
        a[(i, i)] += g;
        a[(k, k)] += g;
        a[(i, k)] -= g;
        a[(k, i)] -= g;
    }
    for v in 0..n {
        b[v] = intensities[v];
    }
    for c in 0..n {
        a[(root, c)] = 0.0;
    }
    a[(root, root)] = 1.0;
    b[root] = root_potential;
    let p = a.lu().solve(&b).expect("connected network");
    let flows = net
        .edges()
        .iter()
        .enumerate()
        .map(|(e, spec)| {
            let (i, k) = net.ends(e);
            let r = match spec.models[0].kind {
                potflow::ModelKind::LinearResistor { resistance } => resistance,
                _ => unreachable!(),
            };
            (p[i] - p[k]) / r
        })
        .collect();
    (p.iter().copied().collect(), flows)
}

fn random_passive(rng: &mut ChaCha8Rng) -> EdgeModel {
    if rng.random_bool(0.5) {
        EdgeModel::resistor(rng.random_range(0.2..1.0))
    } else {
        EdgeModel::pipe(rng.random_range(0.05..0.4))
    }
}

/// Small mixed instance: 3 to 5 nodes, at most one chord, one to three
/// discrete edges with two or three priced models each, and the root
/// potential as the only continuous variable.
pub fn mixed_instance(rng: &mut ChaCha8Rng) -> Network {
    let n = rng.random_range(3..=5);
    let chords = usize::from(rng.random_bool(0.5));
    let pairs = connected_pairs(rng, n, n - 1 + chords);
    let count = rng.random_range(1..=3usize.min(pairs.len()));
    let edges: Vec<usize> = (0..pairs.len()).collect();
    let discrete: Vec<usize> = edges.choose_multiple(rng, count).copied().collect();
    let nodes = (0..n)
        .map(|v| {
            if v == 0 {
                NodeSpec::new(node_id(v), Bounds::new(0.0, 50.0), Bounds::new(10.0, 14.0))
                    .with_cost(NodeCost { per_intensity: 0.0, per_potential: 1.0 })
            } else {
                let lo = rng.random_range(3.0..7.0);
                let hi = lo + rng.random_range(8.0..20.0);
                NodeSpec::new(node_id(v), Bounds::point(-rng.random_range(0.5..2.0)), Bounds::new(lo, hi))
            }
        })
        .collect();
    let mut models: Vec<Vec<EdgeModel>> = Vec::new();
    for e in 0..pairs.len() {
        let arity = if discrete.contains(&e) { rng.random_range(2..=3) } else { 1 };
        models.push((0..arity).map(|_| random_passive(rng).with_cost(if arity > 1 { rng.random_range(0.0..4.0) } else { 0.0 })).collect());
    }
    assemble(nodes, &pairs, |e| models[e].clone())
}

/// Tree instance with the root potential and every intensity fixed, so only
/// the model choices vary.
pub fn pure_discrete_tree(rng: &mut ChaCha8Rng) -> Network {
    let n = rng.random_range(3..=6);
    let pairs = connected_pairs(rng, n, n - 1);
    let nodes = (0..n)
        .map(|v| {
            if v == 0 {
                NodeSpec::new(node_id(v), Bounds::new(0.0, 50.0), Bounds::point(15.0))
            } else {
                let lo = rng.random_range(3.0..9.0);
                NodeSpec::new(node_id(v), Bounds::point(-rng.random_range(0.5..2.0)), Bounds::new(lo, lo + 20.0))
            }
        })
        .collect();
    let forced = rng.random_range(0..pairs.len());
    let models: Vec<Vec<EdgeModel>> = (0..pairs.len())
        .map(|e| {
            let arity = if e == forced { rng.random_range(2..=3) } else { rng.random_range(1..=3) };
            (0..arity).map(|_| random_passive(rng).with_cost(rng.random_range(0.0..4.0))).collect()
        })
        .collect();
    assemble(nodes, &pairs, |e| models[e].clone())
}

/// Every full choice vector, last edge fastest.
pub fn all_choices(net: &Network) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for edge in net.edges() {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (1..=edge.arity()).map(move |d| {
                    let mut v = prefix.clone();
                    v.push(d);
                    v
                })
            })
            .collect();
    }
    out
}

/// Objective of a state with the given choices, summed term by term.
pub fn objective(net: &Network, state: &NetworkState, choices: &[usize]) -> f64 {
    let nodes: f64 = net
        .nodes()
        .iter()
        .enumerate()
        .map(|(v, n)| n.cost.per_intensity * state.node_intensity[v] + n.cost.per_potential * state.node_potential[v])
        .sum();
    let edges: f64 = net
        .edges()
        .iter()
        .enumerate()
        .map(|(e, spec)| spec.cost.per_flow * state.edge_flow[e].abs() + spec.models[choices[e] - 1].cost)
        .sum();
    nodes + edges
}

/// Steady state for fixed choices and root potential, if it exists and is
/// feasible.
pub fn feasible_state(net: &Network, choices: &[usize], root_potential: f64) -> Option<NetworkState> {
    let tree = build_spanning_tree(net, net.root_id()).ok()?;
    let mut iv = IndependentVariables::defaults(net, &tree, root_potential);
    iv.intensities = fixed_intensities(net);
    iv.edge_choice = choices.to_vec();
    let state = solve_steady_state(net, &tree, &iv).ok()?;
    check_feasibility(net, &state).is_feasible().then_some(state)
}

/// Best objective per choice vector over a grid of root potentials with
/// the given step; `None` where no grid point is feasible.
pub fn brute_force_by_choice(net: &Network, step: f64) -> Vec<(Vec<usize>, Option<f64>)> {
    let root = net.root().unwrap();
    let range = net.node(root).potential;
    let points = if range.width() == 0.0 { 1 } else { (range.width() / step).round() as usize + 1 };
    all_choices(net)
        .into_iter()
        .map(|d| {
            let best = (0..points)
                .filter_map(|i| {
                    let p = (range.lo + i as f64 * step).min(range.hi);
                    feasible_state(net, &d, p).map(|state| objective(net, &state, &d))
                })
                .reduce(f64::min);
            (d, best)
        })
        .collect()
}

/// Exhaustive minimum over every choice vector and a grid of root
/// potentials with the given step.
pub fn brute_force(net: &Network, step: f64) -> Option<(Vec<usize>, f64)> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (d, f) in brute_force_by_choice(net, step) {
        if let Some(f) = f {
            if best.as_ref().is_none_or(|b| f < b.1) {
                best = Some((d, f));
            }
        }
    }
    best
}

/// Nodes reachable from the root over the given edges.
pub fn reachable(net: &Network, edges: &[usize]) -> Vec<bool> {
    let mut seen = vec![false; net.nodes().len()];
    let root = net.root().unwrap();
    seen[root] = true;
    let mut changed = true;
    while changed {
        changed = false;
        for &e in edges {
            let (a, b) = net.ends(e);
            if seen[a] != seen[b] {
                seen[a] = true;
                seen[b] = true;
                changed = true;
            }
        }
    }
    seen
}
