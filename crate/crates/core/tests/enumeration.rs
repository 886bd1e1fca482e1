mod common;

use std::collections::BTreeSet;

use common::*;
use potflow::{
    branch_and_bound, build_spanning_tree, enumerate, fragment_order, prefix_subnetwork, BnbOptions, Bounds,
    ContinuousProblem, EdgeModel, Fragment, FragmentOracle, NodeSpec, Probe,
};
use rand::seq::IndexedRandom;
use rand::Rng;

#[test]
fn every_fragment_prefix_is_connected_and_rooted() {
    let mut r = rng(3);
    for _ in 0..100 {
        let n = r.random_range(2..=10);
        let m = r.random_range(n - 1..=n + 6);
        let pairs = connected_pairs(&mut r, n, m);
        let nodes = (0..n).map(|v| NodeSpec::new(node_id(v), Bounds::point(0.0), Bounds::new(1.0, 2.0))).collect();
        let net = assemble(nodes, &pairs, |_| vec![EdgeModel::resistor(1.0)]);
        let tree = build_spanning_tree(&net, net.root_id()).unwrap();
        let all: Vec<usize> = (0..pairs.len()).collect();
        let count = r.random_range(1..=pairs.len());
        let discrete: Vec<usize> = all.choose_multiple(&mut r, count).copied().collect();
        let order = fragment_order(&net, &tree, &discrete).unwrap();
        assert_eq!(order.iter().collect::<BTreeSet<_>>(), discrete.iter().collect::<BTreeSet<_>>());
        for k in 1..=order.len() {
            let sub = prefix_subnetwork(&net, &tree, &order, k);
            assert!(sub.root().is_some(), "prefix {k} lost the root");
            let edges: Vec<usize> = (0..sub.edges().len()).collect();
            assert!(reachable(&sub, &edges).iter().all(|&s| s), "prefix {k} disconnected");
            for &e in &order[..k] {
                assert!(sub.edge_index(&net.edge(e).id).is_some());
            }
        }
    }
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
fn unpruned_enumeration_visits_each_vector_once() {
    let mut r = rng(4);
    let mut done = 0;
    while done < 20 {
        let len = r.random_range(1..=6);
        let arity: Vec<usize> = (0..len).map(|_| r.random_range(1..=5)).collect();
        let total: usize = arity.iter().product();
        if total > 500 {
            continue;
        }
        done += 1;
        let out = enumerate(&arity, &mut AlwaysFeasible, usize::MAX, 1e-6);
        assert!(out.proven_exhaustive);
        assert_eq!(out.full_vectors.len(), total);
        let distinct: BTreeSet<Vec<usize>> = out.full_vectors.iter().map(|f| f.values().to_vec()).collect();
        assert_eq!(distinct.len(), total);
        assert!(distinct.iter().all(|d| d.iter().zip(&arity).all(|(v, n)| (1..=*n).contains(v))));
    }
}

#[test]
fn pure_discrete_trees_are_solved_exactly() {
    let mut r = rng(5);
    let mut done = 0;
    while done < 25 {
        let net = pure_discrete_tree(&mut r);
        let tree = build_spanning_tree(&net, net.root_id()).unwrap();
        let base = ContinuousProblem::full_dominant(&net, tree).unwrap();
        let out = branch_and_bound(&base, &BnbOptions::default()).unwrap();
        assert!(out.proven_exhaustive);
        let Some((choice, value)) = brute_force(&net, 1.0) else {
            assert!(out.best_choice.is_none());
            continue;
        };
        done += 1;
        assert_eq!(out.edge_choice.as_ref(), Some(&choice), "instance {done}");
        assert!((out.best_value - value).abs() <= 1e-9 * (1.0 + value.abs()));
    }
}
