mod common;

use common::*;
use potflow::{
    branch_and_bound, build_spanning_tree, BnbOptions, ContinuousProblem, Evaluator,
};
use rand::Rng;

#[test]
fn dominant_contains_every_feasible_point() {
    let mut r = rng(7);
    let mut instances = 0;
    while instances < 20 {
        let net = mixed_instance(&mut r);
        let tree = build_spanning_tree(&net, net.root_id()).unwrap();
        let dominant = ContinuousProblem::full_dominant(&net, tree).unwrap();
        let mut evaluator = Evaluator::new(&dominant);
        let choices = all_choices(&net);
        let range = net.node(net.root().unwrap()).potential;
        let mut points = 0;
        for _ in 0..2000 {
            if points == 50 {
                break;
            }
            let d = &choices[r.random_range(0..choices.len())];
            let p = r.random_range(range.lo..=range.hi);
            let Some(state) = feasible_state(&net, d, p) else { continue };
            points += 1;
            let x = dominant.project(&state);
            let eval = evaluator.evaluate(&x);
            assert!(eval.report.max_violation <= 1e-7, "{:?}", eval.report.violations);
        }
        if points > 0 {
            instances += 1;
        }
    }
}

#[test]
fn pruning_does_not_change_the_optimum() {
    let mut r = rng(8);
    for _ in 0..50 {
        let net = mixed_instance(&mut r);
        let tree = build_spanning_tree(&net, net.root_id()).unwrap();
        let base = ContinuousProblem::full_dominant(&net, tree).unwrap();
        let pruned = branch_and_bound(&base, &BnbOptions::default()).unwrap();
        let plain = branch_and_bound(&base, &BnbOptions { lower_bound_pruning: false, ..BnbOptions::default() }).unwrap();
        assert_eq!(pruned.best_choice.is_some(), plain.best_choice.is_some());
        if pruned.best_choice.is_some() {
            let tol = 1e-6 * (1.0 + plain.best_value.abs());
            assert!((pruned.best_value - plain.best_value).abs() <= tol, "{} vs {}", pruned.best_value, plain.best_value);
        }
    }
}

#[test]
fn mixed_instances_match_brute_force() {
    let mut r = rng(9);
    let mut done = 0;
    while done < 5 {
        let net = mixed_instance(&mut r);
        let Some((_, value)) = brute_force(&net, 1e-3) else { continue };
        done += 1;
        let tree = build_spanning_tree(&net, net.root_id()).unwrap();
        let base = ContinuousProblem::full_dominant(&net, tree).unwrap();
        let out = branch_and_bound(&base, &BnbOptions::default()).unwrap();
        assert!(out.best_choice.is_some());
        assert!((out.best_value - value).abs() <= 1e-3 * value.abs(), "{} vs {value}", out.best_value);
    }
}
