//! Potential-interval tightening at known flows.
//!
//! Every shipped model is monotone in each potential at fixed flow, so the
//! set of potentials compatible with an edge is the image of the neighbor's
//! interval under a closed-form forward or backward solve. Intersecting
//! these images edge by edge until nothing changes gives intervals
//! `[p_min, p_max]` inside the raw bounds that keep exactly the solvable
//! potentials on tree-structured systems.

use thiserror::Error;

use crate::models::{EdgeModel, ModelKind};
use crate::network::{Bounds, Network};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TightenError {
    #[error("node {node}: no potential within bounds is compatible with the given flows")]
    EmptyInterval { node: String },
}

/// Image of `from` under the edge relation at flow `q`, solving for the
/// downstream potential (`forward`) or the upstream one.
fn image(model: &EdgeModel, params: &[Bounds], q: f64, from: Bounds, forward: bool) -> Option<Bounds> {
    match model.kind {
        ModelKind::LinearResistor { resistance } => {
            let drop = resistance * q;
            let shift = if forward { -drop } else { drop };
            Some(Bounds::new(from.lo + shift, from.hi + shift))
        }
        ModelKind::QuadraticPipe { coefficient } => {
            let s = coefficient * q * q.abs();
            let shift = if forward { -s } else { s };
            let hi_sq = from.hi * from.hi + shift;
            if hi_sq <= 0.0 {
                return None;
            }
            let lo_sq = (from.lo * from.lo + shift).max(0.0);
            Some(Bounds::new(lo_sq.sqrt(), hi_sq.sqrt()))
        }
        ModelKind::RatioMachine => {
            let c = params.first().copied().unwrap_or(model.param_bounds[0]);
            if forward {
                Some(Bounds::new(c.lo * from.lo, c.hi * from.hi))
            } else {
                Some(Bounds::new(from.lo / c.hi, from.hi / c.lo))
            }
        }
    }
}

/// Narrows `current` to `image`; returns the largest endpoint move, or
/// `None` when the intersection is empty. Moves within rounding slack are
/// ignored so round trips keep exact raw endpoints.
fn narrow(current: &mut Bounds, image: Option<Bounds>) -> Option<f64> {
    let image = image?;
    let mut next = current.intersect(&image);
    let slack = 1e-12 * (1.0 + next.lo.abs().max(next.hi.abs()));
    if next.lo - current.lo <= slack {
        next.lo = current.lo;
    }
    if current.hi - next.hi <= slack {
        next.hi = current.hi;
    }
    if next.lo > next.hi + slack {
        return None;
    }
    let next = if next.lo > next.hi { Bounds::point(0.5 * (next.lo + next.hi)) } else { next };
    let change = (next.lo - current.lo).abs().max((next.hi - current.hi).abs());
    *current = next;
    Some(change)
}

/// Tightening from explicit starting intervals. `choices[e] == 0` leaves
/// edge `e` unconstrained; `param_bounds[e]` overrides the chosen model's
/// parameter box when nonempty.
pub(crate) fn tighten_with(
    net: &Network,
    flows: &[f64],
    choices: &[usize],
    param_bounds: &[Vec<Bounds>],
    start: Vec<Bounds>,
) -> Result<Vec<Bounds>, TightenError> {
    let mut intervals = start;
    let empty = |v: usize| TightenError::EmptyInterval { node: net.node(v).id.clone() };
    if let Some(v) = intervals.iter().position(|b| !b.is_ordered()) {
        return Err(empty(v));
    }
    let active: Vec<usize> = (0..net.edges().len()).filter(|&e| choices[e] > 0).collect();
    let max_sweeps = (10 * net.edges().len()).max(1);
    for _ in 0..max_sweeps {
        let mut change = 0.0f64;
        for &e in &active {
            let model = &net.edge(e).models[choices[e] - 1];
            let params = param_bounds.get(e).map(Vec::as_slice).unwrap_or(&[]);
            let (a, b) = net.ends(e);
            let fwd = image(model, params, flows[e], intervals[a], true);
            change = change.max(narrow(&mut intervals[b], fwd).ok_or_else(|| empty(b))?);
            let bwd = image(model, params, flows[e], intervals[b], false);
            change = change.max(narrow(&mut intervals[a], bwd).ok_or_else(|| empty(a))?);
        }
        if change < 1e-12 {
            break;
        }
    }
    Ok(intervals)
}

/// Per-node `[p_min, p_max]` compatible with the given flows and the chosen
/// model on every edge (1-based `choices`).
pub fn tighten_potential_intervals(net: &Network, flows: &[f64], choices: &[usize]) -> Result<Vec<Bounds>, TightenError> {
    let start = net.nodes().iter().map(|n| n.potential).collect();
    tighten_with(net, flows, choices, &[], start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::path;
    use crate::network::{EdgeSpec, NodeSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn series(bounds: Bounds) -> Network {
        let nodes = ["A", "B", "C"].iter().map(|id| NodeSpec::new(*id, Bounds::new(-10.0, 10.0), bounds)).collect();
        let edges = vec![
            EdgeSpec::new("ab", "A", "B", vec![EdgeModel::pipe(1.0)]),
            EdgeSpec::new("bc", "B", "C", vec![EdgeModel::pipe(1.0)]),
        ];
        Network::new(nodes, edges, "A")
    }

    #[test]
    fn series_pipes_tighten_to_hand_values() {
        let net = series(Bounds::new(0.1, 10.0));
        let t = tighten_potential_intervals(&net, &[2.0, 2.0], &[1, 1]).unwrap();
        assert_abs_diff_eq!(t[1].lo, 4.01f64.sqrt(), epsilon = 1e-6);
        assert_abs_diff_eq!(t[1].hi, 96f64.sqrt(), epsilon = 1e-6);
        assert_abs_diff_eq!(t[0].lo, 8.01f64.sqrt(), epsilon = 1e-6);
        assert_abs_diff_eq!(t[2].hi, 92f64.sqrt(), epsilon = 1e-6);
    }

    /// Pins B on a grid and solves A and C exactly; B is solvable iff both
    /// land inside the raw bounds.
    #[test]
    fn series_pipes_match_pinned_oracle() {
        let net = series(Bounds::new(0.1, 10.0));
        let t = tighten_potential_intervals(&net, &[2.0, 2.0], &[1, 1]).unwrap();
        let raw = Bounds::new(0.1, 10.0);
        for i in 0..50 {
            let pb = 0.1 + 9.9 * i as f64 / 49.0;
            let pa = (pb * pb + 4.0).sqrt();
            let pc2 = pb * pb - 4.0;
            let solvable = raw.contains(pa) && pc2 > 0.0 && raw.contains(pc2.sqrt());
            assert_eq!(solvable, t[1].contains(pb), "pB = {pb}");
        }
    }

    #[test]
    fn zero_flow_resistors_share_one_interval() {
        let (mut nodes, edges, root) = path(4, EdgeModel::resistor(2.0)).to_parts();
        let raw = [Bounds::new(1.0, 9.0), Bounds::new(3.0, 12.0), Bounds::new(0.5, 7.0), Bounds::new(2.0, 20.0)];
        for (n, b) in nodes.iter_mut().zip(raw) {
            n.potential = b;
        }
        let net = Network::new(nodes, edges, root);
        let t = tighten_potential_intervals(&net, &[0.0; 3], &[1; 3]).unwrap();
        let all = raw.iter().fold(raw[0], |acc, b| acc.intersect(b));
        for b in t {
            assert_eq!(b, all);
        }
    }

    #[test]
    fn oversized_flow_is_empty() {
        let net = path(2, EdgeModel::pipe(1.0));
        let (mut nodes, edges, root) = net.to_parts();
        for n in &mut nodes {
            n.potential = Bounds::new(1.0, 3.0);
        }
        let net = Network::new(nodes, edges, root);
        assert!(matches!(
            tighten_potential_intervals(&net, &[3.0], &[1]),
            Err(TightenError::EmptyInterval { .. })
        ));
    }

    #[test]
    fn machine_uses_ratio_bounds() {
        let (mut nodes, edges, root) = path(2, EdgeModel::machine(1.5, 2.0)).to_parts();
        nodes[0].potential = Bounds::new(2.0, 4.0);
        nodes[1].potential = Bounds::new(1.0, 5.0);
        let net = Network::new(nodes, edges, root);
        let t = tighten_potential_intervals(&net, &[1.0], &[1]).unwrap();
        assert_eq!(t[1], Bounds::new(3.0, 5.0));
        assert_eq!(t[0], Bounds::new(2.0, 5.0 / 1.5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn tightened_is_within_raw(
            k in proptest::collection::vec(0.1f64..3.0, 3),
            q in proptest::collection::vec(-3.0f64..3.0, 3),
            lo in proptest::collection::vec(0.1f64..5.0, 4),
            w in proptest::collection::vec(0.0f64..20.0, 4),
        ) {
            let (mut nodes, mut edges, root) = path(4, EdgeModel::pipe(1.0)).to_parts();
            for (i, n) in nodes.iter_mut().enumerate() {
                n.potential = Bounds::new(lo[i], lo[i] + w[i]);
            }
            for (i, e) in edges.iter_mut().enumerate() {
                e.models = vec![if i == 1 { EdgeModel::resistor(k[i]) } else { EdgeModel::pipe(k[i]) }];
            }
            let net = Network::new(nodes, edges, root);
            if let Ok(t) = tighten_potential_intervals(&net, &q, &[1, 1, 1]) {
                for (b, n) in t.iter().zip(net.nodes()) {
                    prop_assert!(b.lo >= n.potential.lo && b.hi <= n.potential.hi);
                }
                // any potential of a tightened interval extends to a full solution on a path
                for pin in [t[0].lo, t[0].midpoint(), t[0].hi] {
                    let mut p = pin;
                    for (e, spec) in net.edges().iter().enumerate() {
                        p = spec.models[0].solve_downstream(&[], p, q[e]).unwrap();
                        let b = t[e + 1];
                        prop_assert!(p >= b.lo - 1e-7 && p <= b.hi + 1e-7);
                    }
                }
            }
        }
    }
}
