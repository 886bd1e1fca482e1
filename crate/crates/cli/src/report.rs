//! Command reports and their text/JSON renderings.
//!
//! JSON goes through `serde_json::Value`, whose maps are sorted, so keys come
//! out in a stable order and re-serializing a parsed report reproduces it
//! byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub id: String,
    pub potential: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRow {
    pub id: String,
    pub from: String,
    pub to: String,
    pub choice: usize,
    pub params: Vec<f64>,
    pub flow: f64,
    /// Chosen model's residual at the reported state.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationRow {
    pub constraint: String,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDoc {
    pub nodes: Vec<NodeRow>,
    pub edges: Vec<EdgeRow>,
    pub violations: Vec<ViolationRow>,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub feasible: bool,
    pub state: StateDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRow {
    pub variable: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub nodes_visited: usize,
    pub nodes_pruned: usize,
    pub nodes_bounded: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub method: String,
    pub feasible: bool,
    /// `F` at the reported solution.
    pub objective: Option<f64>,
    /// Optimum of the fully relaxed problem, when computed.
    pub lower_bound: Option<f64>,
    /// Discrete edges in fragment order.
    pub discrete_edges: Vec<String>,
    /// Choice per discrete edge, same order.
    pub best_choice: Option<Vec<usize>>,
    /// Edge id to choice, all edges.
    pub edge_choice: Vec<(String, usize)>,
    pub continuous: Vec<VariableRow>,
    pub state: Option<StateDoc>,
    pub counters: Counters,
    pub proven_exhaustive: bool,
    pub budget_exhausted: bool,
    pub incumbent_history: Vec<f64>,
    pub restarted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub kind: String,
    pub target: String,
    pub base: f64,
    pub radius: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalDoc {
    pub lower: f64,
    pub upper: f64,
    pub lower_capped: bool,
    pub upper_capped: bool,
    pub stable: bool,
    pub probes: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloDocOut {
    pub samples: usize,
    pub passed: usize,
    pub fraction: f64,
    pub threshold: f64,
    pub verdict: bool,
    pub seed: u64,
    pub base_feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub edge: String,
    pub capacity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub node: String,
    pub raw_lower: f64,
    pub raw_upper: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReportDoc {
    pub parameter: ParameterRow,
    pub strong: IntervalDoc,
    pub weak: Option<IntervalDoc>,
    /// Some weak probe took its reference objective from the nearest
    /// feasible frozen probe.
    pub weak_nearest_reference: bool,
    pub monte_carlo: Option<MonteCarloDocOut>,
    pub capacities: Vec<CapacityRow>,
    pub tightened: Option<Vec<IntervalRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub edges: Vec<CapacityRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightenReport {
    pub nodes: Vec<IntervalRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Report {
    Simulate(SimulateReport),
    Optimize(OptimizeReport),
    Stability(StabilityReportDoc),
    Capacity(CapacityReport),
    Tighten(TightenReport),
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn to_json(report: &Report) -> String {
    let value = serde_json::to_value(report).expect("reports hold finite numbers and string keys");
    let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
    s.push('\n');
    s
}

fn num(v: f64) -> String {
    format!("{v:>18.9}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| format!("{:>18}", "-"), num)
}

fn state_text(out: &mut String, s: &StateDoc) {
    let _ = writeln!(out, "{:<16}{:>18}{:>18}", "node", "potential", "intensity");
    for n in &s.nodes {
        let _ = writeln!(out, "{:<16}{}{}", n.id, num(n.potential), num(n.intensity));
    }
    let _ = writeln!(out, "{:<16}{:>8}{:>18}{:>18}", "edge", "choice", "flow", "residual");
    for e in &s.edges {
        let _ = writeln!(out, "{:<16}{:>8}{}{}", e.id, e.choice, num(e.flow), num(e.residual));
    }
    if s.violations.is_empty() {
        let _ = writeln!(out, "violations: none");
    } else {
        let _ = writeln!(out, "violations:");
        for v in &s.violations {
            let _ = writeln!(out, "  {:<40}{}", v.constraint, num(v.magnitude));
        }
    }
}

fn interval_text(out: &mut String, name: &str, i: &IntervalDoc) {
    let cap = |c: bool| if c { " (scan limit)" } else { "" };
    let _ = writeln!(out, "{name} interval: [{}{}, {}{}]", i.lower, cap(i.lower_capped), i.upper, cap(i.upper_capped));
    let _ = writeln!(out, "{name} stable: {} ({} probes)", i.stable, i.probes);
    for w in &i.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
}

fn capacity_text(out: &mut String, rows: &[CapacityRow]) {
    let _ = writeln!(out, "{:<16}{:>18}", "edge", "capacity");
    for r in rows {
        let _ = writeln!(out, "{:<16}{}", r.edge, opt(r.capacity));
    }
}

fn intervals_text(out: &mut String, rows: &[IntervalRow]) {
    let _ = writeln!(out, "{:<16}{:>18}{:>18}{:>18}{:>18}", "node", "raw lower", "raw upper", "lower", "upper");
    for r in rows {
        let _ = writeln!(out, "{:<16}{}{}{}{}", r.node, num(r.raw_lower), num(r.raw_upper), num(r.lower), num(r.upper));
    }
}

/// Fixed-width human-readable rendering.
pub fn to_text(report: &Report) -> String {
    let mut out = String::new();
    match report {
        Report::Simulate(r) => {
            let _ = writeln!(out, "simulate: {}", if r.feasible { "feasible" } else { "infeasible" });
            state_text(&mut out, &r.state);
        }
        Report::Optimize(r) => {
            let _ = writeln!(out, "optimize ({}): {}", r.method, if r.feasible { "feasible" } else { "no feasible solution" });
            let _ = writeln!(out, "objective:   {}", opt(r.objective).trim_start());
            if let Some(lb) = r.lower_bound {
                let _ = writeln!(out, "lower bound: {}", num(lb).trim_start());
            }
            if let Some(best) = &r.best_choice {
                let pairs: Vec<String> = r.discrete_edges.iter().zip(best).map(|(e, d)| format!("{e}={d}")).collect();
                let _ = writeln!(out, "best choice: {}", pairs.join(" "));
            }
            for v in &r.continuous {
                let _ = writeln!(out, "  {:<30}{}", v.variable, num(v.value));
            }
            let c = &r.counters;
            let _ = writeln!(
                out,
                "visited {} pruned {} bounded {} evaluations {} exhaustive {} budget exhausted {}",
                c.nodes_visited, c.nodes_pruned, c.nodes_bounded, c.evaluations, r.proven_exhaustive, r.budget_exhausted
            );
            if let Some(s) = &r.state {
                state_text(&mut out, s);
            }
        }
        Report::Stability(r) => {
            let p = &r.parameter;
            let _ = writeln!(out, "parameter: {} {} base {} radius {}", p.kind, p.target, p.base, p.radius);
            interval_text(&mut out, "strong", &r.strong);
            if let Some(w) = &r.weak {
                interval_text(&mut out, "weak", w);
                if r.weak_nearest_reference {
                    let _ = writeln!(out, "note: weak reference taken at the nearest feasible frozen probe");
                }
            }
            if let Some(mc) = &r.monte_carlo {
                let _ = writeln!(
                    out,
                    "monte carlo: {}/{} = {} (threshold {}, seed {}): {}",
                    mc.passed,
                    mc.samples,
                    mc.fraction,
                    mc.threshold,
                    mc.seed,
                    if mc.verdict { "stable" } else { "not stable" }
                );
            }
            capacity_text(&mut out, &r.capacities);
            if let Some(t) = &r.tightened {
                intervals_text(&mut out, t);
            }
        }
        Report::Capacity(r) => capacity_text(&mut out, &r.edges),
        Report::Tighten(r) => intervals_text(&mut out, &r.nodes),
    }
    out
}

pub fn render(report: &Report, format: Format) -> String {
    match format {
        Format::Text => to_text(report),
        Format::Json => to_json(report),
    }
}

/// Writes the rendering to `path`.
pub fn write_report(report: &Report, format: Format, path: &Path) -> io::Result<()> {
    fs::write(path, render(report, format))
}
