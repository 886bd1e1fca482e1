//! JSON network and scenario documents.
//!
//! Loading goes through `serde_path_to_error` so that schema errors name the
//! offending field, and through `serde_ignored` so that unknown fields are
//! either rejected (strict) or logged (lenient).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use potflow::{
    validate_network, Bounds, EdgeCost, EdgeModel, EdgeSpec, ModelKind, Network, NodeCost, NodeSpec,
    OperatingEnvelope, SideConstraint, SideConstraintKind, ValidationReport,
};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum InputError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at line {line}, column {column} (byte offset {offset}): {message}")]
    Parse { path: String, line: usize, column: usize, offset: usize, message: String },
    #[error("{path}: schema error at `{field}`: {message}")]
    Schema { path: String, field: String, message: String },
    #[error("{path}: invalid network:\n{report}")]
    Validation { path: String, report: ValidationReport },
}

/// Scalar or closed range; a scalar `v` reads as `[v, v]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Range {
    Value(f64),
    Pair([f64; 2]),
}

impl Range {
    pub fn bounds(&self) -> Bounds {
        match *self {
            Range::Value(v) => Bounds::point(v),
            Range::Pair([lo, hi]) => Bounds::new(lo, hi),
        }
    }

    pub fn from_bounds(b: Bounds) -> Self {
        if b.lo == b.hi {
            Range::Value(b.lo)
        } else {
            Range::Pair([b.lo, b.hi])
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeCostDoc {
    #[serde(default)]
    pub per_intensity: f64,
    #[serde(default)]
    pub per_potential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: String,
    pub intensity: Range,
    pub potential: Range,
    #[serde(default)]
    pub cost: NodeCostDoc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKindDoc {
    Resistor,
    Pipe,
    Machine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub kind: ModelKindDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resistance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficient: Option<f64>,
    /// Ratio bounds of a machine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<[f64; 2]>,
    /// Operating envelope vertices `(q, c)` of a machine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideKindDoc {
    PowerLike,
    DissipationLike,
    FlowMagnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideConstraintDoc {
    pub kind: SideKindDoc,
    pub bounds: [f64; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeCostDoc {
    #[serde(default)]
    pub per_flow: f64,
    #[serde(default)]
    pub param_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub id: String,
    pub from: String,
    pub to: String,
    pub models: Vec<ModelDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub side_constraints: Vec<SideConstraintDoc>,
    #[serde(default)]
    pub cost: EdgeCostDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub schema_version: String,
    pub root: String,
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<EdgeDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKindDoc {
    RootPotential,
    MachineRatio,
    Intensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDoc {
    pub kind: ControlKindDoc,
    /// Edge id (machine ratio) or node id (intensity).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub value: f64,
    pub neighborhood: [f64; 2],
    #[serde(default)]
    pub switch_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterKindDoc {
    NodeDemand,
    NodeIntensity,
    PotentialLower,
    PotentialUpper,
    ModelCoefficient,
}

fn default_tolerance() -> f64 {
    1e-4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDoc {
    pub kind: ParameterKindDoc,
    /// Node id, or edge id for model coefficients.
    pub target: String,
    /// 1-based model index for model coefficients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<usize>,
    pub base: f64,
    pub radius: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<[f64; 2]>,
    /// Also run the weak-stability scan.
    #[serde(default = "default_true")]
    pub weak: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisDoc {
    pub kind: ParameterKindDoc,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<usize>,
    pub center: f64,
    pub radius: f64,
}

fn default_samples() -> usize {
    potflow::DEFAULT_SAMPLES
}

fn default_threshold() -> f64 {
    potflow::DEFAULT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloDoc {
    pub axes: Vec<AxisDoc>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_evaluations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasibility_tolerance: Option<f64>,
    /// Fragment visits of branch-and-bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton_iterations: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_potential: Option<Range>,
    /// Node id to intensity value or range.
    #[serde(default)]
    pub intensities: BTreeMap<String, Range>,
    /// Edge id to fixed 1-based model choice.
    #[serde(default)]
    pub choices: BTreeMap<String, usize>,
    /// Edge id to model parameters (machine ratio).
    #[serde(default)]
    pub params: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub controls: Vec<ControlDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<ParameterDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloDoc>,
    #[serde(default)]
    pub solver: SolverDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// 0-based offset of the byte at which the error was detected.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(path: &str, text: &str, e: &serde_json::Error) -> InputError {
    InputError::Parse {
        path: path.to_string(),
        line: e.line(),
        column: e.column(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

fn schema(path: &str, field: impl Into<String>, message: impl Into<String>) -> InputError {
    InputError::Schema { path: path.to_string(), field: field.into(), message: message.into() }
}

/// Deserializes `text`, naming the failing field; unknown fields are an
/// error when `strict`, a warning otherwise.
pub fn parse_document<T: DeserializeOwned>(path: &str, text: &str, strict: bool) -> Result<T, InputError> {
    let mut ignored = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let mut track = |p: serde_ignored::Path| ignored.push(p.to_string());
    let parsed: Result<T, _> = serde_path_to_error::deserialize(serde_ignored::Deserializer::new(&mut de, &mut track));
    let value = match parsed {
        Ok(v) => v,
        Err(e) => {
            let field = e.path().to_string();
            let inner = e.into_inner();
            return Err(match inner.classify() {
                serde_json::error::Category::Data => schema(path, field, inner.to_string()),
                _ => parse_error(path, text, &inner),
            });
        }
    };
    de.end().map_err(|e| parse_error(path, text, &e))?;
    if let Some(first) = ignored.first() {
        if strict {
            return Err(schema(path, first.clone(), "unknown field"));
        }
        for field in &ignored {
            warn!("{path}: ignoring unknown field `{field}`");
        }
    }
    Ok(value)
}

fn read(path: &Path) -> Result<String, InputError> {
    fs::read_to_string(path).map_err(|source| InputError::Io { path: path.display().to_string(), source })
}

fn model_from_doc(path: &str, field: &str, doc: &ModelDoc) -> Result<EdgeModel, InputError> {
    let require = |v: Option<f64>, name: &str| v.ok_or_else(|| schema(path, format!("{field}.{name}"), "missing field"));
    let forbid = |present: bool, name: &str| {
        if present {
            Err(schema(path, format!("{field}.{name}"), format!("not applicable to a {:?} model", doc.kind)))
        } else {
            Ok(())
        }
    };
    let model = match doc.kind {
        ModelKindDoc::Resistor => {
            forbid(doc.coefficient.is_some(), "coefficient")?;
            forbid(doc.ratio.is_some(), "ratio")?;
            forbid(doc.envelope.is_some(), "envelope")?;
            EdgeModel::resistor(require(doc.resistance, "resistance")?)
        }
        ModelKindDoc::Pipe => {
            forbid(doc.resistance.is_some(), "resistance")?;
            forbid(doc.ratio.is_some(), "ratio")?;
            forbid(doc.envelope.is_some(), "envelope")?;
            EdgeModel::pipe(require(doc.coefficient, "coefficient")?)
        }
        ModelKindDoc::Machine => {
            forbid(doc.resistance.is_some(), "resistance")?;
            forbid(doc.coefficient.is_some(), "coefficient")?;
            let [lo, hi] = doc.ratio.ok_or_else(|| schema(path, format!("{field}.ratio"), "missing field"))?;
            let mut m = EdgeModel::machine(lo, hi);
            if let Some(vertices) = &doc.envelope {
                let env = OperatingEnvelope::new(vertices.iter().map(|v| (v[0], v[1])).collect())
                    .map_err(|msg| schema(path, format!("{field}.envelope"), msg))?;
                m = m.with_envelope(env);
            }
            m
        }
    };
    Ok(model.with_cost(doc.cost))
}

/// Converts a parsed document; endpoints must name declared nodes.
pub fn network_from_document(path: &str, doc: &NetworkDocument) -> Result<Network, InputError> {
    if doc.schema_version != SCHEMA_VERSION {
        return Err(schema(path, "schema_version", format!("unsupported version {:?}", doc.schema_version)));
    }
    let ids: HashSet<&str> = doc.nodes.iter().map(|n| n.id.as_str()).collect();
    let nodes = doc
        .nodes
        .iter()
        .map(|n| {
            NodeSpec::new(n.id.clone(), n.intensity.bounds(), n.potential.bounds()).with_cost(NodeCost {
                per_intensity: n.cost.per_intensity,
                per_potential: n.cost.per_potential,
            })
        })
        .collect();
    let mut edges = Vec::with_capacity(doc.edges.len());
    for (i, e) in doc.edges.iter().enumerate() {
        for (end, id) in [("from", &e.from), ("to", &e.to)] {
            if !ids.contains(id.as_str()) {
                return Err(schema(path, format!("edges[{i}].{end}"), format!("edge {}: unknown node {id:?}", e.id)));
            }
        }
        let models = e
            .models
            .iter()
            .enumerate()
            .map(|(j, m)| model_from_doc(path, &format!("edges[{i}].models[{j}]"), m))
            .collect::<Result<Vec<_>, _>>()?;
        let mut spec = EdgeSpec::new(e.id.clone(), e.from.clone(), e.to.clone(), models)
            .with_cost(EdgeCost { per_flow: e.cost.per_flow, param_energy: e.cost.param_energy });
        for sc in &e.side_constraints {
            let kind = match sc.kind {
                SideKindDoc::PowerLike => SideConstraintKind::PowerLike,
                SideKindDoc::DissipationLike => SideConstraintKind::DissipationLike,
                SideKindDoc::FlowMagnitude => SideConstraintKind::FlowMagnitude,
            };
            spec = spec.with_side_constraint(SideConstraint::new(kind, sc.bounds[0], sc.bounds[1]));
        }
        edges.push(spec);
    }
    let net = Network::new(nodes, edges, doc.root.clone());
    let report = validate_network(&net);
    if !report.is_empty() {
        return Err(InputError::Validation { path: path.to_string(), report });
    }
    Ok(net)
}

/// Inverse of [`network_from_document`].
pub fn network_to_document(net: &Network) -> NetworkDocument {
    let nodes = net
        .nodes()
        .iter()
        .map(|n| NodeDoc {
            id: n.id.clone(),
            intensity: Range::from_bounds(n.intensity),
            potential: Range::from_bounds(n.potential),
            cost: NodeCostDoc { per_intensity: n.cost.per_intensity, per_potential: n.cost.per_potential },
        })
        .collect();
    let edges = net
        .edges()
        .iter()
        .map(|e| EdgeDoc {
            id: e.id.clone(),
            from: e.from.clone(),
            to: e.to.clone(),
            models: e.models.iter().map(model_to_doc).collect(),
            side_constraints: e
                .side_constraints
                .iter()
                .map(|sc| SideConstraintDoc {
                    kind: match sc.kind {
                        SideConstraintKind::PowerLike => SideKindDoc::PowerLike,
                        SideConstraintKind::DissipationLike => SideKindDoc::DissipationLike,
                        SideConstraintKind::FlowMagnitude => SideKindDoc::FlowMagnitude,
                    },
                    bounds: [sc.bounds.lo, sc.bounds.hi],
                })
                .collect(),
            cost: EdgeCostDoc { per_flow: e.cost.per_flow, param_energy: e.cost.param_energy },
        })
        .collect();
    NetworkDocument { schema_version: SCHEMA_VERSION.to_string(), root: net.root_id().to_string(), nodes, edges }
}

fn model_to_doc(m: &EdgeModel) -> ModelDoc {
    let mut doc =
        ModelDoc { kind: ModelKindDoc::Resistor, resistance: None, coefficient: None, ratio: None, envelope: None, cost: m.cost };
    match m.kind {
        ModelKind::LinearResistor { resistance } => doc.resistance = Some(resistance),
        ModelKind::QuadraticPipe { coefficient } => {
            doc.kind = ModelKindDoc::Pipe;
            doc.coefficient = Some(coefficient);
        }
        ModelKind::RatioMachine => {
            doc.kind = ModelKindDoc::Machine;
            doc.ratio = Some([m.param_bounds[0].lo, m.param_bounds[0].hi]);
            doc.envelope = m.envelope.as_ref().map(|env| env.vertices().iter().map(|&(q, c)| [q, c]).collect());
        }
    }
    doc
}

/// Reads, parses and validates a network document.
pub fn load_network(path: &Path, strict: bool) -> Result<Network, InputError> {
    let text = read(path)?;
    let label = path.display().to_string();
    let doc: NetworkDocument = parse_document(&label, &text, strict)?;
    network_from_document(&label, &doc)
}

/// Reads a scenario and checks its ids against `net`.
pub fn load_scenario(path: &Path, net: &Network, strict: bool) -> Result<ScenarioDocument, InputError> {
    let text = read(path)?;
    let label = path.display().to_string();
    let doc: ScenarioDocument = parse_document(&label, &text, strict)?;
    check_scenario(&label, &doc, net)?;
    Ok(doc)
}

fn check_scenario(path: &str, doc: &ScenarioDocument, net: &Network) -> Result<(), InputError> {
    if let Some(v) = &doc.schema_version {
        if v != SCHEMA_VERSION {
            return Err(schema(path, "schema_version", format!("unsupported version {v:?}")));
        }
    }
    let node = |field: String, id: &str| match net.node_index(id) {
        Some(_) => Ok(()),
        None => Err(schema(path, field, format!("unknown node {id:?}"))),
    };
    let edge = |field: String, id: &str| match net.edge_index(id) {
        Some(e) => Ok(e),
        None => Err(schema(path, field, format!("unknown edge {id:?}"))),
    };
    for id in doc.intensities.keys() {
        node(format!("intensities.{id}"), id)?;
    }
    for (id, &d) in &doc.choices {
        let e = edge(format!("choices.{id}"), id)?;
        if d == 0 || d > net.edge(e).arity() {
            return Err(schema(path, format!("choices.{id}"), format!("choice {d} outside 1..={}", net.edge(e).arity())));
        }
    }
    for id in doc.params.keys() {
        edge(format!("params.{id}"), id)?;
    }
    for (i, c) in doc.controls.iter().enumerate() {
        let field = format!("controls[{i}].target");
        match (c.kind, &c.target) {
            (ControlKindDoc::RootPotential, _) => {}
            (ControlKindDoc::MachineRatio, Some(id)) => {
                edge(field, id)?;
            }
            (ControlKindDoc::Intensity, Some(id)) => node(field, id)?,
            (_, None) => return Err(schema(path, field, "missing field")),
        }
    }
    let mut targets: Vec<(String, ParameterKindDoc, &str, Option<usize>)> = Vec::new();
    if let Some(p) = &doc.parameter {
        targets.push(("parameter".into(), p.kind, &p.target, p.model));
    }
    if let Some(mc) = &doc.monte_carlo {
        for (i, a) in mc.axes.iter().enumerate() {
            targets.push((format!("monte_carlo.axes[{i}]"), a.kind, &a.target, a.model));
        }
    }
    for (field, kind, target, model) in targets {
        if kind == ParameterKindDoc::ModelCoefficient {
            let e = edge(format!("{field}.target"), target)?;
            let d = model.ok_or_else(|| schema(path, format!("{field}.model"), "missing field"))?;
            if d == 0 || d > net.edge(e).arity() {
                return Err(schema(path, format!("{field}.model"), format!("model {d} outside 1..={}", net.edge(e).arity())));
            }
        } else {
            node(format!("{field}.target"), target)?;
        }
    }
    Ok(())
}
