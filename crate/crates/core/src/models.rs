//! Steady-state edge equation families.
//!
//! Every edge carries a family of models `f_d(p_i, p_k, q, c) = 0` relating the
//! potentials at its two ends, the flow through it and a (possibly empty)
//! vector of continuous operating parameters. Three kinds are shipped:
//!
//! | kind             | residual                     | parameters |
//! |------------------|------------------------------|------------|
//! | `LinearResistor` | `(p_i - p_k) - R q`          | none       |
//! | `QuadraticPipe`  | `(p_i^2 - p_k^2) - K q abs(q)` | none       |
//! | `RatioMachine`   | `c p_i - p_k`                | ratio `c`  |
//!
//! All residuals are strictly increasing in `p_i` and strictly decreasing in
//! `p_k` for positive potentials; the passive kinds are also strictly
//! decreasing in `q`.

use thiserror::Error;

use crate::network::Bounds;

/// Absolute tolerance of the closed-form solves.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

/// Potential assigned to a node whose upstream solve had no positive root.
pub(crate) const POTENTIAL_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("model expects {expected} continuous parameter(s), got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("no positive potential solves the edge equation (deficit {deficit:.6e})")]
    NoPositiveSolution { deficit: f64 },
    #[error("flow through a ratio machine is not determined by its end potentials")]
    FlowUndetermined,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    /// Ohm-type linear drop, `p_i - p_k = R q`.
    LinearResistor { resistance: f64 },
    /// Isothermal gas-pipe law, `p_i^2 - p_k^2 = K q abs(q)`.
    QuadraticPipe { coefficient: f64 },
    /// Compressor-like boost, `p_k = c p_i` with the ratio `c` as parameter.
    RatioMachine,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::LinearResistor { .. } => "linear_resistor",
            ModelKind::QuadraticPipe { .. } => "quadratic_pipe",
            ModelKind::RatioMachine => "ratio_machine",
        }
    }
}

/// Which partial monotonicity properties a residual has.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Monotonicity {
    pub increasing_in_upstream: bool,
    pub decreasing_in_downstream: bool,
    /// False when the residual does not depend on the flow at all.
    pub decreasing_in_flow: bool,
}

/// One member `f_d` of an edge's model family.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeModel {
    pub kind: ModelKind,
    /// Bounds `[c^-, c^+]` for each continuous parameter.
    pub param_bounds: Vec<Bounds>,
    /// Operating range in the `(q, c)` plane; only meaningful for machines.
    pub envelope: Option<OperatingEnvelope>,
    /// Fixed cost of selecting this model.
    pub cost: f64,
}

impl EdgeModel {
    pub fn resistor(resistance: f64) -> Self {
        Self {
            kind: ModelKind::LinearResistor { resistance },
            param_bounds: Vec::new(),
            envelope: None,
            cost: 0.0,
        }
    }

    pub fn pipe(coefficient: f64) -> Self {
        Self {
            kind: ModelKind::QuadraticPipe { coefficient },
            param_bounds: Vec::new(),
            envelope: None,
            cost: 0.0,
        }
    }

    /// Ratio machine with ratio bounds `[lo, hi]`.
    pub fn machine(lo: f64, hi: f64) -> Self {
        Self {
            kind: ModelKind::RatioMachine,
            param_bounds: vec![Bounds::new(lo, hi)],
            envelope: None,
            cost: 0.0,
        }
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = cost;
        self
    }

    pub fn with_envelope(mut self, envelope: OperatingEnvelope) -> Self {
        self.envelope = Some(envelope);
        self
    }

    pub fn param_arity(&self) -> usize {
        match self.kind {
            ModelKind::LinearResistor { .. } | ModelKind::QuadraticPipe { .. } => 0,
            ModelKind::RatioMachine => 1,
        }
    }

    pub fn monotonicity(&self) -> Monotonicity {
        Monotonicity {
            increasing_in_upstream: true,
            decreasing_in_downstream: true,
            decreasing_in_flow: !matches!(self.kind, ModelKind::RatioMachine),
        }
    }

    /// True when the flow is a function of the end potentials.
    pub fn flow_determined(&self) -> bool {
        !matches!(self.kind, ModelKind::RatioMachine)
    }

    /// Structural problems with the model, if any.
    pub fn check(&self) -> Result<(), String> {
        match self.kind {
            ModelKind::LinearResistor { resistance } if !(resistance > 0.0 && resistance.is_finite()) => {
                return Err(format!("resistance must be positive, got {resistance}"));
            }
            ModelKind::QuadraticPipe { coefficient } if !(coefficient > 0.0 && coefficient.is_finite()) => {
                return Err(format!("pipe coefficient must be positive, got {coefficient}"));
            }
            _ => {}
        }
        if self.param_bounds.len() != self.param_arity() {
            return Err(format!(
                "{} expects {} parameter bound(s), got {}",
                self.kind.name(),
                self.param_arity(),
                self.param_bounds.len()
            ));
        }
        for b in &self.param_bounds {
            if !b.is_ordered() {
                return Err(format!("inverted parameter bounds [{}, {}]", b.lo, b.hi));
            }
            if matches!(self.kind, ModelKind::RatioMachine) && b.lo <= 0.0 {
                return Err(format!("machine ratio bounds must be positive, got [{}, {}]", b.lo, b.hi));
            }
        }
        if self.envelope.is_some() && self.param_arity() == 0 {
            return Err(format!("{} cannot carry an operating envelope", self.kind.name()));
        }
        Ok(())
    }

    fn check_arity(&self, c: &[f64]) -> Result<(), ModelError> {
        let expected = self.param_arity();
        if c.len() != expected {
            return Err(ModelError::ArityMismatch { expected, got: c.len() });
        }
        Ok(())
    }

    /// Evaluates `f_d(p_i, p_k, q, c)`.
    pub fn residual(&self, c: &[f64], p_i: f64, p_k: f64, q: f64) -> Result<f64, ModelError> {
        self.check_arity(c)?;
        Ok(match self.kind {
            ModelKind::LinearResistor { resistance } => (p_i - p_k) - resistance * q,
            ModelKind::QuadraticPipe { coefficient } => (p_i * p_i - p_k * p_k) - coefficient * q * q.abs(),
            ModelKind::RatioMachine => c[0] * p_i - p_k,
        })
    }

    /// Sum of the magnitudes of the residual's terms; a natural unit for it.
    pub fn residual_scale(&self, c: &[f64], p_i: f64, p_k: f64, q: f64) -> f64 {
        match self.kind {
            ModelKind::LinearResistor { resistance } => p_i.abs() + p_k.abs() + resistance * q.abs(),
            ModelKind::QuadraticPipe { coefficient } => p_i * p_i + p_k * p_k + coefficient * q * q,
            ModelKind::RatioMachine => c.first().map_or(0.0, |c| (c * p_i).abs()) + p_k.abs(),
        }
    }

    /// Potential at the `to` end given the `from` potential and the flow.
    pub fn solve_downstream(&self, c: &[f64], p_i: f64, q: f64) -> Result<f64, ModelError> {
        self.check_arity(c)?;
        self.propagate(c, p_i, q, Direction::Downstream)
            .map_err(|deficit| ModelError::NoPositiveSolution { deficit })
    }

    /// Potential at the `from` end given the `to` potential and the flow.
    pub fn solve_upstream(&self, c: &[f64], p_k: f64, q: f64) -> Result<f64, ModelError> {
        self.check_arity(c)?;
        self.propagate(c, p_k, q, Direction::Upstream)
            .map_err(|deficit| ModelError::NoPositiveSolution { deficit })
    }

    /// Closed-form potential solve. `Err` carries how far the solution is
    /// from being positive, in potential units.
    pub(crate) fn propagate(&self, c: &[f64], known: f64, q: f64, dir: Direction) -> Result<f64, f64> {
        let value = match (self.kind, dir) {
            (ModelKind::LinearResistor { resistance }, Direction::Downstream) => known - resistance * q,
            (ModelKind::LinearResistor { resistance }, Direction::Upstream) => known + resistance * q,
            (ModelKind::QuadraticPipe { coefficient }, d) => {
                let drop = coefficient * q * q.abs();
                let square = match d {
                    Direction::Downstream => known * known - drop,
                    Direction::Upstream => known * known + drop,
                };
                if square <= 0.0 {
                    return Err((-square).sqrt());
                }
                square.sqrt()
            }
            (ModelKind::RatioMachine, Direction::Downstream) => c[0] * known,
            (ModelKind::RatioMachine, Direction::Upstream) => known / c[0],
        };
        if value > 0.0 {
            Ok(value)
        } else {
            Err(-value)
        }
    }

    /// Flow implied by the end potentials.
    pub fn solve_flow(&self, c: &[f64], p_i: f64, p_k: f64) -> Result<f64, ModelError> {
        self.check_arity(c)?;
        match self.kind {
            ModelKind::LinearResistor { resistance } => Ok((p_i - p_k) / resistance),
            ModelKind::QuadraticPipe { coefficient } => {
                let diff = p_i * p_i - p_k * p_k;
                Ok(diff.signum() * (diff.abs() / coefficient).sqrt())
            }
            ModelKind::RatioMachine => Err(ModelError::FlowUndetermined),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    Downstream,
    Upstream,
}

/// Simple polygon in the `(q, c)` plane bounding a machine's operating range.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingEnvelope {
    vertices: Vec<(f64, f64)>,
}

impl OperatingEnvelope {
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self, String> {
        if vertices.len() < 3 {
            return Err(format!("envelope needs at least 3 vertices, got {}", vertices.len()));
        }
        if vertices.iter().any(|(q, c)| !q.is_finite() || !c.is_finite()) {
            return Err("envelope vertices must be finite".to_string());
        }
        let env = Self { vertices };
        if !env.is_simple() {
            return Err("envelope polygon is self-intersecting".to_string());
        }
        Ok(env)
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    fn segments(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        let segs: Vec<_> = self.segments().collect();
        for i in 0..n {
            let (a, b) = segs[i];
            if a == b {
                return false;
            }
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (c, d) = segs[j];
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    fn boundary_distance(&self, q: f64, c: f64) -> f64 {
        self.segments()
            .map(|(a, b)| point_segment_distance((q, c), a, b))
            .fold(f64::INFINITY, f64::min)
    }

    fn strictly_inside(&self, q: f64, c: f64) -> bool {
        // even-odd ray cast towards +q
        let mut inside = false;
        for ((x1, y1), (x2, y2)) in self.segments() {
            if (y1 > c) != (y2 > c) {
                let x_cross = x1 + (c - y1) * (x2 - x1) / (y2 - y1);
                if q < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn contains(&self, q: f64, c: f64) -> bool {
        self.violation(q, c) == 0.0
    }

    /// Zero inside or on the boundary, Euclidean distance to the polygon otherwise.
    pub fn violation(&self, q: f64, c: f64) -> f64 {
        let d = self.boundary_distance(q, c);
        if d <= 1e-12 || self.strictly_inside(q, c) {
            0.0
        } else {
            d
        }
    }

    /// Largest flow inside the envelope at ratio `c`, if the horizontal line
    /// through `c` meets the polygon.
    pub fn max_flow_at(&self, c: f64) -> Option<f64> {
        let mut best: Option<f64> = None;
        for ((x1, y1), (x2, y2)) in self.segments() {
            let (lo, hi) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
            if c < lo || c > hi {
                continue;
            }
            let x = if y1 == y2 { x1.max(x2) } else { x1 + (c - y1) * (x2 - x1) / (y2 - y1) };
            best = Some(best.map_or(x, |b| b.max(x)));
        }
        best
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(a, c, d))
        || (d2 == 0.0 && on_segment(b, c, d))
        || (d3 == 0.0 && on_segment(c, a, b))
        || (d4 == 0.0 && on_segment(d, a, b))
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (x, y) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - x).powi(2) + (p.1 - y).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideConstraintKind {
    /// `q (p_k - p_i)`: energy added to the flow.
    PowerLike,
    /// `q abs(p_i - p_k)`.
    DissipationLike,
    /// `abs(q)`.
    FlowMagnitude,
}

impl SideConstraintKind {
    pub fn name(&self) -> &'static str {
        match self {
            SideConstraintKind::PowerLike => "power_like",
            SideConstraintKind::DissipationLike => "dissipation_like",
            SideConstraintKind::FlowMagnitude => "flow_magnitude",
        }
    }
}

/// Extra restriction `a^- <= a(p_i, p_k, q) <= a^+` on an edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideConstraint {
    pub kind: SideConstraintKind,
    pub bounds: Bounds,
}

impl SideConstraint {
    pub fn new(kind: SideConstraintKind, lo: f64, hi: f64) -> Self {
        Self { kind, bounds: Bounds::new(lo, hi) }
    }

    pub fn value(&self, p_i: f64, p_k: f64, q: f64) -> f64 {
        match self.kind {
            SideConstraintKind::PowerLike => q * (p_k - p_i),
            SideConstraintKind::DissipationLike => q * (p_i - p_k).abs(),
            SideConstraintKind::FlowMagnitude => q.abs(),
        }
    }
}
