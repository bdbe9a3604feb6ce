//! Nonlinear equivalent-circuit model of the hydraulic circuit.
//!
//! The penstock is split into `I` elements, each an R-L branch carrying the
//! element flow `Q_i` into a shunt capacitance holding the piezometric head
//! `h_i`. The upstream reservoir is an ideal head source `H_u`; the turbine is
//! a series inductance `L_t` followed by a flow- and opening-dependent head
//! drop `H_t(Q_t, y)` discharging into the downstream reservoir `H_d`.
//!
//! State layout is `[Q_1 .. Q_I, h_1 .. h_I, Q_t]`, dimension `2I + 1`.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{require_positive, Error, Result};
use crate::ode;

/// Openings below this are clamped before evaluating the turbine law.
pub const MIN_OPENING: f64 = 1e-4;

/// Physical constants of the plant. Optional fields are derived from the
/// others when absent; [`PlantParameters::resolved`] materializes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParameters {
    /// W
    pub rated_power: f64,
    /// m
    pub nominal_head: f64,
    /// m³/s
    pub nominal_discharge: f64,
    /// rad/s
    pub nominal_speed: f64,
    /// N·m
    pub nominal_torque: f64,
    /// m
    pub penstock_length: f64,
    /// m
    pub penstock_diameter: f64,
    /// m/s
    pub wave_speed: f64,
    pub element_count: usize,
    /// m
    pub wall_thickness: f64,
    /// Darcy-Weisbach friction factor.
    pub darcy_friction: f64,
    /// kg/m³
    pub water_density: f64,
    /// m/s²
    pub gravity: f64,
    /// s²/m². Defaults to the inductance of one penstock element.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turbine_inductance: Option<f64>,
    /// Defaults to `rated_power / (ρ g Q_nom H_nom)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turbine_efficiency: Option<f64>,
    /// m
    pub upstream_head: f64,
    /// m
    pub downstream_head: f64,
    /// Element elevations in m, upstream first. Defaults to a linear drop
    /// from `upstream_head` to zero at the turbine-end element.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevation_profile: Option<Vec<f64>>,
    pub pole_pairs: u32,
    /// Hz
    pub grid_frequency: f64,
}

impl Default for PlantParameters {
    fn default() -> Self {
        Self::reference()
    }
}

impl PlantParameters {
    /// The 230 MW, 315 m medium-head reference plant.
    pub fn reference() -> Self {
        Self {
            rated_power: 230e6,
            nominal_head: 315.0,
            nominal_discharge: 85.3,
            nominal_speed: 375.0 * 2.0 * PI / 60.0,
            nominal_torque: 5.86e6,
            penstock_length: 1100.0,
            penstock_diameter: 5.0,
            wave_speed: 1100.0,
            element_count: 20,
            wall_thickness: 0.05,
            darcy_friction: 0.02,
            water_density: 1000.0,
            gravity: 9.81,
            turbine_inductance: None,
            turbine_efficiency: None,
            upstream_head: 320.0,
            downstream_head: 5.0,
            elevation_profile: None,
            pole_pairs: 8,
            grid_frequency: 50.0,
        }
    }

    pub fn area(&self) -> f64 {
        PI * self.penstock_diameter * self.penstock_diameter / 4.0
    }

    pub fn element_length(&self) -> f64 {
        self.penstock_length / self.element_count as f64
    }

    pub fn turbine_inductance(&self) -> f64 {
        self.turbine_inductance
            .unwrap_or_else(|| self.element_length() / (self.gravity * self.area()))
    }

    pub fn turbine_efficiency(&self) -> f64 {
        self.turbine_efficiency.unwrap_or_else(|| {
            self.rated_power
                / (self.water_density * self.gravity * self.nominal_discharge * self.nominal_head)
        })
    }

    pub fn elevations(&self) -> Vec<f64> {
        match &self.elevation_profile {
            Some(z) => z.clone(),
            None => {
                let n = self.element_count as f64;
                (1..=self.element_count)
                    .map(|i| self.upstream_head * (n - i as f64) / n)
                    .collect()
            }
        }
    }

    /// Head-to-pressure factor `k = ρ g` in Pa/m.
    pub fn pressure_factor(&self) -> f64 {
        self.water_density * self.gravity
    }

    /// Copy with every derived field filled in.
    pub fn resolved(&self) -> Self {
        Self {
            turbine_inductance: Some(self.turbine_inductance()),
            turbine_efficiency: Some(self.turbine_efficiency()),
            elevation_profile: Some(self.elevations()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        require_positive("rated_power", self.rated_power)?;
        require_positive("nominal_head", self.nominal_head)?;
        require_positive("nominal_discharge", self.nominal_discharge)?;
        require_positive("nominal_speed", self.nominal_speed)?;
        require_positive("nominal_torque", self.nominal_torque)?;
        require_positive("penstock_length", self.penstock_length)?;
        require_positive("penstock_diameter", self.penstock_diameter)?;
        require_positive("wave_speed", self.wave_speed)?;
        require_positive("wall_thickness", self.wall_thickness)?;
        require_positive("water_density", self.water_density)?;
        require_positive("gravity", self.gravity)?;
        require_positive("grid_frequency", self.grid_frequency)?;
        require_positive("turbine_inductance", self.turbine_inductance())?;
        if self.element_count < 2 {
            return Err(param("element_count", "must be at least 2"));
        }
        if !(self.darcy_friction.is_finite() && self.darcy_friction >= 0.0) {
            return Err(param("darcy_friction", "must be finite and >= 0"));
        }
        let eta = self.turbine_efficiency();
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(param("turbine_efficiency", format!("must lie in (0, 1], got {eta}")));
        }
        if !(self.upstream_head.is_finite()
            && self.downstream_head.is_finite()
            && self.downstream_head >= 0.0
            && self.upstream_head > self.downstream_head)
        {
            return Err(param("upstream_head", "requires H_u > H_d >= 0"));
        }
        if self.pole_pairs == 0 {
            return Err(param("pole_pairs", "must be positive"));
        }
        let torque = self.rated_power / self.nominal_speed;
        let mismatch = (torque - self.nominal_torque).abs() / self.nominal_torque;
        if mismatch > 5e-3 {
            return Err(param(
                "nominal_torque",
                format!("rated_power / nominal_speed = {torque:.4e} disagrees by {:.2}%", mismatch * 100.0),
            ));
        }
        let z = self.elevations();
        if z.len() != self.element_count {
            return Err(param(
                "elevation_profile",
                format!("expected {} entries, got {}", self.element_count, z.len()),
            ));
        }
        if z.iter().any(|v| !v.is_finite()) || z.windows(2).any(|w| w[1] > w[0]) {
            return Err(param("elevation_profile", "must be finite and non-increasing"));
        }
        Ok(())
    }
}

fn param(name: &'static str, reason: impl Into<String>) -> Error {
    Error::Parameter {
        name,
        reason: reason.into(),
    }
}

/// Lumped R-L-C parameters of the discretized penstock.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitModel {
    pub params: PlantParameters,
    pub dx: f64,
    pub area: f64,
    /// Per-element resistance evaluated at `reference_flow`, s/m².
    pub resistance: Vec<f64>,
    /// Per-element inductance, s²/m².
    pub inductance: Vec<f64>,
    /// Per-element capacitance, m².
    pub capacitance: Vec<f64>,
    pub turbine_inductance: f64,
    pub reference_flow: f64,
    /// `R = friction_coefficient · |Q|`.
    pub friction_coefficient: f64,
}

impl CircuitModel {
    pub fn element_count(&self) -> usize {
        self.params.element_count
    }

    pub fn state_dim(&self) -> usize {
        2 * self.element_count() + 1
    }

    /// Per-element wave transit time `dx / a`.
    pub fn transit_time(&self) -> f64 {
        self.dx / self.params.wave_speed
    }
}

pub fn build_circuit(params: &PlantParameters, reference_flow: f64) -> Result<CircuitModel> {
    params.validate()?;
    require_positive("reference_flow", reference_flow)?;
    let p = params;
    let dx = p.element_length();
    let area = p.area();
    let friction_coefficient = p.darcy_friction * dx / (2.0 * p.gravity * p.penstock_diameter * area * area);
    let n = p.element_count;
    Ok(CircuitModel {
        params: params.clone(),
        dx,
        area,
        resistance: vec![friction_coefficient * reference_flow; n],
        inductance: vec![dx / (p.gravity * area); n],
        capacitance: vec![p.gravity * area * dx / (p.wave_speed * p.wave_speed); n],
        turbine_inductance: p.turbine_inductance(),
        reference_flow,
        friction_coefficient,
    })
}

/// Hydraulic state `[Q_1..Q_I, h_1..h_I, Q_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(pub DVector<f64>);

impl StateVector {
    pub fn from_parts(flows: &[f64], heads: &[f64], turbine_flow: f64) -> Self {
        assert_eq!(flows.len(), heads.len());
        let v = flows
            .iter()
            .chain(heads)
            .copied()
            .chain(std::iter::once(turbine_flow));
        Self(DVector::from_iterator(2 * flows.len() + 1, v))
    }

    pub fn element_count(&self) -> usize {
        (self.0.len() - 1) / 2
    }

    pub fn flows(&self) -> &[f64] {
        &self.0.as_slice()[..self.element_count()]
    }

    pub fn heads(&self) -> &[f64] {
        let n = self.element_count();
        &self.0.as_slice()[n..2 * n]
    }

    pub fn turbine_flow(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// Index of `h_i` (zero-based element) inside the state vector.
    pub fn head_index(element_count: usize, element: usize) -> usize {
        element_count + element
    }
}

impl Deref for StateVector {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

impl DerefMut for StateVector {
    fn deref_mut(&mut self) -> &mut DVector<f64> {
        &mut self.0
    }
}

/// Exogenous inputs to the hydraulic circuit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HydraulicInputs {
    /// Guide-vane opening, per unit.
    pub opening: f64,
    pub upstream_head: f64,
    pub downstream_head: f64,
    /// Turbine speed, rad/s.
    pub speed: f64,
}

impl HydraulicInputs {
    pub fn nominal(params: &PlantParameters, opening: f64) -> Self {
        Self {
            opening,
            upstream_head: params.upstream_head,
            downstream_head: params.downstream_head,
            speed: params.nominal_speed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurbineHead {
    pub head: f64,
    /// True when the opening was below [`MIN_OPENING`] and got clamped.
    pub clamped: bool,
}

/// Quasi-static turbine head from the valve-analogy surrogate
/// `H_t = H_nom · (Q_t / (y · Q_nom))²`, signed with the flow direction.
pub fn turbine_head(flow: f64, opening: f64, params: &PlantParameters) -> TurbineHead {
    let clamped = opening < MIN_OPENING;
    let y = opening.max(MIN_OPENING);
    let ratio = flow / (y * params.nominal_discharge);
    TurbineHead {
        head: params.nominal_head * ratio * ratio.abs(),
        clamped,
    }
}

/// Partial derivatives `(∂H_t/∂Q_t, ∂H_t/∂y)` of [`turbine_head`].
pub fn turbine_head_partials(flow: f64, opening: f64, params: &PlantParameters) -> (f64, f64) {
    let y = opening.max(MIN_OPENING);
    let qy = y * params.nominal_discharge;
    let d_flow = 2.0 * params.nominal_head * flow.abs() / (qy * qy);
    let d_opening = -2.0 * turbine_head(flow, y, params).head / y;
    (d_flow, d_opening)
}

/// Mechanical torque `η ρ g Q_t H_t / ω`.
pub fn turbine_torque(flow: f64, head: f64, speed: f64, params: &PlantParameters) -> Result<f64> {
    require_positive("speed", speed)?;
    Ok(turbine_power(flow, head, params) / speed)
}

/// Mechanical shaft power `η ρ g Q_t H_t`, W.
pub fn turbine_power(flow: f64, head: f64, params: &PlantParameters) -> f64 {
    params.turbine_efficiency() * params.pressure_factor() * flow * head
}

fn check_heads(x: &StateVector, params: &PlantParameters) -> Result<()> {
    let limit = 2.0 * params.upstream_head;
    for (i, &h) in x.heads().iter().enumerate() {
        if !h.is_finite() || h < 0.0 || h > limit {
            return Err(Error::Instability(format!(
                "head {h:.3} m at element {} outside [0, {limit}] m",
                i + 1
            )));
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Instability("non-finite flow".into()));
    }
    Ok(())
}

/// Right-hand side of the circuit ODE, with friction evaluated at the
/// instantaneous element flows.
pub fn derivative(x: &StateVector, u: &HydraulicInputs, circuit: &CircuitModel) -> Result<DVector<f64>> {
    check_heads(x, &circuit.params)?;
    Ok(rhs(x, u, circuit))
}

fn rhs(x: &DVector<f64>, u: &HydraulicInputs, c: &CircuitModel) -> DVector<f64> {
    let n = c.element_count();
    let mut dx = DVector::zeros(2 * n + 1);
    let r = c.friction_coefficient;
    for i in 0..n {
        let q = x[i];
        let upstream = if i == 0 { u.upstream_head } else { x[n + i - 1] };
        dx[i] = (upstream - x[n + i] - r * q.abs() * q) / c.inductance[i];
        let outflow = if i + 1 < n { x[i + 1] } else { x[2 * n] };
        dx[n + i] = (q - outflow) / c.capacitance[i];
    }
    let qt = x[2 * n];
    let ht = turbine_head(qt, u.opening, &c.params).head;
    dx[2 * n] = (x[2 * n - 1] - u.downstream_head - ht) / c.turbine_inductance;
    dx
}

/// One RK4 step of the nonlinear circuit. The step must resolve the
/// per-element wave transit time.
pub fn step_rk4(x: &StateVector, u: &HydraulicInputs, circuit: &CircuitModel, dt: f64) -> Result<StateVector> {
    require_positive("dt", dt)?;
    if dt > circuit.transit_time() * (1.0 + 1e-12) {
        return Err(param(
            "dt",
            format!("{dt} s exceeds the element transit time {} s", circuit.transit_time()),
        ));
    }
    check_heads(x, &circuit.params)?;
    let next = ode::rk4::<Error, _>(x, dt, |s| Ok(rhs(s, u, circuit)))?;
    let next = StateVector(next);
    check_heads(&next, &circuit.params)?;
    Ok(next)
}

/// Steady operating point for a fixed opening: uniform flow, heads falling by
/// the friction drop of each element, turbine absorbing the remaining head.
/// The flow is found by bisection on `(0, 2 Q_nom]`.
pub fn steady_state(
    circuit: &CircuitModel,
    opening: f64,
    upstream_head: f64,
    downstream_head: f64,
) -> Result<StateVector> {
    if !(opening > 0.0 && opening <= 1.0) {
        return Err(Error::InfeasibleOperatingPoint {
            opening,
            reason: "opening must lie in (0, 1]".into(),
        });
    }
    let p = &circuit.params;
    let n = circuit.element_count();
    let r = circuit.friction_coefficient;
    let residual = |q: f64| {
        upstream_head - downstream_head - n as f64 * r * q * q - turbine_head(q, opening, p).head
    };
    let (mut lo, mut hi) = (0.0, 2.0 * p.nominal_discharge);
    if residual(hi) > 0.0 {
        return Err(Error::InfeasibleOperatingPoint {
            opening,
            reason: format!("residual head still positive at Q = {hi} m³/s"),
        });
    }
    // Bisect to machine precision so the fixed point is exact to rounding.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = if residual(lo).abs() <= residual(hi).abs() { lo } else { hi };
    let mut heads = Vec::with_capacity(n);
    let mut h = upstream_head;
    for _ in 0..n {
        h -= r * q.abs() * q;
        heads.push(h);
    }
    Ok(StateVector::from_parts(&vec![q; n], &heads, q))
}
