//! Fatigue-constrained model predictive control of the guide vane.
//!
//! Each step the circuit is relinearized at the measured state, the linear
//! model is unrolled over the horizon, and a condensed QP over the vane
//! sequence (plus one slack per predicted step) is solved:
//!
//! ```text
//!     min  1/2 sum (y_k - y*_k)^2 + 1/2 rho_s sum s_k^2
//!     s.t. 0 <= y_k <= 1
//!          h_lower_i - s_k <= h_i(k) <= h_upper_i + s_k
//! ```
//!
//! Only the first vane value is actuated.

pub mod qp;

use std::time::{Duration, Instant};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{require_positive, Error, Result};
use crate::fatigue::SnCurve;
use crate::hydraulics::{CircuitModel, PlantParameters, StateVector};
use crate::linearize::{discretize, linearize, DiscreteStateSpace};
use qp::{KktResiduals, QpSettings, QpStatus, QuadraticProgram};

/// Admissible head band per element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBounds {
    pub lower: Vec<f64>,
    pub nominal: Vec<f64>,
    pub upper: Vec<f64>,
    pub half_band: f64,
}

impl HeadBounds {
    pub fn element_count(&self) -> usize {
        self.nominal.len()
    }

    /// Largest distance of `heads` outside the band, zero when inside.
    pub fn excess(&self, heads: &[f64]) -> f64 {
        heads
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&h, (&lo, &hi))| (lo - h).max(h - hi).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, heads: &[f64], tolerance: f64) -> bool {
        self.excess(heads) <= tolerance
    }
}

/// Head half-band whose full width maps to a stress range equal to the
/// fatigue limit.
pub fn half_band(sn: &SnCurve, params: &PlantParameters) -> f64 {
    sn.fatigue_limit * params.wall_thickness / (params.pressure_factor() * params.penstock_diameter)
}

/// Band `h_nom_i +/- half_band` around the given nominal heads.
pub fn head_bounds(sn: &SnCurve, params: &PlantParameters, nominal: &[f64]) -> Result<HeadBounds> {
    let hb = half_band(sn, params);
    if !(hb.is_finite() && hb > 0.0) {
        return Err(Error::Config(format!("head band {hb} m is not positive")));
    }
    if nominal.iter().any(|h| !h.is_finite()) {
        return Err(Error::Config("non-finite nominal head".into()));
    }
    Ok(HeadBounds {
        lower: nominal.iter().map(|h| h - hb).collect(),
        nominal: nominal.to_vec(),
        upper: nominal.iter().map(|h| h + hb).collect(),
        half_band: hb,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Prediction horizon in model steps.
    pub horizon_steps: usize,
    /// Model and actuation step, s.
    pub step: f64,
    pub slack_weight: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Band tightening applied inside the controller, m.
    pub margin: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 20,
            step: 0.1,
            slack_weight: 1e4,
            tolerance: 1e-9,
            max_iterations: 500,
            margin: 0.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        require_positive("mpc.step", self.step)?;
        require_positive("mpc.slack_weight", self.slack_weight)?;
        require_positive("mpc.tolerance", self.tolerance)?;
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!("mpc.margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Condensed MPC problem. Decision vector is `[y_0 .. y_T, s_1 .. s_T]`.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub qp: QuadraticProgram,
    pub horizon: usize,
    /// Predicted heads with the vane held at zero, `T x I`.
    pub free_heads: DMatrix<f64>,
    /// Head response to a unit vane input `m` steps earlier, `I x T`.
    pub impulse: DMatrix<f64>,
    pub bounds: HeadBounds,
    pub forecast: Vec<f64>,
}

impl MpcProblem {
    /// Predicted heads `h_i(k)` for `k = 1..T` under a vane sequence, `T x I`.
    pub fn predict_heads(&self, y: &[f64]) -> DMatrix<f64> {
        let mut h = self.free_heads.clone();
        for k in 1..=self.horizon {
            for j in 0..k {
                let col = self.impulse.column(k - 1 - j);
                for i in 0..col.len() {
                    h[(k - 1, i)] += col[i] * y[j];
                }
            }
        }
        h
    }
}

pub fn build_qp(
    dss: &DiscreteStateSpace,
    x: &StateVector,
    forecast: &[f64],
    bounds: &HeadBounds,
    horizon: usize,
    slack_weight: f64,
) -> Result<MpcProblem> {
    let t = horizon;
    let ni = dss.outputs.len();
    if forecast.len() != t + 1 {
        return Err(Error::Construction(format!("forecast has {} entries, expected {}", forecast.len(), t + 1)));
    }
    if x.len() != dss.a.nrows() {
        return Err(Error::Construction(format!("state has {} entries, model expects {}", x.len(), dss.a.nrows())));
    }
    if bounds.element_count() != ni {
        return Err(Error::Construction(format!("bounds cover {} elements, model has {ni}", bounds.element_count())));
    }
    require_positive("slack_weight", slack_weight)?;

    let offset = dss.offset();
    let mut free_heads = DMatrix::zeros(t, ni);
    let mut f = x.0.clone();
    let mut impulse = DMatrix::zeros(ni, t);
    let mut g = dss.b_y.clone();
    for k in 0..t {
        f = &dss.a * &f + &offset;
        for (i, &row) in dss.outputs.iter().enumerate() {
            free_heads[(k, i)] = f[row];
            impulse[(i, k)] = g[row];
        }
        g = &dss.a * &g;
    }

    let nv = 2 * t + 1;
    let mut hessian = DMatrix::identity(nv, nv);
    for k in 0..t {
        hessian[(t + 1 + k, t + 1 + k)] = slack_weight;
    }
    let mut linear = DVector::zeros(nv);
    for k in 0..=t {
        linear[k] = -forecast[k];
    }

    let m = 2 * (t + 1) + 2 * ni * t;
    let mut c = DMatrix::zeros(m, nv);
    let mut d = DVector::zeros(m);
    for k in 0..=t {
        c[(2 * k, k)] = 1.0;
        d[2 * k] = 1.0;
        c[(2 * k + 1, k)] = -1.0;
    }
    let mut row = 2 * (t + 1);
    for k in 1..=t {
        for i in 0..ni {
            for j in 0..k {
                let v = impulse[(i, k - 1 - j)];
                c[(row, j)] = v;
                c[(row + 1, j)] = -v;
            }
            c[(row, t + k)] = -1.0;
            c[(row + 1, t + k)] = -1.0;
            d[row] = bounds.upper[i] - free_heads[(k - 1, i)];
            d[row + 1] = free_heads[(k - 1, i)] - bounds.lower[i];
            row += 2;
        }
    }

    Ok(MpcProblem {
        qp: QuadraticProgram {
            hessian,
            linear,
            constraints: c,
            upper: d,
        },
        horizon: t,
        free_heads,
        impulse,
        bounds: bounds.clone(),
        forecast: forecast.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub y: Vec<f64>,
    pub slack: Vec<f64>,
    /// Vane set-point actuated this step.
    pub first: f64,
    /// `(step, element, upper)` of head constraints active at the optimum.
    pub active_heads: Vec<(usize, usize, bool)>,
    pub iterations: usize,
    pub solve_time: Duration,
    pub max_slack: f64,
    /// Largest predicted head excursion beyond the band, slack not counted.
    pub band_excess: f64,
    /// Largest predicted excursion beyond band plus slack.
    pub residual_excess: f64,
    /// Tracking plus slack cost, zero when the set-point is followed exactly.
    pub objective: f64,
    pub kkt: KktResiduals,
    /// Solver hit its iteration cap or the model could not be built.
    pub degraded: bool,
}

pub fn solve(problem: &MpcProblem, settings: &QpSettings) -> Result<MpcSolution> {
    let start = Instant::now();
    let sol = qp::solve(&problem.qp, settings)?;
    let solve_time = start.elapsed();
    let t = problem.horizon;
    let y: Vec<f64> = sol.x.rows(0, t + 1).iter().copied().collect();
    let slack: Vec<f64> = sol.x.rows(t + 1, t).iter().copied().collect();
    let heads = problem.predict_heads(&y);
    let (mut band_excess, mut residual_excess) = (0.0f64, 0.0f64);
    for k in 0..t {
        let e = problem.bounds.excess(heads.row(k).transpose().as_slice());
        band_excess = band_excess.max(e);
        residual_excess = residual_excess.max(e - slack[k].max(0.0));
    }
    let ni = problem.bounds.element_count();
    let active_heads = sol
        .active
        .iter()
        .filter(|&&r| r >= 2 * (t + 1))
        .map(|&r| {
            let q = r - 2 * (t + 1);
            (q / (2 * ni) + 1, (q / 2) % ni, q.is_multiple_of(2))
        })
        .collect();
    Ok(MpcSolution {
        first: y.first().copied().unwrap_or(0.0),
        max_slack: slack.iter().cloned().fold(0.0, f64::max),
        y,
        slack,
        active_heads,
        iterations: sol.iterations,
        solve_time,
        band_excess,
        residual_excess: residual_excess.max(0.0),
        objective: sol.objective + 0.5 * problem.forecast.iter().map(|v| v * v).sum::<f64>(),
        kkt: sol.kkt,
        degraded: sol.status != QpStatus::Optimal,
    })
}

/// Receding-horizon controller with persistence forecast of `y*`.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub config: MpcConfig,
    circuit: CircuitModel,
    bounds: HeadBounds,
    tightened: HeadBounds,
    previous: f64,
}

impl MpcController {
    pub fn new(config: MpcConfig, circuit: CircuitModel, bounds: HeadBounds, initial_opening: f64) -> Result<Self> {
        config.validate()?;
        if bounds.element_count() != circuit.element_count() {
            return Err(Error::Construction("bounds and circuit disagree on element count".into()));
        }
        if config.margin >= bounds.half_band {
            return Err(Error::Config("mpc.margin must be smaller than the half band".into()));
        }
        let mut tightened = bounds.clone();
        for (lo, hi) in tightened.lower.iter_mut().zip(tightened.upper.iter_mut()) {
            *lo += config.margin;
            *hi -= config.margin;
        }
        tightened.half_band -= config.margin;
        Ok(Self {
            config,
            circuit,
            bounds,
            tightened,
            previous: initial_opening,
        })
    }

    pub fn bounds(&self) -> &HeadBounds {
        &self.bounds
    }

    /// Relinearizes at `(x, previous opening)`, solves, and returns the
    /// solution whose first element is to be actuated.
    pub fn step(&mut self, x: &StateVector, y_star: f64) -> Result<MpcSolution> {
        let t = self.config.horizon_steps;
        let target = y_star.clamp(0.0, 1.0);
        let forecast = vec![target; t + 1];
        let y0 = self.previous.clamp(1e-3, 1.0);
        let model = linearize(&self.circuit, x, y0).and_then(|ss| discretize(&ss, self.config.step));
        let dss = match model {
            Ok(dss) => dss,
            Err(e) => {
                warn!("mpc model unavailable, passing set-point through: {e}");
                self.previous = target;
                return Ok(pass_through(target, t));
            }
        };
        let problem = build_qp(&dss, x, &forecast, &self.tightened, t, self.config.slack_weight)?;
        let settings = QpSettings {
            tolerance: self.config.tolerance,
            max_iterations: self.config.max_iterations,
        };
        let mut sol = solve(&problem, &settings)?;
        if sol.degraded {
            warn!("mpc solver hit iteration cap; actuating best iterate");
        }
        sol.first = sol.first.clamp(0.0, 1.0);
        self.previous = sol.first;
        Ok(sol)
    }
}

fn pass_through(target: f64, t: usize) -> MpcSolution {
    MpcSolution {
        y: vec![target; t + 1],
        slack: vec![0.0; t],
        first: target,
        active_heads: Vec::new(),
        iterations: 0,
        solve_time: Duration::ZERO,
        max_slack: 0.0,
        band_excess: 0.0,
        residual_excess: 0.0,
        objective: 0.0,
        kkt: KktResiduals::default(),
        degraded: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydraulics::{build_circuit, steady_state};
    use approx::assert_relative_eq;

    fn setup(y0: f64) -> (CircuitModel, StateVector, HeadBounds) {
        let p = PlantParameters::reference();
        let c = build_circuit(&p, p.nominal_discharge).unwrap();
        let x = steady_state(&c, y0, p.upstream_head, p.downstream_head).unwrap();
        let b = head_bounds(&SnCurve::default(), &p, x.heads()).unwrap();
        (c, x, b)
    }

    #[test]
    fn band_examples() {
        let p = PlantParameters::reference();
        let sn = SnCurve::default();
        assert_relative_eq!(half_band(&sn, &p), 23.45, epsilon = 5e-3);
        let double = SnCurve {
            fatigue_limit: 46e6,
            ..sn
        };
        assert_relative_eq!(half_band(&double, &p), 2.0 * half_band(&sn, &p));
        let b = head_bounds(&sn, &p, &[315.0]).unwrap();
        assert_relative_eq!(b.lower[0], 291.55, epsilon = 5e-3);
        assert_relative_eq!(b.upper[0], 338.45, epsilon = 5e-3);
        let zero = SnCurve {
            fatigue_limit: 0.0,
            ..sn
        };
        assert!(matches!(head_bounds(&zero, &p, &[315.0]), Err(Error::Config(_))));
    }

    #[test]
    fn steady_state_passes_set_point_through() {
        let (c, x, b) = setup(0.8);
        let mut ctrl = MpcController::new(MpcConfig::default(), c, b, 0.8).unwrap();
        let s = ctrl.step(&x, 0.8).unwrap();
        assert_eq!(s.first, 0.8);
        assert_eq!(s.iterations, 0);
        assert!(s.objective.abs() < 1e-12);
        assert!(!s.degraded);
    }

    #[test]
    fn large_step_is_rate_limited_by_head_constraints() {
        let (c, x, b) = setup(0.8);
        let mut ctrl = MpcController::new(MpcConfig::default(), c, b, 0.8).unwrap();
        let s = ctrl.step(&x, 0.5).unwrap();
        assert!(!s.active_heads.is_empty());
        assert!(s.first > 0.5 && s.first < 0.8, "{}", s.first);
        assert!(s.residual_excess < 1e-6);
    }

    #[test]
    fn narrow_band_activates_slack() {
        let (c, x, mut b) = setup(0.8);
        for (lo, (hi, h)) in b.lower.iter_mut().zip(b.upper.iter_mut().zip(&b.nominal)) {
            *lo = h - 0.05;
            *hi = h + 0.05;
        }
        b.half_band = 0.05;
        let dss = discretize(&linearize(&c, &x, 0.8).unwrap(), 0.1).unwrap();
        // Start away from equilibrium so the band cannot be met at once.
        let mut xs = x.clone();
        xs[40] += 3.0;
        let prob = build_qp(&dss, &xs, &[0.8; 21], &b, 20, 1e4).unwrap();
        let s = solve(&prob, &QpSettings::default()).unwrap();
        assert!(s.max_slack > 0.0);
        assert!(s.y.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
        assert!(s.objective.is_finite());
    }

    #[test]
    fn zero_horizon_clamps() {
        let (c, x, b) = setup(0.8);
        let cfg = MpcConfig {
            horizon_steps: 0,
            ..MpcConfig::default()
        };
        let mut ctrl = MpcController::new(cfg, c, b, 0.8).unwrap();
        assert_eq!(ctrl.step(&x, 1.7).unwrap().first, 1.0);
        assert_eq!(ctrl.step(&x, -0.2).unwrap().first, 0.0);
        assert_eq!(ctrl.step(&x, 0.3).unwrap().first, 0.3);
    }

    #[test]
    fn dimension_mismatch_is_construction_error() {
        let (c, x, b) = setup(0.8);
        let dss = discretize(&linearize(&c, &x, 0.8).unwrap(), 0.1).unwrap();
        assert!(matches!(build_qp(&dss, &x, &[0.8; 3], &b, 20, 1e4), Err(Error::Construction(_))));
    }

    #[test]
    fn prediction_matches_model_rollout() {
        let (c, x, b) = setup(0.8);
        let dss = discretize(&linearize(&c, &x, 0.8).unwrap(), 0.1).unwrap();
        let prob = build_qp(&dss, &x, &[0.8; 6], &b, 5, 1e4).unwrap();
        let y = [0.8, 0.78, 0.75, 0.77, 0.8, 0.8];
        let h = prob.predict_heads(&y);
        let mut s = x.0.clone();
        for k in 0..5 {
            s = dss.step(&s, y[k]);
            for i in 0..20 {
                assert_relative_eq!(h[(k, i)], s[20 + i], epsilon = 1e-9);
            }
        }
    }
}
