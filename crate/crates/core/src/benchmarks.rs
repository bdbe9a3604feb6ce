//! Baseline controllers: a first-order low-pass filter on the grid frequency
//! and a fatigue-aware trim filter that reshapes the frequency signal so its
//! predicted stress response stays inside a band.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::electromech::GovernorConfig;
use crate::error::{require_positive, Error, Result};
use crate::fatigue::SnCurve;
use crate::hydraulics::{turbine_head, turbine_head_partials, turbine_power, CircuitModel, StateVector};
use crate::linearize::{discretize, linearize};

/// First-order low-pass `1 / (1 + s / ω_c)`, discretized exactly for inputs
/// held constant over each step.
#[derive(Debug, Clone, PartialEq)]
pub struct LowPassFilter {
    /// Hz
    pub cutoff: f64,
    state: Option<f64>,
}

impl LowPassFilter {
    pub fn new(cutoff: f64) -> Result<Self> {
        require_positive("cutoff", cutoff)?;
        Ok(Self { cutoff, state: None })
    }

    /// Starts from `value` instead of the first input.
    pub fn with_state(cutoff: f64, value: f64) -> Result<Self> {
        let mut f = Self::new(cutoff)?;
        f.state = Some(value);
        Ok(f)
    }

    pub fn step(&mut self, input: f64, dt: f64) -> f64 {
        let a = (-2.0 * PI * self.cutoff * dt).exp();
        let y = match self.state {
            Some(prev) => a * prev + (1.0 - a) * input,
            None => input,
        };
        self.state = Some(y);
        y
    }
}

/// Bisection on `log(x)` for a monotone scalar response. `increasing` gives
/// the direction of `response(x)`. Returns the best `(x, response)` found.
pub fn bisect_monotone<F>(
    mut response: F,
    bracket: (f64, f64),
    target: f64,
    tolerance: f64,
    max_steps: usize,
    increasing: bool,
) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut lo, mut hi) = bracket;
    require_positive("bracket lower end", lo)?;
    if hi <= lo {
        return Err(Error::Tuning {
            reason: format!("empty bracket [{lo}, {hi}]"),
            best: None,
        });
    }
    let sign = if increasing { 1.0 } else { -1.0 };
    let mut best = (hi, response(hi)?);
    if (best.1 - target).abs() <= tolerance {
        return Ok(best);
    }
    if sign * (best.1 - target) < 0.0 {
        return Err(Error::Tuning {
            reason: format!("target {target} beyond upper bracket response {}", best.1),
            best: Some(hi),
        });
    }
    let low = response(lo)?;
    if (low - target).abs() <= tolerance {
        return Ok((lo, low));
    }
    if sign * (low - target) > 0.0 {
        return Err(Error::Tuning {
            reason: format!("target {target} beyond lower bracket response {low}"),
            best: Some(lo),
        });
    }
    if (low - target).abs() < (best.1 - target).abs() {
        best = (lo, low);
    }
    for _ in 0..max_steps {
        let mid = (lo * hi).sqrt();
        let r = response(mid)?;
        if (r - target).abs() < (best.1 - target).abs() {
            best = (mid, r);
        }
        if (r - target).abs() <= tolerance {
            return Ok((mid, r));
        }
        if sign * (r - target) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Tuning {
        reason: format!("no value within {tolerance} of {target} after {max_steps} steps (best {})", best.1),
        best: Some(best.0),
    })
}

/// Bisects the low-pass cutoff until the tracking correlation of `run`
/// matches `target_cc` within `tolerance`.
pub fn tune_lpf_cutoff<F>(target_cc: f64, run: F, bracket: (f64, f64), tolerance: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    bisect_monotone(run, bracket, target_cc, tolerance, 30, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FatigueFilterConfig {
    /// Fraction of the fatigue-limit band the predicted stress may use.
    pub band_scale: f64,
    /// Inverse regularization relative to the input sensitivity.
    pub regularization: f64,
}

impl Default for FatigueFilterConfig {
    fn default() -> Self {
        Self {
            band_scale: 1.0,
            regularization: 1e-3,
        }
    }
}

/// Linear frequency-to-stress model of governor plus plant, with a clip and
/// one-step regularized inverse.
#[derive(Debug, Clone)]
pub struct FatigueFilter {
    /// State transition of `[hydraulic deviation; PI integral; previous y]`.
    f: DMatrix<f64>,
    g: DVector<f64>,
    /// Stress deviation per state, one row per element.
    h: DMatrix<f64>,
    /// Stress sensitivity of the next sample to the current input.
    b: DVector<f64>,
    limit: f64,
    weight: f64,
    nominal_frequency: f64,
    droop: f64,
}

impl FatigueFilter {
    /// Builds the filter around the steady state `(x0, y0)`. `step` is the
    /// governor cadence.
    pub fn new(
        circuit: &CircuitModel,
        x0: &StateVector,
        y0: f64,
        governor: &GovernorConfig,
        sn: &SnCurve,
        step: f64,
        config: &FatigueFilterConfig,
    ) -> Result<Self> {
        require_positive("fatigue_filter.band_scale", config.band_scale)?;
        require_positive("fatigue_filter.regularization", config.regularization)?;
        governor.validate()?;
        let p = &circuit.params;
        let dss = discretize(&linearize(circuit, x0, y0)?, step)?;
        let n = dss.a.nrows();
        let ni = dss.outputs.len();

        // Power feedback linearized in pu.
        let qt = x0.turbine_flow();
        let ht = turbine_head(qt, y0, p).head;
        let (hq, hy) = turbine_head_partials(qt, y0, p);
        let unit = turbine_power(1.0, 1.0, p) / p.rated_power;
        let pq = unit * (ht + qt * hq);
        let py = unit * qt * hy;

        // eps = u - pq dQt - py y_prev
        // y = kp eps + iota + ki dt eps,  iota' = iota + ki dt eps
        let (kp, kidt) = (governor.kp, governor.ki * step);
        let dim = n + 2;
        let mut eps_row = DVector::zeros(dim);
        eps_row[n - 1] = -pq;
        eps_row[n + 1] = -py;
        let mut y_row = &eps_row * (kp + kidt);
        y_row[n] += 1.0;
        let y_u = kp + kidt;

        let mut f = DMatrix::zeros(dim, dim);
        f.view_mut((0, 0), (n, n)).copy_from(&dss.a);
        for j in 0..dim {
            for i in 0..n {
                f[(i, j)] += dss.b_y[i] * y_row[j];
            }
            f[(n, j)] = kidt * eps_row[j];
            f[(n + 1, j)] = y_row[j];
        }
        f[(n, n)] += 1.0;
        let mut g = DVector::zeros(dim);
        for i in 0..n {
            g[i] = dss.b_y[i] * y_u;
        }
        g[n] = kidt;
        g[n + 1] = y_u;

        let factor = p.pressure_factor() * p.penstock_diameter / (2.0 * p.wall_thickness);
        let mut h = DMatrix::zeros(ni, dim);
        for (i, &row) in dss.outputs.iter().enumerate() {
            h[(i, row)] = factor;
        }
        let b = &h * &g;
        let scale = b.norm_squared();
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Filter("stress is insensitive to the frequency input".into()));
        }
        Ok(Self {
            f,
            g,
            h,
            b,
            limit: config.band_scale * sn.fatigue_limit / 2.0,
            weight: config.regularization * scale,
            nominal_frequency: p.grid_frequency,
            droop: governor.permanent_droop,
        })
    }

    /// Spectral radius of the closed-loop frequency-to-stress model.
    pub fn spectral_radius(&self) -> f64 {
        crate::linearize::spectral_radius(&self.f)
    }

    /// Spectral radius of the inverse recursion while the clip is active.
    pub fn inverse_spectral_radius(&self) -> f64 {
        let denom = self.b.norm_squared() + self.weight;
        let k = &self.g * (self.b.transpose() * &self.h * &self.f) / denom;
        crate::linearize::spectral_radius(&(&self.f - k))
    }

    /// Stress-deviation band half-width, Pa.
    pub fn limit(&self) -> f64 {
        self.limit
    }

    fn input(&self, f_grid: f64) -> f64 {
        (self.nominal_frequency - f_grid) / self.nominal_frequency / self.droop
    }

    fn frequency(&self, u: f64) -> f64 {
        self.nominal_frequency - u * self.nominal_frequency * self.droop
    }

    /// Predicted stress deviation of the linear model driven by `trace`,
    /// one row per sample.
    pub fn forward(&self, trace: &[f64]) -> Vec<DVector<f64>> {
        let mut xi = DVector::zeros(self.f.nrows());
        trace
            .iter()
            .map(|&f| {
                xi = &self.f * &xi + &self.g * self.input(f);
                &self.h * &xi
            })
            .collect()
    }

    /// Reshapes a frequency trace sampled at the governor cadence: the stress
    /// predicted from the raw trace is clipped to the band, and a regularized
    /// one-step inverse recovers the input that reproduces the clipped stress.
    pub fn preprocess(&self, trace: &[f64]) -> Result<Vec<f64>> {
        let targets = self.forward(trace);
        let mut xi = DVector::zeros(self.f.nrows());
        let denom = self.b.norm_squared() + self.weight;
        let mut out = Vec::with_capacity(trace.len());
        for (&f, target) in trace.iter().zip(&targets) {
            let free = &self.h * (&self.f * &xi);
            let mut numer = self.weight * self.input(f);
            for i in 0..self.b.len() {
                numer += self.b[i] * (target[i].clamp(-self.limit, self.limit) - free[i]);
            }
            let v = numer / denom;
            if !v.is_finite() {
                return Err(Error::Filter("inverse produced a non-finite input".into()));
            }
            xi = &self.f * &xi + &self.g * v;
            out.push(self.frequency(v));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydraulics::{build_circuit, steady_state, PlantParameters};
    use approx::assert_relative_eq;

    #[test]
    fn lpf_dc_gain_and_bounds() {
        let mut f = LowPassFilter::with_state(1.0, 49.0).unwrap();
        let mut y = 0.0;
        for _ in 0..1000 {
            y = f.step(50.0, 0.01);
            assert!((49.0..=50.0).contains(&y));
        }
        assert_relative_eq!(y, 50.0, epsilon = 1e-12);
        assert!(LowPassFilter::new(0.0).is_err());
    }

    #[test]
    fn lpf_cutoff_attenuation() {
        let fc = 0.5;
        let dt = 0.001;
        let mut f = LowPassFilter::new(fc).unwrap();
        let mut peak: f64 = 0.0;
        for k in 0..40_000 {
            let t = k as f64 * dt;
            let y = f.step((2.0 * PI * fc * t).sin(), dt);
            if t > 20.0 {
                peak = peak.max(y.abs());
            }
        }
        assert!((peak - 0.5f64.sqrt()).abs() / 0.5f64.sqrt() < 0.02, "{peak}");
    }

    #[test]
    fn bisection_finds_target() {
        let mut calls = 0;
        let (x, r) = bisect_monotone(
            |x| {
                calls += 1;
                Ok(1.0 - (-x).exp())
            },
            (0.01, 10.0),
            0.5,
            1e-4,
            30,
            true,
        )
        .unwrap();
        assert!((r - 0.5).abs() <= 1e-4);
        assert!((x - 2f64.ln()).abs() < 1e-3);
        assert!(calls <= 32);
        // Target reached at the upper end of the bracket.
        let (x, _) = bisect_monotone(|x| Ok(x.min(1.0)), (0.01, 10.0), 1.0, 1e-3, 30, true).unwrap();
        assert_eq!(x, 10.0);
        let e = bisect_monotone(Ok, (0.01, 10.0), 20.0, 1e-3, 30, true);
        assert!(matches!(e, Err(Error::Tuning { best: Some(_), .. })));
    }

    fn filter(scale: f64) -> FatigueFilter {
        let p = PlantParameters::reference();
        let c = build_circuit(&p, p.nominal_discharge).unwrap();
        let x = steady_state(&c, 0.8, p.upstream_head, p.downstream_head).unwrap();
        let cfg = FatigueFilterConfig {
            band_scale: scale,
            ..Default::default()
        };
        FatigueFilter::new(&c, &x, 0.8, &GovernorConfig::default(), &SnCurve::default(), 0.1, &cfg).unwrap()
    }

    #[test]
    fn inactive_clip_passes_trace_through() {
        let f = filter(1.0);
        let trace: Vec<f64> = (0..2000).map(|k| 50.0 + 0.002 * (k as f64 * 0.01).sin()).collect();
        let peak = f.forward(&trace).iter().map(|s| s.amax()).fold(0.0, f64::max);
        assert!(peak < f.limit());
        let out = f.preprocess(&trace).unwrap();
        let dist = out.iter().zip(&trace).map(|(a, b)| ((a - b) / 50.0 / 0.02).abs()).fold(0.0, f64::max);
        assert!(dist <= 1e-3, "{dist}");
    }

    #[test]
    fn large_step_is_smoothed() {
        let f = filter(0.5);
        let trace: Vec<f64> = (0..600).map(|k| if k < 100 { 50.0 } else { 49.8 }).collect();
        let out = f.preprocess(&trace).unwrap();
        let raw_peak = f.forward(&trace).iter().map(|s| s.amax()).fold(0.0, f64::max);
        let peak = f.forward(&out).iter().map(|s| s.amax()).fold(0.0, f64::max);
        assert!(raw_peak > f.limit());
        // One-step lookahead cannot cancel the stress momentum of a sharp
        // step, but it removes most of the overshoot and holds the clip once
        // the transient has passed.
        assert!(peak < 0.7 * raw_peak, "{peak} vs raw {raw_peak}");
        let settled = f.forward(&out)[400..].iter().map(|s| s.amax()).fold(0.0, f64::max);
        assert!(settled <= f.limit() * (1.0 + 1e-9), "{settled} vs {}", f.limit());
        assert!((out[100] - 50.0).abs() < 0.2);
    }
}
