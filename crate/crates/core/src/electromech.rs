//! Turbine governor, synchronous generator on an infinite bus, and
//! Ziegler-Nichols tuning of the governor PI gains.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{require_positive, Error, Result};
use crate::hydraulics::PlantParameters;
use crate::ode;

/// Ziegler-Nichols PI gains of the reference plant (ultimate gain 0.517,
/// period 4.21 s); reproduced by `harness::tune_governor`.
pub const DEFAULT_KP: f64 = 0.232;
pub const DEFAULT_KI: f64 = 0.066;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GovernorConfig {
    pub kp: f64,
    pub ki: f64,
    /// Permanent droop, pu frequency per pu power.
    pub permanent_droop: f64,
    /// pu/s
    pub vane_rate_limit: f64,
    pub vane_min: f64,
    pub vane_max: f64,
    /// Hz
    pub deadband: f64,
}

impl Default for GovernorConfig {
    fn default() -> Self {
        Self {
            kp: DEFAULT_KP,
            ki: DEFAULT_KI,
            permanent_droop: 0.02,
            vane_rate_limit: 0.1,
            vane_min: 0.0,
            vane_max: 1.0,
            deadband: 0.0,
        }
    }
}

impl GovernorConfig {
    pub fn validate(&self) -> Result<()> {
        require_positive("governor.permanent_droop", self.permanent_droop)?;
        require_positive("governor.vane_rate_limit", self.vane_rate_limit)?;
        for (name, v) in [("governor.kp", self.kp), ("governor.ki", self.ki), ("governor.deadband", self.deadband)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter {
                    name,
                    reason: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        if !(0.0 <= self.vane_min && self.vane_min < self.vane_max && self.vane_max <= 1.0) {
            return Err(Error::Parameter {
                name: "governor.vane_limits",
                reason: format!("need 0 <= min < max <= 1, got [{}, {}]", self.vane_min, self.vane_max),
            });
        }
        Ok(())
    }
}

/// Droop governor with a PI on the power error and conditional anti-windup.
#[derive(Debug, Clone, PartialEq)]
pub struct Governor {
    pub config: GovernorConfig,
    pub nominal_frequency: f64,
    integral: f64,
    output: f64,
}

impl Governor {
    /// Starts in equilibrium at `opening`.
    pub fn new(config: GovernorConfig, nominal_frequency: f64, opening: f64) -> Result<Self> {
        config.validate()?;
        require_positive("nominal_frequency", nominal_frequency)?;
        let opening = opening.clamp(config.vane_min, config.vane_max);
        Ok(Self {
            config,
            nominal_frequency,
            integral: opening,
            output: opening,
        })
    }

    pub fn output(&self) -> f64 {
        self.output
    }

    /// Frequency deviation after the deadband, Hz.
    pub fn frequency_deviation(&self, f_grid: f64) -> f64 {
        let dev = self.nominal_frequency - f_grid;
        let db = self.config.deadband;
        if dev.abs() <= db {
            0.0
        } else {
            dev - db.copysign(dev)
        }
    }

    /// Power-error signal `Δf / (f0 R_p) + P_ref - P_fb`, pu.
    pub fn error(&self, f_grid: f64, p_ref: f64, p_feedback: f64) -> f64 {
        self.frequency_deviation(f_grid) / self.nominal_frequency / self.config.permanent_droop + p_ref - p_feedback
    }

    /// Advances the PI by `dt` and returns the vane set-point `y*`.
    pub fn step(&mut self, f_grid: f64, p_ref: f64, p_feedback: f64, dt: f64) -> f64 {
        let c = &self.config;
        let e = self.error(f_grid, p_ref, p_feedback);
        let candidate = self.integral + c.ki * dt * e;
        let raw = c.kp * e + candidate;
        let max_move = c.vane_rate_limit * dt;
        let limited = raw
            .clamp(c.vane_min, c.vane_max)
            .clamp(self.output - max_move, self.output + max_move);
        // Integrate only while unsaturated or while the error pulls the
        // output back from its limit.
        if limited == raw || (raw > limited && e < 0.0) || (raw < limited && e > 0.0) {
            self.integral = candidate;
        }
        self.output = limited;
        limited
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Inertia constant on the rated-power base, s.
    pub inertia_constant: f64,
    /// Rotor angle at which nominal torque is transmitted, rad.
    pub nominal_angle: f64,
    /// Damping ratio of the electromechanical mode.
    pub damping_ratio: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            inertia_constant: 4.0,
            nominal_angle: PI / 6.0,
            damping_ratio: 0.3,
        }
    }
}

/// Mechanical constants of the rotor and its grid coupling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorModel {
    /// kg·m²
    pub inertia: f64,
    /// N·m·s/rad
    pub damping: f64,
    /// N·m/rad
    pub synchronizing: f64,
    pub pole_pairs: u32,
}

impl GeneratorModel {
    pub fn from_params(params: &PlantParameters, config: &GeneratorConfig) -> Result<Self> {
        require_positive("generator.inertia_constant", config.inertia_constant)?;
        require_positive("generator.damping_ratio", config.damping_ratio)?;
        if !(config.nominal_angle > 0.0 && config.nominal_angle < PI / 2.0) {
            return Err(Error::Parameter {
                name: "generator.nominal_angle",
                reason: "must lie in (0, pi/2)".into(),
            });
        }
        let w0 = params.nominal_speed;
        let inertia = 2.0 * config.inertia_constant * params.rated_power / (w0 * w0);
        let synchronizing = params.nominal_torque / config.nominal_angle.sin();
        let stiffness = synchronizing * config.nominal_angle.cos();
        let damping = 2.0 * config.damping_ratio * (stiffness * inertia).sqrt();
        Ok(Self {
            inertia,
            damping,
            synchronizing,
            pole_pairs: params.pole_pairs,
        })
    }

    /// Mechanical synchronous speed for a grid frequency, rad/s.
    pub fn synchronous_speed(&self, f_grid: f64) -> f64 {
        2.0 * PI * f_grid / self.pole_pairs as f64
    }

    pub fn electrical_torque(&self, angle: f64) -> f64 {
        self.synchronizing * angle.sin()
    }

    /// Equilibrium state transmitting `torque` at grid frequency `f_grid`.
    pub fn equilibrium(&self, torque: f64, f_grid: f64) -> Result<GeneratorState> {
        let s = torque / self.synchronizing;
        if s.abs() >= 1.0 {
            return Err(Error::LossOfSynchronism { angle: PI / 2.0 });
        }
        Ok(GeneratorState {
            angle: s.asin(),
            speed: self.synchronous_speed(f_grid),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorState {
    /// Rotor angle relative to the grid, rad.
    pub angle: f64,
    /// Rotor speed, rad/s.
    pub speed: f64,
}

/// One RK4 step of the swing equation. Returns the new state and the
/// electrical torque at the end of the step.
pub fn generator_step(
    state: GeneratorState,
    model: &GeneratorModel,
    mech_torque: f64,
    f_grid: f64,
    dt: f64,
) -> Result<(GeneratorState, f64)> {
    require_positive("dt", dt)?;
    let ws = model.synchronous_speed(f_grid);
    let x = DVector::from_row_slice(&[state.angle, state.speed]);
    let next = ode::rk4::<Error, _>(&x, dt, |s| {
        let te = model.electrical_torque(s[0]);
        Ok(DVector::from_row_slice(&[
            s[1] - ws,
            (mech_torque - te - model.damping * (s[1] - ws)) / model.inertia,
        ]))
    })?;
    if !next[0].is_finite() || next[0].abs() > PI / 2.0 {
        return Err(Error::LossOfSynchronism { angle: next[0] });
    }
    let state = GeneratorState {
        angle: next[0],
        speed: next[1],
    };
    Ok((state, model.electrical_torque(state.angle)))
}

/// Response of a proportional-only closed loop, sampled uniformly.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeOutcome {
    Trace { dt: f64, samples: Vec<f64> },
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZieglerNicholsSweep {
    pub gain_min: f64,
    pub gain_max: f64,
    /// Multiplicative gain increment of the coarse sweep.
    pub gain_factor: f64,
    pub refinements: usize,
}

impl Default for ZieglerNicholsSweep {
    fn default() -> Self {
        Self {
            gain_min: 0.05,
            gain_max: 50.0,
            gain_factor: 1.5,
            refinements: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiTuning {
    pub kp: f64,
    pub ki: f64,
    pub ultimate_gain: f64,
    pub ultimate_period: f64,
}

/// Classical Ziegler-Nichols PI rule.
pub fn ziegler_nichols_pi(ultimate_gain: f64, ultimate_period: f64) -> (f64, f64) {
    (0.45 * ultimate_gain, 0.54 * ultimate_gain / ultimate_period)
}

struct Oscillation {
    /// Envelope of the last quarter over that of the third quarter.
    growth: f64,
    period: Option<f64>,
}

fn analyse(dt: f64, samples: &[f64]) -> Option<Oscillation> {
    let n = samples.len();
    if n < 8 {
        return None;
    }
    let half = &samples[n / 2..];
    let center = half.iter().sum::<f64>() / half.len() as f64;
    let envelope = |w: &[f64]| w.iter().map(|v| (v - center).abs()).fold(0.0, f64::max);
    let scale = envelope(samples);
    let (early, late) = half.split_at(half.len() / 2);
    let (e1, e2) = (envelope(early), envelope(late));
    // Residual ringing far below the response scale is not an oscillation.
    if scale == 0.0 || e2 <= 1e-2 * scale {
        return None;
    }
    // Upward crossings with hysteresis give the period.
    let band = 0.3 * e2;
    let mut high = half[0] - center > 0.0;
    let mut ups: Vec<usize> = Vec::new();
    for (k, v) in half.iter().enumerate() {
        let d = v - center;
        if !high && d > band {
            high = true;
            ups.push(k);
        } else if high && d < -band {
            high = false;
        }
    }
    let period = (ups.len() >= 2).then(|| (ups[ups.len() - 1] - ups[0]) as f64 * dt / (ups.len() - 1) as f64);
    Some(Oscillation {
        growth: if e1 > 0.0 { e2 / e1 } else { f64::INFINITY },
        period,
    })
}

/// Finds the ultimate gain and period of a proportional loop by a geometric
/// gain sweep refined by bisection, then applies the Ziegler-Nichols PI rule.
pub fn tune_pi<F>(mut probe: F, sweep: &ZieglerNicholsSweep) -> Result<PiTuning>
where
    F: FnMut(f64) -> Result<ProbeOutcome>,
{
    require_positive("gain_min", sweep.gain_min)?;
    if !(sweep.gain_max > sweep.gain_min && sweep.gain_factor > 1.0) {
        return Err(Error::Tuning {
            reason: "sweep needs gain_max > gain_min and gain_factor > 1".into(),
            best: None,
        });
    }
    // Returns (unstable, period).
    let mut classify = |k: f64| -> Result<(bool, Option<f64>)> {
        Ok(match probe(k)? {
            ProbeOutcome::Diverged => (true, None),
            ProbeOutcome::Trace { dt, samples } => match analyse(dt, &samples) {
                Some(o) => (o.growth >= 1.0, o.period),
                None => (false, None),
            },
        })
    };

    let mut stable: Option<(f64, Option<f64>)> = None;
    let mut unstable: Option<(f64, Option<f64>)> = None;
    let mut k = sweep.gain_min;
    while k <= sweep.gain_max * (1.0 + 1e-12) {
        let (grows, period) = classify(k)?;
        if grows {
            unstable = Some((k, period));
            break;
        }
        stable = Some((k, period));
        k *= sweep.gain_factor;
    }
    let Some(mut hi) = unstable else {
        return Err(Error::Tuning {
            reason: format!("no sustained oscillation up to gain {}", sweep.gain_max),
            best: stable.map(|s| s.0),
        });
    };
    let Some(mut lo) = stable else {
        // Oscillating at the first sweep point already.
        let period = hi.1.ok_or_else(|| Error::Tuning {
            reason: "oscillation period not measurable".into(),
            best: Some(hi.0),
        })?;
        let (kp, ki) = ziegler_nichols_pi(hi.0, period);
        return Ok(PiTuning {
            kp,
            ki,
            ultimate_gain: hi.0,
            ultimate_period: period,
        });
    };
    for _ in 0..sweep.refinements {
        let mid = (lo.0 * hi.0).sqrt();
        let (grows, period) = classify(mid)?;
        if grows {
            hi = (mid, period.or(hi.1));
        } else {
            lo = (mid, period.or(lo.1));
        }
    }
    let ku = (lo.0 * hi.0).sqrt();
    let period = lo.1.or(hi.1).ok_or_else(|| Error::Tuning {
        reason: "oscillation period not measurable".into(),
        best: Some(ku),
    })?;
    let (kp, ki) = ziegler_nichols_pi(ku, period);
    Ok(PiTuning {
        kp,
        ki,
        ultimate_gain: ku,
        ultimate_period: period,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::convert::Infallible;

    fn governor() -> Governor {
        Governor::new(GovernorConfig::default(), 50.0, 0.8).unwrap()
    }

    #[test]
    fn nominal_frequency_keeps_output() {
        let mut g = governor();
        for _ in 0..100 {
            assert_eq!(g.step(50.0, 0.7, 0.7, 0.1), 0.8);
        }
    }

    #[test]
    fn droop_arithmetic() {
        let g = governor();
        assert_relative_eq!(g.error(49.9, 0.7, 0.7), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn deadband_suppresses_small_deviations() {
        let cfg = GovernorConfig {
            deadband: 0.02,
            ..GovernorConfig::default()
        };
        let mut g = Governor::new(cfg, 50.0, 0.8).unwrap();
        assert_eq!(g.step(49.99, 0.7, 0.7, 0.1), 0.8);
        assert_relative_eq!(g.frequency_deviation(49.95), 0.03, epsilon = 1e-12);
    }

    #[test]
    fn output_respects_limits_and_rate() {
        let mut g = governor();
        let mut prev = g.output();
        for k in 0..400 {
            let f = if k < 200 { 48.0 } else { 52.0 };
            let y = g.step(f, 0.7, 0.7, 0.1);
            assert!((0.0..=1.0).contains(&y));
            assert!((y - prev).abs() <= 0.1 * 0.1 + 1e-12);
            prev = y;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn anti_windup_releases_promptly() {
        let mut g = governor();
        for _ in 0..600 {
            g.step(48.0, 0.7, 0.7, 0.1);
        }
        assert_eq!(g.output(), 1.0);
        // With the error reversed the output must leave the limit at once.
        let y = g.step(52.0, 0.7, 0.7, 0.1);
        assert!(y < 1.0);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = GovernorConfig {
            permanent_droop: 0.0,
            ..GovernorConfig::default()
        };
        assert!(Governor::new(bad, 50.0, 0.5).is_err());
    }

    fn generator() -> GeneratorModel {
        GeneratorModel::from_params(&PlantParameters::reference(), &GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn generator_constants() {
        let m = generator();
        assert_relative_eq!(m.inertia, 2.0 * 4.0 * 230e6 / (39.27f64 * 39.27), max_relative = 1e-4);
        assert_relative_eq!(m.electrical_torque(PI / 6.0), 5.86e6, max_relative = 1e-12);
    }

    #[test]
    fn equilibrium_is_kept() {
        let m = generator();
        let s = m.equilibrium(4e6, 50.0).unwrap();
        let (next, te) = generator_step(s, &m, 4e6, 50.0, 0.005).unwrap();
        assert!((next.angle - s.angle).abs() < 1e-12);
        assert!((next.speed - s.speed).abs() < 1e-12);
        assert_relative_eq!(te, 4e6, max_relative = 1e-12);
    }

    #[test]
    fn torque_step_settles_to_new_angle() {
        let m = generator();
        let mut s = m.equilibrium(4e6, 50.0).unwrap();
        let tm = 4e6 * 1.01;
        for _ in 0..12_000 {
            s = generator_step(s, &m, tm, 50.0, 0.005).unwrap().0;
        }
        assert!((m.electrical_torque(s.angle) - tm).abs() / tm < 1e-6);
        assert_relative_eq!(s.speed, 39.269908, epsilon = 1e-5);
    }

    #[test]
    fn overload_loses_synchronism() {
        let m = generator();
        let mut s = m.equilibrium(5.86e6, 50.0).unwrap();
        let err = (0..20_000).try_for_each(|_| {
            s = generator_step(s, &m, 3.0 * 5.86e6, 50.0, 0.005)?.0;
            Ok::<_, Error>(())
        });
        assert!(matches!(err, Err(Error::LossOfSynchronism { .. })));
    }

    /// Unit-step response of K / (s (s+1) (0.5 s + 1)) under unity feedback.
    fn toy_probe(k: f64) -> Result<ProbeOutcome> {
        let dt = 0.01;
        let mut x = DVector::zeros(3);
        let mut samples = Vec::new();
        for _ in 0..6000 {
            x = ode::rk4::<Infallible, _>(&x, dt, |s| {
                let u = k * (1.0 - s[0]);
                Ok(DVector::from_row_slice(&[s[1], s[2], 2.0 * u - 3.0 * s[2] - 2.0 * s[1]]))
            })
            .unwrap();
            if x[0].abs() > 1e6 {
                return Ok(ProbeOutcome::Diverged);
            }
            samples.push(x[0]);
        }
        Ok(ProbeOutcome::Trace { dt, samples })
    }

    #[test]
    fn toy_plant_ultimate_gain() {
        let t = tune_pi(toy_probe, &ZieglerNicholsSweep::default()).unwrap();
        assert_relative_eq!(t.ultimate_gain, 3.0, max_relative = 0.02);
        assert_relative_eq!(t.ultimate_period, 2.0 * PI / 2f64.sqrt(), max_relative = 0.02);
        let (kp, ki) = ziegler_nichols_pi(t.ultimate_gain, t.ultimate_period);
        assert_eq!((t.kp, t.ki), (kp, ki));
    }

    #[test]
    fn oscillating_at_first_gain() {
        let sweep = ZieglerNicholsSweep {
            gain_min: 4.0,
            ..ZieglerNicholsSweep::default()
        };
        let t = tune_pi(toy_probe, &sweep).unwrap();
        assert_eq!(t.ultimate_gain, 4.0);
    }

    #[test]
    fn no_oscillation_is_a_tuning_error() {
        let sweep = ZieglerNicholsSweep {
            gain_max: 1.0,
            ..ZieglerNicholsSweep::default()
        };
        assert!(matches!(tune_pi(toy_probe, &sweep), Err(Error::Tuning { best: Some(_), .. })));
    }
}
