//! Closed-loop experiments: frequency trace, governor, optional pre-filter or
//! MPC, nonlinear hydraulics and generator, then fatigue and tracking metrics.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{FatigueFilter, FatigueFilterConfig, LowPassFilter};
use crate::electromech::{
    generator_step, tune_pi, GeneratorConfig, GeneratorModel, Governor, GovernorConfig, PiTuning, ProbeOutcome,
    ZieglerNicholsSweep,
};
use crate::error::{require_positive, Error, Result};
use crate::fatigue::{damage_index, rainflow, rdi, SnCurve, StressSeries};
use crate::hydraulics::{
    build_circuit, step_rk4, steady_state, turbine_head, turbine_power, turbine_torque, CircuitModel, HydraulicInputs,
    PlantParameters, StateVector,
};
use crate::io::trace::FrequencyTrace;
use crate::mpc::{head_bounds, HeadBounds, MpcConfig, MpcController};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Plant integration step, s.
    pub plant_step: f64,
    /// Governor and controller cadence, s.
    pub control_step: f64,
    /// Plant steps between recorded samples.
    pub record_every: usize,
    /// Initial span excluded from metrics, s.
    pub warmup: f64,
    /// s
    pub duration: f64,
    pub initial_opening: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            plant_step: 0.005,
            control_step: 0.1,
            record_every: 10,
            warmup: 60.0,
            duration: 3600.0,
            initial_opening: 0.8,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        require_positive("simulation.plant_step", self.plant_step)?;
        require_positive("simulation.control_step", self.control_step)?;
        require_positive("simulation.duration", self.duration)?;
        if self.record_every == 0 {
            return Err(Error::Config("simulation.record_every must be positive".into()));
        }
        if !(self.warmup >= 0.0 && self.warmup < self.duration) {
            return Err(Error::Config("simulation.warmup must lie in [0, duration)".into()));
        }
        if !(self.initial_opening > 0.0 && self.initial_opening <= 1.0) {
            return Err(Error::Config("simulation.initial_opening must lie in (0, 1]".into()));
        }
        let ratio = self.control_step / self.plant_step;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(Error::Config("control_step must be an integer multiple of plant_step".into()));
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.control_step / self.plant_step).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ControllerSpec {
    /// Governor set-point applied directly.
    Base,
    Mpc(MpcConfig),
    /// Low-pass filter on the frequency fed to the governor.
    Lpf { cutoff: f64 },
    FatigueFilter(FatigueFilterConfig),
}

impl ControllerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Mpc(_) => "mpc",
            Self::Lpf { .. } => "lpf",
            Self::FatigueFilter(_) => "fatigue-filter",
        }
    }

    /// Default configuration for a controller name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::Base),
            "mpc" => Ok(Self::Mpc(MpcConfig::default())),
            "lpf" => Ok(Self::Lpf { cutoff: 1.46 }),
            "fatigue-filter" | "ff" => Ok(Self::FatigueFilter(FatigueFilterConfig::default())),
            other => Err(Error::Config(format!("unknown controller `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub plant: PlantParameters,
    pub sn: SnCurve,
    pub governor: GovernorConfig,
    pub generator: GeneratorConfig,
    pub simulation: SimulationConfig,
    pub controller: ControllerSpec,
    pub trace: FrequencyTrace,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.sn.validate()?;
        self.governor.validate()?;
        self.simulation.validate()?;
        if self.trace.samples.is_empty() {
            return Err(Error::Config("frequency trace is empty".into()));
        }
        self.trace.check_plausible()?;
        match &self.controller {
            ControllerSpec::Mpc(c) => {
                c.validate()?;
                if (c.step - self.simulation.control_step).abs() > 1e-12 {
                    return Err(Error::Config("mpc.step must equal simulation.control_step".into()));
                }
                Ok(())
            }
            ControllerSpec::Lpf { cutoff } => require_positive("lpf.cutoff", *cutoff),
            ControllerSpec::FatigueFilter(c) => {
                require_positive("fatigue_filter.band_scale", c.band_scale)?;
                require_positive("fatigue_filter.regularization", c.regularization)
            }
            ControllerSpec::Base => Ok(()),
        }
    }

    pub fn with_controller(&self, controller: ControllerSpec) -> Self {
        Self {
            controller,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStep {
    pub iterations: usize,
    /// s
    pub solve_time: f64,
    pub max_slack: f64,
    /// Predicted head excursion beyond the band, m.
    pub band_excess: f64,
    /// Predicted excursion beyond band plus slack, m.
    pub residual_excess: f64,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub controller: String,
    /// s
    pub time: Vec<f64>,
    /// Grid frequency, Hz.
    pub frequency: Vec<f64>,
    /// Frequency seen by the governor after any pre-filter, Hz.
    pub governor_frequency: Vec<f64>,
    pub y_star: Vec<f64>,
    pub y_applied: Vec<f64>,
    /// rad/s
    pub speed: Vec<f64>,
    /// Mechanical power, pu.
    pub power: Vec<f64>,
    /// Heads per element, `[element][sample]`, m.
    pub heads: Vec<Vec<f64>>,
    pub elevations: Vec<f64>,
    pub bounds: HeadBounds,
    pub warmup_samples: usize,
    pub damage: Vec<f64>,
    /// Correlation of applied opening with the run's own set-point.
    pub tracking_cc: Option<f64>,
    pub solver: Vec<SolverStep>,
    pub aborted: Option<String>,
}

impl SimulationResult {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    /// Hoop stress trace of one element, Pa.
    pub fn stress(&self, element: usize, params: &PlantParameters) -> Vec<f64> {
        StressSeries::from_heads(&self.heads[element], self.elevations[element], self.bounds.nominal[element], params)
            .samples
    }

    pub fn max_damage(&self) -> f64 {
        self.damage.iter().cloned().fold(0.0, f64::max)
    }

    /// Element with the largest damage, zero-based.
    pub fn most_damaged(&self) -> usize {
        self.damage
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best })
            .0
    }

    /// Fraction of post-warmup samples, over all elements, within the band
    /// widened by `tolerance`.
    pub fn fraction_in_band(&self, tolerance: f64) -> f64 {
        let mut inside = 0usize;
        let mut total = 0usize;
        for (i, h) in self.heads.iter().enumerate() {
            for &v in &h[self.warmup_samples.min(h.len())..] {
                total += 1;
                if v >= self.bounds.lower[i] - tolerance && v <= self.bounds.upper[i] + tolerance {
                    inside += 1;
                }
            }
        }
        if total == 0 {
            1.0
        } else {
            inside as f64 / total as f64
        }
    }

    /// Recomputes per-element damage and tracking correlation from the
    /// stored traces.
    pub fn compute_metrics(&mut self, sn: &SnCurve, params: &PlantParameters) {
        self.damage = element_damage(&self.heads, &self.elevations, &self.bounds.nominal, self.warmup_samples, sn, params);
        let w = self.warmup_samples.min(self.len());
        self.tracking_cc = correlation(&self.y_applied[w..], &self.y_star[w..]).ok();
    }
}

pub fn element_damage(
    heads: &[Vec<f64>],
    elevations: &[f64],
    nominal: &[f64],
    warmup: usize,
    sn: &SnCurve,
    params: &PlantParameters,
) -> Vec<f64> {
    heads
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let h = &h[warmup.min(h.len())..];
            if h.len() < 2 {
                return 0.0;
            }
            let s = StressSeries::from_heads(h, elevations[i], nominal[i], params);
            damage_index(&rainflow(&s.samples), sn)
        })
        .collect()
}

/// Pearson correlation coefficient.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Initial operating point shared by every controller of an experiment.
pub struct OperatingPoint {
    pub circuit: CircuitModel,
    pub state: StateVector,
    pub opening: f64,
    pub bounds: HeadBounds,
}

pub fn operating_point(spec: &ExperimentSpec) -> Result<OperatingPoint> {
    let p = &spec.plant;
    let circuit = build_circuit(p, p.nominal_discharge)?;
    let y0 = spec.simulation.initial_opening;
    let state = steady_state(&circuit, y0, p.upstream_head, p.downstream_head)?;
    let bounds = head_bounds(&spec.sn, p, state.heads())?;
    Ok(OperatingPoint {
        circuit,
        state,
        opening: y0,
        bounds,
    })
}

fn power_pu(x: &StateVector, opening: f64, params: &PlantParameters) -> f64 {
    let qt = x.turbine_flow();
    turbine_power(qt, turbine_head(qt, opening, params).head, params) / params.rated_power
}

enum Actuator {
    Direct,
    Mpc(Box<MpcController>),
}

/// Runs one closed-loop experiment. Plant divergence or loss of synchronism
/// ends the run early; the partial traces are kept and `aborted` is set.
pub fn run_simulation(spec: &ExperimentSpec) -> Result<SimulationResult> {
    spec.validate()?;
    let sim = &spec.simulation;
    let p = &spec.plant;
    let op = operating_point(spec)?;
    let circuit = &op.circuit;
    let control_count = (sim.duration / sim.control_step).round() as usize;
    let substeps = sim.substeps();

    // Frequency fed to the governor at each control instant.
    let raw: Vec<f64> = (0..control_count)
        .map(|k| spec.trace.value_at(k as f64 * sim.control_step))
        .collect();
    let governor_input = match &spec.controller {
        ControllerSpec::Lpf { cutoff } => {
            let mut f = LowPassFilter::with_state(*cutoff, p.grid_frequency)?;
            raw.iter().map(|&v| f.step(v, sim.control_step)).collect()
        }
        ControllerSpec::FatigueFilter(cfg) => {
            FatigueFilter::new(circuit, &op.state, op.opening, &spec.governor, &spec.sn, sim.control_step, cfg)?
                .preprocess(&raw)?
        }
        _ => raw.clone(),
    };
    let mut actuator = match &spec.controller {
        ControllerSpec::Mpc(cfg) => Actuator::Mpc(Box::new(MpcController::new(
            cfg.clone(),
            circuit.clone(),
            op.bounds.clone(),
            op.opening,
        )?)),
        _ => Actuator::Direct,
    };

    let mut governor = Governor::new(spec.governor.clone(), p.grid_frequency, op.opening)?;
    let gen = GeneratorModel::from_params(p, &spec.generator)?;
    let mut x = op.state.clone();
    let mut applied = op.opening;
    let mut y_star = op.opening;
    let p_ref = power_pu(&x, applied, p);
    let torque0 = turbine_torque(x.turbine_flow(), turbine_head(x.turbine_flow(), applied, p).head, p.nominal_speed, p)?;
    let mut rotor = gen.equilibrium(torque0, raw[0])?;

    let n = circuit.element_count();
    let capacity = control_count * substeps / sim.record_every + 1;
    let mut result = SimulationResult {
        controller: spec.controller.name().to_string(),
        time: Vec::with_capacity(capacity),
        frequency: Vec::with_capacity(capacity),
        governor_frequency: Vec::with_capacity(capacity),
        y_star: Vec::with_capacity(capacity),
        y_applied: Vec::with_capacity(capacity),
        speed: Vec::with_capacity(capacity),
        power: Vec::with_capacity(capacity),
        heads: vec![Vec::with_capacity(capacity); n],
        elevations: p.elevations(),
        bounds: op.bounds.clone(),
        warmup_samples: 0,
        damage: vec![0.0; n],
        tracking_cc: None,
        solver: Vec::new(),
        aborted: None,
    };
    let record = |r: &mut SimulationResult, t: f64, f: f64, fg: f64, ys: f64, ya: f64, x: &StateVector, w: f64| {
        r.time.push(t);
        r.frequency.push(f);
        r.governor_frequency.push(fg);
        r.y_star.push(ys);
        r.y_applied.push(ya);
        r.speed.push(w);
        r.power.push(power_pu(x, ya, p));
        for (i, &h) in x.heads().iter().enumerate() {
            r.heads[i].push(h);
        }
    };
    record(&mut result, 0.0, raw[0], governor_input[0], y_star, applied, &x, rotor.speed);

    let mut step_index = 0usize;
    'run: for k in 0..control_count {
        let f = raw[k];
        let fg = governor_input[k];
        y_star = governor.step(fg, p_ref, power_pu(&x, applied, p), sim.control_step);
        applied = match &mut actuator {
            Actuator::Direct => y_star,
            Actuator::Mpc(ctrl) => match ctrl.step(&x, y_star) {
                Ok(sol) => {
                    result.solver.push(SolverStep {
                        iterations: sol.iterations,
                        solve_time: sol.solve_time.as_secs_f64(),
                        max_slack: sol.max_slack,
                        band_excess: sol.band_excess,
                        residual_excess: sol.residual_excess,
                        degraded: sol.degraded,
                    });
                    sol.first
                }
                Err(e) => {
                    result.aborted = Some(format!("t = {:.3} s: {e}", k as f64 * sim.control_step));
                    break 'run;
                }
            },
        };
        let u = HydraulicInputs {
            opening: applied,
            upstream_head: p.upstream_head,
            downstream_head: p.downstream_head,
            speed: rotor.speed,
        };
        for _ in 0..substeps {
            let t = (step_index + 1) as f64 * sim.plant_step;
            let advanced = step_rk4(&x, &HydraulicInputs { speed: rotor.speed, ..u }, circuit, sim.plant_step)
                .and_then(|next| {
                    let qt = x.turbine_flow();
                    let tm = turbine_torque(qt, turbine_head(qt, applied, p).head, rotor.speed.max(1e-6), p)?;
                    let (r, _) = generator_step(rotor, &gen, tm, f, sim.plant_step)?;
                    Ok((next, r))
                });
            match advanced {
                Ok((next, r)) => {
                    x = next;
                    rotor = r;
                }
                Err(e) => {
                    warn!("run aborted at t = {t:.3} s: {e}");
                    result.aborted = Some(format!("t = {t:.3} s: {e}"));
                    break 'run;
                }
            }
            step_index += 1;
            if step_index.is_multiple_of(sim.record_every) {
                record(&mut result, t, f, fg, y_star, applied, &x, rotor.speed);
            }
        }
    }

    let record_dt = sim.plant_step * sim.record_every as f64;
    result.warmup_samples = ((sim.warmup / record_dt).round() as usize).min(result.len());
    result.compute_metrics(&spec.sn, p);
    info!(
        "{} run: {} samples, max damage {:.3e}",
        result.controller,
        result.len(),
        result.max_damage()
    );
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub controller: String,
    /// Correlation of the applied opening with the base-case set-point.
    pub cc: f64,
    pub max_rdi: f64,
    pub rdi: Vec<f64>,
    /// Most damaged element, one-based.
    pub worst_element: usize,
    /// Mean and 99th percentile QP solve time, ms; MPC only.
    pub mean_solve_ms: Option<f64>,
    pub p99_solve_ms: Option<f64>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub results: Vec<SimulationResult>,
}

impl ComparisonReport {
    pub fn row(&self, controller: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.controller == controller)
    }
}

/// Solve time percentile in ms.
pub fn solve_time_percentile(steps: &[SolverStep], q: f64) -> Option<f64> {
    if steps.is_empty() {
        return None;
    }
    let mut t: Vec<f64> = steps.iter().map(|s| s.solve_time).collect();
    t.sort_by(f64::total_cmp);
    let idx = ((q * (t.len() - 1) as f64).ceil() as usize).min(t.len() - 1);
    Some(t[idx] * 1e3)
}

/// Scores a run against a completed base case: correlation of the applied
/// opening with the base set-point, and damage relative to the base case.
pub fn score(result: &SimulationResult, base: &SimulationResult) -> Result<ComparisonRow> {
    let rdi = rdi(&result.damage, &base.damage)?;
    let w = base.warmup_samples;
    let cc = if result.len() == base.len() {
        correlation(&result.y_applied[w..], &base.y_star[w..])?
    } else {
        f64::NAN
    };
    let mean = (!result.solver.is_empty())
        .then(|| result.solver.iter().map(|s| s.solve_time).sum::<f64>() / result.solver.len() as f64 * 1e3);
    Ok(ComparisonRow {
        controller: result.controller.clone(),
        cc,
        max_rdi: rdi.iter().cloned().fold(0.0, f64::max),
        worst_element: result.most_damaged() + 1,
        rdi,
        mean_solve_ms: mean,
        p99_solve_ms: solve_time_percentile(&result.solver, 0.99),
        aborted: result.aborted.clone(),
    })
}

/// Finds the low-pass cutoff whose run matches `target_cc` against the base
/// case within `tolerance`. Lower cutoffs track worse.
pub fn tune_lpf(
    spec: &ExperimentSpec,
    base: &SimulationResult,
    target_cc: f64,
    bracket: (f64, f64),
    tolerance: f64,
) -> Result<(f64, ComparisonRow)> {
    let run = |cutoff: f64| -> Result<f64> {
        let r = run_simulation(&spec.with_controller(ControllerSpec::Lpf { cutoff }))?;
        Ok(score(&r, base)?.cc)
    };
    let (cutoff, _) = crate::benchmarks::tune_lpf_cutoff(target_cc, run, bracket, tolerance)?;
    let r = run_simulation(&spec.with_controller(ControllerSpec::Lpf { cutoff }))?;
    Ok((cutoff, score(&r, base)?))
}

/// Finds the fatigue-filter band scale whose run matches `target_rdi` within
/// `tolerance`. Wider bands clip less and damage more.
pub fn tune_fatigue_filter(
    spec: &ExperimentSpec,
    base: &SimulationResult,
    template: &FatigueFilterConfig,
    target_rdi: f64,
    bracket: (f64, f64),
    tolerance: f64,
) -> Result<(FatigueFilterConfig, ComparisonRow)> {
    let with_scale = |band_scale: f64| {
        spec.with_controller(ControllerSpec::FatigueFilter(FatigueFilterConfig {
            band_scale,
            ..template.clone()
        }))
    };
    let run = |scale: f64| -> Result<f64> { Ok(score(&run_simulation(&with_scale(scale))?, base)?.max_rdi) };
    let (scale, _) = crate::benchmarks::bisect_monotone(run, bracket, target_rdi, tolerance, 30, true)?;
    let s = with_scale(scale);
    let row = score(&run_simulation(&s)?, base)?;
    match s.controller {
        ControllerSpec::FatigueFilter(cfg) => Ok((cfg, row)),
        _ => unreachable!(),
    }
}

/// Runs every spec (in parallel) and scores them against the base case,
/// which must be among them.
pub fn compare_controllers(specs: &[ExperimentSpec]) -> Result<ComparisonReport> {
    let first = specs.first().ok_or_else(|| Error::Comparison("no experiments given".into()))?;
    for s in specs {
        if s.plant != first.plant || s.trace != first.trace || s.simulation != first.simulation || s.sn != first.sn {
            return Err(Error::Comparison("experiments must share plant, trace, S-N curve and timing".into()));
        }
    }
    let base_index = specs
        .iter()
        .position(|s| s.controller == ControllerSpec::Base)
        .ok_or_else(|| Error::Comparison("a base-case experiment is required".into()))?;
    let results: Vec<SimulationResult> = specs.par_iter().map(run_simulation).collect::<Result<_>>()?;
    let base = &results[base_index];
    if let Some(reason) = &base.aborted {
        return Err(Error::Comparison(format!("base case aborted: {reason}")));
    }
    let rows = results.iter().map(|r| score(r, base)).collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport { rows, results })
}

/// Proportional-only power loop response to a reference step, used to find
/// the ultimate gain of the governor loop.
pub fn power_loop_probe(spec: &ExperimentSpec, kp: f64, step: f64, duration: f64) -> Result<ProbeOutcome> {
    let mut s = spec.clone();
    s.controller = ControllerSpec::Base;
    s.governor.kp = kp;
    s.governor.ki = 0.0;
    s.simulation.duration = duration;
    s.simulation.warmup = 0.0;
    s.trace = FrequencyTrace::constant(s.plant.grid_frequency, duration, s.simulation.control_step)?;
    // A reference step of `step` pu is the same error as this frequency dip.
    let df = step * s.plant.grid_frequency * s.governor.permanent_droop;
    for v in s.trace.samples.iter_mut() {
        *v -= df;
    }
    let r = run_simulation(&s)?;
    if r.aborted.is_some() {
        return Ok(ProbeOutcome::Diverged);
    }
    let saturated = r.y_star.iter().any(|&y| y <= s.governor.vane_min || y >= s.governor.vane_max);
    if saturated {
        return Ok(ProbeOutcome::Diverged);
    }
    Ok(ProbeOutcome::Trace {
        dt: s.simulation.plant_step * s.simulation.record_every as f64,
        samples: r.power,
    })
}

/// Ziegler-Nichols tuning of the governor on the configured plant.
pub fn tune_governor(spec: &ExperimentSpec, sweep: &ZieglerNicholsSweep) -> Result<PiTuning> {
    tune_pi(|kp| power_loop_probe(spec, kp, 0.01, 120.0), sweep)
}

/// Square-wave frequency test: nominal, then `-amplitude` and `+amplitude`
/// plateaus of a third of the remaining time each.
pub fn step_test_trace(nominal: f64, amplitude: f64, duration: f64, period: f64) -> Result<FrequencyTrace> {
    let mut trace = FrequencyTrace::constant(nominal, duration, period)?;
    let lead = duration / 12.0;
    let plateau = (duration - 2.0 * lead) / 2.0;
    for (k, v) in trace.samples.iter_mut().enumerate() {
        let t = k as f64 * period;
        if t >= lead && t < lead + plateau {
            *v -= amplitude;
        } else if t >= lead + plateau && t < lead + 2.0 * plateau {
            *v += amplitude;
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Mean absolute linear-vs-nonlinear head error per element, relative to
    /// that element's peak nonlinear head excursion.
    pub relative_mae: Vec<f64>,
    pub max_relative_mae: f64,
    /// Largest vane excursion from the initial opening, pu.
    pub vane_excursion: f64,
    /// Peak nonlinear head excursion per element, m.
    pub head_excursion: Vec<f64>,
}

/// Runs the base closed loop of `spec` and replays its applied openings
/// through the discrete model linearized at the initial steady state.
pub fn linear_fidelity(spec: &ExperimentSpec) -> Result<FidelityReport> {
    let spec = spec.with_controller(ControllerSpec::Base);
    let sim = &spec.simulation;
    let per_control = sim.substeps();
    if !per_control.is_multiple_of(sim.record_every) {
        return Err(Error::Config("control_step must be a multiple of the record interval".into()));
    }
    let stride = per_control / sim.record_every;
    let op = operating_point(&spec)?;
    let dss = crate::linearize::discretize(
        &crate::linearize::linearize(&op.circuit, &op.state, op.opening)?,
        sim.control_step,
    )?;
    let r = run_simulation(&spec)?;
    if let Some(reason) = r.aborted {
        return Err(Error::Instability(reason));
    }
    let n = r.heads.len();
    let steps = (r.len() - 1) / stride;
    let mut x = op.state.0.clone();
    let mut err = vec![0.0; n];
    let mut excursion = vec![0.0f64; n];
    for k in 0..=steps {
        let j = k * stride;
        for (i, &row) in dss.outputs.iter().enumerate() {
            err[i] += (x[row] - r.heads[i][j]).abs();
            excursion[i] = excursion[i].max((r.heads[i][j] - r.heads[i][0]).abs());
        }
        if k < steps {
            // Opening applied over the interval ending at the next control instant.
            x = dss.step(&x, r.y_applied[j + stride]);
        }
    }
    let relative_mae: Vec<f64> = err
        .iter()
        .zip(&excursion)
        .map(|(e, x)| if *x > 0.0 { e / (steps + 1) as f64 / x } else { 0.0 })
        .collect();
    Ok(FidelityReport {
        max_relative_mae: relative_mae.iter().cloned().fold(0.0, f64::max),
        relative_mae,
        vane_excursion: r.y_applied.iter().map(|y| (y - op.opening).abs()).fold(0.0, f64::max),
        head_excursion: excursion,
    })
}
