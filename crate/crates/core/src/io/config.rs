//! TOML experiment configuration. Every table is optional and falls back to
//! the reference plant; [`Config::to_toml`] writes the fully materialized form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchmarks::FatigueFilterConfig;
use crate::electromech::{GeneratorConfig, GovernorConfig};
use crate::error::{require_positive, Error, Result};
use crate::fatigue::SnCurve;
use crate::harness::{ControllerSpec, ExperimentSpec, SimulationConfig};
use crate::hydraulics::PlantParameters;
use crate::io::trace::{synth_frequency, FrequencyTrace, SynthFrequencyParams};
use crate::mpc::MpcConfig;

/// Version written to and required from every configuration and result file.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpfConfig {
    /// Hz
    pub cutoff: f64,
}

impl Default for LpfConfig {
    fn default() -> Self {
        Self { cutoff: 1.46 }
    }
}

/// Search settings for matching benchmarks to the MPC run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    /// Hz
    pub lpf_bracket: [f64; 2],
    pub cc_tolerance: f64,
    pub fatigue_filter_bracket: [f64; 2],
    pub rdi_tolerance: f64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            lpf_bracket: [0.01, 10.0],
            cc_tolerance: 0.002,
            fatigue_filter_bracket: [0.05, 5.0],
            rdi_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub format_version: u32,
    pub plant: PlantParameters,
    pub sn: SnCurve,
    pub governor: GovernorConfig,
    pub generator: GeneratorConfig,
    pub simulation: SimulationConfig,
    pub mpc: MpcConfig,
    pub lpf: LpfConfig,
    pub fatigue_filter: FatigueFilterConfig,
    pub synthetic: SynthFrequencyParams,
    pub tuning: TuningConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            plant: PlantParameters::reference(),
            sn: SnCurve::default(),
            governor: GovernorConfig::default(),
            generator: GeneratorConfig::default(),
            simulation: SimulationConfig::default(),
            mpc: MpcConfig::default(),
            lpf: LpfConfig::default(),
            fatigue_filter: FatigueFilterConfig::default(),
            synthetic: SynthFrequencyParams::default(),
            tuning: TuningConfig::default(),
        }
    }
}

impl Config {
    /// Parses a configuration; `format_version` must be present and current.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match table.get("format_version").and_then(toml::Value::as_integer) {
            Some(v) if v == FORMAT_VERSION as i64 => {}
            Some(v) => return Err(Error::Config(format!("unsupported format_version {v}"))),
            None => return Err(Error::Config("missing integer `format_version`".into())),
        }
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copy with every derived plant quantity written out.
    pub fn resolved(&self) -> Self {
        Self {
            plant: self.plant.resolved(),
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(&self.resolved()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.sn.validate()?;
        self.governor.validate()?;
        self.simulation.validate()?;
        self.mpc.validate()?;
        require_positive("lpf.cutoff", self.lpf.cutoff)?;
        require_positive("fatigue_filter.band_scale", self.fatigue_filter.band_scale)?;
        require_positive("fatigue_filter.regularization", self.fatigue_filter.regularization)?;
        require_positive("synthetic.reversion_time", self.synthetic.reversion_time)?;
        let t = &self.tuning;
        for (name, [lo, hi]) in [("tuning.lpf_bracket", t.lpf_bracket), ("tuning.fatigue_filter_bracket", t.fatigue_filter_bracket)] {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::Config(format!("{name} must satisfy 0 < lower < upper")));
            }
        }
        require_positive("tuning.cc_tolerance", t.cc_tolerance)?;
        require_positive("tuning.rdi_tolerance", t.rdi_tolerance)
    }

    /// Controller with the parameters of its configuration table.
    pub fn controller(&self, name: &str) -> Result<ControllerSpec> {
        Ok(match ControllerSpec::from_name(name)? {
            ControllerSpec::Base => ControllerSpec::Base,
            ControllerSpec::Mpc(_) => ControllerSpec::Mpc(self.mpc.clone()),
            ControllerSpec::Lpf { .. } => ControllerSpec::Lpf { cutoff: self.lpf.cutoff },
            ControllerSpec::FatigueFilter(_) => ControllerSpec::FatigueFilter(self.fatigue_filter.clone()),
        })
    }

    /// Synthetic trace covering the simulated duration at the control cadence.
    pub fn synthetic_trace(&self) -> Result<FrequencyTrace> {
        synth_frequency(&self.synthetic, self.simulation.duration, self.simulation.control_step)
    }

    pub fn experiment(&self, controller: ControllerSpec, trace: FrequencyTrace) -> ExperimentSpec {
        ExperimentSpec {
            plant: self.plant.clone(),
            sn: self.sn,
            governor: self.governor.clone(),
            generator: self.generator.clone(),
            simulation: self.simulation.clone(),
            controller,
            trace,
        }
    }
}
