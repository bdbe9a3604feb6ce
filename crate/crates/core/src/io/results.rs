//! Run directories: traces as CSV, deterministic metrics as JSON, solve
//! timings kept apart because they vary between runs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{solve_time_percentile, ComparisonReport, SimulationResult, SolverStep};
use crate::io::config::{Config, FORMAT_VERSION};
use crate::io::trace::{write_frequency_csv, FrequencyTrace};
use crate::mpc::HeadBounds;

pub const CONFIG_FILE: &str = "config.toml";
pub const TRACES_FILE: &str = "traces.csv";
pub const SOLVER_FILE: &str = "solver.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";
pub const FREQUENCY_FILE: &str = "frequency.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hash of the materialized configuration text.
    pub config_sha256: String,
    /// Hash of the frequency trace period and samples.
    pub trace_sha256: String,
}

impl Provenance {
    pub fn new(config: &Config, trace: &FrequencyTrace) -> Result<Self> {
        Ok(Self {
            config_sha256: hex::encode(Sha256::digest(config.to_toml()?.as_bytes())),
            trace_sha256: trace_digest(trace),
        })
    }
}

pub fn trace_digest(trace: &FrequencyTrace) -> String {
    let mut h = Sha256::new();
    h.update(trace.period.to_le_bytes());
    for v in &trace.samples {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub steps: usize,
    pub max_iterations: usize,
    pub max_slack: f64,
    pub max_band_excess: f64,
    pub max_residual_excess: f64,
    pub degraded_steps: usize,
}

impl SolverSummary {
    pub fn from_steps(steps: &[SolverStep]) -> Option<Self> {
        (!steps.is_empty()).then(|| Self {
            steps: steps.len(),
            max_iterations: steps.iter().map(|s| s.iterations).max().unwrap_or(0),
            max_slack: steps.iter().map(|s| s.max_slack).fold(0.0, f64::max),
            max_band_excess: steps.iter().map(|s| s.band_excess).fold(0.0, f64::max),
            max_residual_excess: steps.iter().map(|s| s.residual_excess).fold(0.0, f64::max),
            degraded_steps: steps.iter().filter(|s| s.degraded).count(),
        })
    }
}

/// Deterministic summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub format_version: u32,
    pub controller: String,
    pub samples: usize,
    pub warmup_samples: usize,
    pub damage: Vec<f64>,
    pub max_damage: f64,
    /// One-based.
    pub most_damaged_element: usize,
    pub tracking_cc: Option<f64>,
    pub fraction_in_band: f64,
    pub bounds: HeadBounds,
    pub elevations: Vec<f64>,
    pub solver: Option<SolverSummary>,
    pub aborted: Option<String>,
    pub provenance: Provenance,
}

impl RunMetrics {
    pub fn new(result: &SimulationResult, provenance: Provenance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            controller: result.controller.clone(),
            samples: result.len(),
            warmup_samples: result.warmup_samples,
            damage: result.damage.clone(),
            max_damage: result.max_damage(),
            most_damaged_element: result.most_damaged() + 1,
            tracking_cc: result.tracking_cc,
            fraction_in_band: result.fraction_in_band(0.0),
            bounds: result.bounds.clone(),
            elevations: result.elevations.clone(),
            solver: SolverSummary::from_steps(&result.solver),
            aborted: result.aborted.clone(),
            provenance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub format_version: u32,
    pub mean_solve_ms: Option<f64>,
    pub p99_solve_ms: Option<f64>,
    pub max_solve_ms: Option<f64>,
}

impl TimingSummary {
    pub fn from_steps(steps: &[SolverStep]) -> Self {
        let mean = (!steps.is_empty()).then(|| steps.iter().map(|s| s.solve_time).sum::<f64>() / steps.len() as f64 * 1e3);
        Self {
            format_version: FORMAT_VERSION,
            mean_solve_ms: mean,
            p99_solve_ms: solve_time_percentile(steps, 0.99),
            max_solve_ms: solve_time_percentile(steps, 1.0),
        }
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_traces(result: &SimulationResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["time_s", "freq_hz", "governor_freq_hz", "y_star", "y_applied", "speed_rad_s", "power_pu"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=result.heads.len()).map(|i| format!("h_{i}")));
    w.write_record(&header)?;
    for k in 0..result.len() {
        let mut row = vec![
            result.time[k],
            result.frequency[k],
            result.governor_frequency[k],
            result.y_star[k],
            result.y_applied[k],
            result.speed[k],
            result.power[k],
        ];
        row.extend(result.heads.iter().map(|h| h[k]));
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn parse_rows(path: &Path, columns: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        // Row 1 is the header.
        let bad = |reason: String| Error::Ingestion {
            path: path.to_path_buf(),
            row: k + 2,
            reason,
        };
        if rec.len() != columns {
            return Err(bad(format!("expected {columns} columns, found {}", rec.len())));
        }
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_solver(steps: &[SolverStep], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iterations", "solve_time_s", "max_slack", "band_excess", "residual_excess", "degraded"])?;
    for s in steps {
        w.write_record([
            s.iterations.to_string(),
            s.solve_time.to_string(),
            s.max_slack.to_string(),
            s.band_excess.to_string(),
            s.residual_excess.to_string(),
            u8::from(s.degraded).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_solver(path: &Path) -> Result<Vec<SolverStep>> {
    Ok(parse_rows(path, 6)?
        .into_iter()
        .map(|r| SolverStep {
            iterations: r[0] as usize,
            solve_time: r[1],
            max_slack: r[2],
            band_excess: r[3],
            residual_excess: r[4],
            degraded: r[5] != 0.0,
        })
        .collect())
}

/// Writes a complete run directory and returns its metrics.
pub fn write_run(dir: &Path, config: &Config, trace: &FrequencyTrace, result: &SimulationResult) -> Result<RunMetrics> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml()?)?;
    write_frequency_csv(trace, &dir.join(FREQUENCY_FILE))?;
    write_traces(result, &dir.join(TRACES_FILE))?;
    if !result.solver.is_empty() {
        write_solver(&result.solver, &dir.join(SOLVER_FILE))?;
        write_json(&TimingSummary::from_steps(&result.solver), &dir.join(TIMING_FILE))?;
    }
    let metrics = RunMetrics::new(result, Provenance::new(config, trace)?);
    write_json(&metrics, &dir.join(METRICS_FILE))?;
    Ok(metrics)
}

/// Rebuilds a run from its directory, recomputing every metric from the
/// stored traces.
pub fn load_run(dir: &Path) -> Result<(Config, SimulationResult)> {
    let config = Config::load(&dir.join(CONFIG_FILE))?;
    let stored: RunMetrics = read_json(&dir.join(METRICS_FILE))?;
    if stored.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported format_version {}", stored.format_version)));
    }
    let n = stored.elevations.len();
    let rows = parse_rows(&dir.join(TRACES_FILE), 7 + n)?;
    let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
    let solver_path = dir.join(SOLVER_FILE);
    let mut result = SimulationResult {
        controller: stored.controller,
        time: col(0),
        frequency: col(1),
        governor_frequency: col(2),
        y_star: col(3),
        y_applied: col(4),
        speed: col(5),
        power: col(6),
        heads: (0..n).map(|i| col(7 + i)).collect(),
        elevations: stored.elevations,
        bounds: stored.bounds,
        warmup_samples: stored.warmup_samples,
        damage: Vec::new(),
        tracking_cc: None,
        solver: if solver_path.exists() { read_solver(&solver_path)? } else { Vec::new() },
        aborted: stored.aborted,
    };
    result.compute_metrics(&config.sn, &config.plant);
    Ok((config, result))
}

/// Deterministic comparison summary; solve times go to the CSV only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMetrics {
    pub format_version: u32,
    pub rows: Vec<ComparisonEntry>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub controller: String,
    pub cc: f64,
    pub max_rdi: f64,
    pub worst_element: usize,
    pub rdi: Vec<f64>,
    /// Tuned benchmark parameter, when matching was requested.
    pub tuned: Option<f64>,
    pub aborted: Option<String>,
}

impl ComparisonMetrics {
    pub fn new(report: &ComparisonReport, tuned: &[Option<f64>], provenance: Provenance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            rows: report
                .rows
                .iter()
                .enumerate()
                .map(|(k, r)| ComparisonEntry {
                    controller: r.controller.clone(),
                    cc: r.cc,
                    max_rdi: r.max_rdi,
                    worst_element: r.worst_element,
                    rdi: r.rdi.clone(),
                    tuned: tuned.get(k).copied().flatten(),
                    aborted: r.aborted.clone(),
                })
                .collect(),
            provenance,
        }
    }
}

/// One row per controller: CC, max RDI, solve times, per-element RDI.
pub fn write_comparison_csv(report: &ComparisonReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = report.rows.first().map_or(0, |r| r.rdi.len());
    let mut header: Vec<String> = ["controller", "cc", "max_rdi", "worst_element", "mean_solve_ms", "p99_solve_ms"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=n).map(|i| format!("rdi_{i}")));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
    for r in &report.rows {
        let mut row = vec![
            r.controller.clone(),
            format!("{:.4}", r.cc),
            format!("{:.4}", r.max_rdi),
            r.worst_element.to_string(),
            opt(r.mean_solve_ms),
            opt(r.p99_solve_ms),
        ];
        row.extend(r.rdi.iter().map(|v| format!("{v:.4}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
