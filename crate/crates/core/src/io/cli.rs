//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fatigue::{damage_index, rainflow, CycleSet, SnCurve};
use crate::harness::{
    compare_controllers, linear_fidelity, run_simulation, score, step_test_trace, tune_fatigue_filter, tune_lpf,
    ComparisonReport, ControllerSpec, FidelityReport,
};
use crate::io::config::{Config, FORMAT_VERSION};
use crate::io::results::{
    trace_digest, write_comparison_csv, write_json, write_run, ComparisonMetrics, Provenance, COMPARISON_CSV,
    CONFIG_FILE, FREQUENCY_FILE, METRICS_FILE,
};
use crate::io::trace::{load_frequency_csv, write_frequency_csv, FrequencyTrace};

/// Environment variable naming the root for run directories chosen
/// automatically when `--out` is absent.
pub const RUN_ROOT_ENV: &str = "PENSTOCK_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "penstock", version, about = "Fatigue-aware penstock control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one closed-loop experiment.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// base, mpc, lpf or fatigue-filter.
        #[arg(long, default_value = "mpc")]
        controller: String,
    },
    /// Run several controllers on the same trace and tabulate CC and RDI.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "base,mpc,lpf,fatigue-filter")]
        controllers: Vec<String>,
        /// Tune the LPF to the MPC tracking and the fatigue filter to the MPC damage first.
        #[arg(long = "match")]
        match_benchmarks: bool,
        /// Skip the per-controller trace directories.
        #[arg(long)]
        no_traces: bool,
    },
    /// Tune the LPF cutoff to a tracking correlation.
    TuneLpf {
        #[command(flatten)]
        common: Common,
        /// Target correlation; defaults to that of the MPC run.
        #[arg(long)]
        target_cc: Option<f64>,
    },
    /// Rainflow count and damage of a stress series.
    Fatigue {
        /// CSV whose last column is stress in Pa; header optional.
        #[arg(long)]
        stress: PathBuf,
        /// TOML S-N curve; the reference curve when absent.
        #[arg(long)]
        sn: Option<PathBuf>,
        /// Directory for fatigue.json; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare linear and nonlinear heads over a frequency step test.
    LinearizeCheck {
        #[arg(long)]
        config: PathBuf,
        /// Frequency step amplitude, Hz.
        #[arg(long, default_value_t = 0.05)]
        amplitude: f64,
        /// s
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// `synthetic` or a (time_s, freq_hz) CSV file.
    #[arg(long, default_value = "synthetic")]
    freq: String,
    /// Overrides the synthetic trace seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the simulated duration, s.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: &Path) -> std::result::Result<Config, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file `{}` not found", path.display())));
    }
    Ok(Config::load(path)?)
}

/// Configuration with command-line overrides applied, and its trace.
fn prepare(common: &Common) -> std::result::Result<(Config, FrequencyTrace), Failure> {
    let mut config = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        config.synthetic.seed = seed;
    }
    if let Some(d) = common.duration {
        config.simulation.duration = d;
        if config.simulation.warmup >= d {
            config.simulation.warmup = 0.0;
        }
    }
    config.validate()?;
    let trace = if common.freq == "synthetic" {
        config.synthetic_trace()?
    } else {
        let path = Path::new(&common.freq);
        if !path.is_file() {
            return Err(Failure::Usage(format!("frequency file `{}` not found", path.display())));
        }
        let t = load_frequency_csv(path, config.simulation.control_step)?;
        if t.duration() + 1e-9 < config.simulation.duration {
            warn!(
                "trace covers {:.1} s of {:.1} s; its last value is held",
                t.duration(),
                config.simulation.duration
            );
        }
        t
    };
    Ok((config, trace))
}

fn out_dir(out: &Option<PathBuf>, command: &str, digest: &str) -> PathBuf {
    match out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(format!("{command}-{}", &digest[..12]))
        }
    }
}

fn digest_of(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Simulate { common, controller } => {
            let (config, trace) = prepare(&common)?;
            let spec = config.experiment(config.controller(&controller).map_err(|e| Failure::Usage(e.to_string()))?, trace.clone());
            let dir = out_dir(&common.out, "simulate", &digest_of(&[&config.to_toml()?, &trace_digest(&trace), &controller]));
            let result = run_simulation(&spec)?;
            let m = write_run(&dir, &config, &trace, &result)?;
            println!(
                "{}: max damage {:.4e} at element {}, CC {} -> {}",
                m.controller,
                m.max_damage,
                m.most_damaged_element,
                m.tracking_cc.map_or("n/a".into(), |c| format!("{c:.5}")),
                dir.display()
            );
            if let Some(reason) = &m.aborted {
                eprintln!("warning: run aborted: {reason}");
            }
            Ok(())
        }
        Command::Compare {
            common,
            controllers,
            match_benchmarks,
            no_traces,
        } => {
            let (config, trace) = prepare(&common)?;
            let controllers = controllers
                .iter()
                .map(|c| ControllerSpec::from_name(c).map(|s| s.name().to_string()))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let key = format!("{controllers:?}{match_benchmarks}");
            let dir = out_dir(&common.out, "compare", &digest_of(&[&config.to_toml()?, &trace_digest(&trace), &key]));
            let (config, report, tuned) = run_comparison(&config, &trace, &controllers, match_benchmarks)?;
            std::fs::create_dir_all(&dir).map_err(Error::from)?;
            std::fs::write(dir.join(CONFIG_FILE), config.to_toml()?).map_err(Error::from)?;
            write_frequency_csv(&trace, &dir.join(FREQUENCY_FILE))?;
            write_comparison_csv(&report, &dir.join(COMPARISON_CSV))?;
            write_json(
                &ComparisonMetrics::new(&report, &tuned, Provenance::new(&config, &trace)?),
                &dir.join(METRICS_FILE),
            )?;
            if !no_traces {
                for r in &report.results {
                    write_run(&dir.join(&r.controller), &config, &trace, r)?;
                }
            }
            println!("{:<16} {:>8} {:>8} {:>6} {:>10}", "controller", "CC", "maxRDI", "worst", "solve ms");
            for r in &report.rows {
                println!(
                    "{:<16} {:>8.4} {:>8.4} {:>6} {:>10}",
                    r.controller,
                    r.cc,
                    r.max_rdi,
                    r.worst_element,
                    r.mean_solve_ms.map_or("-".into(), |v| format!("{v:.3}"))
                );
            }
            println!("-> {}", dir.display());
            Ok(())
        }
        Command::TuneLpf { common, target_cc } => {
            let (mut config, trace) = prepare(&common)?;
            let dir = out_dir(&common.out, "tune-lpf", &digest_of(&[&config.to_toml()?, &trace_digest(&trace), &format!("{target_cc:?}")]));
            let base_spec = config.experiment(ControllerSpec::Base, trace.clone());
            let base = run_simulation(&base_spec)?;
            let target = match target_cc {
                Some(t) => t,
                None => score(&run_simulation(&base_spec.with_controller(config.controller("mpc")?))?, &base)?.cc,
            };
            let t = &config.tuning;
            let (cutoff, row) = tune_lpf(&base_spec, &base, target, (t.lpf_bracket[0], t.lpf_bracket[1]), t.cc_tolerance)?;
            config.lpf.cutoff = cutoff;
            std::fs::create_dir_all(&dir).map_err(Error::from)?;
            std::fs::write(dir.join(CONFIG_FILE), config.to_toml()?).map_err(Error::from)?;
            write_json(
                &LpfTuning {
                    format_version: FORMAT_VERSION,
                    target_cc: target,
                    cutoff,
                    cc: row.cc,
                    max_rdi: row.max_rdi,
                },
                &dir.join("tuning.json"),
            )?;
            println!("cutoff {cutoff:.4} Hz: CC {:.5} (target {target:.5}), max RDI {:.4} -> {}", row.cc, row.max_rdi, dir.display());
            Ok(())
        }
        Command::Fatigue { stress, sn, out } => {
            if !stress.is_file() {
                return Err(Failure::Usage(format!("stress file `{}` not found", stress.display())));
            }
            let curve = match sn {
                Some(p) if !p.is_file() => return Err(Failure::Usage(format!("S-N file `{}` not found", p.display()))),
                Some(p) => load_sn(&p)?,
                None => SnCurve::default(),
            };
            let series = load_stress_csv(&stress)?;
            let cycles = rainflow(&series);
            let report = FatigueReport {
                format_version: FORMAT_VERSION,
                samples: series.len(),
                full_cycles: cycles.full_cycles().count(),
                half_cycles: cycles.half_cycles().count(),
                damage: damage_index(&cycles, &curve),
                sn: curve,
                cycles,
            };
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(Error::from)?;
                    write_json(&report, &dir.join("fatigue.json"))?;
                    println!("damage {:.6e} -> {}", report.damage, dir.display());
                }
                None => println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?),
            }
            Ok(())
        }
        Command::LinearizeCheck {
            config,
            amplitude,
            duration,
            out,
        } => {
            let mut config = load_config(&config)?;
            config.simulation.duration = duration;
            config.simulation.warmup = 0.0;
            config.validate()?;
            let trace = step_test_trace(config.plant.grid_frequency, amplitude, duration, config.simulation.control_step)?;
            let spec = config.experiment(ControllerSpec::Base, trace.clone());
            let report = linear_fidelity(&spec)?;
            let dir = out_dir(&out, "linearize-check", &digest_of(&[&config.to_toml()?, &trace_digest(&trace)]));
            std::fs::create_dir_all(&dir).map_err(Error::from)?;
            std::fs::write(dir.join(CONFIG_FILE), config.to_toml()?).map_err(Error::from)?;
            write_json(&report, &dir.join("fidelity.json"))?;
            print_fidelity(&report, &dir);
            Ok(())
        }
    }
}

fn print_fidelity(r: &FidelityReport, dir: &Path) {
    println!(
        "vane excursion {:.4} pu, max relative head MAE {:.3}% -> {}",
        r.vane_excursion,
        100.0 * r.max_relative_mae,
        dir.display()
    );
}

#[derive(Debug, Serialize, Deserialize)]
struct LpfTuning {
    format_version: u32,
    target_cc: f64,
    cutoff: f64,
    cc: f64,
    max_rdi: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FatigueReport {
    format_version: u32,
    samples: usize,
    full_cycles: usize,
    half_cycles: usize,
    damage: f64,
    sn: SnCurve,
    cycles: CycleSet,
}

fn load_sn(path: &Path) -> Result<SnCurve> {
    let text = std::fs::read_to_string(path)?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(v) = table.remove("format_version") {
        if v.as_integer() != Some(FORMAT_VERSION as i64) {
            return Err(Error::Config(format!("{}: unsupported format_version {v}", path.display())));
        }
    }
    let sn: SnCurve = table.try_into().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    sn.validate()?;
    Ok(sn)
}

/// Reads the last column of a CSV as a stress series; a non-numeric first
/// row is taken as a header.
fn load_stress_csv(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            row,
            reason: e.to_string(),
        })?;
        let Some(field) = rec.iter().next_back().filter(|f| !f.is_empty()) else {
            continue;
        };
        match field.parse::<f64>() {
            Ok(v) if v.is_finite() => out.push(v),
            Err(_) if row == 1 => continue,
            _ => {
                return Err(Error::Ingestion {
                    path: path.to_path_buf(),
                    row,
                    reason: format!("invalid stress `{field}`"),
                })
            }
        }
    }
    Ok(out)
}

/// Runs the listed controllers on one trace. With `match_benchmarks`, the
/// LPF cutoff is first tuned to the MPC tracking correlation and the fatigue
/// filter band to the MPC damage. Returns the configuration actually used and
/// the tuned parameter of each row.
pub fn run_comparison(
    config: &Config,
    trace: &FrequencyTrace,
    controllers: &[String],
    match_benchmarks: bool,
) -> Result<(Config, ComparisonReport, Vec<Option<f64>>)> {
    let mut config = config.clone();
    let mut tuned_lpf = None;
    let mut tuned_ff = None;
    if match_benchmarks {
        let has = |n: &str| controllers.iter().any(|c| c == n);
        if !(has("base") && has("mpc")) {
            return Err(Error::Comparison("matching needs the base and mpc controllers".into()));
        }
        let base_spec = config.experiment(ControllerSpec::Base, trace.clone());
        let base = run_simulation(&base_spec)?;
        let mpc = score(&run_simulation(&base_spec.with_controller(config.controller("mpc")?))?, &base)?;
        let t = config.tuning.clone();
        if has("lpf") {
            let (cutoff, _) = tune_lpf(&base_spec, &base, mpc.cc, (t.lpf_bracket[0], t.lpf_bracket[1]), t.cc_tolerance)?;
            info!("lpf cutoff matched at {cutoff} Hz");
            config.lpf.cutoff = cutoff;
            tuned_lpf = Some(cutoff);
        }
        if has("fatigue-filter") {
            let bracket = (t.fatigue_filter_bracket[0], t.fatigue_filter_bracket[1]);
            let (ff, _) = tune_fatigue_filter(&base_spec, &base, &config.fatigue_filter, mpc.max_rdi, bracket, t.rdi_tolerance)?;
            info!("fatigue filter band scale matched at {}", ff.band_scale);
            tuned_ff = Some(ff.band_scale);
            config.fatigue_filter = ff;
        }
    }
    let specs = controllers
        .iter()
        .map(|c| Ok(config.experiment(config.controller(c)?, trace.clone())))
        .collect::<Result<Vec<_>>>()?;
    let report = compare_controllers(&specs)?;
    let tuned = report
        .rows
        .iter()
        .map(|r| match r.controller.as_str() {
            "lpf" => tuned_lpf,
            "fatigue-filter" => tuned_ff,
            _ => None,
        })
        .collect();
    Ok((config, report, tuned))
}
