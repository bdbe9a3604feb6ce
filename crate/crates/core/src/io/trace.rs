//! Grid-frequency traces: CSV ingestion and Ornstein-Uhlenbeck synthesis.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{require_positive, Error, Result};

/// Plausibility gate on grid frequency samples, Hz.
pub const PLAUSIBLE_FREQUENCY: (f64, f64) = (45.0, 55.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceSource {
    File { path: PathBuf },
    Synthetic(SynthFrequencyParams),
    Constant { frequency: f64 },
}

/// Uniformly sampled grid frequency, held constant between samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTrace {
    /// s
    pub period: f64,
    /// Hz
    pub samples: Vec<f64>,
    pub source: TraceSource,
}

impl FrequencyTrace {
    pub fn constant(frequency: f64, duration: f64, period: f64) -> Result<Self> {
        require_positive("period", period)?;
        require_positive("duration", duration)?;
        let n = (duration / period).ceil() as usize;
        Ok(Self {
            period,
            samples: vec![frequency; n.max(1)],
            source: TraceSource::Constant { frequency },
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.period
    }

    /// Zero-order-hold value at time `t`; holds the last sample beyond the end.
    pub fn value_at(&self, t: f64) -> f64 {
        let k = (t / self.period + 1e-9).floor().max(0.0) as usize;
        self.samples[k.min(self.samples.len() - 1)]
    }

    /// Resamples by zero-order hold onto a grid of the given period.
    pub fn resample(&self, period: f64) -> Result<Self> {
        require_positive("period", period)?;
        let n = (self.duration() / period - 1e-9).ceil().max(1.0) as usize;
        Ok(Self {
            period,
            samples: (0..n).map(|j| self.value_at(j as f64 * period)).collect(),
            source: self.source.clone(),
        })
    }

    pub fn check_plausible(&self) -> Result<()> {
        let (lo, hi) = PLAUSIBLE_FREQUENCY;
        if let Some((k, v)) = self.samples.iter().enumerate().find(|(_, v)| !(lo..=hi).contains(*v)) {
            return Err(Error::Config(format!("trace sample {k} = {v} Hz outside [{lo}, {hi}] Hz")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthFrequencyParams {
    /// Hz
    pub mean: f64,
    /// Stationary standard deviation, Hz.
    pub stddev: f64,
    /// Mean-reversion time constant, s.
    pub reversion_time: f64,
    pub seed: u64,
}

impl Default for SynthFrequencyParams {
    fn default() -> Self {
        Self {
            mean: 50.0,
            stddev: 0.02,
            reversion_time: 60.0,
            seed: 0,
        }
    }
}

/// Ornstein-Uhlenbeck trace by exact discretization, starting at the mean.
pub fn synth_frequency(params: &SynthFrequencyParams, duration: f64, period: f64) -> Result<FrequencyTrace> {
    require_positive("duration", duration)?;
    require_positive("period", period)?;
    require_positive("reversion_time", params.reversion_time)?;
    if !(params.stddev.is_finite() && params.stddev >= 0.0) {
        return Err(Error::Parameter {
            name: "stddev",
            reason: format!("must be finite and >= 0, got {}", params.stddev),
        });
    }
    let n = (duration / period).ceil() as usize;
    let decay = (-period / params.reversion_time).exp();
    let noise = params.stddev * (1.0 - decay * decay).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut x = 0.0;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        samples.push(params.mean + x);
        let z: f64 = StandardNormal.sample(&mut rng);
        x = x * decay + noise * z;
    }
    let trace = FrequencyTrace {
        period,
        samples,
        source: TraceSource::Synthetic(params.clone()),
    };
    trace.check_plausible()?;
    Ok(trace)
}

fn ingest(path: &Path, row: usize, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        row,
        reason: reason.into(),
    }
}

/// Loads a `(time_s, freq_hz)` CSV with optional header and resamples it to
/// `period` by zero-order hold. Rows are reported 1-based as in the file.
pub fn load_frequency_csv(path: &Path, period: f64) -> Result<FrequencyTrace> {
    require_positive("period", period)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| ingest(path, row, e.to_string()))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if record.len() != 2 {
            return Err(ingest(path, row, format!("expected 2 columns, found {}", record.len())));
        }
        let parsed = (record[0].parse::<f64>(), record[1].parse::<f64>());
        let (t, f) = match parsed {
            (Ok(t), Ok(f)) => (t, f),
            _ if row == 1 => continue,
            _ => return Err(ingest(path, row, "non-numeric field")),
        };
        if !t.is_finite() || !f.is_finite() {
            return Err(ingest(path, row, "non-finite value"));
        }
        let (lo, hi) = PLAUSIBLE_FREQUENCY;
        if !(lo..=hi).contains(&f) {
            return Err(ingest(path, row, format!("frequency {f} Hz outside [{lo}, {hi}] Hz")));
        }
        if let Some(&(prev, _)) = points.last() {
            if t <= prev {
                return Err(ingest(path, row, format!("time {t} s not after {prev} s")));
            }
        }
        points.push((t, f));
        let n = points.len();
        if n >= 3 {
            let nominal = points[1].0 - points[0].0;
            let gap = t - points[n - 2].0;
            if gap > 1.5 * nominal {
                return Err(ingest(path, row, format!("gap of {gap} s exceeds 1.5 x sample period {nominal} s")));
            }
        }
    }
    if points.len() < 2 {
        return Err(ingest(path, points.len(), "need at least two samples"));
    }
    let file_period = points[1].0 - points[0].0;
    let t0 = points[0].0;
    let end = points[points.len() - 1].0 + file_period - t0;
    let n = (end / period - 1e-9).ceil() as usize;
    let mut samples = Vec::with_capacity(n);
    let mut k = 0;
    for j in 0..n {
        let t = t0 + j as f64 * period;
        while k + 1 < points.len() && points[k + 1].0 <= t + 1e-9 * period {
            k += 1;
        }
        samples.push(points[k].1);
    }
    Ok(FrequencyTrace {
        period,
        samples,
        source: TraceSource::File { path: path.to_path_buf() },
    })
}

/// Writes a trace as `time_s,freq_hz` with a header row.
pub fn write_frequency_csv(trace: &FrequencyTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time_s", "freq_hz"])?;
    for (k, f) in trace.samples.iter().enumerate() {
        w.write_record([format!("{}", k as f64 * trace.period), format!("{f}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_sample_constant_trace() {
        let f = file("0,50.0\n1,50.0\n");
        let t = load_frequency_csv(f.path(), 1.0).unwrap();
        assert_eq!(t.samples, vec![50.0, 50.0]);
    }

    #[test]
    fn header_is_optional() {
        let f = file("time_s,freq_hz\n0,50.0\n1,49.9\n");
        let t = load_frequency_csv(f.path(), 0.5).unwrap();
        assert_eq!(t.samples, vec![50.0, 50.0, 49.9, 49.9]);
    }

    #[test]
    fn non_monotone_time_names_row() {
        let f = file("0,50\n1,50\n3,50\n2,50\n");
        match load_frequency_csv(f.path(), 1.0) {
            Err(Error::Ingestion { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        let f = file("0,50\n1,50\n1,50\n");
        assert!(matches!(load_frequency_csv(f.path(), 1.0), Err(Error::Ingestion { row: 3, .. })));
    }

    #[test]
    fn gaps_malformed_rows_and_gate() {
        let f = file("0,50\n1,50\n2,50\n4,50\n");
        assert!(matches!(load_frequency_csv(f.path(), 1.0), Err(Error::Ingestion { row: 4, .. })));
        let f = file("0,50\n1,abc\n");
        assert!(matches!(load_frequency_csv(f.path(), 1.0), Err(Error::Ingestion { row: 2, .. })));
        let f = file("0,50\n1,60\n");
        assert!(matches!(load_frequency_csv(f.path(), 1.0), Err(Error::Ingestion { row: 2, .. })));
        let f = file("0,50,1\n");
        assert!(matches!(load_frequency_csv(f.path(), 1.0), Err(Error::Ingestion { row: 1, .. })));
    }

    #[test]
    fn zero_order_hold_upsampling() {
        let rows: String = (0..10).map(|k| format!("{},{}\n", k as f64 * 0.1, 50.0 + 0.01 * k as f64)).collect();
        let f = file(&rows);
        let t = load_frequency_csv(f.path(), 0.005).unwrap();
        assert_eq!(t.samples.len(), 200);
        for (j, chunk) in t.samples.chunks(20).enumerate() {
            assert!(chunk.iter().all(|&v| v == 50.0 + 0.01 * j as f64));
        }
    }

    #[test]
    fn synthetic_statistics_and_determinism() {
        let p = SynthFrequencyParams {
            stddev: 0.0,
            ..Default::default()
        };
        assert!(synth_frequency(&p, 100.0, 1.0).unwrap().samples.iter().all(|&v| v == 50.0));
        let p = SynthFrequencyParams {
            seed: 11,
            ..Default::default()
        };
        let a = synth_frequency(&p, 200_000.0, 1.0).unwrap();
        let b = synth_frequency(&p, 200_000.0, 1.0).unwrap();
        assert_eq!(a, b);
        let n = a.samples.len() as f64;
        let mean = a.samples.iter().sum::<f64>() / n;
        let sd = (a.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 0.02).abs() < 0.002, "{sd}");
    }

    #[test]
    fn resample_and_lookup() {
        let t = FrequencyTrace {
            period: 1.0,
            samples: vec![50.0, 49.0],
            source: TraceSource::Constant { frequency: 50.0 },
        };
        assert_eq!(t.value_at(0.999), 50.0);
        assert_eq!(t.value_at(1.0), 49.0);
        assert_eq!(t.value_at(7.0), 49.0);
        assert_eq!(t.resample(0.5).unwrap().samples, vec![50.0, 50.0, 49.0, 49.0]);
    }
}
