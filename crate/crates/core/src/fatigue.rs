//! Stress conversion, rainflow cycle counting, S-N life and Miner damage.

use serde::{Deserialize, Serialize};

use crate::error::{require_positive, Error, Result};
use crate::hydraulics::PlantParameters;

/// Bi-linear Wöhler curve in log-log space, anchored at the fatigue limit.
///
/// Above the limit `N = N_knee (Δσ̄/Δσ)^slope`; below it the shallower
/// `slope_below_limit` applies instead of an infinite endurance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnCurve {
    pub slope: f64,
    /// Pa
    pub fatigue_limit: f64,
    pub slope_below_limit: f64,
    pub knee_cycles: f64,
}

impl Default for SnCurve {
    fn default() -> Self {
        Self {
            slope: 3.0,
            fatigue_limit: 23e6,
            slope_below_limit: 5.0,
            knee_cycles: 1e7,
        }
    }
}

impl SnCurve {
    pub fn validate(&self) -> Result<()> {
        require_positive("slope", self.slope)?;
        require_positive("slope_below_limit", self.slope_below_limit)?;
        require_positive("fatigue_limit", self.fatigue_limit)?;
        require_positive("knee_cycles", self.knee_cycles)
    }
}

/// Cycles to failure at stress range `range` (Pa).
pub fn cycles_to_failure(range: f64, sn: &SnCurve) -> f64 {
    let ratio = sn.fatigue_limit / range;
    let slope = if range >= sn.fatigue_limit {
        sn.slope
    } else {
        sn.slope_below_limit
    };
    sn.knee_cycles * ratio.powf(slope)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cycle {
    pub range: f64,
    /// 1.0 for a closed cycle, 0.5 for an unclosed residual range.
    pub count: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleSet {
    pub cycles: Vec<Cycle>,
}

impl CycleSet {
    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    pub fn full_cycles(&self) -> impl Iterator<Item = f64> + '_ {
        self.cycles.iter().filter(|c| c.count == 1.0).map(|c| c.range)
    }

    pub fn half_cycles(&self) -> impl Iterator<Item = f64> + '_ {
        self.cycles.iter().filter(|c| c.count == 0.5).map(|c| c.range)
    }

    pub fn max_range(&self) -> f64 {
        self.cycles.iter().map(|c| c.range).fold(0.0, f64::max)
    }
}

/// Hoop stress series of one penstock element.
#[derive(Debug, Clone, PartialEq)]
pub struct StressSeries {
    pub elevation: f64,
    pub nominal: f64,
    pub samples: Vec<f64>,
}

impl StressSeries {
    pub fn from_heads(heads: &[f64], elevation: f64, nominal_head: f64, params: &PlantParameters) -> Self {
        Self {
            elevation,
            nominal: stress(nominal_head, elevation, params),
            samples: head_to_stress(heads, elevation, params),
        }
    }
}

/// Hoop stress `(h - z) ρ g D / (2 e)` for a single head value.
pub fn stress(head: f64, elevation: f64, params: &PlantParameters) -> f64 {
    (head - elevation) * stress_per_metre(params)
}

/// Pa of hoop stress per metre of pressure head.
pub fn stress_per_metre(params: &PlantParameters) -> f64 {
    params.pressure_factor() * params.penstock_diameter / (2.0 * params.wall_thickness)
}

pub fn head_to_stress(heads: &[f64], elevation: f64, params: &PlantParameters) -> Vec<f64> {
    let k = stress_per_metre(params);
    heads.iter().map(|h| (h - elevation) * k).collect()
}

/// Reduces a series to its alternating peaks and valleys. The first and last
/// samples are always kept; plateaus collapse to one point.
pub fn turning_points(series: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &v in series {
        match out.len() {
            0 => out.push(v),
            1 => {
                if v != out[0] {
                    out.push(v);
                }
            }
            n => {
                let (a, b) = (out[n - 2], out[n - 1]);
                if v == b {
                    continue;
                }
                if (b - a) * (v - b) > 0.0 {
                    // Still moving the same way: extend the current excursion.
                    out[n - 1] = v;
                } else {
                    out.push(v);
                }
            }
        }
    }
    out
}

/// ASTM E1049 rainflow counting. Residual ranges left on the stack at the end
/// of the series are counted as half cycles.
pub fn rainflow(series: &[f64]) -> CycleSet {
    let mut cycles = Vec::new();
    // The bottom of the stack is always the current starting point of the
    // history, so a range involving it can only be counted as a half cycle.
    let mut stack: Vec<f64> = Vec::new();
    for point in turning_points(series) {
        stack.push(point);
        while stack.len() >= 3 {
            let n = stack.len();
            let x = (stack[n - 1] - stack[n - 2]).abs();
            let y = (stack[n - 2] - stack[n - 3]).abs();
            if x < y {
                break;
            }
            if n == 3 {
                cycles.push(Cycle { range: y, count: 0.5 });
                stack.remove(0);
            } else {
                cycles.push(Cycle { range: y, count: 1.0 });
                stack.drain(n - 3..n - 1);
            }
        }
    }
    for w in stack.windows(2) {
        cycles.push(Cycle {
            range: (w[1] - w[0]).abs(),
            count: 0.5,
        });
    }
    CycleSet { cycles }
}

/// Miner's rule `Σ n_j / N(Δσ_j)`.
pub fn damage_index(cycles: &CycleSet, sn: &SnCurve) -> f64 {
    cycles
        .cycles
        .iter()
        .filter(|c| c.range > 0.0)
        .map(|c| c.count / cycles_to_failure(c.range, sn))
        .sum()
}

/// Relative damage index: each controlled-case damage normalised by the worst
/// base-case element.
pub fn rdi(controlled: &[f64], base: &[f64]) -> Result<Vec<f64>> {
    if controlled.len() != base.len() {
        return Err(Error::Construction(format!(
            "damage vectors differ in length ({} vs {})",
            controlled.len(),
            base.len()
        )));
    }
    let worst = base.iter().cloned().fold(0.0, f64::max);
    if !(worst > 0.0) {
        return Err(Error::UndefinedRdi);
    }
    Ok(controlled.iter().map(|d| d / worst).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Independent four-point rainflow: closed cycles are extracted whenever an
    /// inner range is bracketed by both neighbours; the residue is then read
    /// as half cycles.
    fn four_point(series: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut dedup: Vec<f64> = series.to_vec();
        dedup.dedup();
        let mut pts: Vec<f64> = Vec::new();
        for (i, &v) in dedup.iter().enumerate() {
            let interior = i > 0 && i + 1 < dedup.len();
            if !interior || (v - dedup[i - 1]) * (dedup[i + 1] - v) < 0.0 {
                pts.push(v);
            }
        }
        let mut full = Vec::new();
        'outer: loop {
            for i in 0..pts.len().saturating_sub(3) {
                let (a, b, c, d) = (pts[i], pts[i + 1], pts[i + 2], pts[i + 3]);
                let inner = (b - c).abs();
                if inner <= (a - b).abs() && inner <= (c - d).abs() {
                    full.push(inner);
                    pts.drain(i + 1..i + 3);
                    continue 'outer;
                }
            }
            break;
        }
        let half = pts.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        (full, half)
    }

    /// Cycle count per range; ASTM counts a tied range that touches the start
    /// as two halves where the four-point method counts one full cycle.
    fn histogram(full: &[f64], half: &[f64]) -> Vec<(i64, f64)> {
        let mut h = std::collections::BTreeMap::new();
        for &r in full {
            *h.entry(r.round() as i64).or_insert(0.0) += 1.0;
        }
        for &r in half {
            *h.entry(r.round() as i64).or_insert(0.0) += 0.5;
        }
        h.into_iter().collect()
    }

    #[test]
    fn astm_worked_example() {
        let s = [-2.0, 1.0, -3.0, 5.0, -1.0, 3.0, -4.0, 4.0, -2.0];
        let c = rainflow(&s);
        assert_eq!(c.full_cycles().collect::<Vec<_>>(), vec![4.0]);
        assert_eq!(c.half_cycles().collect::<Vec<_>>(), vec![3.0, 4.0, 8.0, 9.0, 8.0, 6.0]);
        let (full, half) = four_point(&s);
        assert_eq!(full, vec![4.0]);
        assert_eq!(half, vec![3.0, 4.0, 8.0, 9.0, 8.0, 6.0]);
    }

    #[test]
    fn sine_counts_one_cycle_per_period() {
        let amp = 3.0;
        let periods = 10;
        let s: Vec<f64> = (0..=periods * 40)
            .map(|k| amp * (2.0 * std::f64::consts::PI * k as f64 / 40.0 + 0.3).sin())
            .collect();
        let c = rainflow(&s);
        let peak = s.iter().cloned().fold(f64::MIN, f64::max);
        let valley = s.iter().cloned().fold(f64::MAX, f64::min);
        let swings: f64 = c
            .cycles
            .iter()
            .filter(|c| (c.range - (peak - valley)).abs() < 1e-9)
            .map(|c| c.count)
            .sum();
        assert!(swings >= periods as f64 - 1.0 && swings <= periods as f64, "{swings}");
        let (of, oh) = four_point(&s);
        let oracle = of.len() as f64 + 0.5 * oh.iter().filter(|r| (*r - (peak - valley)).abs() < 1e-9).count() as f64;
        assert_relative_eq!(swings, oracle);
        assert!((peak - valley - 2.0 * amp).abs() < 0.02);
    }

    #[test]
    fn ramp_and_constant() {
        let ramp: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let c = rainflow(&ramp);
        assert_eq!(c.cycles, vec![Cycle { range: 9.0, count: 0.5 }]);
        assert!(rainflow(&[2.0; 16]).is_empty());
        assert!(rainflow(&[1.0]).is_empty());
    }

    #[test]
    fn turning_points_collapse_plateaus() {
        assert_eq!(turning_points(&[0.0, 1.0, 1.0, 2.0, 2.0, 0.0, 0.0]), vec![0.0, 2.0, 0.0]);
        assert_eq!(turning_points(&[1.0, 1.0]), vec![1.0]);
    }

    #[test]
    fn sn_curve_examples() {
        let sn = SnCurve::default();
        assert_relative_eq!(cycles_to_failure(23e6, &sn), 1e7, max_relative = 1e-12);
        assert_relative_eq!(cycles_to_failure(46e6, &sn), 1.25e6, max_relative = 1e-12);
        assert_relative_eq!(cycles_to_failure(11.5e6, &sn), 3.2e8, max_relative = 1e-12);
        // Continuous at the knee from both sides.
        let below = cycles_to_failure(23e6 * (1.0 - 1e-12), &sn);
        assert_relative_eq!(below, 1e7, max_relative = 1e-9);
    }

    #[test]
    fn damage_examples() {
        let sn = SnCurve::default();
        // N = 1e6 at Δσ = 23 MPa · 10^{1/3}.
        let range = 23e6 * 10f64.powf(1.0 / 3.0);
        let c = CycleSet {
            cycles: vec![Cycle { range, count: 1000.0 }],
        };
        assert_relative_eq!(damage_index(&c, &sn), 1e-3, max_relative = 1e-9);
        assert_eq!(damage_index(&CycleSet::default(), &sn), 0.0);
        let c = CycleSet {
            cycles: vec![Cycle { range: 23e6, count: 5e6 }, Cycle { range: 46e6, count: 2.5e5 }],
        };
        assert_relative_eq!(damage_index(&c, &sn), 0.7, max_relative = 1e-12);
    }

    #[test]
    fn stress_examples() {
        let p = PlantParameters::reference();
        assert_relative_eq!(stress(315.0, 0.0, &p), 154.5e6, max_relative = 1e-3);
        assert_eq!(stress(12.0, 12.0, &p), 0.0);
        let thick = PlantParameters {
            wall_thickness: 0.1,
            ..p.clone()
        };
        assert_relative_eq!(stress(315.0, 0.0, &thick), stress(315.0, 0.0, &p) / 2.0);
        let s = StressSeries::from_heads(&[315.0, 320.0], 0.0, 315.0, &p);
        assert_eq!(s.samples.len(), 2);
        assert_eq!(s.nominal, s.samples[0]);
    }

    #[test]
    fn rdi_examples() {
        let base = [1e-4, 3e-4, 2e-4];
        let r = rdi(&base, &base).unwrap();
        assert_relative_eq!(r.iter().cloned().fold(0.0, f64::max), 1.0);
        assert!(rdi(&[0.0; 3], &base).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(rdi(&[1.0; 3], &[0.0; 3]), Err(Error::UndefinedRdi)));
        assert!(rdi(&[1.0; 2], &base).is_err());
    }

    proptest! {
        #[test]
        fn matches_four_point_oracle(series in prop::collection::vec(-100i32..100, 2..200)) {
            let s: Vec<f64> = series.iter().map(|&v| v as f64).collect();
            let c = rainflow(&s);
            let (full, half) = four_point(&s);
            let f: Vec<f64> = c.full_cycles().collect();
            let h: Vec<f64> = c.half_cycles().collect();
            prop_assert_eq!(histogram(&f, &h), histogram(&full, &half));
        }

        #[test]
        fn cycle_balance(series in prop::collection::vec(-1e3f64..1e3, 2..300)) {
            let c = rainflow(&series);
            let tp = turning_points(&series).len();
            let full = c.full_cycles().count();
            let half = c.half_cycles().count();
            prop_assert_eq!(2 * full + half, tp - 1);
        }

        #[test]
        fn scale_equivariance(series in prop::collection::vec(-1e3f64..1e3, 2..200), scale in 0.01f64..100.0) {
            let base = rainflow(&series);
            let scaled: Vec<f64> = series.iter().map(|v| v * scale).collect();
            let c = rainflow(&scaled);
            prop_assert_eq!(base.cycles.len(), c.cycles.len());
            for (a, b) in base.cycles.iter().zip(&c.cycles) {
                prop_assert_eq!(a.count, b.count);
                prop_assert!((a.range * scale - b.range).abs() <= 1e-9 * b.range.max(1.0));
            }
        }

        #[test]
        fn damage_monotone_under_appending(
            ranges in prop::collection::vec(1e5f64..1e8, 0..40),
            extra in 1e5f64..1e8,
        ) {
            let sn = SnCurve::default();
            let mut c = CycleSet { cycles: ranges.iter().map(|&r| Cycle { range: r, count: 1.0 }).collect() };
            let before = damage_index(&c, &sn);
            prop_assert!(before >= 0.0);
            c.cycles.push(Cycle { range: extra, count: 0.5 });
            prop_assert!(damage_index(&c, &sn) >= before);
        }

        #[test]
        fn life_strictly_decreasing(a in 1e5f64..1e9, b in 1e5f64..1e9) {
            prop_assume!(a < b);
            let sn = SnCurve::default();
            prop_assert!(cycles_to_failure(a, &sn) > cycles_to_failure(b, &sn));
        }

        #[test]
        fn closed_blocks_add(block in prop::collection::vec(-50i32..50, 3..60), reps in 2usize..5) {
            // A block that starts and ends at its global maximum closes every
            // cycle, so repeating it adds damage block by block.
            let mut b: Vec<f64> = block.iter().map(|&v| v as f64).collect();
            b.insert(0, 100.0);
            b.push(100.0);
            let sn = SnCurve { fatigue_limit: 10.0, ..SnCurve::default() };
            let single = damage_index(&rainflow(&b), &sn);
            let mut joined = Vec::new();
            for _ in 0..reps {
                joined.extend_from_slice(&b);
            }
            let d = damage_index(&rainflow(&joined), &sn);
            prop_assert!(d + 1e-12 * d.max(1.0) >= reps as f64 * single - 1e-12);
        }
    }
}
