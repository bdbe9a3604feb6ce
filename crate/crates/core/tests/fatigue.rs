mod common;

use proptest::prelude::*;

use penstock::fatigue::{cycles_to_failure, damage_index, rainflow, turning_points, Cycle, CycleSet, SnCurve};

use common::{four_point_rainflow, histogram};

/// Integer-valued series in MPa-scale units so ties are exercised.
fn series() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-40i32..40).prop_map(|v| v as f64 * 1e6), 0..120)
}

fn ranges(c: &CycleSet) -> (Vec<f64>, Vec<f64>) {
    (c.full_cycles().collect(), c.half_cycles().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn ranges_balance_turning_points(s in series()) {
        let c = rainflow(&s);
        let (full, half) = ranges(&c);
        let tp = turning_points(&s).len();
        prop_assert_eq!(2 * full.len() + half.len(), tp.saturating_sub(1));
    }

    #[test]
    fn agrees_with_four_point_counting(s in series()) {
        let (full, half) = ranges(&rainflow(&s));
        let (of, oh) = four_point_rainflow(&s);
        prop_assert_eq!(histogram(&full, &half), histogram(&of, &oh));
    }

    #[test]
    fn scale_equivariant(s in series(), c in 0.1f64..10.0) {
        let a = rainflow(&s);
        let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
        let b = rainflow(&scaled);
        prop_assert_eq!(a.cycles.len(), b.cycles.len());
        for (x, y) in a.cycles.iter().zip(&b.cycles) {
            prop_assert_eq!(x.count, y.count);
            prop_assert!((x.range * c - y.range).abs() <= 1e-9 * y.range.max(1.0));
        }
    }

    /// Blocks that start and end at the common minimum add their damage.
    #[test]
    fn miner_additive_for_closed_blocks(
        a in prop::collection::vec(1i32..60, 1..40),
        b in prop::collection::vec(1i32..60, 1..40),
    ) {
        let block = |v: &[i32]| -> Vec<f64> {
            std::iter::once(0.0).chain(v.iter().map(|&x| x as f64 * 1e6)).chain(std::iter::once(0.0)).collect()
        };
        let (sa, sb) = (block(&a), block(&b));
        let joined: Vec<f64> = sa.iter().chain(&sb[1..]).copied().collect();
        let sn = SnCurve::default();
        let d = |s: &[f64]| damage_index(&rainflow(s), &sn);
        let (da, db, dab) = (d(&sa), d(&sb), d(&joined));
        prop_assert!((dab - da - db).abs() <= 1e-12 * dab.max(1e-30), "{} vs {}", dab, da + db);
    }

    #[test]
    fn damage_grows_as_cycles_are_appended(ranges in prop::collection::vec(0.0f64..1e8, 1..50)) {
        let sn = SnCurve::default();
        let mut set = CycleSet::default();
        let mut last = 0.0;
        for r in ranges {
            set.cycles.push(Cycle { range: r, count: 1.0 });
            let d = damage_index(&set, &sn);
            prop_assert!(d >= last && d >= 0.0);
            last = d;
        }
    }

    #[test]
    fn life_strictly_decreasing(a in 1e5f64..1e9, f in 1.0001f64..10.0) {
        let sn = SnCurve::default();
        prop_assert!(cycles_to_failure(a * f, &sn) < cycles_to_failure(a, &sn));
    }
}

#[test]
fn life_is_continuous_at_the_knee() {
    let sn = SnCurve::default();
    let at = cycles_to_failure(sn.fatigue_limit, &sn);
    let below = cycles_to_failure(sn.fatigue_limit * (1.0 - 1e-9), &sn);
    let above = cycles_to_failure(sn.fatigue_limit * (1.0 + 1e-9), &sn);
    assert_eq!(at, sn.knee_cycles);
    assert!((below - at).abs() / at < 1e-7 && (above - at).abs() / at < 1e-7);
}
