//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use penstock::harness::{ControllerSpec, ExperimentSpec};
use penstock::hydraulics::{build_circuit, step_rk4, steady_state, CircuitModel, HydraulicInputs, PlantParameters, StateVector};
use penstock::io::config::Config;
use penstock::io::trace::FrequencyTrace;
use penstock::mpc::qp::QuadraticProgram;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn acceptance_config() -> Config {
    Config::load(&configs_dir().join("acceptance.toml")).expect("acceptance config")
}

/// Reference plant driven by `trace` for `duration` seconds, no warm-up.
pub fn reference_spec(controller: ControllerSpec, trace: FrequencyTrace, duration: f64) -> ExperimentSpec {
    let mut c = Config::default();
    c.simulation.duration = duration;
    c.simulation.warmup = 0.0;
    c.experiment(controller, trace)
}

pub fn reference_circuit() -> (CircuitModel, StateVector) {
    let p = PlantParameters::reference();
    let c = build_circuit(&p, p.nominal_discharge).unwrap();
    let x = steady_state(&c, 0.8, p.upstream_head, p.downstream_head).unwrap();
    (c, x)
}

/// Nonlinear plant at fixed speed after the vane moves from the steady
/// opening to `opening`.
pub fn vane_step_run(opening: f64, dt: f64, duration: f64) -> Vec<StateVector> {
    let (c, x0) = reference_circuit();
    let u = HydraulicInputs::nominal(&c.params, opening);
    let steps = (duration / dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0;
    out.push(x.clone());
    for _ in 0..steps {
        x = step_rk4(&x, &u, &c, dt).unwrap();
        out.push(x.clone());
    }
    out
}

/// Oscillation period from alternating crossings of the signal's final
/// mean, each half a period apart, with a hysteresis of 5% of the peak swing.
pub fn oscillation_period(samples: &[f64], dt: f64) -> f64 {
    let tail = &samples[samples.len() * 3 / 4..];
    let center = tail.iter().sum::<f64>() / tail.len() as f64;
    let peak = samples.iter().map(|v| (v - center).abs()).fold(0.0, f64::max);
    let band = 0.05 * peak;
    let mut crossings = Vec::new();
    let mut side = 0i8;
    for (k, v) in samples.iter().enumerate() {
        let d = v - center;
        if side <= 0 && d > band {
            side = 1;
            crossings.push(k);
        } else if side >= 0 && d < -band {
            side = -1;
            crossings.push(k);
        }
    }
    assert!(crossings.len() >= 3, "too few oscillations: {}", crossings.len());
    2.0 * (crossings[crossings.len() - 1] - crossings[0]) as f64 * dt / (crossings.len() - 1) as f64
}

/// Error ratio of step halving on a 10 s vane transient, measured against
/// a run at one eighth of the coarse step.
pub fn rk4_halving_ratio(dt: f64) -> f64 {
    let end = |h: f64| vane_step_run(0.75, h, 10.0).pop().unwrap().0;
    let reference = end(dt / 8.0);
    let coarse = (end(dt) - &reference).norm();
    let fine = (end(dt / 2.0) - &reference).norm();
    coarse / fine
}

// ---------------------------------------------------------------------------
// Quadratic programs

/// Strictly convex QP with a strictly feasible point.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize, m: usize) -> QuadraticProgram {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let hessian = g.transpose() * &g + DMatrix::identity(n, n) * 0.1;
    let linear = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let constraints = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let feasible = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let upper = &constraints * &feasible + DVector::from_fn(m, |_, _| rng.random_range(0.01..1.0));
    QuadraticProgram {
        hessian,
        linear,
        constraints,
        upper,
    }
}

/// Solves `min ½xᵀHx + cᵀx` s.t. `Cx ≤ d` by trying every active set in
/// order of size; the first set satisfying the KKT conditions is optimal.
pub fn enumerate_qp(qp: &QuadraticProgram) -> Option<DVector<f64>> {
    let n = qp.hessian.nrows();
    let m = qp.constraints.nrows();
    let tol = 1e-9;
    let mut set: Vec<usize> = Vec::new();
    for k in 0..=n.min(m) {
        set.clear();
        set.extend(0..k);
        loop {
            let dim = n + k;
            let mut kkt = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
            for i in 0..n {
                rhs[i] = -qp.linear[i];
            }
            for (r, &c) in set.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + r, j)] = qp.constraints[(c, j)];
                    kkt[(j, n + r)] = qp.constraints[(c, j)];
                }
                rhs[n + r] = qp.upper[c];
            }
            if let Some(sol) = kkt.full_piv_lu().solve(&rhs) {
                let x = sol.rows(0, n).into_owned();
                let duals_ok = (0..k).all(|r| sol[n + r] >= -tol);
                let primal_ok = (&qp.constraints * &x - &qp.upper).iter().all(|&v| v <= tol);
                if duals_ok && primal_ok {
                    return Some(x);
                }
            }
            if !next_combination(&mut set, m) {
                break;
            }
        }
    }
    None
}

/// Advances `set` to the next increasing combination of indices below `m`.
fn next_combination(set: &mut [usize], m: usize) -> bool {
    let k = set.len();
    for i in (0..k).rev() {
        if set[i] < m - k + i {
            set[i] += 1;
            for j in i + 1..k {
                set[j] = set[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Largest deviation between solver and oracle over `count` seeded random
/// problems with up to 10 variables and 20 constraints.
pub fn qp_oracle_gap(seed: u64, count: usize) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let n = rng.random_range(1..=10);
        let m = rng.random_range(0..=20);
        let qp = random_qp(&mut rng, n, m);
        let expected = enumerate_qp(&qp).expect("feasible by construction");
        let got = penstock::mpc::qp::solve(&qp, &Default::default()).unwrap();
        worst = worst.max((got.x - expected).amax());
    }
    worst
}

// ---------------------------------------------------------------------------
// Rainflow

/// Four-point rainflow on turning points; residual ranges are half cycles.
/// Returns `(full, half)` ranges.
pub fn four_point_rainflow(series: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut tp: Vec<f64> = Vec::new();
    for &v in series {
        if tp.last() == Some(&v) {
            continue;
        }
        if tp.len() >= 2 {
            let (a, b) = (tp[tp.len() - 2], tp[tp.len() - 1]);
            if (b - a) * (v - b) > 0.0 {
                tp.pop();
            }
        }
        tp.push(v);
    }
    let mut full = Vec::new();
    let mut stack: Vec<f64> = Vec::new();
    for v in tp {
        stack.push(v);
        while stack.len() >= 4 {
            let k = stack.len();
            let (a, b, c, d) = (stack[k - 4], stack[k - 3], stack[k - 2], stack[k - 1]);
            let inner = (c - b).abs();
            if inner <= (b - a).abs() && inner <= (d - c).abs() {
                full.push(inner);
                stack.drain(k - 3..k - 1);
            } else {
                break;
            }
        }
    }
    let half = stack.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    (full, half)
}

/// Weighted range histogram, `(range, count)` sorted by range.
pub fn histogram(full: &[f64], half: &[f64]) -> Vec<(f64, f64)> {
    let mut h: Vec<(f64, f64)> = Vec::new();
    for (r, w) in full.iter().map(|&r| (r, 1.0)).chain(half.iter().map(|&r| (r, 0.5))) {
        match h.iter_mut().find(|(x, _)| *x == r) {
            Some(e) => e.1 += w,
            None => h.push((r, w)),
        }
    }
    h.sort_by(|a, b| a.0.total_cmp(&b.0));
    h
}
