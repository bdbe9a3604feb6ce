//! Linearized state-space model of the circuit and its discretization.
//!
//! Around an operating point `(x0, y0)` the friction resistance is frozen at
//! `r |Q_i0|` and the turbine head is replaced by its first-order expansion,
//! giving
//!
//! ```text
//!     dx/dt = A x + B_y y + B_z z,    z = [H_u, mu - H_d]
//! ```
//!
//! where `mu` collects the constant Taylor terms of the turbine law.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{require_positive, Error, Result};
use crate::hydraulics::{turbine_head, turbine_head_partials, CircuitModel, StateVector};

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousStateSpace {
    pub a: DMatrix<f64>,
    pub b_y: DVector<f64>,
    /// Columns multiply `H_u` and `mu - H_d`.
    pub b_z: DMatrix<f64>,
    pub mu: f64,
    pub z: Vector2<f64>,
    pub x0: StateVector,
    pub y0: f64,
    /// State indices of the element heads, upstream first.
    pub outputs: Vec<usize>,
    /// Asymptotic stability of `A` has been established.
    pub stable: bool,
}

impl ContinuousStateSpace {
    pub fn derivative(&self, x: &DVector<f64>, opening: f64) -> DVector<f64> {
        &self.a * x + &self.b_y * opening + &self.b_z * self.z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStateSpace {
    pub a: DMatrix<f64>,
    pub b_y: DVector<f64>,
    pub b_z: DMatrix<f64>,
    pub z: Vector2<f64>,
    pub dt: f64,
    pub outputs: Vec<usize>,
    /// Number of RK4 substeps composed into one step.
    pub substeps: usize,
}

impl DiscreteStateSpace {
    /// Constant per-step drive `B_z z`.
    pub fn offset(&self) -> DVector<f64> {
        &self.b_z * self.z
    }

    pub fn step(&self, x: &DVector<f64>, opening: f64) -> DVector<f64> {
        &self.a * x + &self.b_y * opening + self.offset()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

/// Linearizes the circuit at `(x0, y0)` with the upstream and downstream
/// heads taken from the plant parameters.
pub fn linearize(circuit: &CircuitModel, x0: &StateVector, y0: f64) -> Result<ContinuousStateSpace> {
    let n = circuit.element_count();
    let dim = circuit.state_dim();
    if x0.len() != dim {
        return Err(Error::OperatingPoint(format!("state has {} entries, expected {dim}", x0.len())));
    }
    if !(y0 > 0.0 && y0 <= 1.0) {
        return Err(Error::OperatingPoint(format!("opening {y0} outside (0, 1]")));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::OperatingPoint("non-finite operating state".into()));
    }
    let p = &circuit.params;
    let lt = circuit.turbine_inductance;
    let mut a = DMatrix::zeros(dim, dim);
    let mut resistance = Vec::with_capacity(n);
    for i in 0..n {
        let l = circuit.inductance[i];
        let c = circuit.capacitance[i];
        let r = circuit.friction_coefficient * x0[i].abs();
        resistance.push(r);
        let h = n + i;
        if i > 0 {
            a[(i, h - 1)] = 1.0 / l;
        }
        a[(i, h)] = -1.0 / l;
        a[(i, i)] = -r / l;
        a[(h, i)] = 1.0 / c;
        let outflow = if i + 1 < n { i + 1 } else { 2 * n };
        a[(h, outflow)] = -1.0 / c;
    }
    let qt = x0[2 * n];
    let (hq, hy) = turbine_head_partials(qt, y0, p);
    let ht = turbine_head(qt, y0, p).head;
    a[(2 * n, 2 * n - 1)] = 1.0 / lt;
    a[(2 * n, 2 * n)] = -hq / lt;

    let mu = -ht + hq * qt + hy * y0;
    let mut b_y = DVector::zeros(dim);
    b_y[2 * n] = -hy / lt;
    let mut b_z = DMatrix::zeros(dim, 2);
    b_z[(0, 0)] = 1.0 / circuit.inductance[0];
    b_z[(2 * n, 1)] = 1.0 / lt;

    // Passive ladder: positive L and C with non-negative, not identically
    // zero dissipation is asymptotically stable.
    let passive = hq >= 0.0 && resistance.iter().all(|&r| r >= 0.0) && (hq > 0.0 || resistance.iter().any(|&r| r > 0.0));
    if !passive {
        let worst = a
            .complex_eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max);
        if worst >= 0.0 {
            return Err(Error::OperatingPoint(format!(
                "linearized model not asymptotically stable (max real part {worst:.3e})"
            )));
        }
    }

    Ok(ContinuousStateSpace {
        a,
        b_y,
        b_z,
        mu,
        z: Vector2::new(p.upstream_head, mu - p.downstream_head),
        x0: x0.clone(),
        y0,
        outputs: (n..2 * n).collect(),
        stable: true,
    })
}

/// Diagonal similarity scaling that roughly balances row and column norms.
fn balance(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut d = vec![1.0; n];
    for _ in 0..8 {
        let mut changed = false;
        for i in 0..n {
            let (mut row, mut col) = (0.0, 0.0);
            for j in 0..n {
                if j != i {
                    row += (a[(i, j)] * d[j] / d[i]).abs();
                    col += (a[(j, i)] * d[i] / d[j]).abs();
                }
            }
            if row > 0.0 && col > 0.0 {
                let f = (row / col).sqrt();
                if !(0.95..=1.05).contains(&f) {
                    d[i] *= f;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    d
}

fn scaled_norm(a: &DMatrix<f64>, d: &[f64]) -> f64 {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| (a[(i, j)] * d[j] / d[i]).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// RK4 transition over `dt`, composed from the smallest power-of-two number
/// of substeps that keeps each substep well inside the RK4 stability region.
pub fn discretize(ss: &ContinuousStateSpace, dt: f64) -> Result<DiscreteStateSpace> {
    require_positive("dt", dt)?;
    let norm = scaled_norm(&ss.a, &balance(&ss.a));
    let mut substeps = 1usize;
    while dt / substeps as f64 * norm > 1.0 && substeps < 1 << 20 {
        substeps *= 2;
    }
    let dss = transition(ss, dt, substeps);
    // |R(z)| < 1 for the RK4 amplification factor whenever Re z < 0 and
    // |z| <= 1, so a stable continuous model maps to a contractive one.
    // Only fall back to an eigenvalue check if that argument does not apply.
    if !ss.stable || dt / substeps as f64 * norm > 1.0 {
        let rho = dss.spectral_radius();
        if rho >= 1.0 {
            return Err(Error::Discretization { spectral_radius: rho });
        }
    }
    Ok(dss)
}

/// RK4 transition with an explicit substep count; rejects a result whose
/// spectral radius is not below one.
pub fn discretize_with_substeps(ss: &ContinuousStateSpace, dt: f64, substeps: usize) -> Result<DiscreteStateSpace> {
    require_positive("dt", dt)?;
    if substeps == 0 {
        return Err(Error::Parameter {
            name: "substeps",
            reason: "must be positive".into(),
        });
    }
    let dss = transition(ss, dt, substeps);
    let rho = dss.spectral_radius();
    if rho >= 1.0 {
        return Err(Error::Discretization { spectral_radius: rho });
    }
    Ok(dss)
}

fn transition(ss: &ContinuousStateSpace, dt: f64, substeps: usize) -> DiscreteStateSpace {
    let n = ss.a.nrows();
    let h = dt / substeps as f64;
    let id = DMatrix::<f64>::identity(n, n);
    let ha = &ss.a * h;
    let ha2 = &ha * &ha;
    let ha3 = &ha2 * &ha;
    let ha4 = &ha3 * &ha;
    let phi = &id + &ha + &ha2 / 2.0 + &ha3 / 6.0 + &ha4 / 24.0;
    let quad = (&id + &ha / 2.0 + &ha2 / 6.0 + &ha3 / 24.0) * h;
    let mut b = DMatrix::zeros(n, 3);
    b.set_column(0, &ss.b_y);
    b.columns_mut(1, 2).copy_from(&ss.b_z);
    let mut gamma = quad * b;
    let mut phi_total = phi;

    let mut remaining = substeps;
    if remaining.is_power_of_two() {
        while remaining > 1 {
            gamma = &phi_total * &gamma + &gamma;
            phi_total = &phi_total * &phi_total;
            remaining /= 2;
        }
    } else {
        let (phi1, gamma1) = (phi_total.clone(), gamma.clone());
        for _ in 1..substeps {
            gamma = &phi1 * &gamma + &gamma1;
            phi_total = &phi1 * &phi_total;
        }
    }

    DiscreteStateSpace {
        a: phi_total,
        b_y: gamma.column(0).into_owned(),
        b_z: gamma.columns(1, 2).into_owned(),
        z: ss.z,
        dt,
        outputs: ss.outputs.clone(),
        substeps,
    }
}

/// Smallest horizon `T >= 1` after which the vane impulse response on every
/// output stays below `threshold` times its peak, up to `cap` steps.
pub fn settle_horizon(dss: &DiscreteStateSpace, threshold: f64, cap: usize) -> usize {
    let cap = cap.max(1);
    let mut g = dss.b_y.clone();
    let mut response = Vec::with_capacity(cap + 1);
    for _ in 0..=cap {
        response.push(dss.outputs.iter().map(|&i| g[i].abs()).fold(0.0, f64::max));
        g = &dss.a * g;
    }
    let peak = response.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return 1;
    }
    let limit = threshold * peak;
    let mut t = cap;
    while t > 1 && response[t - 1] <= limit {
        t -= 1;
    }
    if response[t] > limit {
        cap
    } else {
        t
    }
}
