//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 x' H x + g' x
//!     subject to  C x <= d
//! ```
//!
//! with `H` symmetric positive definite. The method starts from the
//! unconstrained minimizer and adds violated constraints one at a time while
//! keeping the multipliers dual feasible, so a problem whose unconstrained
//! optimum is already feasible terminates without a single factor update.
//! The factorization `J = L^{-T} Q` and the triangular `R` are maintained with
//! Givens rotations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// One constraint per row.
    pub constraints: DMatrix<f64>,
    pub upper: DVector<f64>,
}

impl QuadraticProgram {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.upper.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    fn check_dims(&self) -> Result<()> {
        let n = self.dim();
        if self.hessian.shape() != (n, n) {
            return Err(Error::Construction(format!(
                "hessian is {:?}, expected {n}x{n}",
                self.hessian.shape()
            )));
        }
        if self.constraints.ncols() != n || self.constraints.nrows() != self.upper.len() {
            return Err(Error::Construction(format!(
                "constraint matrix is {:?} for {} bounds and {n} variables",
                self.constraints.shape(),
                self.upper.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Primal feasibility tolerance on `C x - d`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// Iteration cap hit; the returned iterate is dual feasible but may
    /// violate constraints.
    IterationLimit,
}

/// KKT residuals of a returned point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One non-negative multiplier per constraint; zero when inactive.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub status: QpStatus,
    pub kkt: KktResiduals,
}

pub fn kkt_residuals(qp: &QuadraticProgram, x: &DVector<f64>, multipliers: &DVector<f64>) -> KktResiduals {
    let slack = &qp.upper - &qp.constraints * x;
    let primal = slack.iter().fold(0.0f64, |m, &s| m.max(-s));
    let grad = &qp.hessian * x + &qp.linear + qp.constraints.transpose() * multipliers;
    let complementarity = slack
        .iter()
        .zip(multipliers.iter())
        .fold(0.0f64, |m, (s, l)| m.max((s * l).abs()));
    KktResiduals {
        primal,
        dual: grad.amax(),
        complementarity,
    }
}

struct Factor {
    /// `J = L^{-T} Q`, n x n.
    j: DMatrix<f64>,
    /// Upper triangular, leading q x q block in use.
    r: DMatrix<f64>,
    q: usize,
}

impl Factor {
    fn rotate_columns(&mut self, a: usize, b: usize, c: f64, s: f64) {
        for row in 0..self.j.nrows() {
            let (x, y) = (self.j[(row, a)], self.j[(row, b)]);
            self.j[(row, a)] = c * x + s * y;
            self.j[(row, b)] = -s * x + c * y;
        }
    }

    /// Appends constraint whose transformed normal is `d = J' n`.
    fn add(&mut self, mut d: DVector<f64>) {
        let n = d.len();
        let q = self.q;
        for k in (q + 1..n).rev() {
            if d[k] == 0.0 {
                continue;
            }
            let h = d[k - 1].hypot(d[k]);
            let (c, s) = (d[k - 1] / h, d[k] / h);
            d[k - 1] = h;
            d[k] = 0.0;
            self.rotate_columns(k - 1, k, c, s);
        }
        for row in 0..=q {
            self.r[(row, q)] = d[row];
        }
        self.q += 1;
    }

    /// Removes the active constraint at position `l`.
    fn drop(&mut self, l: usize) {
        let q = self.q;
        for col in l..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for k in l..q - 1 {
            let (a, b) = (self.r[(k, k)], self.r[(k + 1, k)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in k..q - 1 {
                let (x, y) = (self.r[(k, col)], self.r[(k + 1, col)]);
                self.r[(k, col)] = c * x + s * y;
                self.r[(k + 1, col)] = -s * x + c * y;
            }
            self.r[(k + 1, k)] = 0.0;
            self.rotate_columns(k, k + 1, c, s);
        }
        self.q -= 1;
    }

    /// Primal step direction `z` and dual step direction `r` for normal `n`.
    fn directions(&self, normal: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let d = self.j.tr_mul(normal);
        let n = d.len();
        let q = self.q;
        let mut z = DVector::zeros(n);
        for k in q..n {
            if d[k] != 0.0 {
                z.axpy(d[k], &self.j.column(k), 1.0);
            }
        }
        let mut r = DVector::zeros(q);
        for row in (0..q).rev() {
            let mut acc = d[row];
            for col in row + 1..q {
                acc -= self.r[(row, col)] * r[col];
            }
            r[row] = acc / self.r[(row, row)];
        }
        (z, r, d)
    }
}

pub fn solve(qp: &QuadraticProgram, settings: &QpSettings) -> Result<QpSolution> {
    qp.check_dims()?;
    let n = qp.dim();
    let m = qp.constraint_count();
    let chol = qp
        .hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Construction("hessian is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Construction("singular Cholesky factor".into()))?;
    let mut factor = Factor {
        j: l_inv.transpose(),
        r: DMatrix::zeros(n, n),
        q: 0,
    };
    let mut x = -chol.solve(&qp.linear);

    let row_norms: Vec<f64> = (0..m).map(|i| qp.constraints.row(i).norm().max(1e-300)).collect();
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; m];
    let mut iterations = 0;
    let mut status = QpStatus::Optimal;

    'outer: loop {
        let slack = &qp.upper - &qp.constraints * &x;
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..m {
            if is_active[i] {
                continue;
            }
            let v = slack[i] / row_norms[i];
            if v < -settings.tolerance && worst.is_none_or(|(_, w)| v < w) {
                worst = Some((i, v));
            }
        }
        let Some((p, _)) = worst else { break };
        let normal = -qp.constraints.row(p).transpose();
        let mut u_plus = u.clone();
        u_plus.push(0.0);

        loop {
            iterations += 1;
            if iterations > settings.max_iterations {
                status = QpStatus::IterationLimit;
                break 'outer;
            }
            let (z, r, d) = factor.directions(&normal);
            let q = factor.q;

            let r_scale = r.amax().max(1.0);
            let mut partial: Option<(usize, f64)> = None;
            for k in 0..q {
                if r[k] > 1e-14 * r_scale {
                    let t = u_plus[k] / r[k];
                    if partial.is_none_or(|(_, best)| t < best) {
                        partial = Some((k, t));
                    }
                }
            }
            let zn = z.dot(&normal);
            let full = if zn > 1e-12 * d.norm_squared() {
                let s_p = qp.upper[p] - qp.constraints.row(p).dot(&x.transpose());
                Some(-s_p / zn)
            } else {
                None
            };

            match (full, partial) {
                (None, None) => {
                    return Err(Error::Infeasible(format!("constraint {p} cannot be satisfied")));
                }
                (None, Some((k, t))) => {
                    for i in 0..q {
                        u_plus[i] -= t * r[i];
                    }
                    u_plus[q] += t;
                    drop_active(&mut factor, &mut active, &mut u_plus, &mut is_active, k);
                }
                (Some(t2), partial) => {
                    let (t, drop_k) = match partial {
                        Some((k, t1)) if t1 < t2 => (t1, Some(k)),
                        _ => (t2, None),
                    };
                    x.axpy(t, &z, 1.0);
                    for i in 0..q {
                        u_plus[i] -= t * r[i];
                    }
                    u_plus[q] += t;
                    match drop_k {
                        None => {
                            factor.add(d);
                            active.push(p);
                            is_active[p] = true;
                            u = u_plus;
                            continue 'outer;
                        }
                        Some(k) => drop_active(&mut factor, &mut active, &mut u_plus, &mut is_active, k),
                    }
                }
            }
        }
    }

    let mut multipliers = DVector::zeros(m);
    if status == QpStatus::Optimal {
        for (&i, &v) in active.iter().zip(&u) {
            multipliers[i] = v;
        }
    } else {
        for (&i, &v) in active.iter().zip(&u) {
            multipliers[i] = v.max(0.0);
        }
    }
    let kkt = kkt_residuals(qp, &x, &multipliers);
    Ok(QpSolution {
        objective: qp.objective(&x),
        x,
        multipliers,
        active,
        iterations,
        status,
        kkt,
    })
}

fn drop_active(factor: &mut Factor, active: &mut Vec<usize>, u_plus: &mut Vec<f64>, is_active: &mut [bool], k: usize) {
    factor.drop(k);
    is_active[active[k]] = false;
    active.remove(k);
    u_plus.remove(k);
}
