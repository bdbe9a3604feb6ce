//! Fixed-step explicit integration.

use nalgebra::DVector;

/// Advances `x` by one classical fourth-order Runge-Kutta step of size `dt`
/// for the autonomous system `dx/dt = f(x)`.
pub fn rk4<E, F>(x: &DVector<f64>, dt: f64, mut f: F) -> Result<DVector<f64>, E>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
{
    let k1 = f(x)?;
    let k2 = f(&(x + &k1 * (0.5 * dt)))?;
    let k3 = f(&(x + &k2 * (0.5 * dt)))?;
    let k4 = f(&(x + &k3 * dt))?;
    Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn exponential_decay_matches_series() {
        let x = DVector::from_element(1, 1.0);
        let next = rk4::<Infallible, _>(&x, 0.1, |x| Ok(-x)).unwrap();
        // Local error of RK4 is O(dt^5); e^{-0.1} differs from the 4-term series by ~8e-8.
        assert!((next[0] - (-0.1f64).exp()).abs() < 1e-7);
        let series = 1.0 - 0.1 + 0.01 / 2.0 - 0.001 / 6.0 + 0.0001 / 24.0;
        assert!((next[0] - series).abs() < 1e-15);
    }

    #[test]
    fn global_order_is_four() {
        let run = |dt: f64| {
            let mut x = DVector::from_element(1, 1.0);
            let steps = (1.0 / dt).round() as usize;
            for _ in 0..steps {
                x = rk4::<Infallible, _>(&x, dt, |x| Ok(-x)).unwrap();
            }
            (x[0] - (-1.0f64).exp()).abs()
        };
        let ratio = run(0.1) / run(0.05);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }
}
