//! Planning formulas for the measurement count `m` and the repetition count
//! `k`. These are advisory: runtime estimation calibrates its tolerance
//! instead of relying on the unknown constants `C` and `K`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-hand side of the measurement bound,
/// `2 s (sqrt(ln(e n / s)) + sqrt(ln(1 / eps) / s) + tau / sqrt(s))^2`.
pub fn measurement_bound(s: usize, n: usize, epsilon: f64, tau: f64) -> f64 {
    let s = s as f64;
    let n = n as f64;
    let inner = (1.0 + (n / s).ln()).sqrt() + ((1.0 / epsilon).ln() / s).sqrt() + tau / s.sqrt();
    2.0 * s * inner * inner
}

/// Least `m` with `m^2 / (m + 1) >= measurement_bound(s, n, epsilon, tau)`.
pub fn min_measurements(s: usize, n: usize, epsilon: f64, tau: f64) -> Result<usize> {
    if s == 0 || s > n {
        return Err(Error::InvalidParameter(format!("need 1 <= s <= n, got s={s}, n={n}")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    let bound = measurement_bound(s, n, epsilon, tau);
    // m - 1 < m^2 / (m + 1) < m, so the answer is ceil(bound) or one more
    let mut m = (bound.ceil() as usize).max(1);
    while m > 1 && satisfies(m - 1, bound) {
        m -= 1;
    }
    while !satisfies(m, bound) {
        m += 1;
    }
    Ok(m)
}

fn satisfies(m: usize, bound: f64) -> bool {
    let m = m as f64;
    m * m / (m + 1.0) >= bound
}

/// `2 m^3 C^2 / t^2 * ln(2 / eps)`.
pub fn repetition_bound(m: usize, c: f64, t: f64, epsilon: f64) -> f64 {
    let m = m as f64;
    2.0 * m.powi(3) * c * c / (t * t) * (2.0 / epsilon).ln()
}

/// Least integer strictly greater than [`repetition_bound`].
pub fn min_repetitions(m: usize, c: f64, t: f64, epsilon: f64) -> Result<u64> {
    if m == 0 {
        return Err(Error::InvalidParameter("m must be at least 1".into()));
    }
    if !(c > 0.0 && t > 0.0 && c.is_finite() && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("C and t must be positive, got C={c}, t={t}")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let bound = repetition_bound(m, c, t, epsilon);
    if bound >= u64::MAX as f64 {
        return Err(Error::InvalidParameter(format!("repetition bound {bound:e} does not fit in 64 bits")));
    }
    Ok(bound.floor() as u64 + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorInputs {
    pub s: usize,
    pub n: usize,
    pub epsilon: f64,
    pub tau: f64,
    /// Bound on `|<grad f, a_i>|`.
    pub c: f64,
    /// Curvature constant of the `O(delta)` measurement bias.
    pub k_const: f64,
    pub delta: f64,
    /// Residual bound. Defaults to `2 m K delta` for the advised `m`.
    pub t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorReport {
    pub m_min: usize,
    pub k_min: u64,
    pub s: usize,
    pub n: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub c: f64,
    pub k_const: f64,
    pub delta: f64,
    pub t: f64,
}

pub fn advise(inputs: &AdvisorInputs) -> Result<AdvisorReport> {
    let m_min = min_measurements(inputs.s, inputs.n, inputs.epsilon, inputs.tau)?;
    let t = match inputs.t {
        Some(t) => t,
        None => 2.0 * m_min as f64 * inputs.k_const * inputs.delta,
    };
    let k_min = min_repetitions(m_min, inputs.c, t, inputs.epsilon)?;
    Ok(AdvisorReport {
        m_min,
        k_min,
        s: inputs.s,
        n: inputs.n,
        epsilon: inputs.epsilon,
        tau: inputs.tau,
        c: inputs.c,
        k_const: inputs.k_const,
        delta: inputs.delta,
        t,
    })
}
