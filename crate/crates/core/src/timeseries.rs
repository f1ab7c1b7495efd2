//! Scalar ARMA(1,1) and two-line recurrence expansions.
//!
//! ARMA(1,1): `x^t = beta x^{t-1} + i^t - gamma i^{t-1}`, whose AR(inf) form has
//! coefficient `(beta - gamma) gamma^{l-1}` at lag `l`.
//!
//! Recurrence: `h^t = alpha x^{t-1} + gamma h^{t-1}`,
//! `x^t = beta1 x^{t-1} + beta2 h^{t-1}`, with `h^0 = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmaParams {
    pub beta: f64,
    pub gamma: f64,
}

impl ArmaParams {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        let p = ArmaParams { beta, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.abs() < 1.0) {
            return Err(Error::NotInvertible(self.gamma));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceParams {
    pub alpha: f64,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// AR(inf) coefficients `[(beta - gamma) gamma^{l-1}]` for `l = 1..=max_lag`.
pub fn arma_ar_coefficients(p: ArmaParams, max_lag: usize) -> Result<Vec<f64>> {
    p.validate()?;
    if max_lag == 0 {
        return Err(Error::invalid("arma_ar_coefficients", "max_lag must be >= 1"));
    }
    let mut out = Vec::with_capacity(max_lag);
    let mut c = p.beta - p.gamma;
    for _ in 0..max_lag {
        out.push(c);
        c *= p.gamma;
    }
    Ok(out)
}

/// Response `x^0..=x^horizon` to a unit innovation `i^0 = 1`, simulated
/// directly from the ARMA recursion.
pub fn arma_impulse_response(p: ArmaParams, horizon: usize) -> Result<Vec<f64>> {
    p.validate()?;
    let innov = |t: usize| if t == 0 { 1.0 } else { 0.0 };
    let mut x = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let prev = if t == 0 { 0.0 } else { x[t - 1] };
        let prev_i = if t == 0 { 0.0 } else { innov(t - 1) };
        x.push(p.beta * prev + innov(t) - p.gamma * prev_i);
    }
    Ok(x)
}

/// Closed form of [`arma_impulse_response`]: `1`, then `(beta - gamma) beta^{l-1}`.
pub fn arma_impulse_closed_form(p: ArmaParams, horizon: usize) -> Result<Vec<f64>> {
    p.validate()?;
    let mut out = vec![1.0];
    let mut c = p.beta - p.gamma;
    for _ in 0..horizon {
        out.push(c);
        c *= p.beta;
    }
    Ok(out)
}

/// Rebuild each `x^t` of a unit-impulse response from its past through the
/// AR(inf) form `x^t = sum_l pi_l x^{t-l} + i^t`.
pub fn arma_ar_reconstruct(p: ArmaParams, response: &[f64]) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Ok(Vec::new());
    }
    let pi = arma_ar_coefficients(p, response.len().max(2) - 1)?;
    Ok((0..response.len())
        .map(|t| {
            let innov = if t == 0 { 1.0 } else { 0.0 };
            (1..=t).map(|l| pi[l - 1] * response[t - l]).sum::<f64>() + innov
        })
        .collect())
}

/// Coefficients of `x^T` on `x^{T-1}, x^{T-2}, ..., x^0` (length `T`):
/// `beta1`, then `beta2 alpha gamma^{l-1}` for `l >= 1`.
pub fn recurrence_expand(p: RecurrenceParams, t: usize) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::invalid("recurrence_expand", "T must be >= 1"));
    }
    let mut out = vec![p.beta1];
    let mut c = p.beta2 * p.alpha;
    for _ in 1..t {
        out.push(c);
        c *= p.gamma;
    }
    Ok(out)
}

/// The same coefficients found by running the recurrence on symbolic
/// `x^0..x^{T-1}`, each a unit basis vector. Returned in the order of
/// [`recurrence_expand`].
pub fn recurrence_expand_by_simulation(p: RecurrenceParams, t: usize) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::invalid("recurrence_expand", "T must be >= 1"));
    }
    let basis = |s: usize| {
        let mut e = vec![0.0; t];
        e[s] = 1.0;
        e
    };
    // h^s as a linear form over x^0..x^{T-1}
    let mut h = vec![0.0; t];
    for s in 1..t {
        let x = basis(s - 1);
        h = h.iter().zip(&x).map(|(hv, xv)| p.alpha * xv + p.gamma * hv).collect();
    }
    let x_prev = basis(t - 1);
    let form: Vec<f64> = x_prev.iter().zip(&h).map(|(x, hv)| p.beta1 * x + p.beta2 * hv).collect();
    Ok(form.into_iter().rev().collect())
}
