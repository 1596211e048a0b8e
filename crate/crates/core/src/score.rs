//! Scoring rules and paired comparisons.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{check_len, Error, Result};
use crate::stats::{mean, normal_cdf, normal_pdf, sample_sd};

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len("prediction length", truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::invalid("RMSE of an empty set"));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / truth.len() as f64).sqrt())
}

/// Closed-form CRPS of `N(μ, σ²)` at `y`.
pub fn crps_gaussian(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("CRPS needs sigma > 0, got {sigma}")));
    }
    let z = (y - mu) / sigma;
    let v = sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - std::f64::consts::FRAC_2_SQRT_PI / 2.0);
    Ok(v.max(0.0))
}

/// Average CRPS of Gaussian predictions given by means and variances.
pub fn mean_crps(y: &[f64], mu: &[f64], var: &[f64]) -> Result<f64> {
    check_len("prediction length", y.len(), mu.len())?;
    check_len("variance length", y.len(), var.len())?;
    if y.is_empty() {
        return Err(Error::invalid("CRPS of an empty set"));
    }
    let mut s = 0.0;
    for i in 0..y.len() {
        s += crps_gaussian(y[i], mu[i], var[i].sqrt())?;
    }
    Ok(s / y.len() as f64)
}

/// Pinball loss `(y − ŷ)(α − 1{y ≤ ŷ})`.
pub fn quantile_loss(y: f64, yhat: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("quantile level {alpha} outside (0, 1)")));
    }
    let ind = if y <= yhat { 1.0 } else { 0.0 };
    Ok((y - yhat) * (alpha - ind))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedTest {
    pub mean_difference: f64,
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

/// Paired t-test of `H₀: E[a − b] = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    check_len("paired sample length", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let md = mean(&d);
    let sd = sample_sd(&d);
    let df = n - 1.0;
    if sd == 0.0 {
        let p = if md == 0.0 { 1.0 } else { 0.0 };
        let t = if md == 0.0 { 0.0 } else { md.signum() * f64::INFINITY };
        return Ok(PairedTest {
            mean_difference: md,
            t,
            df,
            p_value: p,
        });
    }
    let t = md / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(e.to_string()))?;
    let p = 2.0 * dist.sf(t.abs());
    Ok(PairedTest {
        mean_difference: md,
        t,
        df,
        p_value: p.clamp(0.0, 1.0),
    })
}
