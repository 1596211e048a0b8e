//! Linear mixed-effects baseline: generalized least squares for the fixed
//! effects with maximum-likelihood covariance parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covmodel::{CovarianceParameters, PsiOperator, RandomEffectsDesign};
use crate::error::{check_len, Error, Result};
use crate::likelihood::{optimize, ExactObjective, OptimizerConfig};
use crate::tree::Features;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearMixedModel {
    /// Intercept first, then one coefficient per feature.
    pub beta: Vec<f64>,
    pub params: CovarianceParameters,
    pub design: RandomEffectsDesign,
    /// `y − Xβ̂` on the training rows.
    pub residual: Vec<f64>,
    pub iterations: usize,
}

impl LinearMixedModel {
    pub fn predict_mean(&self, x: &Features) -> Result<Vec<f64>> {
        check_len("feature count", self.beta.len() - 1, x.p())?;
        Ok((0..x.n())
            .map(|i| {
                let mut v = self.beta[0];
                for j in 0..x.p() {
                    v += self.beta[j + 1] * x.get(i, j);
                }
                v
            })
            .collect())
    }
}

fn design_matrix(x: &Features) -> Result<DMatrix<f64>> {
    if (0..x.p()).any(|j| x.column(j).iter().any(|v| v.is_nan())) {
        return Err(Error::invalid("the linear model does not accept missing predictors"));
    }
    Ok(DMatrix::from_fn(x.n(), x.p() + 1, |i, j| if j == 0 { 1.0 } else { x.get(i, j - 1) }))
}

/// `β̂ = (XᵀΨ⁻¹X)⁻¹XᵀΨ⁻¹y`.
pub fn gls_coefficients(xm: &DMatrix<f64>, y: &[f64], psi: &PsiOperator) -> Result<Vec<f64>> {
    let wx = psi.solve_matrix(xm);
    let a = xm.transpose() * &wx;
    let b = wx.transpose() * DVector::from_column_slice(y);
    a.cholesky()
        .map(|c| c.solve(&b).as_slice().to_vec())
        .ok_or_else(|| Error::Singular("GLS normal equations (collinear predictors?)".into()))
}

/// Alternates the GLS solve for `β` and the covariance optimization until the
/// NLL stops decreasing; `β` is finally re-solved at `θ̂`.
pub fn fit_linear_mixed(
    y: &[f64],
    x: &Features,
    design: &RandomEffectsDesign,
    init: Option<&CovarianceParameters>,
    optimizer: &OptimizerConfig,
) -> Result<LinearMixedModel> {
    check_len("response length", design.n(), y.len())?;
    check_len("feature rows", design.n(), x.n())?;
    if design.n() <= x.p() + 1 {
        return Err(Error::invalid("linear model needs more observations than coefficients"));
    }
    let xm = design_matrix(x)?;
    let mut theta = match init {
        Some(p) => p.clone(),
        None => design.default_params(y)?,
    };
    let residual_of = |beta: &[f64]| -> Vec<f64> {
        let fit = &xm * DVector::from_column_slice(beta);
        y.iter().zip(fit.iter()).map(|(a, b)| a - b).collect()
    };
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=200 {
        iterations = it;
        let psi = PsiOperator::assemble(design, &theta)?;
        let beta = gls_coefficients(&xm, y, &psi)?;
        let obj = ExactObjective::new(design, residual_of(&beta))?;
        let out = optimize(&obj, &theta, optimizer)?;
        theta = out.params;
        if prev - out.nll <= 1e-10 * out.nll.abs().max(1.0) {
            break;
        }
        prev = out.nll;
    }
    let psi = PsiOperator::assemble(design, &theta)?;
    let beta = gls_coefficients(&xm, y, &psi)?;
    let residual = residual_of(&beta);
    Ok(LinearMixedModel {
        beta,
        params: theta,
        design: design.clone(),
        residual,
        iterations,
    })
}
