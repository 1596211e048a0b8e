//! Predictive distributions for new observations.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covmodel::{
    euclidean, Component, ComponentData, CovarianceParameters, EffectMatrix, PsiOperator, RandomEffectsDesign,
};
use crate::error::{check_len, Error, Result};
use crate::par;

/// Covariance of a predictive distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "lowercase")]
pub enum PredictiveCovariance {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl PredictiveCovariance {
    pub fn dim(&self) -> usize {
        match self {
            PredictiveCovariance::Diagonal(d) => d.len(),
            PredictiveCovariance::Dense(m) => m.nrows(),
        }
    }

    pub fn variances(&self) -> Vec<f64> {
        match self {
            PredictiveCovariance::Diagonal(d) => d.clone(),
            PredictiveCovariance::Dense(m) => m.diagonal().iter().copied().collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            PredictiveCovariance::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            PredictiveCovariance::Dense(m) => m.clone(),
        }
    }

    /// `wᵀΞw`
    pub fn quadratic_form(&self, w: &[f64]) -> f64 {
        match self {
            PredictiveCovariance::Diagonal(d) => d.iter().zip(w).map(|(v, x)| v * x * x).sum(),
            PredictiveCovariance::Dense(m) => {
                let mut s = 0.0;
                for j in 0..m.ncols() {
                    let mut col = 0.0;
                    for i in 0..m.nrows() {
                        col += m[(i, j)] * w[i];
                    }
                    s += col * w[j];
                }
                s
            }
        }
    }
}

/// Gaussian distribution of the responses (or latent values) at prediction points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    pub covariance: PredictiveCovariance,
    /// Whether the error variance is excluded from the covariance.
    pub latent: bool,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.covariance.variances()
    }
}

/// Treatment of group labels not seen in training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownGroupPolicy {
    /// A new random effect with zero cross-covariance to the training data.
    #[default]
    NewEffect,
    Error,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    #[default]
    Diagonal,
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Predict the latent mean plus random effects instead of a new response.
    pub latent: bool,
    pub covariance: CovarianceMode,
    pub unknown_groups: UnknownGroupPolicy,
}

/// Cross-covariances between the prediction targets' random effects and the
/// training random effects, one sparse column per target.
pub(crate) struct CrossCovariance {
    /// Per target: (global effect index, covariance) pairs.
    columns: Vec<Vec<(usize, f64)>>,
    m: usize,
}

fn check_query(design: &RandomEffectsDesign, query: &[ComponentData]) -> Result<usize> {
    check_len("random-effect components", design.data().len(), query.len())?;
    let np = query.first().map_or(0, ComponentData::len);
    for (train, q) in design.data().iter().zip(query) {
        check_len("prediction rows per component", np, q.len())?;
        match (train, q) {
            (ComponentData::Grouped { covariate: a, .. }, ComponentData::Grouped { covariate: b, .. })
            | (ComponentData::Gp { covariate: a, .. }, ComponentData::Gp { covariate: b, .. }) => {
                if a.is_some() != b.is_some() {
                    return Err(Error::invalid("prediction covariates must match the training design"));
                }
            }
            _ => return Err(Error::invalid("prediction components must match the training design")),
        }
        if let (ComponentData::Gp { locations: a, .. }, ComponentData::Gp { locations: b, .. }) = (train, q) {
            check_len("location dimension", a.dim(), b.dim())?;
        }
    }
    Ok(np)
}

impl CrossCovariance {
    pub(crate) fn new(
        design: &RandomEffectsDesign,
        params: &CovarianceParameters,
        query: &[ComponentData],
        policy: UnknownGroupPolicy,
    ) -> Result<Self> {
        let np = check_query(design, query)?;
        let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); np];
        for (c, (comp, q)) in design.components().iter().zip(query).enumerate() {
            let (var, range) = design.component_params(params, c);
            let offset = design.offsets()[c];
            let z = |p: usize| q.covariate().map_or(1.0, |z| z[p]);
            match (comp, q) {
                (Component::Grouped { levels, .. }, ComponentData::Grouped { labels, .. }) => {
                    let index: HashMap<&str, usize> =
                        levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
                    for (p, label) in labels.iter().enumerate() {
                        match index.get(label.as_str()) {
                            Some(&g) => columns[p].push((offset + g, var * z(p))),
                            None if policy == UnknownGroupPolicy::Error => {
                                return Err(Error::invalid(format!("unknown group label '{label}'")))
                            }
                            None => {}
                        }
                    }
                }
                (Component::Gp { unique, kernel, .. }, ComponentData::Gp { locations, .. }) => {
                    let range = range.expect("GP range");
                    let cols = par::map_range(np, |p| {
                        let zp = z(p);
                        (0..unique.len())
                            .map(|u| {
                                let d = euclidean(locations.point(p), unique.point(u));
                                (offset + u, zp * kernel.covariance(var, range, d))
                            })
                            .collect::<Vec<_>>()
                    });
                    for (col, extra) in columns.iter_mut().zip(cols) {
                        col.extend(extra);
                    }
                }
                _ => unreachable!("checked by check_query"),
            }
        }
        Ok(Self { columns, m: design.m() })
    }

    pub(crate) fn len(&self) -> usize {
        self.columns.len()
    }

    /// `Tᵀv` for a random-effect-space vector `v`.
    pub(crate) fn t_mul(&self, v: &[f64]) -> Vec<f64> {
        self.columns
            .iter()
            .map(|c| c.iter().map(|&(j, t)| t * v[j]).sum())
            .collect()
    }

    /// `t_pᵀ Q t_q` for all pairs (or only the diagonal).
    fn reduction(&self, q: &EffectMatrix, full: bool) -> PredictiveCovariance {
        let np = self.len();
        match q {
            EffectMatrix::Diag(d) if !full => PredictiveCovariance::Diagonal(
                self.columns
                    .iter()
                    .map(|c| {
                        // grouped columns never repeat an index
                        c.iter().map(|&(j, t)| t * t * d[j]).sum()
                    })
                    .collect(),
            ),
            _ => {
                let qd = q.to_dense();
                // QT, one dense column per target
                let qt: Vec<Vec<f64>> = par::map_range(np, |p| {
                    let mut out = vec![0.0; self.m];
                    for &(j, t) in &self.columns[p] {
                        for (i, o) in out.iter_mut().enumerate() {
                            *o += qd[(i, j)] * t;
                        }
                    }
                    out
                });
                let dotc = |p: usize, q: usize| self.columns[p].iter().map(|&(j, t)| t * qt[q][j]).sum::<f64>();
                if full {
                    let mut m = DMatrix::zeros(np, np);
                    for p in 0..np {
                        for q in 0..=p {
                            let v = dotc(p, q);
                            m[(p, q)] = v;
                            m[(q, p)] = v;
                        }
                    }
                    PredictiveCovariance::Dense(m)
                } else {
                    PredictiveCovariance::Diagonal((0..np).map(|p| dotc(p, p)).collect())
                }
            }
        }
    }
}

/// Prior covariance among the targets' random effects (`Z_pΣ_pZ_pᵀ`).
fn prior_covariance(
    design: &RandomEffectsDesign,
    params: &CovarianceParameters,
    query: &[ComponentData],
    full: bool,
) -> PredictiveCovariance {
    let np = query.first().map_or(0, ComponentData::len);
    let entry = |p: usize, q: usize| -> f64 {
        let mut s = 0.0;
        for (c, data) in query.iter().enumerate() {
            let (var, range) = design.component_params(params, c);
            let zz = data.covariate().map_or(1.0, |z| z[p] * z[q]);
            match data {
                ComponentData::Grouped { labels, .. } => {
                    if labels[p] == labels[q] {
                        s += var * zz;
                    }
                }
                ComponentData::Gp { locations, .. } => {
                    let kernel = match &design.data()[c] {
                        ComponentData::Gp { kernel, .. } => kernel,
                        ComponentData::Grouped { .. } => unreachable!("checked by check_query"),
                    };
                    let d = euclidean(locations.point(p), locations.point(q));
                    s += zz * kernel.covariance(var, range.expect("GP range"), d);
                }
            }
        }
        s
    };
    if full {
        let mut m = DMatrix::zeros(np, np);
        for p in 0..np {
            for q in 0..=p {
                let v = entry(p, q);
                m[(p, q)] = v;
                m[(q, p)] = v;
            }
        }
        PredictiveCovariance::Dense(m)
    } else {
        PredictiveCovariance::Diagonal((0..np).map(|p| entry(p, p)).collect())
    }
}

/// Conditional mean of the targets' random effects, `TᵀZᵀΨ⁻¹r`.
pub fn predict_effect_mean(
    design: &RandomEffectsDesign,
    params: &CovarianceParameters,
    psi: &PsiOperator,
    residual: &[f64],
    query: &[ComponentData],
    policy: UnknownGroupPolicy,
) -> Result<Vec<f64>> {
    check_len("residual length", design.n(), residual.len())?;
    let cross = CrossCovariance::new(design, params, query, policy)?;
    Ok(cross.t_mul(&psi.zt_mul(&psi.solve(residual))))
}

/// Exact Gaussian predictive distribution at new rows.
///
/// `residual` is `y − F(X)` on the training rows and `mean` holds `F(X_p)`.
/// The random effects of the targets are linked to the training effects
/// through `query` (same components as the training design).
pub fn predict_exact(
    design: &RandomEffectsDesign,
    params: &CovarianceParameters,
    residual: &[f64],
    query: &[ComponentData],
    mean: &[f64],
    config: &PredictConfig,
) -> Result<PredictiveDistribution> {
    let psi = PsiOperator::assemble(design, params)?;
    predict_exact_with(design, params, &psi, residual, query, mean, config)
}

/// [`predict_exact`] with an already factorized Ψ.
pub fn predict_exact_with(
    design: &RandomEffectsDesign,
    params: &CovarianceParameters,
    psi: &PsiOperator,
    residual: &[f64],
    query: &[ComponentData],
    mean: &[f64],
    config: &PredictConfig,
) -> Result<PredictiveDistribution> {
    check_len("residual length", design.n(), residual.len())?;
    let cross = CrossCovariance::new(design, params, query, config.unknown_groups)?;
    check_len("prediction mean length", cross.len(), mean.len())?;
    let effect = cross.t_mul(&psi.zt_mul(&psi.solve(residual)));
    let full = config.covariance == CovarianceMode::Full;
    let prior = prior_covariance(design, params, query, full);
    let reduction = cross.reduction(&psi.effect_precision(), full);
    let nugget = if config.latent { 0.0 } else { params.error_variance() };
    let covariance = match (prior, reduction) {
        (PredictiveCovariance::Diagonal(a), PredictiveCovariance::Diagonal(b)) => PredictiveCovariance::Diagonal(
            a.iter().zip(&b).map(|(a, b)| (a - b).max(0.0) + nugget).collect(),
        ),
        (a, b) => {
            let mut m = a.to_dense() - b.to_dense();
            for i in 0..m.nrows() {
                m[(i, i)] = m[(i, i)].max(0.0) + nugget;
            }
            PredictiveCovariance::Dense(m)
        }
    };
    Ok(PredictiveDistribution {
        mean: mean.iter().zip(&effect).map(|(f, e)| f + e).collect(),
        covariance,
        latent: config.latent,
    })
}

/// Weighted sum `wᵀy_p` of the predicted values: returns its mean and variance
/// (`w = 1` when no weights are given).
pub fn predict_sum(dist: &PredictiveDistribution, weights: Option<&[f64]>) -> Result<(f64, f64)> {
    let ones;
    let w = match weights {
        Some(w) => {
            check_len("weight length", dist.len(), w.len())?;
            w
        }
        None => {
            ones = vec![1.0; dist.len()];
            &ones
        }
    };
    let mean = dist.mean.iter().zip(w).map(|(m, x)| m * x).sum();
    Ok((mean, dist.covariance.quadratic_form(w)))
}

/// Marginal `α`-quantiles `μ + Φ⁻¹(α)·sd`.
pub fn predict_quantile(dist: &PredictiveDistribution, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("quantile level {alpha} outside (0, 1)")));
    }
    let z = crate::stats::normal_quantile(alpha);
    Ok(dist
        .mean
        .iter()
        .zip(dist.variances())
        .map(|(m, v)| m + z * v.max(0.0).sqrt())
        .collect())
}
