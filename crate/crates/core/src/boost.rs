//! Boosting of the mean function jointly with covariance-parameter estimation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::covmodel::{dot, ComponentData, CovarianceParameters, Locations, PsiOperator, RandomEffectsDesign};
use crate::error::{check_len, Error, Result};
use crate::likelihood::{optimize, BlockObjective, CovObjective, ExactObjective, OptimizerConfig};
use crate::predict::{
    predict_effect_mean, predict_exact_with, CovarianceMode, PredictConfig, PredictiveDistribution, UnknownGroupPolicy,
};
use crate::tree::{gls_leaf_values, Features, RegressionTree, TreeBuilder, TreeParams};
use crate::vecchia::{
    build_neighbors, compute_factor, vecchia_predict, NeighborSets, VecchiaConfig, VecchiaFactor, VecchiaObjective,
    VecchiaTargets,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostType {
    /// Trees fit to `Ψ⁻¹(y − F)`.
    Gradient,
    /// Gradient-step tree structure with generalized least-squares leaves.
    Hybrid,
    /// Same as `Hybrid`: the structure search reuses the gradient targets.
    Newton,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    /// Marginal negative log-likelihood of the held-out rows.
    Nll,
    /// RMSE of the predictive mean on the held-out rows.
    Rmse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopping {
    pub validation_fraction: f64,
    pub patience: usize,
    pub metric: ValidationMetric,
    pub seed: u64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            validation_fraction: 0.2,
            patience: 10,
            metric: ValidationMetric::Nll,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostConfig {
    pub num_iterations: usize,
    pub learning_rate: f64,
    pub boost_type: BoostType,
    pub nesterov: bool,
    /// Constant momentum; `None` uses `μ_m = (m−1)/(m+2)`.
    pub momentum: Option<f64>,
    pub tree: TreeParams,
    pub early_stopping: Option<EarlyStopping>,
    /// Starting covariance parameters; `None` derives them from the response.
    pub init_params: Option<Vec<f64>>,
    pub optimizer: OptimizerConfig,
    /// Keep the covariance parameters at `init_params` throughout.
    pub fix_covariance: bool,
    /// Use the Vecchia approximation (single-GP designs only).
    pub vecchia: Option<VecchiaConfig>,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            num_iterations: 100,
            learning_rate: 0.1,
            boost_type: BoostType::Gradient,
            nesterov: false,
            momentum: None,
            tree: TreeParams::default(),
            early_stopping: None,
            init_params: None,
            optimizer: OptimizerConfig::default(),
            fix_covariance: false,
            vecchia: None,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if let Some(mu) = self.momentum {
            if !(mu > 0.0 && mu <= 1.0) {
                return Err(Error::invalid("momentum must lie in (0, 1]"));
            }
        }
        if let Some(es) = &self.early_stopping {
            if !(es.validation_fraction > 0.0 && es.validation_fraction < 1.0) {
                return Err(Error::invalid("validation fraction must lie in (0, 1)"));
            }
        }
        if self.fix_covariance && self.init_params.is_none() {
            return Err(Error::invalid("fixed covariance parameters need init_params"));
        }
        if let Some(v) = &self.vecchia {
            v.validate()?;
        }
        self.tree.validate()?;
        self.optimizer.validate()
    }

    fn momentum_at(&self, m: usize) -> f64 {
        self.momentum.unwrap_or((m as f64 - 1.0) / (m as f64 + 2.0))
    }
}

/// `F(x) = F₀ + Σ_j w_j f_j(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub init: f64,
    pub trees: Vec<RegressionTree>,
    pub weights: Vec<f64>,
    pub num_features: usize,
    /// Hash of the training predictors and response.
    pub fingerprint: String,
}

impl TreeEnsemble {
    pub fn predict(&self, x: &Features) -> Result<Vec<f64>> {
        check_len("feature count", self.num_features, x.p())?;
        Ok(crate::par::map_range(x.n(), |i| self.predict_row(&x.row(i))))
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut f = self.init;
        for (t, w) in self.trees.iter().zip(&self.weights) {
            f += w * t.predict_one(row);
        }
        f
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }
}

/// One boosting iteration's diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub params: Vec<f64>,
    /// `L(y, F_{m−1}, θ_m)`: before the boosting step, after the θ update.
    pub pre_step_nll: f64,
    /// `L(y, F_m, θ_m)` on the fitting data.
    pub train_nll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<f64>,
    /// RMSE of the predictive mean on each evaluation set.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub eval_rmse: Vec<f64>,
}

/// Output of [`gpboost_fit`]: the mean function, covariance parameters and the
/// training quantities needed for prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FittedModel {
    pub ensemble: TreeEnsemble,
    pub params: CovarianceParameters,
    pub design: RandomEffectsDesign,
    /// `y − F̂(X)` on the training rows.
    pub residual: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vecchia: Option<VecchiaConfig>,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    /// Validation metric per iteration of the early-stopping run.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub validation_curve: Vec<f64>,
}

impl FittedModel {
    /// Fixed-effects part `F̂(X_p)`.
    pub fn predict_mean_function(&self, x: &Features) -> Result<Vec<f64>> {
        self.ensemble.predict(x)
    }

    /// Predictive distribution at new rows linked to the random effects by `query`.
    pub fn predict(&self, x: &Features, query: &[ComponentData], config: &PredictConfig) -> Result<PredictiveDistribution> {
        let mean = self.ensemble.predict(x)?;
        match &self.vecchia {
            Some(vc) if self.design.single_gp().is_some() => {
                let (locations, covariate) = match &query.first() {
                    Some(ComponentData::Gp {
                        locations, covariate, ..
                    }) => (locations, covariate.as_deref()),
                    _ => return Err(Error::invalid("prediction components must match the training design")),
                };
                check_len("random-effect components", 1, query.len())?;
                let nb = build_neighbors(gp_locations(&self.design), vc.num_neighbors, vc.ordering)?;
                vecchia_predict(
                    &self.design,
                    &self.params,
                    &nb,
                    &self.residual,
                    VecchiaTargets {
                        locations,
                        covariate,
                        mean: &mean,
                    },
                    vc.prediction_mode,
                    vc.num_neighbors_pred,
                    config.latent,
                    config.covariance == CovarianceMode::Full,
                )
            }
            _ => {
                let psi = PsiOperator::assemble(&self.design, &self.params)?;
                predict_exact_with(&self.design, &self.params, &psi, &self.residual, query, &mean, config)
            }
        }
    }
}

fn gp_locations(design: &RandomEffectsDesign) -> &Locations {
    match &design.data()[0] {
        ComponentData::Gp { locations, .. } => locations,
        ComponentData::Grouped { .. } => unreachable!("checked single GP"),
    }
}

/// Rows whose prediction quality is tracked during boosting.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub x: Features,
    pub query: Vec<ComponentData>,
    pub y: Vec<f64>,
}

/// Factorized covariance at the current parameters.
enum Backend {
    Exact(PsiOperator),
    Vecchia(VecchiaFactor),
}

impl Backend {
    fn solve(&self, r: &[f64]) -> Vec<f64> {
        match self {
            Backend::Exact(p) => p.solve(r),
            Backend::Vecchia(f) => f.precision_mul(r),
        }
    }

    fn nll(&self, r: &[f64]) -> Result<f64> {
        match self {
            Backend::Exact(p) => Ok(0.5 * p.quadratic_form(r)
                + 0.5 * p.log_det()
                + 0.5 * r.len() as f64 * (2.0 * std::f64::consts::PI).ln()),
            Backend::Vecchia(f) => f.nll(r),
        }
    }
}

/// The covariance structure used by one fit.
struct CovModel<'a> {
    design: &'a RandomEffectsDesign,
    neighbors: Option<NeighborSets>,
    vecchia: Option<VecchiaConfig>,
}

impl<'a> CovModel<'a> {
    fn new(design: &'a RandomEffectsDesign, vecchia: Option<&VecchiaConfig>) -> Result<Self> {
        match vecchia {
            Some(vc) if design.single_gp().is_some() => Ok(Self {
                design,
                neighbors: Some(build_neighbors(gp_locations(design), vc.num_neighbors, vc.ordering)?),
                vecchia: Some(vc.clone()),
            }),
            _ => Ok(Self {
                design,
                neighbors: None,
                vecchia: None,
            }),
        }
    }

    fn backend(&self, params: &CovarianceParameters) -> Result<Backend> {
        match &self.neighbors {
            Some(nb) => Ok(Backend::Vecchia(compute_factor(self.design, params, nb, false)?)),
            None => Ok(Backend::Exact(PsiOperator::assemble(self.design, params)?)),
        }
    }

    fn objective(&self, residual: Vec<f64>) -> Result<Box<dyn CovObjective + 'a>> {
        match &self.neighbors {
            Some(nb) => Ok(Box::new(VecchiaObjective::new(self.design, nb.clone(), residual)?)),
            None => Ok(Box::new(ExactObjective::new(self.design, residual)?)),
        }
    }

    /// Predictive mean of the random effects at evaluation rows.
    fn effect_mean(
        &self,
        params: &CovarianceParameters,
        backend: &Backend,
        residual: &[f64],
        query: &[ComponentData],
    ) -> Result<Vec<f64>> {
        match (backend, &self.vecchia, &self.neighbors) {
            (Backend::Exact(psi), _, _) => {
                predict_effect_mean(self.design, params, psi, residual, query, UnknownGroupPolicy::NewEffect)
            }
            (Backend::Vecchia(_), Some(vc), Some(nb)) => {
                let (locations, covariate) = match query.first() {
                    Some(ComponentData::Gp {
                        locations, covariate, ..
                    }) => (locations, covariate.as_deref()),
                    _ => return Err(Error::invalid("evaluation components must match the training design")),
                };
                let zero = vec![0.0; locations.len()];
                let d = vecchia_predict(
                    self.design,
                    params,
                    nb,
                    residual,
                    VecchiaTargets {
                        locations,
                        covariate,
                        mean: &zero,
                    },
                    vc.prediction_mode,
                    vc.num_neighbors_pred,
                    false,
                    false,
                )?;
                Ok(d.mean)
            }
            _ => unreachable!("Vecchia backend without neighbor sets"),
        }
    }
}

/// `F₀ = argmin_c L(y, c·1, θ₀) = (1ᵀΨ⁻¹y)/(1ᵀΨ⁻¹1)`.
pub fn init_f0(y: &[f64], design: &RandomEffectsDesign, params: &CovarianceParameters) -> Result<f64> {
    check_len("response length", design.n(), y.len())?;
    let psi = PsiOperator::assemble(design, params)?;
    Ok(gls_intercept(&Backend::Exact(psi), y))
}

fn gls_intercept(backend: &Backend, y: &[f64]) -> f64 {
    let w = backend.solve(&vec![1.0; y.len()]);
    dot(&w, y) / w.iter().sum::<f64>()
}

/// A single boosting step at the current mean `f` (Algorithm 1, lines 10–18).
fn boost_step(
    builder: &TreeBuilder<'_>,
    backend: &Backend,
    y: &[f64],
    f: &[f64],
    boost_type: BoostType,
    tree: &TreeParams,
) -> Result<(RegressionTree, Vec<f64>)> {
    let r: Vec<f64> = y.iter().zip(f).map(|(a, b)| a - b).collect();
    let targets = backend.solve(&r);
    let mut fit = builder.fit(&targets, tree)?;
    if boost_type != BoostType::Gradient {
        let gamma = gls_leaf_values(&fit.leaf_of, fit.tree.num_leaves(), &r, |v| backend.solve(v))?;
        fit.tree.set_leaf_values(&gamma)?;
    }
    let leaves = fit.tree.leaf_values();
    let values = fit.leaf_of.iter().map(|&l| leaves[l]).collect();
    Ok((fit.tree, values))
}

/// Gradient boosting step on `Ψ⁻¹(y − F)`.
pub fn boost_step_gradient(
    x: &Features,
    y: &[f64],
    f: &[f64],
    psi: &PsiOperator,
    tree: &TreeParams,
) -> Result<RegressionTree> {
    exact_step(x, y, f, psi, tree, BoostType::Gradient)
}

/// Gradient-step structure with generalized least-squares leaf values.
pub fn boost_step_hybrid(
    x: &Features,
    y: &[f64],
    f: &[f64],
    psi: &PsiOperator,
    tree: &TreeParams,
) -> Result<RegressionTree> {
    exact_step(x, y, f, psi, tree, BoostType::Hybrid)
}

/// Newton step; identical to [`boost_step_hybrid`].
pub fn boost_step_newton(
    x: &Features,
    y: &[f64],
    f: &[f64],
    psi: &PsiOperator,
    tree: &TreeParams,
) -> Result<RegressionTree> {
    exact_step(x, y, f, psi, tree, BoostType::Newton)
}

fn exact_step(
    x: &Features,
    y: &[f64],
    f: &[f64],
    psi: &PsiOperator,
    tree: &TreeParams,
    kind: BoostType,
) -> Result<RegressionTree> {
    check_len("response length", x.n(), y.len())?;
    check_len("mean vector length", x.n(), f.len())?;
    check_len("covariance dimension", x.n(), psi.n())?;
    let builder = TreeBuilder::new(x);
    let r: Vec<f64> = y.iter().zip(f).map(|(a, c)| a - c).collect();
    let targets = psi.solve(&r);
    let mut fit = builder.fit(&targets, tree)?;
    if kind != BoostType::Gradient {
        let gamma = gls_leaf_values(&fit.leaf_of, fit.tree.num_leaves(), &r, |v| psi.solve(v))?;
        fit.tree.set_leaf_values(&gamma)?;
    }
    Ok(fit.tree)
}

/// Held-out rows for early stopping.
struct Validation<'a> {
    x: Features,
    y: Vec<f64>,
    query: Vec<ComponentData>,
    design: RandomEffectsDesign,
    metric: ValidationMetric,
    vecchia: Option<&'a VecchiaConfig>,
}

struct CoreOutput {
    ensemble: TreeEnsemble,
    params: CovarianceParameters,
    residual: Vec<f64>,
    history: Vec<IterationRecord>,
}

fn fingerprint(y: &[f64], x: &Features) -> String {
    // FNV-1a over the bit patterns
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    y.iter().for_each(|v| eat(*v));
    for j in 0..x.p() {
        x.column(j).iter().for_each(|v| eat(*v));
    }
    format!("{h:016x}")
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Algorithm 1 for a fixed number of iterations, optionally tracking a
/// validation metric and evaluation sets.
#[allow(clippy::too_many_arguments)]
fn boost_core(
    y: &[f64],
    x: &Features,
    design: &RandomEffectsDesign,
    config: &BoostConfig,
    theta0: CovarianceParameters,
    iterations: usize,
    validation: Option<&Validation<'_>>,
    eval_sets: &[EvalSet],
    stop_patience: Option<usize>,
) -> Result<CoreOutput> {
    let n = y.len();
    let cov = CovModel::new(design, config.vecchia.as_ref())?;
    let builder = TreeBuilder::new(x);
    let mut theta = theta0;
    let init = gls_intercept(&cov.backend(&theta)?, y);
    if !init.is_finite() {
        return Err(Error::Numerical("non-finite initial constant".into()));
    }

    let val_cov = match validation {
        Some(v) => Some(CovModel::new(&v.design, v.vecchia)?),
        None => None,
    };
    // Per-tree predictions on held-out and evaluation rows.
    let mut f = vec![init; n];
    let mut f_val = validation.map(|v| vec![init; v.y.len()]);
    let mut f_eval: Vec<Vec<f64>> = eval_sets.iter().map(|e| vec![init; e.y.len()]).collect();
    let mut weights: Vec<f64> = Vec::new();
    let mut trees: Vec<RegressionTree> = Vec::new();
    // Nesterov companions: previous iterate G_{m−1}, G_{m−2} (values and weights)
    let mut g_prev: Option<(Vec<f64>, Option<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> = None;
    let mut history = Vec::with_capacity(iterations);
    let mut best = (f64::INFINITY, 0usize);

    for m in 1..=iterations {
        // line 3
        if !config.fix_covariance {
            let r: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
            let obj = cov.objective(r)?;
            theta = optimize(obj.as_ref(), &theta, &config.optimizer)?.params;
        }
        // lines 4–9: F_{m−1} ← G_{m−1} + μ_m (G_{m−1} − G_{m−2})
        let current = (f.clone(), f_val.clone(), f_eval.clone(), weights.clone());
        if config.nesterov {
            if let Some((gp, gpv, gpe, gpw)) = &g_prev {
                let mu = config.momentum_at(m);
                let ext = |a: &[f64], b: &[f64]| -> Vec<f64> {
                    a.iter()
                        .zip(b.iter().chain(std::iter::repeat(&0.0)))
                        .map(|(x, z)| x + mu * (x - z))
                        .collect()
                };
                // the constant F₀ cancels in the difference
                f = ext(&current.0, gp);
                if let (Some(fv), Some(cv), Some(pv)) = (&mut f_val, &current.1, gpv) {
                    *fv = ext(cv, pv);
                }
                for ((fe, ce), pe) in f_eval.iter_mut().zip(&current.2).zip(gpe) {
                    *fe = ext(ce, pe);
                }
                weights = ext(&current.3, gpw);
            }
        }
        // lines 10–18
        let backend = cov.backend(&theta)?;
        let r_prev: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        let pre_step_nll = backend.nll(&r_prev)?;
        let (tree, values) = boost_step(&builder, &backend, y, &f, config.boost_type, &config.tree)?;
        let nu = config.learning_rate;
        // line 19
        for (fi, v) in f.iter_mut().zip(&values) {
            *fi += nu * v;
        }
        if let (Some(fv), Some(v)) = (&mut f_val, validation) {
            for (i, fi) in fv.iter_mut().enumerate() {
                *fi += nu * tree.predict_one(&v.x.row(i));
            }
        }
        for (fe, e) in f_eval.iter_mut().zip(eval_sets) {
            for (i, fi) in fe.iter_mut().enumerate() {
                *fi += nu * tree.predict_one(&e.x.row(i));
            }
        }
        weights.push(nu);
        trees.push(tree);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite ensemble values at iteration {m}")));
        }
        if config.nesterov {
            g_prev = Some(current);
        }

        let r: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        let train_nll = backend.nll(&r)?;
        let val_metric = match (validation, &f_val, &val_cov) {
            (Some(v), Some(fv), Some(vc)) => Some(match v.metric {
                ValidationMetric::Nll => {
                    let rv: Vec<f64> = v.y.iter().zip(fv).map(|(a, b)| a - b).collect();
                    vc.backend(&theta)?.nll(&rv)?
                }
                ValidationMetric::Rmse => {
                    let eff = cov.effect_mean(&theta, &backend, &r, &v.query)?;
                    let mu: Vec<f64> = fv.iter().zip(&eff).map(|(a, b)| a + b).collect();
                    rmse(&mu, &v.y)
                }
            }),
            _ => None,
        };
        let mut eval_rmse = Vec::with_capacity(eval_sets.len());
        for (e, fe) in eval_sets.iter().zip(&f_eval) {
            let eff = cov.effect_mean(&theta, &backend, &r, &e.query)?;
            let mu: Vec<f64> = fe.iter().zip(&eff).map(|(a, b)| a + b).collect();
            eval_rmse.push(rmse(&mu, &e.y));
        }
        // without a validation split, patience applies to the first eval set
        let stop_metric = val_metric.or_else(|| eval_rmse.first().copied());
        log::debug!("iteration {m}: nll {train_nll:.6} params {:?}", theta.values());
        history.push(IterationRecord {
            iteration: m,
            params: theta.values().to_vec(),
            pre_step_nll,
            train_nll,
            validation: val_metric,
            eval_rmse,
        });
        if let (Some(p), Some(v)) = (stop_patience, stop_metric) {
            if v < best.0 {
                best = (v, m);
            } else if m - best.1 >= p {
                break;
            }
        }
    }
    let residual: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
    Ok(CoreOutput {
        ensemble: TreeEnsemble {
            init,
            trees,
            weights,
            num_features: x.p(),
            fingerprint: fingerprint(y, x),
        },
        params: theta,
        residual,
        history,
    })
}

fn initial_params(y: &[f64], design: &RandomEffectsDesign, config: &BoostConfig) -> Result<CovarianceParameters> {
    match &config.init_params {
        Some(v) => {
            let p = CovarianceParameters::new(v.clone())?;
            design.check_params(&p)?;
            Ok(p)
        }
        None => design.default_params(y),
    }
}

/// Random hold-out rows; every group of every grouped component keeps at least
/// one training row.
pub fn stratified_holdout(design: &RandomEffectsDesign, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = design.n();
    let target = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let grouped: Vec<&Vec<String>> = design
        .data()
        .iter()
        .filter_map(|d| match d {
            ComponentData::Grouped { labels, .. } => Some(labels),
            ComponentData::Gp { .. } => None,
        })
        .collect();
    let mut remaining: Vec<HashMap<&str, usize>> = grouped
        .iter()
        .map(|labels| {
            let mut c = HashMap::new();
            for l in labels.iter() {
                *c.entry(l.as_str()).or_insert(0) += 1;
            }
            c
        })
        .collect();
    let mut val = Vec::with_capacity(target);
    for &i in &order {
        if val.len() == target {
            break;
        }
        if grouped
            .iter()
            .zip(&remaining)
            .all(|(labels, c)| c[labels[i].as_str()] > 1)
        {
            for (labels, c) in grouped.iter().zip(remaining.iter_mut()) {
                *c.get_mut(labels[i].as_str()).expect("counted") -= 1;
            }
            val.push(i);
        }
    }
    val.sort_unstable();
    let mut is_val = vec![false; n];
    for &i in &val {
        is_val[i] = true;
    }
    let train = (0..n).filter(|&i| !is_val[i]).collect();
    (train, val)
}

/// Algorithm 1: boosting of `F` with covariance-parameter updates.
///
/// With early stopping, the number of iterations is chosen on a held-out part
/// of the data and the model is then refit on all rows.
pub fn gpboost_fit(y: &[f64], x: &Features, design: &RandomEffectsDesign, config: &BoostConfig) -> Result<FittedModel> {
    gpboost_fit_tracked(y, x, design, config, &[])
}

/// [`gpboost_fit`] recording the predictive-mean RMSE on `eval_sets` after
/// every iteration.
pub fn gpboost_fit_tracked(
    y: &[f64],
    x: &Features,
    design: &RandomEffectsDesign,
    config: &BoostConfig,
    eval_sets: &[EvalSet],
) -> Result<FittedModel> {
    config.validate()?;
    let n = design.n();
    check_len("response length", n, y.len())?;
    check_len("feature rows", n, x.n())?;
    if n < 2 {
        return Err(Error::invalid("boosting needs at least two observations"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("response must be finite"));
    }
    let theta0 = initial_params(y, design, config)?;
    let mut iterations = config.num_iterations;
    let mut validation_curve = Vec::new();
    if let Some(es) = &config.early_stopping {
        let (train, val) = stratified_holdout(design, es.validation_fraction, es.seed);
        let tr_design = design.subset(&train)?;
        let y_tr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let v = Validation {
            x: x.select_rows(&val),
            y: val.iter().map(|&i| y[i]).collect(),
            query: design.data().iter().map(|d| d.select(&val)).collect(),
            design: design.subset(&val)?,
            metric: es.metric,
            vecchia: config.vecchia.as_ref(),
        };
        let out = boost_core(
            &y_tr,
            &x.select_rows(&train),
            &tr_design,
            config,
            theta0.clone(),
            config.num_iterations,
            Some(&v),
            &[],
            Some(es.patience),
        )?;
        validation_curve = out.history.iter().filter_map(|h| h.validation).collect();
        // M = 0 when no iteration improves on the constant model
        let base = constant_validation(&y_tr, &tr_design, &v, &theta0, config)?;
        iterations = validation_curve
            .iter()
            .enumerate()
            .fold((base, 0), |(b, bi), (i, &val)| if val < b { (val, i + 1) } else { (b, bi) })
            .1;
    }
    let out = boost_core(y, x, design, config, theta0.clone(), iterations, None, eval_sets, None)?;
    let params = if iterations == 0 && !config.fix_covariance {
        // no boosting step: still estimate θ for the constant mean
        let f = vec![out.ensemble.init; n];
        let cov = CovModel::new(design, config.vecchia.as_ref())?;
        let r: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        optimize(cov.objective(r)?.as_ref(), &theta0, &config.optimizer)?.params
    } else {
        out.params
    };
    Ok(FittedModel {
        ensemble: out.ensemble,
        params,
        design: design.clone(),
        residual: out.residual,
        vecchia: config.vecchia.clone(),
        iterations,
        history: out.history,
        validation_curve,
    })
}

/// Predictive-mean RMSE on `eval` after each iteration, stopping once it has
/// not improved for `patience` iterations. Used for choosing `M`.
pub fn gpboost_eval_curve(
    y: &[f64],
    x: &Features,
    design: &RandomEffectsDesign,
    config: &BoostConfig,
    eval: &EvalSet,
    patience: Option<usize>,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_len("response length", design.n(), y.len())?;
    check_len("feature rows", design.n(), x.n())?;
    let theta0 = initial_params(y, design, config)?;
    let out = boost_core(
        y,
        x,
        design,
        config,
        theta0,
        config.num_iterations,
        None,
        std::slice::from_ref(eval),
        patience,
    )?;
    Ok(out.history.iter().map(|h| h.eval_rmse[0]).collect())
}

/// Validation metric of the constant model `F₀` with θ estimated for it.
fn constant_validation(
    y: &[f64],
    design: &RandomEffectsDesign,
    v: &Validation<'_>,
    theta0: &CovarianceParameters,
    config: &BoostConfig,
) -> Result<f64> {
    let cov = CovModel::new(design, config.vecchia.as_ref())?;
    let init = gls_intercept(&cov.backend(theta0)?, y);
    let theta = if config.fix_covariance {
        theta0.clone()
    } else {
        let r: Vec<f64> = y.iter().map(|a| a - init).collect();
        optimize(cov.objective(r)?.as_ref(), theta0, &config.optimizer)?.params
    };
    let r: Vec<f64> = y.iter().map(|a| a - init).collect();
    match v.metric {
        ValidationMetric::Nll => {
            let rv: Vec<f64> = v.y.iter().map(|a| a - init).collect();
            CovModel::new(&v.design, v.vecchia)?.backend(&theta)?.nll(&rv)
        }
        ValidationMetric::Rmse => {
            let backend = cov.backend(&theta)?;
            let eff = cov.effect_mean(&theta, &backend, &r, &v.query)?;
            let mu: Vec<f64> = eff.iter().map(|e| init + e).collect();
            Ok(rmse(&mu, &v.y))
        }
    }
}

/// Random k-fold partition: fold index of every row.
pub fn kfold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (k, &i) in order.iter().enumerate() {
        fold[i] = k % folds;
    }
    fold
}

/// Algorithm 2: covariance parameters estimated from out-of-fold predictions
/// of `F`, then a final fit with those parameters held fixed.
pub fn gpboostoos_fit(
    y: &[f64],
    x: &Features,
    design: &RandomEffectsDesign,
    config: &BoostConfig,
    folds: usize,
    seed: u64,
) -> Result<FittedModel> {
    config.validate()?;
    let n = design.n();
    check_len("response length", n, y.len())?;
    check_len("feature rows", n, x.n())?;
    if folds < 2 || folds > n {
        return Err(Error::invalid(format!("need 2 <= folds <= n, got {folds} for n = {n}")));
    }
    let assign = kfold_assignment(n, folds, seed);
    let fold_rows: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|k| {
            let val: Vec<usize> = (0..n).filter(|&i| assign[i] == k).collect();
            let train: Vec<usize> = (0..n).filter(|&i| assign[i] != k).collect();
            (train, val)
        })
        .collect();
    if fold_rows.iter().any(|(t, _)| t.len() < 2) {
        return Err(Error::invalid("every training fold needs at least two observations"));
    }
    // step 2: out-of-fold predictions of F
    let predictions: Vec<Vec<f64>> = fold_rows
        .iter()
        .map(|(train, val)| {
            let sub = design.subset(train)?;
            let y_tr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let model = gpboost_fit(&y_tr, &x.select_rows(train), &sub, config)?;
            model.ensemble.predict(&x.select_rows(val))
        })
        .collect::<Result<_>>()?;
    // step 3: pooled likelihood of the held-out residuals
    let val_designs: Vec<RandomEffectsDesign> = fold_rows
        .iter()
        .map(|(_, val)| design.subset(val))
        .collect::<Result<_>>()?;
    let mut blocks: Vec<Box<dyn CovObjective + '_>> = Vec::with_capacity(folds);
    for ((d, (_, val)), fhat) in val_designs.iter().zip(&fold_rows).zip(&predictions) {
        let r: Vec<f64> = val.iter().zip(fhat).map(|(&i, f)| y[i] - f).collect();
        let cov = CovModel::new(d, config.vecchia.as_ref())?;
        blocks.push(cov.objective(r)?);
    }
    let pooled = BlockObjective::new(blocks)?;
    let theta0 = initial_params(y, design, config)?;
    let theta = optimize(&pooled, &theta0, &config.optimizer)?.params;
    // step 4
    let final_config = BoostConfig {
        init_params: Some(theta.values().to_vec()),
        fix_covariance: true,
        ..config.clone()
    };
    gpboost_fit(y, x, design, &final_config)
}

/// Plain least-squares tree boosting (independent observations).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L2BoostConfig {
    pub num_iterations: usize,
    pub learning_rate: f64,
    pub tree: TreeParams,
}

impl Default for L2BoostConfig {
    fn default() -> Self {
        Self {
            num_iterations: 100,
            learning_rate: 0.1,
            tree: TreeParams::default(),
        }
    }
}

/// Least-squares boosting; returns the ensemble and, for every evaluation set
/// `(X, y)`, the RMSE after each iteration.
pub fn l2_boost_fit(
    y: &[f64],
    x: &Features,
    config: &L2BoostConfig,
    eval_sets: &[(&Features, &[f64])],
) -> Result<(TreeEnsemble, Vec<Vec<f64>>)> {
    check_len("response length", x.n(), y.len())?;
    if y.is_empty() {
        return Err(Error::invalid("empty training data"));
    }
    let builder = TreeBuilder::new(x);
    let init = y.iter().sum::<f64>() / y.len() as f64;
    let mut f = vec![init; y.len()];
    let mut f_eval: Vec<Vec<f64>> = eval_sets.iter().map(|(_, ye)| vec![init; ye.len()]).collect();
    let mut curves = vec![Vec::with_capacity(config.num_iterations); eval_sets.len()];
    let mut trees = Vec::with_capacity(config.num_iterations);
    for _ in 0..config.num_iterations {
        let r: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        let fit = builder.fit(&r, &config.tree)?;
        let leaves = fit.tree.leaf_values();
        for (fi, &l) in f.iter_mut().zip(&fit.leaf_of) {
            *fi += config.learning_rate * leaves[l];
        }
        for ((fe, (xe, ye)), c) in f_eval.iter_mut().zip(eval_sets).zip(curves.iter_mut()) {
            for (i, fi) in fe.iter_mut().enumerate() {
                *fi += config.learning_rate * fit.tree.predict_one(&xe.row(i));
            }
            c.push(rmse(fe, ye));
        }
        trees.push(fit.tree);
    }
    let weights = vec![config.learning_rate; trees.len()];
    Ok((
        TreeEnsemble {
            init,
            trees,
            weights,
            num_features: x.p(),
            fingerprint: fingerprint(y, x),
        },
        curves,
    ))
}
