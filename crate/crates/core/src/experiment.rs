//! Simulation study runner: tuning, repeated fits, scoring and reporting.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::boost::{gpboost_eval_curve, gpboost_fit, gpboostoos_fit, l2_boost_fit, BoostConfig, EvalSet, FittedModel, L2BoostConfig};
use crate::covmodel::{ComponentData, RandomEffectsDesign};
use crate::error::{Error, Result};
use crate::likelihood::OptimizerConfig;
use crate::linear::{fit_linear_mixed, LinearMixedModel};
use crate::par;
use crate::predict::{
    predict_exact, predict_sum, CovarianceMode, PredictConfig, PredictiveCovariance, PredictiveDistribution,
};
use crate::score::{crps_gaussian, mean_crps, paired_t_test, rmse};
use crate::sim::{simulate, EffectSpec, MeanFunction, SimData, SimDesign, SimReplicate};
use crate::stats::{mean, sample_sd};
use crate::tree::{Features, TreeParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Boosting with covariance parameters; tuned over the configured grid.
    Gpboost,
    /// Out-of-sample covariance estimation with the GPBoost tuning.
    GpboostOos,
    /// GPBoost with `ν = 0.1`, depth 5, 10 samples per leaf; only `M` tuned.
    GpbFixLr,
    /// Independent least-squares boosting with the grouping variable or the
    /// coordinates as extra predictors.
    LsBoost,
    /// Linear mean with the same random effects, fitted by GLS / ML.
    Linear,
}

impl Method {
    pub fn label(self, spatial: bool) -> &'static str {
        match self {
            Method::Gpboost => "GPBoost",
            Method::GpboostOos => "GPBoostOOS",
            Method::GpbFixLr => "GPBFixLR",
            Method::LsBoost => "LSBoost",
            Method::Linear if spatial => "LinearGP",
            Method::Linear => "LinearME",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningGrid {
    pub learning_rates: Vec<f64>,
    pub max_depths: Vec<usize>,
    pub min_samples_leaf: Vec<usize>,
    /// Upper bound for the number of boosting iterations.
    pub max_iterations: usize,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self::fixed_lr()
    }
}

impl TuningGrid {
    /// `ν = 0.1`, depth 5, 10 samples per leaf.
    pub fn fixed_lr() -> Self {
        Self {
            learning_rates: vec![0.1],
            max_depths: vec![5],
            min_samples_leaf: vec![10],
            max_iterations: 1000,
        }
    }

    /// The full grid: `ν ∈ {0.1, 0.05, 0.01}`, depth `∈ {1, 5, 10}`,
    /// min leaf `∈ {1, 10, 100}`, `M ≤ 1000`.
    pub fn full() -> Self {
        Self {
            learning_rates: vec![0.1, 0.05, 0.01],
            max_depths: vec![1, 5, 10],
            min_samples_leaf: vec![1, 10, 100],
            max_iterations: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.max_depths.is_empty() || self.min_samples_leaf.is_empty() {
            return Err(Error::invalid("tuning grid has an empty axis"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("tuning grid needs max_iterations >= 1"));
        }
        if self.learning_rates.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        for p in self.points() {
            p.1.validate()?;
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<(f64, TreeParams)> {
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &d in &self.max_depths {
                for &l in &self.min_samples_leaf {
                    out.push((
                        lr,
                        TreeParams {
                            max_depth: d,
                            min_samples_leaf: l,
                            max_leaves: None,
                        },
                    ));
                }
            }
        }
        out
    }
}

/// Selected tuning parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tuned {
    pub learning_rate: f64,
    pub tree: TreeParams,
    pub iterations: usize,
    /// Average validation RMSE at the chosen values.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub design: SimDesign,
    pub methods: Vec<Method>,
    pub replicates: usize,
    /// Additional simulated data sets used only for tuning.
    pub tuning_replicates: usize,
    pub grid: TuningGrid,
    pub oos_folds: usize,
    pub optimizer: OptimizerConfig,
    /// Minimum training rows for a group to get its own LSBoost dummy column.
    pub lsboost_min_level_count: usize,
    /// Stop a GPBoost tuning curve after this many iterations without
    /// improvement; `M` is then chosen among iterations reached by every
    /// tuning replicate.
    pub tuning_patience: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            design: SimDesign::grouped(MeanFunction::Friedman3, 0),
            methods: vec![
                Method::Gpboost,
                Method::GpboostOos,
                Method::GpbFixLr,
                Method::LsBoost,
                Method::Linear,
            ],
            replicates: 10,
            tuning_replicates: 2,
            grid: TuningGrid::fixed_lr(),
            oos_folds: 4,
            optimizer: OptimizerConfig::default(),
            lsboost_min_level_count: 100,
            tuning_patience: Some(50),
        }
    }
}

impl ExperimentConfig {
    /// Grouped random effects: n = 5000, 500 groups.
    pub fn grouped(mean_fn: MeanFunction, seed: u64) -> Self {
        Self {
            design: SimDesign::grouped(mean_fn, seed),
            ..Self::default()
        }
    }

    /// Spatial GP: n = 500, exponential kernel with range 0.1. Uses Fisher
    /// scoring, which converges in a few steps where gradient descent needs
    /// hundreds on the range parameter.
    pub fn spatial(mean_fn: MeanFunction, seed: u64) -> Self {
        Self {
            design: SimDesign::spatial(mean_fn, seed),
            optimizer: OptimizerConfig::fisher_scoring(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        self.grid.validate()?;
        self.optimizer.validate()?;
        if self.replicates == 0 {
            return Err(Error::invalid("need at least one replicate"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods selected"));
        }
        let tuned = self.methods.iter().any(|m| *m != Method::Linear);
        if tuned && self.tuning_replicates == 0 {
            return Err(Error::invalid("boosting methods need at least one tuning replicate"));
        }
        if self.tuning_patience == Some(0) {
            return Err(Error::invalid("tuning_patience must be at least 1"));
        }
        if self.methods.contains(&Method::GpboostOos) && self.oos_folds < 2 {
            return Err(Error::invalid("oos_folds must be at least 2"));
        }
        Ok(())
    }

    fn is_spatial(&self) -> bool {
        matches!(self.design.effect, EffectSpec::SpatialGp { .. })
    }

    pub fn replicate_design(&self, r: usize) -> SimDesign {
        SimDesign {
            seed: self.design.seed.wrapping_add(r as u64),
            ..self.design.clone()
        }
    }

    pub fn tuning_design(&self, k: usize) -> SimDesign {
        SimDesign {
            seed: self.design.seed.wrapping_add(1_000_000 + k as u64),
            ..self.design.clone()
        }
    }
}

fn union_eval(rep: &SimReplicate) -> Result<(Features, ComponentData, Vec<f64>)> {
    let both: Vec<Vec<f64>> = (0..rep.test.x.n())
        .map(|i| rep.test.x.row(i))
        .chain((0..rep.test_ext.x.n()).map(|i| rep.test_ext.x.row(i)))
        .collect();
    let y = rep.test.y.iter().chain(&rep.test_ext.y).copied().collect();
    Ok((Features::from_rows(&both)?, rep.test.re.concat(&rep.test_ext.re)?, y))
}

/// LSBoost predictors: the covariates plus one dummy column per sufficiently
/// frequent training group (rare and unseen groups pooled at zero), or the
/// coordinates.
fn augmented(data: &SimData, levels: &BTreeMap<String, usize>) -> Result<Features> {
    let mut cols: Vec<Vec<f64>> = (0..data.x.p()).map(|j| data.x.column(j).to_vec()).collect();
    match &data.re {
        ComponentData::Grouped { labels, .. } => {
            let first = cols.len();
            cols.resize(first + levels.len(), vec![0.0; data.len()]);
            for (i, l) in labels.iter().enumerate() {
                if let Some(&k) = levels.get(l) {
                    cols[first + k][i] = 1.0;
                }
            }
        }
        ComponentData::Gp { locations, .. } => {
            for d in 0..locations.dim() {
                cols.push((0..locations.len()).map(|i| locations.point(i)[d]).collect());
            }
        }
    }
    Features::from_columns(data.len(), cols)
}

/// Groups with at least `min_count` training rows, numbered in label order.
fn level_index(train: &SimData, min_count: usize) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    if let ComponentData::Grouped { labels, .. } = &train.re {
        for l in labels {
            *counts.entry(l.as_str()).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .enumerate()
        .map(|(k, (l, _))| (l.to_string(), k))
        .collect()
}

fn argmin_curve(curves: &[Vec<f64>]) -> Option<(usize, f64)> {
    let len = curves.iter().map(Vec::len).min()?;
    (0..len)
        .map(|m| (m + 1, curves.iter().map(|c| c[m]).sum::<f64>() / curves.len() as f64))
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// Chooses learning rate, tree parameters and `M` minimizing the average RMSE
/// on the union of both test sets of the tuning replicates.
pub fn tune(method: Method, config: &ExperimentConfig) -> Result<Tuned> {
    tune_grid(method, config)?
        .into_iter()
        .reduce(|best, t| if t.score < best.score { t } else { best })
        .ok_or_else(|| Error::Numerical("tuning produced no finite validation score".into()))
}

/// Best `M` and its score for every grid point (points without a finite
/// score are left out), in grid order.
pub fn tune_grid(method: Method, config: &ExperimentConfig) -> Result<Vec<Tuned>> {
    config.validate()?;
    if method == Method::Linear {
        return Err(Error::invalid("the linear baseline has no tuning parameters"));
    }
    if config.tuning_replicates == 0 {
        return Err(Error::invalid("tuning needs at least one tuning replicate"));
    }
    let grid = match method {
        Method::GpbFixLr => TuningGrid {
            max_iterations: config.grid.max_iterations,
            ..TuningGrid::fixed_lr()
        },
        _ => config.grid.clone(),
    };
    let reps: Vec<SimReplicate> = (0..config.tuning_replicates)
        .map(|k| simulate(&config.tuning_design(k)))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (lr, tree) in grid.points() {
        let curves: Vec<Vec<f64>> = par::map_range(reps.len(), |k| -> Result<Vec<f64>> {
            let rep = &reps[k];
            let (xe, re, ye) = union_eval(rep)?;
            match method {
                Method::LsBoost => {
                    let levels = level_index(&rep.train, config.lsboost_min_level_count);
                    let xt = augmented(&rep.train, &levels)?;
                    let both = SimData {
                        x: xe,
                        y: ye.clone(),
                        f: vec![0.0; ye.len()],
                        effect: vec![0.0; ye.len()],
                        re,
                    };
                    let xv = augmented(&both, &levels)?;
                    let cfg = L2BoostConfig {
                        num_iterations: grid.max_iterations,
                        learning_rate: lr,
                        tree: tree.clone(),
                    };
                    let (_, curves) = l2_boost_fit(&rep.train.y, &xt, &cfg, &[(&xv, &ye)])?;
                    Ok(curves.into_iter().next().expect("one eval set"))
                }
                _ => {
                    let cfg = BoostConfig {
                        num_iterations: grid.max_iterations,
                        learning_rate: lr,
                        tree: tree.clone(),
                        optimizer: config.optimizer.clone(),
                        ..BoostConfig::default()
                    };
                    let eval = EvalSet {
                        x: xe,
                        query: vec![re],
                        y: ye,
                    };
                    gpboost_eval_curve(
                        &rep.train.y,
                        &rep.train.x,
                        &rep.train.design()?,
                        &cfg,
                        &eval,
                        config.tuning_patience,
                    )
                }
            }
        })
        .into_iter()
        .collect::<Result<_>>()?;
        if let Some((m, score)) = argmin_curve(&curves) {
            out.push(Tuned {
                learning_rate: lr,
                tree: tree.clone(),
                iterations: m,
                score,
            });
        }
    }
    Ok(out)
}

/// Metrics of one method on one replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub method: Method,
    pub replicate: usize,
    pub metrics: BTreeMap<String, f64>,
    pub params: Option<Vec<f64>>,
    pub error: Option<String>,
}

enum Fitted {
    Boost(Box<FittedModel>),
    Linear(Box<LinearMixedModel>),
    Independent {
        ensemble: crate::boost::TreeEnsemble,
        levels: BTreeMap<String, usize>,
        sigma2: f64,
    },
}

impl Fitted {
    fn predict(&self, data: &SimData, latent: bool, full: bool) -> Result<PredictiveDistribution> {
        let cfg = PredictConfig {
            latent,
            covariance: if full {
                CovarianceMode::Full
            } else {
                CovarianceMode::Diagonal
            },
            ..PredictConfig::default()
        };
        let query = std::slice::from_ref(&data.re);
        match self {
            Fitted::Boost(m) => m.predict(&data.x, query, &cfg),
            Fitted::Linear(m) => {
                let mean = m.predict_mean(&data.x)?;
                predict_exact(&m.design, &m.params, &m.residual, query, &mean, &cfg)
            }
            Fitted::Independent {
                ensemble,
                levels,
                sigma2,
            } => {
                let mean = ensemble.predict(&augmented(data, levels)?)?;
                let n = mean.len();
                let covariance = if full {
                    PredictiveCovariance::Dense(nalgebra::DMatrix::from_diagonal_element(n, n, *sigma2))
                } else {
                    PredictiveCovariance::Diagonal(vec![*sigma2; n])
                };
                Ok(PredictiveDistribution {
                    mean,
                    covariance,
                    latent: false,
                })
            }
        }
    }

    fn mean_function(&self, x: &Features) -> Option<Result<Vec<f64>>> {
        match self {
            Fitted::Boost(m) => Some(m.ensemble.predict(x)),
            Fitted::Linear(m) => Some(m.predict_mean(x)),
            Fitted::Independent { .. } => None,
        }
    }

    fn params(&self) -> Option<Vec<f64>> {
        match self {
            Fitted::Boost(m) => Some(m.params.values().to_vec()),
            Fitted::Linear(m) => Some(m.params.values().to_vec()),
            Fitted::Independent { .. } => None,
        }
    }
}

fn fit_method(
    method: Method,
    rep: &SimReplicate,
    tuned: Option<&Tuned>,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Fitted> {
    let design = rep.train.design()?;
    let boost_cfg = |t: &Tuned| BoostConfig {
        num_iterations: t.iterations,
        learning_rate: t.learning_rate,
        tree: t.tree.clone(),
        optimizer: config.optimizer.clone(),
        ..BoostConfig::default()
    };
    let need = || tuned.ok_or_else(|| Error::invalid("boosting method without tuning"));
    Ok(match method {
        Method::Gpboost | Method::GpbFixLr => {
            Fitted::Boost(Box::new(gpboost_fit(&rep.train.y, &rep.train.x, &design, &boost_cfg(need()?))?))
        }
        Method::GpboostOos => Fitted::Boost(Box::new(gpboostoos_fit(
            &rep.train.y,
            &rep.train.x,
            &design,
            &boost_cfg(need()?),
            config.oos_folds,
            seed,
        )?)),
        Method::LsBoost => {
            let t = need()?;
            let levels = level_index(&rep.train, config.lsboost_min_level_count);
            let x = augmented(&rep.train, &levels)?;
            let cfg = L2BoostConfig {
                num_iterations: t.iterations,
                learning_rate: t.learning_rate,
                tree: t.tree.clone(),
            };
            let (ensemble, _) = l2_boost_fit(&rep.train.y, &x, &cfg, &[])?;
            let fitted = ensemble.predict(&x)?;
            let sigma2 = rep.train.y.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / rep.train.len() as f64;
            Fitted::Independent {
                ensemble,
                levels,
                sigma2: sigma2.max(1e-12),
            }
        }
        Method::Linear => Fitted::Linear(Box::new(fit_linear_mixed(
            &rep.train.y,
            &rep.train.x,
            &design,
            None,
            &config.optimizer,
        )?)),
    })
}

fn score_sums(fitted: &Fitted, data: &SimData, sets: &[Vec<usize>], out: &mut Vec<(f64, f64, f64)>) -> Result<()> {
    for rows in sets {
        let sub = data.select(rows);
        let d = fitted.predict(&sub, false, true)?;
        let (m, v) = predict_sum(&d, None)?;
        out.push((sub.y.iter().sum(), m, v));
    }
    Ok(())
}

fn evaluate(fitted: &Fitted, rep: &SimReplicate) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    for (name, data) in [("", &rep.test), ("_ext", &rep.test_ext)] {
        let d = fitted.predict(data, false, false)?;
        m.insert(format!("rmse{name}"), rmse(&d.mean, &data.y)?);
        m.insert(format!("crps{name}"), mean_crps(&data.y, &d.mean, &d.variances())?);
    }
    let mut sums = Vec::new();
    score_sums(fitted, &rep.test, &rep.sums, &mut sums)?;
    score_sums(fitted, &rep.test_ext, &rep.sums_ext, &mut sums)?;
    if !sums.is_empty() {
        let truth: Vec<f64> = sums.iter().map(|s| s.0).collect();
        let pred: Vec<f64> = sums.iter().map(|s| s.1).collect();
        m.insert("rmse_sum".into(), rmse(&pred, &truth)?);
        let mut c = 0.0;
        for (t, mu, v) in &sums {
            c += crps_gaussian(*t, *mu, v.sqrt())?;
        }
        m.insert("crps_sum".into(), c / sums.len() as f64);
    }
    if let Some(f) = fitted.mean_function(&rep.test.x) {
        let f = f?;
        m.insert("rmse_f".into(), rmse(&f, &rep.test.f)?);
        let latent = fitted.predict(&rep.test, true, false)?;
        let b: Vec<f64> = latent.mean.iter().zip(&f).map(|(a, c)| a - c).collect();
        m.insert("rmse_b".into(), rmse(&b, &rep.test.effect)?);
    }
    Ok(m)
}

/// Summary of one metric for one method over the replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    /// Paired t-test against the reference method (GPBoost).
    pub p_value: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub summaries: Vec<MetricSummary>,
    /// RMSE of each covariance parameter estimate: (method, parameter, RMSE).
    pub param_rmse: Vec<(String, String, f64)>,
    pub tuned: Vec<(String, Tuned)>,
    pub results: Vec<ReplicateResult>,
    pub methods: Vec<String>,
}

const METRIC_ORDER: [&str; 9] = [
    "rmse", "crps", "rmse_ext", "crps_ext", "rmse_sum", "crps_sum", "rmse_f", "rmse_b", "time",
];

impl ExperimentReport {
    pub fn summary(&self, method: &str, metric: &str) -> Option<&MetricSummary> {
        self.summaries.iter().find(|s| s.method == method && s.metric == metric)
    }

    pub fn param_rmse(&self, method: &str, param: &str) -> Option<f64> {
        self.param_rmse
            .iter()
            .find(|(m, p, _)| m == method && p == param)
            .map(|t| t.2)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,metric,mean,sd,p_value,count\n");
        for r in &self.summaries {
            let p = r.p_value.map_or(String::new(), |p| format!("{p:e}"));
            let _ = writeln!(s, "{},{},{},{},{},{}", r.method, r.metric, r.mean, r.sd, p, r.count);
        }
        for (m, p, v) in &self.param_rmse {
            let _ = writeln!(s, "{m},{p},{v},,,");
        }
        s
    }

    /// Methods as columns; mean, (sd) and [p-value] per metric.
    pub fn to_text(&self) -> String {
        let width = 14;
        let mut s = format!("{:<10}", "");
        for m in &self.methods {
            let _ = write!(s, "{m:>width$}");
        }
        s.push('\n');
        for metric in METRIC_ORDER {
            if !self.summaries.iter().any(|r| r.metric == metric) {
                continue;
            }
            let mut means = format!("{metric:<10}");
            let mut sds = format!("{:<10}", "  (sd)");
            let mut ps = format!("{:<10}", "  [p]");
            for m in &self.methods {
                match self.summary(m, metric) {
                    Some(r) => {
                        let _ = write!(means, "{:>width$.4}", r.mean);
                        let _ = write!(sds, "{:>width$}", format!("({:.4})", r.sd));
                        let p = r.p_value.map_or(String::new(), |p| format!("[{p:.3e}]"));
                        let _ = write!(ps, "{p:>width$}");
                    }
                    None => {
                        means.push_str(&" ".repeat(width));
                        sds.push_str(&" ".repeat(width));
                        ps.push_str(&" ".repeat(width));
                    }
                }
            }
            let _ = writeln!(s, "{means}\n{sds}\n{ps}");
        }
        let params: Vec<&String> = {
            let mut v: Vec<&String> = self.param_rmse.iter().map(|t| &t.1).collect();
            v.dedup();
            let mut seen = Vec::new();
            for p in v {
                if !seen.contains(&p) {
                    seen.push(p);
                }
            }
            seen
        };
        for p in params {
            let mut line = format!("{p:<10}");
            for m in &self.methods {
                match self.param_rmse(m, p) {
                    Some(v) => {
                        let _ = write!(line, "{v:>width$.4}");
                    }
                    None => line.push_str(&" ".repeat(width)),
                }
            }
            let _ = writeln!(s, "{line}");
        }
        s
    }
}

/// Runs every method on `replicates` simulated data sets.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let spatial = config.is_spatial();
    let mut tuned: BTreeMap<Method, Tuned> = BTreeMap::new();
    for &m in &config.methods {
        let key = match m {
            Method::GpboostOos => Method::Gpboost,
            other => other,
        };
        if key != Method::Linear && !tuned.contains_key(&key) {
            let t = tune(key, config)?;
            log::info!("tuned {}: {:?}", key.label(spatial), t);
            tuned.insert(key, t);
        }
    }
    let per_rep: Vec<Vec<ReplicateResult>> = par::map_range(config.replicates, |r| {
        let rep = simulate(&config.replicate_design(r));
        config
            .methods
            .iter()
            .map(|&method| {
                let key = if method == Method::GpboostOos {
                    Method::Gpboost
                } else {
                    method
                };
                let outcome = rep.as_ref().map_err(Clone::clone).and_then(|rep| {
                    let start = Instant::now();
                    let fitted = fit_method(method, rep, tuned.get(&key), config, r as u64)?;
                    let secs = start.elapsed().as_secs_f64();
                    let mut metrics = evaluate(&fitted, rep)?;
                    metrics.insert("time".into(), secs);
                    Ok((metrics, fitted.params()))
                });
                match outcome {
                    Ok((metrics, params)) => ReplicateResult {
                        method,
                        replicate: r,
                        metrics,
                        params,
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("{} failed on replicate {r}: {e}", method.label(spatial));
                        ReplicateResult {
                            method,
                            replicate: r,
                            metrics: BTreeMap::new(),
                            params: None,
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    let results: Vec<ReplicateResult> = per_rep.into_iter().flatten().collect();
    Ok(summarize(config, results, tuned))
}

fn summarize(config: &ExperimentConfig, results: Vec<ReplicateResult>, tuned: BTreeMap<Method, Tuned>) -> ExperimentReport {
    let spatial = config.is_spatial();
    let reference = [Method::Gpboost, Method::GpbFixLr]
        .into_iter()
        .find(|m| config.methods.contains(m));
    let metric_of = |method: Method, metric: &str| -> BTreeMap<usize, f64> {
        results
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.metrics.get(metric).map(|v| (r.replicate, *v)))
            .collect()
    };
    let mut summaries = Vec::new();
    for &method in &config.methods {
        for metric in METRIC_ORDER {
            let vals = metric_of(method, metric);
            if vals.is_empty() {
                continue;
            }
            let v: Vec<f64> = vals.values().copied().collect();
            let p_value = match reference {
                Some(rm) if rm != method && metric != "time" => {
                    let base = metric_of(rm, metric);
                    let (a, b): (Vec<f64>, Vec<f64>) = vals
                        .iter()
                        .filter_map(|(r, v)| base.get(r).map(|b| (*v, *b)))
                        .unzip();
                    paired_t_test(&a, &b).ok().map(|t| t.p_value)
                }
                _ => None,
            };
            summaries.push(MetricSummary {
                method: method.label(spatial).into(),
                metric: metric.into(),
                mean: mean(&v),
                sd: sample_sd(&v),
                p_value,
                count: v.len(),
            });
        }
    }
    let names = match simulate_names(config) {
        Some(n) => n,
        None => Vec::new(),
    };
    let truth = config.design.true_params();
    let mut param_rmse = Vec::new();
    for &method in &config.methods {
        let est: Vec<&Vec<f64>> = results
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.params.as_ref())
            .collect();
        if est.is_empty() {
            continue;
        }
        for (k, name) in names.iter().enumerate() {
            let mse = est.iter().map(|p| (p[k] - truth[k]).powi(2)).sum::<f64>() / est.len() as f64;
            param_rmse.push((method.label(spatial).to_string(), name.clone(), mse.sqrt()));
        }
    }
    ExperimentReport {
        summaries,
        param_rmse,
        tuned: tuned
            .into_iter()
            .map(|(m, t)| (m.label(spatial).to_string(), t))
            .collect(),
        results,
        methods: config.methods.iter().map(|m| m.label(spatial).to_string()).collect(),
    }
}

fn simulate_names(config: &ExperimentConfig) -> Option<Vec<String>> {
    let data = match &config.design.effect {
        EffectSpec::Grouped { .. } => ComponentData::Grouped {
            labels: vec!["a".into(), "b".into()],
            covariate: None,
        },
        EffectSpec::SpatialGp { kernel, .. } => ComponentData::Gp {
            locations: crate::covmodel::Locations::new(2, vec![0.0, 0.0, 1.0, 1.0]).ok()?,
            kernel: *kernel,
            covariate: None,
        },
    };
    let design = RandomEffectsDesign::new(2, vec![data]).ok()?;
    Some(design.param_names())
}
