//! Subcommand implementations. Each returns after writing its outputs; the
//! binary only maps errors to exit codes.

use std::path::{Path, PathBuf};

use gpboost_core::boost::gpboost_fit;
use gpboost_core::covmodel::{ComponentData, RandomEffectsDesign};
use gpboost_core::experiment::{run_experiment, tune_grid, Method, Tuned};
use gpboost_core::predict::{predict_quantile, predict_sum, CovarianceMode, PredictConfig, PredictiveDistribution};
use gpboost_core::sim::{simulate, SimData};
use gpboost_core::vecchia::VecchiaPredictionMode;

use crate::config::{sha256_hex, RunConfig};
use crate::data::{fmt_f64, Schema, Table};
use crate::error::CliError;
use crate::model::{ModelFile, Provenance};

pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub model: PathBuf,
    /// Optional per-iteration CSV log.
    pub log: Option<PathBuf>,
}

pub fn train(args: &TrainArgs) -> Result<ModelFile, CliError> {
    let (cfg, cfg_text) = RunConfig::load(&args.config)?;
    let bytes = std::fs::read(&args.data).map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.data.display())))?;
    let table = Table::from_reader(bytes.as_slice())?;
    let model = train_table(&cfg, &table, &cfg_text, &sha256_hex(&bytes))?;
    model.save(&args.model)?;
    if let Some(path) = &args.log {
        write_history(path, &model)?;
    }
    log::info!("model written to {}", args.model.display());
    Ok(model)
}

/// Fits the configured model to an in-memory table.
pub fn train_table(cfg: &RunConfig, table: &Table, cfg_text: &str, data_hash: &str) -> Result<ModelFile, CliError> {
    let schema = Schema::from_training(&cfg.data, &cfg.random_effects, table)?;
    let x = schema.features(table)?;
    let y = schema.response(table)?;
    let comps = schema.components(table)?;
    let design = if comps.is_empty() {
        RandomEffectsDesign::empty(table.n())?
    } else {
        RandomEffectsDesign::new(table.n(), comps)?
    };
    match (&cfg.boost.vecchia, design.single_gp()) {
        (Some(v), Some(_)) => log::info!(
            "Vecchia approximation engaged: {} neighbors, ordering {:?}",
            v.num_neighbors,
            v.ordering
        ),
        (Some(_), None) => log::warn!("vecchia settings ignored: the design is not a single Gaussian process"),
        _ => log::info!("exact covariance path ({} random-effect parameters)", design.num_params()),
    }
    log::info!(
        "training on {} rows, {} features ({}), boost type {:?}",
        table.n(),
        x.p(),
        schema.feature_names().join(", "),
        cfg.boost.boost_type
    );
    let fit = gpboost_fit(&y, &x, &design, &cfg.boost)?;
    let names = design.param_names();
    for h in &fit.history {
        let params: Vec<String> = names.iter().zip(&h.params).map(|(n, v)| format!("{n}={v:.6}")).collect();
        log::info!(
            "iteration {}: nll before step {:.6}, after {:.6}, {}",
            h.iteration,
            h.pre_step_nll,
            h.train_nll,
            params.join(" ")
        );
    }
    if cfg.boost.early_stopping.is_some() {
        log::info!(
            "early stopping chose {} iterations (validation curve of length {})",
            fit.iterations,
            fit.validation_curve.len()
        );
    }
    Ok(ModelFile::new(
        schema,
        Provenance {
            config_sha256: sha256_hex(cfg_text.as_bytes()),
            data_sha256: data_hash.to_string(),
            seed: cfg.seed,
        },
        fit,
    ))
}

fn write_history(path: &Path, model: &ModelFile) -> Result<(), CliError> {
    let names = model.model.design.param_names();
    let mut headers: Vec<String> = ["iteration", "pre_step_nll", "train_nll"].map(String::from).to_vec();
    headers.extend(names);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&headers)?;
    for h in &model.model.history {
        let mut rec = vec![h.iteration.to_string(), fmt_f64(h.pre_step_nll), fmt_f64(h.train_nll)];
        rec.extend(h.params.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct PredictOptions {
    pub latent: bool,
    /// Append one row with the mean and variance of the (weighted) sum.
    pub sum: bool,
    /// Column holding sum weights (unit weights when absent).
    pub weights: Option<String>,
    pub quantiles: Vec<f64>,
    pub vecchia_pred_mode: Option<VecchiaPredictionMode>,
}

/// Per-row predictions plus the optional aggregate.
pub struct Predictions {
    pub dist: PredictiveDistribution,
    pub quantiles: Vec<(f64, Vec<f64>)>,
    pub sum: Option<(f64, f64)>,
}

pub fn predict_table(model: &ModelFile, table: &Table, opts: &PredictOptions) -> Result<Predictions, CliError> {
    for &a in &opts.quantiles {
        if !(a > 0.0 && a < 1.0) {
            return Err(CliError::Usage(format!("quantile level {a} outside (0, 1)")));
        }
    }
    let x = model.schema.features(table)?;
    let query: Vec<ComponentData> = model.schema.components(table)?;
    let mut fitted = model.model.clone();
    if let (Some(mode), Some(v)) = (opts.vecchia_pred_mode, fitted.vecchia.as_mut()) {
        v.prediction_mode = mode;
    }
    let config = PredictConfig {
        latent: opts.latent,
        covariance: if opts.sum {
            CovarianceMode::Full
        } else {
            CovarianceMode::Diagonal
        },
        ..PredictConfig::default()
    };
    let dist = fitted.predict(&x, &query, &config)?;
    let quantiles = opts
        .quantiles
        .iter()
        .map(|&a| Ok((a, predict_quantile(&dist, a)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let sum = if opts.sum {
        let w = opts.weights.as_deref().map(|c| table.numeric(c)).transpose()?;
        Some(predict_sum(&dist, w.as_deref())?)
    } else {
        None
    };
    Ok(Predictions { dist, quantiles, sum })
}

pub fn write_predictions(path: &Path, p: &Predictions) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut headers = vec!["row".to_string(), "mean".into(), "variance".into()];
    headers.extend(p.quantiles.iter().map(|(a, _)| format!("q{a}")));
    w.write_record(&headers)?;
    let var = p.dist.variances();
    for i in 0..p.dist.mean.len() {
        let mut rec = vec![(i + 1).to_string(), fmt_f64(p.dist.mean[i]), fmt_f64(var[i])];
        rec.extend(p.quantiles.iter().map(|(_, q)| fmt_f64(q[i])));
        w.write_record(&rec)?;
    }
    if let Some((m, v)) = p.sum {
        let mut rec = vec!["sum".to_string(), fmt_f64(m), fmt_f64(v)];
        rec.extend(p.quantiles.iter().map(|_| String::new()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn predict(model: &Path, data: &Path, out: &Path, opts: &PredictOptions) -> Result<(), CliError> {
    let model = ModelFile::load(model)?;
    let table = Table::read(data)?;
    if opts.vecchia_pred_mode.is_some() && model.model.vecchia.is_none() {
        log::warn!("--vecchia-pred-mode ignored: the model was trained without the Vecchia approximation");
    }
    let p = predict_table(&model, &table, opts)?;
    write_predictions(out, &p)
}

fn write_sim_data(path: &Path, d: &SimData) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let p = d.x.p();
    let mut headers: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    match &d.re {
        ComponentData::Grouped { .. } => headers.push("group".into()),
        ComponentData::Gp { locations, .. } => headers.extend((1..=locations.dim()).map(|k| format!("s{k}"))),
    }
    headers.extend(["f", "effect", "y"].map(String::from));
    w.write_record(&headers)?;
    for i in 0..d.len() {
        let mut rec: Vec<String> = (0..p).map(|j| fmt_f64(d.x.get(i, j))).collect();
        match &d.re {
            ComponentData::Grouped { labels, .. } => rec.push(labels[i].clone()),
            ComponentData::Gp { locations, .. } => rec.extend(locations.point(i).iter().map(|v| fmt_f64(*v))),
        }
        rec.extend([d.f[i], d.effect[i], d.y[i]].map(fmt_f64));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `r{k}_train.csv`, `r{k}_test.csv`, `r{k}_test_ext.csv` and
/// `r{k}_sums.csv` (sum-set id, test set, 1-based row) per replicate.
pub fn simulate_to_dir(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    cfg.experiment.design.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if cfg.experiment.replicates == 0 {
        return Err(CliError::Usage("experiment.replicates must be at least 1".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for r in 0..cfg.experiment.replicates {
        let rep = simulate(&cfg.experiment.replicate_design(r))?;
        for (name, d) in [("train", &rep.train), ("test", &rep.test), ("test_ext", &rep.test_ext)] {
            let path = dir.join(format!("r{r}_{name}.csv"));
            write_sim_data(&path, d)?;
            written.push(path);
        }
        let path = dir.join(format!("r{r}_sums.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["set", "data", "row"])?;
        for (kind, sets) in [("test", &rep.sums), ("test_ext", &rep.sums_ext)] {
            for (s, rows) in sets.iter().enumerate() {
                for &i in rows {
                    w.write_record([s.to_string(), kind.to_string(), (i + 1).to_string()])?;
                }
            }
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Runs the simulation study; writes the metric table as CSV and returns the
/// text rendering. Wall-clock rows are dropped unless `timings` is set, so
/// that reruns are byte-identical.
pub fn evaluate(cfg: &RunConfig, out: &Path, timings: bool) -> Result<String, CliError> {
    cfg.experiment.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut report = run_experiment(&cfg.experiment)?;
    if !timings {
        report.summaries.retain(|s| s.metric != "time");
    }
    for r in report.results.iter().filter(|r| r.error.is_some()) {
        log::warn!("{:?} failed on replicate {}: {}", r.method, r.replicate, r.error.as_deref().unwrap_or(""));
    }
    std::fs::write(out, report.to_csv())?;
    Ok(report.to_text())
}

/// Grid search for every boosting method in the experiment. Writes one CSV row
/// per grid point and a reusable config with the best GPBoost (or first tuned
/// method's) values.
pub fn tune(cfg: &RunConfig, grid_out: &Path, best_out: &Path) -> Result<Vec<(Method, Tuned)>, CliError> {
    cfg.experiment.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut methods: Vec<Method> = Vec::new();
    for m in &cfg.experiment.methods {
        let key = if *m == Method::GpboostOos { Method::Gpboost } else { *m };
        if key != Method::Linear && !methods.contains(&key) {
            methods.push(key);
        }
    }
    if methods.is_empty() {
        return Err(CliError::Usage("no boosting method to tune".into()));
    }
    let mut w = csv::Writer::from_path(grid_out)?;
    w.write_record(["method", "learning_rate", "max_depth", "min_samples_leaf", "iterations", "score"])?;
    let mut best: Vec<(Method, Tuned)> = Vec::new();
    for m in methods {
        let points = tune_grid(m, &cfg.experiment)?;
        for t in &points {
            w.write_record([
                format!("{m:?}"),
                fmt_f64(t.learning_rate),
                t.tree.max_depth.to_string(),
                t.tree.min_samples_leaf.to_string(),
                t.iterations.to_string(),
                fmt_f64(t.score),
            ])?;
        }
        if let Some(b) = points.into_iter().reduce(|a, t| if t.score < a.score { t } else { a }) {
            log::info!("{m:?}: best {b:?}");
            best.push((m, b));
        }
    }
    w.flush()?;
    let chosen = best
        .iter()
        .find(|(m, _)| *m == Method::Gpboost)
        .or_else(|| best.first())
        .ok_or_else(|| CliError::Numerical("no grid point produced a finite score".into()))?;
    let mut out_cfg = cfg.clone();
    out_cfg.boost.learning_rate = chosen.1.learning_rate;
    out_cfg.boost.tree = chosen.1.tree.clone();
    out_cfg.boost.num_iterations = chosen.1.iterations;
    std::fs::write(best_out, out_cfg.to_toml()?)?;
    Ok(best)
}
