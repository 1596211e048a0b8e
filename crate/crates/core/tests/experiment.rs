use gpboost_core::experiment::{run_experiment, tune, ExperimentConfig, Method, TuningGrid};
use gpboost_core::likelihood::OptimizerConfig;
use gpboost_core::sim::{EffectSpec, MeanFunction, SimDesign};
use gpboost_core::Kernel;

fn small_grouped() -> ExperimentConfig {
    ExperimentConfig {
        design: SimDesign {
            effect: EffectSpec::Grouped { n: 300, groups: 30 },
            ..SimDesign::grouped(MeanFunction::Friedman3, 9)
        },
        replicates: 3,
        tuning_replicates: 1,
        grid: TuningGrid {
            max_iterations: 25,
            ..TuningGrid::fixed_lr()
        },
        tuning_patience: Some(10),
        lsboost_min_level_count: 5,
        ..ExperimentConfig::default()
    }
}

#[test]
fn grouped_report_is_complete() {
    let cfg = small_grouped();
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.methods, ["GPBoost", "GPBoostOOS", "GPBFixLR", "LSBoost", "LinearME"]);
    assert!(report.results.iter().all(|r| r.error.is_none()), "{:?}", report.results);
    for m in &report.methods {
        for metric in ["rmse", "crps", "rmse_ext", "crps_ext", "rmse_sum", "crps_sum", "time"] {
            let s = report.summary(m, metric).unwrap_or_else(|| panic!("{m} {metric}"));
            assert_eq!(s.count, 3);
            assert!(s.mean.is_finite() && s.sd >= 0.0);
            assert_eq!(s.p_value.is_some(), m != "GPBoost" && metric != "time");
        }
    }
    // no mean function or random effects for LSBoost
    assert!(report.summary("LSBoost", "rmse_f").is_none());
    assert!(report.summary("LinearME", "rmse_b").is_some());
    assert!(report.param_rmse("GPBoost", "sigma2").is_some());
    assert!(report.param_rmse("LSBoost", "sigma2").is_none());
    let csv = report.to_csv();
    assert!(csv.starts_with("method,metric,mean,sd,p_value,count\n"));
    assert!(csv.contains("GPBoostOOS,rmse,"));
    let text = report.to_text();
    assert!(text.contains("LinearME") && text.contains("rmse_ext") && text.contains("sigma2_1"));
    // GPBoostOOS reuses the GPBoost tuning
    assert_eq!(report.tuned.len(), 3);
}

#[test]
fn experiment_is_deterministic() {
    let cfg = ExperimentConfig {
        methods: vec![Method::Gpboost, Method::LsBoost],
        replicates: 2,
        ..small_grouped()
    };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let strip = |r: &gpboost_core::experiment::ExperimentReport| {
        r.summaries
            .iter()
            .filter(|s| s.metric != "time")
            .map(|s| (s.method.clone(), s.metric.clone(), s.mean.to_bits(), s.sd.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.tuned, b.tuned);
}

#[test]
fn tuning_respects_the_grid() {
    let cfg = ExperimentConfig {
        grid: TuningGrid {
            learning_rates: vec![0.05, 0.2],
            max_depths: vec![1, 3],
            min_samples_leaf: vec![5],
            max_iterations: 15,
        },
        ..small_grouped()
    };
    for method in [Method::Gpboost, Method::LsBoost] {
        let t = tune(method, &cfg).unwrap();
        assert!([0.05, 0.2].contains(&t.learning_rate));
        assert!([1, 3].contains(&t.tree.max_depth));
        assert!((1..=15).contains(&t.iterations));
        assert!(t.score.is_finite());
    }
    // the fixed-rate variant ignores the grid except for the iteration cap
    let t = tune(Method::GpbFixLr, &cfg).unwrap();
    assert_eq!((t.learning_rate, t.tree.max_depth, t.tree.min_samples_leaf), (0.1, 5, 10));
}

#[test]
fn spatial_experiment_runs() {
    let cfg = ExperimentConfig {
        design: SimDesign {
            effect: EffectSpec::SpatialGp {
                n: 80,
                kernel: Kernel::Exponential,
                range: 0.2,
            },
            ..SimDesign::spatial(MeanFunction::Friedman3, 4)
        },
        methods: vec![Method::Gpboost, Method::LsBoost, Method::Linear],
        replicates: 2,
        tuning_replicates: 1,
        grid: TuningGrid {
            max_iterations: 10,
            ..TuningGrid::fixed_lr()
        },
        optimizer: OptimizerConfig::fisher_scoring(),
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.methods, ["GPBoost", "LSBoost", "LinearGP"]);
    assert!(report.param_rmse("LinearGP", "rho_1").is_some());
    assert!(report.summary("LinearGP", "crps_sum").unwrap().mean > 0.0);
}

#[test]
fn invalid_configs_rejected() {
    let base = small_grouped();
    for bad in [
        ExperimentConfig { replicates: 0, ..base.clone() },
        ExperimentConfig { methods: vec![], ..base.clone() },
        ExperimentConfig { tuning_replicates: 0, ..base.clone() },
        ExperimentConfig { oos_folds: 1, ..base.clone() },
        ExperimentConfig { tuning_patience: Some(0), ..base.clone() },
        ExperimentConfig {
            grid: TuningGrid { learning_rates: vec![], ..TuningGrid::fixed_lr() },
            ..base.clone()
        },
    ] {
        assert!(run_experiment(&bad).is_err());
    }
    // the linear baseline alone needs no tuning data
    let lin = ExperimentConfig {
        methods: vec![Method::Linear],
        tuning_replicates: 0,
        replicates: 2,
        ..base
    };
    assert!(run_experiment(&lin).is_ok());
}

#[test]
fn config_serde_defaults_and_unknown_fields() {
    let cfg: ExperimentConfig = serde_json::from_str(r#"{"replicates": 4}"#).unwrap();
    assert_eq!(cfg.replicates, 4);
    assert_eq!(cfg.oos_folds, 4);
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"replicate": 4}"#).is_err());
    let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
}
