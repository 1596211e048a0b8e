mod common;

use common::*;
use gpboost_cli::commands::{predict_table, train_table, PredictOptions};
use gpboost_cli::config::RunConfig;
use gpboost_cli::data::Table;
use gpboost_cli::model::ModelFile;
use gpboost_core::boost::gpboost_fit;
use gpboost_core::covmodel::{ComponentData, RandomEffectsDesign};
use gpboost_core::predict::{predict_sum, CovarianceMode, PredictConfig};
use gpboost_core::tree::Features;

fn train(dir: &std::path::Path, cfg: &std::path::Path, data: &std::path::Path, name: &str) -> std::path::PathBuf {
    let model = dir.join(name);
    run(
        &["train", "--config", s(cfg), "--data", s(&data.join("r0_train.csv")), "--model", s(&model)],
        0,
    );
    model
}

#[test]
fn simulate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, da) = setup(a.path(), GROUPED_CONFIG);
    let (_, db) = setup(b.path(), GROUPED_CONFIG);
    for f in ["r0_train.csv", "r0_test.csv", "r0_test_ext.csv", "r0_sums.csv"] {
        assert_eq!(std::fs::read(da.join(f)).unwrap(), std::fs::read(db.join(f)).unwrap(), "{f}");
    }
    let (h, rows) = read_csv(&da.join("r0_train.csv"));
    assert_eq!(h, ["x1", "x2", "x3", "x4", "group", "f", "effect", "y"]);
    assert_eq!(rows.len(), 200);
}

#[test]
fn train_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path(), GROUPED_CONFIG);
    let log = dir.path().join("log.csv");
    let m1 = dir.path().join("m1.json");
    let out = run(
        &[
            "train", "--config", s(&cfg), "--data", s(&data.join("r0_train.csv")), "--model", s(&m1), "--log", s(&log),
        ],
        0,
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("iteration 15"), "{stderr}");
    let m2 = train(dir.path(), &cfg, &data, "m2.json");
    let bytes = std::fs::read(&m1).unwrap();
    assert_eq!(bytes, std::fs::read(&m2).unwrap());

    // load -> save is byte-identical
    let loaded = ModelFile::load(&m1).unwrap();
    assert_eq!(loaded.to_json().unwrap().as_bytes(), bytes.as_slice());
    assert_eq!(loaded.provenance.seed, Some(7));

    let (h, rows) = read_csv(&log);
    assert_eq!(h, ["iteration", "pre_step_nll", "train_nll", "sigma2", "sigma2_1"]);
    assert_eq!(rows.len(), 15);

    // saved model reproduces in-sample predictions of the in-memory model
    let (cfg_parsed, text) = RunConfig::load(&cfg).unwrap();
    let table = Table::read(&data.join("r0_train.csv")).unwrap();
    let fresh = train_table(&cfg_parsed, &table, &text, &loaded.provenance.data_sha256).unwrap();
    assert_eq!(fresh.to_json().unwrap().as_bytes(), bytes.as_slice());
    let opts = PredictOptions::default();
    let a = predict_table(&fresh, &table, &opts).unwrap();
    let b = predict_table(&loaded, &table, &opts).unwrap();
    assert_eq!(a.dist.mean, b.dist.mean);
    assert_eq!(a.dist.variances(), b.dist.variances());
}

#[test]
fn cli_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path(), GROUPED_CONFIG);
    let model = train(dir.path(), &cfg, &data, "m.json");
    let test20 = dir.path().join("test20.csv");
    head(&data.join("r0_test.csv"), &test20, 20);
    let pred = dir.path().join("pred.csv");
    run(
        &["predict", "--model", s(&model), "--data", s(&test20), "--out", s(&pred), "--sum", "--quantile", "0.5"],
        0,
    );

    // the same fit through the library alone
    let (rc, _) = RunConfig::load(&cfg).unwrap();
    let train_t = Table::read(&data.join("r0_train.csv")).unwrap();
    let test_t = Table::read(&test20).unwrap();
    let feats = |t: &Table| {
        let cols = ["x1", "x2", "x3", "x4"].iter().map(|c| t.numeric(c).unwrap()).collect();
        Features::from_columns(t.n(), cols).unwrap()
    };
    let groups = |t: &Table| ComponentData::Grouped {
        labels: t.column("group").unwrap().to_vec(),
        covariate: None,
    };
    let y = train_t.numeric("y").unwrap();
    let design = RandomEffectsDesign::new(train_t.n(), vec![groups(&train_t)]).unwrap();
    let fit = gpboost_fit(&y, &feats(&train_t), &design, &rc.boost).unwrap();
    let dist = fit
        .predict(
            &feats(&test_t),
            &[groups(&test_t)],
            &PredictConfig {
                covariance: CovarianceMode::Full,
                ..PredictConfig::default()
            },
        )
        .unwrap();
    let (sum_mean, sum_var) = predict_sum(&dist, None).unwrap();

    let rows = read_csv(&pred).1;
    assert_eq!(rows.len(), 21);
    for (i, r) in rows[..20].iter().enumerate() {
        assert_eq!(r[1].parse::<f64>().unwrap(), dist.mean[i]);
        assert_eq!(r[2].parse::<f64>().unwrap(), dist.variances()[i]);
        // median of a Gaussian is its mean
        assert_eq!(r[3], r[1]);
    }
    assert_eq!(rows[20][0], "sum");
    assert_eq!(rows[20][1].parse::<f64>().unwrap(), sum_mean);
    assert_eq!(rows[20][2].parse::<f64>().unwrap(), sum_var);
}

#[test]
fn latent_variance_is_bounded_by_prior() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path(), GROUPED_CONFIG);
    let model = train(dir.path(), &cfg, &data, "m.json");
    let pred = dir.path().join("pred.csv");
    let train_csv = data.join("r0_train.csv");
    run(&["predict", "--model", s(&model), "--data", s(&train_csv), "--out", s(&pred), "--latent"], 0);
    let m = ModelFile::load(&model).unwrap();
    let prior = m.model.params.values()[1];
    for v in column(&pred, "variance") {
        let v: f64 = v.parse().unwrap();
        assert!((0.0..=prior).contains(&v), "{v} vs {prior}");
    }
}

#[test]
fn weighted_sum_uses_weight_column() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path(), GROUPED_CONFIG);
    let model = train(dir.path(), &cfg, &data, "m.json");
    let test = data.join("r0_test.csv");
    let (pu, pw) = (dir.path().join("u.csv"), dir.path().join("w.csv"));
    run(&["predict", "--model", s(&model), "--data", s(&test), "--out", s(&pu), "--sum"], 0);
    // the simulated `f` column is a convenient non-constant weight
    run(&["predict", "--model", s(&model), "--data", s(&test), "--out", s(&pw), "--sum", "--weights", "f"], 0);
    let last = |p: &std::path::Path| read_csv(p).1.pop().unwrap();
    assert_ne!(last(&pu)[1], last(&pw)[1]);
    let m = ModelFile::load(&model).unwrap();
    let t = Table::read(&test).unwrap();
    let w = t.numeric("f").unwrap();
    let p = predict_table(&m, &t, &PredictOptions { sum: true, ..Default::default() }).unwrap();
    let (mean, var) = predict_sum(&p.dist, Some(&w)).unwrap();
    assert_eq!(last(&pw)[1].parse::<f64>().unwrap(), mean);
    assert_eq!(last(&pw)[2].parse::<f64>().unwrap(), var);
}

#[test]
fn schema_mismatch_lists_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path(), GROUPED_CONFIG);
    let model = train(dir.path(), &cfg, &data, "m.json");
    let (h, rows) = read_csv(&data.join("r0_test.csv"));
    let keep: Vec<usize> = (0..h.len()).filter(|&j| h[j] != "x2" && h[j] != "group").collect();
    let bad = dir.path().join("bad.csv");
    let mut w = csv::Writer::from_path(&bad).unwrap();
    w.write_record(keep.iter().map(|&j| &h[j])).unwrap();
    for r in &rows {
        w.write_record(keep.iter().map(|&j| &r[j])).unwrap();
    }
    w.flush().unwrap();
    let out = run(&["predict", "--model", s(&model), "--data", s(&bad), "--out", s(&dir.path().join("p.csv"))], 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("schema mismatch") && stderr.contains("x2") && stderr.contains("group"), "{stderr}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path(), GROUPED_CONFIG);
    // usage: bad flags, unknown config keys, bad quantile
    run(&["train", "--bogus"], 2);
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[boost]\nlearnig_rate = 0.1\n").unwrap();
    let out = run(
        &["train", "--config", s(&bad_cfg), "--data", s(&data.join("r0_train.csv")), "--model", "m.json"],
        2,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnig_rate"));
    let model = train(dir.path(), &cfg, &data, "m.json");
    let test = data.join("r0_test.csv");
    let p = dir.path().join("p.csv");
    run(&["predict", "--model", s(&model), "--data", s(&test), "--out", s(&p), "--quantile", "1.5"], 2);
    // data: NaN response, missing file, non-numeric predictor
    let text = std::fs::read_to_string(data.join("r0_train.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[3].split(',').map(String::from).collect();
    *cells.last_mut().unwrap() = "NaN".into();
    lines[3] = cells.join(",");
    let nan = dir.path().join("nan.csv");
    std::fs::write(&nan, lines.join("\n")).unwrap();
    let out = run(&["train", "--config", s(&cfg), "--data", s(&nan), "--model", s(&dir.path().join("x.json"))], 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("response"));
    run(&["predict", "--model", s(&model), "--data", "/nonexistent.csv", "--out", s(&p)], 3);
    cells[0] = "abc".into();
    lines[3] = cells.join(",");
    std::fs::write(&nan, lines.join("\n")).unwrap();
    run(&["train", "--config", s(&cfg), "--data", s(&nan), "--model", s(&dir.path().join("x.json"))], 3);
    // numerical failures from the core map to 4
    let e: gpboost_cli::CliError = gpboost_core::Error::NotPositiveDefinite { params: vec![1.0] }.into();
    assert_eq!(e.exit_code(), 4);
}

#[test]
fn vecchia_path_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path(), SPATIAL_CONFIG);
    let model = dir.path().join("m.json");
    let out = run(
        &["train", "--config", s(&cfg), "--data", s(&data.join("r0_train.csv")), "--model", s(&model)],
        0,
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Vecchia approximation engaged: 30 neighbors"), "{stderr}");
    let test = data.join("r0_test.csv");
    for mode in ["observed-first", "prediction-first", "observed-only"] {
        let p = dir.path().join(format!("{mode}.csv"));
        run(
            &["predict", "--model", s(&model), "--data", s(&test), "--out", s(&p), "--vecchia-pred-mode", mode],
            0,
        );
        assert!(column(&p, "variance").iter().all(|v| v.parse::<f64>().unwrap() > 0.0));
    }
}

#[test]
fn categorical_predictors_are_dummy_coded() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("d.csv");
    let mut text = String::from("y,x,colour,g\n");
    for i in 0..40 {
        let c = ["red", "green", "blue"][i % 3];
        let y = i as f64 * 0.1 + if c == "red" { 2.0 } else { 0.0 } + ((i * 7) % 5) as f64 * 0.05;
        text.push_str(&format!("{y},{},{c},g{}\n", i % 11, i % 4));
    }
    std::fs::write(&csv_path, text).unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[data]\ncategorical = [\"colour\"]\n\n[[random_effects]]\ntype = \"grouped\"\ncolumn = \"g\"\n\n[boost]\nnum_iterations = 5\n\n[boost.tree]\nmin_samples_leaf = 2\n",
    )
    .unwrap();
    let model = dir.path().join("m.json");
    run(&["train", "--config", s(&cfg), "--data", s(&csv_path), "--model", s(&model)], 0);
    let m = ModelFile::load(&model).unwrap();
    assert_eq!(m.schema.feature_names(), ["x", "colour=blue", "colour=green", "colour=red"]);
    let p = dir.path().join("p.csv");
    run(&["predict", "--model", s(&model), "--data", s(&csv_path), "--out", s(&p)], 0);
    assert_eq!(read_csv(&p).1.len(), 40);
}

#[test]
fn evaluate_and_tune_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_text = format!(
        "{GROUPED_CONFIG}\n[experiment.grid]\nlearning_rates = [0.1, 0.05]\nmax_depths = [2]\nmin_samples_leaf = [10]\nmax_iterations = 20\n"
    )
    .replace("replicates = 1\n", "replicates = 2\ntuning_replicates = 1\nmethods = [\"gpboost\", \"ls_boost\", \"linear\"]\nlsboost_min_level_count = 5\n");
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, cfg_text).unwrap();
    let (e1, e2) = (dir.path().join("e1.csv"), dir.path().join("e2.csv"));
    let o1 = run(&["evaluate", "--config", s(&cfg), "--out", s(&e1)], 0);
    let o2 = run(&["evaluate", "--config", s(&cfg), "--out", s(&e2)], 0);
    assert_eq!(std::fs::read(&e1).unwrap(), std::fs::read(&e2).unwrap());
    assert_eq!(o1.stdout, o2.stdout);
    let methods = column(&e1, "method");
    for m in ["GPBoost", "LSBoost", "LinearME"] {
        assert!(methods.iter().any(|x| x == m), "{m}");
    }
    assert!(!column(&e1, "metric").iter().any(|x| x == "time"));

    let (grid, best) = (dir.path().join("grid.csv"), dir.path().join("best.toml"));
    run(&["tune", "--config", s(&cfg), "--out", s(&grid), "--best", s(&best)], 0);
    let (h, rows) = read_csv(&grid);
    assert_eq!(h[0], "method");
    // two boosting methods, two grid points each
    assert_eq!(rows.len(), 4);
    let tuned = RunConfig::load(&best).unwrap().0;
    let gp_rows: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == "Gpboost").collect();
    let winner = gp_rows
        .iter()
        .min_by(|a, b| a[5].parse::<f64>().unwrap().total_cmp(&b[5].parse::<f64>().unwrap()))
        .unwrap();
    assert_eq!(tuned.boost.learning_rate, winner[1].parse::<f64>().unwrap());
    assert_eq!(tuned.boost.num_iterations, winner[4].parse::<usize>().unwrap());
    assert_eq!(tuned.boost.tree.max_depth, 2);
    assert_eq!(tuned.data, RunConfig::load(&cfg).unwrap().0.data);

    // an invalid grid is a usage error
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[experiment.grid]\nlearning_rates = []\n").unwrap();
    run(&["tune", "--config", s(&bad), "--out", s(&grid), "--best", s(&best)], 2);
}

#[test]
fn thread_override_is_validated() {
    let out = bin().args(["simulate", "--config", "x", "--out-dir", "y"]).env("GPBOOST_NUM_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
