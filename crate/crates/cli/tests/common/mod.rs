#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const GROUPED_CONFIG: &str = r#"
seed = 7

[data]
response = "y"
predictors = ["x1", "x2", "x3", "x4"]

[[random_effects]]
type = "grouped"
column = "group"

[boost]
num_iterations = 15

[experiment]
replicates = 1

[experiment.design]
mean_fn = "friedman3"
sigma2 = 1.0
sigma2_effect = 1.0
seed = 0

[experiment.design.effect]
type = "grouped"
n = 200
groups = 20
"#;

pub const SPATIAL_CONFIG: &str = r#"
seed = 3

[data]
response = "y"
predictors = ["x1", "x2", "x3", "x4"]

[[random_effects]]
type = "gp"
coordinates = ["s1", "s2"]

[boost]
num_iterations = 5
boost_type = "hybrid"

[boost.vecchia]
num_neighbors = 30

[experiment]
replicates = 1

[experiment.design]
mean_fn = "friedman3"
sigma2 = 1.0
sigma2_effect = 1.0
seed = 0

[experiment.design.effect]
type = "spatial_gp"
n = 120
kernel = "exponential"
range = 0.1
"#;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gpboost"));
    c.env_remove("RUST_LOG");
    c
}

/// Runs the binary and returns its output; panics with stderr on an
/// unexpected exit code.
pub fn run(args: &[&str], expect: i32) -> Output {
    let out = bin().args(args).output().expect("spawn gpboost");
    assert_eq!(
        out.status.code(),
        Some(expect),
        "gpboost {args:?}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `config` into `dir` and simulates one replicate next to it.
/// Returns (config path, data directory).
pub fn setup(dir: &Path, config: &str) -> (PathBuf, PathBuf) {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    let data = dir.join("sim");
    run(&["simulate", "--config", s(&cfg), "--out-dir", s(&data)], 0);
    (cfg, data)
}

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (headers, rows)
}

pub fn column(path: &Path, name: &str) -> Vec<String> {
    let (h, rows) = read_csv(path);
    let j = h.iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.into_iter().map(|r| r[j].clone()).collect()
}

/// Copies the first `k` data rows of a CSV.
pub fn head(src: &Path, dst: &Path, k: usize) {
    let text = std::fs::read_to_string(src).unwrap();
    let lines: Vec<&str> = text.lines().take(k + 1).collect();
    std::fs::write(dst, lines.join("\n") + "\n").unwrap();
}
