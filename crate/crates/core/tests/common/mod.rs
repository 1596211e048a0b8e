#![allow(dead_code)]

use gpboost_core::covmodel::{ComponentData, CovarianceParameters, Kernel, Locations, ParamRole, RandomEffectsDesign};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<String> {
    (0..n).map(|_| format!("g{}", rng.random_range(0..m))).collect()
}

/// One or two grouped components, optionally a random slope.
pub fn grouped_design(rng: &mut ChaCha8Rng, n: usize, m: usize, two: bool, slope: bool) -> RandomEffectsDesign {
    let mut comps = vec![ComponentData::Grouped {
        labels: labels(rng, n, m),
        covariate: None,
    }];
    if two {
        comps.push(ComponentData::Grouped {
            labels: labels(rng, n, (m / 2).max(1)),
            covariate: None,
        });
    }
    if slope {
        comps.push(ComponentData::Grouped {
            labels: comps[0].clone_labels(),
            covariate: Some((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()),
        });
    }
    RandomEffectsDesign::new(n, comps).unwrap()
}

trait CloneLabels {
    fn clone_labels(&self) -> Vec<String>;
}

impl CloneLabels for ComponentData {
    fn clone_labels(&self) -> Vec<String> {
        match self {
            ComponentData::Grouped { labels, .. } => labels.clone(),
            _ => unreachable!(),
        }
    }
}

pub fn uniform_locations(rng: &mut ChaCha8Rng, n: usize) -> Locations {
    Locations::new(2, (0..2 * n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn gp_design(rng: &mut ChaCha8Rng, n: usize, kernel: Kernel) -> RandomEffectsDesign {
    RandomEffectsDesign::new(
        n,
        vec![ComponentData::Gp {
            locations: uniform_locations(rng, n),
            kernel,
            covariate: None,
        }],
    )
    .unwrap()
}

/// GP plus a grouped intercept, exercising the dense path.
pub fn mixed_design(rng: &mut ChaCha8Rng, n: usize) -> RandomEffectsDesign {
    RandomEffectsDesign::new(
        n,
        vec![
            ComponentData::Gp {
                locations: uniform_locations(rng, n),
                kernel: Kernel::Exponential,
                covariate: None,
            },
            ComponentData::Grouped {
                labels: labels(rng, n, 4),
                covariate: None,
            },
        ],
    )
    .unwrap()
}

pub fn random_params(rng: &mut ChaCha8Rng, design: &RandomEffectsDesign) -> CovarianceParameters {
    let v = design
        .param_roles()
        .iter()
        .map(|r| match r {
            ParamRole::Range { .. } => rng.random_range(0.05..0.4),
            _ => rng.random_range(0.3..2.0),
        })
        .collect();
    CovarianceParameters::new(v).unwrap()
}

/// Textbook multivariate normal NLL from a dense covariance.
pub fn dense_nll(psi: &DMatrix<f64>, r: &[f64]) -> f64 {
    let n = r.len();
    let chol = psi.clone().cholesky().expect("PD");
    let rv = DVector::from_column_slice(r);
    let sol = chol.solve(&rv);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    0.5 * rv.dot(&sol) + 0.5 * logdet + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Relative error with the denominator floored at `floor`.
pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

/// Central difference of `f` in parameter `k`, step relative to θ_k.
pub fn central_diff<F: Fn(&CovarianceParameters) -> f64>(f: F, p: &CovarianceParameters, k: usize) -> f64 {
    let h = 1e-5 * p.values()[k];
    let mut up = p.values().to_vec();
    let mut dn = p.values().to_vec();
    up[k] += h;
    dn[k] -= h;
    let fu = f(&CovarianceParameters::new(up).unwrap());
    let fd = f(&CovarianceParameters::new(dn).unwrap());
    (fu - fd) / (2.0 * h)
}
