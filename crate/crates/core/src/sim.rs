//! Simulated data: nonlinear mean functions plus grouped or spatial random effects.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::covmodel::{euclidean, kernel_covariance, ComponentData, Kernel, Locations, RandomEffectsDesign};
use crate::error::{Error, Result};
use crate::tree::Features;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFunction {
    /// `atan((x₂x₃ − 1 − 1/(x₂x₄))/x₁)` with uniform covariates.
    Friedman3,
    /// `2x₁ + x₂² + 4·1{x₃>0} + 2 log|x₁|·x₃` with nine standard normal covariates.
    Hajjem,
    /// `1 + x₁ + x₂` with uniform covariates.
    Linear,
}

const CALIBRATION_DRAWS: usize = 1_000_000;
const CALIBRATION_SEED: u64 = 0x5eed_ca1b;

impl MeanFunction {
    pub fn num_features(self) -> usize {
        match self {
            MeanFunction::Friedman3 => 4,
            MeanFunction::Hajjem => 9,
            MeanFunction::Linear => 2,
        }
    }

    pub fn sample_row(self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            MeanFunction::Friedman3 => vec![
                rng.random_range(0.0..100.0),
                rng.random_range(40.0 * PI..560.0 * PI),
                rng.random_range(0.0..1.0),
                rng.random_range(1.0..11.0),
            ],
            MeanFunction::Hajjem => (0..9).map(|_| rng.sample(StandardNormal)).collect(),
            MeanFunction::Linear => vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
        }
    }

    /// The function without the scaling constant.
    pub fn raw(self, x: &[f64]) -> f64 {
        match self {
            MeanFunction::Friedman3 => ((x[1] * x[2] - 1.0 - 1.0 / (x[1] * x[3])) / x[0]).atan(),
            MeanFunction::Hajjem => {
                2.0 * x[0] + x[1] * x[1] + if x[2] > 0.0 { 4.0 } else { 0.0 } + 2.0 * x[0].abs().ln() * x[2]
            }
            MeanFunction::Linear => 1.0 + x[0] + x[1],
        }
    }

    /// `C` such that `Var(C·raw(x)) = 1`, by Monte Carlo with a fixed seed.
    pub fn scale(self) -> f64 {
        static CACHE: [OnceLock<f64>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
        let slot = match self {
            MeanFunction::Friedman3 => 0,
            MeanFunction::Hajjem => 1,
            MeanFunction::Linear => 2,
        };
        *CACHE[slot].get_or_init(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
            // Welford
            let (mut m, mut s2) = (0.0, 0.0);
            for k in 0..CALIBRATION_DRAWS {
                let v = self.raw(&self.sample_row(&mut rng));
                let d = v - m;
                m += d / (k + 1) as f64;
                s2 += d * (v - m);
            }
            1.0 / (s2 / (CALIBRATION_DRAWS - 1) as f64).sqrt()
        })
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        self.scale() * self.raw(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EffectSpec {
    /// `groups` equal-sized groups with one random intercept each.
    Grouped { n: usize, groups: usize },
    /// Gaussian process on `[0,1]²`; training locations avoid `[0.5,1]²`.
    SpatialGp { n: usize, kernel: Kernel, range: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    pub mean_fn: MeanFunction,
    pub effect: EffectSpec,
    pub sigma2: f64,
    pub sigma2_effect: f64,
    pub seed: u64,
}

impl SimDesign {
    pub fn grouped(mean_fn: MeanFunction, seed: u64) -> Self {
        Self {
            mean_fn,
            effect: EffectSpec::Grouped { n: 5000, groups: 500 },
            sigma2: 1.0,
            sigma2_effect: 1.0,
            seed,
        }
    }

    pub fn spatial(mean_fn: MeanFunction, seed: u64) -> Self {
        Self {
            mean_fn,
            effect: EffectSpec::SpatialGp {
                n: 500,
                kernel: Kernel::Exponential,
                range: 0.1,
            },
            sigma2: 1.0,
            sigma2_effect: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_var = |v: f64| v >= 0.0 && v.is_finite();
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) || !ok_var(self.sigma2_effect) {
            return Err(Error::invalid("simulation variances must be finite, sigma2 > 0"));
        }
        match self.effect {
            EffectSpec::Grouped { n, groups } => {
                if groups == 0 || n < groups || n % groups != 0 {
                    return Err(Error::invalid("grouped simulation needs n to be a positive multiple of groups"));
                }
            }
            EffectSpec::SpatialGp { n, range, .. } => {
                if n < 2 || !(range > 0.0 && range.is_finite()) {
                    return Err(Error::invalid("spatial simulation needs n >= 2 and range > 0"));
                }
            }
        }
        Ok(())
    }

    /// True covariance parameters in the layout of the fitted design.
    pub fn true_params(&self) -> Vec<f64> {
        match self.effect {
            EffectSpec::Grouped { .. } => vec![self.sigma2, self.sigma2_effect],
            EffectSpec::SpatialGp { range, .. } => vec![self.sigma2, self.sigma2_effect, range],
        }
    }
}

/// One simulated data set.
#[derive(Clone, Debug)]
pub struct SimData {
    pub x: Features,
    pub y: Vec<f64>,
    /// True `F(x)`.
    pub f: Vec<f64>,
    /// True random effect `(Zb)_i` per row.
    pub effect: Vec<f64>,
    /// Random-effect link for each row (group label or location).
    pub re: ComponentData,
}

impl SimData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn design(&self) -> Result<RandomEffectsDesign> {
        RandomEffectsDesign::new(self.len(), vec![self.re.clone()])
    }

    pub fn select(&self, rows: &[usize]) -> SimData {
        SimData {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            f: rows.iter().map(|&i| self.f[i]).collect(),
            effect: rows.iter().map(|&i| self.effect[i]).collect(),
            re: self.re.select(rows),
        }
    }
}

/// Training data with "interpolation" (same groups / region) and
/// "extrapolation" (new groups / held-out region) test sets.
#[derive(Clone, Debug)]
pub struct SimReplicate {
    pub train: SimData,
    pub test: SimData,
    pub test_ext: SimData,
    /// Disjoint index sets of 20 rows into `test` for sum prediction.
    pub sums: Vec<Vec<usize>>,
    /// Same for `test_ext`.
    pub sums_ext: Vec<Vec<usize>>,
    pub true_params: Vec<f64>,
}

const SUM_SETS: usize = 25;
const SUM_SIZE: usize = 20;

pub fn simulate(design: &SimDesign) -> Result<SimReplicate> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    match design.effect {
        EffectSpec::Grouped { n, groups } => simulate_grouped(design, n, groups, &mut rng),
        EffectSpec::SpatialGp { n, kernel, range } => simulate_spatial(design, n, kernel, range, &mut rng),
    }
}

fn covariates(mean_fn: MeanFunction, n: usize, rng: &mut ChaCha8Rng) -> Result<(Features, Vec<f64>)> {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| mean_fn.sample_row(rng)).collect();
    let f = rows.iter().map(|r| mean_fn.eval(r)).collect();
    Ok((Features::from_rows(&rows)?, f))
}

fn assemble(
    design: &SimDesign,
    x: Features,
    f: Vec<f64>,
    effect: Vec<f64>,
    re: ComponentData,
    rng: &mut ChaCha8Rng,
) -> SimData {
    let sd = design.sigma2.sqrt();
    let y = f
        .iter()
        .zip(&effect)
        .map(|(a, b)| a + b + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    SimData { x, y, f, effect, re }
}

fn simulate_grouped(design: &SimDesign, n: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<SimReplicate> {
    let size = n / groups;
    let sd1 = design.sigma2_effect.sqrt();
    let b: Vec<f64> = (0..groups).map(|_| sd1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let b_new: Vec<f64> = (0..groups).map(|_| sd1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let gid: Vec<usize> = (0..n).map(|i| i / size).collect();
    let make = |prefix: &str, effects: &[f64], rng: &mut ChaCha8Rng| -> Result<SimData> {
        let (x, f) = covariates(design.mean_fn, n, rng)?;
        let re = ComponentData::Grouped {
            labels: gid.iter().map(|g| format!("{prefix}{g}")).collect(),
            covariate: None,
        };
        let eff = gid.iter().map(|&g| effects[g]).collect();
        Ok(assemble(design, x, f, eff, re, rng))
    };
    let train = make("g", &b, rng)?;
    let test = make("g", &b, rng)?;
    let test_ext = make("new", &b_new, rng)?;
    // all rows of two groups per set
    let group_sets = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..groups).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        let per = SUM_SIZE.div_ceil(size).max(1);
        order
            .chunks_exact(per)
            .take(SUM_SETS)
            .map(|gs| {
                let mut rows: Vec<usize> = gs.iter().flat_map(|&g| g * size..(g + 1) * size).collect();
                rows.truncate(SUM_SIZE);
                rows
            })
            .collect()
    };
    let sums = group_sets(rng);
    let sums_ext = group_sets(rng);
    Ok(SimReplicate {
        train,
        test,
        test_ext,
        sums,
        sums_ext,
        true_params: design.true_params(),
    })
}

fn in_ext_region(p: &[f64]) -> bool {
    p[0] >= 0.5 && p[1] >= 0.5
}

fn sample_locations(n: usize, ext: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n);
    while out.len() < 2 * n {
        let p = if ext {
            [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)]
        } else {
            [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
        };
        if ext || !in_ext_region(&p) {
            out.extend_from_slice(&p);
        }
    }
    out
}

fn simulate_spatial(
    design: &SimDesign,
    n: usize,
    kernel: Kernel,
    range: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SimReplicate> {
    let train_loc = Locations::new(2, sample_locations(n, false, rng))?;
    let test_loc = Locations::new(2, sample_locations(n, false, rng))?;
    let ext_loc = Locations::new(2, sample_locations(n, true, rng))?;
    let all = train_loc.concat(&test_loc)?.concat(&ext_loc)?;
    let effect = draw_gp(&all, kernel, design.sigma2_effect, range, rng)?;
    let mut parts = Vec::with_capacity(3);
    for (k, loc) in [train_loc, test_loc, ext_loc].into_iter().enumerate() {
        let (x, f) = covariates(design.mean_fn, n, rng)?;
        let eff = effect[k * n..(k + 1) * n].to_vec();
        let re = ComponentData::Gp {
            locations: loc,
            kernel,
            covariate: None,
        };
        parts.push(assemble(design, x, f, eff, re, rng));
    }
    let test_ext = parts.pop().expect("three parts");
    let test = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    let sums = spatial_clusters(gp_locations(&test), rng);
    let sums_ext = spatial_clusters(gp_locations(&test_ext), rng);
    Ok(SimReplicate {
        train,
        test,
        test_ext,
        sums,
        sums_ext,
        true_params: design.true_params(),
    })
}

fn gp_locations(d: &SimData) -> &Locations {
    match &d.re {
        ComponentData::Gp { locations, .. } => locations,
        ComponentData::Grouped { .. } => unreachable!("spatial data"),
    }
}

/// Exact draw from the zero-mean GP at the given locations.
fn draw_gp(loc: &Locations, kernel: Kernel, var: f64, range: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if var == 0.0 {
        return Ok(vec![0.0; loc.len()]);
    }
    let k: DMatrix<f64> = kernel_covariance(loc, kernel, var, range)?;
    let chol = k
        .clone()
        .cholesky()
        .or_else(|| {
            let mut j = k;
            for i in 0..j.nrows() {
                j[(i, i)] += 1e-10 * var;
            }
            j.cholesky()
        })
        .ok_or_else(|| Error::Numerical("GP covariance of the simulated locations is not PD".into()))?;
    let z = DVector::from_fn(loc.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((chol.l() * z).as_slice().to_vec())
}

/// Disjoint clusters: a random remaining point plus its 19 nearest remaining points.
fn spatial_clusters(loc: &Locations, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut remaining: Vec<usize> = (0..loc.len()).collect();
    let mut sets = Vec::with_capacity(SUM_SETS);
    while sets.len() < SUM_SETS && remaining.len() >= SUM_SIZE {
        let seed = remaining[rng.random_range(0..remaining.len())];
        let mut by_dist: Vec<(f64, usize)> = remaining
            .iter()
            .map(|&i| (euclidean(loc.point(seed), loc.point(i)), i))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let set: Vec<usize> = by_dist.iter().take(SUM_SIZE).map(|&(_, i)| i).collect();
        remaining.retain(|i| !set.contains(i));
        sets.push(set);
    }
    sets
}
