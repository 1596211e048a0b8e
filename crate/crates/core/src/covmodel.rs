//! Random-effects designs and the marginal covariance `Ψ = ZΣZᵀ + σ²I`.
//!
//! A design is a list of components. Grouped components contribute one
//! random intercept (or slope, when a covariate is given) per level; Gaussian
//! process components contribute a latent field evaluated at the unique
//! observed locations. The covariance parameter vector is laid out as
//! `[σ², then per component: σ_c², (ρ_c for GP components)]`.

use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::par;

/// Relative jitter added to Σ's diagonal when the first factorization fails.
pub const JITTER: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Strictly positive covariance parameters, error variance first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CovarianceParameters(Vec<f64>);

impl CovarianceParameters {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("covariance parameters must not be empty"));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::invalid(format!(
                "covariance parameters must be finite and strictly positive, got {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn error_variance(&self) -> f64 {
        self.0[0]
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_log(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.ln()).collect()
    }

    pub fn from_log(log_values: &[f64]) -> Result<Self> {
        Self::new(log_values.iter().map(|v| v.exp()).collect())
    }

    /// Multiplies every variance-type entry (per `mask`) by `factor`.
    pub fn scale_variances(&self, mask: &[bool], factor: f64) -> Result<Self> {
        Self::new(
            self.0
                .iter()
                .zip(mask)
                .map(|(&v, &is_var)| if is_var { v * factor } else { v })
                .collect(),
        )
    }
}

impl TryFrom<Vec<f64>> for CovarianceParameters {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CovarianceParameters> for Vec<f64> {
    fn from(p: CovarianceParameters) -> Self {
        p.0
    }
}

// ---------------------------------------------------------------------------
// Kernels and locations
// ---------------------------------------------------------------------------

/// Isotropic covariance function `c(s,s') = σ₁² r(‖s−s'‖/ρ)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// `r(h) = exp(−h)`
    Exponential,
    /// `r(h) = exp(−h²)`
    Gaussian,
}

impl Kernel {
    /// Autocorrelation at scaled distance `h = d/ρ`.
    pub fn correlation(self, h: f64) -> f64 {
        match self {
            Kernel::Exponential => (-h).exp(),
            Kernel::Gaussian => (-h * h).exp(),
        }
    }

    pub fn covariance(self, variance: f64, range: f64, dist: f64) -> f64 {
        variance * self.correlation(dist / range)
    }

    /// Derivative of the covariance with respect to the range `ρ`.
    pub fn d_range(self, variance: f64, range: f64, dist: f64) -> f64 {
        let h = dist / range;
        match self {
            Kernel::Exponential => variance * (-h).exp() * h / range,
            Kernel::Gaussian => variance * (-h * h).exp() * 2.0 * h * h / range,
        }
    }
}

/// Row-major set of points in `dim` dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Locations {
    dim: usize,
    coords: Vec<f64>,
}

impl Locations {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("location dimension must be at least 1"));
        }
        if coords.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} coordinates do not form points of dimension {dim}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("locations must be finite"));
        }
        Ok(Self { dim, coords })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(1, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged location rows"));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, rows: &[usize]) -> Locations {
        let mut coords = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            coords.extend_from_slice(self.point(r));
        }
        Locations { dim: self.dim, coords }
    }

    /// Concatenates two point sets of equal dimension.
    pub fn concat(&self, other: &Locations) -> Result<Locations> {
        check_len("location dimension", self.dim, other.dim)?;
        let mut coords = self.coords.clone();
        coords.extend_from_slice(&other.coords);
        Ok(Locations { dim: self.dim, coords })
    }

    /// Collapses exact duplicates; returns the unique points (in first
    /// appearance order) and the map from each point to its unique index.
    pub fn deduplicate(&self) -> (Locations, Vec<usize>) {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut coords = Vec::new();
        let mut map = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            // +0.0 turns -0.0 into 0.0 so both hash alike
            let key: Vec<u64> = self.point(i).iter().map(|c| (c + 0.0).to_bits()).collect();
            let next = seen.len();
            let idx = *seen.entry(key).or_insert_with(|| {
                coords.extend_from_slice(self.point(i));
                next
            });
            map.push(idx);
        }
        (Locations { dim: self.dim, coords }, map)
    }

    /// Mean Euclidean distance over all pairs (0 for fewer than two points).
    pub fn mean_pairwise_distance(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let sums = par::map_range(n, |i| {
            ((i + 1)..n).map(|j| euclidean(self.point(i), self.point(j))).sum::<f64>()
        });
        let total: f64 = sums.iter().sum();
        total / (n * (n - 1) / 2) as f64
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Dense kernel matrix between two point sets.
pub fn kernel_cross(a: &Locations, b: &Locations, kernel: Kernel, variance: f64, range: f64) -> DMatrix<f64> {
    let (na, nb) = (a.len(), b.len());
    let mut out = vec![0.0; na * nb];
    // column-major fill: column j holds b's point j
    par::fill_indexed(&mut out, |idx| {
        let (i, j) = (idx % na, idx / na);
        kernel.covariance(variance, range, euclidean(a.point(i), b.point(j)))
    });
    DMatrix::from_vec(na, nb, out)
}

/// Covariance matrix `Σ` of a GP at `locations`.
pub fn kernel_covariance(locations: &Locations, kernel: Kernel, variance: f64, range: f64) -> Result<DMatrix<f64>> {
    if !(variance > 0.0 && variance.is_finite()) || !(range > 0.0 && range.is_finite()) {
        return Err(Error::invalid(format!(
            "kernel parameters must be positive (variance {variance}, range {range})"
        )));
    }
    let mut k = kernel_cross(locations, locations, kernel, variance, range);
    // exact symmetry regardless of rounding in the distance computation
    let n = k.nrows();
    for j in 0..n {
        k[(j, j)] = variance;
        for i in (j + 1)..n {
            k[(j, i)] = k[(i, j)];
        }
    }
    Ok(k)
}

// ---------------------------------------------------------------------------
// Incidence matrices
// ---------------------------------------------------------------------------

/// Sparse `n×m` matrix with exactly one nonzero per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Incidence {
    cols: Vec<usize>,
    values: Option<Vec<f64>>,
    ncols: usize,
}

impl Incidence {
    pub fn nrows(&self) -> usize {
        self.cols.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn col(&self, row: usize) -> usize {
        self.cols[row]
    }

    pub fn value(&self, row: usize) -> f64 {
        self.values.as_ref().map_or(1.0, |v| v[row])
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            z[(i, self.cols[i])] = self.value(i);
        }
        z
    }
}

/// Builds the incidence matrix for categorical `labels`. Columns follow the
/// order in which labels first appear; returns the matrix and those levels.
pub fn build_incidence<L: Eq + Hash + Clone>(
    labels: &[L],
    covariate: Option<&[f64]>,
) -> Result<(Incidence, Vec<L>)> {
    if labels.is_empty() {
        return Err(Error::invalid("group labels must not be empty"));
    }
    if let Some(cov) = covariate {
        check_len("random-coefficient covariate", labels.len(), cov.len())?;
        if cov.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("random-coefficient covariate must be finite"));
        }
    }
    let mut index: HashMap<&L, usize> = HashMap::new();
    let mut levels = Vec::new();
    let cols = labels
        .iter()
        .map(|l| {
            let next = index.len();
            *index.entry(l).or_insert_with(|| {
                levels.push(l.clone());
                next
            })
        })
        .collect();
    Ok((
        Incidence {
            cols,
            values: covariate.map(<[f64]>::to_vec),
            ncols: levels.len(),
        },
        levels,
    ))
}

// ---------------------------------------------------------------------------
// Designs
// ---------------------------------------------------------------------------

/// Raw per-observation data for one random-effects component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ComponentData {
    /// Grouped random intercept, or random slope when `covariate` is set.
    Grouped {
        labels: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        covariate: Option<Vec<f64>>,
    },
    /// Gaussian process at the given locations.
    Gp {
        locations: Locations,
        kernel: Kernel,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        covariate: Option<Vec<f64>>,
    },
}

impl ComponentData {
    pub fn len(&self) -> usize {
        match self {
            ComponentData::Grouped { labels, .. } => labels.len(),
            ComponentData::Gp { locations, .. } => locations.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn covariate(&self) -> Option<&[f64]> {
        match self {
            ComponentData::Grouped { covariate, .. } | ComponentData::Gp { covariate, .. } => {
                covariate.as_deref()
            }
        }
    }

    pub fn select(&self, rows: &[usize]) -> ComponentData {
        let pick = |v: &Option<Vec<f64>>| v.as_ref().map(|c| rows.iter().map(|&r| c[r]).collect());
        match self {
            ComponentData::Grouped { labels, covariate } => ComponentData::Grouped {
                labels: rows.iter().map(|&r| labels[r].clone()).collect(),
                covariate: pick(covariate),
            },
            ComponentData::Gp {
                locations,
                kernel,
                covariate,
            } => ComponentData::Gp {
                locations: locations.select(rows),
                kernel: *kernel,
                covariate: pick(covariate),
            },
        }
    }

    /// Rows of `self` followed by rows of `other` (same component type).
    pub fn concat(&self, other: &ComponentData) -> Result<ComponentData> {
        let cat = |a: &Option<Vec<f64>>, b: &Option<Vec<f64>>| match (a, b) {
            (Some(a), Some(b)) => Ok(Some(a.iter().chain(b).copied().collect())),
            (None, None) => Ok(None),
            _ => Err(Error::invalid("cannot concatenate components with and without covariate")),
        };
        match (self, other) {
            (
                ComponentData::Grouped { labels: la, covariate: ca },
                ComponentData::Grouped { labels: lb, covariate: cb },
            ) => Ok(ComponentData::Grouped {
                labels: la.iter().chain(lb).cloned().collect(),
                covariate: cat(ca, cb)?,
            }),
            (
                ComponentData::Gp {
                    locations: la,
                    kernel: ka,
                    covariate: ca,
                },
                ComponentData::Gp {
                    locations: lb,
                    kernel: kb,
                    covariate: cb,
                },
            ) if ka == kb => Ok(ComponentData::Gp {
                locations: la.concat(lb)?,
                kernel: *ka,
                covariate: cat(ca, cb)?,
            }),
            _ => Err(Error::invalid("cannot concatenate different component types")),
        }
    }

    fn is_gp(&self) -> bool {
        matches!(self, ComponentData::Gp { .. })
    }
}

/// A component after building its incidence structure.
#[derive(Clone, Debug)]
pub enum Component {
    Grouped {
        incidence: Incidence,
        levels: Vec<String>,
    },
    Gp {
        incidence: Incidence,
        unique: Locations,
        kernel: Kernel,
    },
}

impl Component {
    pub fn incidence(&self) -> &Incidence {
        match self {
            Component::Grouped { incidence, .. } | Component::Gp { incidence, .. } => incidence,
        }
    }

    pub fn dim(&self) -> usize {
        self.incidence().ncols()
    }

    pub fn num_params(&self) -> usize {
        match self {
            Component::Grouped { .. } => 1,
            Component::Gp { .. } => 2,
        }
    }
}

/// Which covariance quantity a parameter index refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ErrorVariance,
    Variance { component: usize },
    Range { component: usize },
}

/// Grouping and Gaussian-process structure of the random effects.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "DesignSpec", into = "DesignSpec")]
pub struct RandomEffectsDesign {
    n: usize,
    data: Vec<ComponentData>,
    components: Vec<Component>,
    offsets: Vec<usize>,
    roles: Vec<ParamRole>,
    m: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DesignSpec {
    n: usize,
    components: Vec<ComponentData>,
}

impl TryFrom<DesignSpec> for RandomEffectsDesign {
    type Error = Error;
    fn try_from(spec: DesignSpec) -> Result<Self> {
        RandomEffectsDesign::new(spec.n, spec.components)
    }
}

impl From<RandomEffectsDesign> for DesignSpec {
    fn from(d: RandomEffectsDesign) -> Self {
        DesignSpec {
            n: d.n,
            components: d.data,
        }
    }
}

impl RandomEffectsDesign {
    pub fn new(n: usize, data: Vec<ComponentData>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("design needs at least one observation"));
        }
        let mut components = Vec::with_capacity(data.len());
        let mut offsets = Vec::with_capacity(data.len());
        let mut roles = vec![ParamRole::ErrorVariance];
        let mut m = 0;
        for (c, d) in data.iter().enumerate() {
            check_len("random-effects component rows", n, d.len())?;
            let comp = match d {
                ComponentData::Grouped { labels, covariate } => {
                    let (incidence, levels) = build_incidence(labels, covariate.as_deref())?;
                    Component::Grouped { incidence, levels }
                }
                ComponentData::Gp {
                    locations,
                    kernel,
                    covariate,
                } => {
                    if let Some(cov) = covariate {
                        if cov.iter().any(|v| !v.is_finite()) {
                            return Err(Error::invalid("random-coefficient covariate must be finite"));
                        }
                    }
                    let (unique, map) = locations.deduplicate();
                    Component::Gp {
                        incidence: Incidence {
                            ncols: unique.len(),
                            cols: map,
                            values: covariate.clone(),
                        },
                        unique,
                        kernel: *kernel,
                    }
                }
            };
            offsets.push(m);
            m += comp.dim();
            roles.push(ParamRole::Variance { component: c });
            if d.is_gp() {
                roles.push(ParamRole::Range { component: c });
            }
            components.push(comp);
        }
        Ok(Self {
            n,
            data,
            components,
            offsets,
            roles,
            m,
        })
    }

    /// Design without random effects (`Ψ = σ²I`).
    pub fn empty(n: usize) -> Result<Self> {
        Self::new(n, Vec::new())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Total random-effect dimension.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn data(&self) -> &[ComponentData] {
        &self.data
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn num_params(&self) -> usize {
        self.roles.len()
    }

    pub fn param_roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn param_names(&self) -> Vec<String> {
        self.roles
            .iter()
            .map(|r| match r {
                ParamRole::ErrorVariance => "sigma2".to_string(),
                ParamRole::Variance { component } => format!("sigma2_{}", component + 1),
                ParamRole::Range { component } => format!("rho_{}", component + 1),
            })
            .collect()
    }

    /// True for parameters that scale with the response variance.
    pub fn variance_mask(&self) -> Vec<bool> {
        self.roles
            .iter()
            .map(|r| !matches!(r, ParamRole::Range { .. }))
            .collect()
    }

    pub fn has_gp(&self) -> bool {
        self.data.iter().any(ComponentData::is_gp)
    }

    pub fn all_grouped(&self) -> bool {
        !self.has_gp()
    }

    /// Index of the only component if the design is a single GP.
    pub fn single_gp(&self) -> Option<usize> {
        (self.components.len() == 1 && self.data[0].is_gp()).then_some(0)
    }

    pub fn woodbury_eligible(&self) -> bool {
        self.all_grouped() && self.m < self.n
    }

    pub fn check_params(&self, params: &CovarianceParameters) -> Result<()> {
        check_len("covariance parameter count", self.num_params(), params.len())
    }

    /// Restricts the design to the given observations.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Self::new(rows.len(), self.data.iter().map(|d| d.select(rows)).collect())
    }

    /// Default starting values: `σ² = Var(y)/2`, each component variance
    /// `Var(y)/(2·#components)`, ranges a third of the mean pairwise distance.
    pub fn default_params(&self, y: &[f64]) -> Result<CovarianceParameters> {
        let var = crate::stats::variance(y).max(1e-8);
        let ncomp = self.components.len().max(1) as f64;
        let values = self
            .roles
            .iter()
            .map(|r| match *r {
                ParamRole::ErrorVariance => var / 2.0,
                ParamRole::Variance { .. } => var / (2.0 * ncomp),
                ParamRole::Range { component } => match &self.components[component] {
                    Component::Gp { unique, .. } => {
                        let d = unique.mean_pairwise_distance();
                        if d > 0.0 {
                            d / 3.0
                        } else {
                            1.0
                        }
                    }
                    Component::Grouped { .. } => unreachable!("range parameter on grouped component"),
                },
            })
            .collect();
        CovarianceParameters::new(values)
    }

    /// Variance and range of component `c` under `params`.
    pub fn component_params(&self, params: &CovarianceParameters, c: usize) -> (f64, Option<f64>) {
        let p = params.values();
        let mut var = None;
        let mut range = None;
        for (k, r) in self.roles.iter().enumerate() {
            match *r {
                ParamRole::Variance { component } if component == c => var = Some(p[k]),
                ParamRole::Range { component } if component == c => range = Some(p[k]),
                _ => {}
            }
        }
        (var.expect("component variance"), range)
    }

    /// Σ_c for component `c`, with optional relative diagonal jitter.
    pub fn sigma_block(&self, params: &CovarianceParameters, c: usize, jitter: f64) -> Result<SigmaBlock> {
        let (var, range) = self.component_params(params, c);
        Ok(match &self.components[c] {
            Component::Grouped { incidence, .. } => SigmaBlock::Scaled {
                dim: incidence.ncols(),
                variance: var * (1.0 + jitter),
            },
            Component::Gp { unique, kernel, .. } => {
                let mut k = kernel_covariance(unique, *kernel, var, range.expect("GP range"))?;
                if jitter > 0.0 {
                    for i in 0..k.nrows() {
                        k[(i, i)] += jitter * var;
                    }
                }
                SigmaBlock::Dense(k)
            }
        })
    }

    /// Dense `ZΣZᵀ` (without the error term).
    pub fn dense_zsz(&self, params: &CovarianceParameters, jitter: f64) -> Result<DMatrix<f64>> {
        self.check_params(params)?;
        let n = self.n;
        let mut out = DMatrix::zeros(n, n);
        for (c, comp) in self.components.iter().enumerate() {
            let z = comp.incidence();
            match self.sigma_block(params, c, jitter)? {
                SigmaBlock::Scaled { variance, .. } => {
                    for (_, members) in group_members(z) {
                        for &i in &members {
                            for &j in &members {
                                out[(i, j)] += variance * z.value(i) * z.value(j);
                            }
                        }
                    }
                }
                SigmaBlock::Dense(sigma) => {
                    for j in 0..n {
                        let (cj, zj) = (z.col(j), z.value(j));
                        for i in 0..n {
                            out[(i, j)] += sigma[(z.col(i), cj)] * z.value(i) * zj;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Dense `Ψ = ZΣZᵀ + σ²I`.
    pub fn dense_psi(&self, params: &CovarianceParameters, jitter: f64) -> Result<DMatrix<f64>> {
        let mut psi = self.dense_zsz(params, jitter)?;
        let s2 = params.error_variance();
        for i in 0..self.n {
            psi[(i, i)] += s2;
        }
        Ok(psi)
    }

    /// Global column of observation `row` in component `c`.
    pub fn global_col(&self, c: usize, row: usize) -> usize {
        self.offsets[c] + self.components[c].incidence().col(row)
    }

    /// Dense `n×m` random-effects design matrix `Z`.
    pub fn dense_z(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n, self.m);
        for (c, comp) in self.components.iter().enumerate() {
            let inc = comp.incidence();
            for i in 0..self.n {
                z[(i, self.offsets[c] + inc.col(i))] = inc.value(i);
            }
        }
        z
    }
}

/// Observations per column of an incidence matrix, columns in order.
fn group_members(z: &Incidence) -> Vec<(usize, Vec<usize>)> {
    let mut members = vec![Vec::new(); z.ncols()];
    for i in 0..z.nrows() {
        members[z.col(i)].push(i);
    }
    members.into_iter().enumerate().collect()
}

/// One diagonal block of Σ.
#[derive(Clone, Debug)]
pub enum SigmaBlock {
    /// `variance · I_dim`
    Scaled { dim: usize, variance: f64 },
    Dense(DMatrix<f64>),
}

/// `∂Ψ/∂θ_k` as a dense `n×n` matrix.
pub fn psi_derivative(design: &RandomEffectsDesign, params: &CovarianceParameters, k: usize) -> Result<DMatrix<f64>> {
    design.check_params(params)?;
    let n = design.n();
    let role = *design
        .param_roles()
        .get(k)
        .ok_or_else(|| Error::invalid(format!("parameter index {k} out of range")))?;
    let (c, by_range) = match role {
        ParamRole::ErrorVariance => return Ok(DMatrix::identity(n, n)),
        ParamRole::Variance { component } => (component, false),
        ParamRole::Range { component } => (component, true),
    };
    let (var, range) = design.component_params(params, c);
    let comp = &design.components()[c];
    let z = comp.incidence();
    let mut out = DMatrix::zeros(n, n);
    match comp {
        Component::Grouped { .. } => {
            for (_, members) in group_members(z) {
                for &i in &members {
                    for &j in &members {
                        out[(i, j)] = z.value(i) * z.value(j);
                    }
                }
            }
        }
        Component::Gp { unique, kernel, .. } => {
            let range = range.expect("GP range");
            let mut d = DMatrix::zeros(unique.len(), unique.len());
            for a in 0..unique.len() {
                for b in 0..unique.len() {
                    let dist = euclidean(unique.point(a), unique.point(b));
                    d[(a, b)] = if by_range {
                        kernel.d_range(var, range, dist)
                    } else {
                        kernel.correlation(dist / range)
                    };
                }
            }
            for j in 0..n {
                for i in 0..n {
                    out[(i, j)] = d[(z.col(i), z.col(j))] * z.value(i) * z.value(j);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Small (random-effect space) matrices
// ---------------------------------------------------------------------------

/// An `m×m` matrix that is diagonal for single grouped components.
#[derive(Clone, Debug)]
pub enum EffectMatrix {
    Diag(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl EffectMatrix {
    pub fn dim(&self) -> usize {
        match self {
            EffectMatrix::Diag(d) => d.len(),
            EffectMatrix::Dense(m) => m.nrows(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            EffectMatrix::Diag(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
            EffectMatrix::Dense(m) => m[(i, j)],
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        match self {
            EffectMatrix::Diag(d) => d.iter().zip(v).map(|(a, b)| a * b).collect(),
            EffectMatrix::Dense(m) => (m * DVector::from_column_slice(v)).as_slice().to_vec(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            EffectMatrix::Diag(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            EffectMatrix::Dense(m) => m.clone(),
        }
    }
}

enum EffectFactor {
    Diag(Vec<f64>),
    Chol(Cholesky<f64, Dyn>),
}

impl EffectFactor {
    fn solve(&self, v: &[f64]) -> Vec<f64> {
        match self {
            EffectFactor::Diag(d) => v.iter().zip(d).map(|(a, b)| a / b).collect(),
            EffectFactor::Chol(c) => c.solve(&DVector::from_column_slice(v)).as_slice().to_vec(),
        }
    }

    fn log_det(&self) -> f64 {
        match self {
            EffectFactor::Diag(d) => d.iter().map(|v| v.ln()).sum(),
            EffectFactor::Chol(c) => chol_log_det(c),
        }
    }
}

pub(crate) fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Ψ operator
// ---------------------------------------------------------------------------

/// Which factorization backs a [`PsiOperator`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiPath {
    Auto,
    Dense,
    Woodbury,
}

/// Sparse `Z` with one entry per component per row.
#[derive(Clone, Debug)]
pub(crate) struct SparseZ {
    n: usize,
    m: usize,
    ncomp: usize,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseZ {
    fn from_design(d: &RandomEffectsDesign) -> Self {
        let ncomp = d.components().len();
        let mut cols = Vec::with_capacity(d.n() * ncomp);
        let mut vals = Vec::with_capacity(d.n() * ncomp);
        for i in 0..d.n() {
            for (c, comp) in d.components().iter().enumerate() {
                cols.push(d.offsets()[c] + comp.incidence().col(i));
                vals.push(comp.incidence().value(i));
            }
        }
        SparseZ {
            n: d.n(),
            m: d.m(),
            ncomp,
            cols,
            vals,
        }
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let s = i * self.ncomp;
        self.cols[s..s + self.ncomp]
            .iter()
            .copied()
            .zip(self.vals[s..s + self.ncomp].iter().copied())
    }

    /// `Zᵀv`
    pub(crate) fn t_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (i, &vi) in v.iter().enumerate() {
            for (c, z) in self.row(i) {
                out[c] += z * vi;
            }
        }
        out
    }

    /// `Zu`
    pub(crate) fn mul(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(c, z)| z * u[c]).sum()).collect()
    }

    /// `ZᵀZ`, diagonal when there is a single component.
    fn gram(&self) -> EffectMatrix {
        if self.ncomp <= 1 {
            let mut d = vec![0.0; self.m];
            for i in 0..self.n {
                for (c, z) in self.row(i) {
                    d[c] += z * z;
                }
            }
            EffectMatrix::Diag(d)
        } else {
            let mut g = DMatrix::zeros(self.m, self.m);
            for i in 0..self.n {
                for (a, za) in self.row(i) {
                    for (b, zb) in self.row(i) {
                        g[(a, b)] += za * zb;
                    }
                }
            }
            EffectMatrix::Dense(g)
        }
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n, self.m);
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                z[(i, c)] += v;
            }
        }
        z
    }
}

struct WoodburyParts {
    /// diagonal of Σ (all components grouped)
    sigma_diag: Vec<f64>,
    /// `ZᵀZ`
    gram: EffectMatrix,
    /// `W = σ²Σ⁻¹ + ZᵀZ`
    w: EffectFactor,
}

enum Factorization {
    Dense(Cholesky<f64, Dyn>),
    Woodbury(WoodburyParts),
}

/// Factorized marginal covariance supporting solves, log-determinants and
/// quadratic forms. Immutable once built.
pub struct PsiOperator {
    n: usize,
    sigma2: f64,
    z: SparseZ,
    factor: Factorization,
    log_det: f64,
}

impl std::fmt::Debug for PsiOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PsiOperator")
            .field("n", &self.n)
            .field("sigma2", &self.sigma2)
            .field("path", &self.path())
            .finish()
    }
}

impl PsiOperator {
    /// Factorizes Ψ, choosing the Woodbury path for grouped designs with `m < n`.
    pub fn assemble(design: &RandomEffectsDesign, params: &CovarianceParameters) -> Result<Self> {
        Self::assemble_with(design, params, PsiPath::Auto)
    }

    pub fn assemble_with(design: &RandomEffectsDesign, params: &CovarianceParameters, path: PsiPath) -> Result<Self> {
        design.check_params(params)?;
        let use_woodbury = match path {
            PsiPath::Auto => design.woodbury_eligible(),
            PsiPath::Woodbury => {
                if !design.all_grouped() {
                    return Err(Error::invalid("Woodbury path requires grouped-only designs"));
                }
                true
            }
            PsiPath::Dense => false,
        };
        let z = SparseZ::from_design(design);
        let sigma2 = params.error_variance();
        let n = design.n();
        if use_woodbury {
            let mut sigma_diag = Vec::with_capacity(design.m());
            for c in 0..design.components().len() {
                let (var, _) = design.component_params(params, c);
                sigma_diag.extend(std::iter::repeat_n(var, design.components()[c].dim()));
            }
            let gram = z.gram();
            let w = match &gram {
                EffectMatrix::Diag(g) => {
                    EffectFactor::Diag(g.iter().zip(&sigma_diag).map(|(g, s)| sigma2 / s + g).collect())
                }
                EffectMatrix::Dense(g) => {
                    let mut w = g.clone();
                    for (i, s) in sigma_diag.iter().enumerate() {
                        w[(i, i)] += sigma2 / s;
                    }
                    EffectFactor::Chol(w.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
                        params: params.values().to_vec(),
                    })?)
                }
            };
            let m = design.m();
            let log_det = (n as f64 - m as f64) * sigma2.ln()
                + sigma_diag.iter().map(|s| s.ln()).sum::<f64>()
                + w.log_det();
            Ok(Self {
                n,
                sigma2,
                z,
                factor: Factorization::Woodbury(WoodburyParts { sigma_diag, gram, w }),
                log_det,
            })
        } else {
            let chol = design
                .dense_psi(params, 0.0)?
                .cholesky()
                .or_else(|| design.dense_psi(params, JITTER).ok()?.cholesky())
                .ok_or_else(|| Error::NotPositiveDefinite {
                    params: params.values().to_vec(),
                })?;
            let log_det = chol_log_det(&chol);
            Ok(Self {
                n,
                sigma2,
                z,
                factor: Factorization::Dense(chol),
                log_det,
            })
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn path(&self) -> PsiPath {
        match self.factor {
            Factorization::Dense(_) => PsiPath::Dense,
            Factorization::Woodbury(_) => PsiPath::Woodbury,
        }
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `Ψ⁻¹ rhs`
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        match &self.factor {
            Factorization::Dense(c) => c.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec(),
            Factorization::Woodbury(w) => {
                if self.z.m == 0 {
                    return rhs.iter().map(|r| r / self.sigma2).collect();
                }
                let u = w.w.solve(&self.z.t_mul(rhs));
                let zu = self.z.mul(&u);
                rhs.iter().zip(&zu).map(|(r, z)| (r - z) / self.sigma2).collect()
            }
        }
    }

    /// `Ψ⁻¹ B` for a dense right-hand side.
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            Factorization::Dense(c) => c.solve(rhs),
            Factorization::Woodbury(_) => {
                let cols: Vec<Vec<f64>> =
                    par::map_range(rhs.ncols(), |j| self.solve(rhs.column(j).as_slice()));
                DMatrix::from_fn(rhs.nrows(), rhs.ncols(), |i, j| cols[j][i])
            }
        }
    }

    /// `rᵀΨ⁻¹r`
    pub fn quadratic_form(&self, r: &[f64]) -> f64 {
        dot(r, &self.solve(r))
    }

    /// Dense `Ψ⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        match &self.factor {
            Factorization::Dense(c) => dense_inverse(c),
            Factorization::Woodbury(_) => self.solve_matrix(&DMatrix::identity(self.n, self.n)),
        }
    }

    /// `Zᵀv`
    pub fn zt_mul(&self, v: &[f64]) -> Vec<f64> {
        self.z.t_mul(v)
    }

    /// `ZᵀΨ⁻¹Z` in random-effect space.
    pub fn effect_precision(&self) -> EffectMatrix {
        match &self.factor {
            Factorization::Woodbury(w) => {
                // σ⁻²(C − C W⁻¹ C)
                let s = 1.0 / self.sigma2;
                match (&w.gram, &w.w) {
                    (EffectMatrix::Diag(c), EffectFactor::Diag(wd)) => EffectMatrix::Diag(
                        c.iter().zip(wd).map(|(c, w)| s * (c - c * c / w)).collect(),
                    ),
                    (gram, EffectFactor::Chol(chol)) => {
                        let c = gram.to_dense();
                        let e = chol.solve(&c);
                        EffectMatrix::Dense((&c - &c * e) * s)
                    }
                    (EffectMatrix::Dense(c), EffectFactor::Diag(wd)) => {
                        let winv = DMatrix::from_diagonal(&DVector::from_iterator(
                            wd.len(),
                            wd.iter().map(|v| 1.0 / v),
                        ));
                        EffectMatrix::Dense((c - c * winv * c) * s)
                    }
                }
            }
            Factorization::Dense(c) => {
                let z = self.z.to_dense();
                let pz = c.solve(&z);
                EffectMatrix::Dense(z.transpose() * pz)
            }
        }
    }

    /// Pieces used by the grouped-design likelihood derivatives; `None` on the
    /// dense path.
    pub(crate) fn woodbury_traces(&self) -> Option<WoodburyTraces> {
        let Factorization::Woodbury(w) = &self.factor else {
            return None;
        };
        let s = 1.0 / self.sigma2;
        let n = self.n as f64;
        let m = self.z.m;
        // E = W⁻¹C
        let (tr_e, tr_e2, q, zp2z) = match (&w.gram, &w.w) {
            (EffectMatrix::Diag(c), EffectFactor::Diag(wd)) => {
                let e: Vec<f64> = c.iter().zip(wd).map(|(c, w)| c / w).collect();
                let q = c.iter().zip(&e).map(|(c, e)| s * (c - c * e)).collect();
                let zp2z = c
                    .iter()
                    .zip(&e)
                    .map(|(c, e)| s * s * (1.0 - e) * c * (1.0 - e))
                    .collect();
                (
                    e.iter().sum::<f64>(),
                    e.iter().map(|e| e * e).sum::<f64>(),
                    EffectMatrix::Diag(q),
                    EffectMatrix::Diag(zp2z),
                )
            }
            (gram, factor) => {
                let c = gram.to_dense();
                let e = match factor {
                    EffectFactor::Chol(ch) => ch.solve(&c),
                    EffectFactor::Diag(wd) => DMatrix::from_fn(m, m, |i, j| c[(i, j)] / wd[i]),
                };
                let q = (&c - &c * &e) * s;
                let ime = DMatrix::identity(m, m) - &e;
                let zp2z = ime.transpose() * &c * &ime * (s * s);
                let tr_e2 = (&e * &e).trace();
                (e.trace(), tr_e2, EffectMatrix::Dense(q), EffectMatrix::Dense(zp2z))
            }
        };
        Some(WoodburyTraces {
            trace_inv: s * (n - tr_e),
            trace_inv2: s * s * (n - 2.0 * tr_e + tr_e2),
            effect_precision: q,
            effect_precision2: zp2z,
            sigma_diag: w.sigma_diag.clone(),
        })
    }
}

/// Traces needed for grouped-design gradients and Fisher information.
pub(crate) struct WoodburyTraces {
    /// `tr(Ψ⁻¹)`
    pub trace_inv: f64,
    /// `tr(Ψ⁻²)`
    pub trace_inv2: f64,
    /// `ZᵀΨ⁻¹Z`
    pub effect_precision: EffectMatrix,
    /// `ZᵀΨ⁻²Z`
    pub effect_precision2: EffectMatrix,
    #[allow(dead_code)]
    pub sigma_diag: Vec<f64>,
}

/// `A⁻¹` from a Cholesky factor via `L⁻ᵀL⁻¹`.
pub(crate) fn dense_inverse(c: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let n = c.l_dirty().nrows();
    let mut linv = DMatrix::identity(n, n);
    c.l_dirty().solve_lower_triangular_mut(&mut linv);
    let mut inv = linv.tr_mul(&linv);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    inv
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
