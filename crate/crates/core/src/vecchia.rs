//! Nearest-neighbor (Vecchia) approximation of a Gaussian-process response.
//!
//! The response density is factorized as `Π p(y_i | y_N(i))` over an ordering
//! of the observations, which gives the sparse precision `Bᵀ D⁻¹ B` with `B`
//! unit lower triangular. All quantities are computed row by row from dense
//! solves of size at most the neighbor budget.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covmodel::{CovarianceParameters, ComponentData, Kernel, Locations, RandomEffectsDesign, JITTER};
use crate::error::{check_len, Error, Result};
use crate::likelihood::{CovEvaluation, CovObjective, Need};
use crate::par;
use crate::predict::{PredictiveCovariance, PredictiveDistribution};

/// How observations are ordered before conditioning on predecessors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    InputOrder,
    RandomPermutation(u64),
}

/// Where prediction points sit in the joint ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VecchiaPredictionMode {
    /// Observations first; prediction points also condition on earlier
    /// prediction points.
    ObservedFirst,
    /// Prediction points first; observations condition on them.
    PredictionFirst,
    /// Prediction points condition on observations only (diagonal covariance).
    ObservedOnlyConditioning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VecchiaConfig {
    pub num_neighbors: usize,
    pub ordering: Ordering,
    pub num_neighbors_pred: usize,
    pub prediction_mode: VecchiaPredictionMode,
}

impl Default for VecchiaConfig {
    fn default() -> Self {
        Self {
            num_neighbors: 30,
            ordering: Ordering::RandomPermutation(0),
            num_neighbors_pred: 500,
            prediction_mode: VecchiaPredictionMode::ObservedFirst,
        }
    }
}

impl VecchiaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_neighbors == 0 || self.num_neighbors_pred == 0 {
            return Err(Error::invalid("neighbor counts must be at least 1"));
        }
        Ok(())
    }
}

/// Ordering and conditioning sets.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSets {
    ordering: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    num_neighbors: usize,
}

impl NeighborSets {
    /// `ordering()[i]` is the observation placed at position `i`.
    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    /// Positions (not observation indices) of the neighbors of position `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn num_neighbors(&self) -> usize {
        self.num_neighbors
    }

    pub fn len(&self) -> usize {
        self.ordering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordering.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Up to `m` nearest candidates to `target`, sorted by (distance, tie key).
fn nearest<I>(locs: &Locations, target: &[f64], candidates: I, m: usize) -> Vec<usize>
where
    I: Iterator<Item = (usize, usize)>,
{
    // (squared distance, tie key, candidate)
    let mut c: Vec<(f64, usize, usize)> = candidates
        .map(|(cand, point)| (sq_dist(locs.point(point), target), point, cand))
        .collect();
    let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if c.len() > m {
        c.select_nth_unstable_by(m - 1, cmp);
        c.truncate(m);
    }
    c.sort_unstable_by(cmp);
    c.into_iter().map(|x| x.2).collect()
}

/// Exact nearest previously-ordered neighbors; distance ties go to the lower
/// observation index.
pub fn build_neighbors(locations: &Locations, num_neighbors: usize, ordering: Ordering) -> Result<NeighborSets> {
    let n = locations.len();
    if n == 0 || num_neighbors == 0 {
        return Err(Error::invalid("neighbor search needs n >= 1 and at least one neighbor"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Ordering::RandomPermutation(seed) = ordering {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let neighbors = par::map_range(n, |i| {
        nearest(
            locations,
            locations.point(order[i]),
            (0..i).map(|p| (p, order[p])),
            num_neighbors,
        )
    });
    Ok(NeighborSets {
        ordering: order,
        neighbors,
        num_neighbors,
    })
}

/// Single-GP response covariance over a set of points.
#[derive(Clone, Debug)]
struct GpPoints {
    locs: Locations,
    z: Vec<f64>,
    /// Whether the point carries the error variance (observed responses do,
    /// latent prediction targets do not).
    nugget: Vec<bool>,
    kernel: Kernel,
}

#[derive(Clone, Copy, Debug)]
struct Theta {
    sigma2: f64,
    var: f64,
    range: f64,
}

impl GpPoints {
    fn from_design(design: &RandomEffectsDesign) -> Result<Self> {
        if design.single_gp().is_none() {
            return Err(Error::invalid(
                "the Vecchia approximation needs a design with a single GP component",
            ));
        }
        match &design.data()[0] {
            ComponentData::Gp {
                locations,
                kernel,
                covariate,
            } => Ok(Self {
                locs: locations.clone(),
                z: covariate.clone().unwrap_or_else(|| vec![1.0; locations.len()]),
                nugget: vec![true; locations.len()],
                kernel: *kernel,
            }),
            ComponentData::Grouped { .. } => unreachable!(),
        }
    }

    fn with_targets(&self, locs: &Locations, z: Option<&[f64]>, latent: bool) -> Result<Self> {
        if let Some(z) = z {
            check_len("prediction covariate length", locs.len(), z.len())?;
        }
        let mut out = self.clone();
        out.locs = self.locs.concat(locs)?;
        match z {
            Some(z) => out.z.extend_from_slice(z),
            None => out.z.extend(std::iter::repeat_n(1.0, locs.len())),
        }
        out.nugget.extend(std::iter::repeat_n(!latent, locs.len()));
        Ok(out)
    }

    fn cov(&self, th: &Theta, i: usize, j: usize) -> f64 {
        let d = sq_dist(self.locs.point(i), self.locs.point(j)).sqrt();
        let mut c = self.z[i] * self.z[j] * self.kernel.covariance(th.var, th.range, d);
        if i == j && self.nugget[i] {
            c += th.sigma2;
        }
        c
    }

    /// Derivative with respect to parameter `k` of `[σ², σ₁², ρ]`.
    fn dcov(&self, th: &Theta, k: usize, i: usize, j: usize) -> f64 {
        let d = sq_dist(self.locs.point(i), self.locs.point(j)).sqrt();
        match k {
            0 => f64::from(u8::from(i == j && self.nugget[i])),
            1 => self.z[i] * self.z[j] * self.kernel.correlation(d / th.range),
            _ => self.z[i] * self.z[j] * self.kernel.d_range(th.var, th.range, d),
        }
    }
}

fn theta(design: &RandomEffectsDesign, params: &CovarianceParameters) -> Result<Theta> {
    design.check_params(params)?;
    let (var, range) = design.component_params(params, 0);
    Ok(Theta {
        sigma2: params.error_variance(),
        var,
        range: range.expect("GP component has a range"),
    })
}

/// Conditional regression of one point on its neighbors.
#[derive(Clone, Debug)]
struct RowFactor {
    /// Point indices of the neighbors.
    nb: Vec<usize>,
    a: Vec<f64>,
    d: f64,
    /// `∂A/∂θ_k` and `∂D/∂θ_k`, empty unless requested.
    da: Vec<Vec<f64>>,
    dd: Vec<f64>,
}

fn factorize(c: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let scale = c.diagonal().iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-300);
    let mut jittered = c.clone();
    c.cholesky()
        .or_else(|| {
            for i in 0..jittered.nrows() {
                jittered[(i, i)] += JITTER * scale;
            }
            jittered.cholesky()
        })
        .ok_or_else(|| Error::Singular("neighbor covariance matrix is not positive definite".into()))
}

fn row_factor(pts: &GpPoints, th: &Theta, i: usize, nb: Vec<usize>, derivs: bool) -> Result<RowFactor> {
    let m = nb.len();
    let cii = pts.cov(th, i, i);
    if m == 0 {
        return Ok(RowFactor {
            nb,
            a: Vec::new(),
            d: cii,
            da: if derivs { vec![Vec::new(); 3] } else { Vec::new() },
            dd: if derivs { (0..3).map(|k| pts.dcov(th, k, i, i)).collect() } else { Vec::new() },
        });
    }
    let c = DMatrix::from_fn(m, m, |r, s| pts.cov(th, nb[r], nb[s]));
    let k = DVector::from_fn(m, |r, _| pts.cov(th, nb[r], i));
    let chol = factorize(c)?;
    let a = chol.solve(&k);
    let floor = JITTER * cii.abs().max(1e-300);
    let d = (cii - k.dot(&a)).max(floor);
    let (da, dd) = if derivs {
        let mut da = Vec::with_capacity(3);
        let mut dd = Vec::with_capacity(3);
        for p in 0..3 {
            let dc = DMatrix::from_fn(m, m, |r, s| pts.dcov(th, p, nb[r], nb[s]));
            let dk = DVector::from_fn(m, |r, _| pts.dcov(th, p, nb[r], i));
            let dca = &dc * &a;
            da.push(chol.solve(&(&dk - &dca)).as_slice().to_vec());
            dd.push(pts.dcov(th, p, i, i) - 2.0 * dk.dot(&a) + a.dot(&dca));
        }
        (da, dd)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(RowFactor {
        nb,
        a: a.as_slice().to_vec(),
        d,
        da,
        dd,
    })
}

/// Sparse factors `B`, `D` of the approximate precision `BᵀD⁻¹B`, in the
/// positions of the neighbor ordering.
#[derive(Clone, Debug)]
pub struct VecchiaFactor {
    ordering: Vec<usize>,
    /// Per position; neighbor entries hold positions.
    rows: Vec<RowFactor>,
    params: CovarianceParameters,
    has_derivatives: bool,
}

impl VecchiaFactor {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    pub fn params(&self) -> &CovarianceParameters {
        &self.params
    }

    /// Conditional variances `D` by position.
    pub fn conditional_variances(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.d).collect()
    }

    /// Dense `B` in position order.
    pub fn b_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut b = DMatrix::identity(n, n);
        for (i, r) in self.rows.iter().enumerate() {
            for (&j, &a) in r.nb.iter().zip(&r.a) {
                b[(i, j)] = -a;
            }
        }
        b
    }

    /// Dense `∂B/∂θ_k` and `∂D/∂θ_k` in position order.
    pub fn derivative_dense(&self, k: usize) -> Option<(DMatrix<f64>, Vec<f64>)> {
        if !self.has_derivatives {
            return None;
        }
        let n = self.len();
        let mut b = DMatrix::zeros(n, n);
        for (i, r) in self.rows.iter().enumerate() {
            for (&j, &a) in r.nb.iter().zip(&r.da[k]) {
                b[(i, j)] = -a;
            }
        }
        Some((b, self.rows.iter().map(|r| r.dd[k]).collect()))
    }

    /// `B⁻¹DB⁻ᵀ` mapped back to observation order.
    pub fn dense_covariance(&self) -> DMatrix<f64> {
        let n = self.len();
        let b = self.b_dense();
        let binv = b
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("unit diagonal");
        let d = DVector::from_vec(self.conditional_variances());
        let psi = &binv * DMatrix::from_diagonal(&d) * binv.transpose();
        DMatrix::from_fn(n, n, |i, j| {
            let pi = self.position_of(i);
            let pj = self.position_of(j);
            psi[(pi, pj)]
        })
    }

    /// `BᵀD⁻¹B r` (the approximate `Ψ⁻¹r`), in observation order.
    pub fn precision_mul(&self, r: &[f64]) -> Vec<f64> {
        let e = self.innovations(r);
        let mut out = vec![0.0; self.len()];
        for (i, row) in self.rows.iter().enumerate() {
            let u = e[i] / row.d;
            out[i] += u;
            for (&j, a) in row.nb.iter().zip(&row.a) {
                out[j] -= a * u;
            }
        }
        let mut obs = vec![0.0; self.len()];
        for (pos, &o) in self.ordering.iter().enumerate() {
            obs[o] = out[pos];
        }
        obs
    }

    /// Approximate NLL of a residual vector in observation order.
    pub fn nll(&self, r: &[f64]) -> Result<f64> {
        check_len("residual length", self.len(), r.len())?;
        Ok(evaluate(self, r, Need::Value)?.nll())
    }

    fn position_of(&self, obs: usize) -> usize {
        self.ordering.iter().position(|&o| o == obs).expect("observation in ordering")
    }

    /// `B r` in positions, with `r` in observation order.
    fn innovations(&self, r: &[f64]) -> Vec<f64> {
        let rp: Vec<f64> = self.ordering.iter().map(|&o| r[o]).collect();
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| rp[i] - row.nb.iter().zip(&row.a).map(|(&j, a)| a * rp[j]).sum::<f64>())
            .collect()
    }
}

/// Computes `B`, `D` and, when `derivatives` is set, their parameter derivatives.
pub fn compute_factor(
    design: &RandomEffectsDesign,
    params: &CovarianceParameters,
    neighbors: &NeighborSets,
    derivatives: bool,
) -> Result<VecchiaFactor> {
    let pts = GpPoints::from_design(design)?;
    check_len("neighbor sets", design.n(), neighbors.len())?;
    let th = theta(design, params)?;
    let order = &neighbors.ordering;
    let rows = par::map_range(order.len(), |i| {
        let nb_points: Vec<usize> = neighbors.neighbors[i].iter().map(|&p| order[p]).collect();
        row_factor(&pts, &th, order[i], nb_points, derivatives).map(|mut r| {
            r.nb.clone_from(&neighbors.neighbors[i]);
            r
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(VecchiaFactor {
        ordering: order.clone(),
        rows,
        params: params.clone(),
        has_derivatives: derivatives,
    })
}

fn residual(y: &[f64], f: &[f64], n: usize) -> Result<Vec<f64>> {
    check_len("response length", n, y.len())?;
    check_len("mean vector length", n, f.len())?;
    Ok(y.iter().zip(f).map(|(a, b)| a - b).collect())
}

/// Approximate negative log-likelihood.
pub fn vecchia_nll(y: &[f64], f: &[f64], factor: &VecchiaFactor) -> Result<f64> {
    let r = residual(y, f, factor.len())?;
    Ok(evaluate(factor, &r, Need::Value)?.nll())
}

/// Gradient of [`vecchia_nll`] on the original parameter scale.
pub fn vecchia_grad_theta(y: &[f64], f: &[f64], factor: &VecchiaFactor) -> Result<Vec<f64>> {
    let r = residual(y, f, factor.len())?;
    let ev = evaluate(factor, &r, Need::Gradient)?;
    Ok(crate::likelihood::from_log_gradient(&ev.log_gradient(), &factor.params))
}

/// Fisher information of the approximate model on the original scale.
pub fn vecchia_fisher_information(factor: &VecchiaFactor) -> Result<DMatrix<f64>> {
    let info = fisher(factor)?;
    Ok(info)
}

fn require_derivatives(factor: &VecchiaFactor) -> Result<()> {
    if factor.has_derivatives {
        Ok(())
    } else {
        Err(Error::invalid("factor was computed without derivatives"))
    }
}

fn evaluate(factor: &VecchiaFactor, r: &[f64], need: Need) -> Result<CovEvaluation> {
    let n = factor.len();
    let e = factor.innovations(r);
    let quad: f64 = e.iter().zip(&factor.rows).map(|(e, row)| e * e / row.d).sum();
    let log_det: f64 = factor.rows.iter().map(|row| row.d.ln()).sum();
    let q = factor.params.len();
    let mut out = CovEvaluation {
        n,
        quad,
        log_det,
        log_grad_quad: vec![0.0; q],
        log_grad_trace: vec![0.0; q],
        log_fisher: None,
    };
    if !out.nll().is_finite() {
        return Err(Error::Numerical("non-finite Vecchia likelihood".into()));
    }
    if need == Need::Value {
        return Ok(out);
    }
    require_derivatives(factor)?;
    let rp: Vec<f64> = factor.ordering.iter().map(|&o| r[o]).collect();
    let theta = factor.params.values();
    for k in 0..q {
        // L = ½ eᵀD⁻¹e + ½ Σ log D with ∂e = −∂A r
        let mut gq = 0.0;
        let mut gt = 0.0;
        for (i, row) in factor.rows.iter().enumerate() {
            let u = e[i] / row.d;
            let de: f64 = -row.nb.iter().zip(&row.da[k]).map(|(&j, a)| a * rp[j]).sum::<f64>();
            gq += u * de - 0.5 * u * u * row.dd[k];
            gt += 0.5 * row.dd[k] / row.d;
        }
        out.log_grad_quad[k] = theta[k] * gq;
        out.log_grad_trace[k] = theta[k] * gt;
    }
    if need == Need::Fisher {
        let info = fisher(factor)?;
        out.log_fisher = Some(DMatrix::from_fn(q, q, |k, l| theta[k] * info[(k, l)] * theta[l]));
    }
    Ok(out)
}

/// `I_kl = Σ_ij D_i⁻¹ G_k,ij G_l,ij D_j + ½ Σ_i D_i⁻² ∂D_k,i ∂D_l,i` with
/// `G_k = ∂B_k B⁻¹`, one row of `G` at a time.
fn fisher(factor: &VecchiaFactor) -> Result<DMatrix<f64>> {
    require_derivatives(factor)?;
    let q = factor.params.len();
    let rows = &factor.rows;
    let contributions = par::map_range(rows.len(), |i| {
        let row = &rows[i];
        let mut c = DMatrix::<f64>::zeros(q, q);
        for k in 0..q {
            for l in k..q {
                c[(k, l)] = 0.5 * row.dd[k] * row.dd[l] / (row.d * row.d);
            }
        }
        if row.nb.is_empty() {
            return c;
        }
        // solve g B = ∂B_k[i, ·]
        let top = *row.nb.iter().max().expect("non-empty");
        let mut g = vec![vec![0.0; top + 1]; q];
        for (k, gk) in g.iter_mut().enumerate() {
            for (&j, a) in row.nb.iter().zip(&row.da[k]) {
                gk[j] = -a;
            }
            for p in (0..=top).rev() {
                let v = gk[p];
                if v != 0.0 {
                    for (&j, a) in rows[p].nb.iter().zip(&rows[p].a) {
                        gk[j] += v * a;
                    }
                }
            }
        }
        for k in 0..q {
            for l in k..q {
                let s: f64 = (0..=top).map(|j| g[k][j] * g[l][j] * rows[j].d).sum();
                c[(k, l)] += s / row.d;
            }
        }
        c
    });
    let mut info = DMatrix::zeros(q, q);
    for c in contributions {
        info += c;
    }
    for k in 0..q {
        for l in 0..k {
            info[(k, l)] = info[(l, k)];
        }
    }
    Ok(info)
}

/// Vecchia likelihood of a residual vector; neighbor sets are fixed at
/// construction because they depend only on the locations.
pub struct VecchiaObjective<'a> {
    design: &'a RandomEffectsDesign,
    neighbors: NeighborSets,
    residual: Vec<f64>,
}

impl<'a> VecchiaObjective<'a> {
    pub fn new(design: &'a RandomEffectsDesign, neighbors: NeighborSets, residual: Vec<f64>) -> Result<Self> {
        GpPoints::from_design(design)?;
        check_len("residual length", design.n(), residual.len())?;
        check_len("neighbor sets", design.n(), neighbors.len())?;
        Ok(Self {
            design,
            neighbors,
            residual,
        })
    }

    pub fn neighbors(&self) -> &NeighborSets {
        &self.neighbors
    }
}

impl CovObjective for VecchiaObjective<'_> {
    fn n(&self) -> usize {
        self.design.n()
    }

    fn num_params(&self) -> usize {
        self.design.num_params()
    }

    fn variance_mask(&self) -> Vec<bool> {
        self.design.variance_mask()
    }

    fn evaluate(&self, params: &CovarianceParameters, need: Need) -> Result<CovEvaluation> {
        let factor = compute_factor(self.design, params, &self.neighbors, need != Need::Value)?;
        evaluate(&factor, &self.residual, need)
    }
}

/// Prediction targets for [`vecchia_predict`].
#[derive(Clone, Copy, Debug)]
pub struct VecchiaTargets<'a> {
    pub locations: &'a Locations,
    pub covariate: Option<&'a [f64]>,
    /// Fixed-effects mean `F(X_p)` at the targets.
    pub mean: &'a [f64],
}

/// Predictive distribution at new locations under the Vecchia approximation.
///
/// `residual` is `y − F(X)` on the training data and `neighbors` the training
/// conditioning sets (reused for the observations in `PredictionFirst` mode).
#[allow(clippy::too_many_arguments)]
pub fn vecchia_predict(
    design: &RandomEffectsDesign,
    params: &CovarianceParameters,
    neighbors: &NeighborSets,
    residual: &[f64],
    targets: VecchiaTargets<'_>,
    mode: VecchiaPredictionMode,
    num_neighbors_pred: usize,
    latent: bool,
    full_covariance: bool,
) -> Result<PredictiveDistribution> {
    if num_neighbors_pred == 0 {
        return Err(Error::invalid("prediction neighbor count must be at least 1"));
    }
    let n = design.n();
    check_len("residual length", n, residual.len())?;
    check_len("neighbor sets", n, neighbors.len())?;
    let np = targets.locations.len();
    check_len("prediction mean length", np, targets.mean.len())?;
    let base = GpPoints::from_design(design)?;
    check_len("location dimension", base.locs.dim(), targets.locations.dim())?;
    let pts = base.with_targets(targets.locations, targets.covariate, latent)?;
    let th = theta(design, params)?;
    let m_pred = num_neighbors_pred.min(n + np);

    match mode {
        VecchiaPredictionMode::ObservedOnlyConditioning => {
            let rows = par::map_range(np, |p| {
                let nb = nearest(&pts.locs, pts.locs.point(n + p), (0..n).map(|j| (j, j)), m_pred);
                row_factor(&pts, &th, n + p, nb, false)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mean = rows
                .iter()
                .zip(targets.mean)
                .map(|(row, f)| f + row.nb.iter().zip(&row.a).map(|(&j, a)| a * residual[j]).sum::<f64>())
                .collect();
            Ok(PredictiveDistribution {
                mean,
                covariance: PredictiveCovariance::Diagonal(rows.iter().map(|r| r.d).collect()),
                latent,
            })
        }
        VecchiaPredictionMode::ObservedFirst => {
            // neighbors among all observations and earlier targets
            let rows = par::map_range(np, |p| {
                let cands = (0..n + p).map(|j| (j, j));
                let nb = nearest(&pts.locs, pts.locs.point(n + p), cands, m_pred);
                row_factor(&pts, &th, n + p, nb, false)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            // B_p μ' = −B_po r, forward substitution
            let mut mu = vec![0.0; np];
            for p in 0..np {
                let mut s = 0.0;
                for (&j, a) in rows[p].nb.iter().zip(&rows[p].a) {
                    s += a * if j < n { residual[j] } else { mu[j - n] };
                }
                mu[p] = s;
            }
            // X = B_p⁻¹, row by row
            let mut x = DMatrix::<f64>::zeros(np, np);
            for p in 0..np {
                x[(p, p)] = 1.0;
                for (&j, a) in rows[p].nb.iter().zip(&rows[p].a) {
                    if j >= n {
                        let q = j - n;
                        for c in 0..=q {
                            x[(p, c)] += a * x[(q, c)];
                        }
                    }
                }
            }
            let d: Vec<f64> = rows.iter().map(|r| r.d).collect();
            let covariance = if full_covariance {
                let xd = DMatrix::from_fn(np, np, |i, j| x[(i, j)] * d[j]);
                let mut xi = xd * x.transpose();
                symmetrize(&mut xi);
                PredictiveCovariance::Dense(xi)
            } else {
                PredictiveCovariance::Diagonal(
                    (0..np)
                        .map(|p| (0..=p).map(|c| x[(p, c)] * x[(p, c)] * d[c]).sum())
                        .collect(),
                )
            };
            Ok(PredictiveDistribution {
                mean: mu.iter().zip(targets.mean).map(|(m, f)| f + m).collect(),
                covariance,
                latent,
            })
        }
        VecchiaPredictionMode::PredictionFirst => {
            // targets in input order, then observations in training order;
            // point indices: observations 0..n, targets n..n+np
            let pred_rows = par::map_range(np, |p| {
                let cands = (0..p).map(|q| (n + q, n + q));
                let nb = nearest(&pts.locs, pts.locs.point(n + p), cands, m_pred);
                row_factor(&pts, &th, n + p, nb, false)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            // observations keep their training sets and add the nearest targets
            let order = neighbors.ordering();
            let m_tgt = neighbors.num_neighbors().min(np);
            let obs_rows = par::map_range(n, |i| {
                let cands = (0..np).map(|q| (n + q, n + q));
                let mut nb = nearest(&pts.locs, pts.locs.point(order[i]), cands, m_tgt);
                nb.extend(neighbors.neighbors(i).iter().map(|&p| order[p]));
                row_factor(&pts, &th, order[i], nb, false)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut qpp = DMatrix::<f64>::zeros(np, np);
            let mut w = vec![0.0; np];
            let mut b_row: Vec<(usize, f64)> = Vec::new();
            for (p, row) in pred_rows.iter().enumerate() {
                b_row.clear();
                b_row.push((p, 1.0));
                b_row.extend(row.nb.iter().zip(&row.a).map(|(&j, a)| (j - n, -a)));
                add_outer(&mut qpp, &b_row, 1.0 / row.d);
            }
            for (i, row) in obs_rows.iter().enumerate() {
                b_row.clear();
                let mut v = residual[order[i]];
                for (&j, a) in row.nb.iter().zip(&row.a) {
                    if j >= n {
                        b_row.push((j - n, -a));
                    } else {
                        v -= a * residual[j];
                    }
                }
                if b_row.is_empty() {
                    continue;
                }
                add_outer(&mut qpp, &b_row, 1.0 / row.d);
                for &(j, b) in &b_row {
                    w[j] += b * v / row.d;
                }
            }
            symmetrize(&mut qpp);
            let chol = qpp
                .cholesky()
                .ok_or_else(|| Error::Singular("prediction precision is not positive definite".into()))?;
            let shift = chol.solve(&DVector::from_vec(w));
            let xi = chol.inverse();
            let covariance = if full_covariance {
                let mut xi = xi;
                symmetrize(&mut xi);
                PredictiveCovariance::Dense(xi)
            } else {
                PredictiveCovariance::Diagonal(xi.diagonal().iter().copied().collect())
            };
            Ok(PredictiveDistribution {
                mean: targets.mean.iter().zip(shift.iter()).map(|(f, s)| f - s).collect(),
                covariance,
                latent,
            })
        }
    }
}

fn add_outer(m: &mut DMatrix<f64>, entries: &[(usize, f64)], scale: f64) {
    for &(i, a) in entries {
        for &(j, b) in entries {
            m[(i, j)] += scale * a * b;
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
