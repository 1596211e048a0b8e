//! Gaussian marginal likelihood of the covariance parameters and the inner
//! optimizer that minimizes it for a fixed mean.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covmodel::{dot, psi_derivative, CovarianceParameters, ParamRole, PsiOperator, RandomEffectsDesign};
use crate::error::{check_len, Error, Result};

/// Negative log-likelihood together with its derivative pieces.
///
/// Gradient and Fisher quantities are stored on the log-parameter scale, split
/// into the quadratic-form part `−½θ_k r̃ᵀ∂Ψ_k r̃` and the trace part
/// `½θ_k tr(Ψ⁻¹∂Ψ_k)`. Scaling every variance parameter by `c` divides the
/// quadratic parts by `c` and leaves the trace parts unchanged, which is what
/// makes the error-variance profiling cheap.
#[derive(Clone, Debug)]
pub struct CovEvaluation {
    pub n: usize,
    /// `rᵀΨ⁻¹r`
    pub quad: f64,
    pub log_det: f64,
    pub log_grad_quad: Vec<f64>,
    pub log_grad_trace: Vec<f64>,
    /// Fisher information on the log scale, `diag(θ) I diag(θ)`.
    pub log_fisher: Option<DMatrix<f64>>,
}

impl CovEvaluation {
    pub fn nll(&self) -> f64 {
        0.5 * self.quad + 0.5 * self.log_det + 0.5 * self.n as f64 * (2.0 * PI).ln()
    }

    pub fn log_gradient(&self) -> Vec<f64> {
        self.log_grad_quad
            .iter()
            .zip(&self.log_grad_trace)
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Values after multiplying every variance parameter by `c`.
    pub fn rescaled(&self, c: f64) -> CovEvaluation {
        CovEvaluation {
            n: self.n,
            quad: self.quad / c,
            log_det: self.log_det + self.n as f64 * c.ln(),
            log_grad_quad: self.log_grad_quad.iter().map(|g| g / c).collect(),
            log_grad_trace: self.log_grad_trace.clone(),
            log_fisher: self.log_fisher.clone(),
        }
    }

    fn add(&mut self, other: &CovEvaluation) {
        self.n += other.n;
        self.quad += other.quad;
        self.log_det += other.log_det;
        for (a, b) in self.log_grad_quad.iter_mut().zip(&other.log_grad_quad) {
            *a += b;
        }
        for (a, b) in self.log_grad_trace.iter_mut().zip(&other.log_grad_trace) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut self.log_fisher, &other.log_fisher) {
            *a += b;
        }
    }
}

/// What an evaluation needs to compute beyond the NLL.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Need {
    Value,
    Gradient,
    Fisher,
}

/// A negative log-likelihood in the covariance parameters.
pub trait CovObjective: Sync {
    fn n(&self) -> usize;
    fn num_params(&self) -> usize;
    fn variance_mask(&self) -> Vec<bool>;
    fn evaluate(&self, params: &CovarianceParameters, need: Need) -> Result<CovEvaluation>;
}

/// Exact likelihood of residuals `r = y − F` under a design.
pub struct ExactObjective<'a> {
    design: &'a RandomEffectsDesign,
    residual: Vec<f64>,
}

impl<'a> ExactObjective<'a> {
    pub fn new(design: &'a RandomEffectsDesign, residual: Vec<f64>) -> Result<Self> {
        check_len("residual length", design.n(), residual.len())?;
        if residual.iter().any(|r| !r.is_finite()) {
            return Err(Error::invalid("residuals must be finite"));
        }
        Ok(Self { design, residual })
    }

    pub fn from_response(design: &'a RandomEffectsDesign, y: &[f64], f: &[f64]) -> Result<Self> {
        check_len("mean vector length", y.len(), f.len())?;
        Self::new(design, y.iter().zip(f).map(|(a, b)| a - b).collect())
    }
}

impl CovObjective for ExactObjective<'_> {
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
        let psi = PsiOperator::assemble(self.design, params)?;
        evaluate_exact(self.design, params, &psi, &self.residual, need)
    }
}

/// Sum of independent likelihood blocks sharing one parameter vector.
pub struct BlockObjective<'a> {
    blocks: Vec<Box<dyn CovObjective + 'a>>,
}

impl<'a> BlockObjective<'a> {
    pub fn new(blocks: Vec<Box<dyn CovObjective + 'a>>) -> Result<Self> {
        let q = blocks
            .first()
            .ok_or_else(|| Error::invalid("block objective needs at least one block"))?
            .num_params();
        for b in &blocks {
            check_len("parameters per block", q, b.num_params())?;
        }
        Ok(Self { blocks })
    }
}

impl CovObjective for BlockObjective<'_> {
    fn n(&self) -> usize {
        self.blocks.iter().map(|b| b.n()).sum()
    }

    fn num_params(&self) -> usize {
        self.blocks[0].num_params()
    }

    fn variance_mask(&self) -> Vec<bool> {
        self.blocks[0].variance_mask()
    }

    fn evaluate(&self, params: &CovarianceParameters, need: Need) -> Result<CovEvaluation> {
        let evals = crate::par::map_slice(&self.blocks, |b| b.evaluate(params, need));
        let mut iter = evals.into_iter();
        let mut total = iter.next().expect("non-empty")?;
        for e in iter {
            total.add(&e?);
        }
        Ok(total)
    }
}

/// Evaluates the exact likelihood given an assembled Ψ.
pub(crate) fn evaluate_exact(
    design: &RandomEffectsDesign,
    params: &CovarianceParameters,
    psi: &PsiOperator,
    residual: &[f64],
    need: Need,
) -> Result<CovEvaluation> {
    let alpha = psi.solve(residual);
    let quad = dot(residual, &alpha);
    let q = design.num_params();
    let mut out = CovEvaluation {
        n: design.n(),
        quad,
        log_det: psi.log_det(),
        log_grad_quad: vec![0.0; q],
        log_grad_trace: vec![0.0; q],
        log_fisher: None,
    };
    if !out.nll().is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite likelihood at parameters {:?}",
            params.values()
        )));
    }
    if need == Need::Value {
        return Ok(out);
    }
    let theta = params.values();
    let (grad_quad, grad_trace, fisher) = match psi.woodbury_traces() {
        Some(tr) => woodbury_derivatives(design, psi, &alpha, &tr, need == Need::Fisher),
        None => dense_derivatives(design, params, psi, &alpha, need == Need::Fisher)?,
    };
    for k in 0..q {
        out.log_grad_quad[k] = theta[k] * grad_quad[k];
        out.log_grad_trace[k] = theta[k] * grad_trace[k];
    }
    out.log_fisher = fisher.map(|i| DMatrix::from_fn(q, q, |k, l| theta[k] * i[(k, l)] * theta[l]));
    Ok(out)
}

type Derivatives = (Vec<f64>, Vec<f64>, Option<DMatrix<f64>>);

/// Grouped designs: every `∂Ψ/∂θ_k` is either `I` or `Z_cZ_cᵀ`, so all traces
/// reduce to random-effect-space quantities.
fn woodbury_derivatives(
    design: &RandomEffectsDesign,
    psi: &PsiOperator,
    alpha: &[f64],
    tr: &crate::covmodel::WoodburyTraces,
    fisher: bool,
) -> Derivatives {
    let q = design.num_params();
    let u = psi.zt_mul(alpha);
    let ranges: Vec<std::ops::Range<usize>> = design
        .components()
        .iter()
        .zip(design.offsets())
        .map(|(c, &o)| o..o + c.dim())
        .collect();
    let mut gq = vec![0.0; q];
    let mut gt = vec![0.0; q];
    // component index of each parameter (None for σ²)
    let comp_of: Vec<Option<usize>> = design
        .param_roles()
        .iter()
        .map(|r| match *r {
            ParamRole::Variance { component } => Some(component),
            _ => None,
        })
        .collect();
    for k in 0..q {
        match comp_of[k] {
            None => {
                gq[k] = -0.5 * dot(alpha, alpha);
                gt[k] = 0.5 * tr.trace_inv;
            }
            Some(c) => {
                gq[k] = -0.5 * u[ranges[c].clone()].iter().map(|v| v * v).sum::<f64>();
                gt[k] = 0.5 * ranges[c].clone().map(|j| tr.effect_precision.get(j, j)).sum::<f64>();
            }
        }
    }
    let info = fisher.then(|| {
        let mut info = DMatrix::zeros(q, q);
        for k in 0..q {
            for l in k..q {
                let v = match (comp_of[k], comp_of[l]) {
                    (None, None) => 0.5 * tr.trace_inv2,
                    (None, Some(c)) | (Some(c), None) => {
                        0.5 * ranges[c].clone().map(|j| tr.effect_precision2.get(j, j)).sum::<f64>()
                    }
                    (Some(a), Some(b)) => {
                        let mut s = 0.0;
                        for i in ranges[a].clone() {
                            for j in ranges[b].clone() {
                                let v = tr.effect_precision.get(i, j);
                                s += v * v;
                            }
                        }
                        0.5 * s
                    }
                };
                info[(k, l)] = v;
                info[(l, k)] = v;
            }
        }
        info
    });
    (gq, gt, info)
}

fn dense_derivatives(
    design: &RandomEffectsDesign,
    params: &CovarianceParameters,
    psi: &PsiOperator,
    alpha: &[f64],
    fisher: bool,
) -> Result<Derivatives> {
    let q = design.num_params();
    let n = design.n();
    let pinv = psi.inverse();
    let a = DVector::from_column_slice(alpha);
    let derivs: Vec<DMatrix<f64>> = (0..q)
        .map(|k| psi_derivative(design, params, k))
        .collect::<Result<_>>()?;
    let mut gq = vec![0.0; q];
    let mut gt = vec![0.0; q];
    for (k, d) in derivs.iter().enumerate() {
        gq[k] = -0.5 * a.dot(&(d * &a));
        gt[k] = 0.5 * pinv.component_mul(d).sum();
    }
    let info = if fisher {
        // ∂Ψ/∂σ² = I
        let prods: Vec<DMatrix<f64>> = derivs
            .iter()
            .enumerate()
            .map(|(k, d)| if k == 0 { pinv.clone() } else { &pinv * d })
            .collect();
        let mut info = DMatrix::zeros(q, q);
        for k in 0..q {
            for l in k..q {
                // tr(AB) = Σ_ij A_ij B_ji
                let v = 0.5 * prods[k].component_mul(&prods[l].transpose()).sum();
                info[(k, l)] = v;
                info[(l, k)] = v;
            }
        }
        Some(info)
    } else {
        None
    };
    let _ = n;
    Ok((gq, gt, info))
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// Residual, factorized Ψ and the NLL for one parameter value.
pub struct LikelihoodState {
    pub residual: Vec<f64>,
    pub psi: PsiOperator,
    pub nll: f64,
    /// `Ψ⁻¹r`
    pub psi_inv_residual: Vec<f64>,
}

impl LikelihoodState {
    pub fn new(y: &[f64], f: &[f64], design: &RandomEffectsDesign, params: &CovarianceParameters) -> Result<Self> {
        check_len("response length", design.n(), y.len())?;
        check_len("mean vector length", design.n(), f.len())?;
        let residual: Vec<f64> = y.iter().zip(f).map(|(a, b)| a - b).collect();
        let psi = PsiOperator::assemble(design, params)?;
        let psi_inv_residual = psi.solve(&residual);
        let nll = 0.5 * dot(&residual, &psi_inv_residual)
            + 0.5 * psi.log_det()
            + 0.5 * design.n() as f64 * (2.0 * PI).ln();
        if !nll.is_finite() {
            return Err(Error::Numerical("non-finite likelihood".into()));
        }
        Ok(Self {
            residual,
            psi,
            nll,
            psi_inv_residual,
        })
    }
}

/// Negative log-likelihood `L(y, F, θ)`.
pub fn nll(y: &[f64], f: &[f64], design: &RandomEffectsDesign, params: &CovarianceParameters) -> Result<f64> {
    Ok(LikelihoodState::new(y, f, design, params)?.nll)
}

/// `∂L/∂θ_k` on the original parameter scale.
pub fn grad_theta(y: &[f64], f: &[f64], design: &RandomEffectsDesign, params: &CovarianceParameters) -> Result<Vec<f64>> {
    let ev = ExactObjective::from_response(design, y, f)?.evaluate(params, Need::Gradient)?;
    Ok(from_log_gradient(&ev.log_gradient(), params))
}

/// Converts a log-scale gradient `θ_k ∂L/∂θ_k` back to the original scale.
pub fn from_log_gradient(log_grad: &[f64], params: &CovarianceParameters) -> Vec<f64> {
    log_grad.iter().zip(params.values()).map(|(g, t)| g / t).collect()
}

/// Log-scale gradient `θ_k ∂L/∂θ_k`.
pub fn to_log_gradient(grad: &[f64], params: &CovarianceParameters) -> Vec<f64> {
    grad.iter().zip(params.values()).map(|(g, t)| g * t).collect()
}

/// Closed-form minimizer of the NLL in `σ²` with all variance ratios fixed.
pub fn profile_sigma2(y: &[f64], f: &[f64], design: &RandomEffectsDesign, params: &CovarianceParameters) -> Result<f64> {
    let state = LikelihoodState::new(y, f, design, params)?;
    if state.residual.iter().all(|r| *r == 0.0) {
        return Err(Error::Numerical("zero residual gives a degenerate error variance".into()));
    }
    let quad = dot(&state.residual, &state.psi_inv_residual);
    Ok(params.error_variance() * quad / design.n() as f64)
}

/// Fisher information on the original parameter scale.
pub fn fisher_information(design: &RandomEffectsDesign, params: &CovarianceParameters) -> Result<DMatrix<f64>> {
    let zero = vec![0.0; design.n()];
    let ev = ExactObjective::new(design, zero)?.evaluate(params, Need::Fisher)?;
    let theta = params.values();
    let lf = ev.log_fisher.expect("requested");
    Ok(DMatrix::from_fn(theta.len(), theta.len(), |k, l| lf[(k, l)] / (theta[k] * theta[l])))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMethod {
    GradientDescentNesterov,
    FisherScoring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: OptimizerMethod,
    pub max_iter: usize,
    /// Tolerance on the ∞-norm of the log-scale gradient of `L/n`.
    pub tolerance: f64,
    /// `None` applies the method's default (on for gradient descent, off for
    /// Fisher scoring).
    pub profile_sigma2: Option<bool>,
    /// Initial step of the halving line search (gradient descent).
    pub learning_rate: f64,
    pub max_halvings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: OptimizerMethod::GradientDescentNesterov,
            max_iter: 1000,
            tolerance: 1e-6,
            profile_sigma2: None,
            learning_rate: 0.1,
            max_halvings: 30,
        }
    }
}

impl OptimizerConfig {
    pub fn fisher_scoring() -> Self {
        Self {
            method: OptimizerMethod::FisherScoring,
            ..Self::default()
        }
    }

    pub fn profiles_sigma2(&self) -> bool {
        self.profile_sigma2
            .unwrap_or(self.method == OptimizerMethod::GradientDescentNesterov)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iter == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid(
                "optimizer needs tolerance > 0, max_iter >= 1 and learning_rate > 0",
            ));
        }
        Ok(())
    }
}

/// Result of [`optimize_covariance`].
#[derive(Clone, Debug)]
pub struct OptimOutcome {
    pub params: CovarianceParameters,
    pub nll: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `L(y, F, θ)` over θ starting from `init`.
pub fn optimize_covariance(
    y: &[f64],
    f: &[f64],
    design: &RandomEffectsDesign,
    init: &CovarianceParameters,
    config: &OptimizerConfig,
) -> Result<OptimOutcome> {
    design.check_params(init)?;
    let obj = ExactObjective::from_response(design, y, f)?;
    optimize(&obj, init, config)
}

/// A point of the search: full parameters, their evaluation, the free
/// coordinates and the scaled objective/gradient restricted to them.
struct Point {
    params: CovarianceParameters,
    eval: CovEvaluation,
    coords: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
}

struct Search<'a> {
    obj: &'a dyn CovObjective,
    mask: Vec<bool>,
    profile: bool,
    need: Need,
    evaluations: usize,
}

impl Search<'_> {
    /// Free coordinates: log θ, or with profiling log-ratios to σ² (ranges stay
    /// on the log scale and σ² itself is dropped).
    fn coords_of(&self, p: &CovarianceParameters) -> Vec<f64> {
        let v = p.values();
        if self.profile {
            (1..v.len())
                .map(|k| if self.mask[k] { (v[k] / v[0]).ln() } else { v[k].ln() })
                .collect()
        } else {
            v.iter().map(|x| x.ln()).collect()
        }
    }

    fn params_of(&self, coords: &[f64], sigma2: f64) -> Result<CovarianceParameters> {
        if self.profile {
            let mut v = Vec::with_capacity(coords.len() + 1);
            v.push(sigma2);
            for (k, c) in coords.iter().enumerate() {
                v.push(if self.mask[k + 1] { sigma2 * c.exp() } else { c.exp() });
            }
            CovarianceParameters::new(v)
        } else {
            CovarianceParameters::from_log(coords)
        }
    }

    fn eval(&mut self, params: CovarianceParameters) -> Result<Point> {
        self.evaluations += 1;
        let n = self.obj.n() as f64;
        let (params, eval) = if self.profile {
            let ev = self.obj.evaluate(&params, self.need)?;
            let c = ev.quad / n;
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Numerical("degenerate profiled error variance".into()));
            }
            (params.scale_variances(&self.mask, c)?, ev.rescaled(c))
        } else {
            let ev = self.obj.evaluate(&params, self.need)?;
            (params, ev)
        };
        let value = eval.nll() / n;
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite likelihood".into()));
        }
        let full: Vec<f64> = eval.log_gradient().iter().map(|g| g / n).collect();
        let grad = if self.profile { full[1..].to_vec() } else { full };
        Ok(Point {
            coords: self.coords_of(&params),
            params,
            eval,
            value,
            grad,
        })
    }

    fn eval_coords(&mut self, coords: &[f64], sigma2: f64) -> Result<Point> {
        let p = self.params_of(coords, sigma2)?;
        self.eval(p)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Minimizes a covariance objective from `init` with the configured method.
///
/// Every accepted step satisfies an Armijo decrease condition, so the returned
/// NLL never exceeds the NLL at `init` (after profiling, when enabled).
pub fn optimize(obj: &dyn CovObjective, init: &CovarianceParameters, config: &OptimizerConfig) -> Result<OptimOutcome> {
    config.validate()?;
    check_len("covariance parameter count", obj.num_params(), init.len())?;
    let profile = config.profiles_sigma2() && obj.num_params() > 1;
    let mut search = Search {
        obj,
        mask: obj.variance_mask(),
        profile,
        need: match config.method {
            OptimizerMethod::GradientDescentNesterov => Need::Gradient,
            OptimizerMethod::FisherScoring => Need::Fisher,
        },
        evaluations: 0,
    };
    // with a single parameter and profiling on, σ² has a closed form
    if config.profiles_sigma2() && obj.num_params() == 1 {
        let ev = obj.evaluate(init, Need::Value)?;
        let c = ev.quad / obj.n() as f64;
        let params = if c > 0.0 && c.is_finite() {
            init.scale_variances(&search.mask, c)?
        } else {
            init.clone()
        };
        let nll = obj.evaluate(&params, Need::Value)?.nll();
        return Ok(OptimOutcome {
            params,
            nll,
            iterations: 0,
            evaluations: 2,
            converged: true,
        });
    }
    let start = search.eval(init.clone())?;
    match config.method {
        OptimizerMethod::GradientDescentNesterov => nesterov(&mut search, start, config),
        OptimizerMethod::FisherScoring => fisher_scoring(&mut search, start, config),
    }
}

const ARMIJO: f64 = 1e-4;

fn nesterov(search: &mut Search<'_>, start: Point, config: &OptimizerConfig) -> Result<OptimOutcome> {
    let mut current = start;
    let mut prev_coords = current.coords.clone();
    let mut momentum_step = 0usize;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iter {
        if inf_norm(&current.grad) <= config.tolerance {
            converged = true;
            break;
        }
        let mut lookahead = None;
        if momentum_step > 0 {
            let mu = momentum_step as f64 / (momentum_step as f64 + 3.0);
            let y: Vec<f64> = current
                .coords
                .iter()
                .zip(&prev_coords)
                .map(|(x, p)| x + mu * (x - p))
                .collect();
            // a lookahead that increases the objective restarts the momentum
            if let Ok(p) = search.eval_coords(&y, current.params.error_variance()) {
                if p.value <= current.value {
                    lookahead = Some(p);
                }
            }
        }
        let mut next = match &lookahead {
            Some(p) => line_search_gd(search, p, config).ok().flatten(),
            None => None,
        };
        if next.is_none() {
            momentum_step = 0;
            next = line_search_gd(search, &current, config).map_err(|reason| Error::Optimizer {
                reason,
                last_valid: current.params.values().to_vec(),
            })?;
        }
        match next {
            Some(p) => {
                prev_coords = std::mem::replace(&mut current, p).coords;
                momentum_step += 1;
                iterations += 1;
            }
            None => break,
        }
    }
    Ok(OptimOutcome {
        nll: current.eval.nll(),
        params: current.params,
        iterations,
        evaluations: search.evaluations,
        converged,
    })
}

/// Backtracking gradient step. `Ok(None)` when no candidate gives sufficient
/// decrease; `Err` when every candidate was numerically invalid.
fn line_search_gd(
    search: &mut Search<'_>,
    from: &Point,
    config: &OptimizerConfig,
) -> std::result::Result<Option<Point>, String> {
    let g2: f64 = from.grad.iter().map(|g| g * g).sum();
    let sigma2 = from.params.error_variance();
    let mut lr = config.learning_rate;
    let mut any_valid = false;
    let mut last_err = String::new();
    for _ in 0..=config.max_halvings {
        let cand: Vec<f64> = from.coords.iter().zip(&from.grad).map(|(x, g)| x - lr * g).collect();
        match search.eval_coords(&cand, sigma2) {
            Ok(p) => {
                any_valid = true;
                if p.value <= from.value - ARMIJO * lr * g2 {
                    return Ok(Some(p));
                }
            }
            Err(e) => last_err = e.to_string(),
        }
        lr *= 0.5;
    }
    if any_valid {
        Ok(None)
    } else {
        Err(format!("line search exhausted: {last_err}"))
    }
}

fn fisher_scoring(search: &mut Search<'_>, start: Point, config: &OptimizerConfig) -> Result<OptimOutcome> {
    let mut current = start;
    let mut iterations = 0;
    let mut converged = false;
    let n = search.obj.n() as f64;
    while iterations < config.max_iter {
        if inf_norm(&current.grad) <= config.tolerance {
            converged = true;
            break;
        }
        let full = current.eval.log_fisher.as_ref().expect("Fisher requested") / n;
        let info = if search.profile {
            full.view((1, 1), (full.nrows() - 1, full.ncols() - 1)).into_owned()
        } else {
            full
        };
        let step = match fisher_step(&info, &current.grad) {
            Some(s) => s,
            None => break,
        };
        let slope: f64 = step.iter().zip(&current.grad).map(|(s, g)| s * g).sum();
        let sigma2 = current.params.error_variance();
        let mut lr = 1.0;
        let mut next = None;
        for _ in 0..=config.max_halvings {
            let cand: Vec<f64> = current.coords.iter().zip(&step).map(|(x, s)| x + lr * s).collect();
            if let Ok(p) = search.eval_coords(&cand, sigma2) {
                if p.value <= current.value + ARMIJO * lr * slope.min(0.0) {
                    next = Some(p);
                    break;
                }
            }
            lr *= 0.5;
        }
        match next {
            Some(p) => {
                current = p;
                iterations += 1;
            }
            None => break,
        }
    }
    Ok(OptimOutcome {
        nll: current.eval.nll(),
        params: current.params,
        iterations,
        evaluations: search.evaluations,
        converged,
    })
}

/// Solves `I Δ = −g`, adding a small ridge only when the plain factorization fails.
pub(crate) fn fisher_step(info: &DMatrix<f64>, grad: &[f64]) -> Option<Vec<f64>> {
    let g = DVector::from_column_slice(grad);
    if let Some(ch) = info.clone().cholesky() {
        return Some((-ch.solve(&g)).as_slice().to_vec());
    }
    let q = info.nrows();
    let ridge = 1e-10 * info.trace().abs().max(1e-300) / q as f64;
    let mut reg = info.clone();
    for i in 0..q {
        reg[(i, i)] += ridge;
    }
    reg.cholesky().map(|ch| (-ch.solve(&g)).as_slice().to_vec())
}
