//! Parametric fitters: URE with a free or GLS location, the two empirical
//! Bayes rules, positive-part James-Stein and the oracle references.
//!
//! Every fitter profiles the location out for fixed `λ` (a weighted least
//! squares problem) and minimizes the resulting one-dimensional criterion
//! with [`minimize_lambda`].

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Result, ShrinkError};
use crate::linalg::{check_spd, gls_fit, lstsq, shrink_basis, Metric, ShrinkBasis};
use crate::model::{gls_trace_kernel, GroundTruth, HeteroData, Lambda, ShrinkOperator};
use crate::optimize::{geometric_mean, minimize_lambda};
use crate::risk::{in_l, MembershipSpec};

const EBMOM_MAX_ITER: usize = 200;
const TINY: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    /// `B = λI`, shrinking observations toward `Xᵀβ`.
    I,
    /// `B = λXᵀWX`, shrinking regression coefficients toward `β₀`.
    II { w: DMatrix<f64> },
}

impl Model {
    pub fn model_two(w: DMatrix<f64>) -> Result<Self> {
        check_spd(&w, "prior matrix W")?;
        Ok(Model::II { w })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::I => ModelKind::I,
            Model::II { .. } => ModelKind::II,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    I,
    II,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    Ure,
    UreGls,
    Ebmle,
    Ebmom,
    JsPlus,
    OracleLoss,
    OracleRisk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlsKind {
    Ols,
    Wls,
    Custom,
}

/// Shrinkage location `P_{M,X} Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlsTarget {
    kind: GlsKind,
    metric: Metric,
}

impl GlsTarget {
    pub fn ols() -> Self {
        Self {
            kind: GlsKind::Ols,
            metric: Metric::Identity,
        }
    }

    pub fn wls(a: &DVector<f64>) -> Self {
        Self {
            kind: GlsKind::Wls,
            metric: Metric::Diagonal(a.map(|v| 1.0 / v)),
        }
    }

    pub fn custom(m: DMatrix<f64>) -> Result<Self> {
        check_spd(&m, "metric M")?;
        Ok(Self {
            kind: GlsKind::Custom,
            metric: Metric::Dense(m),
        })
    }

    pub fn kind(&self) -> GlsKind {
        self.kind
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }
}

/// How the fitted rule weighs the observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tuning {
    Lambda(Lambda),
    /// One factor applied to every residual (James-Stein).
    Uniform(f64),
}

/// A fitted parametric rule.
///
/// `objective_value` is the criterion the method minimizes: the URE for the
/// URE fitters, the negative log marginal likelihood (up to the `p log 2π`
/// constant) for EBMLE, the final fixed-point step `|Δλ|` for EBMOM, the
/// statistic `Σ(Y_i − μ̂_i)²/A_i` for James-Stein, and the realized loss or
/// exact risk for the oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricFit {
    pub method: FitMethod,
    pub model: ModelKind,
    pub tuning: Tuning,
    /// `β` with `μ = Xᵀβ` (Model I) or the prior coefficient `β₀` (Model II).
    pub beta: DVector<f64>,
    pub mu: DVector<f64>,
    pub theta_hat: DVector<f64>,
    /// Weight placed on `Y_i` (diagonal of `B(A+B)⁻¹`).
    pub shrink_factor: DVector<f64>,
    pub objective_value: f64,
    pub in_l: bool,
}

impl ParametricFit {
    pub fn lambda(&self) -> Option<Lambda> {
        match self.tuning {
            Tuning::Lambda(l) => Some(l),
            Tuning::Uniform(_) => None,
        }
    }
}

/// Model II quantities shared by every evaluation of a profile.
struct Rotated {
    basis: ShrinkBasis,
    /// `ΛZA⁻¹Y`
    g: DVector<f64>,
    /// `Y − Zᵀg`, which is `A⁻¹`-orthogonal to the row space.
    r0: DVector<f64>,
    zt: DMatrix<f64>,
}

impl Rotated {
    fn new(data: &HeteroData, w: &DMatrix<f64>) -> Result<Self> {
        let basis = shrink_basis(data.x(), data.a(), w)?;
        let g = basis.rotated_wls(data.y());
        let r0 = data.y() - basis.fitted(&g);
        let zt = basis.z.transpose();
        Ok(Self { basis, g, r0, zt })
    }

    fn factors(&self, lambda: Lambda) -> DVector<f64> {
        self.basis.d.map(|d| lambda.data_weight(d))
    }

    fn scale(&self) -> f64 {
        geometric_mean(self.basis.d.iter().copied())
    }

    /// Recovers `γ₀` from `δ = (I−F)γ₀`-type coordinates.
    fn gamma_from_delta(&self, lambda: Lambda, delta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(delta.len(), |i, _| delta[i] / lambda.target_weight(self.basis.d[i]))
    }

    fn operator<'a>(&'a self, a: &'a DVector<f64>, lambda: Lambda) -> ShrinkOperator<'a> {
        ShrinkOperator::model2(a, Cow::Borrowed(&self.basis), lambda)
    }
}

fn finish(
    data: &HeteroData,
    method: FitMethod,
    model: &Model,
    lambda: Lambda,
    beta: DVector<f64>,
    rotated: Option<&Rotated>,
    objective_value: f64,
) -> ParametricFit {
    let mu = data.x().fitted(&beta);
    let (theta_hat, shrink_factor) = match rotated {
        None => {
            let s = data.a().map(|a| lambda.data_weight(a));
            let theta = DVector::from_fn(data.p(), |i, _| match lambda {
                Lambda::Infinite => data.y()[i],
                _ => s[i] * data.y()[i] + lambda.target_weight(data.a()[i]) * mu[i],
            });
            (theta, s)
        }
        Some(rot) => {
            let op = rot.operator(data.a(), lambda);
            (op.shrink(data.y(), &mu), op.diagonal())
        }
    };
    let in_l = in_l(&mu, data.x(), data.y(), &MembershipSpec::default());
    ParametricFit {
        method,
        model: model.kind(),
        tuning: Tuning::Lambda(lambda),
        beta,
        mu,
        theta_hat,
        shrink_factor,
        objective_value,
        in_l,
    }
}

fn rotated_for(data: &HeteroData, model: &Model) -> Result<Option<Rotated>> {
    match model {
        Model::I => Ok(None),
        Model::II { w } => {
            check_len("prior matrix W", data.k(), w.nrows())?;
            Rotated::new(data, w).map(Some)
        }
    }
}

fn ols_beta(data: &HeteroData) -> Result<DVector<f64>> {
    data.ols_fit().map(|(b, _)| b)
}

/// Runs the λ search on a profile returning `(value, β)` and re-evaluates
/// the winner to recover its location.
fn profile_search<F>(profile: F, scale: f64, include_infinity: bool) -> Result<(Lambda, DVector<f64>, f64)>
where
    F: Fn(Lambda) -> Result<(f64, DVector<f64>)>,
{
    let best = minimize_lambda(|l| profile(l).map(|(v, _)| v), scale, include_infinity)?;
    let (value, beta) = profile(best.lambda)?;
    if !value.is_finite() {
        return Err(ShrinkError::NonFinite("profile objective"));
    }
    Ok((best.lambda, beta, value))
}

/// Profiled URE at one `λ`, with the location chosen jointly.
pub fn profile_ure(data: &HeteroData, model: &Model, lambda: Lambda) -> Result<(f64, DVector<f64>)> {
    let rotated = rotated_for(data, model)?;
    ure_profile_point(data, rotated.as_ref(), lambda)
}

fn ure_profile_point(data: &HeteroData, rot: Option<&Rotated>, lambda: Lambda) -> Result<(f64, DVector<f64>)> {
    let p = data.p() as f64;
    let trace_a = data.trace_a();
    match (rot, lambda) {
        (None, Lambda::Infinite) => Ok((trace_a / p, ols_beta(data)?)),
        (None, _) => {
            let a = data.a();
            let weights = a.map(|v| lambda.target_weight(v).powi(2));
            let (beta, mu) = gls_fit(data.x(), data.y(), &weights)?;
            let fit: f64 = (0..data.p()).map(|i| weights[i] * (data.y()[i] - mu[i]).powi(2)).sum();
            let trace: f64 = a.iter().map(|&v| 2.0 * lambda.data_weight(v) * v - v).sum();
            Ok(((fit + trace) / p, beta))
        }
        (Some(rot), _) => {
            let f = rot.factors(lambda);
            let b = &rot.basis;
            let trace: f64 = (0..b.k()).map(|j| 2.0 * f[j] * b.d[j] * b.zzt_diag[j]).sum::<f64>() - trace_a;
            if lambda.is_infinite() {
                return Ok(((rot.r0.norm_squared() + trace) / p, ols_beta(data)?));
            }
            let delta = lstsq(&rot.zt, &(-&rot.r0))?;
            let fit = (&rot.r0 + &rot.zt * &delta).norm_squared();
            let gamma = &rot.g - rot.gamma_from_delta(lambda, &delta);
            Ok(((fit + trace) / p, b.unrotate_coef(&gamma)))
        }
    }
}

fn search_scale(data: &HeteroData, rot: Option<&Rotated>) -> f64 {
    match rot {
        None => geometric_mean(data.a().iter().copied()),
        Some(r) => r.scale(),
    }
}

/// Jointly minimizes the URE over `λ ∈ [0, ∞]` and the location.
pub fn fit_ure(data: &HeteroData, model: &Model) -> Result<ParametricFit> {
    let rot = rotated_for(data, model)?;
    let scale = search_scale(data, rot.as_ref());
    let (lambda, beta, value) = profile_search(|l| ure_profile_point(data, rot.as_ref(), l), scale, true)?;
    Ok(finish(data, FitMethod::Ure, model, lambda, beta, rot.as_ref(), value))
}

/// URE toward `P_{M,X} Y` at one `λ`.
pub fn profile_ure_gls(data: &HeteroData, model: &Model, target: &GlsTarget, lambda: Lambda) -> Result<f64> {
    let rot = rotated_for(data, model)?;
    let ctx = GlsContext::new(data, rot.as_ref(), target)?;
    Ok(ctx.value(data, rot.as_ref(), lambda))
}

struct GlsContext {
    beta: DVector<f64>,
    resid: DVector<f64>,
    pd: DVector<f64>,
    trace_pa: f64,
    /// Diagonal of `ZA⁻¹PAZᵀ` (Model II only).
    kernel_diag: Option<DVector<f64>>,
    gamma: Option<DVector<f64>>,
}

impl GlsContext {
    fn new(data: &HeteroData, rot: Option<&Rotated>, target: &GlsTarget) -> Result<Self> {
        let metric = target.metric();
        metric.validate(data.p())?;
        let (beta, mu) = metric.fit(data.x(), data.y())?;
        let pd = metric.projection_diagonal(data.x())?;
        let trace_pa = pd.dot(data.a());
        let (kernel_diag, gamma) = match rot {
            None => (None, None),
            Some(r) => (
                Some(gls_trace_kernel(&r.basis, data.a(), data.x(), metric)?.diagonal()),
                Some(r.basis.rotate_coef(&beta)),
            ),
        };
        Ok(Self {
            resid: data.y() - mu,
            beta,
            pd,
            trace_pa,
            kernel_diag,
            gamma,
        })
    }

    fn value(&self, data: &HeteroData, rot: Option<&Rotated>, lambda: Lambda) -> f64 {
        let p = data.p() as f64;
        let a = data.a();
        match rot {
            None => {
                let total: f64 = (0..data.p())
                    .map(|i| {
                        let t = lambda.target_weight(a[i]);
                        t * t * self.resid[i].powi(2) + a[i] * (1.0 - 2.0 * t * (1.0 - self.pd[i]))
                    })
                    .sum();
                total / p
            }
            Some(r) => {
                let f = r.factors(lambda);
                let (g, gamma) = (&r.g, self.gamma.as_ref().expect("set for Model II"));
                let coef = DVector::from_fn(f.len(), |j, _| (1.0 - f[j]) * (g[j] - gamma[j]));
                let fit = (&r.r0 + &r.zt * coef).norm_squared();
                let kd = self.kernel_diag.as_ref().expect("set for Model II");
                let b = &r.basis;
                let trace_sa: f64 = (0..b.k()).map(|j| f[j] * b.d[j] * b.zzt_diag[j]).sum();
                let trace_spa: f64 = (0..b.k()).map(|j| f[j] * b.d[j] * kd[j]).sum();
                (fit - data.trace_a() + 2.0 * self.trace_pa + 2.0 * trace_sa - 2.0 * trace_spa) / p
            }
        }
    }
}

/// Minimizes the URE toward the fixed location `P_{M,X} Y` over `λ`.
pub fn fit_ure_gls(data: &HeteroData, model: &Model, target: &GlsTarget) -> Result<ParametricFit> {
    let rot = rotated_for(data, model)?;
    let ctx = GlsContext::new(data, rot.as_ref(), target)?;
    let scale = search_scale(data, rot.as_ref());
    let best = minimize_lambda(|l| Ok(ctx.value(data, rot.as_ref(), l)), scale, true)?;
    Ok(finish(
        data,
        FitMethod::UreGls,
        model,
        best.lambda,
        ctx.beta.clone(),
        rot.as_ref(),
        best.value,
    ))
}

/// Negative log marginal likelihood at one finite `λ`, location profiled.
pub fn profile_ebmle(data: &HeteroData, model: &Model, lambda: Lambda) -> Result<(f64, DVector<f64>)> {
    let rot = rotated_for(data, model)?;
    ebmle_point(data, rot.as_ref(), lambda)
}

fn ebmle_point(data: &HeteroData, rot: Option<&Rotated>, lambda: Lambda) -> Result<(f64, DVector<f64>)> {
    let l = lambda.finite().ok_or(ShrinkError::NonFinite("marginal likelihood at infinite lambda"))?;
    match rot {
        None => {
            let weights = data.a().map(|a| 1.0 / (a + l));
            let (beta, mu) = gls_fit(data.x(), data.y(), &weights)?;
            let value: f64 = (0..data.p())
                .map(|i| weights[i] * (data.y()[i] - mu[i]).powi(2) - weights[i].ln())
                .sum();
            Ok((value, beta))
        }
        Some(r) => {
            // GLS under A + λXᵀWX coincides with WLS for every λ: the prior
            // covariance only adds variance along the row space.
            let beta = r.basis.unrotate_coef(&r.g);
            let op = r.operator(data.a(), lambda);
            let quad = r.r0.dot(&op.apply_inverse_covariance(&r.r0));
            Ok((quad + op.log_det_covariance(), beta))
        }
    }
}

/// Empirical Bayes by maximum marginal likelihood over `λ ∈ [0, ∞)`.
pub fn fit_ebmle(data: &HeteroData, model: &Model) -> Result<ParametricFit> {
    let rot = rotated_for(data, model)?;
    let scale = search_scale(data, rot.as_ref());
    let (lambda, beta, value) = profile_search(|l| ebmle_point(data, rot.as_ref(), l), scale, false)?;
    Ok(finish(data, FitMethod::Ebmle, model, lambda, beta, rot.as_ref(), value))
}

/// Empirical Bayes by the degrees-of-freedom adjusted moment equations.
pub fn fit_ebmom(data: &HeteroData, model: &Model) -> Result<ParametricFit> {
    let (p, k) = (data.p(), data.k());
    if p <= k {
        return Err(ShrinkError::TooFewUnits { method: "EBMOM", p, k });
    }
    let rot = rotated_for(data, model)?;
    let trace_c = match model {
        Model::I => p as f64,
        Model::II { w } => {
            let x = data.x().entries();
            (0..p).map(|i| (x.column(i).transpose() * w * x.column(i))[(0, 0)]).sum()
        }
    };
    let df = p as f64 / (p - k) as f64;
    let trace_a = data.trace_a();
    let location = |l: f64| -> Result<DVector<f64>> {
        match rot.as_ref() {
            None => gls_fit(data.x(), data.y(), &data.a().map(|a| 1.0 / (a + l))).map(|(b, _)| b),
            Some(r) => Ok(r.basis.unrotate_coef(&r.g)),
        }
    };

    let mut beta = ols_beta(data)?;
    let mut lambda = 0.0;
    for _ in 0..EBMOM_MAX_ITER {
        let resid = (data.y() - data.x().fitted(&beta)).norm_squared();
        let next = ((df * resid - trace_a) / trace_c.max(TINY)).max(0.0);
        if !next.is_finite() {
            return Err(ShrinkError::NonFinite("EBMOM update"));
        }
        let step = (next - lambda).abs();
        lambda = next;
        beta = location(lambda)?;
        if step < 1e-10 * (1.0 + lambda) {
            return Ok(finish(
                data,
                FitMethod::Ebmom,
                model,
                Lambda::Finite(lambda),
                beta,
                rot.as_ref(),
                step,
            ));
        }
    }
    Err(ShrinkError::NotConverged {
        method: "EBMOM",
        iterations: EBMOM_MAX_ITER,
        last_lambda: lambda,
    })
}

/// Positive-part James-Stein toward the WLS fit.
pub fn fit_james_stein(data: &HeteroData) -> Result<ParametricFit> {
    let (p, k) = (data.p(), data.k());
    if p <= k + 2 {
        return Err(ShrinkError::TooFewUnits { method: "James-Stein", p, k });
    }
    let (beta, mu) = data.wls_fit()?;
    let resid = data.y() - &mu;
    let stat: f64 = (0..p).map(|i| resid[i].powi(2) / data.a()[i]).sum();
    let factor = if stat <= TINY {
        0.0
    } else {
        (1.0 - (p - k - 2) as f64 / stat).max(0.0)
    };
    let theta_hat = &mu + &resid * factor;
    let in_l = in_l(&mu, data.x(), data.y(), &MembershipSpec::default());
    Ok(ParametricFit {
        method: FitMethod::JsPlus,
        model: ModelKind::I,
        tuning: Tuning::Uniform(factor),
        beta,
        mu,
        theta_hat,
        shrink_factor: DVector::from_element(p, factor),
        objective_value: stat,
        in_l,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    /// Minimizes the realized loss.
    Loss,
    /// Minimizes the exact risk.
    Risk,
}

fn oracle_point(
    data: &HeteroData,
    theta: &DVector<f64>,
    rot: Option<&Rotated>,
    kind: OracleKind,
    lambda: Lambda,
) -> Result<(f64, DVector<f64>)> {
    let p = data.p() as f64;
    let (y, a) = (data.y(), data.a());
    match (rot, lambda) {
        (None, Lambda::Infinite) => {
            let value = match kind {
                OracleKind::Loss => (y - theta).norm_squared() / p,
                OracleKind::Risk => data.trace_a() / p,
            };
            Ok((value, ols_beta(data)?))
        }
        (None, _) => {
            let t = a.map(|v| lambda.target_weight(v));
            let s = a.map(|v| lambda.data_weight(v));
            let weights = t.map(|v| v * v);
            // the location solves min ‖diag(t)(Xᵀβ) − target‖²
            let target = match kind {
                OracleKind::Loss => DVector::from_fn(data.p(), |i, _| (theta[i] - s[i] * y[i]) / t[i]),
                OracleKind::Risk => theta.clone(),
            };
            let (beta, mu) = gls_fit(data.x(), &target, &weights)?;
            let value = match kind {
                OracleKind::Loss => {
                    (0..data.p()).map(|i| (s[i] * y[i] + t[i] * mu[i] - theta[i]).powi(2)).sum::<f64>() / p
                }
                OracleKind::Risk => {
                    (0..data.p())
                        .map(|i| weights[i] * (mu[i] - theta[i]).powi(2) + s[i] * s[i] * a[i])
                        .sum::<f64>()
                        / p
                }
            };
            Ok((value, beta))
        }
        (Some(r), _) => {
            let op = r.operator(a, lambda);
            let sy = op.apply(y);
            let target = match kind {
                OracleKind::Loss => theta - &sy,
                OracleKind::Risk => op.apply_complement(theta),
            };
            let variance = match kind {
                OracleKind::Loss => 0.0,
                OracleKind::Risk => op.trace_sas(),
            };
            if lambda.is_infinite() {
                return Ok(((target.norm_squared() + variance) / p, ols_beta(data)?));
            }
            let delta = lstsq(&r.zt, &target)?;
            let bias = (&r.zt * &delta - &target).norm_squared();
            let gamma = r.gamma_from_delta(lambda, &delta);
            Ok(((bias + variance) / p, r.basis.unrotate_coef(&gamma)))
        }
    }
}

/// Profiled oracle criterion at one `λ`.
pub fn profile_oracle(
    data: &HeteroData,
    truth: &GroundTruth,
    kind: OracleKind,
    model: &Model,
    lambda: Lambda,
) -> Result<(f64, DVector<f64>)> {
    check_len("true means", data.p(), truth.theta.len())?;
    let rot = rotated_for(data, model)?;
    oracle_point(data, &truth.theta, rot.as_ref(), kind, lambda)
}

/// Infeasible reference rules that know `θ`.
pub fn fit_oracle(data: &HeteroData, truth: &GroundTruth, kind: OracleKind, model: &Model) -> Result<ParametricFit> {
    check_len("true means", data.p(), truth.theta.len())?;
    let rot = rotated_for(data, model)?;
    let scale = search_scale(data, rot.as_ref());
    let (lambda, beta, value) = profile_search(
        |l| oracle_point(data, &truth.theta, rot.as_ref(), kind, l),
        scale,
        true,
    )?;
    let method = match kind {
        OracleKind::Loss => FitMethod::OracleLoss,
        OracleKind::Risk => FitMethod::OracleRisk,
    };
    Ok(finish(data, method, model, lambda, beta, rot.as_ref(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DesignMatrix;
    use crate::model::{
        posterior_mean_model1, posterior_mean_model2, GenericPrior, ModelIIParams, ModelIParams, PriorCovariance,
    };
    use crate::optimize::log_grid;
    use crate::risk::{exact_risk, loss, ure, ure_gls};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn instance(k: usize, p: usize, seed: u64) -> (HeteroData, GroundTruth) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DesignMatrix::new(DMatrix::from_fn(k, p, |_, _| rng.random_range(-2.0..2.0))).unwrap();
        let a = DVector::from_fn(p, |_, _| rng.random_range(0.1..1.5));
        let beta = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let mean = x.fitted(&beta);
        let theta = DVector::from_fn(p, |i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean[i] + 0.8 * z
        });
        let y = DVector::from_fn(p, |i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            theta[i] + f64::sqrt(a[i]) * z
        });
        (HeteroData::new(y, a, x).unwrap(), GroundTruth::new(theta).unwrap())
    }

    fn w2() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.6])
    }

    fn dense_grid() -> impl Iterator<Item = Lambda> {
        std::iter::once(Lambda::ZERO)
            .chain(log_grid(1e-5, 1e5, 2000).into_iter().map(Lambda::Finite))
            .chain(std::iter::once(Lambda::Infinite))
    }

    fn reproduce(data: &HeteroData, fit: &ParametricFit, model: &Model) -> DVector<f64> {
        let lambda = fit.lambda().unwrap();
        match model {
            Model::I => posterior_mean_model1(data, &ModelIParams::new(lambda, fit.beta.clone(), data.x()).unwrap()).unwrap(),
            Model::II { w } => {
                posterior_mean_model2(data, &ModelIIParams::new(lambda, fit.beta.clone(), w.clone()).unwrap())
                    .unwrap()
                    .0
            }
        }
    }

    #[test]
    fn ure_fit_is_consistent_and_beats_dense_grid() {
        for (seed, model) in [(1, Model::I), (2, Model::II { w: w2() })] {
            let (data, _) = instance(2, 40, seed);
            let fit = fit_ure(&data, &model).unwrap();
            let prior_cov = match &model {
                Model::I => PriorCovariance::Identity(fit.lambda().unwrap()),
                Model::II { w } => PriorCovariance::Regression { lambda: fit.lambda().unwrap(), w: w.clone() },
            };
            let again = ure(&data, &GenericPrior::new(prior_cov, fit.mu.clone())).unwrap();
            assert!((again - fit.objective_value).abs() < 1e-10);
            assert!((reproduce(&data, &fit, &model) - &fit.theta_hat).amax() < 1e-10);
            for l in dense_grid() {
                let (v, _) = profile_ure(&data, &model, l).unwrap();
                assert!(fit.objective_value <= v + 1e-10, "{l}: {} > {v}", fit.objective_value);
            }
        }
    }

    #[test]
    fn ure_zero_residual_data_shrinks_fully() {
        let (data, _) = instance(2, 12, 3);
        let (_, ols) = data.ols_fit().unwrap();
        let data = data.with_y(ols.clone()).unwrap();
        let fit = fit_ure(&data, &Model::I).unwrap();
        assert_eq!(fit.lambda(), Some(Lambda::ZERO));
        assert!((&fit.theta_hat - &ols).amax() < 1e-10);
        assert!((fit.objective_value + data.trace_a() / 12.0).abs() < 1e-10);
    }

    #[test]
    fn model2_ure_shrinks_to_ols() {
        // with β₀ free the profiled criterion is smallest at λ = 0
        let (data, _) = instance(2, 25, 4);
        let fit = fit_ure(&data, &Model::II { w: w2() }).unwrap();
        let (_, ols) = data.ols_fit().unwrap();
        assert_eq!(fit.lambda(), Some(Lambda::ZERO));
        assert!((&fit.theta_hat - &ols).amax() < 1e-9);
    }

    #[test]
    fn model2_ebmle_location_is_wls() {
        // a prior covariance inside the row space leaves the GLS fit unchanged
        let (data, _) = instance(2, 30, 14);
        let fit = fit_ebmle(&data, &Model::II { w: w2() }).unwrap();
        let (wls, _) = data.wls_fit().unwrap();
        assert!((&fit.beta - &wls).amax() < 1e-8, "{} vs {}", fit.beta, wls);
    }

    #[test]
    fn ure_gls_fit_matches_public_formula() {
        let (data, _) = instance(2, 50, 5);
        for model in [Model::I, Model::II { w: w2() }] {
            for target in [GlsTarget::ols(), GlsTarget::wls(data.a())] {
                let fit = fit_ure_gls(&data, &model, &target).unwrap();
                let lambda = fit.lambda().unwrap();
                let cov = match &model {
                    Model::I => PriorCovariance::Identity(lambda),
                    Model::II { w } => PriorCovariance::Regression { lambda, w: w.clone() },
                };
                let direct = ure_gls(&data, &cov, target.metric()).unwrap();
                assert!((direct - fit.objective_value).abs() < 1e-10);
                if model == Model::I {
                    let inf = profile_ure_gls(&data, &model, &target, Lambda::Infinite).unwrap();
                    assert!((inf - data.trace_a() / 50.0).abs() < 1e-12);
                }
                for l in dense_grid() {
                    let v = profile_ure_gls(&data, &model, &target, l).unwrap();
                    assert!(fit.objective_value <= v + 1e-10);
                }
            }
        }
    }

    #[test]
    fn ure_gls_profile_equals_dense_formula_for_custom_metric() {
        let (data, _) = instance(2, 9, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let r = DMatrix::from_fn(9, 9, |_, _| rng.random_range(-1.0..1.0));
        let m = &r * r.transpose() + DMatrix::identity(9, 9);
        let target = GlsTarget::custom(m.clone()).unwrap();
        for model in [Model::I, Model::II { w: w2() }] {
            for l in [0.1, 2.0] {
                let lambda = Lambda::Finite(l);
                let cov = match &model {
                    Model::I => PriorCovariance::Identity(lambda),
                    Model::II { w } => PriorCovariance::Regression { lambda, w: w.clone() },
                };
                let a = ure_gls(&data, &cov, target.metric()).unwrap();
                let b = profile_ure_gls(&data, &model, &target, lambda).unwrap();
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ebmle_homoscedastic_closed_form() {
        // A = c I, intercept only: stationary point λ = (S²/p − c)⁺
        let y = DVector::from_vec(vec![1.2, -0.7, 3.1, 0.4, -2.2, 1.9, 0.0, 2.5]);
        let p = y.len();
        let c = 0.5;
        let data = HeteroData::new(y.clone(), DVector::from_element(p, c), DesignMatrix::intercept(p)).unwrap();
        let mean = y.mean();
        let s2 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        let expected = (s2 / p as f64 - c).max(0.0);
        let fit = fit_ebmle(&data, &Model::I).unwrap();
        assert!((fit.lambda().unwrap().as_f64() - expected).abs() < 1e-6);
    }

    #[test]
    fn ebmle_constant_data_gives_zero() {
        let data = HeteroData::new(
            DVector::from_element(6, 2.0),
            DVector::from_vec(vec![0.3, 0.5, 0.7, 0.9, 1.1, 1.3]),
            DesignMatrix::intercept(6),
        )
        .unwrap();
        let fit = fit_ebmle(&data, &Model::I).unwrap();
        assert_eq!(fit.lambda(), Some(Lambda::ZERO));
        assert!((fit.theta_hat.add_scalar(-2.0)).amax() < 1e-12);
    }

    #[test]
    fn ebmom_examples() {
        // hand fixed point on five homoscedastic points
        let y = DVector::from_vec(vec![2.0, -1.0, 4.0, 0.5, 3.5]);
        let data = HeteroData::new(y, DVector::from_element(5, 0.4), DesignMatrix::intercept(5)).unwrap();
        // mean 1.8; Σ(y−ȳ)² = 0.04 + 7.84 + 4.84 + 1.69 + 2.89 = 17.3
        let expected = 17.3 / 4.0 - 0.4;
        let fit = fit_ebmom(&data, &Model::I).unwrap();
        assert!((fit.lambda().unwrap().as_f64() - expected).abs() < 1e-10);

        let tight = HeteroData::new(
            DVector::from_vec(vec![1.0, 1.1, 0.9, 1.05, 0.95]),
            DVector::from_element(5, 1.0),
            DesignMatrix::intercept(5),
        )
        .unwrap();
        let fit = fit_ebmom(&tight, &Model::I).unwrap();
        assert_eq!(fit.lambda(), Some(Lambda::ZERO));
        assert!((&fit.theta_hat - &fit.mu).amax() < 1e-15);
    }

    #[test]
    fn ebmom_model2_converges() {
        let (data, _) = instance(2, 30, 7);
        let fit = fit_ebmom(&data, &Model::II { w: w2() }).unwrap();
        assert!(fit.objective_value < 1e-8);
        assert!((reproduce(&data, &fit, &Model::II { w: w2() }) - &fit.theta_hat).amax() < 1e-10);
    }

    #[test]
    fn james_stein_examples() {
        let x = DesignMatrix::intercept(6);
        let a = DVector::from_element(6, 1.0);
        // residuals about the mean with Σr² = 2(p − k − 2) = 6
        let r = DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]) * (1.0f64).sqrt();
        let y = r.add_scalar(3.0);
        let data = HeteroData::new(y.clone(), a.clone(), x.clone()).unwrap();
        let fit = fit_james_stein(&data).unwrap();
        assert!((fit.shrink_factor[0] - 0.5).abs() < 1e-14);
        assert!((&fit.theta_hat - (y.add_scalar(3.0) * 0.5)).amax() < 1e-14);

        let small = HeteroData::new(r.map(|v| v * 0.5).add_scalar(3.0), a, x).unwrap();
        let fit = fit_james_stein(&small).unwrap();
        assert_eq!(fit.shrink_factor[0], 0.0);
        assert!((fit.theta_hat.add_scalar(-3.0)).amax() < 1e-14);

        let tiny = HeteroData::new(
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            DVector::from_element(3, 1.0),
            DesignMatrix::intercept(3),
        )
        .unwrap();
        let err = fit_james_stein(&tiny).unwrap_err();
        assert!(err.to_string().contains("requires p > k+2"));
    }

    #[test]
    fn oracle_risk_at_truth_in_row_space() {
        let (data, _) = instance(2, 15, 8);
        let mu_star = data.x().fitted(&DVector::from_vec(vec![0.4, -1.2]));
        let truth = GroundTruth::new(mu_star.clone()).unwrap();
        for model in [Model::I, Model::II { w: w2() }] {
            let fit = fit_oracle(&data, &truth, OracleKind::Risk, &model).unwrap();
            assert_eq!(fit.lambda(), Some(Lambda::ZERO));
            assert!(fit.objective_value.abs() < 1e-12);
            assert!((&fit.mu - &mu_star).amax() < 1e-9);
        }
    }

    #[test]
    fn oracle_values_match_public_formulas() {
        let (data, truth) = instance(2, 20, 9);
        for model in [Model::I, Model::II { w: w2() }] {
            let or = fit_oracle(&data, &truth, OracleKind::Risk, &model).unwrap();
            let cov = match &model {
                Model::I => PriorCovariance::Identity(or.lambda().unwrap()),
                Model::II { w } => PriorCovariance::Regression { lambda: or.lambda().unwrap(), w: w.clone() },
            };
            let r = exact_risk(&truth.theta, &data, &GenericPrior::new(cov, or.mu.clone())).unwrap();
            assert!((r - or.objective_value).abs() < 1e-10);

            let ol = fit_oracle(&data, &truth, OracleKind::Loss, &model).unwrap();
            assert!((loss(&truth.theta, &ol.theta_hat).unwrap() - ol.objective_value).abs() < 1e-10);
            for other in [
                fit_ure(&data, &model).unwrap(),
                fit_ebmle(&data, &model).unwrap(),
                fit_ebmom(&data, &model).unwrap(),
                fit_ure_gls(&data, &model, &GlsTarget::ols()).unwrap(),
            ] {
                assert!(ol.objective_value <= loss(&truth.theta, &other.theta_hat).unwrap() + 1e-10);
            }
        }
    }

    #[test]
    fn oracle_loss_matches_two_dimensional_grid() {
        // intercept-only Model I at p = 20: the grid over (λ, β) cannot beat the fit
        let (data, truth) = instance(1, 20, 10);
        let x = DesignMatrix::intercept(20);
        let data = HeteroData::new(data.y().clone(), data.a().clone(), x).unwrap();
        let fit = fit_oracle(&data, &truth, OracleKind::Loss, &Model::I).unwrap();
        let mut best = f64::INFINITY;
        for l in log_grid(1e-3, 1e3, 300) {
            for j in 0..=400 {
                let beta = -4.0 + 8.0 * j as f64 / 400.0;
                let params = ModelIParams::new(Lambda::Finite(l), DVector::from_vec(vec![beta]), data.x()).unwrap();
                let t = posterior_mean_model1(&data, &params).unwrap();
                best = best.min(loss(&truth.theta, &t).unwrap());
            }
        }
        assert!(fit.objective_value <= best + 1e-12);
        assert!(best - fit.objective_value < 1e-3, "grid {best} vs fit {}", fit.objective_value);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn js_factor_is_scale_consistent(seed in 0u64..10_000, c in 0.1f64..10.0) {
                let (data, _) = instance(2, 12, seed);
                let fit = fit_james_stein(&data).unwrap();
                let scaled = HeteroData::new(data.y() * c, data.a() * (c * c), data.x().clone()).unwrap();
                let fit2 = fit_james_stein(&scaled).unwrap();
                prop_assert!((fit.shrink_factor[0] - fit2.shrink_factor[0]).abs() < 1e-12);
            }

            #[test]
            fn model1_fits_are_componentwise_convex(seed in 0u64..10_000) {
                let (data, _) = instance(2, 15, seed);
                for fit in [fit_ure(&data, &Model::I).unwrap(), fit_ebmle(&data, &Model::I).unwrap(), fit_ebmom(&data, &Model::I).unwrap()] {
                    for i in 0..15 {
                        let (y, m) = (data.y()[i], fit.mu[i]);
                        prop_assert!(fit.theta_hat[i] >= y.min(m) - 1e-12 && fit.theta_hat[i] <= y.max(m) + 1e-12);
                    }
                }
            }
        }
    }
}
