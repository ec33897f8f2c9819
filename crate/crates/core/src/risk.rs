//! Loss, exact risk and the unbiased risk estimates, plus the
//! admissible-location predicate and the finite-p regularity quantities.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Result, ShrinkError};
use crate::linalg::{shrink_basis, DesignMatrix, Metric, ShrinkBasis};
use crate::model::{GenericPrior, HeteroData, PriorCovariance, ShrinkOperator};

/// Mean squared error `(1/p)‖θ − θ̂‖²`.
pub fn loss(theta: &DVector<f64>, theta_hat: &DVector<f64>) -> Result<f64> {
    check_len("estimate", theta.len(), theta_hat.len())?;
    Ok((theta - theta_hat).norm_squared() / theta.len() as f64)
}

/// Positive unit weights summing to `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLossSpec {
    psi: DVector<f64>,
}

impl WeightedLossSpec {
    pub fn new(psi: DVector<f64>) -> Result<Self> {
        if psi.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(ShrinkError::invalid("loss weights must be strictly positive"));
        }
        let p = psi.len() as f64;
        if (psi.sum() - p).abs() > 1e-8 * p.max(1.0) {
            return Err(ShrinkError::invalid(format!(
                "loss weights must sum to p = {p}, got {}",
                psi.sum()
            )));
        }
        Ok(Self { psi })
    }

    /// Rescales arbitrary positive weights so they sum to `p`.
    pub fn normalized(raw: DVector<f64>) -> Result<Self> {
        let total = raw.sum();
        if !(total > 0.0) {
            return Err(ShrinkError::invalid("loss weights must have a positive sum"));
        }
        let n = raw.len() as f64;
        Self::new(raw * (n / total))
    }

    pub fn uniform(p: usize) -> Self {
        Self {
            psi: DVector::from_element(p, 1.0),
        }
    }

    pub fn psi(&self) -> &DVector<f64> {
        &self.psi
    }
}

/// `(1/p)Σψ_i(θ_i − θ̂_i)²`.
pub fn weighted_loss(theta: &DVector<f64>, theta_hat: &DVector<f64>, spec: &WeightedLossSpec) -> Result<f64> {
    check_len("estimate", theta.len(), theta_hat.len())?;
    check_len("loss weights", theta.len(), spec.psi.len())?;
    let p = theta.len() as f64;
    Ok((0..theta.len())
        .map(|i| spec.psi[i] * (theta[i] - theta_hat[i]).powi(2))
        .sum::<f64>()
        / p)
}

/// Risk of `θ̂ = SY + (I−S)μ` at the truth `θ`.
pub fn exact_risk_with(op: &ShrinkOperator<'_>, theta: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
    check_len("true means", op.p(), theta.len())?;
    check_len("prior mean", op.p(), mu.len())?;
    let p = op.p() as f64;
    let bias = op.apply_complement(&(mu - theta)).norm_squared();
    Ok((bias + op.trace_sas()) / p)
}

/// Exact risk of the Bayes rule for `prior`; only `A` and `X` of `data` are
/// used.
pub fn exact_risk(theta: &DVector<f64>, data: &HeteroData, prior: &GenericPrior) -> Result<f64> {
    let op = prior.operator(data)?;
    exact_risk_with(&op, theta, &prior.mu)
}

/// Parametric URE of `θ̂ = SY + (I−S)μ`. May be negative.
pub fn ure_with(op: &ShrinkOperator<'_>, y: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
    check_len("observations", op.p(), y.len())?;
    check_len("prior mean", op.p(), mu.len())?;
    let p = op.p() as f64;
    let fit = op.apply_complement(&(y - mu)).norm_squared();
    let trace_a = op.a().sum();
    Ok((fit + 2.0 * op.trace_sa() - trace_a) / p)
}

pub fn ure(data: &HeteroData, prior: &GenericPrior) -> Result<f64> {
    let op = prior.operator(data)?;
    ure_with(&op, data.y(), &prior.mu)
}

/// URE when the location is the data-dependent `P_{M,X} Y`.
pub fn ure_gls_with(op: &ShrinkOperator<'_>, data: &HeteroData, metric: &Metric) -> Result<f64> {
    metric.validate(data.p())?;
    let mu = metric.project(data.x(), data.y())?;
    let pd = metric.projection_diagonal(data.x())?;
    let trace_pa = pd.dot(data.a());
    let p = data.p() as f64;
    let fit = op.apply_complement(&(data.y() - mu)).norm_squared();
    let trace = -data.trace_a() + 2.0 * trace_pa + 2.0 * op.trace_sa() - 2.0 * op.trace_spa(data.x(), metric)?;
    Ok((fit + trace) / p)
}

pub fn ure_gls(data: &HeteroData, cov: &PriorCovariance, metric: &Metric) -> Result<f64> {
    let prior = GenericPrior::new(cov.clone(), DVector::zeros(data.p()));
    let op = prior.operator(data)?;
    ure_gls_with(&op, data, metric)
}

/// Exact risk of the GLS-target rule: `(1/p)‖(I−S)(I−P)θ‖² + (1/p)tr(TATᵀ)`
/// with `T = I − (I−S)(I−P)`. Uses dense `p × p` algebra.
pub fn exact_risk_gls(
    theta: &DVector<f64>,
    data: &HeteroData,
    cov: &PriorCovariance,
    metric: &Metric,
) -> Result<f64> {
    check_len("true means", data.p(), theta.len())?;
    metric.validate(data.p())?;
    let prior = GenericPrior::new(cov.clone(), DVector::zeros(data.p()));
    let op = prior.operator(data)?;
    let p = data.p();
    let proj = metric.projection_matrix(data.x())?;
    let resid = DMatrix::identity(p, p) - &proj;
    let mut comp = DMatrix::zeros(p, p);
    for c in 0..p {
        comp.set_column(c, &op.apply_complement(&resid.column(c).into_owned()));
    }
    let t = DMatrix::identity(p, p) - &comp;
    let bias = (&comp * theta).norm_squared();
    let variance: f64 = (0..p)
        .map(|c| data.a()[c] * t.column(c).norm_squared())
        .sum();
    Ok((bias + variance) / p as f64)
}

fn check_box(b: &DVector<f64>) -> Result<()> {
    if b.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(ShrinkError::invalid("shrinkage weights b must lie in [0, 1]"));
    }
    Ok(())
}

/// Semiparametric URE for `θ̂ = Y − b∘(Y − μ)`.
pub fn ure_sp_model1(data: &HeteroData, b: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
    ure_weighted(data, &WeightedLossSpec::uniform(data.p()), b, mu)
}

/// `(1/p)Σψ_i(b_i²(Y_i−μ_i)² + (1−2b_i)A_i)`.
pub fn ure_weighted(data: &HeteroData, spec: &WeightedLossSpec, b: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
    check_len("shrinkage weights", data.p(), b.len())?;
    check_len("prior mean", data.p(), mu.len())?;
    check_len("loss weights", data.p(), spec.psi.len())?;
    check_box(b)?;
    let (y, a) = (data.y(), data.a());
    let total: f64 = (0..data.p())
        .map(|i| spec.psi[i] * (b[i] * b[i] * (y[i] - mu[i]).powi(2) + (1.0 - 2.0 * b[i]) * a[i]))
        .sum();
    Ok(total / data.p() as f64)
}

/// Semiparametric URE when the location is `P_{M,X} Y`:
/// `(1/p)Σ b_i²(Y_i − μ̂_i)² + (1/p)Σ A_i(1 − 2b_i(1 − P_ii))`.
pub fn ure_sp_gls(data: &HeteroData, b: &DVector<f64>, metric: &Metric) -> Result<f64> {
    check_len("shrinkage weights", data.p(), b.len())?;
    check_box(b)?;
    metric.validate(data.p())?;
    let mu = metric.project(data.x(), data.y())?;
    let pd = metric.projection_diagonal(data.x())?;
    Ok(sp_gls_value(data, b, &mu, &pd))
}

pub(crate) fn sp_gls_value(data: &HeteroData, b: &DVector<f64>, mu: &DVector<f64>, pd: &DVector<f64>) -> f64 {
    let (y, a) = (data.y(), data.a());
    (0..data.p())
        .map(|i| b[i] * b[i] * (y[i] - mu[i]).powi(2) + a[i] * (1.0 - 2.0 * b[i] * (1.0 - pd[i])))
        .sum::<f64>()
        / data.p() as f64
}

/// Model II semiparametric URE of
/// `θ̂ = Zᵀ(I−diag(b))ΛZA⁻¹Y + Zᵀdiag(b)UᵀW^{-1/2}β₀`.
pub fn ure_sp_model2(data: &HeteroData, basis: &ShrinkBasis, b: &DVector<f64>, beta0: &DVector<f64>) -> Result<f64> {
    check_len("shrinkage weights", basis.k(), b.len())?;
    check_len("prior coefficients", basis.k(), beta0.len())?;
    check_len("observations", basis.z.ncols(), data.p())?;
    check_box(b)?;
    let g = basis.rotated_wls(data.y());
    let gamma0 = basis.rotate_coef(beta0);
    Ok(sp_model2_value(data, basis, b, &g, &gamma0))
}

pub(crate) fn sp_model2_theta(basis: &ShrinkBasis, b: &DVector<f64>, g: &DVector<f64>, gamma0: &DVector<f64>) -> DVector<f64> {
    let coef = DVector::from_fn(b.len(), |i, _| g[i] - b[i] * (g[i] - gamma0[i]));
    basis.fitted(&coef)
}

pub(crate) fn sp_model2_value(
    data: &HeteroData,
    basis: &ShrinkBasis,
    b: &DVector<f64>,
    g: &DVector<f64>,
    gamma0: &DVector<f64>,
) -> f64 {
    let theta = sp_model2_theta(basis, b, g, gamma0);
    let fit = (theta - data.y()).norm_squared();
    let trace: f64 = (0..basis.k())
        .map(|i| (1.0 - b[i]) * basis.d[i] * basis.zzt_diag[i])
        .sum();
    (fit + 2.0 * trace - data.trace_a()) / data.p() as f64
}

/// Constants of the admissible location set: `‖μ‖ ≤ M·p^κ·‖Y‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MembershipSpec {
    pub big_m: f64,
    pub kappa: f64,
}

impl MembershipSpec {
    pub fn new(big_m: f64, kappa: f64) -> Result<Self> {
        if !(big_m > 0.0 && big_m.is_finite()) {
            return Err(ShrinkError::invalid("membership constant M must be positive"));
        }
        if !(0.0..0.5).contains(&kappa) {
            return Err(ShrinkError::invalid("membership exponent kappa must lie in [0, 1/2)"));
        }
        Ok(Self { big_m, kappa })
    }
}

impl Default for MembershipSpec {
    fn default() -> Self {
        Self { big_m: 10.0, kappa: 0.4 }
    }
}

/// Row-space membership (relative residual below 1e-8) plus the norm bound.
pub fn in_l(mu: &DVector<f64>, x: &DesignMatrix, y: &DVector<f64>, spec: &MembershipSpec) -> bool {
    if mu.len() != x.p() || y.len() != x.p() || mu.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let norm = mu.norm();
    let Ok(proj) = Metric::Identity.project(x, mu) else {
        return false;
    };
    if (mu - proj).norm() > 1e-8 * norm.max(f64::MIN_POSITIVE) {
        return false;
    }
    norm <= spec.big_m * (x.p() as f64).powf(spec.kappa) * y.norm()
}

/// Finite-p versions of the regularity quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionDiagnostics {
    /// `p⁻¹ΣA_i²`
    pub cond_a: f64,
    /// `p⁻¹ΣA_iθ_i²`
    pub cond_b: Option<f64>,
    /// `p⁻¹Σθ_i²`
    pub cond_c: Option<f64>,
    /// `p⁻¹XAXᵀ`
    pub cond_d: DMatrix<f64>,
    /// `p⁻¹XXᵀ`
    pub cond_e: DMatrix<f64>,
    /// `p⁻¹XA⁻¹Xᵀ`
    pub cond_f: DMatrix<f64>,
    /// `p⁻¹XA⁻²Xᵀ`
    pub cond_g: DMatrix<f64>,
    /// Largest effective variance of the spectral basis.
    pub d_k: f64,
}

/// `w` defaults to the identity when computing `d_k`.
pub fn condition_diagnostics(
    data: &HeteroData,
    theta: Option<&DVector<f64>>,
    w: Option<&DMatrix<f64>>,
) -> Result<ConditionDiagnostics> {
    let p = data.p() as f64;
    let a = data.a();
    if let Some(t) = theta {
        check_len("true means", data.p(), t.len())?;
    }
    let x = data.x();
    let identity = DMatrix::identity(x.k(), x.k());
    let basis = shrink_basis(x, a, w.unwrap_or(&identity))?;
    let diag = ConditionDiagnostics {
        cond_a: a.iter().map(|v| v * v).sum::<f64>() / p,
        cond_b: theta.map(|t| a.iter().zip(t.iter()).map(|(a, t)| a * t * t).sum::<f64>() / p),
        cond_c: theta.map(|t| t.norm_squared() / p),
        cond_d: x.weighted_gram(a),
        cond_e: x.weighted_gram(&DVector::from_element(x.p(), 1.0)),
        cond_f: x.weighted_gram(&a.map(|v| 1.0 / v)),
        cond_g: x.weighted_gram(&a.map(|v| 1.0 / (v * v))),
        d_k: basis.d.max(),
    };
    let finite = [diag.cond_a, diag.cond_b.unwrap_or(0.0), diag.cond_c.unwrap_or(0.0), diag.d_k]
        .iter()
        .all(|v| v.is_finite())
        && [&diag.cond_d, &diag.cond_e, &diag.cond_f, &diag.cond_g]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(ShrinkError::NonFinite("condition diagnostics"));
    }
    Ok(diag)
}
