//! Domain types for the two heteroscedastic hierarchical models and their
//! posterior-mean (shrinkage) maps.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Result, ShrinkError};
use crate::linalg::{check_spd, shrink_basis, DesignMatrix, Metric, ShrinkBasis};

/// Prior scale `λ ∈ [0, ∞]`. The infinite end is exact, never a large float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    Finite(f64),
    Infinite,
}

impl Lambda {
    pub const ZERO: Lambda = Lambda::Finite(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if value == f64::INFINITY {
            Ok(Lambda::Infinite)
        } else if value.is_finite() && value >= 0.0 {
            Ok(Lambda::Finite(value))
        } else {
            Err(ShrinkError::invalid(format!("lambda must lie in [0, inf], got {value}")))
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Lambda::Finite(v) => Some(v),
            Lambda::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Lambda::Infinite)
    }

    pub fn as_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }

    /// `λ / (λ + v)`: the weight kept on the observation.
    pub fn data_weight(self, v: f64) -> f64 {
        match self {
            Lambda::Infinite => 1.0,
            Lambda::Finite(l) => l / (l + v),
        }
    }

    /// `v / (λ + v)`: the weight placed on the shrinkage target.
    pub fn target_weight(self, v: f64) -> f64 {
        match self {
            Lambda::Infinite => 0.0,
            Lambda::Finite(l) => v / (l + v),
        }
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lambda::Finite(v) => write!(f, "{v}"),
            Lambda::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Lambda {
    type Err = ShrinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "+inf" | "Infinity" | "infinity" => Ok(Lambda::Infinite),
            other => other
                .parse::<f64>()
                .map_err(|e| ShrinkError::invalid(format!("bad lambda {other:?}: {e}")))
                .and_then(Lambda::new),
        }
    }
}

/// Observations `Y`, known variances `A` and covariates `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroData {
    y: DVector<f64>,
    a: DVector<f64>,
    x: DesignMatrix,
}

impl HeteroData {
    pub fn new(y: DVector<f64>, a: DVector<f64>, x: DesignMatrix) -> Result<Self> {
        check_len("observations", x.p(), y.len())?;
        check_len("variances", x.p(), a.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ShrinkError::invalid("observations must be finite"));
        }
        if a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(ShrinkError::invalid("variances A_i must be strictly positive and finite"));
        }
        Ok(Self { y, a, x })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn x(&self) -> &DesignMatrix {
        &self.x
    }

    pub fn p(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.x.k()
    }

    pub fn trace_a(&self) -> f64 {
        self.a.sum()
    }

    /// Same units with a different response vector.
    pub fn with_y(&self, y: DVector<f64>) -> Result<Self> {
        Self::new(y, self.a.clone(), self.x.clone())
    }

    pub fn ols_fit(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        Metric::Identity.fit(&self.x, &self.y)
    }

    pub fn wls_fit(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        Metric::Diagonal(self.a.map(|v| 1.0 / v)).fit(&self.x, &self.y)
    }
}

/// True means; known only in simulations.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub theta: DVector<f64>,
}

impl GroundTruth {
    pub fn new(theta: DVector<f64>) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(ShrinkError::invalid("true means must be finite"));
        }
        Ok(Self { theta })
    }
}

/// Model I hyperparameters; `mu = Xᵀβ` is cached so row-space membership
/// holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelIParams {
    pub lambda: Lambda,
    beta: DVector<f64>,
    mu: DVector<f64>,
}

impl ModelIParams {
    pub fn new(lambda: Lambda, beta: DVector<f64>, x: &DesignMatrix) -> Result<Self> {
        check_len("regression coefficients", x.k(), beta.len())?;
        let mu = x.fitted(&beta);
        Ok(Self { lambda, beta, mu })
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelIIParams {
    pub lambda: Lambda,
    pub beta0: DVector<f64>,
    pub w: DMatrix<f64>,
}

impl ModelIIParams {
    pub fn new(lambda: Lambda, beta0: DVector<f64>, w: DMatrix<f64>) -> Result<Self> {
        check_len("prior coefficients", w.nrows(), beta0.len())?;
        check_spd(&w, "prior matrix W")?;
        Ok(Self { lambda, beta0, w })
    }
}

/// Prior covariance `B` of the generic two-level model.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorCovariance {
    /// Model I: `B = λ I`.
    Identity(Lambda),
    /// Model II: `B = λ XᵀWX`.
    Regression { lambda: Lambda, w: DMatrix<f64> },
    /// Any symmetric nonnegative-definite `p × p` matrix.
    Explicit(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenericPrior {
    pub cov: PriorCovariance,
    pub mu: DVector<f64>,
}

impl GenericPrior {
    pub fn new(cov: PriorCovariance, mu: DVector<f64>) -> Self {
        Self { cov, mu }
    }

    /// The shrink operator `B(A+B)⁻¹` of this prior for the given units.
    pub fn operator<'a>(&self, data: &'a HeteroData) -> Result<ShrinkOperator<'a>> {
        check_len("prior mean", data.p(), self.mu.len())?;
        match &self.cov {
            PriorCovariance::Identity(lambda) => Ok(ShrinkOperator::model1(data.a(), *lambda)),
            PriorCovariance::Regression { lambda, w } => {
                let basis = shrink_basis(data.x(), data.a(), w)?;
                Ok(ShrinkOperator::model2(data.a(), Cow::Owned(basis), *lambda))
            }
            PriorCovariance::Explicit(b) => ShrinkOperator::explicit(data.a(), b),
        }
    }
}

#[derive(Debug, Clone)]
enum OperatorKind<'a> {
    Diagonal { lambda: Lambda, s: DVector<f64> },
    LowRank {
        basis: Cow<'a, ShrinkBasis>,
        lambda: Lambda,
        /// `λ/(λ+d_i)`.
        factors: DVector<f64>,
    },
    Dense { b: DMatrix<f64>, s: DMatrix<f64> },
}

/// The linear map `S = B(A+B)⁻¹` together with the traces the risk formulas
/// need. `A(A+B)⁻¹ = I − S` and `(A+B)⁻¹ = A⁻¹(I − S)`.
#[derive(Debug, Clone)]
pub struct ShrinkOperator<'a> {
    a: &'a DVector<f64>,
    kind: OperatorKind<'a>,
}

impl<'a> ShrinkOperator<'a> {
    pub fn model1(a: &'a DVector<f64>, lambda: Lambda) -> Self {
        let s = a.map(|v| lambda.data_weight(v));
        Self {
            a,
            kind: OperatorKind::Diagonal { lambda, s },
        }
    }

    pub fn model2(a: &'a DVector<f64>, basis: Cow<'a, ShrinkBasis>, lambda: Lambda) -> Self {
        let factors = basis.d.map(|d| lambda.data_weight(d));
        Self {
            a,
            kind: OperatorKind::LowRank {
                basis,
                lambda,
                factors,
            },
        }
    }

    /// Semiparametric Model II map with arbitrary effective factors `1 − b`.
    pub(crate) fn model2_factors(a: &'a DVector<f64>, basis: Cow<'a, ShrinkBasis>, factors: DVector<f64>) -> Self {
        Self {
            a,
            kind: OperatorKind::LowRank {
                basis,
                lambda: Lambda::Infinite,
                factors,
            },
        }
    }

    pub fn explicit(a: &'a DVector<f64>, b: &DMatrix<f64>) -> Result<Self> {
        let p = a.len();
        check_len("prior covariance", p, b.nrows())?;
        if !b.is_square() {
            return Err(ShrinkError::invalid("prior covariance must be square"));
        }
        let scale = b.amax().max(1.0);
        if (b - b.transpose()).amax() > 1e-10 * scale {
            return Err(ShrinkError::invalid("prior covariance is not symmetric"));
        }
        let cov = DMatrix::from_diagonal(a) + b;
        let chol = cov.cholesky().ok_or(ShrinkError::IllConditioned {
            context: "A + B",
            condition: f64::INFINITY,
        })?;
        // (A+B)⁻¹B is the transpose of S because both factors are symmetric.
        let s = chol.solve(b).transpose();
        Ok(Self {
            a,
            kind: OperatorKind::Dense { b: b.clone(), s },
        })
    }

    pub fn a(&self) -> &DVector<f64> {
        self.a
    }

    pub fn p(&self) -> usize {
        self.a.len()
    }

    /// `S v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            OperatorKind::Diagonal { s, .. } => s.component_mul(v),
            OperatorKind::LowRank { basis, factors, .. } => {
                let inner = &basis.z * v.component_mul(&basis.a_inv);
                let scaled = DVector::from_fn(inner.len(), |i, _| inner[i] * factors[i] * basis.d[i]);
                basis.z.tr_mul(&scaled)
            }
            OperatorKind::Dense { s, .. } => s * v,
        }
    }

    /// `(I − S) v = A(A+B)⁻¹ v`.
    pub fn apply_complement(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            OperatorKind::Diagonal { s, .. } => DVector::from_fn(v.len(), |i, _| (1.0 - s[i]) * v[i]),
            _ => v - self.apply(v),
        }
    }

    /// `(A+B)⁻¹ v`.
    pub fn apply_inverse_covariance(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            OperatorKind::Diagonal { lambda, .. } => match lambda {
                Lambda::Infinite => DVector::zeros(v.len()),
                Lambda::Finite(l) => DVector::from_fn(v.len(), |i, _| v[i] / (self.a[i] + l)),
            },
            _ => self.apply_complement(v).component_div(self.a),
        }
    }

    /// Diagonal of `S`.
    pub fn diagonal(&self) -> DVector<f64> {
        match &self.kind {
            OperatorKind::Diagonal { s, .. } => s.clone(),
            OperatorKind::LowRank { basis, factors, .. } => DVector::from_fn(self.p(), |i, _| {
                (0..basis.k())
                    .map(|j| basis.z[(j, i)].powi(2) * factors[j] * basis.d[j])
                    .sum::<f64>()
                    * basis.a_inv[i]
            }),
            OperatorKind::Dense { s, .. } => s.diagonal(),
        }
    }

    /// `tr(S A)`.
    pub fn trace_sa(&self) -> f64 {
        match &self.kind {
            OperatorKind::Diagonal { s, .. } => s.dot(self.a),
            OperatorKind::LowRank { basis, factors, .. } => (0..basis.k())
                .map(|j| factors[j] * basis.d[j] * basis.zzt_diag[j])
                .sum(),
            OperatorKind::Dense { s, .. } => (0..self.p()).map(|i| s[(i, i)] * self.a[i]).sum(),
        }
    }

    /// `tr(S A Sᵀ)`, the variance part of the risk.
    pub fn trace_sas(&self) -> f64 {
        match &self.kind {
            OperatorKind::Diagonal { s, .. } => s.iter().zip(self.a.iter()).map(|(s, a)| s * s * a).sum(),
            OperatorKind::LowRank { basis, factors, .. } => (0..basis.k())
                .map(|j| factors[j].powi(2) * basis.d[j] * basis.zzt_diag[j])
                .sum(),
            OperatorKind::Dense { s, .. } => {
                let sa = DMatrix::from_fn(self.p(), self.p(), |r, c| s[(r, c)] * self.a[c]);
                (sa * s.transpose()).trace()
            }
        }
    }

    /// `tr(S P A)` for the projection `P = P_{M,X}`.
    pub fn trace_spa(&self, x: &DesignMatrix, metric: &Metric) -> Result<f64> {
        match &self.kind {
            OperatorKind::Diagonal { s, .. } => {
                let pd = metric.projection_diagonal(x)?;
                Ok((0..self.p()).map(|i| s[i] * self.a[i] * pd[i]).sum())
            }
            OperatorKind::LowRank { basis, factors, .. } => {
                let k = gls_trace_kernel(basis, self.a, x, metric)?;
                Ok((0..basis.k()).map(|j| factors[j] * basis.d[j] * k[(j, j)]).sum())
            }
            OperatorKind::Dense { s, .. } => {
                let p = metric.projection_matrix(x)?;
                let pa = DMatrix::from_fn(self.p(), self.p(), |r, c| p[(r, c)] * self.a[c]);
                Ok((s * pa).trace())
            }
        }
    }

    /// `log det(A + B)`; `+∞` when `B` is unbounded.
    pub fn log_det_covariance(&self) -> f64 {
        match &self.kind {
            OperatorKind::Diagonal { lambda, .. } => match lambda {
                Lambda::Infinite => f64::INFINITY,
                Lambda::Finite(l) => self.a.iter().map(|a| (a + l).ln()).sum(),
            },
            OperatorKind::LowRank { basis, lambda, .. } => match lambda {
                Lambda::Infinite => f64::INFINITY,
                Lambda::Finite(l) => {
                    self.a.iter().map(|a| a.ln()).sum::<f64>()
                        + basis.d.iter().map(|d| (l / d).ln_1p()).sum::<f64>()
                }
            },
            OperatorKind::Dense { b, .. } => {
                let cov = DMatrix::from_diagonal(self.a) + b;
                match cov.cholesky() {
                    Some(c) => 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
                    None => f64::NAN,
                }
            }
        }
    }

    /// `B(A+B)⁻¹Y + A(A+B)⁻¹μ`.
    pub fn shrink(&self, y: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        mu + self.apply(&(y - mu))
    }
}

/// `Z A⁻¹ P A Zᵀ` (k × k), the only p-sized quantity needed for
/// `tr(S P A)` under Model II.
pub(crate) fn gls_trace_kernel(
    basis: &ShrinkBasis,
    a: &DVector<f64>,
    x: &DesignMatrix,
    metric: &Metric,
) -> Result<DMatrix<f64>> {
    let k = basis.k();
    let mut out = DMatrix::zeros(k, k);
    for j in 0..k {
        let az: DVector<f64> = DVector::from_fn(a.len(), |i, _| a[i] * basis.z[(j, i)]);
        let paz = metric.project(x, &az)?;
        let col = &basis.z * paz.component_mul(&basis.a_inv);
        out.set_column(j, &col);
    }
    Ok(out)
}

/// Model I posterior mean `λ/(λ+A_i)·Y_i + A_i/(λ+A_i)·μ_i`.
pub fn posterior_mean_model1(data: &HeteroData, params: &ModelIParams) -> Result<DVector<f64>> {
    check_len("prior mean", data.p(), params.mu().len())?;
    let y = data.y();
    let mu = params.mu();
    Ok(DVector::from_fn(data.p(), |i, _| {
        let a = data.a()[i];
        match params.lambda {
            Lambda::Infinite => y[i],
            lambda => lambda.data_weight(a) * y[i] + lambda.target_weight(a) * mu[i],
        }
    }))
}

/// Model II posterior mean; returns `(θ̂, β̂)` with
/// `β̂ = λW(λW+V)⁻¹β̂_WLS + V(λW+V)⁻¹β₀`.
pub fn posterior_mean_model2(
    data: &HeteroData,
    params: &ModelIIParams,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_len("prior coefficients", data.k(), params.beta0.len())?;
    let (beta_wls, _) = data.wls_fit()?;
    let beta = match params.lambda {
        Lambda::Infinite => beta_wls,
        Lambda::Finite(l) if l == 0.0 => params.beta0.clone(),
        Lambda::Finite(l) => {
            let basis = shrink_basis(data.x(), data.a(), &params.w)?;
            let v = &basis.v;
            let lw = &params.w * l;
            let m = (&lw + v)
                .lu()
                .try_inverse()
                .ok_or(ShrinkError::IllConditioned {
                    context: "λW + V",
                    condition: f64::INFINITY,
                })?;
            &lw * &m * beta_wls + v * &m * &params.beta0
        }
    };
    Ok((data.x().fitted(&beta), beta))
}

/// Bayes rule of the generic two-level model.
pub fn generic_shrinkage(data: &HeteroData, prior: &GenericPrior) -> Result<DVector<f64>> {
    let op = prior.operator(data)?;
    Ok(op.shrink(data.y(), &prior.mu))
}
