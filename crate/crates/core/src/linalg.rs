//! Dense kernels shared by every estimator: weighted and generalized least
//! squares, projections onto the row space of the design, and the spectral
//! basis that reduces the rank-k Model II prior to k-dimensional algebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_len, Result, ShrinkError};

/// Largest admissible condition number of a (weighted) Gram matrix.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

/// Covariates for `p` units, stored `k × p` so that column `i` is `X_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    entries: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let (k, p) = entries.shape();
        if k == 0 || p == 0 {
            return Err(ShrinkError::invalid("design matrix must be non-empty"));
        }
        if k > p {
            return Err(ShrinkError::invalid(format!(
                "design has more covariates ({k}) than units ({p})"
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(ShrinkError::invalid("design matrix has non-finite entries"));
        }
        let sv = entries.clone().svd(false, false).singular_values;
        let max = sv.max();
        let min = sv.min();
        if !(min > max * 1e-12) {
            return Err(ShrinkError::invalid(format!(
                "design matrix is rank deficient (singular values {max:e} .. {min:e})"
            )));
        }
        Ok(Self { entries })
    }

    /// The intercept-only design `[1|1|...|1]`.
    pub fn intercept(p: usize) -> Self {
        Self {
            entries: DMatrix::from_element(1, p, 1.0),
        }
    }

    /// Builds `X` from one covariate vector per unit.
    pub fn from_units(units: &[Vec<f64>]) -> Result<Self> {
        let p = units.len();
        if p == 0 {
            return Err(ShrinkError::invalid("no units"));
        }
        let k = units[0].len();
        for u in units {
            check_len("covariates per unit", k, u.len())?;
        }
        Self::new(DMatrix::from_fn(k, p, |r, c| units[c][r]))
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    pub fn p(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// `Xᵀβ`, the p-vector of fitted values.
    pub fn fitted(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.entries.tr_mul(beta)
    }

    /// `Xᵀ` as a `p × k` matrix.
    pub fn units_by_covariates(&self) -> DMatrix<f64> {
        self.entries.transpose()
    }

    /// `p⁻¹ Σ w_i X_i X_iᵀ`.
    pub(crate) fn weighted_gram(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.k(), self.p(), |r, c| self.entries[(r, c)] * w[c]);
        &scaled * self.entries.transpose() / self.p() as f64
    }
}

/// Least squares `min ‖Dβ − t‖` for a tall `p × k` design through a
/// Householder QR; the triangular factor's singular values gate the solve.
pub fn lstsq(design: &DMatrix<f64>, target: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("least-squares target", design.nrows(), target.len())?;
    let k = design.ncols();
    if design.nrows() < k {
        return Err(ShrinkError::invalid("least-squares design has fewer rows than columns"));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let sv = r.clone().svd(false, false).singular_values;
    let (max, min) = (sv.max(), sv.min());
    let condition = if min > 0.0 { (max / min).powi(2) } else { f64::INFINITY };
    if !(condition <= MAX_GRAM_CONDITION) || !max.is_finite() || max == 0.0 {
        return Err(ShrinkError::IllConditioned {
            context: "least squares normal equations",
            condition,
        });
    }
    let qt = qr.q().tr_mul(target);
    r.solve_upper_triangular(&qt).ok_or(ShrinkError::IllConditioned {
        context: "least squares back substitution",
        condition,
    })
}

/// Minimum-norm least squares through an SVD with relative threshold
/// `1e-12`. Used where rank loss is legitimate (zero-weight rows).
pub(crate) fn lstsq_min_norm(design: &DMatrix<f64>, target: &DVector<f64>) -> DVector<f64> {
    let k = design.ncols();
    let svd = design.clone().svd(true, true);
    let max = svd.singular_values.max();
    if !(max > 0.0) {
        return DVector::zeros(k);
    }
    let u = svd.u.as_ref().expect("u computed");
    let v_t = svd.v_t.as_ref().expect("v_t computed");
    let ut_t = u.tr_mul(target);
    let mut scaled = DVector::zeros(svd.singular_values.len());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > max * 1e-12 {
            scaled[i] = ut_t[i] / s;
        }
    }
    v_t.tr_mul(&scaled)
}

/// Solves `G x = rhs` for symmetric positive-definite `G` through its
/// eigendecomposition, rejecting indefinite or ill-conditioned systems.
pub fn solve_spd(g: &DMatrix<f64>, rhs: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    let sol = solve_spd_many(g, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()), context)?;
    Ok(sol.column(0).into_owned())
}

/// `G⁻¹R` for every column of `R`, sharing one eigendecomposition.
pub(crate) fn solve_spd_many(g: &DMatrix<f64>, rhs: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(g));
    let (max, min) = (eig.eigenvalues.max(), eig.eigenvalues.min());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_GRAM_CONDITION) {
        return Err(ShrinkError::IllConditioned { context, condition });
    }
    let q = &eig.eigenvectors;
    let mut coef = q.tr_mul(rhs);
    for (mut row, l) in coef.row_iter_mut().zip(eig.eigenvalues.iter()) {
        row /= *l;
    }
    Ok(q * coef)
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn check_spd(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(ShrinkError::invalid(format!("{what} must be square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(ShrinkError::invalid(format!("{what} has non-finite entries")));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(ShrinkError::invalid(format!("{what} is not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(ShrinkError::invalid(format!("{what} is not positive definite")));
    }
    Ok(())
}

/// `(M^{1/2}, M^{-1/2})` for symmetric positive-definite `M`.
pub(crate) fn spd_sqrt_pair(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(ShrinkError::invalid("matrix is not positive definite"));
    }
    let q = &eig.eigenvectors;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let inv_root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok((q * root * q.transpose(), q * inv_root * q.transpose()))
}

fn check_weights(weights: &DVector<f64>) -> Result<()> {
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(ShrinkError::invalid("weights must be strictly positive and finite"));
    }
    Ok(())
}

/// Weighted least squares `argmin_β Σ w_i (y_i − X_iᵀβ)²`; returns `(β, Xᵀβ)`.
pub fn gls_fit(
    x: &DesignMatrix,
    y: &DVector<f64>,
    weights: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_len("response", x.p(), y.len())?;
    check_len("weights", x.p(), weights.len())?;
    check_weights(weights)?;
    // Weights are normalized so that tiny common scales do not underflow.
    let wmax = weights.max();
    let sqrt_w = weights.map(|w| (w / wmax).sqrt());
    let design = DMatrix::from_fn(x.p(), x.k(), |i, j| x.entries()[(j, i)] * sqrt_w[i]);
    let target = y.component_mul(&sqrt_w);
    let beta = lstsq(&design, &target)?;
    let mu = x.fitted(&beta);
    Ok((beta, mu))
}

/// Weighted fit tolerating zero weights and rank loss (minimum-norm β).
pub(crate) fn weighted_fit_tolerant(
    x: &DesignMatrix,
    y: &DVector<f64>,
    weights: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let wmax = weights.max();
    if !(wmax > 0.0) {
        let beta = DVector::zeros(x.k());
        let mu = x.fitted(&beta);
        return (beta, mu);
    }
    let sqrt_w = weights.map(|w| (w / wmax).max(0.0).sqrt());
    let design = DMatrix::from_fn(x.p(), x.k(), |i, j| x.entries()[(j, i)] * sqrt_w[i]);
    let target = y.component_mul(&sqrt_w);
    let beta = lstsq_min_norm(&design, &target);
    let mu = x.fitted(&beta);
    (beta, mu)
}

/// The metric `M` of a generalized least squares target `P_{M,X} Y`.
#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Identity,
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl Metric {
    pub fn validate(&self, p: usize) -> Result<()> {
        match self {
            Metric::Identity => Ok(()),
            Metric::Diagonal(m) => {
                check_len("metric diagonal", p, m.len())?;
                check_weights(m)
            }
            Metric::Dense(m) => {
                check_len("metric dimension", p, m.nrows())?;
                check_spd(m, "metric M")
            }
        }
    }

    /// `(β, P_{M,X} v)`.
    pub fn fit(&self, x: &DesignMatrix, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        match self {
            Metric::Identity => gls_fit(x, v, &DVector::from_element(x.p(), 1.0)),
            Metric::Diagonal(m) => gls_fit(x, v, m),
            Metric::Dense(m) => {
                let xm = x.entries() * m;
                let g = &xm * x.entries().transpose();
                let beta = solve_spd(&g, &(&xm * v), "generalized least squares")?;
                let mu = x.fitted(&beta);
                Ok((beta, mu))
            }
        }
    }

    pub fn project(&self, x: &DesignMatrix, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.fit(x, v).map(|(_, mu)| mu)
    }

    /// `X M` as a `k × p` matrix.
    fn x_m(&self, x: &DesignMatrix) -> DMatrix<f64> {
        match self {
            Metric::Identity => x.entries().clone(),
            Metric::Diagonal(m) => {
                DMatrix::from_fn(x.k(), x.p(), |r, c| x.entries()[(r, c)] * m[c])
            }
            Metric::Dense(m) => x.entries() * m,
        }
    }

    /// The dense `p × p` projection `Xᵀ(XMXᵀ)⁻¹XM`.
    pub fn projection_matrix(&self, x: &DesignMatrix) -> Result<DMatrix<f64>> {
        let xm = self.x_m(x);
        let g = &xm * x.entries().transpose();
        let cols = solve_spd_many(&g, &xm, "projection Gram matrix")?;
        Ok(x.entries().tr_mul(&cols))
    }

    /// Diagonal entries `P_ii` of the projection.
    pub fn projection_diagonal(&self, x: &DesignMatrix) -> Result<DVector<f64>> {
        let xm = self.x_m(x);
        let g = &xm * x.entries().transpose();
        let sol = solve_spd_many(&g, &xm, "projection Gram matrix")?;
        Ok(DVector::from_fn(x.p(), |i, _| x.entries().column(i).dot(&sol.column(i))))
    }
}

/// `P_{M,X} v = Xᵀ(XMXᵀ)⁻¹XMv` for a dense symmetric positive-definite `M`.
pub fn projection_apply(x: &DesignMatrix, m: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("metric dimension", x.p(), m.nrows())?;
    check_len("projected vector", x.p(), v.len())?;
    check_spd(m, "metric M")?;
    Metric::Dense(m.clone()).project(x, v)
}

/// Spectral basis of `W^{-1/2} V W^{-1/2}` with `V = (XA⁻¹Xᵀ)⁻¹`.
///
/// With `Z = Uᵀ W^{1/2} X` and `Λ = diag(d)`, the Model II shrink matrix is
/// `B(A+B)⁻¹ = λ Zᵀ (λI + Λ)⁻¹ Λ Z A⁻¹` and `Z A⁻¹ Zᵀ = Λ⁻¹`, so every
/// p-dimensional quantity reduces to k-dimensional algebra.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkBasis {
    pub z: DMatrix<f64>,
    /// Effective variances, ascending.
    pub d: DVector<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub w_sqrt: DMatrix<f64>,
    pub w_inv_sqrt: DMatrix<f64>,
    pub a_inv: DVector<f64>,
    /// `(ZZᵀ)_ii`.
    pub zzt_diag: DVector<f64>,
}

impl ShrinkBasis {
    pub fn k(&self) -> usize {
        self.d.len()
    }

    /// `Λ Z A⁻¹ y`: the WLS coefficient expressed in the rotated basis.
    pub fn rotated_wls(&self, y: &DVector<f64>) -> DVector<f64> {
        let zy = &self.z * y.component_mul(&self.a_inv);
        zy.component_mul(&self.d)
    }

    /// `Uᵀ W^{-1/2} β₀`.
    pub fn rotate_coef(&self, beta0: &DVector<f64>) -> DVector<f64> {
        self.u.tr_mul(&(&self.w_inv_sqrt * beta0))
    }

    /// Inverse of [`Self::rotate_coef`]: `W^{1/2} U γ`.
    pub fn unrotate_coef(&self, gamma: &DVector<f64>) -> DVector<f64> {
        &self.w_sqrt * (&self.u * gamma)
    }

    /// `Zᵀ γ`, which equals `Xᵀβ` when `γ` is the rotated `β`.
    pub fn fitted(&self, gamma: &DVector<f64>) -> DVector<f64> {
        self.z.tr_mul(gamma)
    }
}

pub fn shrink_basis(x: &DesignMatrix, a: &DVector<f64>, w: &DMatrix<f64>) -> Result<ShrinkBasis> {
    check_len("variances", x.p(), a.len())?;
    check_len("prior matrix W", x.k(), w.nrows())?;
    if a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(ShrinkError::invalid("variances A_i must be strictly positive and finite"));
    }
    check_spd(w, "prior matrix W")?;
    let a_inv = a.map(|v| 1.0 / v);
    let gram = x.weighted_gram(&a_inv) * x.p() as f64;
    let k = x.k();
    let v = symmetrize(&solve_spd_many(&gram, &DMatrix::identity(k, k), "X A⁻¹ Xᵀ")?);
    let (w_sqrt, w_inv_sqrt) = spd_sqrt_pair(w)?;
    let target = symmetrize(&(&w_inv_sqrt * &v * &w_inv_sqrt));
    let eig = SymmetricEigen::new(target);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let d = DVector::from_iterator(k, order.iter().map(|&i| eig.eigenvalues[i]));
    let u = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
    let z = u.tr_mul(&(&w_sqrt * x.entries()));
    let zzt_diag = DVector::from_iterator(k, z.row_iter().map(|r| r.norm_squared()));
    Ok(ShrinkBasis {
        z,
        d,
        u,
        v,
        w_sqrt,
        w_inv_sqrt,
        a_inv,
        zzt_diag,
    })
}
