//! Semiparametric URE fits: shrinkage weights constrained only to be
//! monotone in the (effective) variances.

mod pava;
mod qp;

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};

pub use pava::pava_weighted;

use crate::error::{check_len, Result, ShrinkError};
use crate::estimators::{fit_ure, GlsTarget, Model, ModelKind};
use crate::linalg::{check_spd, lstsq_min_norm, shrink_basis, weighted_fit_tolerant, ShrinkBasis};
use crate::model::{HeteroData, ShrinkOperator};
use crate::risk::{in_l, sp_gls_value, sp_model2_theta, sp_model2_value, MembershipSpec, WeightedLossSpec};
use pava::isotonic_sufficient;
use qp::MonotoneQp;

const MAX_ALTERNATIONS: usize = 500;
const DECREASE_TOL: f64 = 1e-12;
const ALL_SUBSETS_UPTO: usize = 8;

/// Shrinkage weights in `[0,1]`, nondecreasing in `order_key` and equal on
/// ties of the key.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneVector {
    b: DVector<f64>,
    order_key: DVector<f64>,
}

impl MonotoneVector {
    pub fn new(b: DVector<f64>, order_key: DVector<f64>) -> Result<Self> {
        check_len("order key", b.len(), order_key.len())?;
        if !Self::is_feasible(&b, &order_key) {
            return Err(ShrinkError::invalid("weights are not monotone in the order key within [0, 1]"));
        }
        Ok(Self { b, order_key })
    }

    /// Direct scan of the box, order and tie constraints.
    pub fn is_feasible(b: &DVector<f64>, key: &DVector<f64>) -> bool {
        if b.len() != key.len() || b.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return false;
        }
        let mut order: Vec<usize> = (0..b.len()).collect();
        order.sort_by(|&i, &j| key[i].total_cmp(&key[j]));
        order.windows(2).all(|w| {
            let (i, j) = (w[0], w[1]);
            if key[i] == key[j] {
                b[i] == b[j]
            } else {
                b[i] <= b[j]
            }
        })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn order_key(&self) -> &DVector<f64> {
        &self.order_key
    }
}

/// Where a Model I semiparametric fit shrinks to.
#[derive(Debug, Clone, PartialEq)]
pub enum SpTarget {
    /// Location chosen jointly with `b`.
    General,
    /// Location fixed at `P_{M,X} Y`.
    Gls(GlsTarget),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiparamFit {
    pub model: ModelKind,
    /// Weight on the shrinkage location.
    pub b: MonotoneVector,
    /// `β` with `μ = Xᵀβ` (Model I) or `β₀` (Model II).
    pub beta: DVector<f64>,
    pub mu: DVector<f64>,
    pub theta_hat: DVector<f64>,
    /// Weight on `Y_i`: `1 − b_i` for Model I, the diagonal of the smoother
    /// for Model II.
    pub shrink_factor: DVector<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each alternation of the winning start.
    pub trace: Vec<f64>,
    pub in_l: bool,
}

/// b-step for `Σψ_i(b_i² r_i² − 2 b_i c_i)`: isotonic in `A` and clamped.
/// Units with no residual pool upward, and to 1 at the top.
fn b_step(a: &DVector<f64>, resid: &DVector<f64>, psi: &DVector<f64>, reward: &DVector<f64>) -> DVector<f64> {
    let num = psi.component_mul(reward);
    let weight = DVector::from_fn(a.len(), |i, _| psi[i] * resid[i] * resid[i]);
    isotonic_sufficient(&num, &weight, a).map(|v| if v.is_nan() { 1.0 } else { v.clamp(0.0, 1.0) })
}

fn weighted_value(data: &HeteroData, psi: &DVector<f64>, b: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    let (y, a) = (data.y(), data.a());
    (0..data.p())
        .map(|i| psi[i] * (b[i] * b[i] * (y[i] - mu[i]).powi(2) + (1.0 - 2.0 * b[i]) * a[i]))
        .sum::<f64>()
        / data.p() as f64
}

struct Run {
    b: DVector<f64>,
    beta: DVector<f64>,
    mu: DVector<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn alternate_model1(data: &HeteroData, psi: &DVector<f64>, start_beta: DVector<f64>) -> Run {
    let a = data.a();
    let mut beta = start_beta;
    let mut mu = data.x().fitted(&beta);
    let mut b = b_step(a, &(data.y() - &mu), psi, a);
    let mut value = weighted_value(data, psi, &b, &mu);
    let mut trace = vec![value];
    for it in 1..=MAX_ALTERNATIONS {
        let weights = DVector::from_fn(data.p(), |i, _| psi[i] * b[i] * b[i]);
        let (nb, nmu) = weighted_fit_tolerant(data.x(), data.y(), &weights);
        let nbv = b_step(a, &(data.y() - &nmu), psi, a);
        let next = weighted_value(data, psi, &nbv, &nmu);
        // every half-step is an exact minimization; reject round-off increases
        if !(next <= value) {
            return Run { b, beta, mu, value, iterations: it, converged: true, trace };
        }
        let decrease = value - next;
        beta = nb;
        mu = nmu;
        b = nbv;
        value = next;
        trace.push(value);
        if decrease < DECREASE_TOL {
            return Run { b, beta, mu, value, iterations: it, converged: true, trace };
        }
    }
    Run { b, beta, mu, value, iterations: MAX_ALTERNATIONS, converged: false, trace }
}

fn model1_starts(data: &HeteroData) -> Result<Vec<DVector<f64>>> {
    let (wls, _) = data.wls_fit()?;
    let (ols, _) = data.ols_fit()?;
    let parametric = fit_ure(data, &Model::I)?.beta;
    let mut starts = vec![wls, ols, parametric];
    // Fits through the m highest-variance units. The joint problem has minima
    // where μ passes through the top units and b = 1 there, which the
    // smooth starts above never reach when p is small relative to k.
    let order = descending_order(data.a());
    for m in subset_sizes(data.p()) {
        let mut w = DVector::zeros(data.p());
        for &i in &order[..m] {
            w[i] = 1.0;
        }
        starts.push(weighted_fit_tolerant(data.x(), data.y(), &w).0);
    }
    Ok(starts)
}

/// Every size up to `ALL_SUBSETS_UPTO`, then doubling.
fn subset_sizes(p: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = (1..=p.min(ALL_SUBSETS_UPTO)).collect();
    let mut m = 2 * ALL_SUBSETS_UPTO;
    while m < p {
        sizes.push(m);
        m *= 2;
    }
    sizes
}

fn descending_order(a: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[j].total_cmp(&a[i]));
    order
}

fn finish_model1(data: &HeteroData, run: Run) -> Result<SemiparamFit> {
    if !run.value.is_finite() {
        return Err(ShrinkError::NonFinite("semiparametric URE"));
    }
    let theta_hat = DVector::from_fn(data.p(), |i, _| data.y()[i] - run.b[i] * (data.y()[i] - run.mu[i]));
    let in_l = in_l(&run.mu, data.x(), data.y(), &MembershipSpec::default());
    Ok(SemiparamFit {
        model: ModelKind::I,
        shrink_factor: run.b.map(|v| 1.0 - v),
        b: MonotoneVector::new(run.b, data.a().clone())?,
        beta: run.beta,
        mu: run.mu,
        theta_hat,
        objective_value: run.value,
        iterations: run.iterations,
        converged: run.converged,
        trace: run.trace,
        in_l,
    })
}

/// Model I semiparametric URE fit, `b ∈ MON(A)`.
pub fn fit_ure_sp_model1(data: &HeteroData, target: &SpTarget) -> Result<SemiparamFit> {
    match target {
        SpTarget::General => fit_ure_sp_weighted(data, &WeightedLossSpec::uniform(data.p())),
        SpTarget::Gls(t) => {
            let metric = t.metric();
            metric.validate(data.p())?;
            let (beta, mu) = metric.fit(data.x(), data.y())?;
            let pd = metric.projection_diagonal(data.x())?;
            let ones = DVector::from_element(data.p(), 1.0);
            // the leverage term keeps the estimate unbiased for a data-driven location
            let reward = DVector::from_fn(data.p(), |i, _| data.a()[i] * (1.0 - pd[i]));
            let b = b_step(data.a(), &(data.y() - &mu), &ones, &reward);
            let value = sp_gls_value(data, &b, &mu, &pd);
            finish_model1(
                data,
                Run { b, beta, mu, value, iterations: 1, converged: true, trace: vec![value] },
            )
        }
    }
}

/// ψ-weighted semiparametric fit with a free location.
pub fn fit_ure_sp_weighted(data: &HeteroData, spec: &WeightedLossSpec) -> Result<SemiparamFit> {
    check_len("loss weights", data.p(), spec.psi().len())?;
    let best = model1_starts(data)?
        .into_iter()
        .map(|start| alternate_model1(data, spec.psi(), start))
        .min_by(|x, y| x.value.total_cmp(&y.value))
        .expect("at least one start");
    finish_model1(data, best)
}

struct Model2Ctx {
    basis: ShrinkBasis,
    g: DVector<f64>,
    r0: DVector<f64>,
    zt: DMatrix<f64>,
    zzt: DMatrix<f64>,
    reward: DVector<f64>,
}

impl Model2Ctx {
    fn new(data: &HeteroData, w: &DMatrix<f64>) -> Result<Self> {
        check_len("prior matrix W", data.k(), w.nrows())?;
        check_spd(w, "prior matrix W")?;
        let basis = shrink_basis(data.x(), data.a(), w)?;
        let g = basis.rotated_wls(data.y());
        let r0 = data.y() - basis.fitted(&g);
        let zt = basis.z.transpose();
        let zzt = &basis.z * &zt;
        let reward = basis.d.component_mul(&basis.zzt_diag);
        Ok(Self { basis, g, r0, zt, zzt, reward })
    }

    fn qp(&self, gamma0: &DVector<f64>, p: usize) -> MonotoneQp<'_> {
        MonotoneQp {
            zt: &self.zt,
            zzt: &self.zzt,
            r0: &self.r0,
            e: &self.g - gamma0,
            reward: self.reward.clone(),
            key: &self.basis.d,
            p: p as f64,
        }
    }

    /// Least squares in `γ₀` over the coordinates with `b_i > 0`.
    fn gamma_step(&self, b: &DVector<f64>, gamma0: &DVector<f64>) -> DVector<f64> {
        let active: Vec<usize> = (0..b.len()).filter(|&i| b[i] > 0.0).collect();
        if active.is_empty() {
            return gamma0.clone();
        }
        let design = DMatrix::from_fn(self.zt.nrows(), active.len(), |r, c| self.zt[(r, active[c])]);
        let v = lstsq_min_norm(&design, &(-&self.r0));
        let mut out = gamma0.clone();
        for (c, &i) in active.iter().enumerate() {
            out[i] = self.g[i] - v[c] / b[i];
        }
        out
    }
}

fn model2_value(data: &HeteroData, ctx: &Model2Ctx, b: &DVector<f64>, gamma0: &DVector<f64>) -> f64 {
    sp_model2_value(data, &ctx.basis, b, &ctx.g, gamma0)
}

fn b_step_model2(data: &HeteroData, ctx: &Model2Ctx, gamma0: &DVector<f64>, b_start: &DVector<f64>) -> (DVector<f64>, bool) {
    let res = ctx.qp(gamma0, data.p()).solve(b_start);
    (res.b, res.converged)
}

fn alternate_model2(data: &HeteroData, ctx: &Model2Ctx, start_gamma: DVector<f64>) -> Run {
    let k = ctx.basis.k();
    let mut gamma = start_gamma;
    let (mut b, mut qp_ok) = b_step_model2(data, ctx, &gamma, &DVector::from_element(k, 0.5));
    let mut value = model2_value(data, ctx, &b, &gamma);
    let mut trace = vec![value];
    for it in 1..=MAX_ALTERNATIONS {
        let ng = ctx.gamma_step(&b, &gamma);
        let (nb, ok) = b_step_model2(data, ctx, &ng, &b);
        let next = model2_value(data, ctx, &nb, &ng);
        if !(next <= value) {
            return finish_run(ctx, b, gamma, value, it, qp_ok, trace);
        }
        let decrease = value - next;
        gamma = ng;
        b = nb;
        value = next;
        qp_ok = ok;
        trace.push(value);
        if decrease < DECREASE_TOL {
            return finish_run(ctx, b, gamma, value, it, qp_ok, trace);
        }
    }
    finish_run(ctx, b, gamma, value, MAX_ALTERNATIONS, false, trace)
}

fn finish_run(
    ctx: &Model2Ctx,
    b: DVector<f64>,
    gamma: DVector<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
) -> Run {
    let beta = ctx.basis.unrotate_coef(&gamma);
    Run { b, mu: DVector::zeros(0), beta, value, iterations, converged, trace }
}

fn finish_model2(data: &HeteroData, ctx: &Model2Ctx, run: Run) -> Result<SemiparamFit> {
    if !run.value.is_finite() {
        return Err(ShrinkError::NonFinite("semiparametric URE"));
    }
    let gamma = ctx.basis.rotate_coef(&run.beta);
    let theta_hat = sp_model2_theta(&ctx.basis, &run.b, &ctx.g, &gamma);
    let mu = data.x().fitted(&run.beta);
    let op = ShrinkOperator::model2_factors(data.a(), Cow::Borrowed(&ctx.basis), run.b.map(|v| 1.0 - v));
    let in_l = in_l(&mu, data.x(), data.y(), &MembershipSpec::default());
    Ok(SemiparamFit {
        model: ModelKind::II,
        shrink_factor: op.diagonal(),
        b: MonotoneVector::new(run.b, ctx.basis.d.clone())?,
        beta: run.beta,
        mu,
        theta_hat,
        objective_value: run.value,
        iterations: run.iterations,
        converged: run.converged,
        trace: run.trace,
        in_l,
    })
}

/// Model II semiparametric URE fit, `b ∈ MON(D)` with `β₀` free.
pub fn fit_ure_sp_model2(data: &HeteroData, w: &DMatrix<f64>) -> Result<SemiparamFit> {
    let ctx = Model2Ctx::new(data, w)?;
    let (wls, _) = data.wls_fit()?;
    let (ols, _) = data.ols_fit()?;
    let parametric = fit_ure(data, &Model::II { w: w.clone() })?.beta;
    let best = [wls, ols, parametric]
        .into_iter()
        .map(|beta| alternate_model2(data, &ctx, ctx.basis.rotate_coef(&beta)))
        .min_by(|x, y| x.value.total_cmp(&y.value))
        .expect("at least one start");
    finish_model2(data, &ctx, best)
}

/// Model II b-step alone: `β₀` held fixed, `b ∈ MON(D)` optimized.
pub fn fit_ure_sp_model2_fixed(data: &HeteroData, w: &DMatrix<f64>, beta0: &DVector<f64>) -> Result<SemiparamFit> {
    check_len("prior coefficients", data.k(), beta0.len())?;
    let ctx = Model2Ctx::new(data, w)?;
    let gamma = ctx.basis.rotate_coef(beta0);
    let res = ctx.qp(&gamma, data.p()).solve(&DVector::from_element(ctx.basis.k(), 0.5));
    let value = model2_value(data, &ctx, &res.b, &gamma);
    let run = Run {
        b: res.b,
        beta: beta0.clone(),
        mu: DVector::zeros(0),
        value,
        iterations: res.iterations,
        converged: res.converged,
        trace: vec![value],
    };
    finish_model2(data, &ctx, run)
}
