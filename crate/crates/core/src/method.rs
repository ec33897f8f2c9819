//! A single entry point over every estimator, keyed by the short names used
//! on the command line and in experiment output.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{Result, ShrinkError};
use crate::estimators::{
    fit_ebmle, fit_ebmom, fit_james_stein, fit_oracle, fit_ure, fit_ure_gls, GlsTarget, Model, ModelKind, OracleKind,
    ParametricFit, Tuning,
};
use crate::model::{GroundTruth, HeteroData, Lambda};
use crate::risk::{in_l, MembershipSpec};
use crate::semiparam::{fit_ure_sp_model1, fit_ure_sp_model2, SemiparamFit, SpTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Naive,
    Ols,
    Wls,
    Ure,
    UreOls,
    UreWls,
    UreSp,
    UreSpOls,
    UreSpWls,
    Ebmle,
    Ebmom,
    JsPlus,
    OracleLoss,
    OracleRisk,
}

impl Method {
    pub const ALL: [Method; 14] = [
        Method::Naive,
        Method::Ols,
        Method::Wls,
        Method::Ure,
        Method::UreOls,
        Method::UreWls,
        Method::UreSp,
        Method::UreSpOls,
        Method::UreSpWls,
        Method::Ebmle,
        Method::Ebmom,
        Method::JsPlus,
        Method::OracleLoss,
        Method::OracleRisk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Ols => "ols",
            Method::Wls => "wls",
            Method::Ure => "ure",
            Method::UreOls => "ure-ols",
            Method::UreWls => "ure-wls",
            Method::UreSp => "ure-sp",
            Method::UreSpOls => "ure-sp-ols",
            Method::UreSpWls => "ure-sp-wls",
            Method::Ebmle => "ebmle",
            Method::Ebmom => "ebmom",
            Method::JsPlus => "js",
            Method::OracleLoss => "ol",
            Method::OracleRisk => "or",
        }
    }

    /// Oracles need the true means.
    pub fn needs_truth(self) -> bool {
        matches!(self, Method::OracleLoss | Method::OracleRisk)
    }

    pub fn is_semiparametric(self) -> bool {
        matches!(self, Method::UreSp | Method::UreSpOls | Method::UreSpWls)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ShrinkError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let alias = match s.as_str() {
            "js+" | "jsplus" | "james-stein" => "js",
            other => other,
        };
        Method::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| ShrinkError::invalid(format!("unknown method '{s}'")))
    }
}

/// What determines the fitted rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Fitted {
    /// No tuning (naive and the plain regression fits).
    None,
    Lambda(Lambda),
    /// One factor for every unit (James-Stein).
    Uniform(f64),
    /// Semiparametric weights on the location.
    Monotone(DVector<f64>),
}

/// Output shared by every method.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub method: Method,
    pub model: ModelKind,
    pub theta_hat: DVector<f64>,
    /// Weight placed on `Y_i`.
    pub shrink_factor: DVector<f64>,
    /// Shrinkage location (absent for the naive rule).
    pub mu: Option<DVector<f64>>,
    pub beta: Option<DVector<f64>>,
    pub fitted: Fitted,
    pub objective_value: Option<f64>,
    /// Membership of `mu` in the admissible location set.
    pub in_l: Option<bool>,
    pub iterations: Option<usize>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub model: Model,
    pub membership: MembershipSpec,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            model: Model::I,
            membership: MembershipSpec::default(),
        }
    }
}

fn from_parametric(method: Method, fit: ParametricFit) -> Estimate {
    Estimate {
        method,
        model: fit.model,
        theta_hat: fit.theta_hat,
        shrink_factor: fit.shrink_factor,
        mu: Some(fit.mu),
        beta: Some(fit.beta),
        fitted: match fit.tuning {
            Tuning::Lambda(l) => Fitted::Lambda(l),
            Tuning::Uniform(c) => Fitted::Uniform(c),
        },
        objective_value: Some(fit.objective_value),
        in_l: Some(fit.in_l),
        iterations: None,
        converged: true,
    }
}

fn from_semiparametric(method: Method, fit: SemiparamFit) -> Estimate {
    Estimate {
        method,
        model: fit.model,
        theta_hat: fit.theta_hat,
        shrink_factor: fit.shrink_factor,
        mu: Some(fit.mu),
        beta: Some(fit.beta),
        fitted: Fitted::Monotone(fit.b.values().clone()),
        objective_value: Some(fit.objective_value),
        in_l: Some(fit.in_l),
        iterations: Some(fit.iterations),
        converged: fit.converged,
    }
}

fn regression(method: Method, data: &HeteroData, fit: (DVector<f64>, DVector<f64>)) -> Estimate {
    let (beta, mu) = fit;
    Estimate {
        method,
        model: ModelKind::I,
        theta_hat: mu.clone(),
        shrink_factor: DVector::zeros(data.p()),
        mu: Some(mu),
        beta: Some(beta),
        fitted: Fitted::Lambda(Lambda::ZERO),
        objective_value: None,
        in_l: None,
        iterations: None,
        converged: true,
    }
}

fn unsupported_for_model_two(method: Method) -> ShrinkError {
    ShrinkError::Unsupported(format!("{method} is only defined for Model I"))
}

/// Fits `method` to `data`. Oracles require `truth`.
pub fn estimate(data: &HeteroData, method: Method, config: &MethodConfig, truth: Option<&GroundTruth>) -> Result<Estimate> {
    let model = &config.model;
    let two = model.kind() == ModelKind::II;
    let mut est = match method {
        Method::Naive => Estimate {
            method,
            model: model.kind(),
            theta_hat: data.y().clone(),
            shrink_factor: DVector::from_element(data.p(), 1.0),
            mu: None,
            beta: None,
            fitted: Fitted::Lambda(Lambda::Infinite),
            objective_value: None,
            in_l: None,
            iterations: None,
            converged: true,
        },
        Method::Ols => regression(method, data, data.ols_fit()?),
        Method::Wls => regression(method, data, data.wls_fit()?),
        Method::Ure => from_parametric(method, fit_ure(data, model)?),
        Method::UreOls => from_parametric(method, fit_ure_gls(data, model, &GlsTarget::ols())?),
        Method::UreWls => from_parametric(method, fit_ure_gls(data, model, &GlsTarget::wls(data.a()))?),
        Method::UreSp => match model {
            Model::I => from_semiparametric(method, fit_ure_sp_model1(data, &SpTarget::General)?),
            Model::II { w } => from_semiparametric(method, fit_ure_sp_model2(data, w)?),
        },
        Method::UreSpOls | Method::UreSpWls if two => return Err(unsupported_for_model_two(method)),
        Method::UreSpOls => from_semiparametric(method, fit_ure_sp_model1(data, &SpTarget::Gls(GlsTarget::ols()))?),
        Method::UreSpWls => {
            from_semiparametric(method, fit_ure_sp_model1(data, &SpTarget::Gls(GlsTarget::wls(data.a())))?)
        }
        Method::Ebmle => from_parametric(method, fit_ebmle(data, model)?),
        Method::Ebmom => from_parametric(method, fit_ebmom(data, model)?),
        Method::JsPlus if two => return Err(unsupported_for_model_two(method)),
        Method::JsPlus => from_parametric(method, fit_james_stein(data)?),
        Method::OracleLoss | Method::OracleRisk => {
            let truth = truth.ok_or_else(|| ShrinkError::invalid(format!("{method} needs the true means")))?;
            let kind = if method == Method::OracleLoss { OracleKind::Loss } else { OracleKind::Risk };
            from_parametric(method, fit_oracle(data, truth, kind, model)?)
        }
    };
    if let Some(mu) = &est.mu {
        est.in_l = Some(in_l(mu, data.x(), data.y(), &config.membership));
    }
    Ok(est)
}
