//! Seeded generators for the two simulation designs and the Monte Carlo
//! runner that turns them into risk curves.
//!
//! Randomness: ChaCha20 keyed by the user seed, one stream per
//! `(p, replication)`; the covariates for a given `p` use a reserved stream.
//! Any replication can therefore be regenerated on its own, in any order,
//! on any thread.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_len, Result, ShrinkError};
use crate::linalg::DesignMatrix;
use crate::method::{estimate, Method, MethodConfig};
use crate::model::{GroundTruth, HeteroData};
use crate::parallel::{map_indices, Execution};
use crate::risk::loss;

const COVARIATE_STREAM: u64 = 0xFFFF_FFFF;

pub const DEFAULT_BETA: [f64; 3] = [-1.5, 4.0, -3.0];

/// Entries i.i.d. `Unif(−10, 10)`, returned as the `k × p` design.
pub fn gen_covariates<R: Rng + ?Sized>(p: usize, k: usize, rng: &mut R) -> Result<DesignMatrix> {
    if k == 0 || k > p {
        return Err(ShrinkError::invalid(format!("need 1 <= k <= p (k = {k}, p = {p})")));
    }
    // fill unit by unit so a prefix of units does not depend on p
    let mut m = DMatrix::zeros(k, p);
    for i in 0..p {
        for j in 0..k {
            m[(j, i)] = rng.random_range(-10.0..10.0);
        }
    }
    DesignMatrix::new(m)
}

/// Two variance groups; the low-variance group has its means shifted by 2,
/// so a linear location fitted to everything is biased within each group.
pub fn gen_example1<R: Rng + ?Sized>(
    x: &DesignMatrix,
    beta: &DVector<f64>,
    rng: &mut R,
) -> Result<(HeteroData, GroundTruth)> {
    check_len("true coefficients", x.k(), beta.len())?;
    let p = x.p();
    let mean = x.fitted(beta);
    let spread = Normal::new(0.0, 0.5).expect("valid normal");
    let mut a = DVector::zeros(p);
    let mut theta = DVector::zeros(p);
    let mut y = DVector::zeros(p);
    for i in 0..p {
        let low = rng.random_bool(0.5);
        a[i] = if low { 0.1 } else { 0.5 };
        theta[i] = if low { 2.0 } else { 0.0 } + mean[i] + spread.sample(rng);
        let noise: f64 = rng.sample(rand_distr::StandardNormal);
        y[i] = theta[i] + f64::sqrt(a[i]) * noise;
    }
    Ok((HeteroData::new(y, a, x.clone())?, GroundTruth::new(theta)?))
}

/// Half-width of the uniform noise in the second design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Example2Mode {
    /// `√3·A_i`, so the variance is `A_i²` rather than `A_i`.
    #[default]
    AsWritten,
    /// `√(3A_i)`, so the variance is `A_i`.
    VarianceMatched,
}

impl Example2Mode {
    pub fn name(self) -> &'static str {
        match self {
            Example2Mode::AsWritten => "as-written",
            Example2Mode::VarianceMatched => "variance-matched",
        }
    }

    pub fn half_width(self, a: f64) -> f64 {
        match self {
            Example2Mode::AsWritten => 3f64.sqrt() * a,
            Example2Mode::VarianceMatched => (3.0 * a).sqrt(),
        }
    }
}

impl FromStr for Example2Mode {
    type Err = ShrinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "as-written" => Ok(Example2Mode::AsWritten),
            "variance-matched" => Ok(Example2Mode::VarianceMatched),
            other => Err(ShrinkError::invalid(format!("unknown example-2 mode '{other}'"))),
        }
    }
}

/// Means tied to the variances and uniform, non-normal noise.
pub fn gen_example2<R: Rng + ?Sized>(
    x: &DesignMatrix,
    beta: &DVector<f64>,
    mode: Example2Mode,
    rng: &mut R,
) -> Result<(HeteroData, GroundTruth)> {
    check_len("true coefficients", x.k(), beta.len())?;
    let p = x.p();
    let mean = x.fitted(beta);
    let mut a = DVector::zeros(p);
    let mut theta = DVector::zeros(p);
    let mut y = DVector::zeros(p);
    for i in 0..p {
        a[i] = rng.random_range(0.1..1.0);
        theta[i] = a[i] + mean[i];
        let h = mode.half_width(a[i]);
        y[i] = theta[i] + rng.random_range(-h..=h);
    }
    Ok((HeteroData::new(y, a, x.clone())?, GroundTruth::new(theta)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Example {
    One,
    Two,
}

impl FromStr for Example {
    type Err = ShrinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(Example::One),
            "2" => Ok(Example::Two),
            other => Err(ShrinkError::invalid(format!("unknown example '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub example: Example,
    pub p_grid: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub beta_true: DVector<f64>,
    pub estimators: Vec<Method>,
    pub example2_mode: Example2Mode,
    pub method_config: MethodConfig,
    pub execution: Execution,
}

impl SimConfig {
    /// The published design: `p = 20, 40, …, 500`, 5000 replications and
    /// the eight estimators compared there.
    pub fn study(example: Example, seed: u64) -> Self {
        Self {
            example,
            p_grid: (1..=25).map(|i| 20 * i).collect(),
            reps: 5000,
            seed,
            beta_true: DVector::from_column_slice(&DEFAULT_BETA),
            estimators: vec![
                Method::Ure,
                Method::UreOls,
                Method::UreSp,
                Method::UreSpOls,
                Method::Ebmle,
                Method::Ebmom,
                Method::JsPlus,
                Method::OracleRisk,
            ],
            example2_mode: Example2Mode::default(),
            method_config: MethodConfig::default(),
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.beta_true.len();
        if self.p_grid.is_empty() || self.p_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ShrinkError::invalid("p grid must be nonempty and strictly ascending"));
        }
        if self.p_grid[0] < k.max(1) {
            return Err(ShrinkError::invalid(format!("every p must be at least k = {k}")));
        }
        if self.p_grid.iter().any(|&p| p as u64 > u32::MAX as u64) {
            return Err(ShrinkError::invalid("p exceeds the stream layout"));
        }
        if self.reps == 0 || self.reps as u64 >= COVARIATE_STREAM {
            return Err(ShrinkError::invalid("reps must be at least 1 and below 2^32 - 1"));
        }
        if self.estimators.is_empty() {
            return Err(ShrinkError::invalid("no estimators requested"));
        }
        if self.beta_true.iter().any(|b| !b.is_finite()) {
            return Err(ShrinkError::NonFinite("true coefficients"));
        }
        Ok(())
    }

    fn stream(&self, p: usize, index: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(((p as u64) << 32) | index);
        rng
    }

    /// The fixed covariates used at this `p`.
    pub fn covariates(&self, p: usize) -> Result<DesignMatrix> {
        gen_covariates(p, self.beta_true.len(), &mut self.stream(p, COVARIATE_STREAM))
    }

    /// Data for one replication, reproducible in isolation.
    pub fn replication(&self, x: &DesignMatrix, rep: usize) -> Result<(HeteroData, GroundTruth)> {
        let mut rng = self.stream(x.p(), rep as u64);
        match self.example {
            Example::One => gen_example1(x, &self.beta_true, &mut rng),
            Example::Two => gen_example2(x, &self.beta_true, self.example2_mode, &mut rng),
        }
    }
}

/// Per-replication losses at one `p`: `losses[estimator][rep]`, `None` when
/// the estimator failed on that draw.
pub fn replication_losses(config: &SimConfig, p: usize) -> Result<Vec<Vec<Option<f64>>>> {
    config.validate()?;
    let x = config.covariates(p)?;
    let per_rep: Vec<Result<Vec<Option<f64>>>> = map_indices(config.reps, config.execution, |rep| {
        let (data, truth) = config.replication(&x, rep)?;
        Ok(config
            .estimators
            .iter()
            .map(|&m| {
                estimate(&data, m, &config.method_config, Some(&truth))
                    .and_then(|e| loss(&truth.theta, &e.theta_hat))
                    .ok()
                    .filter(|v| v.is_finite())
            })
            .collect())
    });
    let per_rep = per_rep.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((0..config.estimators.len())
        .map(|j| per_rep.iter().map(|row| row[j]).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub p: usize,
    pub estimator: Method,
    pub mean_loss: f64,
    /// Sample standard deviation over `√reps`; zero with one replication.
    pub std_error: f64,
    /// Replications that produced a loss.
    pub reps: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RiskCurve {
    pub rows: Vec<RiskRow>,
}

pub const RISK_CSV_HEADER: [&str; 6] = ["p", "estimator", "mean_loss", "std_error", "reps", "failures"];

impl RiskCurve {
    pub fn row(&self, p: usize, estimator: Method) -> Option<&RiskRow> {
        self.rows.iter().find(|r| r.p == p && r.estimator == estimator)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(RISK_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.p.to_string(),
                r.estimator.to_string(),
                r.mean_loss.to_string(),
                r.std_error.to_string(),
                r.reps.to_string(),
                r.failures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for RiskCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "p={:<5} {:<11} {:.5} ± {:.5} ({} ok, {} failed)",
                r.p, r.estimator.name(), r.mean_loss, r.std_error, r.reps, r.failures
            )?;
        }
        Ok(())
    }
}

/// Mean and standard error with a fixed summation order.
pub fn summarize(losses: &[Option<f64>]) -> (f64, f64, usize, usize) {
    let ok: Vec<f64> = losses.iter().flatten().copied().collect();
    let n = ok.len();
    let failures = losses.len() - n;
    if n == 0 {
        return (f64::NAN, f64::NAN, 0, failures);
    }
    let mean = ok.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    (mean, se, n, failures)
}

pub fn run_risk_experiment(config: &SimConfig) -> Result<RiskCurve> {
    config.validate()?;
    let mut rows = Vec::new();
    for &p in &config.p_grid {
        let losses = replication_losses(config, p)?;
        for (j, &estimator) in config.estimators.iter().enumerate() {
            let (mean_loss, std_error, reps, failures) = summarize(&losses[j]);
            rows.push(RiskRow {
                p,
                estimator,
                mean_loss,
                std_error,
                reps,
                failures,
            });
        }
    }
    Ok(RiskCurve { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(example: Example) -> SimConfig {
        SimConfig {
            p_grid: vec![20, 40],
            reps: 6,
            ..SimConfig::study(example, 7)
        }
    }

    #[test]
    fn covariates_are_bounded_deterministic_and_centered() {
        let cfg = SimConfig::study(Example::One, 3);
        let x = cfg.covariates(400).unwrap();
        assert!(x.entries().iter().all(|v| (-10.0..=10.0).contains(v)));
        assert_eq!(x, cfg.covariates(400).unwrap());
        let n = x.entries().len() as f64;
        let mean = x.entries().sum() / n;
        assert!(mean.abs() < 3.0 * (20.0 / 12f64.sqrt()) / n.sqrt());
        assert_ne!(x, SimConfig::study(Example::One, 4).covariates(400).unwrap());
    }

    #[test]
    fn example1_moments() {
        let cfg = SimConfig::study(Example::One, 11);
        let p = 20_000;
        let x = cfg.covariates(p).unwrap();
        let (data, truth) = cfg.replication(&x, 0).unwrap();
        assert!(data.a().iter().all(|&a| a == 0.1 || a == 0.5));
        let low = data.a().iter().filter(|&&a| a == 0.1).count() as f64 / p as f64;
        assert!((low - 0.5).abs() < 3.0 * 0.5 / (p as f64).sqrt());
        let mean = x.fitted(&cfg.beta_true);
        let dev: Vec<f64> = (0..p)
            .map(|i| truth.theta[i] - mean[i] - if data.a()[i] == 0.1 { 2.0 } else { 0.0 })
            .collect();
        let var = dev.iter().map(|d| d * d).sum::<f64>() / p as f64;
        // Var of a sample variance of N(0, σ²) is 2σ⁴/p
        assert!((var - 0.25).abs() < 4.0 * (2.0 * 0.25f64.powi(2) / p as f64).sqrt());
        let z: f64 = (0..p).map(|i| (data.y()[i] - truth.theta[i]).powi(2) / data.a()[i]).sum::<f64>() / p as f64;
        assert!((z - 1.0).abs() < 4.0 * (2.0 / p as f64).sqrt());
    }

    #[test]
    fn example2_support_and_variance() {
        for mode in [Example2Mode::AsWritten, Example2Mode::VarianceMatched] {
            let cfg = SimConfig {
                example2_mode: mode,
                ..SimConfig::study(Example::Two, 5)
            };
            let p = 20_000;
            let x = cfg.covariates(p).unwrap();
            let (data, truth) = cfg.replication(&x, 3).unwrap();
            let mean = x.fitted(&cfg.beta_true);
            let mut ratio = 0.0;
            for i in 0..p {
                let a = data.a()[i];
                assert!((0.1..1.0).contains(&a));
                assert_eq!(truth.theta[i], a + mean[i]);
                let e = data.y()[i] - truth.theta[i];
                assert!(e.abs() <= mode.half_width(a) * (1.0 + 1e-15));
                ratio += e * e / a;
            }
            ratio /= p as f64;
            match mode {
                // uniform on ±h has variance h²/3 = A, so e²/A has mean 1 and variance 4/5
                Example2Mode::VarianceMatched => assert!((ratio - 1.0).abs() < 4.0 * (0.8 / p as f64).sqrt()),
                // here e²/A has mean E[A] = 0.55
                Example2Mode::AsWritten => assert!((ratio - 0.55).abs() < 0.02),
            }
        }
    }

    #[test]
    fn reruns_are_bit_identical_and_modes_agree() {
        let cfg = small(Example::One);
        let a = run_risk_experiment(&cfg).unwrap();
        let b = run_risk_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        let seq = run_risk_experiment(&SimConfig {
            execution: Execution::Sequential,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(a, seq);
        assert_eq!(a.rows.len(), 2 * cfg.estimators.len());
        let mut bytes = Vec::new();
        a.write_csv(&mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("p,estimator,mean_loss,std_error,reps,failures\n"));
        assert_eq!(text.lines().count(), 1 + a.rows.len());
    }

    #[test]
    fn estimator_order_does_not_change_losses() {
        let cfg = small(Example::Two);
        let mut rev = cfg.clone();
        rev.estimators.reverse();
        let a = replication_losses(&cfg, 20).unwrap();
        let mut b = replication_losses(&rev, 20).unwrap();
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn failures_are_counted_not_fatal() {
        // James-Stein needs p > k + 2
        let cfg = SimConfig {
            p_grid: vec![5],
            reps: 3,
            estimators: vec![Method::JsPlus, Method::Naive],
            ..SimConfig::study(Example::One, 1)
        };
        let curve = run_risk_experiment(&cfg).unwrap();
        let js = curve.row(5, Method::JsPlus).unwrap();
        assert_eq!((js.reps, js.failures), (0, 3));
        assert!(js.mean_loss.is_nan());
        let naive = curve.row(5, Method::Naive).unwrap();
        assert_eq!((naive.reps, naive.failures), (3, 0));
    }

    #[test]
    fn summary_statistics() {
        let (m, se, n, f) = summarize(&[Some(1.0), None, Some(3.0)]);
        assert_eq!((m, n, f), (2.0, 2, 1));
        assert!((se - (2f64 / 2.0).sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[Some(4.0)]).1, 0.0);
    }

    #[test]
    fn invalid_configs() {
        let base = SimConfig::study(Example::One, 1);
        for bad in [
            SimConfig { p_grid: vec![], ..base.clone() },
            SimConfig { p_grid: vec![40, 20], ..base.clone() },
            SimConfig { p_grid: vec![2], ..base.clone() },
            SimConfig { reps: 0, ..base.clone() },
            SimConfig { estimators: vec![], ..base.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(base.validate().is_ok());
    }
}
