//! Batting-average prediction: fit on the first half season, score against
//! the second.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Result, ShrinkError};
use crate::linalg::DesignMatrix;
use crate::method::{estimate, Method, MethodConfig};
use crate::model::HeteroData;

pub const BATTING_CSV_HEADER: [&str; 6] = ["player_id", "pitcher", "ab1", "h1", "ab2", "h2"];
pub const REPORT_CSV_HEADER: [&str; 6] = ["estimator", "covariates", "tse_ratio", "p_est", "p_val", "failures"];
pub const FACTOR_CSV_HEADER: [&str; 4] = ["player_id", "estimator", "factor", "variance"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BattingRecord {
    pub player_id: String,
    pub pitcher: bool,
    pub n1: u32,
    pub h1: u32,
    pub n2: u32,
    pub h2: u32,
}

impl BattingRecord {
    pub fn new(player_id: impl Into<String>, pitcher: bool, n1: u32, h1: u32, n2: u32, h2: u32) -> Result<Self> {
        let player_id = player_id.into();
        if h1 > n1 || h2 > n2 {
            return Err(ShrinkError::invalid(format!("player {player_id}: more hits than at-bats")));
        }
        Ok(Self { player_id, pitcher, n1, h1, n2, h2 })
    }
}

fn parse_flag(s: &str) -> std::result::Result<bool, String> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(format!("pitcher must be 0 or 1, got '{other}'")),
    }
}

fn parse_count(s: &str, what: &str) -> std::result::Result<u32, String> {
    s.trim()
        .parse::<u32>()
        .map_err(|_| format!("{what} must be a nonnegative integer, got '{s}'"))
}

/// Strict reader for `player_id,pitcher,ab1,h1,ab2,h2`. Every malformed row
/// is reported with its line number; nothing is skipped.
pub fn read_batting_csv<R: Read>(input: R) -> Result<Vec<BattingRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| ShrinkError::invalid(format!("line 1: {e}")))?
        .clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != BATTING_CSV_HEADER {
        return Err(ShrinkError::invalid(format!(
            "line 1: expected header '{}', got '{}'",
            BATTING_CSV_HEADER.join(","),
            names.join(",")
        )));
    }
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let parsed = (|| {
            if row.len() != 6 {
                return Err(format!("expected 6 fields, got {}", row.len()));
            }
            let id = row[0].trim();
            if id.is_empty() {
                return Err("empty player_id".to_string());
            }
            let pitcher = parse_flag(&row[1])?;
            let n1 = parse_count(&row[2], "ab1")?;
            let h1 = parse_count(&row[3], "h1")?;
            let n2 = parse_count(&row[4], "ab2")?;
            let h2 = parse_count(&row[5], "h2")?;
            BattingRecord::new(id, pitcher, n1, h1, n2, h2).map_err(|e| e.to_string())
        })();
        match parsed {
            Ok(r) => records.push(r),
            Err(msg) => problems.push(format!("line {line}: {msg}")),
        }
    }
    if !problems.is_empty() {
        return Err(ShrinkError::invalid(format!("malformed batting file\n{}", problems.join("\n"))));
    }
    Ok(records)
}

/// `arcsin √((h + 1/4)/(n + 1/2))` and its approximate variance `1/(4n)`.
pub fn transform_batting(h: u32, n: u32) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(ShrinkError::invalid("at-bats must be positive"));
    }
    if h > n {
        return Err(ShrinkError::invalid("hits exceed at-bats"));
    }
    let (h, n) = (h as f64, n as f64);
    Ok((((h + 0.25) / (n + 0.5)).sqrt().asin(), 1.0 / (4.0 * n)))
}

/// `Σ(y2 − θ̂)² − Σ 1/(4 n2)`; can be negative.
pub fn tse(theta_hat: &DVector<f64>, y2: &DVector<f64>, n2: &[u32]) -> Result<f64> {
    check_len("validation targets", theta_hat.len(), y2.len())?;
    check_len("validation at-bats", theta_hat.len(), n2.len())?;
    if n2.contains(&0) {
        return Err(ShrinkError::invalid("validation at-bats must be positive"));
    }
    let sq = (theta_hat - y2).norm_squared();
    let noise: f64 = n2.iter().map(|&n| 1.0 / (4.0 * n as f64)).sum();
    Ok(sq - noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Group {
    #[default]
    All,
    Pitchers,
    NonPitchers,
}

impl Group {
    fn admits(self, r: &BattingRecord) -> bool {
        match self {
            Group::All => true,
            Group::Pitchers => r.pitcher,
            Group::NonPitchers => !r.pitcher,
        }
    }
}

impl FromStr for Group {
    type Err = ShrinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "all" => Ok(Group::All),
            "pitchers" => Ok(Group::Pitchers),
            "non-pitchers" | "nonpitchers" => Ok(Group::NonPitchers),
            other => Err(ShrinkError::invalid(format!("unknown group '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Covariate {
    AtBats,
    PitcherFlag,
}

impl FromStr for Covariate {
    type Err = ShrinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "at-bats" | "ab" => Ok(Covariate::AtBats),
            "pitcher" | "pitcher-flag" => Ok(Covariate::PitcherFlag),
            other => Err(ShrinkError::invalid(format!("unknown covariate '{other}'"))),
        }
    }
}

/// Scale on which first-half at-bats enter the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AtBatsForm {
    Raw,
    #[default]
    Sqrt,
    Log,
}

impl AtBatsForm {
    fn apply(self, n: u32) -> f64 {
        let n = n as f64;
        match self {
            AtBatsForm::Raw => n,
            AtBatsForm::Sqrt => n.sqrt(),
            AtBatsForm::Log => n.ln(),
        }
    }
}

impl FromStr for AtBatsForm {
    type Err = ShrinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(AtBatsForm::Raw),
            "sqrt" => Ok(AtBatsForm::Sqrt),
            "log" => Ok(AtBatsForm::Log),
            other => Err(ShrinkError::invalid(format!("unknown at-bats form '{other}'"))),
        }
    }
}

/// The twelve rows of the published comparison.
pub const TABLE_METHODS: [Method; 12] = [
    Method::Naive,
    Method::Ols,
    Method::Wls,
    Method::Ebmom,
    Method::Ebmle,
    Method::JsPlus,
    Method::UreOls,
    Method::UreWls,
    Method::Ure,
    Method::UreSpOls,
    Method::UreSpWls,
    Method::UreSp,
];

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalConfig {
    pub group: Group,
    pub covariates: BTreeSet<Covariate>,
    pub at_bats_form: AtBatsForm,
    pub min_ab_train: u32,
    pub min_ab_valid: u32,
    pub estimators: Vec<Method>,
    pub method_config: MethodConfig,
}

impl Default for EmpiricalConfig {
    fn default() -> Self {
        Self {
            group: Group::All,
            covariates: BTreeSet::new(),
            at_bats_form: AtBatsForm::default(),
            min_ab_train: 11,
            min_ab_valid: 11,
            estimators: TABLE_METHODS.to_vec(),
            method_config: MethodConfig::default(),
        }
    }
}

impl EmpiricalConfig {
    /// The covariates used for a group in the published table.
    pub fn published_covariates(group: Group) -> BTreeSet<Covariate> {
        match group {
            Group::All => [Covariate::AtBats, Covariate::PitcherFlag].into(),
            _ => [Covariate::AtBats].into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.covariates.contains(&Covariate::PitcherFlag) && self.group != Group::All {
            return Err(ShrinkError::invalid("the pitcher covariate is constant within a single group"));
        }
        if self.estimators.is_empty() {
            return Err(ShrinkError::invalid("no estimators requested"));
        }
        if let Some(m) = self.estimators.iter().find(|m| m.needs_truth()) {
            return Err(ShrinkError::invalid(format!("{m} needs true means, which real data lack")));
        }
        Ok(())
    }
}

/// First-half data for the estimation set plus the second-half targets of
/// its validation subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub data: HeteroData,
    pub player_ids: Vec<String>,
    /// Positions in the estimation set that are also validated.
    pub validation: Vec<usize>,
    pub y2: DVector<f64>,
    pub n2: Vec<u32>,
}

pub fn build_design(records: &[BattingRecord], config: &EmpiricalConfig) -> Result<Design> {
    config.validate()?;
    // zero at-bats cannot be transformed, whatever the threshold
    let train_min = config.min_ab_train.max(1);
    let valid_min = config.min_ab_valid.max(1);
    let est: Vec<&BattingRecord> = records
        .iter()
        .filter(|r| config.group.admits(r) && r.n1 >= train_min)
        .collect();
    if est.is_empty() {
        return Err(ShrinkError::invalid("no players meet the estimation threshold"));
    }
    let p = est.len();
    let mut y = DVector::zeros(p);
    let mut a = DVector::zeros(p);
    for (i, r) in est.iter().enumerate() {
        (y[i], a[i]) = transform_batting(r.h1, r.n1)?;
    }

    let mut rows: Vec<Vec<f64>> = vec![vec![1.0; p]];
    if config.covariates.contains(&Covariate::AtBats) {
        let raw: Vec<f64> = est.iter().map(|r| config.at_bats_form.apply(r.n1)).collect();
        let mean = raw.iter().sum::<f64>() / p as f64;
        rows.push(raw.iter().map(|v| v - mean).collect());
    }
    if config.covariates.contains(&Covariate::PitcherFlag) {
        rows.push(est.iter().map(|r| if r.pitcher { 1.0 } else { 0.0 }).collect());
    }
    let x = DesignMatrix::new(DMatrix::from_fn(rows.len(), p, |j, i| rows[j][i]))?;

    let validation: Vec<usize> = (0..p).filter(|&i| est[i].n2 >= valid_min).collect();
    let mut y2 = DVector::zeros(validation.len());
    let mut n2 = Vec::with_capacity(validation.len());
    for (j, &i) in validation.iter().enumerate() {
        y2[j] = transform_batting(est[i].h2, est[i].n2)?.0;
        n2.push(est[i].n2);
    }
    Ok(Design {
        data: HeteroData::new(y, a, x)?,
        player_ids: est.iter().map(|r| r.player_id.clone()).collect(),
        validation,
        y2,
        n2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub estimator: Method,
    pub with_covariates: bool,
    /// NaN when the estimator failed.
    pub tse_ratio: f64,
    pub p_est: usize,
    pub p_val: usize,
    pub failures: usize,
    /// Why the fit failed, if it did.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorRow {
    pub player_id: String,
    /// Estimator name, suffixed `+cov` for fits that used covariates.
    pub estimator: String,
    /// Weight on the first-half observation.
    pub factor: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionReport {
    pub rows: Vec<ReportRow>,
    pub factors: Vec<FactorRow>,
    pub p_estimation: usize,
    pub p_validation: usize,
}

impl PredictionReport {
    pub fn row(&self, estimator: Method, with_covariates: bool) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.with_covariates == with_covariates)
    }

    pub fn merge(mut self, other: PredictionReport) -> Self {
        self.rows.extend(other.rows);
        self.factors.extend(other.factors);
        self
    }

    pub fn write_report_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.estimator.to_string(),
                if r.with_covariates { "yes" } else { "no" }.to_string(),
                r.tse_ratio.to_string(),
                r.p_est.to_string(),
                r.p_val.to_string(),
                r.failures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_factor_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(FACTOR_CSV_HEADER)?;
        for f in &self.factors {
            w.write_record([
                f.player_id.clone(),
                f.estimator.clone(),
                f.factor.to_string(),
                f.variance.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for PredictionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "p for estimation {}, p for validation {}", self.p_estimation, self.p_validation)?;
        for r in &self.rows {
            let cov = if r.with_covariates { "yes" } else { "no" };
            match &r.error {
                None => writeln!(f, "{:<11} covariates={cov:<3} {:.3}", r.estimator.name(), r.tse_ratio)?,
                Some(e) => writeln!(f, "{:<11} covariates={cov:<3} failed: {e}", r.estimator.name())?,
            }
        }
        Ok(())
    }
}

/// Fits every requested estimator on the first half and reports its TSE as a
/// ratio to the naive rule's.
pub fn run_empirical(records: &[BattingRecord], config: &EmpiricalConfig) -> Result<PredictionReport> {
    let design = build_design(records, config)?;
    let with_cov = !config.covariates.is_empty();
    let (p_est, p_val) = (design.data.p(), design.validation.len());
    let validated = |theta: &DVector<f64>| DVector::from_iterator(p_val, design.validation.iter().map(|&i| theta[i]));
    let naive_tse = tse(&validated(design.data.y()), &design.y2, &design.n2)?;

    let mut report = PredictionReport {
        p_estimation: p_est,
        p_validation: p_val,
        ..Default::default()
    };
    for &m in &config.estimators {
        let fitted = estimate(&design.data, m, &config.method_config, None)
            .and_then(|e| Ok((tse(&validated(&e.theta_hat), &design.y2, &design.n2)?, e)));
        match fitted {
            Ok((value, e)) => {
                let label = if with_cov { format!("{m}+cov") } else { m.to_string() };
                for i in 0..p_est {
                    report.factors.push(FactorRow {
                        player_id: design.player_ids[i].clone(),
                        estimator: label.clone(),
                        factor: e.shrink_factor[i],
                        variance: design.data.a()[i],
                    });
                }
                report.rows.push(ReportRow {
                    estimator: m,
                    with_covariates: with_cov,
                    tse_ratio: if m == Method::Naive { 1.0 } else { value / naive_tse },
                    p_est,
                    p_val,
                    failures: 0,
                    error: None,
                });
            }
            Err(err) => report.rows.push(ReportRow {
                estimator: m,
                with_covariates: with_cov,
                tse_ratio: f64::NAN,
                p_est,
                p_val,
                failures: 1,
                error: Some(err.to_string()),
            }),
        }
    }
    Ok(report)
}
