mod input;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hetshrink::empirical::{read_batting_csv, run_empirical, AtBatsForm, Covariate, EmpiricalConfig, Group, TABLE_METHODS};
use hetshrink::estimators::Model;
use hetshrink::method::Fitted;
use hetshrink::risk::{condition_diagnostics, in_l, MembershipSpec};
use hetshrink::simgen::{run_risk_experiment, Example, Example2Mode, SimConfig};
use hetshrink::{estimate, Estimate, Execution, HeteroData, Lambda, Method, MethodConfig, ShrinkError};
use nalgebra::DMatrix;
use serde_json::{json, Value};

/// Exit 2 for bad input or usage, 3 for numerical failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<ShrinkError> for CliError {
    fn from(e: ShrinkError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "hetshrink", version, about = "Shrinkage estimation for heteroscedastic hierarchical linear models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one estimator to a `y,var,x1,...,xk` file
    Estimate(EstimateArgs),
    /// Monte Carlo risk curves for the simulation designs
    Simulate(SimulateArgs),
    /// Batting-average prediction report
    Empirical(EmpiricalArgs),
    /// Regularity quantities and location-set membership for a data file
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Args)]
struct Membership {
    /// Constant M of the admissible location set
    #[arg(long = "membership-M", default_value_t = 10.0)]
    big_m: f64,
    /// Exponent kappa of the admissible location set
    #[arg(long = "membership-kappa", default_value_t = 0.4)]
    kappa: f64,
}

impl Membership {
    fn spec(&self) -> Result<MembershipSpec, CliError> {
        Ok(MembershipSpec::new(self.big_m, self.kappa)?)
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Estimates CSV; the JSON sidecar goes to `<out>.json`
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "ure", value_parser = parse_method)]
    method: Method,
    #[arg(long, value_enum, default_value = "1")]
    model: ModelArg,
    /// Use the x columns as given, without prepending an intercept
    #[arg(long)]
    no_intercept: bool,
    #[command(flatten)]
    membership: Membership,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "1", value_parser = ["1", "2"])]
    example: String,
    #[arg(long, default_value_t = 20)]
    p_min: usize,
    #[arg(long, default_value_t = 500)]
    p_max: usize,
    #[arg(long, default_value_t = 20)]
    p_step: usize,
    #[arg(long, default_value_t = 5000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated estimator names (default: the eight of the study)
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    estimators: Option<Vec<Method>>,
    #[arg(long, default_value = "as-written", value_parser = parse_mode)]
    example2_mode: Example2Mode,
    #[arg(long, value_enum, default_value = "1")]
    model: ModelArg,
    /// Run replications on one thread
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    membership: Membership,
    /// Risk-curve CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmpiricalArgs {
    #[arg(long)]
    input: PathBuf,
    /// Report CSV
    #[arg(long)]
    out: PathBuf,
    /// Shrinkage-factor CSV (default: `<out stem>.factors.csv`)
    #[arg(long)]
    factors_out: Option<PathBuf>,
    #[arg(long, default_value = "all", value_parser = parse_group)]
    group: Group,
    /// `both` (none and the published set), `none`, `published`, or a list such as `at-bats,pitcher`
    #[arg(long, default_value = "both")]
    covariates: String,
    #[arg(long, default_value = "sqrt", value_parser = parse_form)]
    at_bats_form: AtBatsForm,
    #[arg(long, default_value_t = 11)]
    min_ab_train: u32,
    #[arg(long, default_value_t = 11)]
    min_ab_valid: u32,
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    estimators: Option<Vec<Method>>,
    #[arg(long, value_enum, default_value = "1")]
    model: ModelArg,
    #[command(flatten)]
    membership: Membership,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    input: PathBuf,
    /// JSON output (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_intercept: bool,
    #[command(flatten)]
    membership: Membership,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: ShrinkError| e.to_string())
}

fn parse_mode(s: &str) -> Result<Example2Mode, String> {
    s.parse().map_err(|e: ShrinkError| e.to_string())
}

fn parse_group(s: &str) -> Result<Group, String> {
    s.parse().map_err(|e: ShrinkError| e.to_string())
}

fn parse_form(s: &str) -> Result<AtBatsForm, String> {
    s.parse().map_err(|e: ShrinkError| e.to_string())
}

fn model_for(arg: ModelArg, k: usize) -> Model {
    match arg {
        ModelArg::One => Model::I,
        ModelArg::Two => Model::II { w: DMatrix::identity(k, k) },
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v == f64::INFINITY {
        json!("inf")
    } else {
        Value::Null
    }
}

fn lambda_json(l: Lambda) -> Value {
    match l {
        Lambda::Infinite => json!("inf"),
        Lambda::Finite(v) => json!(v),
    }
}

pub fn sidecar(e: &Estimate, data: &HeteroData, spec: &MembershipSpec) -> Value {
    let (lambda, uniform, b) = match &e.fitted {
        Fitted::None => (Value::Null, Value::Null, Value::Null),
        Fitted::Lambda(l) => (lambda_json(*l), Value::Null, Value::Null),
        Fitted::Uniform(c) => (Value::Null, json!(c), Value::Null),
        Fitted::Monotone(b) => {
            let mut levels: Vec<f64> = b.iter().copied().collect();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            (
                Value::Null,
                Value::Null,
                json!({"min": b.min(), "max": b.max(), "levels": levels.len(), "values": b.as_slice()}),
            )
        }
    };
    json!({
        "method": e.method.name(),
        "model": match e.model { hetshrink::estimators::ModelKind::I => 1, hetshrink::estimators::ModelKind::II => 2 },
        "p": data.p(),
        "k": data.k(),
        "lambda": lambda,
        "uniform_factor": uniform,
        "b": b,
        "objective": e.objective_value.map_or(Value::Null, number),
        "in_L": e.in_l,
        "membership": {"M": spec.big_m, "kappa": spec.kappa},
        "converged": e.converged,
        "iterations": e.iterations,
        "beta": e.beta.as_ref().map(|b| b.as_slice().to_vec()),
    })
}

fn cmd_estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let data = input::read_units(&args.input, !args.no_intercept)?;
    let spec = args.membership.spec()?;
    let config = MethodConfig {
        model: model_for(args.model, data.k()),
        membership: spec,
    };
    let est = estimate(&data, args.method, &config, None)?;

    let mut w = csv::Writer::from_writer(create(&args.out)?);
    w.write_record(["unit", "y", "var", "theta_hat", "shrink_factor"])?;
    for i in 0..data.p() {
        w.write_record([
            (i + 1).to_string(),
            data.y()[i].to_string(),
            data.a()[i].to_string(),
            est.theta_hat[i].to_string(),
            est.shrink_factor[i].to_string(),
        ])?;
    }
    w.flush()?;

    let mut side = args.out.clone().into_os_string();
    side.push(".json");
    let mut f = create(Path::new(&side))?;
    serde_json::to_writer_pretty(&mut f, &sidecar(&est, &data, &spec)).map_err(io::Error::from)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    if args.p_step == 0 || args.p_min == 0 || args.p_min > args.p_max {
        return Err(CliError::usage("need 0 < p-min <= p-max and p-step > 0"));
    }
    let example: Example = args.example.parse()?;
    let mut config = SimConfig::study(example, args.seed);
    config.p_grid = (args.p_min..=args.p_max).step_by(args.p_step).collect();
    config.reps = args.reps;
    if let Some(list) = &args.estimators {
        config.estimators = list.clone();
    }
    config.example2_mode = args.example2_mode;
    config.method_config = MethodConfig {
        model: model_for(args.model, config.beta_true.len()),
        membership: args.membership.spec()?,
    };
    config.execution = if args.sequential { Execution::Sequential } else { Execution::Parallel };
    let curve = run_risk_experiment(&config)?;
    match &args.out {
        Some(path) => {
            let mut f = create(path)?;
            curve.write_csv(&mut f)?;
            f.flush()?;
        }
        None => curve.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn covariate_sets(spec: &str, group: Group) -> Result<Vec<std::collections::BTreeSet<Covariate>>, CliError> {
    let published = EmpiricalConfig::published_covariates(group);
    Ok(match spec.trim() {
        "both" => vec![Default::default(), published],
        "none" => vec![Default::default()],
        "published" => vec![published],
        list => vec![list.split(',').map(str::parse).collect::<Result<_, ShrinkError>>()?],
    })
}

fn cmd_empirical(args: &EmpiricalArgs) -> Result<(), CliError> {
    let file = File::open(&args.input).map_err(|e| CliError::usage(format!("cannot open {}: {e}", args.input.display())))?;
    let records = read_batting_csv(file)?;
    let mut report: Option<hetshrink::empirical::PredictionReport> = None;
    for covariates in covariate_sets(&args.covariates, args.group)? {
        // 1 + number of covariates is k for Model II's identity prior matrix
        let k = 1 + covariates.len();
        let config = EmpiricalConfig {
            group: args.group,
            covariates,
            at_bats_form: args.at_bats_form,
            min_ab_train: args.min_ab_train,
            min_ab_valid: args.min_ab_valid,
            estimators: args.estimators.clone().unwrap_or_else(|| TABLE_METHODS.to_vec()),
            method_config: MethodConfig {
                model: model_for(args.model, k),
                membership: args.membership.spec()?,
            },
        };
        let part = run_empirical(&records, &config)?;
        report = Some(match report {
            None => part,
            Some(r) => r.merge(part),
        });
    }
    let report = report.expect("at least one covariate set");
    let mut f = create(&args.out)?;
    report.write_report_csv(&mut f)?;
    f.flush()?;
    let factors = args.factors_out.clone().unwrap_or_else(|| {
        let stem = args.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        args.out.with_file_name(format!("{stem}.factors.csv"))
    });
    let mut f = create(&factors)?;
    report.write_factor_csv(&mut f)?;
    f.flush()?;
    eprint!("{report}");
    Ok(())
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!(m.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    let data = input::read_units(&args.input, !args.no_intercept)?;
    let spec = args.membership.spec()?;
    let d = condition_diagnostics(&data, None, None)?;
    let (_, ols) = data.ols_fit()?;
    let (_, wls) = data.wls_fit()?;
    let out = json!({
        "p": data.p(),
        "k": data.k(),
        "cond_a": d.cond_a,
        "cond_d": matrix_json(&d.cond_d),
        "cond_e": matrix_json(&d.cond_e),
        "cond_f": matrix_json(&d.cond_f),
        "cond_g": matrix_json(&d.cond_g),
        "d_k": d.d_k,
        "membership": {"M": spec.big_m, "kappa": spec.kappa},
        "in_L_ols": in_l(&ols, data.x(), data.y(), &spec),
        "in_L_wls": in_l(&wls, data.x(), data.y(), &spec),
    });
    let text = serde_json::to_string_pretty(&out).map_err(io::Error::from)?;
    match &args.out {
        Some(path) => {
            let mut f = create(path)?;
            writeln!(f, "{text}")?;
            f.flush()?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Empirical(a) => cmd_empirical(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) | CliError::Numerical(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
