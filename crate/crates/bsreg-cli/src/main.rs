//! bsreg: fit Birnbaum-Saunders (sinh-normal) regression models to CSV
//! data, emit residual tables, and run seeded simulation studies.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bsreg::bias::{self, BiasError};
use bsreg::estimate::{self, FitConfig, FitError, FitResult};
use bsreg::linalg;
use bsreg::mc::{self, SimConfig, SimError};
use bsreg::model::{BuiltinModel, Dataset, DatasetError, MeanModel, ParseError};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        source: csv::Error,
    },
    #[error("column '{0}' not found in the data file")]
    MissingColumn(String),
    #[error("data row {row}: column '{col}' is not a number: {value:?}")]
    BadNumber {
        row: usize,
        col: String,
        value: String,
    },
    #[error("data row {row}: response {value} must be positive under --log-response")]
    NonpositiveResponse { row: usize, value: f64 },
    #[error("model: {0}")]
    Model(#[from] ParseError),
    #[error("data: {0}")]
    Data(#[from] DatasetError),
    #[error("fit: {0}")]
    Fit(#[from] FitError),
    #[error("bias correction: {0}")]
    Bias(#[from] BiasError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("config {path}: {source}")]
    Toml {
        path: String,
        source: toml::de::Error,
    },
}

#[derive(Parser)]
#[command(
    name = "bsreg",
    version,
    about = "Birnbaum-Saunders nonlinear regression: maximum likelihood with second-order bias correction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to CSV data and report MLEs and corrected estimates
    Fit(FitArgs),
    /// Fit a model and emit a residual table for plotting
    Residuals(ResidualArgs),
    /// Run a seeded Monte Carlo bias/RMSE study
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// CSV data file; a header row is required
    #[arg(long)]
    data: PathBuf,
    /// mean model expression, e.g. "b1 + b2*exp(b3/w)"
    #[arg(long)]
    model: String,
    /// parameter names in the order of --start
    #[arg(long, value_delimiter = ',', required = true)]
    params: Vec<String>,
    /// starting values; required unless the model is affine in its parameters
    #[arg(long, value_delimiter = ',')]
    start: Option<Vec<f64>>,
    /// response column name
    #[arg(long, default_value = "y")]
    response: String,
    /// model log(response) instead of the raw response
    #[arg(long)]
    log_response: bool,
    /// write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ResidualArgs {
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
#[command(group(
    clap::ArgGroup::new("source").required(true).args(["config", "preset"])
))]
struct SimulateArgs {
    /// TOML experiment description
    #[arg(long)]
    config: Option<PathBuf>,
    /// built-in experiment
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// override the replication count
    #[arg(long)]
    reps: Option<usize>,
    /// override the RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// directory for sim_report.json and sim_report.csv
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Gallant-type model, (4, 5, 3, 1.5), alpha 0.5, n in {15, 30, 45}
    Table1,
    /// Michaelis-Menten, (3, 0.5), alpha 0.5, n in {20, 30, 40, 50}
    Table3,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Residuals(args) => cmd_residuals(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Load the CSV, resolve the model's covariates against its header, and
/// assemble the dataset. Covariate names are whatever identifiers in
/// the expression are not parameters.
fn load_problem(args: &FitArgs) -> Result<(MeanModel, Dataset), CliError> {
    let params: Vec<&str> = args.params.iter().map(String::as_str).collect();
    let model = MeanModel::parse_inferring(&args.model, &params)?;

    let path = args.data.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(&args.data)
        .map_err(|source| CliError::Csv {
            path: path.clone(),
            source,
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|source| CliError::Csv {
            path: path.clone(),
            source,
        })?
        .iter()
        .map(str::to_string)
        .collect();

    let col_index = |name: &str| -> Result<usize, CliError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::MissingColumn(name.to_string()))
    };
    let y_col = col_index(&args.response)?;
    let covar_cols: Vec<usize> = model
        .covariates()
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_, _>>()?;

    let mut y = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|source| CliError::Csv {
            path: path.clone(),
            source,
        })?;
        let row = i + 1;
        let parse = |col: usize| -> Result<f64, CliError> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| CliError::BadNumber {
                row,
                col: headers[col].clone(),
                value: raw.to_string(),
            })
        };
        let mut yv = parse(y_col)?;
        if args.log_response {
            if yv <= 0.0 {
                return Err(CliError::NonpositiveResponse { row, value: yv });
            }
            yv = yv.ln();
        }
        y.push(yv);
        x_rows.push(covar_cols.iter().map(|&c| parse(c)).collect::<Result<_, _>>()?);
    }

    let n = y.len();
    let k = model.n_covariates();
    let mut x = Array2::<f64>::zeros((n, k));
    for (i, row) in x_rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let data = Dataset::new(Array1::from_vec(y), x, model.covariates().to_vec())?;
    Ok((model, data))
}

#[derive(Serialize)]
struct EstimateBlock {
    beta: Vec<f64>,
    alpha: f64,
    se_beta: Vec<f64>,
    se_alpha: f64,
}

#[derive(Serialize)]
struct CorrectedBlock {
    beta: Vec<f64>,
    alpha: f64,
    /// standard errors re-evaluated at the corrected estimates
    se_beta: Vec<f64>,
    se_alpha: f64,
    bias_beta: Vec<f64>,
    bias_alpha: f64,
    alpha_nonpositive: bool,
}

#[derive(Serialize)]
struct MeanBlock {
    bias: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Serialize)]
struct FitReport {
    schema: String,
    model: String,
    params: Vec<String>,
    covariates: Vec<String>,
    response: String,
    log_response: bool,
    n: usize,
    converged: bool,
    iterations: usize,
    loglik: f64,
    score_norm: f64,
    mle: EstimateBlock,
    corrected: Option<CorrectedBlock>,
    mu: Option<MeanBlock>,
}

fn build_report(
    model: &MeanModel,
    data: &Dataset,
    args: &FitArgs,
    fit: &FitResult,
) -> Result<FitReport, CliError> {
    let corrected_and_mu = if fit.converged {
        let report = bias::correct(fit)?;
        let design = data.design_for(model)?;
        let bundle_t = model
            .eval_bundle(&design, &report.beta_tilde)
            .map_err(FitError::from)?;
        let info_t = estimate::fisher_info(report.alpha_tilde, &bundle_t);
        let cov_t = linalg::spd_inverse(&info_t.k_beta).map_err(FitError::from)?;
        let se_beta: Vec<f64> = (0..bundle_t.p()).map(|j| cov_t[[j, j]].sqrt()).collect();
        let se_alpha = (report.alpha_tilde * report.alpha_tilde
            / (2.0 * data.n() as f64))
            .sqrt();
        Some((
            CorrectedBlock {
                beta: report.beta_tilde.clone(),
                alpha: report.alpha_tilde,
                se_beta,
                se_alpha,
                bias_beta: report.b_beta.clone(),
                bias_alpha: report.b_alpha,
                alpha_nonpositive: report.alpha_tilde_nonpositive,
            },
            MeanBlock {
                bias: report.b_mu,
                var: report.var_mu,
            },
        ))
    } else {
        None
    };
    let (corrected, mu) = match corrected_and_mu {
        Some((c, m)) => (Some(c), Some(m)),
        None => (None, None),
    };
    Ok(FitReport {
        schema: "bsreg-fit/1".to_string(),
        model: model.to_string(),
        params: model.params().to_vec(),
        covariates: model.covariates().to_vec(),
        response: args.response.clone(),
        log_response: args.log_response,
        n: data.n(),
        converged: fit.converged,
        iterations: fit.iterations,
        loglik: fit.loglik,
        score_norm: fit.score_norm,
        mle: EstimateBlock {
            beta: fit.beta_hat.clone(),
            alpha: fit.alpha_hat,
            se_beta: fit.se_beta(),
            se_alpha: fit.se_alpha(),
        },
        corrected,
        mu,
    })
}

/// Print to stdout, treating a broken pipe (e.g. `bsreg ... | head`) as
/// a normal early exit rather than a failure.
fn print_stdout(text: &str) -> Result<(), CliError> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Write {
            path: "<stdout>".to_string(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| CliError::Write {
            path: path.display().to_string(),
            source,
        }),
        None => print_stdout(text),
    }
}

fn cmd_fit(args: &FitArgs) -> Result<u8, CliError> {
    let (model, data) = load_problem(args)?;
    let config = FitConfig {
        start: args.start.clone(),
        ..FitConfig::default()
    };
    let fit = estimate::fit(&model, &data, &config)?;
    let report = build_report(&model, &data, args, &fit)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(&json, args.out.as_deref())?;
    Ok(if fit.converged { 0 } else { 2 })
}

fn cmd_residuals(args: &ResidualArgs) -> Result<u8, CliError> {
    let (model, data) = load_problem(&args.fit)?;
    let config = FitConfig {
        start: args.fit.start.clone(),
        ..FitConfig::default()
    };
    let fit = estimate::fit(&model, &data, &config)?;
    let res = estimate::residuals(&fit, &data);
    let mut table = String::from("index,y,mu_hat,eps_hat,r_hat\n");
    for i in 0..data.n() {
        table.push_str(&format!(
            "{},{},{},{},{}\n",
            i + 1,
            data.y()[i],
            res.mu_hat[i],
            res.eps_hat[i],
            res.r_hat[i]
        ));
    }
    emit(&table, args.fit.out.as_deref())?;
    Ok(if fit.converged { 0 } else { 2 })
}

/// TOML description of a simulation experiment.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimFile {
    model: String,
    params: Vec<String>,
    true_beta: Vec<f64>,
    true_alpha: f64,
    n_grid: Vec<usize>,
    reps: Option<usize>,
    seed: Option<u64>,
}

const DEFAULT_REPS: usize = 10_000;
const DEFAULT_SEED: u64 = 1;

fn preset_config(preset: Preset) -> SimConfig {
    let (builtin, true_beta, n_grid) = match preset {
        Preset::Table1 => (
            BuiltinModel::Gallant,
            vec![4.0, 5.0, 3.0, 1.5],
            vec![15, 30, 45],
        ),
        Preset::Table3 => (
            BuiltinModel::MichaelisMenten,
            vec![3.0, 0.5],
            vec![20, 30, 40, 50],
        ),
    };
    SimConfig {
        model: MeanModel::builtin(builtin),
        true_beta,
        true_alpha: 0.5,
        n_grid,
        reps: DEFAULT_REPS,
        seed: DEFAULT_SEED,
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8, CliError> {
    let mut config = match (&args.config, args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
                path: path.display().to_string(),
                source,
            })?;
            let file: SimFile = toml::from_str(&text).map_err(|source| CliError::Toml {
                path: path.display().to_string(),
                source,
            })?;
            let params: Vec<&str> = file.params.iter().map(String::as_str).collect();
            SimConfig {
                model: MeanModel::parse_inferring(&file.model, &params)?,
                true_beta: file.true_beta,
                true_alpha: file.true_alpha,
                n_grid: file.n_grid,
                reps: file.reps.unwrap_or(DEFAULT_REPS),
                seed: file.seed.unwrap_or(DEFAULT_SEED),
            }
        }
        (None, Some(preset)) => preset_config(preset),
        (None, None) => unreachable!("clap enforces the group"),
    };
    if let Some(reps) = args.reps {
        config.reps = reps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }

    let report = mc::run_simulation(&config)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|source| CliError::Write {
        path: args.out_dir.display().to_string(),
        source,
    })?;
    let json_path = args.out_dir.join("sim_report.json");
    let csv_path = args.out_dir.join("sim_report.csv");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&json_path, json).map_err(|source| CliError::Write {
        path: json_path.display().to_string(),
        source,
    })?;
    std::fs::write(&csv_path, report.to_csv()).map_err(|source| CliError::Write {
        path: csv_path.display().to_string(),
        source,
    })?;
    print_stdout(&format!(
        "wrote {} and {} ({} cells, seed {})",
        json_path.display(),
        csv_path.display(),
        report.cells.len(),
        config.seed
    ))?;
    Ok(0)
}
