//! Command-line interface: ingestion, covariance construction, fitting,
//! selection, benchmarking, and report rendering.
//!
//! Exit codes: 0 success, 1 usage error, 2 data validation error,
//! 3 numeric failure, 4 non-convergence (results still written).
//! Worker parallelism is capped by the RAYON_NUM_THREADS environment
//! variable; no other environment state is consulted.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "slabscreen")]
#[command(about = "Bayesian spike-and-slab screening of drug safety signals")]
#[command(version)]
struct Cli {
    /// Flat key-value config file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Root seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the drug covariance matrix from a co-prescription table.
    BuildSigma(BuildSigmaArgs),
    /// Fit the hierarchical spike-and-slab model to a stratum table.
    Fit(FitArgs),
    /// Select drugs from a posterior summary under Bayesian FDR control.
    Select(SelectArgs),
    /// Run a simulation benchmark against the empirical-Bayes baselines.
    Simulate(SimulateArgs),
    /// Render a benchmark summary CSV as a markdown table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct BuildSigmaArgs {
    /// Co-prescription count CSV (square, labeled).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Total patient count behind the co-prescription table.
    #[arg(long)]
    n_total: Option<u64>,
    /// One-line sidecar file holding the total patient count.
    #[arg(long)]
    n_total_file: Option<PathBuf>,
    /// conditional | pearson | tetrachoric | identity
    #[arg(long)]
    method: Option<String>,
    /// Drug count for an identity matrix without a count table.
    #[arg(long)]
    n_drugs: Option<usize>,
    /// Eigenvalue floor for positive-definiteness repair.
    #[arg(long)]
    eps_pd: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Stratum CSV (drug,age,sex,age_sex,time,n,events).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Drug covariance CSV; identity when omitted.
    #[arg(long)]
    sigma_d: Option<PathBuf>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    keep: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// random-walk | mala
    #[arg(long)]
    proposal: Option<String>,
    /// Random-effect columns: exposure | intercept-exposure | full
    #[arg(long)]
    re: Option<String>,
    #[arg(long)]
    pi_a: Option<f64>,
    #[arg(long)]
    pi_b: Option<f64>,
    #[arg(long)]
    hyper_sd: Option<f64>,
    /// Hyperprior SD anchoring the exposure slab scale; 0 disables.
    #[arg(long)]
    slab_anchor_sd: Option<f64>,
    #[arg(long)]
    beta_prior_sd: Option<f64>,
    /// Also stream kept draws to draws.csv (wide).
    #[arg(long)]
    save_draws: bool,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Posterior summary CSV written by `fit`.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Target posterior expected FDR.
    #[arg(long)]
    alpha_r: Option<f64>,
    /// Method label recorded in the report.
    #[arg(long, default_value = "spike_slab")]
    method_label: String,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// 1 (desk scale), 1-full (922 drugs), 2, or custom.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Target rate for the p-value corrections.
    #[arg(long)]
    alpha: Option<f64>,
    /// Target posterior expected FDR for the Bayesian arms; defaults to
    /// 0.02 for scenario 1 layouts and to `alpha` otherwise.
    #[arg(long)]
    alpha_r: Option<f64>,
    /// Comma-separated subset of
    /// eb_bonferroni,eb_bh,spike_slab,spike_slab_copres.
    #[arg(long)]
    methods: Option<String>,
    /// Log-scale mean of the stratum-size distribution.
    #[arg(long)]
    m_mu: Option<f64>,
    /// Log-scale SD of the stratum-size distribution.
    #[arg(long)]
    m_sigma: Option<f64>,
    /// Use a fixed stratum size instead.
    #[arg(long)]
    m_fixed: Option<u64>,
    /// Resample stratum sizes from an existing stratum CSV.
    #[arg(long)]
    m_file: Option<PathBuf>,
    /// Scale of correlated perturbations on non-null effects.
    #[arg(long)]
    tau: Option<f64>,
    /// Custom scenario: drug count.
    #[arg(long)]
    n_drugs: Option<usize>,
    /// Custom scenario: effect layout, e.g. `10:-1.0,20:-0.75`.
    #[arg(long)]
    layout: Option<String>,
    /// Custom scenario: covariance block `first_k:low:high`, or `identity`.
    #[arg(long)]
    sigma_block: Option<String>,
    /// Custom scenario: random-intercept SD.
    #[arg(long)]
    intercept_sd: Option<f64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    keep: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Benchmark summary CSV written by `simulate`.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Table caption.
    #[arg(long)]
    title: Option<String>,
}

/// Write via a temporary file in the same directory, then rename, so
/// readers never observe a partial file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<slabscreen::Error>() {
        Some(slabscreen::Error::Numeric(_)) => 3,
        Some(_) => 2,
        // Config and I/O problems count as usage errors.
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            // Help and version requests are successful exits.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    let result = (|| -> Result<u8> {
        let mut cfg = config::RunConfig::from_file(cli.config.as_deref())?;
        cfg.set_flag("out_dir", cli.out_dir.as_ref().map(|p| p.display().to_string()));
        cfg.set_flag("seed", cli.seed);
        match &cli.command {
            Command::BuildSigma(args) => commands::build_sigma(args, &mut cfg),
            Command::Fit(args) => commands::fit(args, &mut cfg),
            Command::Select(args) => commands::select(args, &mut cfg),
            Command::Simulate(args) => commands::simulate(args, &mut cfg),
            Command::Report(args) => commands::report(args, &mut cfg),
        }
    })();

    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
