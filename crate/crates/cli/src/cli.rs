//! Command-line definitions and subcommand drivers.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ddalm::models::{threshold_half, Model, ModelKind};
use ddalm::ops::BlurKernel;
use ddalm::solvers::AlmParams;

use crate::metrics::MetricsWriter;
use crate::pgm::{load_pgm, save_pgm};
use crate::run::{corrupt, solve, ReferenceEnergy, SolveConfig};

/// Exit status of a finished solve.
pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_BUDGET: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ddalm", version, about = "Overlapping domain decomposition solvers for variational imaging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Blur and/or add salt-and-pepper noise to a clean image
    Corrupt(CorruptArgs),
    /// Minimise the model energy; exits 0 when the stop rule is met, 2 when
    /// the outer iteration budget runs out
    Solve(SolveArgs),
    /// Print the model energy of an image
    Energy(EnergyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelName {
    Ccv,
    Tvl1,
    Hessl1,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub model: ModelName,
    /// Fidelity weight [default: 10 for ccv and tvl1, 1 for hessl1]
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0.6)]
    pub c1: f64,
    #[arg(long, default_value_t = 0.1)]
    pub c2: f64,
    /// Blur half-width l of the (2l+1)×(2l+1) average kernel (tvl1)
    #[arg(long)]
    pub kernel_halfwidth: Option<usize>,
}

impl ModelArgs {
    pub fn kind(&self) -> Result<ModelKind> {
        Ok(match self.model {
            ModelName::Ccv => ModelKind::ChanVese {
                alpha: self.alpha.unwrap_or(10.0),
                c1: self.c1,
                c2: self.c2,
            },
            ModelName::Tvl1 => {
                let Some(l) = self.kernel_halfwidth else {
                    bail!("--kernel-halfwidth is required for tvl1");
                };
                ModelKind::TvL1 {
                    alpha: self.alpha.unwrap_or(10.0),
                    kernel: BlurKernel::new(l)?,
                }
            }
            ModelName::Hessl1 => ModelKind::HessianL1 {
                alpha: self.alpha.unwrap_or(1.0),
            },
        })
    }
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Blur with the (2l+1)×(2l+1) average kernel first
    #[arg(long)]
    pub kernel_halfwidth: Option<usize>,
    /// Fraction of pixels replaced by 0 or 1
    #[arg(long, default_value_t = 0.0)]
    pub noise_sp: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Data image f
    #[arg(long)]
    pub input: PathBuf,
    /// Clean image for the psnr column
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Thresholded mask for ccv [default: <output stem>_mask.pgm]
    #[arg(long)]
    pub mask_output: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Partition as PxQ; 1x1 runs the full-domain primal-dual baseline
    #[arg(long, default_value = "4x4", value_parser = parse_subdomains)]
    pub subdomains: (usize, usize),
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub max_outer: usize,
    #[arg(long)]
    pub inner_iters: Option<usize>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    #[arg(long)]
    pub tau0: Option<f64>,
    /// Acceleration parameter [default: 0.125 η]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Run local solves until their primal-dual gap is at most this value
    /// (--inner-iters then caps the count)
    #[arg(long)]
    pub inner_gap_tol: Option<f64>,
    #[arg(long, default_value_t = default_workers())]
    pub workers: usize,
    /// Minimum energy for the rel_gap column
    #[arg(long, conflicts_with = "compute_reference_iters", allow_negative_numbers = true)]
    pub reference_energy: Option<f64>,
    /// Compute the minimum energy with this many full-domain iterations
    #[arg(long)]
    pub compute_reference_iters: Option<usize>,
    /// Leave the elapsed_s column empty (reproducible CSV)
    #[arg(long)]
    pub omit_elapsed: bool,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Data image f
    #[arg(long)]
    pub input: PathBuf,
    /// Image u to evaluate [default: the data image]
    #[arg(long)]
    pub evaluate: Option<PathBuf>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn parse_subdomains(s: &str) -> std::result::Result<(usize, usize), String> {
    let (p, q) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected PxQ, got {s:?}"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let (p, q) = (parse(p)?, parse(q)?);
    if p == 0 || q == 0 {
        return Err("subdomain counts must be positive".into());
    }
    Ok((p, q))
}

impl SolveArgs {
    pub fn config(&self) -> Result<SolveConfig> {
        let kind = self.model.kind()?;
        let mut params = AlmParams::defaults(&kind);
        if let Some(eta) = self.eta {
            params = AlmParams {
                eta,
                ..params
            };
            params.inner.gamma = 0.125 * eta;
        }
        params.max_outer = self.max_outer;
        if let Some(t) = self.tol {
            params.tol = t;
        }
        let inner = &mut params.inner;
        if let Some(v) = self.inner_iters {
            inner.iters = v;
        }
        if let Some(v) = self.sigma0 {
            inner.sigma0 = v;
        }
        if let Some(v) = self.tau0 {
            inner.tau0 = v;
        }
        if let Some(v) = self.gamma {
            inner.gamma = v;
        }
        inner.gap_tol = self.inner_gap_tol;
        let reference = match (self.reference_energy, self.compute_reference_iters) {
            (Some(e), _) => ReferenceEnergy::Given(e),
            (None, Some(n)) => ReferenceEnergy::Compute(n),
            (None, None) => ReferenceEnergy::None,
        };
        Ok(SolveConfig {
            kind,
            subdomains: self.subdomains,
            params,
            workers: self.workers,
            reference,
            record_elapsed: !self.omit_elapsed,
        })
    }
}

pub fn cmd_corrupt(args: &CorruptArgs) -> Result<()> {
    let clean = load_pgm(&args.input)?;
    let kernel = args.kernel_halfwidth.map(BlurKernel::new).transpose()?;
    let out = corrupt(&clean, kernel, args.noise_sp, args.seed)?;
    save_pgm(&out, &args.output)
}

/// Returns `true` when the stop rule was met.
pub fn cmd_solve(args: &SolveArgs) -> Result<bool> {
    let cfg = args.config()?;
    let f = load_pgm(&args.input)?;
    let truth = args.ground_truth.as_ref().map(load_pgm).transpose()?;
    let mut metrics = MetricsWriter::create(args.metrics.as_deref())?;
    let report = solve(&f, truth.as_ref(), &cfg, |row| metrics.push(row))?;
    metrics.finish()?;
    save_pgm(&report.u, &args.output)?;
    if let ModelKind::ChanVese { .. } = cfg.kind {
        let path = args.mask_output.clone().unwrap_or_else(|| mask_path(&args.output));
        save_pgm(&threshold_half(&report.u), path)?;
    }
    Ok(report.converged)
}

fn mask_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}_mask.pgm"))
}

/// Energy of the evaluated image, printed with round-trip precision.
pub fn cmd_energy(args: &EnergyArgs) -> Result<f64> {
    let f = load_pgm(&args.input)?;
    let u = match &args.evaluate {
        Some(p) => load_pgm(p)?,
        None => f.clone(),
    };
    let model = Model::new(args.model.kind()?, f)?;
    model.energy(&u).context("image shapes differ")
}

/// Parses `argv` and runs the command; returns the process exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_CONVERGED };
        }
    };
    let result = match &cli.command {
        Command::Corrupt(a) => cmd_corrupt(a).map(|_| EXIT_CONVERGED),
        Command::Solve(a) => cmd_solve(a).map(|ok| if ok { EXIT_CONVERGED } else { EXIT_BUDGET }),
        Command::Energy(a) => cmd_energy(a).map(|e| {
            println!("{e:?}");
            EXIT_CONVERGED
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}
