//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use disc_core::metrics::ErrorFormula;
use disc_core::trainer::Method;

use crate::aggregate;
use crate::commands::{self, parse_seeds};
use crate::config::ExperimentConfig;
use crate::error::LabError;

#[derive(Debug, Parser)]
#[command(name = "disc-lab", version, about = "Concept discovery and intervention experiments on planted data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/validation/test CSVs.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one method on one seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<String>,
        /// Directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Every method on every seed, one run directory each.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma separated method names.
        #[arg(long = "methods", alias = "method", default_value = "erm,disc")]
        methods: String,
        /// `A..B` inclusive or a comma list; defaults to eval.seeds.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Silhouette and worst-group accuracy per cluster count.
    SweepK {
        #[command(flatten)]
        common: Common,
        /// Cluster counts to try, `A..B` inclusive or a comma list.
        #[arg(long, default_value = "2..6")]
        ks: String,
    },
    /// Aggregate the run directories under --out.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Clusters per class.
    #[arg(long)]
    pub k: Option<usize>,
    /// Use the identity-covariance denominator in the closed-form test error.
    #[arg(long)]
    pub strict_paper_error_formula: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, LabError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.k {
            cfg.train.k = k;
        }
        if self.strict_paper_error_formula {
            cfg.eval.error_formula = ErrorFormula::Printed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_method(name: &str) -> Result<Method, LabError> {
    Method::parse(name.trim()).ok_or_else(|| {
        let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
        LabError::Config(format!("unknown method {name:?}; expected one of {}", known.join(", ")))
    })
}

pub fn dispatch(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.load()?;
            let out = common.out.clone().unwrap_or_else(|| commands::data_dir(&cfg));
            commands::gen_data(&cfg, &out)?;
            eprintln!("wrote data to {}", out.display());
        }
        Command::Train { common, method, data } => {
            let mut cfg = common.load()?;
            if let Some(m) = method {
                cfg.train.method = parse_method(&m)?;
            }
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| cfg.output_dir.join(commands::run_dir_name(cfg.train.method, cfg.seed)));
            let s = commands::train(&cfg, data.as_deref(), &out)?;
            eprintln!(
                "{} seed {}: test error {:.4}, worst group {:.4}{} -> {}",
                s.method.name(),
                s.seed,
                s.test_error,
                s.test.worst_acc,
                if s.diverged { " (diverged)" } else { "" },
                out.display()
            );
        }
        Command::Sweep { common, methods, seeds } => {
            let cfg = common.load()?;
            let methods = methods.split(',').map(parse_method).collect::<Result<Vec<_>, _>>()?;
            let seeds = match (seeds, common.seed) {
                (Some(s), _) => parse_seeds(&s)?,
                (None, Some(s)) => vec![s],
                (None, None) => cfg.eval.seeds.clone(),
            };
            let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
            let agg = commands::sweep(&cfg, &methods, &seeds, &out, commands::thread_count()?)?;
            if let Some(p) = &agg.disc_vs_erm {
                eprintln!(
                    "disc beats erm on {}/{} seeds, relative error reduction {:.3}",
                    p.error_wins,
                    p.pairs.len(),
                    p.relative_reduction
                );
            }
            eprintln!("wrote {} runs to {}", agg.runs, out.display());
        }
        Command::SweepK { common, ks } => {
            let cfg = common.load()?;
            let ks: Vec<usize> = parse_seeds(&ks)?.into_iter().map(|k| k as usize).collect();
            let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.join("k_sweep"));
            for r in commands::sweep_k(&cfg, &ks, &out)? {
                eprintln!("k = {}: silhouette {:.4}, worst group {:.4}", r.k, r.silhouette, r.worst_group_acc);
            }
        }
        Command::Report { out } => {
            let agg = aggregate::write_report(&out)?;
            eprintln!("aggregated {} runs in {}", agg.runs, out.display());
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
