#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mergecl::config::ExperimentConfig;
use mergecl::error::Error;
use mergecl::fisher::DEFAULT_EPSILON;
use mergecl::runner::{self, sig6};
use mergecl::strategies::Strategy;

#[derive(Parser)]
#[command(name = "mergecl", version, about = "Continual learning by weight-space model merging")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a continual experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        strategy: Option<String>,
        /// Output directory; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge two checkpoints (Fisher-weighted when both Fisher files are given).
    Merge {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Weight on `--a`.
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        fisher_a: Option<PathBuf>,
        #[arg(long)]
        fisher_b: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagonal Fisher of a checkpoint on a CSV dataset.
    Fisher {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sampled labels per point; exact enumeration when omitted.
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Supplies the architecture when the checkpoint sidecar is missing.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on a configured stream or a CSV dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Grid over lambda x seed (x strategy), one CSV row per run.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma list or start:step:end.
        #[arg(long, default_value = "0:0.1:1")]
        lambda_grid: String,
        /// Inclusive range `a..b` or comma list.
        #[arg(long, default_value = "0..4")]
        seeds: String,
        /// Comma list; defaults to the config's strategy.
        #[arg(long)]
        strategies: Option<String>,
        /// CSV path; defaults to `<output dir>/sweep.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the merge rules against closed-form optima on random quadratics.
    Oracle {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit status 2 for bad configuration or arguments, 1 for anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Usage(_)) => 2,
        _ => 1,
    }
}

fn arg_err(e: Error) -> Error {
    match e {
        Error::Input(m) => Error::Usage(m),
        other => Error::Usage(other.to_string()),
    }
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Run {
            config,
            seed,
            lambda,
            strategy,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            if let Some(l) = lambda {
                cfg.train.lambda = l;
            }
            if let Some(s) = strategy {
                cfg.train.strategy = Strategy::parse(&s).map_err(|e| Error::Config(e.to_string()))?;
            }
            cfg.validate()?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let r = runner::run_experiment(&cfg, &dir)?;
            for (t, a) in r.acc_matrix.iter().enumerate() {
                println!("task {} acc_seen {}", t + 1, sig6(*a));
            }
            println!("last_acc {} inc_acc {}", sig6(r.last_acc), sig6(r.inc_acc));
            println!("wrote {}", dir.display());
        }
        Cmd::Merge {
            a,
            b,
            lambda,
            fisher_a,
            fisher_b,
            epsilon,
            out,
        } => {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Usage(format!("lambda {lambda} outside [0, 1]")).into());
            }
            let ck = runner::merge_checkpoints(&a, &b, lambda, fisher_a.as_deref(), fisher_b.as_deref(), epsilon, &out)?;
            println!("merged {} entries into {}", ck.entries.iter().count(), out.display());
        }
        Cmd::Fisher {
            ckpt,
            data,
            mc_samples,
            seed,
            config,
            out,
        } => {
            let model = config.as_deref().map(load_config).transpose()?.map(|c| c.model);
            let fk = runner::fisher_command(&ckpt, &data, mc_samples, seed, model.as_ref(), &out)?;
            let total: f64 = fk.entries.iter().flat_map(|(_, t)| t.data().iter()).sum();
            println!("fisher trace {} written to {}", sig6(total), out.display());
        }
        Cmd::Eval { ckpt, config, data } => match (config, data) {
            (cfg, Some(data)) => {
                let model = cfg.as_deref().map(load_config).transpose()?.map(|c| c.model);
                println!("accuracy {}", sig6(runner::eval_csv(&ckpt, &data, model.as_ref())?));
            }
            (Some(cfg), None) => {
                let (per, all) = runner::eval_command(&ckpt, &load_config(&cfg)?)?;
                for (t, a) in per.iter().enumerate() {
                    println!("task {} acc {}", t + 1, sig6(*a));
                }
                println!("all acc {}", sig6(all));
            }
            (None, None) => return Err(Error::Usage("eval needs --config or --data".into()).into()),
        },
        Cmd::Sweep {
            config,
            lambda_grid,
            seeds,
            strategies,
            out,
        } => {
            let cfg = load_config(&config)?;
            let grid = runner::parse_lambda_grid(&lambda_grid).map_err(arg_err)?;
            let seeds = runner::parse_seeds(&seeds).map_err(arg_err)?;
            let strategies = match strategies {
                Some(s) => s
                    .split(',')
                    .map(|p| Strategy::parse(p.trim()).map_err(arg_err))
                    .collect::<Result<Vec<_>, _>>()?,
                None => vec![cfg.train.strategy],
            };
            let rows = runner::run_sweep(&cfg, &strategies, &grid, &seeds)?;
            let path = out.unwrap_or_else(|| cfg.output.dir.join("sweep.csv"));
            if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(p)?;
            }
            mergecl::checkpoint::write_atomic(&path, runner::sweep_csv(&rows).as_bytes())?;
            for (s, l, m) in runner::sweep_means(&rows) {
                println!("{s} lambda {} mean_last_acc {}", sig6(l), sig6(m));
            }
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Cmd::Oracle {
            trials,
            dim,
            tasks,
            seed,
        } => {
            let gaps = runner::oracle_command(trials, dim, tasks, seed).map_err(arg_err)?;
            let max = gaps.iter().copied().fold(0.0f64, f64::max);
            println!("trials {trials} max_gap {}", sig6(max));
            if !(max < 1e-10) {
                anyhow::bail!("optimality gap {} exceeds 1e-10", sig6(max));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
