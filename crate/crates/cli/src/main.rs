use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use cavat::baselines::MethodId;
use cavat::data::{self, ShapeParams};
use cavat::harness::{self, SweepParam, TrainConfig};
use cavat::Adjacency;
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "cavat", version, about = "Constraint-aware virtual adversarial training for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method over the configured seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        method: Option<MethodId>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        labeled_ratio: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of one hyperparameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// gamma, lambda, epsilon, m, l or k.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset's validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "4")]
        adjacency: Adjacency,
        #[arg(long, default_value_t = 5)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic blob dataset with a labeled/unlabeled/validation split.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        labeled_ratio: f64,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        /// TOML file with shape parameters.
        #[arg(long)]
        shapes: Option<PathBuf>,
    },
}

fn print_summary(rec: &harness::ExperimentRecord) {
    let s = rec.summary;
    println!(
        "{}: dsc {:.4} ± {:.4}  hd {:.3} ± {:.3}  n_conn {:.4} ± {:.4}  ({} seeds)",
        s.method,
        s.dsc.mean,
        s.dsc.std,
        s.hd.mean,
        s.hd.std,
        s.n_conn.mean,
        s.n_conn.std,
        rec.runs.len()
    );
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            method,
            gamma,
            lambda,
            labeled_ratio,
            steps,
            out,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seeds = vec![seed];
            }
            if let Some(method) = method {
                cfg.method = method;
            }
            if let Some(gamma) = gamma {
                cfg.gamma = gamma;
            }
            if let Some(lambda) = lambda {
                cfg.lambda = lambda;
            }
            if let Some(ratio) = labeled_ratio {
                cfg.labeled_ratio = ratio;
            }
            if let Some(steps) = steps {
                cfg.total_steps = steps;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            info!("config hash {}", cfg.hash());
            let rec = harness::run_experiment(&cfg)?;
            print_summary(&rec);
            if cfg.out_dir.is_none() {
                print!("{}", rec.csv()?);
            }
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if out.is_some() {
                cfg.out_dir = out;
            }
            let rec = harness::sweep(&cfg, param, &values)?;
            for (value, exp) in values.iter().zip(&rec.experiments) {
                print!("{}={value}  ", param.name());
                print_summary(exp);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            adjacency,
            draws,
            seed,
        } => {
            if draws == 0 {
                bail!("--draws must be positive");
            }
            let r = harness::evaluate_checkpoint(&checkpoint, &data, adjacency, draws, seed)?;
            println!(
                "images {}  dsc {:.4}  hd {:.3} ({} undefined)  n_conn {:.4}",
                r.images, r.dsc, r.hd, r.hd_missing, r.n_conn
            );
        }
        Command::GenData {
            n,
            h,
            w,
            seed,
            out,
            labeled_ratio,
            val_fraction,
            shapes,
        } => {
            let params = match shapes {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
                    toml::from_str::<ShapeParams>(&text).with_context(|| path.display().to_string())?
                }
                None => ShapeParams::default(),
            };
            let mut ds = data::gen_shapes(n, h, w, &params, seed)?;
            data::split_dataset(&mut ds, labeled_ratio, val_fraction, seed)?;
            data::write_dataset(&ds, &out)?;
            let split = ds.split.as_ref().expect("split attached");
            println!(
                "wrote {n} images to {} ({} labeled, {} unlabeled, {} validation)",
                out.display(),
                split.labeled.len(),
                split.unlabeled.len(),
                split.validation.len()
            );
        }
    }
    Ok(())
}
