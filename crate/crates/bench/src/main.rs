use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ekfac_bench::config::{parse_arch, parse_loss, LrSchedule, TrainConfig};
use ekfac_bench::data::DatasetSpec;
use ekfac_bench::diagnose::{correlation_after_training, frobenius_during_training};
use ekfac_bench::grid::{per_epoch_best, run_grid, GridSpec};
use ekfac_bench::report;
use ekfac_bench::train::{run_training_with, RunOptions, RunOutcome, RunStatus, TraceOptions};
use ekfac_core::precond::{Hyperparams, PreconditionerKind};

#[derive(Parser)]
#[command(name = "ekfac", version, about = "Train auto-encoders with Kronecker-factored preconditioners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write a JSON Lines metrics stream.
    Train(TrainArgs),
    /// Run every cell of a grid file.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Cell summary CSV; the per-epoch best table goes next to it.
        #[arg(long, default_value = "grid_summary.csv")]
        summary: PathBuf,
        #[arg(long)]
        single_thread: bool,
    },
    /// Measure curvature approximations while training.
    Diagnose {
        #[arg(value_enum)]
        kind: DiagnoseKind,
        #[arg(long, default_value_t = 3)]
        layer: usize,
        #[arg(long, default_value_t = 50)]
        stride: usize,
        /// Coordinates in the correlation subset.
        #[arg(long, default_value_t = 250)]
        subset: usize,
        /// Examples used for each exact Fisher estimate.
        #[arg(long, default_value_t = 500)]
        sample: usize,
        /// Spectrum only: re-estimate KFAC factors in the fixed basis every N
        /// iterations instead of keeping the initial eigenvalues.
        #[arg(long)]
        kfac_refresh: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagnoseKind {
    Frobenius,
    Spectrum,
    Correlation,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "ekfac")]
    optimizer: String,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    damping: f64,
    #[arg(long, default_value_t = 200)]
    batch_size: usize,
    /// Recompute eigenbases every N iterations.
    #[arg(long, default_value_t = 50)]
    freq: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `mnist:DIR[,n=COUNT]` or `synthetic:n=..,dim=..,latent=..,seed=..`
    #[arg(long, default_value = "synthetic:n=5000,dim=784,latent=10,seed=0")]
    dataset: String,
    /// `desk`, `full` or comma-separated widths.
    #[arg(long, default_value = "desk")]
    arch: String,
    #[arg(long, default_value = "mse")]
    loss: String,
    /// Metrics output (JSON Lines or CSV, depending on the command).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `FACTOR,EVERY_EPOCHS`
    #[arg(long)]
    lr_decay: Option<String>,
    #[arg(long)]
    single_thread: bool,
    /// Hold out a validation split and report its loss.
    #[arg(long)]
    validation: bool,
    /// Also log the minibatch loss every N iterations.
    #[arg(long)]
    log_every: Option<usize>,
}

impl TrainArgs {
    fn config(&self, metrics_out: Option<PathBuf>) -> Result<TrainConfig> {
        let optimizer: PreconditionerKind = self.optimizer.parse()?;
        let config = TrainConfig {
            optimizer,
            hyper: Hyperparams {
                learning_rate: self.lr,
                damping: self.damping,
                refresh_every: self.freq,
                ..Default::default()
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            dataset: self.dataset.parse::<DatasetSpec>()?,
            arch: parse_arch(&self.arch)?,
            loss: parse_loss(&self.loss)?,
            lr_schedule: match &self.lr_decay {
                Some(s) => LrSchedule::parse_step_decay(s)?,
                None => LrSchedule::Constant,
            },
            metrics_out,
            validation: self.validation,
            log_every: self.log_every,
        };
        config.validate()?;
        Ok(config)
    }
}

fn print_outcome(out: &RunOutcome) {
    match &out.status {
        RunStatus::Completed => println!("status: completed"),
        RunStatus::Diverged { iteration, reason } => {
            println!("status: diverged at iteration {iteration} ({reason})")
        }
    }
    if let Some(loss) = out.final_train_loss() {
        println!("final training loss: {loss:.6}");
    }
    println!("steps: {}, mean step time: {:.4} s", out.steps.len(), out.mean_step_seconds());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let single_thread = match &cli.command {
        Command::Train(a) | Command::Diagnose { train: a, .. } => a.single_thread,
        Command::Grid { single_thread, .. } => *single_thread,
    };
    if single_thread {
        rayon::ThreadPoolBuilder::new().num_threads(1).build_global()?;
    }

    match cli.command {
        Command::Train(args) => {
            let config = args.config(args.out.clone())?;
            let out = run_training_with(&config, &RunOptions::default())?;
            print_outcome(&out);
            if let Some(p) = &config.metrics_out {
                println!("metrics: {}", p.display());
                println!("checkpoint: {}", p.with_extension("ckpt").display());
            }
        }
        Command::Grid { config, summary, single_thread } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut spec = GridSpec::parse(&text)?;
            spec.single_thread |= single_thread;
            let results = run_grid(&spec);
            report::write_grid_summary(&summary, &results)?;
            let best_path = summary.with_file_name(format!(
                "{}_best.csv",
                summary.file_stem().and_then(|s| s.to_str()).unwrap_or("grid")
            ));
            report::write_per_epoch_best(&best_path, &per_epoch_best(&results))?;
            let diverged = results.iter().filter(|r| r.status != "completed").count();
            println!("{} cells, {} diverged", results.len(), diverged);
            println!("summary: {}", summary.display());
            println!("per-epoch best: {}", best_path.display());
        }
        Command::Diagnose { kind, layer, stride, subset, sample, kfac_refresh, train } => {
            let Some(out_path) = train.out.clone() else {
                bail!("diagnose needs --out");
            };
            let config = train.config(None)?;
            match kind {
                DiagnoseKind::Frobenius => {
                    let (out, rows) = frobenius_during_training(&config, layer, stride, sample)?;
                    report::write_frobenius_csv(&out_path, &rows)?;
                    print_outcome(&out);
                    let worse = rows.iter().filter(|(_, e)| e.err_ekfac > e.err_kfac + 1e-10).count();
                    println!("{} checkpoints, {} with err_ekfac > err_kfac", rows.len(), worse);
                }
                DiagnoseKind::Spectrum => {
                    let options = RunOptions {
                        trace: Some(TraceOptions {
                            layer,
                            stride,
                            trace_batch: sample,
                            kfac_refresh_every: kfac_refresh,
                            csv_out: Some(out_path.clone()),
                            ..Default::default()
                        }),
                        max_iterations: None,
                    };
                    let out = run_training_with(&config, &options)?;
                    print_outcome(&out);
                    let mean = |f: fn(&ekfac_core::diagnostics::SpectrumTrace) -> f64| {
                        out.traces.iter().map(f).sum::<f64>() / out.traces.len().max(1) as f64
                    };
                    println!(
                        "mean distance: kfac {:.6}, ekfac intrabatch {:.6}, ekfac running {:.6}",
                        mean(|t| t.dist_kfac),
                        mean(|t| t.dist_ekfac_intrabatch),
                        mean(|t| t.dist_ekfac_ra)
                    );
                    println!("metadata: {}", report::metadata_path(&out_path).display());
                }
                DiagnoseKind::Correlation => {
                    let (out, r) = correlation_after_training(&config, layer, subset, sample)?;
                    report::write_correlation_csv(&out_path, &r)?;
                    print_outcome(&out);
                    println!(
                        "mean |off-diagonal correlation|: parameter basis {:.4}, KFE {:.4}",
                        r.parameter_offdiag_mean, r.kfe_offdiag_mean
                    );
                }
            }
            println!("written: {}", out_path.display());
        }
    }
    Ok(())
}
