//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use eqdiff_synthbench::Split;

use crate::commands::{self, EvaluateOptions, PredictMode, PredictOptions};
use crate::config::{ExperimentConfig, ModelChoice};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "eqdiff", version, about = "Implicit diffusion policy with rotation-equivariant networks")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that receives every output.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "EQDIFF_SEED")]
    pub seed: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, env = "EQDIFF_DEVICE")]
    pub device: Option<String>,
    /// Dataset root, overriding the configuration.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub model: Option<ModelChoice>,
    /// Suppress per-epoch progress.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    GenSynth {
        /// Two mirrored continuations per scene.
        #[arg(long)]
        bimodal: bool,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train the configured model; writes best and last checkpoints and a log.
    Train {
        /// Continue from `<out-dir>/checkpoints/last.ckpt`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict trajectories for a split as JSON lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "in_context_test")]
        split: Split,
        #[arg(long, value_enum, default_value = "conditional")]
        mode: PredictMode,
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        record_intermediates: bool,
        /// Blur severity (1-5) applied to the clips.
        #[arg(long)]
        blur: Option<u8>,
        /// Quarter turns applied to clips and labels.
        #[arg(long, default_value_t = 0)]
        rotate: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score prediction files and write reports, a comparison table and plots.
    Evaluate {
        /// Prediction files, optionally as `name=path`.
        #[arg(long = "predictions", required = true, num_args = 1..)]
        predictions: Vec<String>,
        #[arg(long, default_value = "in_context_test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        rotate: usize,
        /// Training logs (`name=path`) for the loss-curve plot.
        #[arg(long = "log", num_args = 1..)]
        logs: Vec<String>,
        /// Checkpoints (`name=path`) for the complexity plot.
        #[arg(long = "checkpoint", num_args = 1..)]
        checkpoints: Vec<String>,
    },
    /// Measure rotation equivariance of a policy network.
    CheckEquivariance {
        /// Audit a trained policy instead of a fresh one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        layer_tolerance: f64,
    },
    /// Sample synthetic training pairs from a trained policy.
    AugmentWithSynthetic {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        count: usize,
        /// Also copy the real training split.
        #[arg(long)]
        mix: bool,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

impl Cli {
    /// The configuration file (or defaults) with command-line overrides.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.device {
            cfg.device = v.clone();
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = Some(v.clone());
        }
        if let Some(v) = self.model {
            cfg.model = v;
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.experiment()?;
    match cli.command {
        Command::GenSynth { bimodal, force } => {
            let s = commands::gen_synth(&cfg, bimodal, force)?;
            println!("dataset written to {}", s.root.display());
            for split in Split::ALL {
                println!("  {split}: {} clips", s.manifest.count(split));
            }
            if let Some((ok, n)) = s.two_mode {
                println!("two-mode audit: {ok}/{n} scenes have two separated modes");
            }
        }
        Command::Train { resume, epochs } => {
            if let Some(e) = epochs {
                cfg.diffusion.optimizer.epochs = e;
            }
            let s = commands::train(&cfg, resume, cli.quiet)?;
            println!(
                "trained {} epochs; best validation loss {:.5} at epoch {}",
                s.epochs, s.best_val, s.best_epoch
            );
            println!("checkpoints: {} and {}", s.best.display(), s.last.display());
        }
        Command::Predict {
            checkpoint,
            split,
            mode,
            deterministic,
            record_intermediates,
            blur,
            rotate,
            output,
        } => {
            cfg.sampler.deterministic |= deterministic;
            cfg.sampler.record_intermediates |= record_intermediates;
            let opts = PredictOptions {
                checkpoint,
                split,
                mode,
                blur,
                rotate,
                output,
            };
            let (path, records) = commands::predict(&cfg, &opts)?;
            println!("{} predictions written to {}", records.len(), path.display());
        }
        Command::Evaluate {
            predictions,
            split,
            rotate,
            logs,
            checkpoints,
        } => {
            let opts = EvaluateOptions {
                predictions: predictions.iter().map(|s| commands::named_path(s)).collect(),
                split: Some(split),
                rotate,
                logs: logs.iter().map(|s| commands::named_path(s)).collect(),
                checkpoints: checkpoints.iter().map(|s| commands::named_path(s)).collect(),
            };
            let e = commands::evaluate(&cfg, &opts)?;
            print!("{}", e.table);
            for f in &e.files {
                println!("wrote {}", f.display());
            }
        }
        Command::CheckEquivariance {
            checkpoint,
            samples,
            tolerance,
            layer_tolerance,
        } => {
            let (path, audit) = commands::check_equivariance(&cfg, checkpoint.as_deref(), samples, tolerance, layer_tolerance)?;
            for r in std::iter::once(&audit.network).chain(&audit.layers) {
                let errs: Vec<String> = r
                    .per_element
                    .iter()
                    .map(|e| format!("{:>3.0}deg {:.2e}", e.degrees, e.max_rel_error))
                    .collect();
                println!(
                    "{:<24} {}  tol {:.0e}  [{}]",
                    r.name,
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.tolerance,
                    errs.join(", ")
                );
            }
            println!("report written to {}", path.display());
        }
        Command::AugmentWithSynthetic {
            checkpoint,
            count,
            mix,
            output,
            force,
        } => {
            let s = commands::augment_with_synthetic(&cfg, &checkpoint, count, mix, output.as_deref(), force)?;
            println!(
                "wrote {} synthetic and {} real training clips to {}",
                s.synthetic,
                s.real,
                s.root.display()
            );
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
