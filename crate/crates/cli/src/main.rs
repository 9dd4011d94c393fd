//! `mgst` command line: synthetic corpus generation, training with either
//! schedule, evaluation, gradient checks, attention-mask export, and
//! ablation grids.
//!
//! Every failure exits nonzero after printing one machine-readable JSON
//! error line to stderr: `{"error":"<code>","message":"..."}`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mgst_core::data::{read_sequence, write_corpus, DatasetSpec};
use mgst_core::error::{Error, Result};
use mgst_core::gradcheck;
use mgst_core::nn::model::{Ablation, ModelConfig};
use mgst_core::tensor::io::write_tensor;
use mgst_core::train::{
    load_checkpoint, run_evaluation, run_training, ConfigFile, Schedule, TrainSettings,
};

#[derive(Parser)]
#[command(name = "mgst", version, about = "multi-grained spatio-temporal sequence classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifests.
    Gen {
        /// Dataset spec TOML (defaults are used when omitted).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for sequences and manifests.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run finite-difference gradient checks.
    Gradcheck {
        /// Restrict to one module: tensor-core, nn-blocks, fusion, convlstm, model.
        #[arg(long)]
        module: Option<String>,
    },
    /// Write the raw fusion attention mask for one sequence.
    ExportMask {
        #[arg(long)]
        ckpt: PathBuf,
        /// An MGSQ sequence file.
        #[arg(long)]
        sample: PathBuf,
        /// Output MGT1 tensor file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several ablation modes with one shared setup.
    Ablate {
        /// Comma-separated ablation modes (e.g. full,2d-only,3d-only).
        #[arg(long)]
        grid: String,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Model + training config TOML, or a preset name (full|tiny|micro).
    #[arg(long)]
    config: String,
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    /// Validation manifest (defaults to `val.txt` next to the training one).
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long, default_value = "end2end")]
    schedule: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the configured learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the configured batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Override the configured per-stage epochs for two-stage training.
    #[arg(long)]
    stage_epochs: Option<usize>,
}

impl TrainArgs {
    fn load(&self) -> Result<(ModelConfig, TrainSettings, Schedule, PathBuf)> {
        let (model, mut settings) = match self.config.as_str() {
            name @ ("full" | "tiny" | "micro") => {
                (ModelConfig::preset(name)?, TrainSettings::default())
            }
            path => {
                let file = ConfigFile::load(std::path::Path::new(path))?;
                (file.model, file.train)
            }
        };
        if let Some(e) = self.epochs {
            settings.epochs = e;
        }
        if let Some(lr) = self.lr {
            settings.lr = lr;
        }
        if let Some(b) = self.batch {
            settings.batch = b;
        }
        if let Some(se) = self.stage_epochs {
            settings.stage_epochs = se;
        }
        let schedule = Schedule::parse(&self.schedule)?;
        let val = match &self.val_data {
            Some(p) => p.clone(),
            None => self
                .data
                .parent()
                .unwrap_or(std::path::Path::new("."))
                .join("val.txt"),
        };
        Ok((model, settings, schedule, val))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.code(), "message": e.to_string() })
            );
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out } => {
            let spec = match spec {
                Some(path) => DatasetSpec::from_toml_str(&std::fs::read_to_string(path)?)?,
                None => DatasetSpec::default(),
            };
            let (train, val) = write_corpus(&spec, &out)?;
            println!(
                "wrote {} train / {} val sequences under {}",
                spec.classes * spec.train_per_class,
                spec.classes * spec.val_per_class,
                out.display()
            );
            println!("train manifest: {}", train.display());
            println!("val manifest:   {}", val.display());
            Ok(())
        }
        Command::Train(args) => {
            let (model, settings, schedule, val) = args.load()?;
            let val_manifest = val.exists().then_some(val);
            let outcome = run_training(
                model,
                settings,
                schedule,
                args.seed,
                &args.data,
                val_manifest.as_deref(),
                &args.out,
            )?;
            let last = outcome.metrics.last();
            println!(
                "trained {} epochs; final val_acc {}",
                outcome.metrics.len(),
                last.map(|m| format!("{:.4}", m.val_acc)).unwrap_or_else(|| "n/a".into())
            );
            println!("metrics: {}", outcome.csv.display());
            println!("checkpoint: {}", outcome.checkpoint.display());
            Ok(())
        }
        Command::Eval { ckpt, data } => {
            let report = run_evaluation(&ckpt, &data)?;
            println!("accuracy: {:.4}", report.accuracy);
            println!("confusion (rows = true class):");
            for row in &report.confusion {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
                println!("  {}", cells.join(" "));
            }
            Ok(())
        }
        Command::Gradcheck { module } => {
            let wanted: Option<Vec<&str>> = match module.as_deref() {
                None => None,
                Some("tensor-core") => Some(vec!["conv2d", "conv3d", "maxpool", "upsample", "linear"]),
                Some("nn-blocks") => Some(vec!["batchnorm"]),
                Some("fusion") => Some(vec!["fuse"]),
                Some("convlstm") => Some(vec!["attend_input", "cell_step", "classify_head"]),
                Some("model") => Some(vec![]),
                Some(other) => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown module `{other}` (tensor-core|nn-blocks|fusion|convlstm|model)"
                    )))
                }
            };
            let mut failed = false;
            let run_model_check = wanted.as_ref().map(|w| w.is_empty()).unwrap_or(true);
            for name in gradcheck::CHECK_NAMES {
                if let Some(w) = &wanted {
                    if !w.contains(&name) {
                        continue;
                    }
                }
                let outcome = gradcheck::run_check(name)?;
                let status = if outcome.passed() { "ok" } else { "FAIL" };
                println!(
                    "check {:<14} ({}): max_rel {:.3e} (threshold {:.0e}) {status}",
                    outcome.name, outcome.scalar, outcome.max_rel, outcome.threshold
                );
                failed |= !outcome.passed();
            }
            if run_model_check {
                let err = gradcheck::end_to_end_check::<f64>(ModelConfig::micro(), 4, 1e-4)?;
                let ok = err < 1e-3;
                println!(
                    "check {:<14} (f64): max_rel {:.3e} (threshold 1e-3) {}",
                    "model-e2e",
                    err,
                    if ok { "ok" } else { "FAIL" }
                );
                failed |= !ok;
            }
            if failed {
                return Err(Error::InvalidArgument("gradient checks failed".to_string()));
            }
            Ok(())
        }
        Command::ExportMask { ckpt, sample, out } => {
            let model = load_checkpoint(&ckpt)?.into_model();
            let rec = read_sequence(&sample)?;
            let mask = model.export_mask(&rec.frames)?;
            write_tensor(&out, &mask)?;
            println!("mask {:?} written to {}", mask.shape(), out.display());
            Ok(())
        }
        Command::Ablate { grid, train } => {
            let (base_model, settings, schedule, val) = train.load()?;
            let val_manifest = val.exists().then_some(val);
            let modes: Vec<Ablation> = grid
                .split(',')
                .map(|s| Ablation::parse(s.trim()))
                .collect::<Result<_>>()?;
            std::fs::create_dir_all(&train.out)?;
            for mode in modes {
                let mut cfg = base_model.clone();
                cfg.ablation = mode;
                let out_dir = train.out.join(mode.name());
                let outcome = run_training(
                    cfg,
                    settings.clone(),
                    schedule,
                    train.seed,
                    &train.data,
                    val_manifest.as_deref(),
                    &out_dir,
                )?;
                let final_acc = outcome.metrics.last().map(|m| m.val_acc).unwrap_or(0.0);
                println!(
                    "ablation {:<18} epochs {:>3} val_acc {:.4} metrics {}",
                    mode.name(),
                    outcome.metrics.len(),
                    final_acc,
                    outcome.csv.display()
                );
            }
            Ok(())
        }
    }
}
