//! Experiment command line.
//!
//! Subcommands: inject-noise, train, eval, report, curriculum-audit.
//! Every subcommand takes a TOML config plus flag overrides; train writes
//! all artifacts into a run directory. Exit codes: 0 success, 2 config
//! error, 3 runtime failure.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use cocorrect::config::{Method, RunConfig};
use cocorrect::data::NoiseModel;
use cocorrect::trainer::checkpoint;
use cocorrect::{report, trainer, Error};

#[derive(Parser)]
#[command(name = "cocorrect", version, about = "Noise-tolerant classifier training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the method (cocorrecting | standard).
    #[arg(long)]
    method: Option<String>,
    /// Override the noise model (none | symmetric | pairflip).
    #[arg(long)]
    noise_model: Option<String>,
    /// Override the noise rate.
    #[arg(long)]
    noise_rate: Option<f64>,
    /// Override the label correction rate.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the dataset root directory.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt labels per the config and write the audit manifest.
    InjectNoise {
        #[command(flatten)]
        config: ConfigArgs,
        /// Manifest output path.
        #[arg(long, default_value = "noise_manifest.csv")]
        out: PathBuf,
    },
    /// Run a full training experiment into a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory (artifacts are written here).
        #[arg(long, default_value = "runs/run")]
        run_dir: PathBuf,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint produced by train.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render plots and summary tables from run directories.
    Report {
        /// Directory containing run directories (or a single run).
        runs: PathBuf,
        /// Output directory for plots and summaries.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Recompute the curriculum from a warm-up checkpoint and dump its CSV.
    CurriculumAudit {
        #[command(flatten)]
        config: ConfigArgs,
        /// Warm-up checkpoint (ckpt_stage1.bin of a previous run).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV path.
        #[arg(long, default_value = "curriculum_audit.csv")]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(ref m) = args.method {
        cfg.method = match m.as_str() {
            "cocorrecting" => Method::Cocorrecting,
            "standard" => Method::Standard,
            other => return Err(Error::config(format!("unknown method '{other}'"))),
        };
    }
    if let Some(ref m) = args.noise_model {
        cfg.noise.model = match m.as_str() {
            "none" => NoiseModel::None,
            "symmetric" => NoiseModel::Symmetric,
            "pairflip" => NoiseModel::Pairflip,
            other => return Err(Error::config(format!("unknown noise model '{other}'"))),
        };
    }
    if let Some(rate) = args.noise_rate {
        cfg.noise.rate = rate;
    }
    if let Some(lambda) = args.lambda {
        cfg.label.lambda = Some(lambda);
    }
    if let Some(ref root) = args.data_root {
        cfg.dataset.root = Some(root.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run_command(command: Command) -> Result<(), Error> {
    match command {
        Command::InjectNoise { config, out } => {
            let cfg = load_config(&config)?;
            let ds = trainer::prepare_dataset(&cfg)?;
            ds.write_noise_manifest(&out)?;
            println!(
                "wrote {} ({} train samples, realized noise rate {:.4})",
                out.display(),
                ds.split_len(cocorrect::data::Split::Train),
                ds.realized_noise_rate()
            );
            Ok(())
        }
        Command::Train {
            config,
            run_dir,
            resume,
        } => {
            let mut cfg = load_config(&config)?;
            if resume.is_some() {
                cfg.resume_from = resume;
            }
            let out = trainer::run(&cfg, &run_dir)?;
            println!(
                "run complete: {} epochs, report net {}, test accuracy {:.4}{}",
                out.records.len(),
                out.report_net + 1,
                out.final_test_acc,
                out.final_acc_label
                    .map(|a| format!(", label accuracy {a:.4}"))
                    .unwrap_or_default()
            );
            println!("artifacts in {}", out.run_dir.display());
            Ok(())
        }
        Command::Eval { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let accs = trainer::eval_checkpoint(&cfg, &checkpoint)?;
            for (i, acc) in accs.iter().enumerate() {
                println!("net{}: test accuracy {:.4}", i + 1, acc);
            }
            Ok(())
        }
        Command::Report { runs, out } => {
            let written = report::render_report(&runs, &out)?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::CurriculumAudit {
            config,
            checkpoint: ckpt_path,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = trainer::prepare_dataset(&cfg)?;
            let ckpt = checkpoint::load(&ckpt_path)?;
            if ckpt.net_params.len() != 2 {
                return Err(Error::config(
                    "curriculum audit needs a dual-network checkpoint".to_string(),
                ));
            }
            let (c, h, w) = ds.image_shape();
            let mut net1 = cocorrect::nn::build_backbone(
                &cfg.model.backbone,
                c,
                (h, w),
                cfg.model.width,
                ds.num_classes(),
                0,
            )?;
            let mut net2 = net1.clone();
            checkpoint::restore_net(&mut net1, &ckpt.net_params[0], &ckpt.buffers[0])?;
            checkpoint::restore_net(&mut net2, &ckpt.net_params[1], &ckpt.buffers[1])?;
            let plan = cocorrect::curriculum::build_plan(
                &net1,
                &net2,
                &ds,
                cfg.curriculum.k_percentile,
                cfg.curriculum.pca_dim,
                cfg.schedule.batch_size,
                (
                    cfg.schedule.epochs_stage1,
                    cfg.schedule.epochs_stage1 + cfg.schedule.epochs_stage3.max(3),
                ),
            )?;
            plan.export_csv(&out)?;
            println!(
                "wrote {} (tiers {:?}, variance captured {:.4})",
                out.display(),
                plan.tier_sizes(),
                plan.variance_captured
            );
            Ok(())
        }
    }
}
