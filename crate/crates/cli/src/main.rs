use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use emotag_core::config::RunConfig;
use emotag_core::ingest::Split;
use emotag_core::model::BranchKind;
use emotag_core::pipeline::{self, AlphaChoice};
use emotag_core::synth::{self, SynthSpec};
use emotag_core::train::TrainMode;

#[derive(Parser)]
#[command(name = "emotag", version, about = "Semi-supervised music emotion tagging")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract Mel and HPCP features for every track into the cache.
    Extract,
    /// Train a supervised model.
    Train {
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        branch: Option<BranchKind>,
        /// Stronger masks, Gaussian noise and stochastic depth.
        #[arg(long)]
        noisy: bool,
    },
    /// Pseudo-label the unlabeled pool with a teacher run.
    Pseudolabel {
        #[arg(long)]
        teacher_run: String,
        /// Use the fixed thresholds (0.1 / 1e-6) instead of calibrating.
        #[arg(long)]
        fixed_thresholds: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a noised student on labeled plus pseudo-labeled tracks.
    TrainStudent {
        #[arg(long)]
        teacher_run: String,
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// Write track-level logits of a run for one split.
    Predict {
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Combine a short-mode and a long-mode run.
    Ensemble {
        #[arg(long)]
        short_run: String,
        #[arg(long)]
        long_run: String,
        #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
        alpha: Option<f64>,
        /// Choose alpha on the validation split.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Score a prediction file against the manifest labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also report per-tag thresholds tuned on validation predictions.
        #[arg(long)]
        tune_thresholds: bool,
        /// Pool all cells instead of averaging per tag.
        #[arg(long)]
        micro: bool,
    },
    /// Write a synthetic tonal corpus (manifest, vocabulary and WAVs).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        labeled: usize,
        #[arg(long, default_value_t = 10)]
        unlabeled: usize,
        #[arg(long, default_value_t = 12.0)]
        seconds: f64,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(id) = &common.run_id {
        cfg.run_id = Some(id.clone());
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    pipeline::configure_threads(cfg.threads);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.common)?;
    match cli.cmd {
        Command::Extract => {
            let s = pipeline::extract(&cfg)?;
            println!("extracted {} feature files, {} already cached", s.written, s.skipped);
        }
        Command::Train { mode, branch, noisy } => {
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(b) = branch {
                cfg.branch = b;
            }
            cfg.noisy |= noisy;
            let r = pipeline::train(&cfg)?;
            println!(
                "{}: best epoch {} of {}, val roc_auc {:.4} -> {}",
                r.run_id,
                r.outcome.best_epoch,
                r.outcome.epochs_run,
                r.outcome.best_val_roc_auc,
                r.dir.display()
            );
        }
        Command::Pseudolabel {
            teacher_run,
            fixed_thresholds,
            out,
        } => {
            let (path, set) = pipeline::pseudolabel(&cfg, &teacher_run, fixed_thresholds, out.as_deref())?;
            let c = set.counts();
            println!(
                "pseudo-labels (tau_pos {}, tau_neg {}): {} positive, {} negative, {} abstain -> {}",
                set.thresholds.pos,
                set.thresholds.neg,
                c.positive,
                c.negative,
                c.abstain,
                path.display()
            );
        }
        Command::TrainStudent { teacher_run, pseudo } => {
            let r = pipeline::train_student(&cfg, &teacher_run, pseudo.as_deref())?;
            println!(
                "{}: best epoch {} of {}, val roc_auc {:.4} -> {}",
                r.run_id,
                r.outcome.best_epoch,
                r.outcome.epochs_run,
                r.outcome.best_val_roc_auc,
                r.dir.display()
            );
        }
        Command::Predict { run, split } => {
            let (path, t) = pipeline::predict(&cfg, &run, split)?;
            println!("{} tracks -> {}", t.track_ids.len(), path.display());
        }
        Command::Ensemble {
            short_run,
            long_run,
            alpha,
            sweep,
            split,
        } => {
            let choice = match (alpha, sweep) {
                (Some(a), false) => AlphaChoice::Fixed(a),
                _ => AlphaChoice::Sweep,
            };
            let (path, spec) = pipeline::ensemble(&cfg, &short_run, &long_run, choice, split)?;
            println!("alpha {} -> {}", spec.alpha, path.display());
        }
        Command::Evaluate {
            predictions,
            split,
            tune_thresholds,
            micro,
        } => {
            if micro {
                cfg.set("evaluate.averaging", "micro")?;
            }
            let (path, r) = pipeline::evaluate_predictions(&cfg, &predictions, split, tune_thresholds)?;
            println!(
                "roc_auc {:.4} pr_auc {:.4} f_score {:.4} avg_tpr {:.4} avg_tnr {:.4} -> {}",
                r.roc_auc,
                r.pr_auc,
                r.f_score,
                r.avg_tpr,
                r.avg_tnr,
                path.display()
            );
        }
        Command::Synth {
            out,
            labeled,
            unlabeled,
            seconds,
        } => {
            let spec = SynthSpec {
                labeled,
                unlabeled,
                seconds,
                seed: cfg.seed,
                ..SynthSpec::default()
            };
            let (m, v) = synth::write_corpus(&out, &spec)?;
            println!("wrote {} and {}", m.display(), v.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<emotag_core::Error>())
                .map_or("other", |e| e.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::FAILURE
        }
    }
}
