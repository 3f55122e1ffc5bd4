use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use spurious_audit::audit::{emit_report, run_audit_with_progress, AuditConfig, Comparison};
use spurious_audit::checkpoint;
use spurious_audit::config::{KeyValues, PipelineConfig, DATA_DIR_ENV};
use spurious_audit::dataset::{
    inject_decoys, load_idx, load_idx_masks, load_split_dir, write_split_dir, DatasetSplit, NUM_CLASSES,
};
use spurious_audit::model::ParameterSet;
use spurious_audit::seed::derive_seed;
use spurious_audit::train::{accuracy, fit, EpochStats, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "spurious-audit", version, about = "Find and unlearn spurious image regions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stamp class-wise decoy patches into train/test IDX files and write masks.
    Decoy {
        /// Directory holding the clean train-*/t10k-* IDX files.
        #[arg(long, env = DATA_DIR_ENV)]
        data: Option<PathBuf>,
        #[arg(long)]
        train_images: Option<PathBuf>,
        #[arg(long)]
        train_labels: Option<PathBuf>,
        #[arg(long)]
        test_images: Option<PathBuf>,
        #[arg(long)]
        test_labels: Option<PathBuf>,
        /// Key-value file with decoy.* entries.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classification-only training (cross-entropy + L2).
    Train {
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// RRR fine-tuning of an existing checkpoint.
    Finetune {
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        /// Train masks; defaults to train-masks-idx3-ubyte in the data directory.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long)]
        explanation_weight: Option<f64>,
    },
    /// Patch-exchange sweep, spurious cell identification and report.
    Audit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        #[arg(long, default_value_t = 7)]
        source_class: usize,
        #[arg(long, default_value_t = 6)]
        target_class: usize,
        #[arg(long, default_value_t = 50)]
        n_targets: usize,
        #[arg(long, default_value_t = 100)]
        mc_passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        n_sources: usize,
        #[arg(long, default_value_t = 4)]
        plot_sources: usize,
        /// Also write per_target.csv.
        #[arg(long)]
        per_target: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric deltas between two audit reports (directories or summary files).
    Compare {
        #[arg(long)]
        report_a: PathBuf,
        #[arg(long)]
        report_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deterministic test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        #[arg(long, default_value = "t10k")]
        split: String,
    },
}

#[derive(clap::Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    /// Train on the first N examples only.
    #[arg(long)]
    limit: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr0 {
            cfg.lr0 = v;
        }
    }

    fn limit(&self, split: DatasetSplit) -> DatasetSplit {
        match self.limit {
            Some(n) => split.head(n),
            None => split,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn log_epoch(stats: &EpochStats) {
    eprintln!(
        "epoch {:>3}  lr {:.3e}  L_C {:.4}  L_E {:.4}  L2 {:.4}",
        stats.epoch, stats.learning_rate, stats.classification, stats.explanation, stats.l2
    );
}

fn save_checkpoint(
    theta: &ParameterSet,
    path: &Path,
    stage: &str,
    cfg: &PipelineConfig,
    tcfg: &TrainConfig,
) -> Result<()> {
    let mut meta = KeyValues::default();
    meta.insert("stage", stage);
    let kv = cfg.to_key_values();
    for key in kv.keys().filter(|k| k.starts_with("model.") || k.starts_with("decoy.")) {
        meta.insert(key, kv.get(key).unwrap_or_default());
    }
    meta.insert("epochs", tcfg.epochs);
    meta.insert("seed", tcfg.seed);
    meta.insert("explanation_weight", tcfg.explanation_weight);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    checkpoint::save(theta, path, &meta)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn summary_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("summary.txt")
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decoy {
            data,
            train_images,
            train_labels,
            test_images,
            test_labels,
            spec,
            out,
        } => {
            let from_dir = |given: Option<PathBuf>, prefix: &str, kind: &str| -> Result<PathBuf> {
                match (given, &data) {
                    (Some(p), _) => Ok(p),
                    (None, Some(dir)) => Ok(spurious_audit::dataset::split_file(dir, prefix, kind)),
                    (None, None) => bail!("no path for {prefix}-{kind}: pass it explicitly or set --data"),
                }
            };
            let decoy = load_config(spec.as_deref())?.decoy;
            for (prefix, images, labels) in [
                (
                    "train",
                    from_dir(train_images, "train", "images-idx3-ubyte")?,
                    from_dir(train_labels, "train", "labels-idx1-ubyte")?,
                ),
                (
                    "t10k",
                    from_dir(test_images, "t10k", "images-idx3-ubyte")?,
                    from_dir(test_labels, "t10k", "labels-idx1-ubyte")?,
                ),
            ] {
                let split = inject_decoys(&load_idx(&images, &labels)?, &decoy)?;
                write_split_dir(&split, &out, prefix)?;
                println!("{prefix}: {} decoyed examples", split.len());
            }
            println!("wrote {}", out.display());
        }
        Command::Train {
            data,
            config,
            out_checkpoint,
            overrides,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut tcfg = cfg.train.clone();
            overrides.apply(&mut tcfg);
            let split = overrides.limit(load_split_dir(&data, "train")?);
            let theta = ParameterSet::init(&cfg.model, derive_seed(tcfg.seed, &[0]))?;
            let (theta, _) = fit(theta, &split, &tcfg, 0.0, log_epoch)?;
            save_checkpoint(&theta, &out_checkpoint, "train", &cfg, &tcfg)?;
        }
        Command::Finetune {
            data,
            masks,
            checkpoint: ckpt,
            config,
            out_checkpoint,
            overrides,
            explanation_weight,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut tcfg = cfg.finetune.clone();
            overrides.apply(&mut tcfg);
            if let Some(w) = explanation_weight {
                tcfg.explanation_weight = w;
            }
            let mut split = load_split_dir(&data, "train")?;
            if let Some(path) = masks {
                split = DatasetSplit::with_masks(split.examples, load_idx_masks(&path)?)?;
            }
            if split.masks.is_none() {
                bail!(
                    "no train masks in {}; pass --masks or run `decoy` first",
                    data.display()
                );
            }
            let split = overrides.limit(split);
            let mut theta = checkpoint::load(&ckpt)?;
            theta.set_dropout_rate(cfg.model.dropout_rate);
            let (theta, _) = fit(theta, &split, &tcfg, tcfg.explanation_weight, log_epoch)?;
            save_checkpoint(&theta, &out_checkpoint, "finetune", &cfg, &tcfg)?;
        }
        Command::Audit {
            checkpoint: ckpt,
            data,
            source_class,
            target_class,
            n_targets,
            mc_passes,
            seed,
            n_sources,
            plot_sources,
            per_target,
            out,
        } => {
            for class in [source_class, target_class] {
                if class >= NUM_CLASSES {
                    bail!("class index {class} out of range 0..{NUM_CLASSES}");
                }
            }
            let bytes = fs::read(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            let theta = checkpoint::decode(&bytes, &ckpt)?;
            let split = load_split_dir(&data, "t10k")?;
            let cfg = AuditConfig {
                source_class,
                target_class,
                n_targets,
                mc_passes,
                seed,
                n_sources,
                plot_sources,
                per_target_appendix: per_target,
            };
            let report = run_audit_with_progress(
                &theta,
                &split,
                &cfg,
                &checkpoint::model_id(&ckpt, &bytes),
                |n, curve| {
                    eprintln!("source {:>2}/{n_sources}: image {}", n + 1, curve.source_index);
                },
            )?;
            for path in emit_report(&report, &out)? {
                println!("wrote {}", path.display());
            }
            println!("consensus_cell={}", report.consensus_cell);
            println!("mean_abs_change={:.4}", report.metrics.mean_abs_change);
            println!("mean_max_drop={:.4}", report.metrics.mean_max_drop);
        }
        Command::Compare {
            report_a,
            report_b,
            out,
        } => {
            let a = KeyValues::load(&summary_path(&report_a))?;
            let b = KeyValues::load(&summary_path(&report_b))?;
            let text = Comparison::from_summaries(&a, &b)?.render();
            print!("{text}");
            if let Some(path) = out {
                fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            split,
        } => {
            let theta = checkpoint::load(&ckpt)?;
            let split = load_split_dir(&data, &split)?;
            println!("accuracy={:.4}", accuracy(&theta, &split)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
