//! The whole pipeline at reduced size: train, audit, RRR fine-tune, audit
//! again and compare. Reports land in out/audit_{before,after}.
//!
//!     cargo run --release --example end_to_end_audit

use std::env;
use std::path::Path;

use anyhow::Result;
use spurious_audit::audit::{emit_report, run_audit, summary_key_values, AuditConfig, Comparison};
use spurious_audit::config::DATA_DIR_ENV;
use spurious_audit::dataset::{inject_decoys, load_split_dir, DecoySpec};
use spurious_audit::model::ModelConfig;
use spurious_audit::train::{finetune, train, TrainConfig};

fn main() -> Result<()> {
    let data = env::var(DATA_DIR_ENV).unwrap_or_else(|_| "data/fashion-mnist".into());
    let spec = DecoySpec::default();
    let train_split = inject_decoys(&load_split_dir(data.as_ref(), "train")?.head(10_000), &spec)?;
    let test = inject_decoys(&load_split_dir(data.as_ref(), "t10k")?, &spec)?;

    let mcfg = ModelConfig::default();
    let theta = train(
        &train_split,
        &mcfg,
        &TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
    )?;
    let audit_cfg = AuditConfig {
        n_sources: 5,
        mc_passes: 30,
        ..AuditConfig::default()
    };
    let before = run_audit(&theta, &test, &audit_cfg, "classification-only")?;
    emit_report(&before, Path::new("out/audit_before"))?;
    println!(
        "before: consensus cell {}, per image {:?}",
        before.consensus_cell, before.identified_cell_per_image
    );

    let ft = TrainConfig {
        epochs: 2,
        seed: 1,
        ..TrainConfig::finetune_default()
    };
    let refined = finetune(&theta, &train_split, &mcfg, &ft)?;
    let after = run_audit(&refined, &test, &audit_cfg, "rrr")?;
    emit_report(&after, Path::new("out/audit_after"))?;
    println!(
        "after:  consensus cell {}, per image {:?}",
        after.consensus_cell, after.identified_cell_per_image
    );

    let cmp = Comparison::from_summaries(&summary_key_values(&before), &summary_key_values(&after))?;
    print!("{}", cmp.render());
    Ok(())
}
