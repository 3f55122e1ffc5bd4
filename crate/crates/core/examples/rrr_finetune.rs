//! Fine-tunes a checkpoint with the GradCAM explanation penalty and reports
//! accuracy and explanation loss before and after.
//!
//!     cargo run --release --example rrr_finetune -- <checkpoint> [n train] [epochs]

use std::env;
use std::path::Path;

use anyhow::{Context, Result};
use spurious_audit::checkpoint;
use spurious_audit::config::DATA_DIR_ENV;
use spurious_audit::dataset::{inject_decoys, load_split_dir, DecoySpec};
use spurious_audit::train::{accuracy, fit, mean_explanation_loss, TrainConfig};

fn main() -> Result<()> {
    let mut args = env::args().skip(1);
    let ckpt = args
        .next()
        .context("usage: rrr_finetune <checkpoint> [n train] [epochs]")?;
    let n: usize = args.next().map_or(Ok(10_000), |s| s.parse())?;
    let epochs: usize = args.next().map_or(Ok(2), |s| s.parse())?;
    let data = env::var(DATA_DIR_ENV).unwrap_or_else(|_| "data/fashion-mnist".into());

    let spec = DecoySpec::default();
    let train = inject_decoys(&load_split_dir(data.as_ref(), "train")?.head(n), &spec)?;
    let test = inject_decoys(&load_split_dir(data.as_ref(), "t10k")?, &spec)?;
    let theta = checkpoint::load(Path::new(&ckpt))?;
    println!(
        "before: accuracy {:.4}, mean explanation loss {:.4}",
        accuracy(&theta, &test)?,
        mean_explanation_loss(&theta, &test)?
    );

    let tcfg = TrainConfig {
        epochs,
        seed: 1,
        ..TrainConfig::finetune_default()
    };
    let (refined, _) = fit(theta, &train, &tcfg, tcfg.explanation_weight, |s| {
        println!(
            "epoch {}  mean L_C {:.4}  mean L_E {:.4}",
            s.epoch, s.classification, s.explanation
        );
    })?;
    println!(
        "after:  accuracy {:.4}, mean explanation loss {:.4}",
        accuracy(&refined, &test)?,
        mean_explanation_loss(&refined, &test)?
    );
    let out = Path::new("out/refined.ckpt");
    std::fs::create_dir_all("out")?;
    checkpoint::save(&refined, out, &Default::default())?;
    println!("wrote {}", out.display());
    Ok(())
}
