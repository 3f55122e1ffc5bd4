//! Trains the one-conv classifier on the decoyed data with classification
//! loss only and saves a checkpoint.
//!
//!     cargo run --release --example train_classifier -- [n train] [epochs]

use std::env;
use std::path::Path;

use anyhow::Result;
use spurious_audit::checkpoint;
use spurious_audit::config::DATA_DIR_ENV;
use spurious_audit::dataset::{inject_decoys, load_split_dir, DecoySpec};
use spurious_audit::model::{ModelConfig, ParameterSet};
use spurious_audit::seed::derive_seed;
use spurious_audit::train::{accuracy, fit, TrainConfig};

fn main() -> Result<()> {
    let mut args = env::args().skip(1);
    let n: usize = args.next().map_or(Ok(10_000), |s| s.parse())?;
    let epochs: usize = args.next().map_or(Ok(3), |s| s.parse())?;
    let data = env::var(DATA_DIR_ENV).unwrap_or_else(|_| "data/fashion-mnist".into());

    let spec = DecoySpec::default();
    let train = inject_decoys(&load_split_dir(data.as_ref(), "train")?.head(n), &spec)?;
    let test = inject_decoys(&load_split_dir(data.as_ref(), "t10k")?, &spec)?;

    let mcfg = ModelConfig::default();
    let tcfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let theta = ParameterSet::init(&mcfg, derive_seed(tcfg.seed, &[0]))?;
    let (theta, _) = fit(theta, &train, &tcfg, 0.0, |s| {
        println!(
            "epoch {}  lr {:.2e}  mean L_C {:.4}",
            s.epoch, s.learning_rate, s.classification
        );
    })?;
    println!("decoyed test accuracy {:.4}", accuracy(&theta, &test)?);

    let path = Path::new("out/classifier.ckpt");
    std::fs::create_dir_all("out")?;
    checkpoint::save(&theta, path, &Default::default())?;
    println!("wrote {}", path.display());
    Ok(())
}
