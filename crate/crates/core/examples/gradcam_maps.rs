//! Writes GradCAM saliency maps (PGM) for a few decoyed Sneakers, showing
//! how much of the map falls on the decoy patch.
//!
//!     cargo run --release --example gradcam_maps -- [checkpoint]
//!
//! Without a checkpoint a model is trained briefly on 5000 examples.

use std::env;
use std::fs;
use std::path::Path;

use anyhow::Result;
use spurious_audit::checkpoint;
use spurious_audit::config::DATA_DIR_ENV;
use spurious_audit::dataset::{inject_decoys, load_split_dir, DecoySpec, SNEAKER};
use spurious_audit::gradcam::{gradcam, norm_minmax};
use spurious_audit::loss::explanation_term;
use spurious_audit::model::ModelConfig;
use spurious_audit::train::{train, TrainConfig};

fn main() -> Result<()> {
    let data = env::var(DATA_DIR_ENV).unwrap_or_else(|_| "data/fashion-mnist".into());
    let spec = DecoySpec::default();
    let test = inject_decoys(&load_split_dir(data.as_ref(), "t10k")?, &spec)?;

    let theta = match env::args().nth(1) {
        Some(path) => checkpoint::load(Path::new(&path))?,
        None => {
            let train_split = inject_decoys(&load_split_dir(data.as_ref(), "train")?.head(5000), &spec)?;
            let tcfg = TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            };
            train(&train_split, &ModelConfig::default(), &tcfg)?
        }
    };

    let out = Path::new("out/gradcam");
    fs::create_dir_all(out)?;
    let mask = spec.mask_for(SNEAKER);
    for &i in test.class_indices(SNEAKER).iter().take(4) {
        let map = norm_minmax(&gradcam(&theta, &test.examples[i].image, SNEAKER)?);
        let path = out.join(format!("sneaker_{i}.pgm"));
        map.write_pgm(&path)?;
        let inside: f64 = (0..28 * 28)
            .filter(|&p| mask.bits()[p] == 1)
            .map(|p| map.values()[p])
            .sum();
        let total: f64 = map.values().iter().sum();
        println!(
            "image {i:>5}: {:.1}% of saliency on the decoy patch, explanation term {:.3} -> {}",
            100.0 * inside / total.max(f64::MIN_POSITIVE),
            explanation_term(&map, &mask),
            path.display()
        );
    }
    Ok(())
}
