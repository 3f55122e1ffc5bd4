//! Exchanges each of the 49 grid patches of a Sneaker with the same patch of
//! Shirt images and prints the MC-dropout certainty curve.
//!
//!     cargo run --release --example perturbation_sweep -- <checkpoint> [passes]

use std::env;
use std::path::Path;

use anyhow::{Context, Result};
use spurious_audit::audit::{cell_margin, correctly_classified, identify_spurious};
use spurious_audit::checkpoint;
use spurious_audit::config::DATA_DIR_ENV;
use spurious_audit::dataset::{class_subset, inject_decoys, load_split_dir, DecoySpec, SHIRT, SNEAKER};
use spurious_audit::perturb::{sweep, GridSpec};

fn main() -> Result<()> {
    let mut args = env::args().skip(1);
    let ckpt = args.next().context("usage: perturbation_sweep <checkpoint> [passes]")?;
    let passes: usize = args.next().map_or(Ok(100), |s| s.parse())?;
    let data = env::var(DATA_DIR_ENV).unwrap_or_else(|_| "data/fashion-mnist".into());

    let theta = checkpoint::load(Path::new(&ckpt))?;
    let test = inject_decoys(&load_split_dir(data.as_ref(), "t10k")?, &DecoySpec::default())?;
    let source = *correctly_classified(&theta, &test, SNEAKER, 1)?
        .first()
        .context("no correctly classified Sneaker")?;
    let targets: Vec<_> = class_subset(&test, SHIRT, 50, 0)?
        .examples
        .into_iter()
        .map(|e| e.image)
        .collect();

    let curve = sweep(
        &theta,
        source,
        &test.examples[source].image,
        SNEAKER,
        &targets,
        &GridSpec::default(),
        passes,
        1,
    )?;
    println!(
        "source image {source}, baseline certainty {:.4}",
        curve.baseline.mean_prob
    );
    for (k, p) in curve.per_cell.iter().enumerate() {
        println!("cell {:>2} {:.4} {}", k + 1, p, "#".repeat((p * 50.0).round() as usize));
    }
    let cell = identify_spurious(&curve);
    println!(
        "lowest certainty at cell {cell}, drop exceeds the median drop by {:.4}",
        cell_margin(&curve, cell)
    );
    Ok(())
}
