//! Checks the analytic gradient of the combined loss against central finite
//! differences on a tiny random model. Needs no data.
//!
//!     cargo run --release --example gradient_check

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spurious_audit::dataset::{AnnotationMask, GrayImage};
use spurious_audit::loss::{combined_loss, loss_gradient, TrainingExample};
use spurious_audit::model::{Mode, ModelConfig, ParameterSet};
use spurious_audit::tensor::{finite_difference_grad, relative_error};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let side = 8;
    let cfg = ModelConfig {
        filters: 2,
        image_side: side,
        ..ModelConfig::default()
    };
    let n = ParameterSet::zeros(&cfg)?.values().len();
    let theta = ParameterSet::from_values(&cfg, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())?;

    let images: Vec<GrayImage> = (0..3)
        .map(|_| GrayImage::new(side, (0..side * side).map(|_| rng.gen()).collect()))
        .collect::<Result<_, _>>()?;
    let masks: Vec<AnnotationMask> = (0..3).map(|i| AnnotationMask::square(side, i, 2 * i, 2)).collect();
    let batch: Vec<TrainingExample<'_>> = (0..3)
        .map(|i| TrainingExample {
            image: &images[i],
            label: i + 2,
            mask: Some(&masks[i]),
            mode: Mode::Stochastic { seed: i as u64 },
        })
        .collect();

    let (lambda, weight) = (1e-3, 1.0);
    let analytic = loss_gradient(&theta, &batch, lambda, weight)?;
    let numeric = finite_difference_grad(
        |v| {
            let t = ParameterSet::from_values(&cfg, v.to_vec()).expect("same length");
            combined_loss(&t, &batch, lambda, weight).expect("valid batch")
        },
        theta.values(),
        1e-5,
    )?;

    let mut worst = (0.0, 0);
    for (i, (a, b)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *b, 1e-5);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    println!(
        "{} parameters, loss {:.6}",
        n,
        combined_loss(&theta, &batch, lambda, weight)?
    );
    println!(
        "worst relative error {:.2e} at #{} ({}): analytic {:.8e}, numeric {:.8e}",
        worst.0,
        worst.1,
        theta.block_of(worst.1),
        analytic[worst.1],
        numeric[worst.1]
    );
    Ok(())
}
