//! Loads Fashion-MNIST, stamps the class-wise decoy patches and writes the
//! decoyed splits plus annotation masks as IDX files.
//!
//!     cargo run --release --example decoy_dataset -- [data dir] [out dir]

use std::env;
use std::path::PathBuf;

use anyhow::Result;
use spurious_audit::config::DATA_DIR_ENV;
use spurious_audit::dataset::{inject_decoys, load_split_dir, write_split_dir, DecoySpec, CLASS_NAMES};

fn main() -> Result<()> {
    let mut args = env::args().skip(1);
    let data = args
        .next()
        .or_else(|| env::var(DATA_DIR_ENV).ok())
        .unwrap_or_else(|| "data/fashion-mnist".into());
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/decoy".into()));

    let spec = DecoySpec::default();
    for prefix in ["train", "t10k"] {
        let clean = load_split_dir(data.as_ref(), prefix)?;
        let decoyed = inject_decoys(&clean, &spec)?;
        write_split_dir(&decoyed, &out, prefix)?;
        println!("{prefix}: {} examples", decoyed.len());
    }

    let grid = spec.grid()?;
    println!("class -> decoy cell (top-left pixel)");
    for (class, &cell) in spec.cell_of_class.iter().enumerate() {
        let (r, c) = grid.cell_bounds(cell)?;
        println!("  {class} {:<12} cell {cell:>2} at ({r:>2},{c:>2})", CLASS_NAMES[class]);
    }
    println!("wrote {}", out.display());
    Ok(())
}
