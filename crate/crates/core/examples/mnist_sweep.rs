//! ReLU against APL units with several hinge counts, plus APL units frozen
//! at initialisation, on the bundled MNIST subsets.
//!
//! `cargo run --release --example mnist_sweep -- [epochs] [seeds]`
//! (defaults: 20 epochs, 5 seeds; about a minute per seed on one core).

use std::path::Path;

use aplnet::harness::{cmd_sweep_s, ExperimentConfig};

fn main() -> aplnet::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().unwrap_or_else(|| "20".into());
    let seeds = args.next().unwrap_or_else(|| "5".into());
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/mnist_mlp.cfg");
    let out = std::env::temp_dir().join("aplnet-mnist-sweep");
    let cfg = ExperimentConfig::load(
        &config,
        &[
            ("epochs".into(), epochs),
            ("repetitions".into(), seeds),
            ("output".into(), out.display().to_string()),
        ],
    )?;
    let table = cmd_sweep_s(&cfg, &[1, 2, 5], true)?;
    print!("{}", table.to_text());
    println!("per-seed results in {}", out.join("sweep.csv").display());
    Ok(())
}
