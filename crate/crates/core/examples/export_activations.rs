//! Trains a small APL network on MNIST for a few epochs, then writes the
//! initial and learned curve of every unit as CSV and summarises how far
//! the tails moved.
//!
//! `cargo run --release --example export_activations -- [out_dir]`

use std::path::{Path, PathBuf};

use aplnet::harness::{cmd_export_activations, cmd_train, ExperimentConfig, Grid};

fn main() -> aplnet::error::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("aplnet-export"), PathBuf::from);
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/mnist_mlp.cfg");
    let overrides: Vec<(String, String)> = [
        ("hidden", "64,64"),
        ("hinges", "2"),
        ("epochs", "3"),
        ("repetitions", "1"),
        ("output", &out.display().to_string()),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    let cfg = ExperimentConfig::load(&config, &overrides)?;
    cmd_train(&cfg)?;

    let grid = Grid::new(-3.0, 3.0, 121)?;
    for file in cmd_export_activations(&out.join("run-0.ckpt"), "all", grid, &out)? {
        let text = std::fs::read_to_string(&file).map_err(|e| aplnet::error::Error::Internal(e.to_string()))?;
        let left: Vec<f64> = text
            .lines()
            .find(|l| l.starts_with("left_slope"))
            .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap_or(f64::NAN)).collect())
            .unwrap_or_default();
        let moved = left
            .chunks(2)
            .map(|pair| (pair[1] - pair[0]).abs())
            .fold(0.0f64, f64::max);
        println!(
            "{}: {} units, largest change of a left tail slope {moved:.3}",
            file.display(),
            left.len() / 2
        );
    }
    Ok(())
}
