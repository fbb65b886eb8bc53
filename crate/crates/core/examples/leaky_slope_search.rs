//! Picks the leaky rectifier slope from ±{0.01, 0.05, 0.1, 0.2} by
//! validation error and compares the result with an APL network.
//!
//! `cargo run --release --example leaky_slope_search -- [epochs]`

use std::path::Path;

use aplnet::harness::{cmd_train, ExperimentConfig};

fn main() -> aplnet::error::Result<()> {
    let epochs = std::env::args().nth(1).unwrap_or_else(|| "5".into());
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/mnist_mlp.cfg");
    for (activation, k) in [("leaky_relu", "best"), ("apl", "0.01")] {
        let out = std::env::temp_dir().join(format!("aplnet-{activation}"));
        let overrides: Vec<(String, String)> = [
            ("activation", activation),
            ("k", k),
            ("epochs", epochs.as_str()),
            ("repetitions", "1"),
            ("val_fraction", "0.1"),
            ("output", &out.display().to_string()),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let cfg = ExperimentConfig::load(&config, &overrides)?;
        let run = &cmd_train(&cfg)?.runs[0];
        let val = run.val.and_then(|m| m.error_rate).unwrap_or(f64::NAN);
        let test = run.test.error_rate.unwrap_or(f64::NAN);
        match run.k {
            Some(k) => println!("leaky ReLU, k = {k:+}: validation error {val:.4}, test error {test:.4}"),
            None => println!("APL, S = 1:          validation error {val:.4}, test error {test:.4}"),
        }
    }
    Ok(())
}
