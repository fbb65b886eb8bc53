//! Fits a single APL unit to noisy samples of a random hinge function and
//! compares the learned hinges with the generating ones.
//!
//! `cargo run --release --example synthetic_recovery -- [hinges] [seed]`

use aplnet::data::{gen_synthetic_pwl_task, SYNTHETIC_RANGE};
use aplnet::network::{NetworkInit, NetworkSpec};
use aplnet::optim::TrainConfig;
use aplnet::train::{initial_state, train};

fn main() -> aplnet::error::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("integer argument"));
    let hinges = args.next().unwrap_or(2) as usize;
    let seed = args.next().unwrap_or(0);

    let task = gen_synthetic_pwl_task(10_000, hinges, 0.01, seed)?;
    let spec: NetworkSpec = format!("input 1\nactivation apl {hinges}\n").parse()?;
    let mut state = initial_state::<f64>(spec, NetworkInit::seeded(seed))?;
    let cfg = TrainConfig {
        lr: 0.05,
        epochs: 50,
        batch_size: 32,
        apl_penalty: 0.0,
        seed,
        ..TrainConfig::default()
    };
    train(&mut state, &task.dataset, &cfg, |_, stats| {
        if stats.epoch % 10 == 9 {
            println!("epoch {:>2}  lr {:.4}  loss {:.3e}", stats.epoch + 1, stats.lr, stats.loss);
        }
        Ok(())
    })?;

    let learned = state.network.apl_layers()[0].current.row(0);
    let sorted = |pairs: Vec<(f64, f64)>| {
        let mut p = pairs;
        p.sort_by(|l, r| l.1.total_cmp(&r.1));
        p
    };
    println!("generator (a, b): {:.3?}", sorted(task.generator.pairs().collect()));
    println!("learned   (a, b): {:.3?}", sorted(learned.pairs().collect()));
    let n = 1000;
    let mse = (0..n)
        .map(|i| {
            let x = -SYNTHETIC_RANGE + 2.0 * SYNTHETIC_RANGE * i as f64 / (n - 1) as f64;
            (learned.eval(x) - task.generator.eval(x)).powi(2)
        })
        .sum::<f64>()
        / n as f64;
    println!("grid MSE against the generator: {mse:.2e}");
    Ok(())
}
