//! A small convolutional network with per-channel APL units trained on
//! MNIST in single precision, checkpointed halfway and resumed.
//!
//! Crop-and-flip augmentation (`augment_pad`) is left off: mirrored digits
//! are different digits.
//!
//! `cargo run --release --example conv_net`

use std::path::Path;

use aplnet::data::{mean_subtract, Manifest, Split};
use aplnet::network::{NetworkInit, NetworkSpec};
use aplnet::optim::{Checkpoint, TrainConfig};
use aplnet::train::{evaluate, initial_state, train};

const SPEC: &str = "
input 1 28 28
conv2d 8 5 1 2
activation apl 2
maxpool 2 2
conv2d 16 5 1 2
activation apl 2
maxpool 2 2
dense 10
";

fn main() -> aplnet::error::Result<()> {
    let manifest = Manifest::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mnist/mnist.manifest"))?;
    let mut train_set = manifest.load_split(Split::Train)?.sample(2000, 0);
    let mut test_set = manifest.load_split(Split::Test)?.sample(1000, 0);
    mean_subtract(&mut train_set, &mut [&mut test_set])?;

    let spec: NetworkSpec = SPEC.parse()?;
    println!("{} parameters, {} of them in APL units", spec.parameter_count()?, {
        let relu = spec.with_activation(aplnet::network::ActivationKind::Relu);
        spec.parameter_count()? - relu.parameter_count()?
    });
    let cfg = TrainConfig {
        lr: 0.02,
        epochs: 4,
        batch_size: 50,
        ..TrainConfig::default()
    };
    let path = std::env::temp_dir().join("aplnet-conv.ckpt");
    let mut state = initial_state::<f32>(spec, NetworkInit::seeded(1))?;
    let halfway = TrainConfig { epochs: 2, ..cfg.clone() };
    train(&mut state, &train_set, &halfway, |s, stats| {
        println!("epoch {}  loss {:.4}", stats.epoch + 1, stats.loss);
        s.save(&path)
    })?;

    let mut resumed = Checkpoint::<f32>::load(&path)?;
    train(&mut resumed, &train_set, &cfg, |_, stats| {
        println!("epoch {}  loss {:.4} (resumed)", stats.epoch + 1, stats.loss);
        Ok(())
    })?;
    let m = evaluate(&resumed.network, &test_set)?;
    println!("test error {:.4}", m.error_rate.unwrap_or(f64::NAN));
    Ok(())
}
