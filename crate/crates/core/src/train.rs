//! Minibatch training loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{augment_batch, Dataset, Targets};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::network::{Network, NetworkInit, NetworkSpec};
use crate::optim::{Checkpoint, Sgd, TrainConfig};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

const SHUFFLE_STREAM: u64 = 10;
const DROPOUT_STREAM: u64 = 11;
const AUGMENT_STREAM: u64 = 12;

/// Rows evaluated per forward pass in [`evaluate`].
pub const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch training loss over the epoch.
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Mean cross-entropy for classification, mean squared error for
    /// regression.
    pub loss: f64,
    /// Fraction of misclassified samples; `None` for regression.
    pub error_rate: Option<f64>,
}

/// Mean squared error between two equally shaped nodes.
pub fn mse<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Output and loss nodes for one batch of `data` rows.
pub fn batch_loss<T: Scalar>(
    net: &Network<T>,
    tape: &mut Tape<T>,
    inputs: Tensor<T>,
    targets: &Targets,
    rows: &[usize],
    mode: Mode,
    dropout_seed: u64,
) -> Result<(Var, Var)> {
    let y = net.forward(tape, inputs, mode, dropout_seed)?;
    let loss = match targets {
        Targets::Classes(labels) => {
            let l: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            tape.softmax_xent(y, &l)?
        }
        Targets::Values(v) => {
            let shape = tape.value(y).shape().to_vec();
            let t = tape.constant(v.select_rows(rows).cast().reshape(&shape)?);
            mse(tape, y, t)?
        }
    };
    Ok((y, loss))
}

/// A freshly initialised network with zero momentum at epoch 0.
pub fn initial_state<T: Scalar>(spec: NetworkSpec, init: NetworkInit) -> Result<Checkpoint<T>> {
    let network = Network::new(spec, init)?;
    Ok(Checkpoint {
        optimizer: Sgd::new(&network),
        network,
        epoch: 0,
        metadata: Default::default(),
    })
}

/// Trains `state` from its current epoch up to `cfg.epochs`, calling
/// `on_epoch` after each completed epoch.
///
/// Batch order, dropout masks and augmentation depend only on
/// `(cfg.seed, epoch, batch)`, so resuming from a checkpoint reproduces an
/// uninterrupted run exactly. On a non-finite loss or gradient the error is
/// returned and `state` holds the last finite parameters.
pub fn train<T: Scalar>(
    state: &mut Checkpoint<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Checkpoint<T>, &EpochStats) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let n = data.len();
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive_path(
            cfg.seed,
            &[SHUFFLE_STREAM, epoch as u64],
        )));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let path = [epoch as u64, b as u64];
            let mut inputs = data.inputs.select_rows(rows);
            if cfg.augment_pad > 0 && inputs.rank() == 4 {
                let s = seed::derive_path(cfg.seed, &[AUGMENT_STREAM, path[0], path[1]]);
                inputs = augment_batch(&inputs, cfg.augment_pad, s)?;
            }
            let dropout_seed = seed::derive_path(cfg.seed, &[DROPOUT_STREAM, path[0], path[1]]);
            let mut tape = Tape::new();
            let (_, loss) = batch_loss(
                &state.network,
                &mut tape,
                inputs.cast(),
                &data.targets,
                rows,
                Mode::Train,
                dropout_seed,
            )?;
            let value = tape.value(loss).item()?.as_f64();
            if let Some((_, op)) = tape.first_non_finite() {
                return Err(Error::NonFinite {
                    what: "activation",
                    step: state.optimizer.steps(),
                    tensor: format!("{op} output (loss {value})"),
                });
            }
            let grads = tape.backward(loss)?;
            state.optimizer.step(&mut state.network, &grads, lr, cfg)?;
            total += value;
            batches += 1;
        }
        state.epoch += 1;
        let stats = EpochStats {
            epoch,
            lr,
            loss: total / batches.max(1) as f64,
        };
        history.push(stats);
        on_epoch(state, &stats)?;
    }
    Ok(history)
}

/// Loss and error rate of `net` on `data` in evaluation mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset) -> Result<Metrics> {
    let n = data.len();
    if n == 0 {
        return Err(Error::domain("cannot evaluate on an empty dataset"));
    }
    let mut loss_sum = 0.0;
    let mut wrong = 0usize;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let mut tape = Tape::new();
        let inputs = data.inputs.select_rows(&rows).cast();
        let (y, loss) = batch_loss(net, &mut tape, inputs, &data.targets, &rows, Mode::Eval, 0)?;
        loss_sum += tape.value(loss).item()?.as_f64() * rows.len() as f64;
        if let Targets::Classes(labels) = &data.targets {
            let logits = tape.value(y);
            for (pred, &r) in logits.argmax_rows().iter().zip(&rows) {
                wrong += usize::from(*pred != labels[r]);
            }
        }
    }
    Ok(Metrics {
        loss: loss_sum / n as f64,
        error_rate: data.labels().map(|_| wrong as f64 / n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_pwl_task, Split};
    use crate::network::ActivationKind;

    fn blobs(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let centre = [(0.0, 1.0), (1.0, -1.0), (-1.0, -0.5)][c];
            xs.push(centre.0 + 0.3 * (rng.random::<f64>() - 0.5));
            xs.push(centre.1 + 0.3 * (rng.random::<f64>() - 0.5));
            labels.push(c);
        }
        Dataset::new(Tensor::new(vec![n, 2], xs).unwrap(), Targets::Classes(labels), Split::Train).unwrap()
    }

    fn spec() -> NetworkSpec {
        NetworkSpec::mlp(2, &[8], 3, ActivationKind::apl(2))
    }

    #[test]
    fn zero_epochs_is_initial_evaluation() {
        let data = blobs(30, 1);
        let mut state = initial_state::<f64>(spec(), NetworkInit::seeded(1)).unwrap();
        let before = evaluate(&state.network, &data).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&mut state, &data, &cfg, |_, _| Ok(())).unwrap().is_empty());
        assert_eq!(evaluate(&state.network, &data).unwrap(), before);
    }

    #[test]
    fn small_lr_loss_decreases_monotonically() {
        let data = blobs(100, 2);
        let mut state = initial_state::<f64>(spec(), NetworkInit::seeded(2)).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 100,
            epochs: 10,
            lr_schedule: Some(vec![]),
            ..TrainConfig::default()
        };
        let mut losses = vec![evaluate(&state.network, &data).unwrap().loss];
        train(&mut state, &data, &cfg, |s, _| {
            losses.push(evaluate(&s.network, &data)?.loss);
            Ok(())
        })
        .unwrap();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn learns_blobs() {
        let data = blobs(150, 3);
        let mut state = initial_state::<f64>(spec(), NetworkInit::seeded(3)).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 10,
            epochs: 20,
            ..TrainConfig::default()
        };
        train(&mut state, &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(evaluate(&state.network, &data).unwrap().error_rate, Some(0.0));
    }

    #[test]
    fn resume_is_bit_identical() {
        let data = blobs(60, 4);
        let full_spec: NetworkSpec = "input 2\ndense 8\nactivation apl 1\ndropout 0.3\ndense 3\n".parse().unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut a = initial_state::<f64>(full_spec.clone(), NetworkInit::seeded(5)).unwrap();
        train(&mut a, &data, &cfg, |_, _| Ok(())).unwrap();

        // Stop the same run after two epochs and resume from the bytes.
        let mut b = initial_state::<f64>(full_spec, NetworkInit::seeded(5)).unwrap();
        let mut saved = None;
        train(&mut b, &data, &cfg, |s, st| {
            if st.epoch == 1 {
                saved = Some(s.to_archive().to_bytes());
                return Err(Error::Usage("stop".into()));
            }
            Ok(())
        })
        .unwrap_err();
        let archive = crate::archive::Archive::from_bytes(&saved.unwrap(), std::path::Path::new("c")).unwrap();
        let mut resumed = Checkpoint::<f64>::from_archive(&archive).unwrap();
        assert_eq!(resumed.epoch, 2);
        train(&mut resumed, &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.network.params(), a.network.params());
        assert_eq!(resumed.optimizer, a.optimizer);
    }

    #[test]
    fn non_finite_loss_keeps_last_finite_state() {
        let data = blobs(20, 5);
        let mut state = initial_state::<f64>(spec(), NetworkInit::seeded(6)).unwrap();
        let cfg = TrainConfig {
            lr: 1e6,
            momentum: 0.0,
            epochs: 50,
            batch_size: 20,
            lr_schedule: Some(vec![]),
            ..TrainConfig::default()
        };
        let err = train(&mut state, &data, &cfg, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err:?}");
        assert!(state.network.params().iter().all(|p| p.value.all_finite()));
    }

    #[test]
    fn regression_uses_mse() {
        let task = gen_synthetic_pwl_task(40, 1, 0.0, 1).unwrap();
        let net = Network::<f64>::new(
            "input 1\nactivation apl 1\n".parse().unwrap(),
            NetworkInit::seeded(0),
        )
        .unwrap();
        let m = evaluate(&net, &task.dataset).unwrap();
        assert_eq!(m.error_rate, None);
        let Targets::Values(y) = &task.dataset.targets else { panic!() };
        let pred = net.predict(&task.dataset.inputs, 7).unwrap();
        let direct: f64 = pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / 40.0;
        assert!((m.loss - direct).abs() < 1e-12);
    }
}
