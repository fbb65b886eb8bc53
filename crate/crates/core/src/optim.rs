//! SGD with momentum, weight decay and the L2 penalty on APL parameters,
//! plus resumable checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use crate::archive::{Archive, NamedTensor};
use crate::autodiff::{Gradients, ParamId};
use crate::error::{Error, Result};
use crate::layers::AplLayerParams;
use crate::network::{Network, ParamKind};
use crate::tensor::{Scalar, Tensor};

/// Coefficient of the L2 penalty on APL slopes and locations.
pub const DEFAULT_APL_PENALTY: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Decay applied to weights and biases.
    pub weight_decay: f64,
    /// Decay applied to APL `a` and `b` tensors.
    pub apl_penalty: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `(epoch, multiplier)` pairs with strictly increasing epochs; from each
    /// listed epoch on the learning rate is `lr × multiplier`. `None` means
    /// ×0.1 at 50% and ×0.01 at 75% of the epochs.
    pub lr_schedule: Option<Vec<(usize, f64)>>,
    pub seed: u64,
    /// Hold APL parameters at their initial values.
    pub freeze_apl: bool,
    /// Zero padding for random crop-and-flip augmentation of image
    /// batches; 0 disables it.
    pub augment_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            apl_penalty: DEFAULT_APL_PENALTY,
            batch_size: 64,
            epochs: 10,
            lr_schedule: None,
            seed: 0,
            freeze_apl: false,
            augment_pad: 0,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, as messages.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            errors.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errors.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            errors.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.apl_penalty.is_finite() && self.apl_penalty >= 0.0) {
            errors.push(format!("apl_penalty must be non-negative, got {}", self.apl_penalty));
        }
        if self.batch_size == 0 {
            errors.push("batch_size must be at least 1".into());
        }
        if let Some(s) = &self.lr_schedule {
            if s.windows(2).any(|w| w[0].0 >= w[1].0) {
                errors.push(format!("lr_schedule epochs must increase strictly: {s:?}"));
            }
            if s.iter().any(|&(_, m)| !(m.is_finite() && m >= 0.0)) {
                errors.push(format!("lr_schedule multipliers must be non-negative: {s:?}"));
            }
        }
        errors
    }

    pub fn schedule(&self) -> Vec<(usize, f64)> {
        if let Some(s) = &self.lr_schedule {
            return s.clone();
        }
        let at = |f: f64| (self.epochs as f64 * f).round() as usize;
        let mut s = vec![(at(0.5), 0.1), (at(0.75), 0.01)];
        s.dedup_by(|later, earlier| {
            let same = later.0 == earlier.0;
            if same {
                earlier.1 = later.1;
            }
            same
        });
        s
    }

    /// Learning rate in effect during `epoch` (counting from 0).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mult = self
            .schedule()
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map_or(1.0, |&(_, m)| m);
        self.lr * mult
    }
}

/// One momentum step on a single tensor:
/// `v ← μ·v − lr·(g + decay·θ)`, `θ ← θ + v`.
pub fn sgd_update<T: Scalar>(theta: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, decay: f64) {
    let (lr, mu, decay) = (T::of(lr), T::of(momentum), T::of(decay));
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v - lr * (g + decay * *t);
        *t += *v;
    }
}

/// `coeff / 2 · (Σa² + Σb²)`.
pub fn apl_penalty_loss<T: Scalar>(p: &AplLayerParams<T>, coeff: f64) -> T {
    let sq: T = p.a().data().iter().chain(p.b().data()).map(|&v| v * v).sum();
    T::of(coeff / 2.0) * sq
}

/// Momentum buffers, one per network parameter, and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T = f64> {
    velocity: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &Network<T>) -> Self {
        Self {
            velocity: net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Applies one update with learning rate `lr` from gradients keyed by
    /// `ParamId(i)` for parameter `i`. Nothing changes if any gradient is
    /// non-finite.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        let mut all = Vec::with_capacity(self.velocity.len());
        for (i, p) in net.params().iter().enumerate() {
            let g = grads.param(ParamId(i)).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: "gradient",
                    step: self.step,
                    tensor: p.name.clone(),
                });
            }
            all.push(g);
        }
        self.apply(net, &all, lr, cfg)
    }

    /// As [`Sgd::step`] with gradients given in parameter order.
    pub fn apply(&mut self, net: &mut Network<T>, grads: &[Tensor<T>], lr: f64, cfg: &TrainConfig) -> Result<()> {
        if grads.len() != net.params().len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                net.params().len()
            )));
        }
        for (p, g) in net.params().iter().zip(grads) {
            g.expect_shape(p.value.shape(), &format!("gradient of {}", p.name))?;
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: "gradient",
                    step: self.step,
                    tensor: p.name.clone(),
                });
            }
        }
        for ((p, g), v) in net.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let decay = match p.kind {
                ParamKind::AplSlope | ParamKind::AplLocation => {
                    if cfg.freeze_apl {
                        continue;
                    }
                    cfg.apl_penalty
                }
                ParamKind::Weight | ParamKind::Bias => cfg.weight_decay,
            };
            sgd_update(p.value.data_mut(), g.data(), v.data_mut(), lr, cfg.momentum, decay);
        }
        self.step += 1;
        Ok(())
    }
}

/// Model, optimiser state and position in the schedule.
#[derive(Debug, Clone)]
pub struct Checkpoint<T = f64> {
    pub network: Network<T>,
    pub optimizer: Sgd<T>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_archive(&self) -> Archive {
        let mut meta = self.metadata.clone();
        meta.insert("kind".into(), "checkpoint".into());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("step".into(), self.optimizer.step.to_string());
        let mut archive = self.network.to_archive(meta);
        for (p, v) in self.network.params().iter().zip(&self.optimizer.velocity) {
            archive.tensors.push(NamedTensor {
                name: format!("velocity/{}", p.name),
                shape: v.shape().to_vec(),
                data: v.to_f64_vec(),
            });
        }
        archive
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let network = Network::<T>::from_archive(archive)?;
        let number = |key: &str| -> Result<u64> {
            archive
                .metadata
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Model(format!("checkpoint lacks numeric `{key}`")))
        };
        let epoch = number("epoch")? as usize;
        let step = number("step")?;
        let mut velocity = Vec::new();
        for p in network.params() {
            let name = format!("velocity/{}", p.name);
            let t = archive
                .tensor(&name)
                .ok_or_else(|| Error::Model(format!("checkpoint lacks {name}")))?;
            let v = Tensor::from_f64(&t.shape, &t.data)?;
            v.expect_shape(p.value.shape(), &name)?;
            velocity.push(v);
        }
        let mut metadata = archive.metadata.clone();
        for k in ["kind", "epoch", "step"] {
            metadata.remove(k);
        }
        Ok(Self {
            network,
            optimizer: Sgd { velocity, step },
            epoch,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::layers::Mode;
    use crate::network::{ActivationKind, NetworkInit, NetworkSpec};

    #[test]
    fn update_rule_examples() {
        let (mut t, mut v) = ([1.0], [0.0]);
        sgd_update(&mut t, &[2.0], &mut v, 0.1, 0.0, 0.0);
        assert!((t[0] - 0.8f64).abs() < 1e-15);

        let (mut t, mut v) = ([1.5, -2.0], [0.3, 0.1]);
        sgd_update(&mut t, &[7.0, 8.0], &mut v, 0.0, 0.0, 0.5);
        assert_eq!(t, [1.5, -2.0]);

        let (mut t, mut v) = ([3.0], [0.0]);
        sgd_update(&mut t, &[0.0], &mut v, 1.0, 0.0, DEFAULT_APL_PENALTY);
        assert!((t[0] - 2.997f64).abs() < 1e-15);
    }

    #[test]
    fn penalty_loss_and_its_gradient() {
        let p = AplLayerParams::new(
            Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(apl_penalty_loss(&p, 0.0), 0.0);
        assert!((apl_penalty_loss(&p, 0.001) - 0.002f64).abs() < 1e-15);

        // Central difference of the penalty in `a` equals coeff·a.
        let h = 1e-5;
        let at = |a: f64| {
            let q = AplLayerParams::new(
                Tensor::new(vec![1, 1], vec![a]).unwrap(),
                Tensor::new(vec![1, 1], vec![0.7]).unwrap(),
            )
            .unwrap();
            apl_penalty_loss(&q, 0.001)
        };
        let num = (at(2.0 + h) - at(2.0 - h)) / (2.0 * h);
        assert!((num - 0.002f64).abs() < 1e-9);
    }

    #[test]
    fn default_schedule() {
        let cfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.schedule(), vec![(10, 0.1), (15, 0.01)]);
        assert_eq!(cfg.lr_at(9), 0.01);
        assert!((cfg.lr_at(10) - 0.001).abs() < 1e-18);
        assert!((cfg.lr_at(19) - 0.0001).abs() < 1e-18);
        assert_eq!(TrainConfig::default().apl_penalty, 0.001);
        let bad = TrainConfig {
            lr_schedule: Some(vec![(3, 0.1), (3, 0.01)]),
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(bad.validate().len(), 2);
    }

    fn tiny_net() -> Network<f64> {
        Network::new(
            NetworkSpec::mlp(3, &[4], 2, ActivationKind::apl(2)),
            NetworkInit::seeded(2),
        )
        .unwrap()
    }

    #[test]
    fn penalty_contracts_apl_parameters() {
        let mut net = tiny_net();
        let mut opt = Sgd::new(&net);
        let cfg = TrainConfig {
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let zeros: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let norm = |net: &Network<f64>| -> Vec<f64> {
            net.params()
                .iter()
                .filter(|p| p.kind.is_apl())
                .map(|p| p.value.data().iter().map(|v| v * v).sum())
                .collect()
        };
        let mut prev = norm(&net);
        for _ in 0..5 {
            opt.apply(&mut net, &zeros, 0.5, &cfg).unwrap();
            let now = norm(&net);
            assert!(now.iter().zip(&prev).all(|(n, p)| n < p));
            prev = now;
        }
    }

    #[test]
    fn frozen_apl_is_untouched_and_nan_aborts() {
        let mut net = tiny_net();
        let before = net.clone();
        let mut opt = Sgd::new(&net);
        let cfg = TrainConfig {
            freeze_apl: true,
            ..TrainConfig::default()
        };
        let ones: Vec<Tensor> = net.params().iter().map(|p| Tensor::ones(p.value.shape())).collect();
        opt.apply(&mut net, &ones, 0.1, &cfg).unwrap();
        for (p, q) in net.params().iter().zip(before.params()) {
            assert_eq!(p.value == q.value, p.kind.is_apl(), "{}", p.name);
        }

        let mut bad = ones.clone();
        bad[1].data_mut()[0] = f64::NAN;
        let snapshot = net.clone();
        match opt.apply(&mut net, &bad, 0.1, &cfg) {
            Err(Error::NonFinite { step: 1, tensor, .. }) => assert_eq!(tensor, "layer0.bias"),
            other => panic!("{other:?}"),
        }
        assert_eq!(net.params(), snapshot.params());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = tiny_net();
        let mut opt = Sgd::new(&net);
        let x = Tensor::from_f64(&[2, 3], &[0.1, -0.4, 0.9, 1.0, 0.2, -0.3]).unwrap();
        let mut tape = Tape::new();
        let y = net.forward(&mut tape, x, Mode::Train, 0).unwrap();
        let loss = tape.softmax_xent(y, &[0, 1]).unwrap();
        let g = tape.backward(loss).unwrap();
        opt.step(&mut net, &g, 0.1, &TrainConfig::default()).unwrap();
        let ck = Checkpoint {
            network: net,
            optimizer: opt,
            epoch: 3,
            metadata: BTreeMap::from([("seed".to_string(), "2".to_string())]),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.network.params(), ck.network.params());
        assert_eq!(back.metadata, ck.metadata);
    }
}
