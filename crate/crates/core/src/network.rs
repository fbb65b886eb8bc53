//! Network descriptions, parameter storage and the forward pass.
//!
//! A [`NetworkSpec`] is written as plain text, one layer per line:
//!
//! ```text
//! input 784
//! dense 128
//! activation apl 1
//! dropout 0.25
//! dense 10
//! ```
//!
//! Image inputs use `input C H W`. Layer lines are `dense <units>`,
//! `conv2d <filters> <kernel> <stride> <pad>`, `maxpool <kernel> <stride>`,
//! `avgpool <kernel> <stride>`, `dropout <rate>`, `flatten` and
//! `activation <kind>` with kind one of `relu`, `leaky_relu <k>`,
//! `apl <S> [shared|per_neuron]` or `maxout <K>`. Blank lines and text after
//! `#` are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::{Archive, NamedTensor};
use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, AplLayerParams, AplLayout, ConvGeometry, InitScheme, Mode, PoolGeometry};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

/// How APL parameters are shared over a convolutional feature map. Dense
/// layers always have one unit per feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AplSharing {
    /// One unit per channel, shared over spatial positions.
    #[default]
    Shared,
    /// One unit per channel and position.
    PerNeuron,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu(f64),
    Apl { hinges: usize, sharing: AplSharing },
    Maxout { pieces: usize },
}

impl ActivationKind {
    pub fn apl(hinges: usize) -> Self {
        Self::Apl {
            hinges,
            sharing: AplSharing::Shared,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Fully connected layer; flattens a feature-map input first.
    Dense { units: usize },
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Dropout { rate: f64 },
    Activation(ActivationKind),
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    AplSlope,
    AplLocation,
}

impl ParamKind {
    pub fn is_apl(self) -> bool {
        matches!(self, Self::AplSlope | Self::AplLocation)
    }
}

/// Name, role and shape of one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamShape {
    pub name: String,
    pub kind: ParamKind,
    pub layer: usize,
    pub shape: Vec<usize>,
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Relu => write!(f, "relu"),
            Self::LeakyRelu(k) => write!(f, "leaky_relu {k}"),
            Self::Apl { hinges, sharing } => {
                let s = match sharing {
                    AplSharing::Shared => "shared",
                    AplSharing::PerNeuron => "per_neuron",
                };
                write!(f, "apl {hinges} {s}")
            }
            Self::Maxout { pieces } => write!(f, "maxout {pieces}"),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dense { units } => write!(f, "dense {units}"),
            Self::Conv2d {
                filters,
                kernel,
                stride,
                pad,
            } => write!(f, "conv2d {filters} {kernel} {stride} {pad}"),
            Self::MaxPool { kernel, stride } => write!(f, "maxpool {kernel} {stride}"),
            Self::AvgPool { kernel, stride } => write!(f, "avgpool {kernel} {stride}"),
            Self::Dropout { rate } => write!(f, "dropout {rate}"),
            Self::Activation(kind) => write!(f, "activation {kind}"),
            Self::Flatten => write!(f, "flatten"),
        }
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input")?;
        for d in &self.input {
            write!(f, " {d}")?;
        }
        writeln!(f)?;
        for layer in &self.layers {
            writeln!(f, "{layer}")?;
        }
        Ok(())
    }
}

fn parse_num<N: FromStr>(word: Option<&str>, what: &str) -> std::result::Result<N, String> {
    let w = word.ok_or_else(|| format!("missing {what}"))?;
    w.parse().map_err(|_| format!("invalid {what} {w:?}"))
}

fn no_more<'a>(mut words: impl Iterator<Item = &'a str>) -> std::result::Result<(), String> {
    match words.next() {
        Some(w) => Err(format!("unexpected {w:?}")),
        None => Ok(()),
    }
}

fn parse_activation<'a>(
    mut words: impl Iterator<Item = &'a str>,
) -> std::result::Result<ActivationKind, String> {
    let kind = match words.next() {
        Some("relu") => ActivationKind::Relu,
        Some("leaky_relu") => {
            let k: f64 = parse_num(words.next(), "leaky slope")?;
            if !k.is_finite() {
                return Err(format!("leaky slope {k} is not finite"));
            }
            ActivationKind::LeakyRelu(k)
        }
        Some("apl") => {
            let hinges = parse_num(words.next(), "hinge count")?;
            let sharing = match words.next() {
                None | Some("shared") => AplSharing::Shared,
                Some("per_neuron") => AplSharing::PerNeuron,
                Some(w) => return Err(format!("unknown sharing {w:?}")),
            };
            ActivationKind::Apl { hinges, sharing }
        }
        Some("maxout") => {
            let pieces: usize = parse_num(words.next(), "piece count")?;
            if pieces == 0 {
                return Err("maxout needs at least one piece".into());
            }
            ActivationKind::Maxout { pieces }
        }
        Some(w) => return Err(format!("unknown activation {w:?}")),
        None => return Err("missing activation kind".into()),
    };
    no_more(words)?;
    Ok(kind)
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_activation(s.split_whitespace()).map_err(|e| Error::Config(vec![e]))
    }
}

fn parse_layer(line: &str) -> std::result::Result<LayerSpec, String> {
    let mut words = line.split_whitespace();
    let head = words.next().unwrap_or_default();
    let layer = match head {
        "dense" => LayerSpec::Dense {
            units: parse_num(words.next(), "unit count")?,
        },
        "conv2d" => LayerSpec::Conv2d {
            filters: parse_num(words.next(), "filter count")?,
            kernel: parse_num(words.next(), "kernel size")?,
            stride: parse_num(words.next(), "stride")?,
            pad: parse_num(words.next(), "padding")?,
        },
        "maxpool" | "avgpool" => {
            let kernel = parse_num(words.next(), "kernel size")?;
            let stride = parse_num(words.next(), "stride")?;
            if head == "maxpool" {
                LayerSpec::MaxPool { kernel, stride }
            } else {
                LayerSpec::AvgPool { kernel, stride }
            }
        }
        "dropout" => LayerSpec::Dropout {
            rate: parse_num(words.next(), "dropout rate")?,
        },
        "flatten" => LayerSpec::Flatten,
        "activation" => return parse_activation(words).map(LayerSpec::Activation),
        other => return Err(format!("unknown layer {other:?}")),
    };
    no_more(words)?;
    Ok(layer)
}

impl FromStr for NetworkSpec {
    type Err = Error;

    /// Parses the text form; every malformed line is reported at once.
    fn from_str(s: &str) -> Result<Self> {
        let mut errors = Vec::new();
        let mut input = None;
        let mut layers = Vec::new();
        for (i, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            if input.is_none() {
                let mut words = line.split_whitespace();
                if words.next() != Some("input") {
                    errors.push(format!("line {}: first layer line must be `input ...`", i + 1));
                    input = Some(Vec::new());
                    continue;
                }
                let dims: std::result::Result<Vec<usize>, _> = words.map(str::parse).collect();
                match dims {
                    Ok(d) if d.len() == 1 || d.len() == 3 => input = Some(d),
                    _ => {
                        errors.push(format!("line {}: input needs 1 or 3 positive extents", i + 1));
                        input = Some(Vec::new());
                    }
                }
                continue;
            }
            match parse_layer(line) {
                Ok(l) => layers.push(l),
                Err(e) => errors.push(format!("line {}: {e}", i + 1)),
            }
        }
        let Some(input) = input else {
            return Err(Error::Config(vec!["network spec is empty".into()]));
        };
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let spec = Self { input, layers };
        spec.shapes()?;
        Ok(spec)
    }
}

/// Units covered by one APL layer and how tensor elements map onto them.
fn apl_layout(shape: &[usize], sharing: AplSharing) -> AplLayout {
    match (shape, sharing) {
        ([c, h, w], AplSharing::Shared) => AplLayout {
            neurons: *c,
            inner: h * w,
        },
        _ => AplLayout::dense(shape.iter().product()),
    }
}

impl NetworkSpec {
    /// Multilayer perceptron `input → hidden… → classes` with `activation`
    /// after every hidden layer.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, activation: ActivationKind) -> Self {
        let mut layers = Vec::new();
        for &units in hidden {
            layers.push(LayerSpec::Dense { units });
            layers.push(LayerSpec::Activation(activation));
        }
        layers.push(LayerSpec::Dense { units: classes });
        Self {
            input: vec![input],
            layers,
        }
    }

    /// A copy with every activation layer replaced by `kind`.
    pub fn with_activation(&self, kind: ActivationKind) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Activation(_) => LayerSpec::Activation(kind),
                other => other.clone(),
            })
            .collect();
        Self {
            input: self.input.clone(),
            layers,
        }
    }

    /// Per-sample output shape after each layer, checking that adjacent
    /// layers compose.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let bad = |i: usize, msg: String| Error::Config(vec![format!("layer {i}: {msg}")]);
        if !(self.input.len() == 1 || self.input.len() == 3) || self.input.contains(&0) {
            return Err(Error::Config(vec![format!(
                "input shape {:?} must have 1 or 3 positive extents",
                self.input
            )]));
        }
        let mut shape = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(bad(i, "dense layer needs at least one unit".into()));
                    }
                    vec![units]
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    pad,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad(i, format!("conv2d needs a C×H×W input, got {shape:?}")));
                    };
                    let g = ConvGeometry {
                        in_channels: c,
                        height: h,
                        width: w,
                        out_channels: filters,
                        kernel,
                        stride,
                        pad,
                    };
                    g.validate().map_err(|e| bad(i, e.to_string()))?;
                    vec![filters, g.out_height(), g.out_width()]
                }
                LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad(i, format!("pooling needs a C×H×W input, got {shape:?}")));
                    };
                    let g = PoolGeometry {
                        channels: c,
                        height: h,
                        width: w,
                        kernel,
                        stride,
                    };
                    g.validate().map_err(|e| bad(i, e.to_string()))?;
                    vec![c, g.out_height(), g.out_width()]
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(bad(i, format!("dropout rate {rate} outside [0, 1)")));
                    }
                    shape
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Activation(ActivationKind::Maxout { pieces }) => {
                    if pieces == 0 || !shape[0].is_multiple_of(pieces) {
                        return Err(bad(
                            i,
                            format!("maxout {pieces} does not divide leading extent of {shape:?}"),
                        ));
                    }
                    let mut s = shape;
                    s[0] /= pieces;
                    s
                }
                LayerSpec::Activation(ActivationKind::LeakyRelu(k)) if !k.is_finite() => {
                    return Err(bad(i, format!("leaky slope {k} is not finite")));
                }
                LayerSpec::Activation(_) => shape,
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Every trainable tensor in creation order.
    pub fn parameter_shapes(&self) -> Result<Vec<ParamShape>> {
        let shapes = self.shapes()?;
        let mut params = Vec::new();
        let mut push = |layer: usize, suffix: &str, kind, shape: Vec<usize>| {
            params.push(ParamShape {
                name: format!("layer{layer}.{suffix}"),
                kind,
                layer,
                shape,
            })
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { &self.input } else { &shapes[i - 1] };
            match *layer {
                LayerSpec::Dense { units } => {
                    push(i, "weight", ParamKind::Weight, vec![input.iter().product(), units]);
                    push(i, "bias", ParamKind::Bias, vec![units]);
                }
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    push(i, "weight", ParamKind::Weight, vec![filters, input[0], kernel, kernel]);
                    push(i, "bias", ParamKind::Bias, vec![filters]);
                }
                LayerSpec::Activation(ActivationKind::Apl { hinges, sharing }) => {
                    let m = apl_layout(input, sharing).neurons;
                    push(i, "apl_a", ParamKind::AplSlope, vec![m, hinges]);
                    push(i, "apl_b", ParamKind::AplLocation, vec![m, hinges]);
                }
                _ => {}
            }
        }
        Ok(params)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .parameter_shapes()?
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum())
    }

    /// Total number of APL units `M` over all APL layers.
    pub fn apl_units(&self) -> Result<usize> {
        Ok(self
            .parameter_shapes()?
            .iter()
            .filter(|p| p.kind == ParamKind::AplSlope)
            .map(|p| p.shape[0])
            .sum())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input.clone()))
    }
}

/// A trainable tensor with its role. APL tensors keep a copy of their value
/// at initialisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f64> {
    pub name: String,
    pub kind: ParamKind,
    pub layer: usize,
    pub value: Tensor<T>,
    pub initial: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkInit {
    pub seed: u64,
    pub apl: InitScheme,
}

impl NetworkInit {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            apl: InitScheme::default(),
        }
    }
}

// Seed streams: weights and APL parameters draw from separate generators so
// that networks differing only in activation share their weights.
const WEIGHT_STREAM: u64 = 1;
const APL_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy)]
enum Step {
    Dense { w: usize, b: usize },
    Conv { w: usize, b: usize, geom: ConvGeometry },
    MaxPool(PoolGeometry),
    AvgPool(PoolGeometry),
    Dropout(f64),
    Relu,
    Leaky(f64),
    Apl { a: usize, b: usize, layout: AplLayout },
    Maxout(usize),
    Flatten(usize),
}

/// A network built from a [`NetworkSpec`], owning its parameters.
#[derive(Debug, Clone)]
pub struct Network<T = f64> {
    spec: NetworkSpec,
    params: Vec<Parameter<T>>,
    steps: Vec<Step>,
}

impl<T: Scalar> Network<T> {
    /// Builds the network with He-normal weights, zero biases and APL
    /// parameters drawn per `init.apl`.
    pub fn new(spec: NetworkSpec, init: NetworkInit) -> Result<Self> {
        let shapes = spec.parameter_shapes()?;
        let mut weight_rng = ChaCha8Rng::seed_from_u64(seed::derive(init.seed, WEIGHT_STREAM));
        let mut params = Vec::with_capacity(shapes.len());
        let mut iter = shapes.into_iter().peekable();
        while let Some(p) = iter.next() {
            match p.kind {
                ParamKind::Weight => {
                    // Dense weights are [in, out]; conv weights [O, C, k, k].
                    let fan_in = match p.shape[..] {
                        [inputs, _] => inputs,
                        _ => p.shape[1..].iter().product(),
                    };
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| Error::Internal(e.to_string()))?;
                    let len = p.shape.iter().product();
                    let data = (0..len).map(|_| T::of(normal.sample(&mut weight_rng))).collect();
                    params.push(Parameter {
                        value: Tensor::new(p.shape.clone(), data)?,
                        name: p.name,
                        kind: p.kind,
                        layer: p.layer,
                        initial: None,
                    });
                }
                ParamKind::Bias => params.push(Parameter {
                    value: Tensor::zeros(&p.shape),
                    name: p.name,
                    kind: p.kind,
                    layer: p.layer,
                    initial: None,
                }),
                ParamKind::AplSlope => {
                    let loc = iter
                        .next()
                        .filter(|q| q.kind == ParamKind::AplLocation)
                        .ok_or_else(|| Error::Internal("APL slope without location".into()))?;
                    let (m, s) = (p.shape[0], p.shape[1]);
                    let stream = seed::derive_path(init.seed, &[APL_STREAM, p.layer as u64]);
                    let (a, b) = layers::init_apl::<T>(m, s, stream, init.apl)?.into_parts();
                    for (shape, value) in [(p, a), (loc, b)] {
                        params.push(Parameter {
                            initial: Some(value.clone()),
                            value,
                            name: shape.name,
                            kind: shape.kind,
                            layer: shape.layer,
                        });
                    }
                }
                ParamKind::AplLocation => {
                    return Err(Error::Internal("APL location without slope".into()));
                }
            }
        }
        Self::assemble(spec, params)
    }

    fn assemble(spec: NetworkSpec, params: Vec<Parameter<T>>) -> Result<Self> {
        let shapes = spec.shapes()?;
        let index = |layer: usize, kind: ParamKind| -> Result<usize> {
            params
                .iter()
                .position(|p| p.layer == layer && p.kind == kind)
                .ok_or_else(|| Error::Internal(format!("layer {layer} lacks its {kind:?}")))
        };
        let mut steps = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = if i == 0 { &spec.input } else { &shapes[i - 1] };
            let pool = |kernel, stride| PoolGeometry {
                channels: input[0],
                height: input[1],
                width: input[2],
                kernel,
                stride,
            };
            steps.push(match *layer {
                LayerSpec::Dense { .. } => Step::Dense {
                    w: index(i, ParamKind::Weight)?,
                    b: index(i, ParamKind::Bias)?,
                },
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    pad,
                } => Step::Conv {
                    w: index(i, ParamKind::Weight)?,
                    b: index(i, ParamKind::Bias)?,
                    geom: ConvGeometry {
                        in_channels: input[0],
                        height: input[1],
                        width: input[2],
                        out_channels: filters,
                        kernel,
                        stride,
                        pad,
                    },
                },
                LayerSpec::MaxPool { kernel, stride } => Step::MaxPool(pool(kernel, stride)),
                LayerSpec::AvgPool { kernel, stride } => Step::AvgPool(pool(kernel, stride)),
                LayerSpec::Dropout { rate } => Step::Dropout(rate),
                LayerSpec::Flatten => Step::Flatten(input.iter().product()),
                LayerSpec::Activation(kind) => match kind {
                    ActivationKind::Relu => Step::Relu,
                    ActivationKind::LeakyRelu(k) => Step::Leaky(k),
                    ActivationKind::Maxout { pieces } => Step::Maxout(pieces),
                    ActivationKind::Apl { sharing, .. } => Step::Apl {
                        a: index(i, ParamKind::AplSlope)?,
                        b: index(i, ParamKind::AplLocation)?,
                        layout: apl_layout(input, sharing),
                    },
                },
            });
        }
        Ok(Self { spec, params, steps })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Current and initial parameters of every APL layer, by layer index.
    pub fn apl_layers(&self) -> Vec<AplLayerState<T>> {
        self.steps
            .iter()
            .enumerate()
            .filter_map(|(layer, step)| match *step {
                Step::Apl { a, b, .. } => {
                    let (pa, pb) = (&self.params[a], &self.params[b]);
                    let initial = |p: &Parameter<T>| p.initial.clone().unwrap_or_else(|| p.value.clone());
                    Some(AplLayerState {
                        layer,
                        current: AplLayerParams::new(pa.value.clone(), pb.value.clone()).ok()?,
                        initial: AplLayerParams::new(initial(pa), initial(pb)).ok()?,
                    })
                }
                _ => None,
            })
            .collect()
    }

    /// Records the forward pass of `input: [N, ...]` on `tape` and returns
    /// the output node. Parameter `i` is registered as `ParamId(i)`.
    /// Dropout masks derive from `dropout_seed` and the layer index.
    pub fn forward(&self, tape: &mut Tape<T>, input: Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<Var> {
        let batch = input.shape().first().copied().unwrap_or(0);
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.spec.input);
        let input = input.reshape(&shape).map_err(|_| {
            Error::shape(format!(
                "network input must be [N, {:?}], got {} values",
                self.spec.input,
                batch
            ))
        })?;
        let mut vars: Vec<Option<Var>> = vec![None; self.params.len()];
        let mut param = |tape: &mut Tape<T>, i: usize| -> Var {
            *vars[i].get_or_insert_with(|| tape.param(ParamId(i), self.params[i].value.clone()))
        };
        let mut x = tape.constant(input);
        for (layer, step) in self.steps.iter().enumerate() {
            x = match *step {
                Step::Dense { w, b } => {
                    if tape.value(x).rank() != 2 {
                        let width = tape.value(x).row_len();
                        x = tape.reshape(x, &[batch, width])?;
                    }
                    let (wv, bv) = (param(tape, w), param(tape, b));
                    let y = tape.matmul(x, wv)?;
                    tape.add_bias(y, bv)?
                }
                Step::Conv { w, b, geom } => {
                    let (wv, bv) = (param(tape, w), param(tape, b));
                    tape.conv2d(x, wv, bv, geom)?
                }
                Step::MaxPool(g) => tape.maxpool(x, g)?,
                Step::AvgPool(g) => tape.avgpool(x, g)?,
                Step::Dropout(rate) => {
                    if mode == Mode::Eval || rate == 0.0 {
                        x
                    } else {
                        let s = seed::derive_path(dropout_seed, &[DROPOUT_STREAM, layer as u64]);
                        let mask = layers::dropout_mask(tape.value(x).shape(), rate, s, mode)?;
                        tape.dropout(x, mask)?
                    }
                }
                Step::Relu => tape.relu(x),
                Step::Leaky(k) => tape.leaky_relu(x, T::of(k)),
                Step::Apl { a, b, layout } => {
                    let (av, bv) = (param(tape, a), param(tape, b));
                    tape.apl(x, av, bv, layout)?
                }
                Step::Maxout(k) => tape.maxout(x, k)?,
                Step::Flatten(width) => tape.reshape(x, &[batch, width])?,
            };
        }
        Ok(x)
    }

    /// Evaluation-mode outputs for `inputs: [N, ...]`, computed in chunks
    /// of `chunk` rows.
    pub fn predict(&self, inputs: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        let chunk = chunk.max(1);
        let mut out: Vec<T> = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(chunk) {
            let rows: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let mut tape = Tape::new();
            let y = self.forward(&mut tape, inputs.select_rows(&rows), Mode::Eval, 0)?;
            width = tape.value(y).row_len();
            out.extend_from_slice(tape.value(y).data());
        }
        if n == 0 {
            width = self.spec.output_shape()?.iter().product();
        }
        Tensor::new(vec![n, width], out)
    }

    /// Serialisable form: spec text, `metadata`, every parameter under its
    /// name and the initial APL tensors under `init/<name>`.
    pub fn to_archive(&self, metadata: BTreeMap<String, String>) -> Archive {
        let mut tensors: Vec<NamedTensor> = self
            .params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.to_f64_vec(),
            })
            .collect();
        for p in &self.params {
            if let Some(init) = &p.initial {
                tensors.push(NamedTensor {
                    name: format!("init/{}", p.name),
                    shape: init.shape().to_vec(),
                    data: init.to_f64_vec(),
                });
            }
        }
        Archive {
            spec: self.spec.to_string(),
            metadata,
            tensors,
        }
    }

    /// Rebuilds a network from [`Network::to_archive`] output. Extra
    /// tensors (such as optimiser state) are ignored.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let spec: NetworkSpec = archive.spec.parse()?;
        let mut params = Vec::new();
        for p in spec.parameter_shapes()? {
            let load = |name: &str| -> Result<Option<Tensor<T>>> {
                let Some(t) = archive.tensor(name) else {
                    return Ok(None);
                };
                if t.shape != p.shape {
                    return Err(Error::Model(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape, p.shape
                    )));
                }
                Tensor::from_f64(&t.shape, &t.data).map(Some)
            };
            let value = load(&p.name)?
                .ok_or_else(|| Error::Model(format!("archive lacks tensor {}", p.name)))?;
            let initial = if p.kind.is_apl() {
                Some(load(&format!("init/{}", p.name))?.unwrap_or_else(|| value.clone()))
            } else {
                None
            };
            params.push(Parameter {
                name: p.name,
                kind: p.kind,
                layer: p.layer,
                value,
                initial,
            });
        }
        Self::assemble(spec, params)
    }
}

/// Snapshot of one APL layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AplLayerState<T = f64> {
    /// Index of the activation layer within the network spec.
    pub layer: usize,
    pub current: AplLayerParams<T>,
    pub initial: AplLayerParams<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CONV_SPEC: &str = "\
input 1 8 8
conv2d 4 3 1 1   # same padding
activation apl 2
maxpool 2 2
dropout 0.25
conv2d 6 3 1 0
activation maxout 2
avgpool 2 1
flatten
dense 5
activation leaky_relu -0.05
dense 3
";

    #[test]
    fn text_round_trip_and_shapes() {
        let spec: NetworkSpec = CONV_SPEC.parse().unwrap();
        assert_eq!(spec.to_string().parse::<NetworkSpec>().unwrap(), spec);
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[0], vec![4, 8, 8]);
        assert_eq!(shapes[2], vec![4, 4, 4]);
        assert_eq!(shapes[4], vec![6, 2, 2]);
        assert_eq!(shapes[5], vec![3, 2, 2]);
        assert_eq!(shapes[6], vec![3, 1, 1]);
        assert_eq!(spec.output_shape().unwrap(), vec![3]);
        assert_eq!(spec.apl_units().unwrap(), 4);
    }

    #[test]
    fn parse_errors_are_collected() {
        let err = "input 4\ndense x\nwobble 3\nactivation apl 1 sideways\n"
            .parse::<NetworkSpec>()
            .unwrap_err();
        match err {
            Error::Config(lines) => assert_eq!(lines.len(), 3, "{lines:?}"),
            other => panic!("{other:?}"),
        }
        assert!("input 4\ndropout 1.0\n".parse::<NetworkSpec>().is_err());
        assert!("input 4\nconv2d 2 3 1 0\n".parse::<NetworkSpec>().is_err());
        assert!("input 6\nactivation maxout 4\n".parse::<NetworkSpec>().is_err());
    }

    #[test]
    fn weights_do_not_depend_on_activation() {
        let relu = NetworkSpec::mlp(6, &[5, 4], 3, ActivationKind::Relu);
        let apl = relu.with_activation(ActivationKind::apl(2));
        let a = Network::<f64>::new(relu, NetworkInit::seeded(9)).unwrap();
        let b = Network::<f64>::new(apl, NetworkInit::seeded(9)).unwrap();
        for p in a.params() {
            assert_eq!(&b.param(&p.name).unwrap().value, &p.value, "{}", p.name);
        }
        assert_eq!(b.parameter_count() - a.parameter_count(), 2 * 2 * 9);
    }

    #[test]
    fn zero_hinges_match_relu_bit_for_bit() {
        let relu = NetworkSpec::mlp(6, &[5, 4], 3, ActivationKind::Relu);
        let apl = relu.with_activation(ActivationKind::apl(0));
        let a = Network::<f64>::new(relu, NetworkInit::seeded(3)).unwrap();
        let b = Network::<f64>::new(apl, NetworkInit::seeded(3)).unwrap();
        let x = Tensor::from_f64(&[7, 6], &(0..42).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>()).unwrap();
        let run = |net: &Network<f64>| {
            let mut tape = Tape::new();
            let y = net.forward(&mut tape, x.clone(), Mode::Train, 1).unwrap();
            let loss = tape.softmax_xent(y, &[0, 1, 2, 0, 1, 2, 0]).unwrap();
            let g = tape.backward(loss).unwrap();
            let mut out = vec![tape.value(y).clone()];
            for (i, p) in net.params().iter().enumerate() {
                if !p.kind.is_apl() {
                    out.push(g.param(ParamId(i)).unwrap());
                }
            }
            out
        };
        let (ra, rb) = (run(&a), run(&b));
        assert_eq!(ra.len(), rb.len());
        for (p, q) in ra.iter().zip(&rb) {
            let pb: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u64> = q.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb);
        }
    }

    #[test]
    fn conv_net_forward_and_archive_round_trip() {
        let spec: NetworkSpec = CONV_SPEC.parse().unwrap();
        let net = Network::<f64>::new(spec, NetworkInit::seeded(4)).unwrap();
        let x = Tensor::from_f64(&[2, 64], &(0..128).map(|i| (i as f64 * 0.13).cos()).collect::<Vec<_>>()).unwrap();
        let y = net.predict(&x, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.all_finite());

        let mut meta = BTreeMap::new();
        meta.insert("note".into(), "x".into());
        let archive = net.to_archive(meta);
        assert!(archive.tensor("init/layer1.apl_a").is_some());
        let bytes = archive.to_bytes();
        let back = Archive::from_bytes(&bytes, std::path::Path::new("m")).unwrap();
        let net2 = Network::<f64>::from_archive(&back).unwrap();
        assert_eq!(net2.predict(&x, 2).unwrap(), y);
        assert_eq!(net2.params(), net.params());
    }

    #[test]
    fn per_neuron_sharing_counts_positions() {
        let spec: NetworkSpec = "input 2 3 3\nactivation apl 2 per_neuron\nflatten\ndense 1\n".parse().unwrap();
        assert_eq!(spec.apl_units().unwrap(), 18);
        let shared: NetworkSpec = "input 2 3 3\nactivation apl 2\nflatten\ndense 1\n".parse().unwrap();
        assert_eq!(shared.apl_units().unwrap(), 2);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let net = Network::<f64>::new(NetworkSpec::mlp(2, &[2], 2, ActivationKind::Relu), NetworkInit::seeded(0)).unwrap();
        let mut archive = net.to_archive(BTreeMap::new());
        archive.tensors.retain(|t| t.name != "layer0.bias");
        assert!(matches!(Network::<f64>::from_archive(&archive), Err(Error::Model(_))));
    }

    proptest! {
        #[test]
        fn apl_adds_two_s_m_parameters(
            hidden in prop::collection::vec(1usize..20, 1..4),
            input in 1usize..12,
            classes in 1usize..6,
            s in 0usize..6,
        ) {
            let relu = NetworkSpec::mlp(input, &hidden, classes, ActivationKind::Relu);
            let apl = relu.with_activation(ActivationKind::apl(s));
            let m: usize = hidden.iter().sum();
            prop_assert_eq!(apl.apl_units().unwrap(), m);
            prop_assert_eq!(apl.parameter_count().unwrap() - relu.parameter_count().unwrap(), 2 * s * m);
            let net = Network::<f64>::new(apl, NetworkInit::seeded(1)).unwrap();
            prop_assert_eq!(net.parameter_count() - relu.parameter_count().unwrap(), 2 * s * m);
        }
    }
}
