//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and whatever
//! the backward rule needs. Nodes only reference earlier nodes, so the tape
//! order is a topological order and [`Tape::backward`] walks it in reverse,
//! accumulating each node's gradient completely before propagating it.

use crate::error::{Error, Result};
use crate::layers::{self, AplLayout, ConvGeometry, PoolGeometry};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a trainable parameter; gradients are reported per id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Apl {
        x: Var,
        a: Var,
        b: Var,
        layout: AplLayout,
    },
    Maxout {
        x: Var,
        winners: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Tensor<T>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        geom: ConvGeometry,
        columns: Vec<T>,
    },
    MaxPool {
        x: Var,
        winners: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeometry,
    },
    Reshape(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Apl { .. } => "apl",
            Op::Maxout { .. } => "maxout",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool",
            Op::AvgPool { .. } => "avgpool",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Reshape(x)
            | Op::Maxout { x, .. }
            | Op::Dropout { x, .. }
            | Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. } => vec![*x],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::Apl { x, a, b, .. } => vec![*x, *a, *b],
            Op::Conv2d { x, w, bias, .. } => vec![*x, *w, *bias],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A single-threaded recording of one forward pass.
pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    kinks: Option<Vec<f64>>,
    first_non_finite: Option<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            kinks: None,
            first_non_finite: None,
        }
    }

    /// A tape that also records, for every non-smooth operation, the signed
    /// distance of each input to the nearest kink of that operation. Used by
    /// the gradient oracle to skip coordinates whose perturbation lands on a
    /// kink.
    pub fn with_kink_tracking() -> Self {
        Self {
            kinks: Some(Vec::new()),
            ..Self::new()
        }
    }

    pub fn kink_offsets(&self) -> &[f64] {
        self.kinks.as_deref().unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// The earliest node whose value contains NaN or an infinity, with the
    /// name of the operation that produced it.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.first_non_finite.map(|i| (Var(i), self.nodes[i].op.name()))
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(op.inputs().iter().all(|v| v.0 < self.nodes.len()));
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    /// Adds `bias: [M]` to every leading-axis row of `x: [N, M]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || xv.row_len() != bv.len() {
            return Err(Error::shape(format!(
                "bias {:?} does not broadcast over {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut y = xv.clone();
        let width = bv.len().max(1);
        for row in y.data_mut().chunks_mut(width) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        Ok(self.push(y, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = Tensor::scalar(xv.sum() / T::of(xv.len() as f64));
        self.push(y, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    fn note_kinks(&mut self, f: impl FnOnce(&[Node<T>], &mut Vec<f64>)) {
        if let Some(mut kinks) = self.kinks.take() {
            f(&self.nodes, &mut kinks);
            self.kinks = Some(kinks);
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.note_kinks(|n, k| k.extend(n[x.0].value.data().iter().map(|v| v.as_f64())));
        let y = layers::relu_forward(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, k: T) -> Var {
        self.note_kinks(|n, out| out.extend(n[x.0].value.data().iter().map(|v| v.as_f64())));
        let y = layers::leaky_relu_forward(self.value(x), k);
        self.push(y, Op::LeakyRelu(x, k))
    }

    /// APL activation with hinge slopes `a` and locations `b` (both `[M, S]`).
    pub fn apl(&mut self, x: Var, a: Var, b: Var, layout: AplLayout) -> Result<Var> {
        let y = layers::apl_forward_with(self.value(x), self.value(a), self.value(b), layout)?;
        self.note_kinks(|n, k| layers::apl_kink_offsets(&n[x.0].value, &n[b.0].value, layout, k));
        Ok(self.push(y, Op::Apl { x, a, b, layout }))
    }

    pub fn maxout(&mut self, x: Var, pieces: usize) -> Result<Var> {
        let (y, winners) = layers::maxout_forward_indexed(self.value(x), pieces)?;
        self.note_kinks(|n, k| {
            let xv = &n[x.0].value;
            layers::max_margins(xv.data(), layers::maxout_groups(xv.shape(), pieces), k)
        });
        Ok(self.push(y, Op::Maxout { x, winners }))
    }

    /// Multiplies by a precomputed dropout mask.
    pub fn dropout(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        let y = self.value(x).zip_map(&mask, |v, m| v * m)?;
        Ok(self.push(y, Op::Dropout { x, mask }))
    }

    /// Mean softmax cross-entropy over the batch; a `[1]` scalar node.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = layers::softmax_xent(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let fwd = layers::conv2d_forward(self.value(x), self.value(w), self.value(bias), geom)?;
        Ok(self.push(
            fwd.output,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                columns: fwd.columns,
            },
        ))
    }

    pub fn maxpool(&mut self, x: Var, geom: PoolGeometry) -> Result<Var> {
        let (y, winners) = layers::maxpool_forward(self.value(x), geom)?;
        self.note_kinks(|n, k| {
            let xv = &n[x.0].value;
            layers::max_margins(xv.data(), layers::pool_groups(geom, xv.dim(0)).into_iter(), k)
        });
        Ok(self.push(y, Op::MaxPool { x, winners }))
    }

    pub fn avgpool(&mut self, x: Var, geom: PoolGeometry) -> Result<Var> {
        let y = layers::avgpool_forward(self.value(x), geom)?;
        Ok(self.push(y, Op::AvgPool { x, geom }))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let inputs = node.op.inputs();
            if inputs.iter().any(|v| v.0 >= i) {
                return Err(Error::Internal(format!(
                    "node {i} depends on a later node; the tape is not acyclic"
                )));
            }
            for (input, contribution) in self.backward_rule(node, &g)? {
                accumulate(&mut grads[input.0], contribution)?;
            }
            grads[i] = Some(g);
        }

        let shapes = self
            .params
            .iter()
            .map(|&(id, v)| (id, v, self.value(v).shape().to_vec()))
            .collect();
        Ok(Gradients { grads, params: shapes })
    }

    fn backward_rule(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(1));
                let mut da = Tensor::zeros(av.shape());
                T::gemm(n, m, k, g.data(), false, bv.data(), true, T::zero(), da.data_mut());
                let mut db = Tensor::zeros(bv.shape());
                T::gemm(k, n, m, av.data(), true, g.data(), false, T::zero(), db.data_mut());
                vec![(*a, da), (*b, db)]
            }
            Op::AddBias(x, bias) => {
                let width = val(*bias).len();
                let mut db = Tensor::zeros(val(*bias).shape());
                for row in g.data().chunks(width.max(1)) {
                    for (d, &v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*x, g.clone()), (*bias, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |d, q| d * q)?),
                (*b, g.zip_map(val(*a), |d, p| d * p)?),
            ],
            Op::Scale(x, f) => vec![(*x, g.map(|v| v * *f))],
            Op::Sum(x) => {
                let d = g.item()?;
                vec![(*x, Tensor::full(val(*x).shape(), d))]
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let d = g.item()? / T::of(xv.len() as f64);
                vec![(*x, Tensor::full(xv.shape(), d))]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape())?)],
            Op::Relu(x) => vec![(*x, layers::relu_backward(val(*x), g)?)],
            Op::LeakyRelu(x, k) => vec![(*x, layers::leaky_relu_backward(val(*x), *k, g)?)],
            Op::Apl { x, a, b, layout } => {
                let gr = layers::apl_backward_with(val(*x), val(*a), val(*b), *layout, g)?;
                vec![(*x, gr.dx), (*a, gr.da), (*b, gr.db)]
            }
            Op::Maxout { x, winners } | Op::MaxPool { x, winners } => {
                vec![(*x, layers::scatter_winners(val(*x).shape(), winners, g))]
            }
            Op::Dropout { x, mask } => vec![(*x, g.zip_map(mask, |d, m| d * m)?)],
            Op::SoftmaxXent { logits, labels, probs } => {
                vec![(*logits, layers::softmax_xent_backward(probs, labels, g.item()?))]
            }
            Op::Conv2d { x, w, bias, geom, columns } => {
                let gr = layers::conv2d_backward(val(*w), columns, *geom, g)?;
                vec![(*x, gr.dx), (*w, gr.dw), (*bias, gr.dbias)]
            }
            Op::AvgPool { x, geom } => vec![(*x, layers::avgpool_backward(*geom, g)?)],
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&contribution),
        None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T = f64> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var, Vec<usize>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node; zeros if the loss does not depend
    /// on it.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.grads
            .get(v.0)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Gradient for a parameter, summed over every place it was used on the
    /// tape. Unused or unregistered parameters get `None`.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut total: Option<Tensor<T>> = None;
        for (pid, v, shape) in &self.params {
            if *pid != id {
                continue;
            }
            let g = self.wrt(*v, shape);
            match total.as_mut() {
                Some(t) => t.add_assign(&g).ok()?,
                None => total = Some(g),
            }
        }
        total
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params.iter().map(|p| p.0).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// One evaluation of the function under a gradient check: its value and the
/// kink offsets recorded while computing it (see
/// [`Tape::with_kink_tracking`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub kinks: Vec<f64>,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Self {
            value,
            kinks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// A coordinate is excluded when a kink offset it moves is closer than
    /// this to zero at `θ` or `θ ± step`.
    pub kink_tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            kink_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - central_i| / max(1, |analytic_i| + |central_i|)`
    /// over the coordinates that were not excluded.
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because their perturbation touched a kink.
    pub excluded: Vec<usize>,
}

/// Compares `analytic` against central differences of `f` at `theta`.
pub fn finite_diff_check<F>(
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    if options.step.is_nan() || options.step <= 0.0 {
        return Err(Error::Oracle(format!("step must be positive, got {}", options.step)));
    }
    if theta.len() != analytic.len() {
        return Err(Error::Oracle(format!(
            "{} coordinates but {} analytic partials",
            theta.len(),
            analytic.len()
        )));
    }
    let mut eval = |point: &[f64]| -> Result<Probe> {
        let probe = f(point)?;
        if !probe.value.is_finite() {
            return Err(Error::Oracle(format!("function value {} is not finite", probe.value)));
        }
        Ok(probe)
    };
    let base = eval(theta)?;
    let mut point = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        checked: 0,
        excluded: Vec::new(),
    };
    for i in 0..theta.len() {
        point[i] = theta[i] + options.step;
        let plus = eval(&point)?;
        point[i] = theta[i] - options.step;
        let minus = eval(&point)?;
        point[i] = theta[i];

        if plus.kinks.len() != base.kinks.len() || minus.kinks.len() != base.kinks.len() {
            return Err(Error::Oracle(
                "kink offsets changed length between evaluations".into(),
            ));
        }
        let near_kink = (0..base.kinks.len()).any(|j| {
            let (o, p, m) = (base.kinks[j], plus.kinks[j], minus.kinks[j]);
            (o != p || o != m) && o.abs().min(p.abs()).min(m.abs()) < options.kink_tolerance
        });
        if near_kink {
            report.excluded.push(i);
            continue;
        }
        let central = (plus.value - minus.value) / (2.0 * options.step);
        let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs()).max(1.0);
        report.checked += 1;
        if report.worst_coordinate.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = Some(i);
        }
    }
    Ok(report)
}
