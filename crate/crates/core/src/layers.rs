//! Forward and backward kernels for the layer types, with the adaptive
//! piecewise linear (APL) activation at the centre.
//!
//! An APL unit `i` computes
//!
//! ```text
//! h_i(x) = max(0, x) + sum_s a[i][s] * max(0, -x + b[i][s])
//! ```
//!
//! with `S` hinges per unit. The slopes `a` and locations `b` of a layer of
//! `M` units are stored as two `[M, S]` tensors, so the layer adds exactly
//! `2·S·M` trainable parameters.
//!
//! Kinks use strict indicators: the derivative of `max(0, x)` is 0 at
//! `x = 0` and the hinge `max(0, -x + b)` is inactive at `x = b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pwl::AplParams1D;
use crate::tensor::{Scalar, Tensor};

#[inline]
pub(crate) fn relu<T: Scalar>(x: T) -> T {
    x.max(T::zero())
}

/// How activation tensor elements map onto APL units.
///
/// A tensor is viewed as `[outer, neurons, inner]`; every element in a
/// `(neurons, inner)` slab column shares the unit of its `neurons` index.
/// A dense layer has `inner = 1`; a feature map with per-channel units has
/// `neurons = C` and `inner = H·W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AplLayout {
    pub neurons: usize,
    pub inner: usize,
}

impl AplLayout {
    pub fn dense(neurons: usize) -> Self {
        Self { neurons, inner: 1 }
    }

    fn check(&self, len: usize) -> Result<usize> {
        let slab = self.neurons * self.inner;
        if slab == 0 || !len.is_multiple_of(slab) {
            return Err(Error::shape(format!(
                "{len} activations do not tile into {} units × {} positions",
                self.neurons, self.inner
            )));
        }
        Ok(len / slab)
    }
}

/// Hinge slopes `a` and locations `b` for a layer of `M` APL units.
#[derive(Debug, Clone, PartialEq)]
pub struct AplLayerParams<T = f64> {
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Scalar> AplLayerParams<T> {
    pub fn new(a: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        if a.rank() != 2 || a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "APL slopes {:?} and locations {:?} must both be [M, S]",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b })
    }

    /// A layer of `neurons` plain rectifiers.
    pub fn relu(neurons: usize) -> Self {
        Self {
            a: Tensor::zeros(&[neurons, 0]),
            b: Tensor::zeros(&[neurons, 0]),
        }
    }

    pub fn from_rows(rows: &[AplParams1D]) -> Result<Self> {
        let hinges = rows.first().map_or(0, AplParams1D::hinges);
        if rows.iter().any(|r| r.hinges() != hinges) {
            return Err(Error::shape("APL rows with different hinge counts"));
        }
        let a: Vec<f64> = rows.iter().flat_map(|r| r.a().to_vec()).collect();
        let b: Vec<f64> = rows.iter().flat_map(|r| r.b().to_vec()).collect();
        Self::new(
            Tensor::from_f64(&[rows.len(), hinges], &a)?,
            Tensor::from_f64(&[rows.len(), hinges], &b)?,
        )
    }

    pub fn neurons(&self) -> usize {
        self.a.dim(0)
    }

    pub fn hinges(&self) -> usize {
        self.a.dim(1)
    }

    pub fn a(&self) -> &Tensor<T> {
        &self.a
    }

    pub fn b(&self) -> &Tensor<T> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor<T> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor<T> {
        &mut self.b
    }

    pub fn into_parts(self) -> (Tensor<T>, Tensor<T>) {
        (self.a, self.b)
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.neurons() * self.hinges()
    }

    /// Hinges of unit `i` as a standalone single-unit function.
    pub fn row(&self, i: usize) -> AplParams1D {
        AplParams1D::new(self.a.row(i).iter().map(|v| v.as_f64()).collect(), self.b.row(i).iter().map(|v| v.as_f64()).collect())
            .expect("layer parameters are finite and paired")
    }
}

/// Distribution of freshly initialised hinge parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScheme {
    /// Bounds of the uniform draw for every slope `a`.
    pub slope_range: (f64, f64),
    /// Bounds of the uniform draw for every location `b`.
    pub location_range: (f64, f64),
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            slope_range: (-0.25, 0.25),
            location_range: (-1.0, 1.0),
        }
    }
}

/// Random hinge parameters for `neurons` units with `hinges` hinges each,
/// drawn uniformly per [`InitScheme`] from a generator seeded by `seed`.
pub fn init_apl<T: Scalar>(
    neurons: usize,
    hinges: usize,
    seed: u64,
    scheme: InitScheme,
) -> Result<AplLayerParams<T>> {
    if neurons == 0 {
        return Err(Error::domain("an APL layer needs at least one unit"));
    }
    let ranges = [scheme.slope_range, scheme.location_range];
    if ranges.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
        return Err(Error::domain(format!("invalid init ranges {scheme:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |(lo, hi): (f64, f64)| -> T { T::of(lo + (hi - lo) * rng.random::<f64>()) };
    let count = neurons * hinges;
    let mut a = Vec::with_capacity(count);
    let mut b = Vec::with_capacity(count);
    for _ in 0..count {
        a.push(draw(scheme.slope_range));
        b.push(draw(scheme.location_range));
    }
    AplLayerParams::new(
        Tensor::new(vec![neurons, hinges], a)?,
        Tensor::new(vec![neurons, hinges], b)?,
    )
}

fn dense_layout<T: Scalar>(x: &Tensor<T>, neurons: usize) -> Result<AplLayout> {
    if x.rank() != 2 || x.dim(1) != neurons {
        return Err(Error::shape(format!(
            "APL input {:?} does not match {neurons} units",
            x.shape()
        )));
    }
    Ok(AplLayout::dense(neurons))
}

/// Applies each unit's hinge function to its column of `x: [batch, M]`.
pub fn apl_forward<T: Scalar>(x: &Tensor<T>, p: &AplLayerParams<T>) -> Result<Tensor<T>> {
    let layout = dense_layout(x, p.neurons())?;
    apl_forward_with(x, p.a(), p.b(), layout)
}

pub fn apl_forward_with<T: Scalar>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    layout: AplLayout,
) -> Result<Tensor<T>> {
    let outer = layout.check(x.len())?;
    check_hinge_shape(a, b, layout)?;
    let hinges = a.dim(1);
    let (a, b) = (a.data(), b.data());
    let mut y = x.clone();
    let out = y.data_mut();
    let mut idx = 0;
    for _ in 0..outer {
        for n in 0..layout.neurons {
            let (an, bn) = (&a[n * hinges..(n + 1) * hinges], &b[n * hinges..(n + 1) * hinges]);
            for _ in 0..layout.inner {
                let v = out[idx];
                let mut h = relu(v);
                for (&a_s, &b_s) in an.iter().zip(bn) {
                    h += a_s * relu(-v + b_s);
                }
                out[idx] = h;
                idx += 1;
            }
        }
    }
    Ok(y)
}

fn check_hinge_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, layout: AplLayout) -> Result<()> {
    if a.rank() != 2 || a.shape() != b.shape() || a.dim(0) != layout.neurons {
        return Err(Error::shape(format!(
            "hinge tensors {:?}/{:?} do not fit {} units",
            a.shape(),
            b.shape(),
            layout.neurons
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AplGrads<T = f64> {
    pub dx: Tensor<T>,
    pub da: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn apl_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &AplLayerParams<T>,
    dy: &Tensor<T>,
) -> Result<AplGrads<T>> {
    let layout = dense_layout(x, p.neurons())?;
    apl_backward_with(x, p.a(), p.b(), layout, dy)
}

pub fn apl_backward_with<T: Scalar>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    layout: AplLayout,
    dy: &Tensor<T>,
) -> Result<AplGrads<T>> {
    let outer = layout.check(x.len())?;
    check_hinge_shape(a, b, layout)?;
    dy.expect_shape(x.shape(), "APL upstream gradient")?;
    let hinges = a.dim(1);
    let mut dx = Tensor::zeros(x.shape());
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(a.shape());
    let (av, bv, xv, dyv) = (a.data(), b.data(), x.data(), dy.data());
    let (dxv, dav, dbv) = (dx.data_mut(), da.data_mut(), db.data_mut());
    let mut idx = 0;
    for _ in 0..outer {
        for n in 0..layout.neurons {
            let row = n * hinges..(n + 1) * hinges;
            for _ in 0..layout.inner {
                let (v, g) = (xv[idx], dyv[idx]);
                let mut slope = if v > T::zero() { T::one() } else { T::zero() };
                for s in row.clone() {
                    if v < bv[s] {
                        slope -= av[s];
                        dav[s] += g * (-v + bv[s]);
                        dbv[s] += g * av[s];
                    }
                }
                dxv[idx] = g * slope;
                idx += 1;
            }
        }
    }
    Ok(AplGrads { dx, da, db })
}

/// Signed distances from every pre-activation to each of its unit's kinks
/// (0 and every `b_s`), appended to `out`.
pub(crate) fn apl_kink_offsets<T: Scalar>(
    x: &Tensor<T>,
    b: &Tensor<T>,
    layout: AplLayout,
    out: &mut Vec<f64>,
) {
    let hinges = b.dim(1);
    let bv = b.data();
    for (idx, &v) in x.data().iter().enumerate() {
        let n = (idx / layout.inner) % layout.neurons;
        out.push(v.as_f64());
        for &b_s in &bv[n * hinges..(n + 1) * hinges] {
            out.push((v - b_s).as_f64());
        }
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(relu)
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dy, |v, g| {
        let slope = if v > T::zero() { T::one() } else { T::zero() };
        g * slope
    })
}

/// `x` for positive inputs and `k·x` otherwise.
pub fn leaky_relu_forward<T: Scalar>(x: &Tensor<T>, k: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { k * v })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, k: T, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { g * k })
}

/// Channel geometry for maxout: axis 1 of `x` holds `units · pieces`
/// channels, grouped contiguously per output unit.
fn maxout_geometry(shape: &[usize], pieces: usize) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 || pieces == 0 || !shape[1].is_multiple_of(pieces) {
        return Err(Error::shape(format!(
            "maxout with {pieces} pieces over input {shape:?}"
        )));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1] / pieces, inner))
}

/// Maximum over each group of `pieces` consecutive channels of
/// `x: [batch, pieces·M, ...]`, giving `[batch, M, ...]`.
pub fn maxout_forward<T: Scalar>(x: &Tensor<T>, pieces: usize) -> Result<Tensor<T>> {
    Ok(maxout_forward_indexed(x, pieces)?.0)
}

/// Maxout output plus the flat input index that won each output element.
pub(crate) fn maxout_forward_indexed<T: Scalar>(
    x: &Tensor<T>,
    pieces: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (outer, units, inner) = maxout_geometry(x.shape(), pieces)?;
    let mut shape = x.shape().to_vec();
    shape[1] = units;
    let xv = x.data();
    let mut data = Vec::with_capacity(outer * units * inner);
    let mut winners = Vec::with_capacity(data.capacity());
    for o in 0..outer {
        for u in 0..units {
            for i in 0..inner {
                let base = (o * units * pieces + u * pieces) * inner + i;
                let mut best = base;
                for p in 1..pieces {
                    let idx = base + p * inner;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                data.push(xv[best]);
                winners.push(best);
            }
        }
    }
    Ok((Tensor::new(shape, data)?, winners))
}

pub(crate) fn scatter_winners<T: Scalar>(
    input_shape: &[usize],
    winners: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let dxv = dx.data_mut();
    for (&w, &g) in winners.iter().zip(dy.data()) {
        dxv[w] += g;
    }
    dx
}

/// Mean cross-entropy of row-wise softmax over `logits: [batch, C]`,
/// together with the softmax probabilities.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() || logits.dim(0) == 0 {
        return Err(Error::shape(format!(
            "logits {:?} with {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.dim(1);
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::domain(format!("label {bad} outside 0..{classes}")));
    }
    let mut probs = logits.clone();
    let mut total = T::zero();
    for (row, &label) in probs.data_mut().chunks_mut(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let shifted_label = row[label] - max;
        let mut norm = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            norm += *v;
        }
        // -log softmax = log(sum exp(z - max)) - (z_label - max)
        total += norm.ln() - shifted_label;
        for v in row.iter_mut() {
            *v = *v / norm;
        }
    }
    Ok((total / T::of(labels.len() as f64), probs))
}

/// Gradient of [`softmax_xent`] with respect to the logits, scaled by the
/// upstream gradient of the loss.
pub fn softmax_xent_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize], dloss: T) -> Tensor<T> {
    let classes = probs.dim(1);
    let scale = dloss / T::of(labels.len() as f64);
    let mut d = probs.clone();
    for (row, &label) in d.data_mut().chunks_mut(classes).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout mask: in training each element is kept with
/// probability `1 - rate` and scaled by `1 / (1 - rate)`; in evaluation the
/// mask is all ones.
pub fn dropout_mask<T: Scalar>(shape: &[usize], rate: f64, seed: u64, mode: Mode) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0
            || self.stride == 0
            || self.in_channels == 0
            || self.out_channels == 0
            || self.kernel > self.height + 2 * self.pad
            || self.kernel > self.width + 2 * self.pad
        {
            return Err(Error::shape(format!("invalid convolution {self:?}")));
        }
        Ok(())
    }

    // Visits (column row, position, source pixel) for one image; source is
    // None inside the zero padding.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            let inside = iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width;
                            let src = inside.then(|| {
                                (c * self.height + iy as usize) * self.width + ix as usize
                            });
                            f(r, oy * ow + ox, src);
                        }
                    }
                }
            }
        }
    }
}

/// Output and saved im2col buffers of a convolution.
pub struct ConvForward<T> {
    pub output: Tensor<T>,
    pub(crate) columns: Vec<T>,
}

/// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, k, k]` plus a
/// per-filter bias, via im2col and one matrix product per image.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<ConvForward<T>> {
    geom.validate()?;
    let batch = check_image_batch(x, geom.in_channels, geom.height, geom.width)?;
    w.expect_shape(
        &[geom.out_channels, geom.in_channels, geom.kernel, geom.kernel],
        "convolution weight",
    )?;
    bias.expect_shape(&[geom.out_channels], "convolution bias")?;
    let (patch, positions) = (geom.patch(), geom.positions());
    let image = geom.in_channels * geom.height * geom.width;
    let mut columns = vec![T::zero(); batch * patch * positions];
    let mut out = Tensor::zeros(&[batch, geom.out_channels, geom.out_height(), geom.out_width()]);
    let out_image = geom.out_channels * positions;
    for n in 0..batch {
        let src = &x.data()[n * image..(n + 1) * image];
        let cols = &mut columns[n * patch * positions..(n + 1) * patch * positions];
        geom.for_each_tap(|r, p, s| {
            if let Some(s) = s {
                cols[r * positions + p] = src[s];
            }
        });
        let dst = &mut out.data_mut()[n * out_image..(n + 1) * out_image];
        for (o, row) in dst.chunks_mut(positions).enumerate() {
            row.fill(bias.data()[o]);
        }
        T::gemm(geom.out_channels, patch, positions, w.data(), false, cols, false, T::one(), dst);
    }
    Ok(ConvForward { output: out, columns })
}

fn check_image_batch<T: Scalar>(x: &Tensor<T>, c: usize, h: usize, w: usize) -> Result<usize> {
    if x.rank() != 4 || x.shape()[1..] != [c, h, w] {
        return Err(Error::shape(format!(
            "expected images [N, {c}, {h}, {w}], got {:?}",
            x.shape()
        )));
    }
    Ok(x.dim(0))
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    w: &Tensor<T>,
    columns: &[T],
    geom: ConvGeometry,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let batch = check_image_batch(dy, geom.out_channels, geom.out_height(), geom.out_width())?;
    let (patch, positions) = (geom.patch(), geom.positions());
    let image = geom.in_channels * geom.height * geom.width;
    let out_image = geom.out_channels * positions;
    let mut dx = Tensor::zeros(&[batch, geom.in_channels, geom.height, geom.width]);
    let mut dw = Tensor::zeros(w.shape());
    let mut dbias = Tensor::zeros(&[geom.out_channels]);
    let mut dcols = vec![T::zero(); patch * positions];
    for n in 0..batch {
        let g = &dy.data()[n * out_image..(n + 1) * out_image];
        let cols = &columns[n * patch * positions..(n + 1) * patch * positions];
        for (o, row) in g.chunks(positions).enumerate() {
            dbias.data_mut()[o] += row.iter().copied().sum();
        }
        T::gemm(geom.out_channels, positions, patch, g, false, cols, true, T::one(), dw.data_mut());
        T::gemm(patch, geom.out_channels, positions, w.data(), true, g, false, T::zero(), &mut dcols);
        let dst = &mut dx.data_mut()[n * image..(n + 1) * image];
        geom.for_each_tap(|r, p, s| {
            if let Some(s) = s {
                dst[s] += dcols[r * positions + p];
            }
        });
    }
    Ok(ConvGrads { dx, dw, dbias })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.kernel > self.height || self.kernel > self.width {
            return Err(Error::shape(format!("invalid pooling {self:?}")));
        }
        Ok(())
    }

    fn windows(&self, batch: usize, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut out = 0;
        for plane in 0..batch * self.channels {
            let base = plane * self.height * self.width;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * self.stride, ox * self.stride);
                    let mut taps = (0..self.kernel).flat_map(move |ky| {
                        (0..self.kernel).map(move |kx| base + (y0 + ky) * self.width + x0 + kx)
                    });
                    f(out, &mut taps);
                    out += 1;
                }
            }
        }
    }
}

/// Max pooling of `x: [N, C, H, W]`; returns the output and the flat input
/// index chosen for every output element (first maximum wins).
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, geom: PoolGeometry) -> Result<(Tensor<T>, Vec<usize>)> {
    geom.validate()?;
    let batch = check_image_batch(x, geom.channels, geom.height, geom.width)?;
    let mut out = Tensor::zeros(&[batch, geom.channels, geom.out_height(), geom.out_width()]);
    let mut winners = vec![0; out.len()];
    let xv = x.data();
    let ov = out.data_mut();
    geom.windows(batch, |o, taps| {
        let first = taps.next().expect("non-empty window");
        let best = taps.fold(first, |b, t| if xv[t] > xv[b] { t } else { b });
        ov[o] = xv[best];
        winners[o] = best;
    });
    Ok((out, winners))
}

pub fn avgpool_forward<T: Scalar>(x: &Tensor<T>, geom: PoolGeometry) -> Result<Tensor<T>> {
    geom.validate()?;
    let batch = check_image_batch(x, geom.channels, geom.height, geom.width)?;
    let mut out = Tensor::zeros(&[batch, geom.channels, geom.out_height(), geom.out_width()]);
    let norm = T::of((geom.kernel * geom.kernel) as f64);
    let xv = x.data();
    let ov = out.data_mut();
    geom.windows(batch, |o, taps| {
        let mut acc = T::zero();
        for t in taps {
            acc += xv[t];
        }
        ov[o] = acc / norm;
    });
    Ok(out)
}

pub fn avgpool_backward<T: Scalar>(geom: PoolGeometry, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let batch = check_image_batch(dy, geom.channels, geom.out_height(), geom.out_width())?;
    let mut dx = Tensor::zeros(&[batch, geom.channels, geom.height, geom.width]);
    let norm = T::of((geom.kernel * geom.kernel) as f64);
    let dyv = dy.data();
    let dxv = dx.data_mut();
    geom.windows(batch, |o, taps| {
        let g = dyv[o] / norm;
        for t in taps {
            dxv[t] += g;
        }
    });
    Ok(dx)
}

/// Gap between the largest and second-largest candidate of every maxout
/// group or pooling window; zero means a tie, where the max is not
/// differentiable.
pub(crate) fn max_margins<T: Scalar>(values: &[T], groups: impl Iterator<Item = Vec<usize>>, out: &mut Vec<f64>) {
    for group in groups {
        let mut top = T::neg_infinity();
        let mut second = T::neg_infinity();
        for &i in &group {
            let v = values[i];
            if v > top {
                second = top;
                top = v;
            } else if v > second {
                second = v;
            }
        }
        if group.len() > 1 {
            out.push((top - second).as_f64());
        }
    }
}

pub(crate) fn maxout_groups(shape: &[usize], pieces: usize) -> impl Iterator<Item = Vec<usize>> {
    let (outer, units, inner) = maxout_geometry(shape, pieces).expect("validated by forward");
    (0..outer * units * inner).map(move |flat| {
        let (ou, i) = (flat / inner, flat % inner);
        (0..pieces).map(|p| (ou * pieces + p) * inner + i).collect()
    })
}

pub(crate) fn pool_groups(geom: PoolGeometry, batch: usize) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    geom.windows(batch, |_, taps| groups.push(taps.collect()));
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pwl::apl_to_pwl;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn params(a: &[f64], b: &[f64]) -> AplLayerParams<f64> {
        AplLayerParams::new(t(&[1, a.len()], a), t(&[1, b.len()], b)).unwrap()
    }

    #[test]
    fn apl_forward_single_hinge() {
        let y = apl_forward(&t(&[1, 1], &[-2.0]), &params(&[1.0], &[0.0])).unwrap();
        assert_eq!(y.data(), &[2.0]);
        let y = apl_forward(&t(&[1, 1], &[3.0]), &params(&[0.5], &[1.0])).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn apl_forward_two_hinges_matches_pwl_oracle() {
        let p = params(&[0.5, -0.25], &[-1.0, 1.0]);
        let y = apl_forward(&t(&[1, 1], &[0.0]), &p).unwrap();
        let oracle = apl_to_pwl(&p.row(0)).eval(0.0).unwrap();
        assert_eq!(oracle, -0.25);
        assert_eq!(y.data(), &[oracle]);
    }

    #[test]
    fn apl_forward_rejects_width_mismatch() {
        let p = params(&[0.5], &[0.0]);
        assert!(matches!(
            apl_forward(&t(&[1, 2], &[0.0, 1.0]), &p),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn apl_backward_hinge_branch() {
        let g = apl_backward(&t(&[1, 1], &[-2.0]), &params(&[0.5], &[0.0]), &t(&[1, 1], &[1.0])).unwrap();
        assert_eq!(g.dx.data(), &[-0.5]);
        assert_eq!(g.da.data(), &[2.0]);
        assert_eq!(g.db.data(), &[0.5]);
    }

    #[test]
    fn apl_backward_identity_tail_and_kink() {
        let g = apl_backward(&t(&[1, 1], &[2.5]), &params(&[0.7], &[1.3]), &t(&[1, 1], &[1.0])).unwrap();
        assert_eq!((g.dx.data()[0], g.da.data()[0], g.db.data()[0]), (1.0, 0.0, 0.0));
        let g = apl_backward(&t(&[1, 1], &[1.3]), &params(&[0.7], &[1.3]), &t(&[1, 1], &[1.0])).unwrap();
        assert_eq!(g.db.data(), &[0.0]);
    }

    #[test]
    fn init_is_deterministic_and_relu_when_empty() {
        let p: AplLayerParams<f64> = init_apl(3, 0, 99, InitScheme::default()).unwrap();
        assert_eq!(p.a().shape(), &[3, 0]);
        assert_eq!(p.parameter_count(), 0);
        let x = t(&[2, 3], &[-1.0, 0.0, 2.0, 3.0, -0.5, 0.25]);
        assert_eq!(apl_forward(&x, &p).unwrap(), relu_forward(&x));

        let p1: AplLayerParams<f64> = init_apl(2, 2, 7, InitScheme::default()).unwrap();
        let p2: AplLayerParams<f64> = init_apl(2, 2, 7, InitScheme::default()).unwrap();
        assert_eq!(p1, p2);
        assert!(init_apl::<f64>(0, 1, 1, InitScheme::default()).is_err());
    }

    #[test]
    fn init_statistics() {
        // Uniform(-0.25, 0.25) has sd 0.144; the mean of 1000 draws has
        // sd 0.0046, so ±0.03 is a > 6 sigma bound.
        let p: AplLayerParams<f64> = init_apl(1000, 1, 1, InitScheme::default()).unwrap();
        let mean = p.a().sum() / 1000.0;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!(p.a().data().iter().all(|v| v.abs() <= 0.25));
        assert!(p.b().data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn leaky_relu_values() {
        assert!((leaky_relu_forward(&t(&[1], &[-3.0]), 0.01).data()[0] + 0.03).abs() < 1e-15);
        assert_eq!(leaky_relu_forward(&t(&[1], &[2.0]), 0.05).data(), &[2.0]);
    }

    #[test]
    fn maxout_values_and_errors() {
        assert_eq!(maxout_forward(&t(&[1, 2], &[1.0, 3.0]), 2).unwrap().data(), &[3.0]);
        assert_eq!(maxout_forward(&t(&[1, 2], &[-1.0, -5.0]), 2).unwrap().data(), &[-1.0]);
        assert!(maxout_forward(&t(&[1, 3], &[0.0; 3]), 2).is_err());
        // Channel groups on a feature map: [1, 4, 1, 2] with 2 pieces.
        let x = t(&[1, 4, 1, 2], &[1.0, 8.0, 5.0, 2.0, 0.0, 0.0, -1.0, 7.0]);
        assert_eq!(maxout_forward(&x, 2).unwrap().data(), &[5.0, 8.0, 0.0, 7.0]);
    }

    #[test]
    fn softmax_xent_values() {
        let (loss, _) = softmax_xent(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let (loss, probs) = softmax_xent(&t(&[1, 2], &[1000.0, 0.0]), &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(probs.all_finite());
        assert!(matches!(
            softmax_xent(&t(&[1, 2], &[0.0, 0.0]), &[2]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn softmax_gradient_is_probs_minus_onehot() {
        let logits = t(&[2, 3], &[0.3, -1.2, 2.0, 0.0, 0.5, -0.5]);
        let labels = [2, 0];
        let (_, probs) = softmax_xent(&logits, &labels).unwrap();
        let grad = softmax_xent_backward(&probs, &labels, 1.0);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let fd = (softmax_xent(&plus, &labels).unwrap().0 - softmax_xent(&minus, &labels).unwrap().0) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-8, "{i}: {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn dropout_modes_and_rates() {
        let ones = Tensor::<f64>::ones(&[4, 5]);
        assert_eq!(dropout_mask::<f64>(&[4, 5], 0.0, 1, Mode::Train).unwrap(), ones);
        assert_eq!(dropout_mask::<f64>(&[4, 5], 0.5, 1, Mode::Eval).unwrap(), ones);
        assert!(dropout_mask::<f64>(&[2], 1.0, 1, Mode::Train).is_err());
        assert!(dropout_mask::<f64>(&[2], -0.1, 1, Mode::Train).is_err());
        let m = dropout_mask::<f64>(&[10], 0.25, 3, Mode::Train).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0 / 0.75));
    }

    #[test]
    fn dropout_keep_fraction() {
        // Binomial(1e6, 0.5) has sd 5e-4 on the fraction; ±0.002 is 4 sigma.
        let m = dropout_mask::<f64>(&[1_000_000], 0.5, 11, Mode::Train).unwrap();
        let kept = m.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((kept - 0.5).abs() < 0.002, "{kept}");
    }

    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, g: ConvGeometry) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = Vec::new();
        for n in 0..x.dim(0) {
            for o in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[o];
                        for c in 0..g.in_channels {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    let xi = ((n * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize;
                                    let wi = ((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeometry { in_channels: 2, height: 5, width: 4, out_channels: 3, kernel: 3, stride: 2, pad: 1 };
        let x = t(&[2, 2, 5, 4], &(0..80).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect::<Vec<_>>());
        let w = t(&[3, 2, 3, 3], &(0..54).map(|i| ((i * 5 % 11) as f64 - 5.0) / 7.0).collect::<Vec<_>>());
        let bias = t(&[3], &[0.1, -0.2, 0.3]);
        let y = conv2d_forward(&x, &w, &bias, g).unwrap();
        assert_eq!(y.output.shape(), &[2, 3, 3, 2]);
        for (a, b) in y.output.data().iter().zip(conv_oracle(&x, &w, &bias, g)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_values() {
        let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 9.0, 6.0, 7.0, 8.0, 5.0]);
        let g = PoolGeometry { channels: 1, height: 3, width: 3, kernel: 2, stride: 1 };
        let (m, winners) = maxpool_forward(&x, g).unwrap();
        assert_eq!(m.data(), &[9.0, 9.0, 9.0, 9.0]);
        assert_eq!(winners, vec![4, 4, 4, 4]);
        let a = avgpool_forward(&x, g).unwrap();
        assert_eq!(a.data(), &[4.0, 5.0, 7.0, 7.0]);
        let dx = avgpool_backward(g, &Tensor::<f64>::ones(&[1, 1, 2, 2])).unwrap();
        assert_eq!(dx.data()[4], 1.0);
        assert_eq!(dx.data()[0], 0.25);
    }
}
