//! Datasets, file formats, preprocessing and the synthetic regression task.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::pwl::AplParams1D;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Regression targets, `[N, outputs]`.
    Values(Tensor),
}

/// Per-feature means subtracted from every split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...feature shape]`.
    pub inputs: Tensor,
    pub targets: Targets,
    pub split: Split,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets, split: Split) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        let m = match &targets {
            Targets::Classes(l) => l.len(),
            Targets::Values(v) => v.shape().first().copied().unwrap_or(0),
        };
        if n != m {
            return Err(Error::shape(format!("{n} inputs but {m} targets")));
        }
        Ok(Self {
            inputs,
            targets,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    /// Number of classes: one more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels()
            .map_or(0, |l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let targets = match &self.targets {
            Targets::Classes(l) => Targets::Classes(rows.iter().map(|&r| l[r]).collect()),
            Targets::Values(v) => Targets::Values(v.select_rows(rows)),
        };
        Self {
            inputs: self.inputs.select_rows(rows),
            targets,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    /// The first `n` samples.
    pub fn truncate(&self, n: usize) -> Self {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows)
    }

    /// A seed-determined choice of `n` samples (all of them if there are
    /// fewer), kept in their original order.
    pub fn sample(&self, n: usize, seed: u64) -> Self {
        let mut rows: Vec<usize> = (0..self.len()).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        rows.truncate(n);
        rows.sort_unstable();
        self.subset(&rows)
    }

    /// Splits off a seed-determined `fraction` of samples as a validation
    /// set; returns `(train, val)`.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::domain(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let mut rows: Vec<usize> = (0..self.len()).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.len() as f64 * fraction).round() as usize;
        let (val, train) = rows.split_at(n_val);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        let mut v = self.subset(&val);
        v.split = Split::Val;
        Ok((self.subset(&train), v))
    }
}

/// Raw contents of an IDX file of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Values scaled from `0..=255` to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| f64::from(b) / 255.0).collect();
        Tensor::new(self.dims.clone(), data).expect("dims match payload")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0, 0, 0x08, self.dims.len() as u8];
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < 4 {
            return Err(err(bytes.len(), "truncated IDX header".into()));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(err(0, format!("bad IDX magic {:02x?}", &bytes[..4])));
        }
        if bytes[2] != 0x08 {
            return Err(err(2, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
        }
        let rank = bytes[3] as usize;
        if rank == 0 {
            return Err(err(3, "IDX rank 0".into()));
        }
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(err(bytes.len(), "truncated IDX dimensions".into()));
        }
        let dims: Vec<usize> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let len: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != len {
            return Err(err(
                header + payload.len().min(len),
                format!("payload has {} bytes, dimensions {dims:?} need {len}", payload.len()),
            ));
        }
        Ok(Self {
            dims,
            data: payload.to_vec(),
        })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let ctx = |what: &str| format!("{what} {}", path.display());
    let file = File::open(path).map_err(|e| Error::io(ctx("opening"), e))?;
    let mut raw = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(ctx("reading"), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(ctx("decompressing"), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads an IDX file, gunzipping it first when it starts with the gzip
/// magic.
pub fn load_idx(path: &Path) -> Result<IdxArray> {
    IdxArray::from_bytes(&read_maybe_gz(path)?, path)
}

/// Writes an IDX file, gzip-compressed when the name ends in `.gz`.
pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    let ctx = format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx.clone(), e))?;
    let bytes = array.to_bytes();
    let result = if path.extension().is_some_and(|e| e == "gz") {
        let mut gz = GzEncoder::new(BufWriter::new(file), Compression::default());
        gz.write_all(&bytes).and_then(|_| gz.finish()?.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).and_then(|_| w.flush())
    };
    result.map_err(|e| Error::io(ctx, e))
}

/// Pairs an IDX image file with an IDX label file.
pub fn load_idx_dataset(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = load_idx(images)?;
    let lab = load_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            offset: 3,
            message: format!("labels must be rank 1, got dimensions {:?}", lab.dims),
        });
    }
    let labels = lab.data.iter().map(|&b| b as usize).collect();
    Dataset::new(img.to_tensor(), Targets::Classes(labels), split)
}

impl Normalization {
    /// Per-feature means of `train`.
    pub fn fit(train: &Dataset) -> Self {
        let n = train.len().max(1);
        let width = train.inputs.row_len();
        let mut mean = vec![0.0; width];
        for row in train.inputs.data().chunks(width.max(1)) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        Self { mean }
    }

    /// Subtracts the means from `ds`; a dataset already carrying this record
    /// is left unchanged.
    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        if ds.normalization.as_ref() == Some(self) {
            return Ok(());
        }
        if ds.normalization.is_some() {
            return Err(Error::domain("dataset already normalised with another record"));
        }
        if ds.inputs.row_len() != self.mean.len() {
            return Err(Error::shape(format!(
                "{} features per sample, normalisation has {}",
                ds.inputs.row_len(),
                self.mean.len()
            )));
        }
        let width = self.mean.len().max(1);
        for row in ds.inputs.data_mut().chunks_mut(width) {
            for (v, &m) in row.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        ds.normalization = Some(self.clone());
        Ok(())
    }
}

/// Subtracts the per-feature mean of `train` from `train` and every dataset
/// in `others`; returns the record.
pub fn mean_subtract(train: &mut Dataset, others: &mut [&mut Dataset]) -> Result<Normalization> {
    for o in others.iter() {
        if o.feature_shape() != train.feature_shape() {
            return Err(Error::shape(format!(
                "feature shape {:?} differs from training shape {:?}",
                o.feature_shape(),
                train.feature_shape()
            )));
        }
    }
    let record = match &train.normalization {
        Some(r) => r.clone(),
        None => Normalization::fit(train),
    };
    record.apply(train)?;
    for o in others.iter_mut() {
        record.apply(o)?;
    }
    Ok(record)
}

/// One draw of the crop-and-flip augmentation: the crop origin inside the
/// padded image and whether to mirror horizontally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropFlip {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl CropFlip {
    pub fn identity(pad: usize) -> Self {
        Self {
            dy: pad,
            dx: pad,
            flip: false,
        }
    }

    /// Offsets uniform over `0..=2·pad` on each axis, flip with probability
    /// one half.
    pub fn sample(pad: usize, rng: &mut impl Rng) -> Self {
        Self {
            dy: rng.random_range(0..=2 * pad),
            dx: rng.random_range(0..=2 * pad),
            flip: rng.random::<bool>(),
        }
    }
}

/// Zero-pads `img: [C, H, W]` by `pad` on every side and crops back to
/// `H×W` at the offsets of `draw`, mirroring if requested.
pub fn augment_crop_flip(img: &Tensor, pad: usize, draw: CropFlip) -> Result<Tensor> {
    let [c, h, w] = img.shape()[..] else {
        return Err(Error::shape(format!("expected a C×H×W image, got {:?}", img.shape())));
    };
    if draw.dy > 2 * pad || draw.dx > 2 * pad {
        return Err(Error::domain(format!("crop {draw:?} outside padding {pad}")));
    }
    let src = img.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + draw.dy) as isize - pad as isize;
            if sy < 0 || sy as usize >= h {
                continue;
            }
            for x in 0..w {
                let tx = if draw.flip { w - 1 - x } else { x };
                let sx = (tx + draw.dx) as isize - pad as isize;
                if sx < 0 || sx as usize >= w {
                    continue;
                }
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Applies an independent [`CropFlip`] draw to every image of a `[N, C, H,
/// W]` batch.
pub fn augment_batch(batch: &Tensor, pad: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = batch.row_len();
    let item: Vec<usize> = batch.shape()[1..].to_vec();
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.shape()[0] {
        let img = Tensor::new(item.clone(), batch.row(i).to_vec())?;
        let draw = CropFlip::sample(pad, &mut rng);
        out.extend(augment_crop_flip(&img, pad, draw)?.into_data());
    }
    debug_assert_eq!(out.len(), per * batch.shape()[0]);
    Tensor::new(batch.shape().to_vec(), out)
}

/// A regression dataset whose targets come from a known APL function.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    /// Inputs `[n, 1]`, targets `[n, 1]`.
    pub dataset: Dataset,
    pub generator: AplParams1D,
}

/// Half-width of the input interval of [`gen_synthetic_pwl_task`].
pub const SYNTHETIC_RANGE: f64 = 3.0;

/// Draws a generator `h*` with `s_true` hinges, then `n` inputs
/// `x ~ U(-3, 3)` with targets `h*(x) + N(0, noise²)`.
///
/// Hinge slopes have magnitude in `[0.25, 1]` with random sign and
/// locations lie in `[-2, 2]` at least `4 / (s_true + 1) / 2` apart, so
/// every hinge is visible in the data.
pub fn gen_synthetic_pwl_task(n: usize, s_true: usize, noise: f64, seed: u64) -> Result<SyntheticTask> {
    if n == 0 {
        return Err(Error::domain("synthetic task needs at least one sample"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::domain(format!("noise {noise} must be finite and non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, 0));
    let cell = 4.0 / (s_true as f64 + 1.0);
    let mut a = Vec::with_capacity(s_true);
    let mut b = Vec::with_capacity(s_true);
    for s in 0..s_true {
        let mag = 0.25 + 0.75 * rng.random::<f64>();
        a.push(if rng.random::<bool>() { mag } else { -mag });
        b.push(-2.0 + cell * (s as f64 + 0.75) + 0.5 * cell * rng.random::<f64>());
    }
    let generator = AplParams1D::new(a, b)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, 1));
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Internal(e.to_string()))?;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = SYNTHETIC_RANGE * (2.0 * rng.random::<f64>() - 1.0);
        let eps = if noise > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
        xs.push(x);
        ys.push(generator.eval(x) + eps);
    }
    let dataset = Dataset::new(
        Tensor::new(vec![n, 1], xs)?,
        Targets::Values(Tensor::new(vec![n, 1], ys)?),
        Split::Train,
    )?;
    Ok(SyntheticTask { dataset, generator })
}

/// Writes a dataset with flat features as CSV: header `f0,f1,…,label` or
/// `f0,…,y0,…`, one sample per line.
pub fn write_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(e, ctx()))?;
    let width = ds.inputs.row_len();
    let mut header: Vec<String> = (0..width).map(|i| format!("f{i}")).collect();
    match &ds.targets {
        Targets::Classes(_) => header.push("label".into()),
        Targets::Values(v) => header.extend((0..v.row_len()).map(|i| format!("y{i}"))),
    }
    w.write_record(&header).map_err(|e| csv_err(e, ctx()))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.inputs.row(i).iter().map(|v| format!("{v:e}")).collect();
        match &ds.targets {
            Targets::Classes(l) => rec.push(l[i].to_string()),
            Targets::Values(v) => rec.extend(v.row(i).iter().map(|y| format!("{y:e}"))),
        }
        w.write_record(&rec).map_err(|e| csv_err(e, ctx()))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

fn csv_err(e: csv::Error, context: String) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(context, io),
        other => Error::Internal(format!("{context}: {other:?}")),
    }
}

/// Reads a CSV written by [`write_csv`]. A final `label` column makes a
/// classification dataset; `y*` columns make a regression dataset.
pub fn read_csv(path: &Path, split: Split) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let format_err = |offset: u64, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let header = r
        .headers()
        .map_err(|e| format_err(0, e.to_string()))?
        .clone();
    let n_targets = header.iter().filter(|h| h.starts_with('y')).count();
    let classes = header.iter().next_back() == Some("label");
    let target_cols = if classes { 1 } else { n_targets };
    if target_cols == 0 || target_cols >= header.len() {
        return Err(format_err(0, "header needs feature columns and a label or y columns".into()));
    }
    let width = header.len() - target_cols;
    let (mut xs, mut ys, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte());
            format_err(offset, e.to_string())
        })?;
        let offset = rec.position().map_or(0, |p| p.byte());
        if rec.len() != header.len() {
            return Err(format_err(offset, format!("{} fields, header has {}", rec.len(), header.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            let bad = || format_err(offset, format!("column {j}: invalid number {field:?}"));
            if j < width {
                xs.push(field.trim().parse::<f64>().map_err(|_| bad())?);
            } else if classes {
                labels.push(field.trim().parse::<usize>().map_err(|_| bad())?);
            } else {
                ys.push(field.trim().parse::<f64>().map_err(|_| bad())?);
            }
        }
    }
    let n = xs.len() / width;
    let targets = if classes {
        Targets::Classes(labels)
    } else {
        Targets::Values(Tensor::new(vec![n, target_cols], ys)?)
    };
    Dataset::new(Tensor::new(vec![n, width], xs)?, targets, split)
}

/// Dataset manifest: a `key = value` file naming the files of each split.
///
/// ```text
/// train_images = train-images-idx3-ubyte.gz
/// train_labels = train-labels-idx1-ubyte.gz
/// test_images  = test-images-idx3-ubyte.gz
/// test_labels  = test-labels-idx1-ubyte.gz
/// # or, for tabular data:
/// train_csv = train.csv
/// test_csv  = test.csv
/// ```
///
/// Paths are relative to the manifest. Optional `image_shape = C H W`
/// reshapes image samples (MNIST files are `28 28`, loaded as `1 28 28`).
#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    config: KvConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let config = KvConfig::load(path)?;
        let manifest = Self {
            path: path.to_path_buf(),
            config,
        };
        let mut errors = Vec::new();
        for split in ["train", "test"] {
            let idx = manifest.config.get(&format!("{split}_images")).is_some();
            let csv = manifest.config.get(&format!("{split}_csv")).is_some();
            if !idx && !csv {
                errors.push(format!("{}: no {split}_images or {split}_csv entry", path.display()));
            }
            if idx && manifest.config.get(&format!("{split}_labels")).is_none() {
                errors.push(format!("{}: {split}_images without {split}_labels", path.display()));
            }
        }
        if errors.is_empty() {
            Ok(manifest)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let key = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let mut ds = if let Some(images) = self.config.path(&format!("{key}_images")) {
            let labels = self
                .config
                .path(&format!("{key}_labels"))
                .ok_or_else(|| Error::Config(vec![format!("missing {key}_labels")]))?;
            load_idx_dataset(&images, &labels, split)?
        } else if let Some(csv) = self.config.path(&format!("{key}_csv")) {
            read_csv(&csv, split)?
        } else {
            return Err(Error::Config(vec![format!(
                "{}: no data for split {key}",
                self.path.display()
            )]));
        };
        if let Some(shape) = self.config.get("image_shape") {
            let dims: std::result::Result<Vec<usize>, _> = shape.split_whitespace().map(str::parse).collect();
            let dims = dims.map_err(|_| Error::Config(vec![format!("invalid image_shape {shape:?}")]))?;
            let mut full = vec![ds.len()];
            full.extend(dims);
            ds.inputs = ds.inputs.reshape(&full)?;
        }
        Ok(ds)
    }
}
