//! Dataset loading, preprocessing, partitioning, and class-conditional
//! sampling.
//!
//! Two dataset families are supported:
//!
//! * `cifar10` — the classic binary batch format read from a root directory.
//! * `desk<K>` (K in 2..=10, e.g. `desk10`) — a procedurally generated
//!   pattern-classification set sized for CPU experiments. Each class is a
//!   fixed spatial template observed under nuisance shifts, per-channel
//!   gain/bias jitter, and heavy pixel noise, so a handful of raw samples
//!   generalizes poorly while a denoised prototype does well.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::{all_finite, derive_seed, rng};

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Per-channel standardization constants plus an optional ZCA transform.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocStats {
    pub per_channel_mean: Vec<f64>,
    pub per_channel_std: Vec<f64>,
    #[serde(skip)]
    pub zca_matrix: Option<Array2<f64>>,
    #[serde(skip)]
    pub zca_mean: Option<Array1<f64>>,
    /// Epsilon the ZCA transform was built with (kept for the manifest; the
    /// matrix itself is recomputable from the dataset and is never shipped
    /// inside a bundle).
    pub zca_epsilon: Option<f64>,
}

impl PreprocStats {
    pub fn identity(channels: usize) -> Self {
        PreprocStats {
            per_channel_mean: vec![0.0; channels],
            per_channel_std: vec![1.0; channels],
            zca_matrix: None,
            zca_mean: None,
            zca_epsilon: None,
        }
    }
}

/// An immutable, preprocessed, labeled image dataset.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub name: String,
    /// [N, H, W, C] in preprocessed space.
    pub images: ArrayD<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub image_shape: (usize, usize, usize),
    pub preprocessing: PreprocStats,
    /// Original class ids when this handle is a restriction of a larger task;
    /// identity mapping otherwise. `labels` are always local (0..class_count).
    pub source_classes: Vec<usize>,
    /// Sample indices grouped by local class id.
    class_index: Vec<Vec<usize>>,
}

impl DatasetHandle {
    /// Build a handle from already-preprocessed arrays, checking invariants.
    pub fn from_arrays(
        name: impl Into<String>,
        images: ArrayD<f64>,
        labels: Vec<usize>,
        class_count: usize,
        preprocessing: PreprocStats,
        source_classes: Vec<usize>,
    ) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Shape(format!(
                "images must be [N,H,W,C], got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {} images",
                labels.len(),
                n
            )));
        }
        if !all_finite(&images) {
            return Err(Error::Numeric("non-finite pixel values after preprocessing".into()));
        }
        let mut class_index = vec![Vec::new(); class_count];
        for (i, &l) in labels.iter().enumerate() {
            if l >= class_count {
                return Err(Error::Config(format!(
                    "label {l} out of range for {class_count} classes"
                )));
            }
            class_index[l].push(i);
        }
        if let Some(empty) = class_index.iter().position(|v| v.is_empty()) {
            return Err(Error::Config(format!("class {empty} has no samples")));
        }
        if source_classes.len() != class_count {
            return Err(Error::Config("source_classes length mismatch".into()));
        }
        let shape = images.shape().to_vec();
        Ok(DatasetHandle {
            name: name.into(),
            image_shape: (shape[1], shape[2], shape[3]),
            images,
            labels,
            class_count,
            preprocessing,
            source_classes,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_members(&self, class_id: usize) -> Result<&[usize]> {
        self.class_index
            .get(class_id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Lookup(format!("unknown class {class_id}")))
    }

    /// New handle containing only `classes` (given as local ids of this
    /// handle), with labels remapped to 0..classes.len() in sorted order.
    pub fn restrict_to_classes(&self, classes: &[usize]) -> Result<DatasetHandle> {
        let mut sorted: Vec<usize> = classes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &c in &sorted {
            if c >= self.class_count {
                return Err(Error::Lookup(format!("unknown class {c}")));
            }
        }
        let keep: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| sorted.binary_search(l).is_ok())
            .map(|(i, _)| i)
            .collect();
        let (h, w, c) = self.image_shape;
        let mut images = ArrayD::<f64>::zeros(IxDyn(&[keep.len(), h, w, c]));
        let mut labels = Vec::with_capacity(keep.len());
        for (row, &i) in keep.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), i));
            let local = sorted.binary_search(&self.labels[i]).unwrap();
            labels.push(local);
        }
        let source_classes = sorted.iter().map(|&c| self.source_classes[c]).collect();
        DatasetHandle::from_arrays(
            format!("{}[{}cls]", self.name, sorted.len()),
            images,
            labels,
            sorted.len(),
            self.preprocessing.clone(),
            source_classes,
        )
    }
}

/// Disjoint cover of the class ids by `k` subsets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub subsets: Vec<Vec<usize>>,
    pub k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionStrategy {
    Contiguous,
    SeededRandom { seed: u64 },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocConfig {
    pub standardize: bool,
    pub zca: bool,
    pub zca_epsilon: f64,
    pub desk: DeskOptions,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig {
            standardize: true,
            zca: false,
            zca_epsilon: 0.1,
            desk: DeskOptions::default(),
        }
    }
}

/// Knobs for the generated desk datasets.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskOptions {
    pub size: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Std-dev of additive pixel noise, in template-amplitude units.
    pub noise: f64,
    /// Maximum toroidal shift in pixels along each axis.
    pub shift: usize,
    pub seed: u64,
}

impl Default for DeskOptions {
    fn default() -> Self {
        DeskOptions {
            size: 16,
            channels: 3,
            train_per_class: 150,
            test_per_class: 100,
            noise: 0.8,
            shift: 3,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Load and preprocess the training split of a named dataset.
pub fn load_dataset(name: &str, root: &Path, config: &PreprocConfig) -> Result<DatasetHandle> {
    let (images, labels, class_count) = load_raw(name, root, config, Split::Train)?;
    preprocess(name, images, labels, class_count, config)
}

/// Load the test split, preprocessed with statistics from the training split.
pub fn load_eval_split(
    name: &str,
    root: &Path,
    config: &PreprocConfig,
    stats: &PreprocStats,
) -> Result<DatasetHandle> {
    let (images, labels, class_count) = load_raw(name, root, config, Split::Test)?;
    let images = apply_stats(&images, stats)?;
    let class_ids: Vec<usize> = (0..class_count).collect();
    DatasetHandle::from_arrays(
        format!("{name}-test"),
        images,
        labels,
        class_count,
        stats.clone(),
        class_ids,
    )
}

fn load_raw(
    name: &str,
    root: &Path,
    config: &PreprocConfig,
    split: Split,
) -> Result<(ArrayD<f64>, Vec<usize>, usize)> {
    if let Some(k) = desk_class_count(name) {
        let (images, labels) = generate_desk(k, &config.desk, split);
        return Ok((images, labels, k));
    }
    match name {
        "cifar10" => load_cifar10(root, split),
        other => Err(Error::Config(format!(
            "unknown dataset '{other}' (supported: cifar10, desk2..desk10)"
        ))),
    }
}

fn desk_class_count(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("desk")?;
    let k: usize = rest.parse().ok()?;
    (2..=DESK_TEMPLATES).contains(&k).then_some(k)
}

/// Apply standardization (and optionally ZCA) to raw images, recording the
/// statistics needed to invert the transform at visualization time.
pub fn preprocess(
    name: &str,
    images: ArrayD<f64>,
    labels: Vec<usize>,
    class_count: usize,
    config: &PreprocConfig,
) -> Result<DatasetHandle> {
    if !all_finite(&images) {
        return Err(Error::Numeric("raw images contain non-finite values".into()));
    }
    let channels = images.shape()[3];
    let mut stats = PreprocStats::identity(channels);
    let mut out = images;
    if config.standardize {
        let (mean, std) = channel_stats(&out);
        for (c, s) in std.iter().enumerate() {
            if *s <= 1e-12 {
                return Err(Error::Config(format!(
                    "channel {c} has zero variance; refusing to standardize"
                )));
            }
        }
        for c in 0..channels {
            out.index_axis_mut(Axis(3), c)
                .mapv_inplace(|v| (v - mean[c]) / std[c]);
        }
        stats.per_channel_mean = mean;
        stats.per_channel_std = std;
    }
    if config.zca {
        let (white, w, m) = zca_whiten(&out, config.zca_epsilon)?;
        out = white;
        stats.zca_matrix = Some(w);
        stats.zca_mean = Some(m);
        stats.zca_epsilon = Some(config.zca_epsilon);
    }
    let class_ids: Vec<usize> = (0..class_count).collect();
    DatasetHandle::from_arrays(name, out, labels, class_count, stats, class_ids)
}

fn apply_stats(images: &ArrayD<f64>, stats: &PreprocStats) -> Result<ArrayD<f64>> {
    if !all_finite(images) {
        return Err(Error::Numeric("raw images contain non-finite values".into()));
    }
    let mut out = images.clone();
    let channels = out.shape()[3];
    for c in 0..channels {
        let m = stats.per_channel_mean[c];
        let s = stats.per_channel_std[c];
        out.index_axis_mut(Axis(3), c).mapv_inplace(|v| (v - m) / s);
    }
    if let (Some(w), Some(mean)) = (&stats.zca_matrix, &stats.zca_mean) {
        out = zca_apply(&out, w, mean);
    }
    Ok(out)
}

/// Two-pass per-channel mean and (population) standard deviation.
pub fn channel_stats(images: &ArrayD<f64>) -> (Vec<f64>, Vec<f64>) {
    let channels = images.shape()[3];
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for c in 0..channels {
        let view = images.index_axis(Axis(3), c);
        let n = view.len() as f64;
        let m: f64 = view.iter().sum::<f64>() / n;
        let v: f64 = view.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean[c] = m;
        std[c] = v.sqrt();
    }
    (mean, std)
}

// ---------------------------------------------------------------------------
// ZCA whitening
// ---------------------------------------------------------------------------

/// ZCA-whiten flattened images: output = (X - mean) * W with
/// W = E diag((lambda + eps)^-1/2) E^T from the covariance eigendecomposition.
pub fn zca_whiten(
    images: &ArrayD<f64>,
    epsilon: f64,
) -> Result<(ArrayD<f64>, Array2<f64>, Array1<f64>)> {
    if epsilon <= 0.0 {
        return Err(Error::Config("zca epsilon must be > 0".into()));
    }
    let n = images.shape()[0];
    if n < 2 {
        return Err(Error::Config("zca needs at least 2 samples".into()));
    }
    if !all_finite(images) {
        return Err(Error::Numeric("zca input contains non-finite values".into()));
    }
    let shape = images.shape().to_vec();
    let d: usize = shape[1..].iter().product();
    let x = images
        .view()
        .into_shape_with_order((n, d))
        .expect("flatten");
    let mean = x.mean_axis(Axis(0)).expect("mean over samples");
    let centered = &x - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);

    // symmetric eigendecomposition via nalgebra
    let mut m = nalgebra::DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = cov[(i, j)];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut w = Array2::<f64>::zeros((d, d));
    // W = E diag((l+eps)^-1/2) E^T
    let e = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let mut scaled = nalgebra::DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let s = 1.0 / (lam[j].max(0.0) + epsilon).sqrt();
        for i in 0..d {
            scaled[(i, j)] = e[(i, j)] * s;
        }
    }
    let wm = &scaled * e.transpose();
    for i in 0..d {
        for j in 0..d {
            w[(i, j)] = wm[(i, j)];
        }
    }

    let white = centered.dot(&w);
    let out = white
        .into_shape_with_order(IxDyn(&shape))
        .expect("unflatten");
    Ok((out, w, mean.to_owned()))
}

fn zca_apply(images: &ArrayD<f64>, w: &Array2<f64>, mean: &Array1<f64>) -> ArrayD<f64> {
    let shape = images.shape().to_vec();
    let n = shape[0];
    let d: usize = shape[1..].iter().product();
    let x = images.view().into_shape_with_order((n, d)).expect("flatten");
    let centered = &x - &mean.view().insert_axis(Axis(0));
    centered
        .dot(w)
        .into_shape_with_order(IxDyn(&shape))
        .expect("unflatten")
}

/// Undo preprocessing for visualization: inverse ZCA then de-standardize.
pub fn invert_preprocessing(images: &ArrayD<f64>, stats: &PreprocStats) -> ArrayD<f64> {
    let mut out = images.clone();
    if let (Some(w), Some(mean), Some(eps)) =
        (&stats.zca_matrix, &stats.zca_mean, stats.zca_epsilon)
    {
        // W^-1 has the same eigenbasis with inverted scaling; rebuild from W:
        // since W is symmetric positive definite we can invert it directly.
        let d = w.nrows();
        let mut m = nalgebra::DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = w[(i, j)];
            }
        }
        let _ = eps;
        if let Some(inv) = m.try_inverse() {
            let shape = out.shape().to_vec();
            let n = shape[0];
            let x = out.view().into_shape_with_order((n, d)).expect("flatten");
            let mut winv = Array2::<f64>::zeros((d, d));
            for i in 0..d {
                for j in 0..d {
                    winv[(i, j)] = inv[(i, j)];
                }
            }
            let unwhite = x.dot(&winv) + &mean.view().insert_axis(Axis(0));
            out = unwhite.into_shape_with_order(IxDyn(&shape)).expect("unflatten");
        }
    }
    let channels = out.shape()[3];
    for c in 0..channels {
        let m = stats.per_channel_mean[c];
        let s = stats.per_channel_std[c];
        out.index_axis_mut(Axis(3), c).mapv_inplace(|v| v * s + m);
    }
    out
}

// ---------------------------------------------------------------------------
// Partitioning and sampling
// ---------------------------------------------------------------------------

/// Split the class ids into `k` disjoint subsets.
pub fn partition_classes(
    class_count: usize,
    k: usize,
    strategy: PartitionStrategy,
) -> Result<ClassPartition> {
    if k == 0 || k > class_count {
        return Err(Error::Config(format!(
            "cannot split {class_count} classes into {k} subsets"
        )));
    }
    let order: Vec<usize> = match strategy {
        PartitionStrategy::Contiguous => (0..class_count).collect(),
        PartitionStrategy::SeededRandom { seed } => {
            let mut ids: Vec<usize> = (0..class_count).collect();
            let mut r = rng(seed);
            // Fisher-Yates
            for i in (1..ids.len()).rev() {
                let j = r.gen_range(0..=i);
                ids.swap(i, j);
            }
            ids
        }
    };
    let base = class_count / k;
    let rem = class_count % k;
    let mut subsets = Vec::with_capacity(k);
    let mut off = 0;
    for i in 0..k {
        let take = base + usize::from(i < rem);
        let mut subset: Vec<usize> = order[off..off + take].to_vec();
        subset.sort_unstable();
        subsets.push(subset);
        off += take;
    }
    Ok(ClassPartition { subsets, k })
}

/// Uniform-with-replacement batch from one class; deterministic under `seed`.
pub fn sample_class_batch(
    handle: &DatasetHandle,
    class_id: usize,
    n: usize,
    seed: u64,
) -> Result<ArrayD<f64>> {
    if n == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let members = handle.class_members(class_id)?;
    let mut r = rng(seed);
    let (h, w, c) = handle.image_shape;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, h, w, c]));
    for row in 0..n {
        let pick = members[r.gen_range(0..members.len())];
        out.index_axis_mut(Axis(0), row)
            .assign(&handle.images.index_axis(Axis(0), pick));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Desk dataset generation
// ---------------------------------------------------------------------------

const DESK_TEMPLATES: usize = 10;

/// Template value in [-1, 1] for class `c` at normalized coordinates (u, v).
fn desk_template(c: usize, u: f64, v: f64) -> f64 {
    use std::f64::consts::PI;
    let f = 3.0;
    match c {
        0 => (2.0 * PI * f * v).sin(),
        1 => (2.0 * PI * f * u).sin(),
        2 => (2.0 * PI * f * (u + v) / 2.0_f64.sqrt()).sin(),
        3 => (2.0 * PI * f * (u - v) / 2.0_f64.sqrt()).sin(),
        4 => (2.0 * PI * f * u).sin() * (2.0 * PI * f * v).sin() * 1.4,
        5 => {
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            ((0.30 - r) * 10.0).tanh()
        }
        6 => {
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            ((0.10 - (r - 0.33).abs()) * 12.0).tanh()
        }
        7 => {
            let a = ((0.12 - (u - 0.5).abs()) * 12.0).tanh();
            let b = ((0.12 - (v - 0.5).abs()) * 12.0).tanh();
            a.max(b)
        }
        8 => {
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            1.0 - 2.8 * r
        }
        9 => {
            let bump = |cu: f64, cv: f64| {
                let d2 = (u - cu).powi(2) + (v - cv).powi(2);
                (-d2 / 0.02).exp()
            };
            2.0 * (bump(0.2, 0.2) + bump(0.8, 0.8) + bump(0.2, 0.8) + bump(0.8, 0.2)) - 1.0
        }
        _ => unreachable!("only {DESK_TEMPLATES} desk templates"),
    }
}

/// Generate a raw (unpreprocessed) desk split deterministically.
pub fn generate_desk(
    class_count: usize,
    opts: &DeskOptions,
    split: Split,
) -> (ArrayD<f64>, Vec<usize>) {
    assert!((2..=DESK_TEMPLATES).contains(&class_count));
    let per_class = match split {
        Split::Train => opts.train_per_class,
        Split::Test => opts.test_per_class,
    };
    let split_tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    let (hh, ww, cc) = (opts.size, opts.size, opts.channels);
    let n = class_count * per_class;
    let mut images = ArrayD::<f64>::zeros(IxDyn(&[n, hh, ww, cc]));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for class in 0..class_count {
        let mut r = rng(derive_seed(opts.seed, split_tag * 1000 + class as u64));
        for _ in 0..per_class {
            let dx = r.gen_range(0..=(2 * opts.shift)) as isize - opts.shift as isize;
            let dy = r.gen_range(0..=(2 * opts.shift)) as isize - opts.shift as isize;
            let gains: Vec<f64> = (0..cc).map(|_| r.gen_range(0.7..1.3)).collect();
            let biases: Vec<f64> = (0..cc).map(|_| r.gen_range(-0.3..0.3)).collect();
            for y in 0..hh {
                for x in 0..ww {
                    // toroidal shift keeps the template fully inside the frame
                    let sy = (y as isize - dy).rem_euclid(hh as isize) as usize;
                    let sx = (x as isize - dx).rem_euclid(ww as isize) as usize;
                    let u = (sx as f64 + 0.5) / ww as f64;
                    let v = (sy as f64 + 0.5) / hh as f64;
                    let t = desk_template(class, u, v);
                    for ch in 0..cc {
                        let noise: f64 = {
                            use rand_distr::{Distribution, StandardNormal};
                            let z: f64 = StandardNormal.sample(&mut r);
                            z * opts.noise
                        };
                        images[[row, y, x, ch]] = gains[ch] * t + biases[ch] + noise;
                    }
                }
            }
            labels.push(class);
            row += 1;
        }
    }
    (images, labels)
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary loader
// ---------------------------------------------------------------------------

fn load_cifar10(root: &Path, split: Split) -> Result<(ArrayD<f64>, Vec<usize>, usize)> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    const REC: usize = 1 + 3 * 1024;
    for f in &files {
        let path = root.join(f);
        let mut buf = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut fh| fh.read_to_end(&mut buf))
            .map_err(|e| Error::io(&path, e))?;
        if buf.len() % REC != 0 {
            return Err(Error::Corruption {
                component: f.clone(),
                msg: format!("file size {} is not a multiple of {REC}", buf.len()),
            });
        }
        for rec in buf.chunks_exact(REC) {
            labels.push(rec[0] as usize);
            images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    // records are channel-planar [C,H,W]; convert to [H,W,C]
    let planar = ArrayD::from_shape_vec(IxDyn(&[n, 3, 32, 32]), images).expect("cifar shape");
    let nhwc = crate::util::nchw_to_nhwc(&planar);
    Ok((nhwc, labels, 10))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_config() -> PreprocConfig {
        PreprocConfig {
            desk: DeskOptions {
                size: 8,
                train_per_class: 12,
                test_per_class: 6,
                ..DeskOptions::default()
            },
            ..PreprocConfig::default()
        }
    }

    #[test]
    fn standardize_matches_two_pass_oracle() {
        // synthetic 2-class 8x8 set
        let cfg = tiny_config();
        let (raw, labels) = generate_desk(2, &cfg.desk, Split::Train);
        let (want_mean, want_std) = {
            // straightforward two-pass oracle, summing in plain loops
            let c = raw.shape()[3];
            let mut mean = vec![0.0; c];
            let mut std = vec![0.0; c];
            for ch in 0..c {
                let view = raw.index_axis(Axis(3), ch);
                let n = view.len() as f64;
                let mut acc = 0.0;
                for v in view.iter() {
                    acc += v;
                }
                mean[ch] = acc / n;
                let mut sq = 0.0;
                for v in view.iter() {
                    sq += (v - mean[ch]).powi(2);
                }
                std[ch] = (sq / n).sqrt();
            }
            (mean, std)
        };
        let handle = preprocess("desk2", raw, labels, 2, &cfg).unwrap();
        for c in 0..3 {
            assert!((handle.preprocessing.per_channel_mean[c] - want_mean[c]).abs() < 1e-6);
            assert!((handle.preprocessing.per_channel_std[c] - want_std[c]).abs() < 1e-6);
        }
        // standardization idempotence on stats
        let (m2, s2) = channel_stats(&handle.images);
        for c in 0..3 {
            assert!(m2[c].abs() < 1e-5);
            assert!((s2[c] - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_dataset_rejected() {
        let images = ArrayD::from_elem(IxDyn(&[4, 2, 2, 1]), 3.0);
        let labels = vec![0, 0, 1, 1];
        let err = preprocess("const", images, labels, 2, &PreprocConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn desk_shapes_and_determinism() {
        let cfg = tiny_config();
        let h1 = load_dataset("desk3", Path::new("."), &cfg).unwrap();
        let h2 = load_dataset("desk3", Path::new("."), &cfg).unwrap();
        assert_eq!(h1.image_shape, (8, 8, 3));
        assert_eq!(h1.class_count, 3);
        assert_eq!(h1.len(), 36);
        assert_eq!(h1.images, h2.images);
        // train and test splits differ
        let t = load_eval_split("desk3", Path::new("."), &cfg, &h1.preprocessing).unwrap();
        assert_eq!(t.len(), 18);
        assert_ne!(
            h1.images.index_axis(Axis(0), 0),
            t.images.index_axis(Axis(0), 0)
        );
    }

    #[test]
    fn unknown_dataset_is_config_error() {
        let err = load_dataset("imagenet99", Path::new("."), &PreprocConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn missing_cifar_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset("cifar10", dir.path(), &PreprocConfig::default());
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn cifar_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        // fabricate 5 train batches with 2 records each and one test batch
        let rec = |label: u8, fill: u8| {
            let mut v = vec![label];
            v.extend(std::iter::repeat(fill).take(3072));
            v
        };
        for i in 1..=5 {
            let mut bytes = rec((i % 10) as u8, i as u8);
            bytes.extend(rec(((i + 1) % 10) as u8, (10 * i) as u8));
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), bytes).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), rec(3, 7)).unwrap();
        let cfg = PreprocConfig { standardize: false, ..PreprocConfig::default() };
        let (imgs, labels, classes) = load_raw("cifar10", dir.path(), &cfg, Split::Train).unwrap();
        assert_eq!(classes, 10);
        assert_eq!(labels.len(), 10);
        assert_eq!(imgs.shape(), &[10, 32, 32, 3]);
        assert!((imgs[[0, 0, 0, 0]] - 1.0 / 255.0).abs() < 1e-12);
        let (timgs, tlabels, _) = load_raw("cifar10", dir.path(), &cfg, Split::Test).unwrap();
        assert_eq!(tlabels, vec![3]);
        assert!((timgs[[0, 5, 5, 2]] - 7.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn zca_of_white_signal_is_identity_covariance() {
        // i.i.d. unit-variance coordinates: covariance ~ I, output covariance
        // should stay ~ I for small epsilon
        let mut r = rng(11);
        let n = 4000;
        let d = 4;
        let images = ArrayD::from_shape_simple_fn(IxDyn(&[n, 1, 2, 2]), || {
            use rand_distr::{Distribution, StandardNormal};
            let z: f64 = StandardNormal.sample(&mut r);
            z
        });
        let (white, _, _) = zca_whiten(&images, 1e-6).unwrap();
        let flat = white.into_shape_with_order((n, d)).unwrap();
        let mean = flat.mean_axis(Axis(0)).unwrap();
        let centered = &flat - &mean.insert_axis(Axis(0));
        let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov[(i, j)] - want).abs() < 1e-5,
                    "cov[{i},{j}] = {}",
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn zca_matches_brute_force_2x2_oracle() {
        // two samples in 2-d: covariance has a closed-form eigensystem
        let images =
            ArrayD::from_shape_vec(IxDyn(&[2, 1, 1, 2]), vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let eps = 0.05;
        let (white, w, mean) = zca_whiten(&images, eps).unwrap();

        // oracle: explicit 2x2 eigendecomposition
        let x: [[f64; 2]; 2] = [[1.0, 2.0], [3.0, 5.0]];
        let m = [(x[0][0] + x[1][0]) / 2.0, (x[0][1] + x[1][1]) / 2.0];
        let c0 = [x[0][0] - m[0], x[0][1] - m[1]];
        let c1 = [x[1][0] - m[0], x[1][1] - m[1]];
        // cov = (c0^T c0 + c1^T c1) / (n-1), n = 2
        let a = c0[0] * c0[0] + c1[0] * c1[0];
        let b = c0[0] * c0[1] + c1[0] * c1[1];
        let d = c0[1] * c0[1] + c1[1] * c1[1];
        let tr = a + d;
        let det = a * d - b * b;
        let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
        let l1 = tr / 2.0 + disc;
        let l2 = tr / 2.0 - disc;
        let v1 = if b.abs() > 1e-15 { [b, l1 - a] } else { [1.0, 0.0] };
        let n1 = (v1[0] * v1[0] + v1[1] * v1[1]).sqrt();
        let e1 = [v1[0] / n1, v1[1] / n1];
        let e2 = [-e1[1], e1[0]];
        let s1 = 1.0 / (l1.max(0.0) + eps).sqrt();
        let s2 = 1.0 / (l2.max(0.0) + eps).sqrt();
        let mut w_oracle = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                w_oracle[i][j] = s1 * e1[i] * e1[j] + s2 * e2[i] * e2[j];
            }
        }
        for i in 0..2 {
            assert!((mean[i] - m[i]).abs() < 1e-12);
            for j in 0..2 {
                assert!(
                    (w[(i, j)] - w_oracle[i][j]).abs() < 1e-8,
                    "W[{i}{j}]: {} vs {}",
                    w[(i, j)],
                    w_oracle[i][j]
                );
            }
        }
        // whitened output = centered . W
        let got = white.into_shape_with_order((2, 2)).unwrap();
        for (r, cent) in [c0, c1].iter().enumerate() {
            for j in 0..2 {
                let want = cent[0] * w_oracle[0][j] + cent[1] * w_oracle[1][j];
                assert!((got[(r, j)] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zca_large_epsilon_is_scaled_centering() {
        use rand::Rng as _;
        let mut r = rng(13);
        let images = ArrayD::from_shape_simple_fn(IxDyn(&[6, 1, 2, 2]), || r.gen_range(-1.0..1.0));
        let eps = 1e3;
        let (_, w, _) = zca_whiten(&images, eps).unwrap();
        // (lambda + eps)^-1/2 deviates from eps^-1/2 by about lambda/(2 eps)
        let scale = 1.0 / eps.sqrt();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { scale } else { 0.0 };
                assert!((w[(i, j)] - want).abs() < 1e-3 * scale);
            }
        }
    }

    #[test]
    fn zca_inversion_round_trips() {
        let cfg = PreprocConfig { zca: true, ..tiny_config() };
        let h = load_dataset("desk2", Path::new("."), &cfg).unwrap();
        let raw = invert_preprocessing(&h.images, &h.preprocessing);
        let (orig, _) = generate_desk(2, &cfg.desk, Split::Train);
        let err = (&raw - &orig).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max abs err {err}");
    }

    #[test]
    fn contiguous_partition_examples() {
        let p = partition_classes(200, 2, PartitionStrategy::Contiguous).unwrap();
        assert_eq!(p.subsets[0], (0..100).collect::<Vec<_>>());
        assert_eq!(p.subsets[1], (100..200).collect::<Vec<_>>());
        let p = partition_classes(7, 1, PartitionStrategy::Contiguous).unwrap();
        assert_eq!(p.subsets, vec![(0..7).collect::<Vec<_>>()]);
        let p = partition_classes(10, 3, PartitionStrategy::Contiguous).unwrap();
        let sizes: Vec<usize> = p.subsets.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert!(partition_classes(5, 6, PartitionStrategy::Contiguous).is_err());
        assert!(partition_classes(5, 0, PartitionStrategy::Contiguous).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_cover(c in 1usize..60, k in 1usize..12, seed in 0u64..500) {
            prop_assume!(k <= c);
            for strategy in [PartitionStrategy::Contiguous, PartitionStrategy::SeededRandom { seed }] {
                let p = partition_classes(c, k, strategy).unwrap();
                prop_assert_eq!(p.subsets.len(), k);
                let mut all: Vec<usize> = p.subsets.iter().flatten().copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..c).collect::<Vec<_>>());
                for s in &p.subsets {
                    prop_assert!(!s.is_empty());
                    prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
    }

    #[test]
    fn class_sampling_contracts() {
        let cfg = tiny_config();
        let h = load_dataset("desk2", Path::new("."), &cfg).unwrap();
        // determinism
        let a = sample_class_batch(&h, 1, 5, 99).unwrap();
        let b = sample_class_batch(&h, 1, 5, 99).unwrap();
        assert_eq!(a, b);
        // unknown class
        assert!(matches!(sample_class_batch(&h, 9, 1, 0), Err(Error::Lookup(_))));
        // membership: every sampled row equals some member of the class
        let members = h.class_members(0).unwrap().to_vec();
        let batch = sample_class_batch(&h, 0, members.len(), 5).unwrap();
        for row in 0..batch.shape()[0] {
            let img = batch.index_axis(Axis(0), row);
            let found = members.iter().any(|&i| {
                let m = h.images.index_axis(Axis(0), i);
                m.iter().zip(img.iter()).all(|(x, y)| x == y)
            });
            assert!(found, "sampled row {row} not a class member");
        }
    }

    #[test]
    fn singleton_class_repeats() {
        let mut images = ArrayD::zeros(IxDyn(&[3, 2, 2, 1]));
        images[[0, 0, 0, 0]] = 5.0;
        images[[1, 0, 0, 0]] = 1.0;
        images[[2, 0, 0, 0]] = 2.0;
        let h = DatasetHandle::from_arrays(
            "toy",
            images,
            vec![0, 1, 1],
            2,
            PreprocStats::identity(1),
            vec![0, 1],
        )
        .unwrap();
        let batch = sample_class_batch(&h, 0, 4, 0).unwrap();
        for row in 0..4 {
            assert_eq!(batch[[row, 0, 0, 0]], 5.0);
        }
    }

    #[test]
    fn restriction_remaps_labels() {
        let cfg = tiny_config();
        let h = load_dataset("desk4", Path::new("."), &cfg).unwrap();
        let sub = h.restrict_to_classes(&[2, 3]).unwrap();
        assert_eq!(sub.class_count, 2);
        assert_eq!(sub.source_classes, vec![2, 3]);
        assert!(sub.labels.iter().all(|&l| l < 2));
        assert_eq!(sub.len(), 2 * cfg.desk.train_per_class);
    }
}
