//! Three-dimensional evaluation: exact storage accounting under the fp32
//! rule, downstream training wall-clock, and recovery accuracy over freshly
//! initialized networks.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use autograd::{Graph, Var};

use crate::bundle::{
    read_manifest, DistilledBundle, RepresentationMode, ATTRS_FILE, MANIFEST_FILE,
};
use crate::data::DatasetHandle;
use crate::distiller::{materialize, LabelMode};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, cross_entropy, EvalArchKind, EvalNet};
use crate::optim::SgdMomentum;
use crate::util::{derive_seed, hardware_descriptor, nhwc_to_nchw, rng};

// ---------------------------------------------------------------------------
// Storage accounting
// ---------------------------------------------------------------------------

/// Byte accounting per component under the fp32 rule (4 bytes per element;
/// manifest text under `routing`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StorageReport {
    pub components: BTreeMap<String, u64>,
    pub total_bytes: u64,
    /// Decimal megabytes (1 MB = 10^6 bytes), rounded to nearest integer.
    pub total_mb_rounded: u64,
    /// Total divided by the cost of one fp32 image per class.
    pub ipc_equivalent: f64,
}

impl StorageReport {
    pub fn from_components(
        components: BTreeMap<String, u64>,
        class_count: usize,
        image_shape: (usize, usize, usize),
    ) -> StorageReport {
        let total_bytes: u64 = components.values().sum();
        let (h, w, c) = image_shape;
        let per_class_image = (class_count * h * w * c * 4) as f64;
        StorageReport {
            total_bytes,
            total_mb_rounded: ((total_bytes as f64) / 1e6).round() as u64,
            ipc_equivalent: if per_class_image > 0.0 {
                total_bytes as f64 / per_class_image
            } else {
                0.0
            },
            components,
        }
    }
}

/// Closed-form accounting for an in-memory bundle: element counts times four,
/// plus the rendered manifest text under `routing`.
pub fn account_storage(bundle: &DistilledBundle) -> StorageReport {
    let p = &bundle.priors;
    let prior_elems = (p.class_count() * p.priors_per_class * p.latent_dim) as u64;
    let mut components = BTreeMap::new();
    match bundle.meta.mode {
        RepresentationMode::Distributional => {
            components.insert("priors".to_string(), 2 * prior_elems * 4);
        }
        RepresentationMode::Fixed => {
            components.insert("prototypes".to_string(), prior_elems * 4);
        }
    }
    components.insert(
        "decoder".to_string(),
        bundle.decoder.spec.storage_element_count() as u64 * 4,
    );
    components.insert("soft_labels".to_string(), bundle.soft_labels.len() as u64 * 4);
    let manifest_guess = serde_json::to_string_pretty(&bundle.meta).map(|s| s.len()).unwrap_or(0);
    components.insert("routing".to_string(), manifest_guess as u64);
    StorageReport::from_components(components, bundle.class_count(), bundle.meta.image_shape)
}

/// Exact accounting from a serialized bundle directory: blob payload bytes
/// from the inventory, manifest/attrs text bytes under `routing`.
pub fn account_storage_dir(dir: &Path) -> Result<StorageReport> {
    let manifest = read_manifest(dir)?;
    let mut components: BTreeMap<String, u64> = BTreeMap::new();
    for entry in &manifest.components {
        let path = dir.join(&entry.file);
        let file_len = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        let payload = file_len - 32;
        if payload != entry.byte_len {
            return Err(Error::Corruption {
                component: entry.name.clone(),
                msg: format!(
                    "payload {payload} bytes on disk, manifest says {}",
                    entry.byte_len
                ),
            });
        }
        let expected: u64 = entry.shape.iter().product::<usize>() as u64 * 4;
        if payload != expected {
            return Err(Error::Corruption {
                component: entry.name.clone(),
                msg: format!("payload {payload} != 4 x element count {expected}"),
            });
        }
        *components.entry(entry.name.clone()).or_insert(0) += payload;
    }
    let mut routing = 0u64;
    for f in [MANIFEST_FILE, ATTRS_FILE] {
        let path = dir.join(f);
        if path.exists() {
            routing += std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        }
    }
    components.insert("routing".to_string(), routing);
    Ok(StorageReport::from_components(
        components,
        manifest.meta.task_classes.len(),
        manifest.meta.image_shape,
    ))
}

// ---------------------------------------------------------------------------
// Synthetic sources
// ---------------------------------------------------------------------------

/// Anything a downstream network can be trained on: a single bundle, a
/// federated aggregate, or a raw-image baseline.
pub trait SyntheticSource {
    /// Global class ids covered, in the order of the local label space.
    fn task_classes(&self) -> &[usize];
    /// Width of the target rows (= network output width).
    fn label_width(&self) -> usize;
    fn image_shape(&self) -> (usize, usize, usize);
    /// Fresh samples for one downstream epoch: images [N,H,W,C], target rows
    /// [N, label_width], and the label-space class per row.
    fn materialize_epoch(
        &self,
        samples_per_prior: usize,
        mode: LabelMode,
        seed: u64,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>, Vec<usize>)>;
    fn storage(&self) -> StorageReport;
    fn content_tag(&self) -> String;
}

impl SyntheticSource for DistilledBundle {
    fn task_classes(&self) -> &[usize] {
        &self.meta.task_classes
    }

    fn label_width(&self) -> usize {
        self.class_count()
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        self.meta.image_shape
    }

    fn materialize_epoch(
        &self,
        samples_per_prior: usize,
        mode: LabelMode,
        seed: u64,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>, Vec<usize>)> {
        let synth = materialize(self, samples_per_prior, mode, seed)?;
        Ok((synth.images, synth.targets, synth.labels))
    }

    fn storage(&self) -> StorageReport {
        account_storage(self)
    }

    fn content_tag(&self) -> String {
        // cheap content hash so cross-architecture runs can log that they
        // evaluated the identical bundle
        let mut acc = 0u64;
        for v in self.priors.mu.iter().chain(self.decoder.proj_w.iter()) {
            acc = acc
                .rotate_left(7)
                .wrapping_add((v.to_bits() >> 16) as u64);
        }
        format!("{acc:016x}")
    }
}

/// Random real images at a fixed fp32 storage budget: the reference point
/// distilled bundles are gated against.
#[derive(Clone, Debug)]
pub struct RealImageBaseline {
    pub images: ArrayD<f64>,
    pub labels: Vec<usize>,
    pub task_classes: Vec<usize>,
    pub class_count: usize,
    image_shape: (usize, usize, usize),
}

impl RealImageBaseline {
    /// Class-balanced random selection whose fp32 byte count does not exceed
    /// `budget_bytes` (greedy round-robin over shuffled class members).
    pub fn at_budget(data: &DatasetHandle, budget_bytes: u64, seed: u64) -> Result<Self> {
        let (h, w, c) = data.image_shape;
        let per_image = (h * w * c * 4) as u64;
        let n = ((budget_bytes / per_image) as usize).min(data.len());
        if n == 0 {
            return Err(Error::Config(format!(
                "budget {budget_bytes} bytes below one image ({per_image})"
            )));
        }
        let mut r = rng(seed);
        let mut by_class: Vec<Vec<usize>> = Vec::with_capacity(data.class_count);
        for class in 0..data.class_count {
            let mut members = data.class_members(class)?.to_vec();
            members.shuffle(&mut r);
            by_class.push(members);
        }
        let mut picks = Vec::with_capacity(n);
        let mut round = 0;
        'outer: loop {
            for class in 0..data.class_count {
                if picks.len() == n {
                    break 'outer;
                }
                if let Some(&i) = by_class[class].get(round) {
                    picks.push(i);
                }
            }
            round += 1;
            if round > data.len() {
                break;
            }
        }
        let mut images = ArrayD::<f64>::zeros(IxDyn(&[picks.len(), h, w, c]));
        let mut labels = Vec::with_capacity(picks.len());
        for (row, &i) in picks.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&data.images.index_axis(Axis(0), i));
            labels.push(data.labels[i]);
        }
        Ok(RealImageBaseline {
            images,
            labels,
            task_classes: data.source_classes.clone(),
            class_count: data.class_count,
            image_shape: data.image_shape,
        })
    }
}

impl SyntheticSource for RealImageBaseline {
    fn task_classes(&self) -> &[usize] {
        &self.task_classes
    }

    fn label_width(&self) -> usize {
        self.class_count
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    fn materialize_epoch(
        &self,
        _spp: usize,
        _mode: LabelMode,
        _seed: u64,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>, Vec<usize>)> {
        let targets = crate::nn::one_hot(&self.labels, self.class_count);
        Ok((self.images.clone(), targets, self.labels.clone()))
    }

    fn storage(&self) -> StorageReport {
        let mut components = BTreeMap::new();
        components.insert("prototypes".to_string(), self.images.len() as u64 * 4);
        StorageReport::from_components(components, self.class_count, self.image_shape)
    }

    fn content_tag(&self) -> String {
        format!("real-{}", self.labels.len())
    }
}

// ---------------------------------------------------------------------------
// Recovery accuracy
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub n_seeds: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Optional batch size; defaults to the per-epoch sample count per prior
    /// (one sample per prior per batch).
    pub batch_size: Option<usize>,
    pub samples_per_prior: usize,
    pub label_mode: LabelMode,
    /// Stop when the epoch loss has not improved for this many epochs.
    pub early_stop_patience: usize,
    pub arch: EvalArchKind,
    pub arch_width: usize,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            n_seeds: 5,
            epochs: 2000,
            lr: 0.01,
            batch_size: None,
            samples_per_prior: 4,
            label_mode: LabelMode::Soft,
            early_stop_patience: 50,
            arch: EvalArchKind::Convnet,
            arch_width: 16,
            seed: 0,
        }
    }
}

pub const DOWNSTREAM_MOMENTUM: f64 = 0.9;
pub const DOWNSTREAM_WEIGHT_DECAY: f64 = 5e-4;

/// The three-metric record for one (source, architecture) evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub storage: StorageReport,
    pub downstream_minutes: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub accuracies: Vec<f64>,
    pub n_seeds: usize,
    pub architecture: String,
    pub label_mode: LabelMode,
    pub hardware: String,
    pub source_tag: String,
}

/// Train `cfg.n_seeds` freshly initialized networks on regenerated synthetic
/// data and report mean/std test accuracy plus total wall-clock minutes.
pub fn recovery_accuracy(
    source: &dyn SyntheticSource,
    test_data: &DatasetHandle,
    cfg: &DownstreamConfig,
) -> Result<EvalReport> {
    if cfg.n_seeds == 0 {
        return Err(Error::Config("need n_seeds >= 1".into()));
    }
    if test_data.class_count != source.label_width() {
        return Err(Error::Config(format!(
            "test split has {} classes, source labels span {}",
            test_data.class_count,
            source.label_width()
        )));
    }
    if test_data.image_shape != source.image_shape() {
        return Err(Error::Config(format!(
            "test images {:?} != source images {:?}",
            test_data.image_shape,
            source.image_shape()
        )));
    }
    let net = EvalNet::build(
        cfg.arch,
        source.image_shape(),
        cfg.arch_width,
        source.label_width(),
    )?;

    let start = Instant::now();
    let mut accuracies = Vec::with_capacity(cfg.n_seeds);
    for seed_idx in 0..cfg.n_seeds {
        let run_seed = derive_seed(cfg.seed, 0x5eed + seed_idx as u64);
        let acc = train_and_test(source, test_data, &net, cfg, run_seed)?;
        accuracies.push(acc);
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let var =
        accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accuracies.len() as f64;
    Ok(EvalReport {
        storage: source.storage(),
        downstream_minutes: minutes,
        accuracy_mean: mean,
        accuracy_std: var.sqrt(),
        accuracies,
        n_seeds: cfg.n_seeds,
        architecture: cfg.arch.to_string(),
        label_mode: cfg.label_mode,
        hardware: hardware_descriptor(),
        source_tag: source.content_tag(),
    })
}

fn train_and_test(
    source: &dyn SyntheticSource,
    test_data: &DatasetHandle,
    net: &EvalNet,
    cfg: &DownstreamConfig,
    run_seed: u64,
) -> Result<f64> {
    let mut r = rng(run_seed);
    let mut params = net.init(&mut r);
    let mut opt = SgdMomentum::new(cfg.lr, DOWNSTREAM_MOMENTUM, DOWNSTREAM_WEIGHT_DECAY);
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        // on-the-fly regeneration: decoding cost lands in the wall-clock
        let (images, targets, _) = source.materialize_epoch(
            cfg.samples_per_prior,
            cfg.label_mode,
            derive_seed(run_seed, 100 + epoch as u64),
        )?;
        let n = images.shape()[0];
        let batch = cfg.batch_size.unwrap_or_else(|| n.div_ceil(cfg.samples_per_prior.max(1)));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);

        let nchw = nhwc_to_nchw(&images);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch.max(1)) {
            let (bx, bt) = take_rows(&nchw, &targets, chunk);
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let x = g.constant(bx);
            let logits = net.forward(&mut g, &vars, x);
            let t = g.constant(bt);
            let ce = cross_entropy(&mut g, logits, t);
            let loss = g.scalar(ce);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "downstream loss became non-finite at epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            batches += 1;
            let grads = g.grad(ce, &vars);
            let gv: Vec<ArrayD<f64>> = grads.iter().map(|&v| g.val(v).clone()).collect();
            opt.step(&mut params, &gv);
        }
        epoch_loss /= batches.max(1) as f64;
        if epoch_loss < best - 1e-4 {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }

    // test accuracy on the real held-out split
    let n = test_data.len();
    let mut correct = 0usize;
    let all: Vec<usize> = (0..n).collect();
    let test_nchw = nhwc_to_nchw(&test_data.images);
    for idx in all.chunks(256) {
        let (bx, _) = take_rows(&test_nchw, &ArrayD::zeros(IxDyn(&[n, 1])), idx);
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
        let x = g.constant(bx);
        let logits = net.forward(&mut g, &vars, x);
        let pred = argmax_rows(g.val(logits));
        for (row, &i) in idx.iter().enumerate() {
            if pred[row] == test_data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

fn take_rows(images: &ArrayD<f64>, targets: &ArrayD<f64>, idx: &[usize]) -> (ArrayD<f64>, ArrayD<f64>) {
    let mut ishape = images.shape().to_vec();
    ishape[0] = idx.len();
    let mut tshape = targets.shape().to_vec();
    tshape[0] = idx.len();
    let mut bi = ArrayD::<f64>::zeros(IxDyn(&ishape));
    let mut bt = ArrayD::<f64>::zeros(IxDyn(&tshape));
    for (row, &i) in idx.iter().enumerate() {
        bi.index_axis_mut(Axis(0), row)
            .assign(&images.index_axis(Axis(0), i));
        bt.index_axis_mut(Axis(0), row)
            .assign(&targets.index_axis(Axis(0), i));
    }
    (bi, bt)
}

/// Two recovery runs differing only in the label mode.
pub fn soft_vs_hard_ablation(
    source: &dyn SyntheticSource,
    test_data: &DatasetHandle,
    cfg: &DownstreamConfig,
) -> Result<(EvalReport, EvalReport)> {
    let mut soft_cfg = cfg.clone();
    soft_cfg.label_mode = LabelMode::Soft;
    let mut hard_cfg = cfg.clone();
    hard_cfg.label_mode = LabelMode::Hard;
    Ok((
        recovery_accuracy(source, test_data, &soft_cfg)?,
        recovery_accuracy(source, test_data, &hard_cfg)?,
    ))
}

// ---------------------------------------------------------------------------
// Trade-off table
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub label: String,
    pub storage_bytes: u64,
    pub storage_mb: u64,
    pub downstream_minutes: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffTable {
    pub rows: Vec<TradeoffRow>,
}

/// Build the storage/time/accuracy table, sorted ascending by storage.
pub fn tradeoff_table(reports: &[(String, EvalReport)]) -> Result<TradeoffTable> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to tabulate".into()));
    }
    let mut rows: Vec<TradeoffRow> = reports
        .iter()
        .map(|(label, r)| TradeoffRow {
            label: label.clone(),
            storage_bytes: r.storage.total_bytes,
            storage_mb: r.storage.total_mb_rounded,
            downstream_minutes: r.downstream_minutes,
            accuracy_mean: r.accuracy_mean,
            accuracy_std: r.accuracy_std,
        })
        .collect();
    rows.sort_by_key(|r| r.storage_bytes);
    Ok(TradeoffTable { rows })
}

impl TradeoffTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>12} {:>8} {:>10} {:>16}\n",
            "label", "bytes", "MB", "minutes", "accuracy"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>12} {:>8} {:>10.2} {:>9.2} ± {:.2}\n",
                r.label,
                r.storage_bytes,
                r.storage_mb,
                r.downstream_minutes,
                100.0 * r.accuracy_mean,
                100.0 * r.accuracy_std,
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialization")
    }

    pub fn from_json(text: &str) -> Result<TradeoffTable> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad table json: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{PreprocRef, RunMeta};
    use crate::data::{load_dataset, load_eval_split, DeskOptions, PreprocConfig};
    use crate::decoder::{build_decoder, DecoderSpec};
    use crate::latent::{init_priors, InitConfig};

    fn untrained_bundle(classes: usize, lpc: usize, d: usize, img: usize) -> DistilledBundle {
        let ids: Vec<usize> = (0..classes).collect();
        let priors = init_priors(&ids, lpc, d, InitConfig::default(), 1).unwrap();
        let spec = DecoderSpec::custom(d, 2, 8, (img, img, 3)).unwrap();
        let decoder = build_decoder(&spec, 2).unwrap();
        let soft_labels = ArrayD::from_elem(IxDyn(&[classes, lpc, classes]), 1.0 / classes as f64);
        DistilledBundle {
            priors,
            decoder,
            soft_labels,
            preproc: PreprocRef {
                dataset: format!("desk{classes}"),
                per_channel_mean: vec![0.0; 3],
                per_channel_std: vec![1.0; 3],
                zca_epsilon: None,
            },
            meta: RunMeta {
                mode: RepresentationMode::Distributional,
                task_classes: ids,
                image_shape: (img, img, 3),
                seed: 0,
                alpha_final: 0.01,
                steps_run: 0,
                init_var0: 1.0,
                config: serde_json::json!({}),
            },
        }
    }

    #[test]
    fn closed_form_priors_bytes() {
        // C=10, LPC=10, d=64: 10*10*2*64*4 = 51200 bytes of priors
        let b = untrained_bundle(10, 10, 64, 8);
        let report = account_storage(&b);
        assert_eq!(report.components["priors"], 51_200);
    }

    #[test]
    fn empty_components_total_zero() {
        let report =
            StorageReport::from_components(BTreeMap::new(), 10, (8, 8, 3));
        assert_eq!(report.total_bytes, 0);
        assert_eq!(report.total_mb_rounded, 0);
        assert_eq!(report.ipc_equivalent, 0.0);
    }

    #[test]
    fn ipc_equivalent_definition() {
        // total bytes equal to exactly one fp32 image per class -> 1.0
        let mut components = BTreeMap::new();
        components.insert("prototypes".to_string(), (10 * 8 * 8 * 3 * 4) as u64);
        let report = StorageReport::from_components(components, 10, (8, 8, 3));
        assert_eq!(report.ipc_equivalent, 1.0);
    }

    #[test]
    fn dir_accounting_matches_file_sizes() {
        let b = untrained_bundle(3, 2, 4, 8);
        let dir = tempfile::tempdir().unwrap();
        crate::bundle::serialize_bundle(&b, dir.path(), 0.0).unwrap();
        let report = account_storage_dir(dir.path()).unwrap();
        // blob payloads: priors 2*3*2*4*4, decoder, soft labels 3*2*3*4
        assert_eq!(report.components["priors"], 2 * 3 * 2 * 4 * 4);
        assert_eq!(
            report.components["decoder"],
            b.decoder.spec.storage_element_count() as u64 * 4
        );
        assert_eq!(report.components["soft_labels"], 3 * 2 * 3 * 4);
        let total_files: u64 = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().metadata().unwrap().len())
            .sum();
        let headers = 4 * 32; // four blobs
        assert_eq!(report.total_bytes + headers, total_files);
    }

    fn desk_pair(classes: usize) -> (DatasetHandle, DatasetHandle) {
        let cfg = PreprocConfig {
            desk: DeskOptions {
                size: 8,
                train_per_class: 20,
                test_per_class: 10,
                ..DeskOptions::default()
            },
            ..PreprocConfig::default()
        };
        let name = format!("desk{classes}");
        let train = load_dataset(&name, Path::new("."), &cfg).unwrap();
        let test = load_eval_split(&name, Path::new("."), &cfg, &train.preprocessing).unwrap();
        (train, test)
    }

    #[test]
    fn untrained_bundle_scores_near_chance() {
        let (_, test) = desk_pair(4);
        let b = untrained_bundle(4, 1, 8, 8);
        let cfg = DownstreamConfig {
            n_seeds: 3,
            epochs: 4,
            samples_per_prior: 2,
            arch_width: 4,
            ..DownstreamConfig::default()
        };
        let report = recovery_accuracy(&b, &test, &cfg).unwrap();
        assert!(report.accuracy_mean < 0.55, "mean {}", report.accuracy_mean);
        assert!(report.accuracy_mean > 0.05);
        assert!(report.downstream_minutes > 0.0);
        assert_eq!(report.n_seeds, 3);
        assert!(report.accuracy_std >= 0.0);
    }

    #[test]
    fn reports_are_deterministic_modulo_wallclock() {
        let (_, test) = desk_pair(2);
        let b = untrained_bundle(2, 1, 8, 8);
        let cfg = DownstreamConfig {
            n_seeds: 2,
            epochs: 3,
            samples_per_prior: 2,
            arch_width: 4,
            ..DownstreamConfig::default()
        };
        let a = recovery_accuracy(&b, &test, &cfg).unwrap();
        let c = recovery_accuracy(&b, &test, &cfg).unwrap();
        assert_eq!(a.accuracies, c.accuracies);
        assert_eq!(a.source_tag, c.source_tag);
    }

    #[test]
    fn single_seed_has_zero_std() {
        let (_, test) = desk_pair(2);
        let b = untrained_bundle(2, 1, 8, 8);
        let cfg = DownstreamConfig {
            n_seeds: 1,
            epochs: 2,
            samples_per_prior: 2,
            arch_width: 4,
            ..DownstreamConfig::default()
        };
        let report = recovery_accuracy(&b, &test, &cfg).unwrap();
        assert_eq!(report.accuracy_std, 0.0);
        assert!(report.accuracy_mean >= 0.0 && report.accuracy_mean <= 1.0);
    }

    #[test]
    fn uniform_soft_labels_score_chance_but_hard_is_unaffected() {
        let (train, test) = desk_pair(2);
        // real-image content with degenerate (uniform) soft labels
        let mut b = untrained_bundle(2, 2, 8, 8);
        b.soft_labels.fill(0.5);
        let cfg = DownstreamConfig {
            n_seeds: 2,
            epochs: 6,
            samples_per_prior: 4,
            arch_width: 4,
            ..DownstreamConfig::default()
        };
        let (soft, hard) = soft_vs_hard_ablation(&b, &test, &cfg).unwrap();
        // uniform targets carry no information: near chance
        assert!(soft.accuracy_mean < 0.75, "soft {}", soft.accuracy_mean);
        // hard mode still trains on class structure (random decoder output is
        // weak but the run must complete and stay in range)
        assert!(hard.accuracy_mean >= 0.0 && hard.accuracy_mean <= 1.0);
        let _ = train;
    }

    #[test]
    fn baseline_budget_and_balance() {
        let (train, _) = desk_pair(4);
        let per_image = (8 * 8 * 3 * 4) as u64;
        let baseline = RealImageBaseline::at_budget(&train, 9 * per_image + 7, 3).unwrap();
        assert_eq!(baseline.labels.len(), 9);
        assert!(baseline.storage().total_bytes <= 9 * per_image + 7);
        // round-robin keeps classes within one sample of each other
        let mut counts = vec![0usize; 4];
        for &l in &baseline.labels {
            counts[l] += 1;
        }
        let max = *counts.iter().max().unwrap();
        let min = *counts.iter().min().unwrap();
        assert!(max - min <= 1, "unbalanced: {counts:?}");
        // too-small budget is rejected
        assert!(RealImageBaseline::at_budget(&train, per_image - 1, 0).is_err());
    }

    #[test]
    fn tradeoff_table_contracts() {
        let (_, test) = desk_pair(2);
        let b = untrained_bundle(2, 1, 8, 8);
        let cfg = DownstreamConfig {
            n_seeds: 1,
            epochs: 1,
            samples_per_prior: 2,
            arch_width: 4,
            ..DownstreamConfig::default()
        };
        let r1 = recovery_accuracy(&b, &test, &cfg).unwrap();
        let single = tradeoffs_of(vec![("one".into(), r1.clone())]);
        assert_eq!(single.rows.len(), 1);

        let mut r2 = r1.clone();
        r2.storage.total_bytes = r1.storage.total_bytes + 999;
        let table = tradeoffs_of(vec![("big".into(), r2), ("small".into(), r1)]);
        assert_eq!(table.rows[0].label, "small");
        assert_eq!(table.rows[1].label, "big");
        // machine-readable round trip
        let back = TradeoffTable::from_json(&table.to_json()).unwrap();
        assert_eq!(back, table);
        let text = table.render();
        assert!(text.contains("small") && text.contains("big"));
    }

    fn tradeoffs_of(reports: Vec<(String, EvalReport)>) -> TradeoffTable {
        tradeoff_table(&reports).unwrap()
    }

    #[test]
    fn cross_architecture_runs_accept_the_same_bundle() {
        let (_, test) = desk_pair(2);
        let b = untrained_bundle(2, 1, 8, 8);
        let mut tags = Vec::new();
        for arch in [
            EvalArchKind::Convnet,
            EvalArchKind::Vgg,
            EvalArchKind::Residual,
            EvalArchKind::Alexnet,
        ] {
            let cfg = DownstreamConfig {
                n_seeds: 1,
                epochs: 1,
                samples_per_prior: 2,
                arch,
                arch_width: 4,
                ..DownstreamConfig::default()
            };
            let r = recovery_accuracy(&b, &test, &cfg).unwrap();
            assert_eq!(r.architecture, arch.to_string());
            tags.push(r.source_tag);
        }
        assert!(tags.windows(2).all(|w| w[0] == w[1]), "bundle changed between archs");
    }
}
