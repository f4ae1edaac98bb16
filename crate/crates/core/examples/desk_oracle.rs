//! Scratch: ceiling estimate for the desk task — train downstream nets
//! directly on the clean class templates (the generative truth) and on real
//! data subsets, reporting test accuracy for each arm.

use std::path::Path;

use distill_core::data::{generate_desk, load_dataset, load_eval_split, DeskOptions, PreprocConfig, Split};
use distill_core::distiller::LabelMode;
use distill_core::error::Result;
use distill_core::eval::{recovery_accuracy, DownstreamConfig, RealImageBaseline, StorageReport, SyntheticSource};
use distill_core::nn::EvalArchKind;
use ndarray::{ArrayD, Axis};
use std::collections::BTreeMap;

struct FixedImages {
    images: ArrayD<f64>,
    labels: Vec<usize>,
    classes: Vec<usize>,
    shape: (usize, usize, usize),
}

impl SyntheticSource for FixedImages {
    fn task_classes(&self) -> &[usize] {
        &self.classes
    }
    fn label_width(&self) -> usize {
        self.classes.len()
    }
    fn image_shape(&self) -> (usize, usize, usize) {
        self.shape
    }
    fn materialize_epoch(
        &self,
        _spp: usize,
        _mode: LabelMode,
        _seed: u64,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>, Vec<usize>)> {
        Ok((
            self.images.clone(),
            distill_core::nn::one_hot(&self.labels, self.classes.len()),
            self.labels.clone(),
        ))
    }
    fn storage(&self) -> StorageReport {
        StorageReport::from_components(BTreeMap::new(), self.classes.len(), self.shape)
    }
    fn content_tag(&self) -> String {
        "oracle".into()
    }
}

fn main() {
    let classes = 10usize;
    let noise: f64 = std::env::var("ORACLE_NOISE").ok().and_then(|v| v.parse().ok()).unwrap_or(1.2);
    let pcfg = PreprocConfig {
        desk: DeskOptions {
            size: 16,
            noise,
            shift: 4,
            train_per_class: 150,
            test_per_class: 100,
            ..DeskOptions::default()
        },
        ..PreprocConfig::default()
    };
    let train = load_dataset("desk10", Path::new("."), &pcfg).unwrap();
    let test = load_eval_split("desk10", Path::new("."), &pcfg, &train.preprocessing).unwrap();

    // clean templates: same generator at zero noise / zero shift, one per class,
    // standardized with the TRAIN statistics
    let clean_opts = DeskOptions {
        size: 16,
        noise: 1e-9,
        shift: 0,
        train_per_class: 1,
        test_per_class: 1,
        ..DeskOptions::default()
    };
    let (raw, labels) = generate_desk(classes, &clean_opts, Split::Train);
    let mut clean = raw;
    for c in 0..3 {
        let m = train.preprocessing.per_channel_mean[c];
        let s = train.preprocessing.per_channel_std[c];
        clean.index_axis_mut(Axis(3), c).mapv_inplace(|v| (v - m) / s);
    }

    let eval_cfg = DownstreamConfig {
        n_seeds: 3,
        epochs: std::env::var("ORACLE_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(300),
        lr: std::env::var("ORACLE_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.02),
        samples_per_prior: 1,
        label_mode: LabelMode::Hard,
        early_stop_patience: 60,
        arch: EvalArchKind::Convnet,
        arch_width: 16,
        seed: 23,
        ..DownstreamConfig::default()
    };

    let oracle = FixedImages {
        images: clean.clone(),
        labels: labels.clone(),
        classes: (0..classes).collect(),
        shape: train.image_shape,
    };
    let r = recovery_accuracy(&oracle, &test, &eval_cfg).unwrap();
    println!(
        "clean templates (1/class): {:.2}% ± {:.2}",
        100.0 * r.accuracy_mean,
        100.0 * r.accuracy_std
    );

    // clean templates repeated with per-epoch noise would approximate the true
    // generator; emulate by 4 clean copies (no noise) to test capacity alone
    for budget_images in [18usize, 40, 100] {
        let per_image = (16 * 16 * 3 * 4) as u64;
        let baseline =
            RealImageBaseline::at_budget(&train, budget_images as u64 * per_image, 3).unwrap();
        let r = recovery_accuracy(&baseline, &test, &eval_cfg).unwrap();
        println!(
            "real {:>3} images: {:.2}% ± {:.2}",
            budget_images,
            100.0 * r.accuracy_mean,
            100.0 * r.accuracy_std
        );
    }

    // full real data reference
    let all = RealImageBaseline::at_budget(&train, u64::MAX / 2, 3).unwrap();
    let r = recovery_accuracy(&all, &test, &eval_cfg).unwrap();
    println!(
        "real all ({}): {:.2}% ± {:.2}",
        all.labels.len(),
        100.0 * r.accuracy_mean,
        100.0 * r.accuracy_std
    );
}
