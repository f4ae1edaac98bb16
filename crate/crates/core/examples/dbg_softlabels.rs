//! Scratch: inspect decoded prior means vs class statistics after MMD-only
//! distillation on the 2-class toy.

use std::path::Path;

use distill_core::data::{load_dataset, DeskOptions, PreprocConfig};
use distill_core::decoder::{decode, DecoderSpec};
use distill_core::distiller::{distill, DistillConfig};
use distill_core::experts::{extract_features, train_experts, FeatureMap, TrainExpertsConfig};
use distill_core::nn::{NormKind, StudentArch};
use distill_core::objectives::{LossWeights, MttConfig};
use ndarray::Axis;

fn main() {
    let cfg = PreprocConfig {
        desk: DeskOptions {
            size: 8,
            noise: 0.3,
            train_per_class: 24,
            test_per_class: 8,
            ..DeskOptions::default()
        },
        ..PreprocConfig::default()
    };
    let data = load_dataset("desk2", Path::new("."), &cfg).unwrap();
    let arch = StudentArch {
        input: data.image_shape,
        block_count: 2,
        width: 8,
        norm: NormKind::Instance,
        class_count: 2,
    };
    let ecfg = TrainExpertsConfig {
        n_experts: 2,
        epochs: 8,
        lr: 0.05,
        batch_size: 16,
        ..TrainExpertsConfig::default()
    };
    let experts = train_experts(&data, &arch, &ecfg, 5).unwrap();
    println!("expert acc: {}", experts[0].final_train_accuracy);

    for (steps, lrp, lrd) in [(150, 0.05, 0.02), (500, 0.08, 0.03), (500, 0.03, 0.01)] {
        let dcfg = DistillConfig {
            steps,
            priors_per_class: 5,
            latent_dim: 8,
            decoder: DecoderSpec::custom(8, 2, 10, (8, 8, 3)).unwrap(),
            weights: LossWeights { mtt: 1.0, mmd: 1.0 },
            mtt: MttConfig { inner_steps: 2, expert_offset: 2, alpha_init: 0.02, max_start: 6 },
            batch_per_class: 6,
            lr_priors: lrp,
            lr_decoder: lrd,
            tap_block: 2,
            seed: 9,
            ..DistillConfig::default()
        };
        let mut log = Vec::new();
        let bundle = distill(&data, &experts, &dcfg, Some(&mut log)).unwrap();
        let text = String::from_utf8(log).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        println!(
            "steps={steps} lrp={lrp} lrd={lrd}: l_mmd {:.4} -> {:.4}",
            first["l_mmd"].as_f64().unwrap(),
            last["l_mmd"].as_f64().unwrap()
        );

        // decode means, classify with the expert
        let means = decode(&bundle.decoder, &bundle.priors.flat_mu(), false).unwrap();
        let map = FeatureMap { expert_id: 0, checkpoint: experts[0].checkpoints.len() - 1, tap_block: 2 };
        let _ = map;
        // pixel-space distance of each decoded mean to the class averages
        let mut class_means = Vec::new();
        for c in 0..2 {
            let members = data.class_members(c).unwrap();
            let mut acc = ndarray::ArrayD::<f64>::zeros(means.index_axis(Axis(0), 0).raw_dim());
            for &i in members {
                acc = acc + data.images.index_axis(Axis(0), i);
            }
            class_means.push(acc.mapv(|v| v / members.len() as f64));
        }
        for row in 0..10 {
            let img = means.index_axis(Axis(0), row);
            let d0: f64 = (&img.to_owned() - &class_means[0]).iter().map(|v| v * v).sum::<f64>();
            let d1: f64 = (&img.to_owned() - &class_means[1]).iter().map(|v| v * v).sum::<f64>();
            let closest = if d0 < d1 { 0 } else { 1 };
            let own = row / 5;
            let sl: Vec<f64> = (0..2).map(|k| bundle.soft_labels[[own, row % 5, k]]).collect();
            println!(
                "  prior {row} (class {own}): pixel-closest {closest} d0 {d0:.1} d1 {d1:.1} soft {sl:?}"
            );
        }
        // feature-space check: mmd between decoded class-0 means and real class batches
        let feats_means = extract_features(&experts, &FeatureMap { expert_id: 0, checkpoint: experts[0].checkpoints.len() - 1, tap_block: 2 }, &means).unwrap();
        println!("  feature norms of means: {:?}", (0..10).map(|r| {
            let row = feats_means.index_axis(Axis(0), r);
            (row.iter().map(|v| v*v).sum::<f64>().sqrt() * 10.0).round() / 10.0
        }).collect::<Vec<_>>());
    }
}
