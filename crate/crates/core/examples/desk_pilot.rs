//! Pilot driver for sizing the desk-scale pipeline: runs experts, one
//! distillation arm, and the evaluation pair (distilled vs equal-storage
//! real-image baseline), printing accuracies and wall-times per phase.
//!
//! Knobs via env vars so hyperparameters can be swept without recompiling.

use std::path::Path;
use std::time::Instant;

use distill_core::data::{load_dataset, load_eval_split, DeskOptions, PreprocConfig};
use distill_core::decoder::DecoderSpec;
use distill_core::distiller::{distill, DistillConfig, LabelMode};
use distill_core::eval::{
    recovery_accuracy, DownstreamConfig, RealImageBaseline, SyntheticSource,
};
use distill_core::experts::{train_experts, TrainExpertsConfig};
use distill_core::latent::InitConfig;
use distill_core::nn::{EvalArchKind, NormKind, StudentArch};
use distill_core::objectives::{KernelMixture, LossWeights, MttConfig};

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let size = env_usize("PILOT_SIZE", 16);
    let classes = env_usize("PILOT_CLASSES", 10);
    let noise = env_f64("PILOT_NOISE", 0.8);
    let steps = env_usize("PILOT_STEPS", 300);
    let experts_n = env_usize("PILOT_EXPERTS", 3);
    let expert_epochs = env_usize("PILOT_EXPERT_EPOCHS", 10);
    let width = env_usize("PILOT_WIDTH", 16);
    let inner = env_usize("PILOT_INNER", 8);
    let bpc = env_usize("PILOT_BPC", 8);
    let lpc = env_usize("PILOT_LPC", 1);
    let latent = env_usize("PILOT_LATENT", 32);
    let dec_c0 = env_usize("PILOT_DEC_C0", 48);
    let dec_blocks = env_usize("PILOT_DEC_BLOCKS", 3);
    let lr_priors = env_f64("PILOT_LR_PRIORS", 0.05);
    let lr_decoder = env_f64("PILOT_LR_DECODER", 0.02);
    let alpha0 = env_f64("PILOT_ALPHA", 0.02);
    let eval_epochs = env_usize("PILOT_EVAL_EPOCHS", 250);
    let eval_seeds = env_usize("PILOT_EVAL_SEEDS", 5);
    let spp = env_usize("PILOT_SPP", 4);
    let w_mtt = env_f64("PILOT_W_MTT", 1.0);
    let w_mmd = env_f64("PILOT_W_MMD", 1.0);

    let pcfg = PreprocConfig {
        desk: DeskOptions {
            size,
            noise,
            shift: env_usize("PILOT_SHIFT", 3),
            train_per_class: env_usize("PILOT_TRAIN_PC", 150),
            test_per_class: env_usize("PILOT_TEST_PC", 100),
            ..DeskOptions::default()
        },
        ..PreprocConfig::default()
    };
    let name = format!("desk{classes}");
    let t0 = Instant::now();
    let train = load_dataset(&name, Path::new("."), &pcfg).unwrap();
    let test = load_eval_split(&name, Path::new("."), &pcfg, &train.preprocessing).unwrap();
    println!(
        "data: {} train / {} test {}x{}x3  [{:.1}s]",
        train.len(),
        test.len(),
        size,
        size,
        t0.elapsed().as_secs_f64()
    );

    let arch = StudentArch {
        input: train.image_shape,
        block_count: 2,
        width,
        norm: NormKind::Instance,
        class_count: classes,
    };
    let ecfg = TrainExpertsConfig {
        n_experts: experts_n,
        epochs: expert_epochs,
        lr: env_f64("PILOT_EXPERT_LR", 0.02),
        batch_size: 64,
        ..TrainExpertsConfig::default()
    };
    let t0 = Instant::now();
    let experts = train_experts(&train, &arch, &ecfg, 17).unwrap();
    for e in &experts {
        println!(
            "expert {}: {} ckpts, train acc {:.3}",
            e.expert_id,
            e.checkpoints.len(),
            e.final_train_accuracy
        );
    }
    println!("experts trained [{:.1}s]", t0.elapsed().as_secs_f64());

    let dcfg = DistillConfig {
        steps,
        lr_priors,
        lr_decoder,
        lr_alpha: env_f64("PILOT_LR_ALPHA", 1e-4),
        mtt: MttConfig {
            inner_steps: inner,
            expert_offset: 2,
            alpha_init: alpha0,
            max_start: (expert_epochs.saturating_sub(2)).min(6),
        },
        kernels: KernelMixture::default(),
        weights: LossWeights { mtt: w_mtt, mmd: w_mmd },
        batch_per_class: bpc,
        priors_per_class: lpc,
        latent_dim: latent,
        init: InitConfig::default(),
        decoder: DecoderSpec::custom(latent, dec_blocks, dec_c0, train.image_shape).unwrap(),
        tap_block: 2,
        seed: 5,
        ..DistillConfig::default()
    };
    println!(
        "decoder: {} params, {} storage elements",
        dcfg.decoder.param_count(),
        dcfg.decoder.storage_element_count()
    );
    let t0 = Instant::now();
    let mut log = Vec::new();
    let bundle = distill(&train, &experts, &dcfg, Some(&mut log)).unwrap();
    let distill_secs = t0.elapsed().as_secs_f64();
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    for probe in [0, steps / 4, steps / 2, 3 * steps / 4, steps - 1] {
        if let Some(line) = lines.get(probe) {
            println!("  {line}");
        }
    }
    println!("distilled [{distill_secs:.1}s]");

    let storage = bundle.storage();
    println!(
        "bundle storage: {} bytes ({} MB, ipc-equivalent {:.2})",
        storage.total_bytes, storage.total_mb_rounded, storage.ipc_equivalent
    );

    let eval_cfg = DownstreamConfig {
        n_seeds: eval_seeds,
        epochs: eval_epochs,
        lr: env_f64("PILOT_EVAL_LR", 0.01),
        samples_per_prior: spp,
        label_mode: LabelMode::Soft,
        early_stop_patience: 50,
        arch: EvalArchKind::Convnet,
        arch_width: width,
        seed: 23,
        ..DownstreamConfig::default()
    };
    let t0 = Instant::now();
    let distilled_report = recovery_accuracy(&bundle, &test, &eval_cfg).unwrap();
    println!(
        "distilled: {:.2}% ± {:.2}  (seeds {:?})  [{:.1}s]",
        100.0 * distilled_report.accuracy_mean,
        100.0 * distilled_report.accuracy_std,
        distilled_report
            .accuracies
            .iter()
            .map(|a| (a * 1000.0).round() / 10.0)
            .collect::<Vec<_>>(),
        t0.elapsed().as_secs_f64()
    );

    let baseline = RealImageBaseline::at_budget(&train, storage.total_bytes, 3).unwrap();
    println!("baseline: {} real images at equal storage", baseline.labels.len());
    let t0 = Instant::now();
    let baseline_report = recovery_accuracy(&baseline, &test, &eval_cfg).unwrap();
    println!(
        "baseline: {:.2}% ± {:.2}  (seeds {:?})  [{:.1}s]",
        100.0 * baseline_report.accuracy_mean,
        100.0 * baseline_report.accuracy_std,
        baseline_report
            .accuracies
            .iter()
            .map(|a| (a * 1000.0).round() / 10.0)
            .collect::<Vec<_>>(),
        t0.elapsed().as_secs_f64()
    );
    println!(
        "margin: {:+.2} points",
        100.0 * (distilled_report.accuracy_mean - baseline_report.accuracy_mean)
    );
}
