//! Cross-module integration checks: gradient flow through the full
//! prior -> decoder -> feature -> loss pipeline, optimization telemetry, and
//! soft-label quality on an easy task.

use std::path::Path;
use std::rc::Rc;

use autograd::Graph;
use distill_core::data::{load_dataset, DatasetHandle, DeskOptions, PreprocConfig};
use distill_core::decoder::{build_decoder, decode_graph, DecoderSpec, DecoderVars};
use distill_core::distiller::{distill, generate_soft_labels, DistillConfig};
use distill_core::experts::{train_experts, ExpertTrajectory, TrainExpertsConfig};
use distill_core::latent::{init_priors, sample_rows_on_graph, InitConfig, LatentPriorSet};
use distill_core::nn::{argmax_rows, NormKind, StudentArch};
use distill_core::objectives::{mmd_loss, KernelMixture, LossWeights, MttConfig};
use distill_core::optim::SgdMomentum;
use distill_core::util::{derive_seed, rng};
use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, StandardNormal};

fn desk(classes: usize, noise: f64, per_class: usize) -> DatasetHandle {
    let cfg = PreprocConfig {
        desk: DeskOptions {
            size: 8,
            noise,
            train_per_class: per_class,
            test_per_class: 8,
            ..DeskOptions::default()
        },
        ..PreprocConfig::default()
    };
    load_dataset(&format!("desk{classes}"), Path::new("."), &cfg).unwrap()
}

fn quick_experts(data: &DatasetHandle, width: usize, epochs: usize, seed: u64) -> Vec<ExpertTrajectory> {
    let arch = StudentArch {
        input: data.image_shape,
        block_count: 2,
        width,
        norm: NormKind::Instance,
        class_count: data.class_count,
    };
    let cfg = TrainExpertsConfig {
        n_experts: 2,
        epochs,
        lr: 0.05,
        batch_size: 16,
        ..TrainExpertsConfig::default()
    };
    train_experts(data, &arch, &cfg, seed).unwrap()
}

/// Compute the class-wise MMD loss for the current parameters and,
/// optionally, the gradients needed for one SGD step. All stochastic choices
/// are pinned by `seed` so before/after comparisons are paired.
fn mmd_pass(
    data: &DatasetHandle,
    experts: &[ExpertTrajectory],
    priors: &LatentPriorSet,
    dec: &distill_core::decoder::DecoderParams,
    seed: u64,
    want_grads: bool,
) -> (f64, Option<(ArrayD<f64>, ArrayD<f64>, Vec<ArrayD<f64>>)>) {
    let kernels = KernelMixture::default();
    let mut g = Graph::new();
    let mu = g.param(priors.flat_mu());
    let lv = g.param(priors.flat_log_var());
    let dec_vars = DecoderVars::from_params(&mut g, dec, true);
    let weights = experts[0].weights(experts[0].checkpoints.len() - 1).unwrap();
    let psi_vars: Vec<autograd::Var> = weights.into_iter().map(|t| g.constant(t)).collect();
    let arch = &experts[0].arch;
    let lpc = priors.priors_per_class;
    let mut draw_rng = rng(derive_seed(seed, 1));
    let batch = 6usize;
    let classes: Vec<usize> = (0..data.class_count).collect();
    let loss = mmd_loss(
        &mut g,
        data,
        |g, class| {
            use rand::Rng;
            let rows: Vec<usize> = (0..batch)
                .map(|_| class * lpc + draw_rng.gen_range(0..lpc))
                .collect();
            let eps = ArrayD::from_shape_simple_fn(IxDyn(&[batch, priors.latent_dim]), || {
                let z: f64 = StandardNormal.sample(&mut draw_rng);
                z
            });
            let z = sample_rows_on_graph(g, mu, lv, Rc::new(rows), Some(eps));
            let (imgs, _) = decode_graph(g, dec, &dec_vars, z, true)?;
            Ok(imgs)
        },
        |g, x| arch.features(g, &psi_vars, x, 2),
        &kernels,
        &classes,
        batch,
        derive_seed(seed, 2),
    )
    .unwrap();
    let value = g.scalar(loss);
    if !want_grads {
        return (value, None);
    }
    let mut wrt = vec![mu, lv];
    let dvars = dec_vars.all();
    wrt.extend(&dvars);
    let grads = g.grad(loss, &wrt);
    let gmu = g.val(grads[0]).clone();
    let glv = g.val(grads[1]).clone();
    let gdec: Vec<ArrayD<f64>> = grads[2..].iter().map(|&v| g.val(v).clone()).collect();
    (value, Some((gmu, glv, gdec)))
}

/// One gradient step on the class-wise MMD objective lowers the paired loss,
/// averaged over independent seeds; single-class data exercises the smallest
/// class-coverage case.
#[test]
fn mmd_step_decreases_loss_on_single_class_toy() {
    let full = desk(2, 0.4, 12);
    let data = full.restrict_to_classes(&[0]).unwrap();
    let experts = quick_experts(&full, 6, 3, 3);
    // single-class view of the experts for validation-free use here: the
    // feature map only uses conv blocks, so class heads are irrelevant
    let spec = DecoderSpec::custom(8, 2, 10, (8, 8, 3)).unwrap();

    let mut deltas = Vec::new();
    for seed in 0..20u64 {
        let priors = init_priors(&[0], 2, 8, InitConfig::default(), derive_seed(seed, 10)).unwrap();
        let dec = build_decoder(&spec, derive_seed(seed, 11)).unwrap();
        let (before, grads) = mmd_pass(&data, &experts, &priors, &dec, seed, true);
        let (gmu, glv, gdec) = grads.unwrap();

        let mut priors2 = priors.clone();
        let lr = 0.05;
        priors2.mu = &priors.mu
            - &gmu
                .into_shape_with_order(IxDyn(&[1, 2, 8]))
                .unwrap()
                .mapv(|v| v * lr);
        priors2.log_var = &priors.log_var
            - &glv
                .into_shape_with_order(IxDyn(&[1, 2, 8]))
                .unwrap()
                .mapv(|v| v * lr);
        let mut dec2 = dec.clone();
        let mut opt = SgdMomentum::new(0.02, 0.0, 0.0);
        let mut tensors = dec2.trainable();
        opt.step(&mut tensors, &gdec);
        dec2.set_trainable(&tensors);

        let (after, _) = mmd_pass(&data, &experts, &priors2, &dec2, seed, false);
        deltas.push(before - after);
    }
    let mean: f64 = deltas.iter().sum::<f64>() / deltas.len() as f64;
    assert!(
        mean > 0.0,
        "MMD did not decrease on average: mean delta {mean}, deltas {deltas:?}"
    );
}

/// Run-log telemetry over a 500-step toy: the combined loss must end below
/// its moving average around step 10.
#[test]
fn combined_loss_trends_down_over_500_steps() {
    let data = desk(2, 0.4, 16);
    let experts = quick_experts(&data, 6, 4, 7);
    let cfg = DistillConfig {
        steps: 500,
        priors_per_class: 1,
        latent_dim: 8,
        decoder: DecoderSpec::custom(8, 2, 10, (8, 8, 3)).unwrap(),
        mtt: MttConfig { inner_steps: 2, expert_offset: 2, alpha_init: 0.02, max_start: 2 },
        batch_per_class: 4,
        lr_priors: 0.03,
        lr_decoder: 0.01,
        weights: LossWeights { mtt: 1.0, mmd: 1.0 },
        tap_block: 2,
        seed: 21,
        ..DistillConfig::default()
    };
    let mut log = Vec::new();
    distill(&data, &experts, &cfg, Some(&mut log)).unwrap();
    let text = String::from_utf8(log).unwrap();
    let losses: Vec<f64> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 500);
    let early: f64 = losses[5..15].iter().sum::<f64>() / 10.0;
    let late: f64 = losses[490..].iter().sum::<f64>() / 10.0;
    assert!(
        late < early,
        "combined loss did not trend down: step-10 average {early:.4}, final {late:.4}"
    );
}

/// With a near-perfect expert on an easy 2-class task, the soft label of
/// almost every distilled prior points at the prior's own class.
#[test]
fn soft_label_argmax_matches_prior_class_on_easy_task() {
    let data = desk(2, 0.3, 24);
    let experts = quick_experts(&data, 8, 8, 5);
    assert!(
        experts[0].final_train_accuracy >= 0.95,
        "expert too weak ({}); soft-label check needs a near-perfect expert",
        experts[0].final_train_accuracy
    );
    // the dual objective matters here: the trajectory-matching arm trains
    // students on hard-labeled synthetic batches, which pins each prior to
    // its own class in a way distribution matching alone does not
    let cfg = DistillConfig {
        steps: 500,
        priors_per_class: 5,
        latent_dim: 8,
        decoder: DecoderSpec::custom(8, 2, 10, (8, 8, 3)).unwrap(),
        weights: LossWeights { mtt: 1.0, mmd: 1.0 },
        mtt: MttConfig { inner_steps: 2, expert_offset: 2, alpha_init: 0.02, max_start: 6 },
        batch_per_class: 6,
        lr_priors: 0.03,
        lr_decoder: 0.01,
        tap_block: 2,
        seed: 9,
        ..DistillConfig::default()
    };
    let bundle = distill(&data, &experts, &cfg, None).unwrap();
    let labels = generate_soft_labels(&bundle.priors, &bundle.decoder, &experts).unwrap();
    let flat = labels.into_shape_with_order((10, 2)).unwrap().into_dyn();
    let argmax = argmax_rows(&flat);
    let hits = argmax
        .iter()
        .enumerate()
        .filter(|(row, &am)| am == row / 5)
        .count();
    assert!(hits >= 9, "only {hits}/10 soft labels point at their own class");
}
