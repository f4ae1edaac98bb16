//! The outer optimization loop: jointly learn the latent priors, the decoder,
//! and the inner-loop step size against the combined trajectory-matching +
//! MMD objective, then attach expert-generated soft labels.

use autograd::{Graph, Var};
use ndarray::{ArrayD, IxDyn};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::rc::Rc;
use std::time::Instant;

use crate::bundle::{DistilledBundle, PreprocRef, RepresentationMode, RunMeta};
use crate::data::DatasetHandle;
use crate::decoder::{
    build_decoder, decode, decode_graph, update_running_stats, DecoderParams, DecoderSpec,
    DecoderVars,
};
use crate::error::{Error, Result};
use crate::experts::{sample_expert_window, ExpertTrajectory};
use crate::latent::{init_priors, sample_rows_on_graph, InitConfig, LatentPriorSet};
use crate::nn::{one_hot, softmax_rows};
use crate::objectives::{combined_loss, mmd_loss, mtt_loss, KernelMixture, LossWeights, MttConfig};
use crate::optim::SgdMomentum;
use crate::util::{derive_seed, rng};

pub use crate::bundle::DistilledBundle as Bundle;

const ALPHA_FLOOR: f64 = 1e-6;
const MAX_WINDOW_RESAMPLES: usize = 10;
const MAX_NAN_STREAK: usize = 3;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr_priors: f64,
    pub lr_decoder: f64,
    pub lr_alpha: f64,
    pub mtt: MttConfig,
    pub kernels: KernelMixture,
    pub weights: LossWeights,
    pub batch_per_class: usize,
    pub mode: RepresentationMode,
    pub priors_per_class: usize,
    pub latent_dim: usize,
    pub init: InitConfig,
    pub decoder: DecoderSpec,
    /// Which expert block supplies the MMD feature map.
    pub tap_block: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 300,
            lr_priors: 0.05,
            lr_decoder: 0.02,
            lr_alpha: 1e-4,
            mtt: MttConfig::default(),
            kernels: KernelMixture::default(),
            weights: LossWeights::default(),
            batch_per_class: 8,
            mode: RepresentationMode::Distributional,
            priors_per_class: 1,
            latent_dim: 32,
            init: InitConfig::default(),
            decoder: DecoderSpec::custom(32, 3, 48, (16, 16, 3)).expect("default decoder"),
            tap_block: 2,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("need at least one distillation step".into()));
        }
        if self.lr_priors <= 0.0 || self.lr_decoder <= 0.0 || self.lr_alpha <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_per_class < 2 {
            return Err(Error::Config(
                "batch_per_class must be >= 2 (unbiased MMD precondition)".into(),
            ));
        }
        self.mtt.validate()?;
        self.kernels.validate()?;
        self.weights.validate()?;
        self.decoder.validate()?;
        Ok(())
    }
}

/// One line of the structured run log.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub d_mtt: f64,
    pub l_mmd: f64,
    pub loss: f64,
    pub alpha: f64,
    pub wall_ms: f64,
}

// ---------------------------------------------------------------------------
// Main loop
// ---------------------------------------------------------------------------

/// Distill `data` against the trajectories in `experts`, producing the
/// serializable bundle. `run_log` receives one JSON line per step.
pub fn distill(
    data: &DatasetHandle,
    experts: &[ExpertTrajectory],
    cfg: &DistillConfig,
    mut run_log: Option<&mut dyn Write>,
) -> Result<DistilledBundle> {
    cfg.validate()?;
    if experts.is_empty() {
        return Err(Error::Config("no expert trajectories supplied".into()));
    }
    let arch = &experts[0].arch;
    for t in experts {
        if t.task_classes != data.source_classes {
            return Err(Error::Config(format!(
                "expert {} trained on classes {:?}, data covers {:?}",
                t.expert_id, t.task_classes, data.source_classes
            )));
        }
    }
    if arch.class_count != data.class_count {
        return Err(Error::Config("expert class count disagrees with data".into()));
    }
    if cfg.decoder.output_shape != data.image_shape {
        return Err(Error::Config(format!(
            "decoder output {:?} != dataset images {:?}",
            cfg.decoder.output_shape, data.image_shape
        )));
    }
    if cfg.tap_block == 0 || cfg.tap_block > arch.block_count {
        return Err(Error::Config(format!(
            "tap block {} out of range 1..={}",
            cfg.tap_block, arch.block_count
        )));
    }

    let c = data.class_count;
    let lpc = cfg.priors_per_class;
    let fixed = cfg.mode == RepresentationMode::Fixed;

    let mut priors = init_priors(
        &data.source_classes,
        lpc,
        cfg.latent_dim,
        cfg.init,
        derive_seed(cfg.seed, 1),
    )?;
    let mut dec = build_decoder(&cfg.decoder, derive_seed(cfg.seed, 2))?;
    let mut alpha = cfg.mtt.alpha_init;

    let mut prior_opt = SgdMomentum::new(cfg.lr_priors, 0.5, 0.0);
    let mut dec_opt = SgdMomentum::new(cfg.lr_decoder, 0.5, 0.0);

    // snapshot for the non-finite recovery path
    let mut last_good = (priors.clone(), dec.clone(), alpha, 0usize);
    let mut nan_streak = 0usize;
    let start_time = Instant::now();

    for step in 0..cfg.steps {
        let step_seed = derive_seed(cfg.seed, 1000 + step as u64);
        let step_start = Instant::now();
        match run_step(data, experts, cfg, &priors, &dec, alpha, step_seed) {
            Ok(out) => {
                nan_streak = 0;
                let StepOutput { prior_grads, dec_grads, alpha_grad, stats, d_mtt, l_mmd, loss } =
                    out;
                // priors: [mu, log_var] together (log_var frozen in fixed mode)
                let mut ptensors = if fixed {
                    vec![priors.mu.clone()]
                } else {
                    vec![priors.mu.clone(), priors.log_var.clone()]
                };
                prior_opt.step(&mut ptensors, &prior_grads);
                priors.mu = ptensors[0].clone();
                if !fixed {
                    priors.log_var = ptensors[1].clone();
                }
                let mut dtensors = dec.trainable();
                dec_opt.step(&mut dtensors, &dec_grads);
                dec.set_trainable(&dtensors);
                for group in &stats {
                    update_running_stats(&mut dec, group);
                }
                alpha = (alpha - cfg.lr_alpha * alpha_grad).max(ALPHA_FLOOR);

                if let Some(w) = run_log.as_deref_mut() {
                    let rec = StepRecord {
                        step,
                        d_mtt,
                        l_mmd,
                        loss,
                        alpha,
                        wall_ms: step_start.elapsed().as_secs_f64() * 1e3,
                    };
                    let _ = writeln!(w, "{}", serde_json::to_string(&rec).unwrap());
                }
                last_good = (priors.clone(), dec.clone(), alpha, step);
            }
            Err(Error::Numeric(msg)) => {
                nan_streak += 1;
                log::warn!("step {step}: non-finite loss ({msg}); restoring last good state");
                let (p, d, a, _) = last_good.clone();
                priors = p;
                dec = d;
                alpha = a;
                if nan_streak >= MAX_NAN_STREAK {
                    return Err(Error::NumericAbort { step, last_good_step: last_good.3 });
                }
            }
            Err(e) => return Err(e),
        }
    }

    let soft_labels = generate_soft_labels(&priors, &dec, experts)?;
    let bundle = DistilledBundle {
        priors,
        decoder: dec,
        soft_labels,
        preproc: PreprocRef::from_stats(&data.name, &data.preprocessing),
        meta: RunMeta {
            mode: cfg.mode,
            task_classes: data.source_classes.clone(),
            image_shape: data.image_shape,
            seed: cfg.seed,
            alpha_final: alpha,
            steps_run: cfg.steps,
            init_var0: cfg.init.var0,
            config: serde_json::to_value(cfg).expect("config echo"),
        },
    };
    bundle.validate()?;
    log::info!(
        "distilled {} classes in {:.1}s",
        c,
        start_time.elapsed().as_secs_f64()
    );
    Ok(bundle)
}

struct StepOutput {
    prior_grads: Vec<ArrayD<f64>>,
    dec_grads: Vec<ArrayD<f64>>,
    alpha_grad: f64,
    stats: Vec<Vec<(ArrayD<f64>, ArrayD<f64>)>>,
    d_mtt: f64,
    l_mmd: f64,
    loss: f64,
}

/// Build and differentiate the combined objective for one outer step.
fn run_step(
    data: &DatasetHandle,
    experts: &[ExpertTrajectory],
    cfg: &DistillConfig,
    priors: &LatentPriorSet,
    dec: &DecoderParams,
    alpha: f64,
    step_seed: u64,
) -> Result<StepOutput> {
    let arch = &experts[0].arch;
    let c = data.class_count;
    let lpc = cfg.priors_per_class;
    let d = cfg.latent_dim;
    let fixed = cfg.mode == RepresentationMode::Fixed;
    let mut r = rng(step_seed);

    // window: resample on bitwise-degenerate checkpoint pairs
    let mut window = None;
    for _ in 0..MAX_WINDOW_RESAMPLES {
        let (s, t, meta) =
            sample_expert_window(experts, cfg.mtt.max_start, cfg.mtt.expert_offset, &mut r)?;
        if s != t {
            window = Some((s, t, meta));
            break;
        }
    }
    let (w_start, w_target, meta) = window.ok_or_else(|| {
        Error::DegenerateWindow("all sampled windows have coinciding checkpoints".into())
    })?;

    let mut g = Graph::new();
    let mu_v = g.param(priors.flat_mu());
    let lv_v = if fixed {
        g.constant(priors.flat_log_var())
    } else {
        g.param(priors.flat_log_var())
    };
    let alpha_v = g.param(ArrayD::from_elem(IxDyn(&[]), alpha));
    let dec_vars = DecoderVars::from_params(&mut g, dec, true);
    let mut bn_stats_vars: Vec<Vec<(Var, Var)>> = Vec::new();

    // expert weights for the feature map: same (expert, t) as the window
    let psi_weights = experts[meta.expert].weights(meta.start_checkpoint)?;
    let psi_vars: Vec<Var> = psi_weights.into_iter().map(|t| g.constant(t)).collect();

    // synthetic batch builder: rows indexed into the flattened [C*LPC, d]
    // parameter matrices; reparameterized unless running in fixed mode
    let draw_synth = |g: &mut Graph,
                          rows: Vec<usize>,
                          r: &mut rand_chacha::ChaCha12Rng,
                          bn_acc: &mut Vec<Vec<(Var, Var)>>|
     -> Result<Var> {
        let eps = if fixed {
            None
        } else {
            Some(ArrayD::from_shape_simple_fn(IxDyn(&[rows.len(), d]), || {
                let z: f64 = StandardNormal.sample(r);
                z
            }))
        };
        let z = sample_rows_on_graph(g, mu_v, lv_v, Rc::new(rows), eps);
        let (imgs, stats) = decode_graph(g, dec, &dec_vars, z, true)?;
        bn_acc.push(stats);
        Ok(imgs)
    };

    // trajectory-matching arm
    let d_mtt_var = if cfg.weights.mtt > 0.0 {
        let all_rows: Vec<usize> = (0..c * lpc).collect();
        let labels: Vec<usize> = all_rows.iter().map(|&row| row / lpc).collect();
        let targets = one_hot(&labels, c);
        let v = mtt_loss(
            &mut g,
            arch,
            &w_start,
            &w_target,
            alpha_v,
            |g, _| {
                let imgs = draw_synth(g, all_rows.clone(), &mut r, &mut bn_stats_vars)?;
                Ok((imgs, targets.clone()))
            },
            &cfg.mtt,
        )?;
        Some(v)
    } else {
        None
    };

    // distribution-matching arm
    let l_mmd_var = if cfg.weights.mmd > 0.0 {
        let classes: Vec<usize> = (0..c).collect();
        let v = mmd_loss(
            &mut g,
            data,
            |g, class| {
                let rows: Vec<usize> = (0..cfg.batch_per_class)
                    .map(|_| class * lpc + r.gen_range(0..lpc))
                    .collect();
                draw_synth(g, rows, &mut r, &mut bn_stats_vars)
            },
            |g, x| arch.features(g, &psi_vars, x, cfg.tap_block),
            &cfg.kernels,
            &classes,
            cfg.batch_per_class,
            derive_seed(step_seed, 7),
        )?;
        Some(v)
    } else {
        None
    };

    let loss_var = match (d_mtt_var, l_mmd_var) {
        (Some(a), Some(b)) => combined_loss(&mut g, a, b, &cfg.weights),
        (Some(a), None) => g.mul_scalar(a, cfg.weights.mtt),
        (None, Some(b)) => g.mul_scalar(b, cfg.weights.mmd),
        (None, None) => unreachable!("weights validated non-zero"),
    };
    let loss = g.scalar(loss_var);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("combined loss = {loss}")));
    }

    let mut wrt = vec![mu_v];
    if !fixed {
        wrt.push(lv_v);
    }
    let dvars = dec_vars.all();
    wrt.extend(&dvars);
    wrt.push(alpha_v);
    let grads = g.grad(loss_var, &wrt);
    let gvals: Vec<ArrayD<f64>> = grads.iter().map(|&v| g.val(v).clone()).collect();
    if gvals.iter().any(|t| !crate::util::all_finite(t)) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }

    let n_prior = if fixed { 1 } else { 2 };
    let prior_shape = [c, lpc, d];
    let prior_grads: Vec<ArrayD<f64>> = gvals[..n_prior]
        .iter()
        .map(|t| {
            t.clone()
                .into_shape_with_order(IxDyn(&prior_shape))
                .expect("prior grad reshape")
        })
        .collect();
    let dec_grads = gvals[n_prior..n_prior + dvars.len()].to_vec();
    let alpha_grad = *gvals.last().unwrap().iter().next().unwrap();

    let stats: Vec<Vec<(ArrayD<f64>, ArrayD<f64>)>> = bn_stats_vars
        .iter()
        .map(|group| {
            group
                .iter()
                .map(|&(m, v)| (g.val(m).clone(), g.val(v).clone()))
                .collect()
        })
        .collect();

    Ok(StepOutput {
        prior_grads,
        dec_grads,
        alpha_grad,
        stats,
        d_mtt: d_mtt_var.map(|v| g.scalar(v)).unwrap_or(0.0),
        l_mmd: l_mmd_var.map(|v| g.scalar(v)).unwrap_or(0.0),
        loss,
    })
}

// ---------------------------------------------------------------------------
// Soft labels
// ---------------------------------------------------------------------------

/// Decode every prior mean and store the softmax outputs of the designated
/// expert (the first trajectory's final checkpoint).
pub fn generate_soft_labels(
    priors: &LatentPriorSet,
    dec: &DecoderParams,
    experts: &[ExpertTrajectory],
) -> Result<ArrayD<f64>> {
    let designated = experts
        .first()
        .ok_or_else(|| Error::Config("no experts for soft labels".into()))?;
    let arch = &designated.arch;
    let weights = designated.weights(designated.checkpoints.len() - 1)?;
    let c = priors.class_count();
    let lpc = priors.priors_per_class;

    let z = priors.flat_mu();
    let imgs = decode(dec, &z, false)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = weights.into_iter().map(|t| g.constant(t)).collect();
    let x = g.constant(crate::util::nhwc_to_nchw(&imgs));
    let logits = arch.forward(&mut g, &vars, x);
    let probs = softmax_rows(g.val(logits));
    probs
        .into_shape_with_order(IxDyn(&[c, lpc, arch.class_count]))
        .map_err(|e| Error::Shape(e.to_string()))
}

// ---------------------------------------------------------------------------
// Materialization
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Soft,
    Hard,
}

/// A decoded synthetic dataset ready for downstream training.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    /// [N, H, W, C]
    pub images: ArrayD<f64>,
    /// [N, width] rows: soft labels or one-hot, over `label_width` columns.
    pub targets: ArrayD<f64>,
    /// Local class id per row.
    pub labels: Vec<usize>,
    /// Global class ids addressed by the local ids.
    pub task_classes: Vec<usize>,
}

/// Draw `samples_per_prior` latents per (class, prior), decode them, and pair
/// each with its prior's soft label or hard class id. Fixed-mode bundles
/// decode their stored codes directly (mean-only).
pub fn materialize(
    bundle: &DistilledBundle,
    samples_per_prior: usize,
    label_mode: LabelMode,
    seed: u64,
) -> Result<SyntheticDataset> {
    if samples_per_prior == 0 {
        return Err(Error::Config("samples_per_prior must be >= 1".into()));
    }
    let p = &bundle.priors;
    let c = p.class_count();
    let lpc = p.priors_per_class;
    let n = c * lpc * samples_per_prior;
    let mut r = rng(seed);

    let mut z = ArrayD::<f64>::zeros(IxDyn(&[n, p.latent_dim]));
    let mut labels = Vec::with_capacity(n);
    let mut targets = ArrayD::<f64>::zeros(IxDyn(&[n, c]));
    let mut row = 0;
    for class in 0..c {
        for prior in 0..lpc {
            for _ in 0..samples_per_prior {
                for j in 0..p.latent_dim {
                    let mu = p.mu[[class, prior, j]];
                    z[[row, j]] = match bundle.meta.mode {
                        RepresentationMode::Fixed => mu,
                        RepresentationMode::Distributional => {
                            let eps: f64 = StandardNormal.sample(&mut r);
                            mu + (0.5 * p.log_var[[class, prior, j]]).exp() * eps
                        }
                    };
                }
                match label_mode {
                    LabelMode::Hard => targets[[row, class]] = 1.0,
                    LabelMode::Soft => {
                        for k in 0..c {
                            targets[[row, k]] = bundle.soft_labels[[class, prior, k]];
                        }
                    }
                }
                labels.push(class);
                row += 1;
            }
        }
    }
    let images = decode(&bundle.decoder, &z, false)?;
    Ok(SyntheticDataset {
        images,
        targets,
        labels,
        task_classes: bundle.meta.task_classes.clone(),
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Zero-pad target rows from local width to `global_width`, routing each
    /// local column to its global class id.
    pub fn remap_targets_to_global(&self, global_width: usize) -> Result<ArrayD<f64>> {
        let n = self.len();
        let local = self.task_classes.len();
        if self.targets.shape()[1] != local {
            return Err(Error::Shape("targets not in local width".into()));
        }
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, global_width]));
        for row in 0..n {
            for (j, &global) in self.task_classes.iter().enumerate() {
                if global >= global_width {
                    return Err(Error::Config(format!(
                        "global class {global} exceeds width {global_width}"
                    )));
                }
                out[[row, global]] = self.targets[[row, j]];
            }
        }
        Ok(out)
    }

    /// Global label per row.
    pub fn global_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| self.task_classes[l]).collect()
    }
}
