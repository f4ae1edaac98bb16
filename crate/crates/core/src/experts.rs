//! Expert training and trajectory management.
//!
//! Experts are ConvNets trained on the full (sub)task with standard
//! augmentations. Their checkpoint sequences drive trajectory matching, and
//! their convolutional blocks double as the feature maps that embed images
//! for the MMD term.

use autograd::{Graph, Var};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::bundle::{read_blob, write_blob};
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, flatten_params, one_hot, unflatten_params, StudentArch};
use crate::optim::SgdMomentum;
use crate::util::{derive_seed, nhwc_to_nchw, rng};

pub const EXPERT_MOMENTUM: f64 = 0.9;
pub const EXPERT_WEIGHT_DECAY: f64 = 5e-4;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// One expert's training history: flattened fp32 parameter vectors at the
/// initialization and at every `save_interval` epochs.
#[derive(Clone, Debug)]
pub struct ExpertTrajectory {
    pub arch: StudentArch,
    pub checkpoints: Vec<Vec<f32>>,
    /// Training iteration (epoch) index of each checkpoint; strictly ordered.
    pub iterations: Vec<u64>,
    pub save_interval: usize,
    pub expert_id: usize,
    /// Global ids of the classes this expert was trained on (sorted).
    pub task_classes: Vec<usize>,
    pub seed: u64,
    pub final_train_accuracy: f64,
}

impl ExpertTrajectory {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(Error::Config("trajectory has no checkpoints".into()));
        }
        let dim = self.checkpoints[0].len();
        if self.checkpoints.iter().any(|c| c.len() != dim) {
            return Err(Error::Shape("checkpoint dimensionality varies".into()));
        }
        if dim != self.arch.param_count() {
            return Err(Error::Shape(format!(
                "checkpoint has {dim} parameters, arch wants {}",
                self.arch.param_count()
            )));
        }
        if self.iterations.len() != self.checkpoints.len()
            || self.iterations.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("checkpoint iterations not strictly ordered".into()));
        }
        if self.task_classes.len() != self.arch.class_count {
            return Err(Error::Config("task class list disagrees with arch".into()));
        }
        Ok(())
    }

    /// Checkpoint unflattened into layer tensors.
    pub fn weights(&self, checkpoint: usize) -> Result<Vec<ArrayD<f64>>> {
        let flat = self.checkpoints.get(checkpoint).ok_or_else(|| {
            Error::Lookup(format!(
                "checkpoint {checkpoint} out of range (have {})",
                self.checkpoints.len()
            ))
        })?;
        Ok(unflatten_params(flat, &self.arch.param_shapes()))
    }
}

/// Which expert activations embed images for the MMD term.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FeatureMap {
    pub expert_id: usize,
    pub checkpoint: usize,
    /// 1-based index of the convolutional block whose post-pool output is
    /// flattened and emitted.
    pub tap_block: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub flip: bool,
    /// Zero-pad then randomly re-crop by up to this many pixels.
    pub crop_pad: usize,
    /// Uniform rotation range in degrees (nearest-neighbor resampling).
    pub rotate_degrees: f64,
    /// Per-channel gain/offset jitter amplitude.
    pub color_jitter: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig { flip: true, crop_pad: 2, rotate_degrees: 10.0, color_jitter: 0.1 }
    }
}

impl AugConfig {
    pub fn off() -> Self {
        AugConfig { flip: false, crop_pad: 0, rotate_degrees: 0.0, color_jitter: 0.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainExpertsConfig {
    pub n_experts: usize,
    pub epochs: usize,
    pub save_interval: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub augment: AugConfig,
}

impl Default for TrainExpertsConfig {
    fn default() -> Self {
        TrainExpertsConfig {
            n_experts: 3,
            epochs: 10,
            save_interval: 1,
            lr: 0.02,
            batch_size: 64,
            augment: AugConfig::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentations
// ---------------------------------------------------------------------------

/// Random flips, rotations, shifts, and color jitter on an NHWC batch.
pub fn augment_batch(images: &ArrayD<f64>, cfg: &AugConfig, r: &mut ChaCha12Rng) -> ArrayD<f64> {
    let (n, h, w, c) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    let mut out = images.clone();
    for i in 0..n {
        let flip = cfg.flip && r.gen_bool(0.5);
        let angle = if cfg.rotate_degrees > 0.0 {
            r.gen_range(-cfg.rotate_degrees..cfg.rotate_degrees).to_radians()
        } else {
            0.0
        };
        let (dx, dy) = if cfg.crop_pad > 0 {
            let p = cfg.crop_pad as isize;
            (r.gen_range(-p..=p), r.gen_range(-p..=p))
        } else {
            (0, 0)
        };
        let (gain, bias): (Vec<f64>, Vec<f64>) = if cfg.color_jitter > 0.0 {
            (
                (0..c)
                    .map(|_| 1.0 + r.gen_range(-cfg.color_jitter..cfg.color_jitter))
                    .collect(),
                (0..c)
                    .map(|_| r.gen_range(-cfg.color_jitter..cfg.color_jitter))
                    .collect(),
            )
        } else {
            (vec![1.0; c], vec![0.0; c])
        };
        let (sin, cos) = angle.sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let src = images.index_axis(Axis(0), i);
        let mut dst = out.index_axis_mut(Axis(0), i);
        for y in 0..h {
            for x in 0..w {
                // inverse map: flip, rotate about the center, then shift
                let xf = if flip { (w - 1 - x) as f64 } else { x as f64 };
                let yr = (y as f64 - cy) * cos - (xf - cx) * sin + cy;
                let xr = (y as f64 - cy) * sin + (xf - cx) * cos + cx;
                let sy = yr.round() as isize - dy;
                let sx = xr.round() as isize - dx;
                for ch in 0..c {
                    let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        src[[sy as usize, sx as usize, ch]]
                    } else {
                        0.0
                    };
                    dst[[y, x, ch]] = gain[ch] * v + bias[ch];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Train `cfg.n_experts` independent experts on `data`, recording trajectory
/// checkpoints at the initialization and every `save_interval` epochs.
pub fn train_experts(
    data: &DatasetHandle,
    arch: &StudentArch,
    cfg: &TrainExpertsConfig,
    seed: u64,
) -> Result<Vec<ExpertTrajectory>> {
    arch.validate()?;
    if cfg.n_experts == 0 || cfg.save_interval == 0 {
        return Err(Error::Config("need n_experts >= 1 and save_interval >= 1".into()));
    }
    if arch.input != data.image_shape {
        return Err(Error::Config(format!(
            "arch input {:?} != dataset {:?}",
            arch.input, data.image_shape
        )));
    }
    if arch.class_count != data.class_count {
        return Err(Error::Config(format!(
            "arch has {} classes, dataset {}",
            arch.class_count, data.class_count
        )));
    }
    (0..cfg.n_experts)
        .map(|expert_id| train_one_expert(data, arch, cfg, seed, expert_id))
        .collect()
}

fn train_one_expert(
    data: &DatasetHandle,
    arch: &StudentArch,
    cfg: &TrainExpertsConfig,
    seed: u64,
    expert_id: usize,
) -> Result<ExpertTrajectory> {
    let expert_seed = derive_seed(seed, expert_id as u64);
    let mut r = rng(expert_seed);
    let mut params = arch.init_params(&mut r);
    let mut opt = SgdMomentum::new(cfg.lr, EXPERT_MOMENTUM, EXPERT_WEIGHT_DECAY);

    let mut checkpoints = vec![flatten_params(&params)];
    let mut iterations = vec![0u64];

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = gather_rows(&data.images, chunk);
            let batch = augment_batch(&batch, &cfg.augment, &mut r);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();

            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let x = g.constant(nhwc_to_nchw(&batch));
            let logits = arch.forward(&mut g, &vars, x);
            let t = g.constant(one_hot(&labels, arch.class_count));
            let ce = cross_entropy(&mut g, logits, t);
            let loss = g.scalar(ce);
            if !loss.is_finite() {
                return Err(Error::Training {
                    expert_id,
                    msg: format!("loss became non-finite at epoch {epoch}"),
                });
            }
            let grads = g.grad(ce, &vars);
            let grad_values: Vec<ArrayD<f64>> =
                grads.iter().map(|&gv| g.val(gv).clone()).collect();
            opt.step(&mut params, &grad_values);
        }
        if (epoch + 1) % cfg.save_interval == 0 || epoch + 1 == cfg.epochs {
            let it = (epoch + 1) as u64;
            if *iterations.last().unwrap() != it {
                checkpoints.push(flatten_params(&params));
                iterations.push(it);
            }
        }
    }

    let final_train_accuracy = accuracy(data, arch, &params)?;
    let traj = ExpertTrajectory {
        arch: arch.clone(),
        checkpoints,
        iterations,
        save_interval: cfg.save_interval,
        expert_id,
        task_classes: data.source_classes.clone(),
        seed: expert_seed,
        final_train_accuracy,
    };
    traj.validate()?;
    Ok(traj)
}

fn gather_rows(images: &ArrayD<f64>, idx: &[usize]) -> ArrayD<f64> {
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&images.index_axis(Axis(0), i));
    }
    out
}

/// Classification accuracy of `params` on the (un-augmented) dataset.
pub fn accuracy(data: &DatasetHandle, arch: &StudentArch, params: &[ArrayD<f64>]) -> Result<f64> {
    let n = data.len();
    let mut correct = 0usize;
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(256) {
        let batch = gather_rows(&data.images, idx);
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
        let x = g.constant(nhwc_to_nchw(&batch));
        let logits = arch.forward(&mut g, &vars, x);
        let pred = crate::nn::argmax_rows(g.val(logits));
        for (row, &i) in idx.iter().enumerate() {
            if pred[row] == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Window sampling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct WindowMeta {
    /// Index into the trajectory pool (not the expert's own id).
    pub expert: usize,
    pub start_checkpoint: usize,
    pub target_checkpoint: usize,
}

/// Pick a random expert and a random start t <= max_start; return the
/// checkpoint pair (w_t, w_{t+M}).
pub fn sample_expert_window(
    trajectories: &[ExpertTrajectory],
    max_start: usize,
    m: usize,
    r: &mut ChaCha12Rng,
) -> Result<(Vec<f32>, Vec<f32>, WindowMeta)> {
    if trajectories.is_empty() {
        return Err(Error::Config("empty trajectory pool".into()));
    }
    if m == 0 {
        return Err(Error::Config("expert offset M must be >= 1".into()));
    }
    for t in trajectories {
        if t.checkpoints.len() < max_start + m + 1 {
            return Err(Error::Config(format!(
                "expert {} has {} checkpoints; need {} for max_start {max_start} and M {m}",
                t.expert_id,
                t.checkpoints.len(),
                max_start + m + 1
            )));
        }
    }
    let expert = r.gen_range(0..trajectories.len());
    let start = r.gen_range(0..=max_start);
    let traj = &trajectories[expert];
    Ok((
        traj.checkpoints[start].clone(),
        traj.checkpoints[start + m].clone(),
        WindowMeta { expert, start_checkpoint: start, target_checkpoint: start + m },
    ))
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// psi(x): flattened post-pool activations of the tapped block, computed from
/// a fixed checkpoint. Pure in (checkpoint, x); instance norm behaves
/// identically in train and inference mode.
pub fn extract_features(
    pool: &[ExpertTrajectory],
    map: &FeatureMap,
    x: &ArrayD<f64>,
) -> Result<ArrayD<f64>> {
    let traj = pool
        .get(map.expert_id)
        .ok_or_else(|| Error::Lookup(format!("expert {} not in pool", map.expert_id)))?;
    let arch = &traj.arch;
    let (h, w, c) = arch.input;
    if x.ndim() != 4 || x.shape()[1] != h || x.shape()[2] != w || x.shape()[3] != c {
        return Err(Error::Shape(format!(
            "batch {:?} does not match arch input ({h}, {w}, {c})",
            x.shape()
        )));
    }
    let weights = traj.weights(map.checkpoint)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = weights.into_iter().map(|t| g.constant(t)).collect();
    let xv = g.constant(nhwc_to_nchw(x));
    let feats = arch.features(&mut g, &vars, xv, map.tap_block);
    Ok(g.val(feats).clone())
}

// ---------------------------------------------------------------------------
// Trajectory store
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TrajectoryManifest {
    arch: StudentArch,
    iterations: Vec<u64>,
    save_interval: usize,
    expert_id: usize,
    task_classes: Vec<usize>,
    seed: u64,
    final_train_accuracy: f64,
}

/// Write each trajectory to `dir/expert_NNNN/` (one blob per checkpoint).
pub fn save_trajectories(trajectories: &[ExpertTrajectory], dir: &Path) -> Result<()> {
    for traj in trajectories {
        let sub = dir.join(format!("expert_{:04}", traj.expert_id));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, ck) in traj.checkpoints.iter().enumerate() {
            write_blob(&sub.join(format!("ckpt_{i:04}.bin")), &[ck.len()], ck)?;
        }
        let manifest = TrajectoryManifest {
            arch: traj.arch.clone(),
            iterations: traj.iterations.clone(),
            save_interval: traj.save_interval,
            expert_id: traj.expert_id,
            task_classes: traj.task_classes.clone(),
            seed: traj.seed,
            final_train_accuracy: traj.final_train_accuracy,
        };
        let path = sub.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Load every `expert_*` subdirectory of `dir`.
pub fn load_trajectories(dir: &Path) -> Result<Vec<ExpertTrajectory>> {
    let mut subs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("expert_"))
        })
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Err(Error::Config(format!(
            "no expert_* directories under {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(subs.len());
    for sub in subs {
        let mpath = sub.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: TrajectoryManifest =
            serde_json::from_str(&text).map_err(|e| Error::Corruption {
                component: mpath.display().to_string(),
                msg: e.to_string(),
            })?;
        let mut checkpoints = Vec::with_capacity(manifest.iterations.len());
        for i in 0..manifest.iterations.len() {
            let (_, data) = read_blob(&sub.join(format!("ckpt_{i:04}.bin")))?;
            checkpoints.push(data);
        }
        let traj = ExpertTrajectory {
            arch: manifest.arch,
            checkpoints,
            iterations: manifest.iterations,
            save_interval: manifest.save_interval,
            expert_id: manifest.expert_id,
            task_classes: manifest.task_classes,
            seed: manifest.seed,
            final_train_accuracy: manifest.final_train_accuracy,
        };
        traj.validate()?;
        out.push(traj);
    }
    Ok(out)
}
