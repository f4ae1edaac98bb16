//! The two training losses and their combination.
//!
//! * `mtt_loss` — trajectory matching: unroll a student for N differentiable
//!   SGD steps on synthetic batches starting from an expert checkpoint, then
//!   measure the normalized squared distance to a later expert checkpoint.
//!   The unroll happens on the tape, so gradients reach the synthetic-data
//!   parameters and the learnable inner step size.
//! * `mmd2_unbiased` / `mmd_loss` — the unbiased U-statistic estimator of
//!   squared maximum mean discrepancy under a mixture of RBF kernels, summed
//!   per class over expert feature embeddings.

use autograd::{Graph, Var};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::data::{sample_class_batch, DatasetHandle};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, unflatten_params, StudentArch};
use crate::util::{derive_seed, nhwc_to_nchw};

// ---------------------------------------------------------------------------
// Configuration types
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MttConfig {
    /// N: differentiable student steps per outer iteration.
    pub inner_steps: usize,
    /// M: how many checkpoints ahead the expert target sits.
    pub expert_offset: usize,
    /// Initial value of the learnable inner-loop learning rate.
    pub alpha_init: f64,
    /// Largest checkpoint index a window may start from.
    pub max_start: usize,
}

impl Default for MttConfig {
    fn default() -> Self {
        MttConfig { inner_steps: 8, expert_offset: 2, alpha_init: 0.02, max_start: 6 }
    }
}

impl MttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 || self.expert_offset == 0 {
            return Err(Error::Config("mtt needs N >= 1 and M >= 1".into()));
        }
        if self.alpha_init <= 0.0 {
            return Err(Error::Config("alpha must start positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelMixture {
    pub bandwidths: Vec<f64>,
}

impl Default for KernelMixture {
    fn default() -> Self {
        KernelMixture { bandwidths: vec![1.0, 2.0, 4.0, 8.0, 16.0] }
    }
}

impl KernelMixture {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|&b| b <= 0.0) {
            return Err(Error::Config("kernel bandwidths must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bandwidths.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mtt: f64,
    pub mmd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mtt: 1.0, mmd: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.mtt < 0.0 || self.mmd < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.mtt == 0.0 && self.mmd == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// MMD
// ---------------------------------------------------------------------------

/// Mixture-of-RBF kernel matrix from squared pairwise distances.
fn kernel_from_sqdist(g: &mut Graph, d2: Var, kernels: &KernelMixture) -> Var {
    let mut acc: Option<Var> = None;
    for &sigma in &kernels.bandwidths {
        let scaled = g.mul_scalar(d2, -1.0 / (2.0 * sigma * sigma));
        let k = g.exp(scaled);
        acc = Some(match acc {
            Some(a) => g.add(a, k),
            None => k,
        });
    }
    acc.expect("non-empty mixture")
}

/// Squared pairwise distances between row sets, [n,f] x [m,f] -> [n,m].
/// Computed from explicit differences so that d(x, x) is exactly zero.
fn pairwise_sqdist(g: &mut Graph, x: Var, y: Var) -> Var {
    let (n, f) = (g.shape(x)[0], g.shape(x)[1]);
    let m = g.shape(y)[0];
    let xe = g.reshape(x, &[n, 1, f]);
    let ye = g.reshape(y, &[1, m, f]);
    let diff = g.sub(xe, ye);
    let sq = g.square(diff);
    let d2 = g.sum_axes(sq, &[2]);
    g.reshape(d2, &[n, m])
}

/// Unbiased estimator of squared MMD between the samples in `x` and `y`:
///
/// 1/(n(n-1)) sum_{i != j} k(x_i, x_j)
///   - 2/(nm) sum_{i,j} k(x_i, y_j)
///   + 1/(m(m-1)) sum_{i != j} k(y_i, y_j)
///
/// Differentiable in both arguments.
pub fn mmd2_unbiased(g: &mut Graph, x: Var, y: Var, kernels: &KernelMixture) -> Result<Var> {
    kernels.validate()?;
    let n = g.shape(x)[0];
    let m = g.shape(y)[0];
    if n < 2 || m < 2 {
        return Err(Error::EstimatorUndefined(format!(
            "unbiased MMD needs n, m >= 2 (got n={n}, m={m})"
        )));
    }
    if g.shape(x)[1] != g.shape(y)[1] {
        return Err(Error::Shape(format!(
            "feature dims differ: {:?} vs {:?}",
            g.shape(x),
            g.shape(y)
        )));
    }
    let kc = kernels.len() as f64;

    let dxx = pairwise_sqdist(g, x, x);
    let kxx = kernel_from_sqdist(g, dxx, kernels);
    let sxx = g.sum_all(kxx);
    // diagonal entries are exactly k(x,x) = K (one per kernel in the mixture)
    let off_xx = g.add_scalar(sxx, -(n as f64) * kc);
    let term_xx = g.mul_scalar(off_xx, 1.0 / (n as f64 * (n as f64 - 1.0)));

    let dyy = pairwise_sqdist(g, y, y);
    let kyy = kernel_from_sqdist(g, dyy, kernels);
    let syy = g.sum_all(kyy);
    let off_yy = g.add_scalar(syy, -(m as f64) * kc);
    let term_yy = g.mul_scalar(off_yy, 1.0 / (m as f64 * (m as f64 - 1.0)));

    let dxy = pairwise_sqdist(g, x, y);
    let kxy = kernel_from_sqdist(g, dxy, kernels);
    let sxy = g.sum_all(kxy);
    let cross = g.mul_scalar(sxy, 2.0 / (n as f64 * m as f64));

    let pos = g.add(term_xx, term_yy);
    Ok(g.sub(pos, cross))
}

/// Value-level convenience wrapper over [`mmd2_unbiased`].
pub fn mmd2_unbiased_value(
    x: &ArrayD<f64>,
    y: &ArrayD<f64>,
    kernels: &KernelMixture,
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let v = mmd2_unbiased(&mut g, xv, yv, kernels)?;
    Ok(g.scalar(v))
}

/// Seed used for the real-side batch of class `c` inside [`mmd_loss`].
/// Exposed so callers (and tests) can reproduce the exact batches.
pub fn mmd_real_batch_seed(seed: u64, class_id: usize) -> u64 {
    derive_seed(seed, 0x4d4d_4400 + class_id as u64)
}

/// Class-wise MMD loss: sum over classes of the unbiased squared MMD between
/// expert features of a real batch and of a synthetic batch.
///
/// `synth_sampler` yields the synthetic NCHW image batch for a class (a
/// differentiable graph node); `psi` embeds an NCHW batch into feature space.
/// The real side is built from constants, so gradients flow only into the
/// synthetic parameters.
pub fn mmd_loss(
    g: &mut Graph,
    real: &DatasetHandle,
    mut synth_sampler: impl FnMut(&mut Graph, usize) -> Result<Var>,
    psi: impl Fn(&mut Graph, Var) -> Var,
    kernels: &KernelMixture,
    classes: &[usize],
    batch_per_class: usize,
    seed: u64,
) -> Result<Var> {
    if batch_per_class < 2 {
        return Err(Error::EstimatorUndefined(
            "mmd_loss needs batch_per_class >= 2".into(),
        ));
    }
    if classes.is_empty() {
        return Err(Error::ClassCoverage("no classes requested".into()));
    }
    let mut total: Option<Var> = None;
    for &c in classes {
        if c >= real.class_count {
            return Err(Error::ClassCoverage(format!(
                "class {c} missing from real dataset (has {})",
                real.class_count
            )));
        }
        let batch = sample_class_batch(real, c, batch_per_class, mmd_real_batch_seed(seed, c))?;
        let real_imgs = g.constant(nhwc_to_nchw(&batch));
        let real_feats = psi(g, real_imgs);
        let synth_imgs = synth_sampler(g, c)?;
        if g.shape(synth_imgs)[0] < 2 {
            return Err(Error::EstimatorUndefined(format!(
                "synthetic batch for class {c} has fewer than 2 samples"
            )));
        }
        let synth_feats = psi(g, synth_imgs);
        let term = mmd2_unbiased(g, real_feats, synth_feats, kernels)?;
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("at least one class"))
}

// ---------------------------------------------------------------------------
// Trajectory matching
// ---------------------------------------------------------------------------

/// Normalized squared error between a student endpoint and the expert target:
/// ||w_student - w_target||^2 / ||w_start - w_target||^2.
pub fn mtt_distance(w_student: &[f32], w_target: &[f32], w_start: &[f32]) -> Result<f64> {
    if w_student.len() != w_target.len() || w_start.len() != w_target.len() {
        return Err(Error::Shape("weight vectors differ in length".into()));
    }
    let num: f64 = w_student
        .iter()
        .zip(w_target)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum();
    let den: f64 = w_start
        .iter()
        .zip(w_target)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum();
    if den == 0.0 {
        return Err(Error::DegenerateWindow(
            "start and target checkpoints coincide".into(),
        ));
    }
    Ok(num / den)
}

/// Build the differentiable trajectory-matching loss on the tape.
///
/// The student starts at `w_start`, takes `cfg.inner_steps` SGD steps of size
/// `alpha` on cross-entropy over batches produced by `synth_batch(step)`, and
/// the loss is the normalized squared distance of the unrolled parameters to
/// `w_target`. Gradients reach whatever `synth_batch` connects to (decoder,
/// priors) and `alpha`.
pub fn mtt_loss(
    g: &mut Graph,
    arch: &StudentArch,
    w_start: &[f32],
    w_target: &[f32],
    alpha: Var,
    mut synth_batch: impl FnMut(&mut Graph, usize) -> Result<(Var, ArrayD<f64>)>,
    cfg: &MttConfig,
) -> Result<Var> {
    cfg.validate()?;
    if w_start.len() != w_target.len() {
        return Err(Error::Shape(format!(
            "checkpoint lengths differ: {} vs {}",
            w_start.len(),
            w_target.len()
        )));
    }
    let den: f64 = w_start
        .iter()
        .zip(w_target)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum();
    if den == 0.0 {
        return Err(Error::DegenerateWindow(
            "start and target checkpoints coincide; resample the window".into(),
        ));
    }

    let shapes = arch.param_shapes();
    let mut w: Vec<Var> = unflatten_params(w_start, &shapes)
        .into_iter()
        .map(|t| g.param(t))
        .collect();

    for step in 0..cfg.inner_steps {
        let (images, targets) = synth_batch(g, step)?;
        let logits = arch.forward(g, &w, images);
        let t = g.constant(targets);
        let ce = cross_entropy(g, logits, t);
        if !g.scalar(ce).is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite student loss during inner step {step}"
            )));
        }
        let grads = g.grad(ce, &w);
        w = w
            .iter()
            .zip(grads)
            .map(|(&wl, gl)| {
                let scaled = g.mul(gl, alpha);
                g.sub(wl, scaled)
            })
            .collect();
    }

    let target = unflatten_params(w_target, &shapes);
    let mut num: Option<Var> = None;
    for (wl, tl) in w.iter().zip(target) {
        let tc = g.constant(tl);
        let d = g.sub(*wl, tc);
        let sq = g.square(d);
        let s = g.sum_all(sq);
        num = Some(match num {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    let num = num.expect("non-empty parameter list");
    Ok(g.mul_scalar(num, 1.0 / den))
}

/// Weighted combination of the two loss terms.
pub fn combined_loss(g: &mut Graph, d_mtt: Var, l_mmd: Var, w: &LossWeights) -> Var {
    let a = g.mul_scalar(d_mtt, w.mtt);
    let b = g.mul_scalar(l_mmd, w.mmd);
    g.add(a, b)
}

pub fn combined_loss_value(d_mtt: f64, l_mmd: f64, w: &LossWeights) -> f64 {
    w.mtt * d_mtt + w.mmd * l_mmd
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{flatten_params, one_hot, NormKind};
    use crate::util::rng;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    /// O(n^2) scalar-loop oracle for the unbiased estimator.
    fn mmd_oracle(x: &ArrayD<f64>, y: &ArrayD<f64>, bandwidths: &[f64]) -> f64 {
        let n = x.shape()[0];
        let m = y.shape()[0];
        let f = x.shape()[1];
        let k = |a: &ArrayD<f64>, i: usize, b: &ArrayD<f64>, j: usize| -> f64 {
            let mut d2 = 0.0;
            for t in 0..f {
                d2 += (a[[i, t]] - b[[j, t]]).powi(2);
            }
            bandwidths
                .iter()
                .map(|s| (-d2 / (2.0 * s * s)).exp())
                .sum()
        };
        let mut xx = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += k(x, i, x, j);
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    yy += k(y, i, y, j);
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..n {
            for j in 0..m {
                xy += k(x, i, y, j);
            }
        }
        xx / (n as f64 * (n - 1) as f64) + yy / (m as f64 * (m - 1) as f64)
            - 2.0 * xy / (n as f64 * m as f64)
    }

    fn rand_feats(n: usize, f: usize, r: &mut rand_chacha::ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(&[n, f]), || r.gen_range(-2.0..2.0))
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut r = rng(101);
        for _ in 0..40 {
            let n = r.gen_range(2..=8);
            let m = r.gen_range(2..=8);
            let f = r.gen_range(1..=4);
            let sigma = r.gen_range(0.5..4.0);
            let x = rand_feats(n, f, &mut r);
            let y = rand_feats(m, f, &mut r);
            let kern = KernelMixture { bandwidths: vec![sigma] };
            let got = mmd2_unbiased_value(&x, &y, &kern).unwrap();
            let want = mmd_oracle(&x, &y, &[sigma]);
            let rel = (got - want).abs() / want.abs().max(1e-12);
            assert!(rel < 1e-10, "rel {rel}");
        }
    }

    #[test]
    fn symmetric_in_arguments() {
        let mut r = rng(5);
        let x = rand_feats(5, 3, &mut r);
        let y = rand_feats(7, 3, &mut r);
        let k = KernelMixture::default();
        let a = mmd2_unbiased_value(&x, &y, &k).unwrap();
        let b = mmd2_unbiased_value(&y, &x, &k).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn identical_degenerate_samples_give_zero() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.7, -0.2, 1.1, 0.7, -0.2, 1.1]).unwrap();
        let v = mmd2_unbiased_value(&a, &a, &KernelMixture::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    /// With the cross term running over all (i, j) pairs, the estimator on
    /// X = Y reduces to 2*(mean_offdiag_kernel - K)/n: non-positive, zero
    /// exactly when every point coincides, and never below -2K/n.
    #[test]
    fn identical_multisets_are_nonpositive_and_bounded() {
        let mut r = rng(6);
        let k = KernelMixture::default();
        let kc = k.len() as f64;
        for n in [2usize, 4, 6, 8] {
            let x = rand_feats(n, 4, &mut r);
            let v = mmd2_unbiased_value(&x, &x, &k).unwrap();
            assert!(v <= 1e-12, "n={n}: {v}");
            assert!(v >= -2.0 * kc / n as f64 - 1e-12, "n={n}: {v}");
        }
    }

    #[test]
    fn mixture_is_sum_of_single_kernels() {
        let mut r = rng(7);
        let x = rand_feats(5, 3, &mut r);
        let y = rand_feats(6, 3, &mut r);
        let mix = KernelMixture::default();
        let whole = mmd2_unbiased_value(&x, &y, &mix).unwrap();
        let parts: f64 = mix
            .bandwidths
            .iter()
            .map(|&s| {
                mmd2_unbiased_value(&x, &y, &KernelMixture { bandwidths: vec![s] }).unwrap()
            })
            .sum();
        assert!((whole - parts).abs() < 1e-12);
    }

    #[test]
    fn small_batches_rejected() {
        let mut r = rng(8);
        let x = rand_feats(1, 3, &mut r);
        let y = rand_feats(4, 3, &mut r);
        assert!(matches!(
            mmd2_unbiased_value(&x, &y, &KernelMixture::default()),
            Err(Error::EstimatorUndefined(_))
        ));
    }

    #[test]
    fn gradient_wrt_y_matches_finite_differences() {
        let mut r = rng(9);
        let x0 = rand_feats(4, 3, &mut r);
        let y0 = rand_feats(5, 3, &mut r);
        let kern = KernelMixture { bandwidths: vec![1.5] };
        let f = |xs: &[ArrayD<f64>]| -> f64 {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let y = g.param(xs[0].clone());
            let v = mmd2_unbiased(&mut g, x, y, &kern).unwrap();
            g.scalar(v)
        };
        let want = autograd::numeric_grad(f, &[y0.clone()], 1e-6);
        let mut g = Graph::new();
        let x = g.constant(x0);
        let y = g.param(y0);
        let v = mmd2_unbiased(&mut g, x, y, &kern).unwrap();
        let gy = g.grad(v, &[y])[0];
        let got = vec![g.val(gy).clone()];
        let err = autograd::max_rel_err(&got, &want, 1e-8);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn mtt_distance_hand_cases() {
        // scalar toy: w_t = 0, target = 2, student = 1 -> (1-2)^2 / (0-2)^2
        let d = mtt_distance(&[1.0], &[2.0], &[0.0]).unwrap();
        assert_eq!(d, 0.25);
        // perfect match
        let d = mtt_distance(&[2.0], &[2.0], &[0.0]).unwrap();
        assert_eq!(d, 0.0);
        // degenerate window
        assert!(matches!(
            mtt_distance(&[1.0], &[2.0], &[2.0]),
            Err(Error::DegenerateWindow(_))
        ));
    }

    #[test]
    fn mtt_distance_affine_invariant() {
        let mut r = rng(10);
        for _ in 0..50 {
            let n = r.gen_range(1..20);
            let s: Vec<f32> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
            let t: Vec<f32> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
            let u: Vec<f32> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
            let c: f32 = r.gen_range(0.5..3.0);
            let b: f32 = r.gen_range(-1.0..1.0);
            let before = match mtt_distance(&u, &t, &s) {
                Ok(v) => v,
                Err(_) => continue,
            };
            let map = |v: &[f32]| -> Vec<f32> { v.iter().map(|x| c * x + b).collect() };
            let after = mtt_distance(&map(&u), &map(&t), &map(&s)).unwrap();
            let rel = (before - after).abs() / before.abs().max(1e-12);
            assert!(rel < 1e-5, "rel {rel}");
        }
    }

    fn tiny_arch() -> StudentArch {
        StudentArch {
            input: (4, 4, 1),
            block_count: 1,
            width: 2,
            norm: NormKind::None,
            class_count: 2,
        }
    }

    #[test]
    fn mtt_loss_gradients_flow_to_alpha_and_images() {
        let arch = tiny_arch();
        let mut r = rng(12);
        let w0 = flatten_params(&arch.init_params(&mut r));
        let mut w1 = w0.clone();
        for v in &mut w1 {
            *v += 0.1;
        }
        let imgs0 = ArrayD::from_shape_simple_fn(IxDyn(&[2, 1, 4, 4]), || r.gen_range(-1.0..1.0));
        let targets = one_hot(&[0, 1], 2);
        let cfg = MttConfig { inner_steps: 2, expert_offset: 1, alpha_init: 0.1, max_start: 0 };

        let mut g = Graph::new();
        let alpha = g.param(ArrayD::from_elem(IxDyn(&[]), 0.1));
        let imgs = g.param(imgs0.clone());
        let d = mtt_loss(&mut g, &arch, &w0, &w1, alpha, |_, _| Ok((imgs, targets.clone())), &cfg)
            .unwrap();
        assert!(g.scalar(d).is_finite());
        let grads = g.grad(d, &[alpha, imgs]);
        let ga = g.scalar(grads[0]);
        let gi_norm: f64 = g.val(grads[1]).iter().map(|v| v * v).sum();
        assert!(ga.abs() > 0.0, "alpha gradient is zero");
        assert!(gi_norm > 0.0, "image gradient is zero");

        // fd check on alpha (scalar, cheap)
        let f = |xs: &[ArrayD<f64>]| -> f64 {
            let mut g = Graph::new();
            let alpha = g.param(xs[0].clone());
            let imgs = g.constant(imgs0.clone());
            let d =
                mtt_loss(&mut g, &arch, &w0, &w1, alpha, |_, _| Ok((imgs, targets.clone())), &cfg)
                    .unwrap();
            g.scalar(d)
        };
        let want = autograd::numeric_grad(f, &[ArrayD::from_elem(IxDyn(&[]), 0.1)], 1e-6);
        let rel = (ga - want[0][[]]).abs() / want[0][[]].abs().max(1e-10);
        assert!(rel < 1e-5, "alpha grad {ga} vs fd {}", want[0][[]]);
    }

    #[test]
    fn mtt_loss_rejects_degenerate_window() {
        let arch = tiny_arch();
        let mut r = rng(13);
        let w0 = flatten_params(&arch.init_params(&mut r));
        let cfg = MttConfig::default();
        let mut g = Graph::new();
        let alpha = g.param(ArrayD::from_elem(IxDyn(&[]), 0.1));
        let err = mtt_loss(&mut g, &arch, &w0, &w0, alpha, |_, _| unreachable!(), &cfg);
        assert!(matches!(err, Err(Error::DegenerateWindow(_))));
    }

    #[test]
    fn combined_loss_arithmetic() {
        let w = LossWeights { mtt: 1.0, mmd: 1.0 };
        assert_eq!(combined_loss_value(0.5, 0.25, &w), 0.75);
        assert_eq!(combined_loss_value(0.5, 9.0, &LossWeights { mtt: 1.0, mmd: 0.0 }), 0.5);
        assert_eq!(combined_loss_value(9.0, 0.25, &LossWeights { mtt: 0.0, mmd: 1.0 }), 0.25);
        assert!(LossWeights { mtt: 0.0, mmd: 0.0 }.validate().is_err());
        let mut g = Graph::new();
        let a = g.scalar_const(0.5);
        let b = g.scalar_const(0.25);
        let c = combined_loss(&mut g, a, b, &w);
        assert_eq!(g.scalar(c), 0.75);
    }
}
