//! Network definitions shared by the expert, distillation, and evaluation
//! paths: the ConvNet student family, normalization layers, classification
//! losses, and the cross-architecture evaluation nets.
//!
//! All forwards are expressed as graph ops so the same definition serves
//! plain training, feature extraction, and the differentiable inner unroll.

use autograd::{Graph, Var};
use ndarray::{ArrayD, IxDyn};

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-sample, per-channel normalization over spatial dims. Identical in
    /// train and inference mode, which keeps feature extraction a pure
    /// function of (weights, input).
    Instance,
    None,
}

/// The ConvNet used for experts, the distillation student, and self-evaluation.
///
/// Each block is convolution (3x3, stride 1, pad 1) -> normalization -> ReLU
/// -> 2x2 average pooling; a final linear layer maps pooled features to class
/// logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentArch {
    pub input: (usize, usize, usize), // (H, W, C)
    pub block_count: usize,
    pub width: usize,
    pub norm: NormKind,
    pub class_count: usize,
}

impl StudentArch {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input;
        if self.block_count == 0 || self.width == 0 || self.class_count == 0 || c == 0 {
            return Err(Error::Config("student arch has a zero dimension".into()));
        }
        let div = 1 << self.block_count;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} not divisible by 2^{} for {} pooling stages",
                self.block_count, self.block_count
            )));
        }
        Ok(())
    }

    /// Spatial side length after `blocks` pooling stages.
    fn spatial_after(&self, blocks: usize) -> (usize, usize) {
        (self.input.0 >> blocks, self.input.1 >> blocks)
    }

    /// Flattened dimensionality of the features at `tap_block` (1-based count
    /// of completed blocks; `block_count` = the final block output).
    pub fn feature_dim(&self, tap_block: usize) -> usize {
        let (h, w) = self.spatial_after(tap_block);
        self.width * h * w
    }

    /// Parameter tensors in layer order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut cin = self.input.2;
        for _ in 0..self.block_count {
            shapes.push(vec![self.width, cin, 3, 3]); // conv weight
            shapes.push(vec![self.width]); // conv bias
            if self.norm == NormKind::Instance {
                shapes.push(vec![self.width]); // gamma
                shapes.push(vec![self.width]); // beta
            }
            cin = self.width;
        }
        shapes.push(vec![self.feature_dim(self.block_count), self.class_count]); // linear
        shapes.push(vec![self.class_count]); // linear bias
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn init(&self, rng: &mut ChaCha12Rng) -> Vec<ArrayD<f64>> {
        self.param_shapes()
            .iter()
            .map(|shape| init_tensor(shape, rng))
            .collect()
    }

    /// Class logits for an NCHW batch.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        self.forward_inner(g, params, x, None).0
    }

    /// Flattened post-pool activations of block `tap_block` (1-based).
    pub fn features(&self, g: &mut Graph, params: &[Var], x: Var, tap_block: usize) -> Var {
        assert!(
            tap_block >= 1 && tap_block <= self.block_count,
            "tap block {tap_block} out of range 1..={}",
            self.block_count
        );
        self.forward_inner(g, params, x, Some(tap_block))
            .1
            .expect("tap requested")
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        tap: Option<usize>,
    ) -> (Var, Option<Var>) {
        let batch = g.shape(x)[0];
        let mut cur = x;
        let mut p = 0;
        let mut tapped = None;
        for b in 0..self.block_count {
            let conv = g.conv2d(cur, params[p], 1, 1);
            let bias = g.reshape(params[p + 1], &[1, self.width, 1, 1]);
            let mut act = g.add(conv, bias);
            p += 2;
            if self.norm == NormKind::Instance {
                act = instance_norm(g, act, params[p], params[p + 1], NORM_EPS);
                p += 2;
            }
            let relu = g.relu(act);
            cur = g.avg_pool2d(relu, 2);
            if tap == Some(b + 1) {
                let dim = self.feature_dim(b + 1);
                tapped = Some(g.reshape(cur, &[batch, dim]));
                if p == params.len() - 2 {
                    // features from the final block: no need to run the head
                }
            }
        }
        let dim = self.feature_dim(self.block_count);
        let flat = g.reshape(cur, &[batch, dim]);
        let logits0 = g.matmul(flat, params[p]);
        let lb = g.reshape(params[p + 1], &[1, self.class_count]);
        let logits = g.add(logits0, lb);
        (logits, tapped)
    }
}

// ---------------------------------------------------------------------------
// Normalization layers
// ---------------------------------------------------------------------------

/// Instance norm over spatial dims with per-channel affine parameters.
pub fn instance_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
    let c = g.shape(x)[1];
    let m = g.mean_axes(x, &[2, 3]);
    let centered = g.sub(x, m);
    let sq = g.square(centered);
    let var = g.mean_axes(sq, &[2, 3]);
    let veps = g.add_scalar(var, eps);
    let std = g.sqrt(veps);
    let inv = g.recip(std);
    let norm = g.mul(centered, inv);
    let ga = g.reshape(gamma, &[1, c, 1, 1]);
    let be = g.reshape(beta, &[1, c, 1, 1]);
    let scaled = g.mul(norm, ga);
    g.add(scaled, be)
}

/// Batch norm in training mode: normalizes over (batch, spatial) and returns
/// the batch statistics so the caller can maintain running estimates.
pub fn batch_norm_train(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> (Var, Var, Var) {
    let c = g.shape(x)[1];
    let m = g.mean_axes(x, &[0, 2, 3]);
    let centered = g.sub(x, m);
    let sq = g.square(centered);
    let var = g.mean_axes(sq, &[0, 2, 3]);
    let veps = g.add_scalar(var, eps);
    let std = g.sqrt(veps);
    let inv = g.recip(std);
    let norm = g.mul(centered, inv);
    let ga = g.reshape(gamma, &[1, c, 1, 1]);
    let be = g.reshape(beta, &[1, c, 1, 1]);
    let scaled = g.mul(norm, ga);
    let out = g.add(scaled, be);
    (out, m, var)
}

/// Batch norm in inference mode against fixed running statistics.
pub fn batch_norm_infer(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
) -> Var {
    let c = g.shape(x)[1];
    let rm = g.reshape(running_mean, &[1, c, 1, 1]);
    let rv = g.reshape(running_var, &[1, c, 1, 1]);
    let centered = g.sub(x, rm);
    let veps = g.add_scalar(rv, eps);
    let std = g.sqrt(veps);
    let inv = g.recip(std);
    let norm = g.mul(centered, inv);
    let ga = g.reshape(gamma, &[1, c, 1, 1]);
    let be = g.reshape(beta, &[1, c, 1, 1]);
    let scaled = g.mul(norm, ga);
    g.add(scaled, be)
}

// ---------------------------------------------------------------------------
// Classification loss
// ---------------------------------------------------------------------------

/// Row-wise log-softmax of a logits matrix. The max subtraction is detached;
/// subtracting any constant leaves log-softmax unchanged, so this is exact.
pub fn log_softmax(g: &mut Graph, logits: Var) -> Var {
    let shape = g.shape(logits).to_vec();
    let rows = shape[0];
    let maxes: Vec<f64> = (0..rows)
        .map(|r| {
            g.val(logits)
                .index_axis(ndarray::Axis(0), r)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let m = g.constant(ArrayD::from_shape_vec(IxDyn(&[rows, 1]), maxes).unwrap());
    let shifted = g.sub(logits, m);
    let e = g.exp(shifted);
    let s = g.sum_axes(e, &[1]);
    let lse = g.ln(s);
    g.sub(shifted, lse)
}

/// Mean cross-entropy against target rows (one-hot or soft, rows sum to 1).
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: Var) -> Var {
    let rows = g.shape(logits)[0] as f64;
    let lsm = log_softmax(g, logits);
    let prod = g.mul(targets, lsm);
    let total = g.sum_all(prod);
    g.mul_scalar(total, -1.0 / rows)
}

pub fn one_hot(labels: &[usize], class_count: usize) -> ArrayD<f64> {
    let mut t = ArrayD::<f64>::zeros(IxDyn(&[labels.len(), class_count]));
    for (r, &l) in labels.iter().enumerate() {
        t[[r, l]] = 1.0;
    }
    t
}

/// Row-wise softmax of a plain logits matrix.
pub fn softmax_rows(a: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = a.clone();
    let rows = a.shape()[0];
    for r in 0..rows {
        let mut row = out.index_axis_mut(ndarray::Axis(0), r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.iter().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row argmax of a logits value.
pub fn argmax_rows(a: &ArrayD<f64>) -> Vec<usize> {
    let rows = a.shape()[0];
    (0..rows)
        .map(|r| {
            let row = a.index_axis(ndarray::Axis(0), r);
            row.iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Parameter plumbing
// ---------------------------------------------------------------------------

pub fn init_tensor(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    match shape.len() {
        // conv weight [out, in, kh, kw]: He normal over fan-in
        4 => {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let std = (2.0 / fan_in).sqrt();
            randn(shape, std, rng)
        }
        // linear weight [in, out]
        2 => {
            let fan_in = shape[0] as f64;
            let std = (1.0 / fan_in).sqrt();
            randn(shape, std, rng)
        }
        // bias / gamma / beta: gamma-style vectors start at 1 only where the
        // caller overrides; default biases at zero
        _ => ArrayD::zeros(IxDyn(shape)),
    }
}

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Flatten parameter tensors into one f32 vector (checkpoint format).
pub fn flatten_params(params: &[ArrayD<f64>]) -> Vec<f32> {
    let mut out = Vec::with_capacity(params.iter().map(|p| p.len()).sum());
    for p in params {
        out.extend(p.iter().map(|&v| v as f32));
    }
    out
}

/// Inverse of [`flatten_params`] for a known shape list.
pub fn unflatten_params(flat: &[f32], shapes: &[Vec<usize>]) -> Vec<ArrayD<f64>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for shape in shapes {
        let n: usize = shape.iter().product();
        let chunk = &flat[off..off + n];
        out.push(crate::util::from_f32(shape, chunk));
        off += n;
    }
    assert_eq!(off, flat.len(), "flat vector length mismatch");
    out
}

impl StudentArch {
    /// He init but with gamma vectors set to one (norm affine scale).
    pub fn init_params(&self, rng: &mut ChaCha12Rng) -> Vec<ArrayD<f64>> {
        let mut params = self.init(rng);
        if self.norm == NormKind::Instance {
            // every block: [w, b, gamma, beta]; gamma index = 4*b + 2
            for b in 0..self.block_count {
                params[4 * b + 2].fill(1.0);
            }
        }
        params
    }
}

// ---------------------------------------------------------------------------
// Cross-architecture evaluation nets
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalArchKind {
    Convnet,
    Vgg,
    Residual,
    Alexnet,
}

impl std::fmt::Display for EvalArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EvalArchKind::Convnet => "convnet",
            EvalArchKind::Vgg => "vgg",
            EvalArchKind::Residual => "residual",
            EvalArchKind::Alexnet => "alexnet",
        };
        f.write_str(s)
    }
}

/// A concrete evaluation network: parameter shapes plus a forward pass.
#[derive(Clone, Debug)]
pub enum EvalNet {
    Convnet(StudentArch),
    Vgg(VggArch),
    Residual(ResidualArch),
    Alexnet(AlexArch),
}

impl EvalNet {
    pub fn build(
        kind: EvalArchKind,
        input: (usize, usize, usize),
        width: usize,
        class_count: usize,
    ) -> Result<EvalNet> {
        let net = match kind {
            EvalArchKind::Convnet => {
                let blocks = default_block_count(input.0);
                let arch = StudentArch {
                    input,
                    block_count: blocks,
                    width,
                    norm: NormKind::Instance,
                    class_count,
                };
                arch.validate()?;
                EvalNet::Convnet(arch)
            }
            EvalArchKind::Vgg => EvalNet::Vgg(VggArch::new(input, width, class_count)?),
            EvalArchKind::Residual => {
                EvalNet::Residual(ResidualArch::new(input, width, class_count)?)
            }
            EvalArchKind::Alexnet => EvalNet::Alexnet(AlexArch::new(input, width, class_count)?),
        };
        Ok(net)
    }

    pub fn init(&self, rng: &mut ChaCha12Rng) -> Vec<ArrayD<f64>> {
        match self {
            EvalNet::Convnet(a) => a.init_params(rng),
            EvalNet::Vgg(a) => a.init(rng),
            EvalNet::Residual(a) => a.init(rng),
            EvalNet::Alexnet(a) => a.init(rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        match self {
            EvalNet::Convnet(a) => a.forward(g, params, x),
            EvalNet::Vgg(a) => a.forward(g, params, x),
            EvalNet::Residual(a) => a.forward(g, params, x),
            EvalNet::Alexnet(a) => a.forward(g, params, x),
        }
    }
}

/// ConvNet depth used in practice for a given square input size.
pub fn default_block_count(h: usize) -> usize {
    match h {
        0..=16 => 2,
        17..=32 => 3,
        33..=64 => 4,
        _ => 5,
    }
}

/// VGG-style: two 3x3 convolutions per stage, pooled between stages.
#[derive(Clone, Debug)]
pub struct VggArch {
    pub input: (usize, usize, usize),
    pub stages: usize,
    pub width: usize,
    pub class_count: usize,
}

impl VggArch {
    pub fn new(input: (usize, usize, usize), width: usize, class_count: usize) -> Result<Self> {
        let stages = default_block_count(input.0).min(3);
        let arch = VggArch { input, stages, width, class_count };
        let div = 1 << arch.stages;
        if input.0 % div != 0 || input.1 % div != 0 {
            return Err(Error::Config(format!(
                "vgg input {:?} not divisible by 2^{}",
                input, arch.stages
            )));
        }
        Ok(arch)
    }

    fn stage_width(&self, s: usize) -> usize {
        self.width << s.min(2)
    }

    fn feature_dim(&self) -> usize {
        let h = self.input.0 >> self.stages;
        let w = self.input.1 >> self.stages;
        self.stage_width(self.stages - 1) * h * w
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut cin = self.input.2;
        for s in 0..self.stages {
            let cw = self.stage_width(s);
            shapes.push(vec![cw, cin, 3, 3]);
            shapes.push(vec![cw]);
            shapes.push(vec![cw, cw, 3, 3]);
            shapes.push(vec![cw]);
            cin = cw;
        }
        shapes.push(vec![self.feature_dim(), self.class_count]);
        shapes.push(vec![self.class_count]);
        shapes
    }

    pub fn init(&self, rng: &mut ChaCha12Rng) -> Vec<ArrayD<f64>> {
        self.param_shapes().iter().map(|s| init_tensor(s, rng)).collect()
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        let batch = g.shape(x)[0];
        let mut cur = x;
        let mut p = 0;
        for s in 0..self.stages {
            let cw = self.stage_width(s);
            for _ in 0..2 {
                let conv = g.conv2d(cur, params[p], 1, 1);
                let bias = g.reshape(params[p + 1], &[1, cw, 1, 1]);
                let biased = g.add(conv, bias);
                cur = g.relu(biased);
                p += 2;
            }
            cur = g.avg_pool2d(cur, 2);
        }
        let flat = g.reshape(cur, &[batch, self.feature_dim()]);
        let l = g.matmul(flat, params[p]);
        let lb = g.reshape(params[p + 1], &[1, self.class_count]);
        g.add(l, lb)
    }
}

/// Residual-style: a stem convolution, then identity-skip blocks with a pool
/// between them.
#[derive(Clone, Debug)]
pub struct ResidualArch {
    pub input: (usize, usize, usize),
    pub blocks: usize,
    pub width: usize,
    pub class_count: usize,
}

impl ResidualArch {
    pub fn new(input: (usize, usize, usize), width: usize, class_count: usize) -> Result<Self> {
        let blocks = default_block_count(input.0).min(3);
        let div = 1 << blocks;
        if input.0 % div != 0 || input.1 % div != 0 {
            return Err(Error::Config(format!(
                "residual input {:?} not divisible by 2^{}",
                input, blocks
            )));
        }
        Ok(ResidualArch { input, blocks, width, class_count })
    }

    fn feature_dim(&self) -> usize {
        let h = self.input.0 >> self.blocks;
        let w = self.input.1 >> self.blocks;
        self.width * h * w
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        shapes.push(vec![self.width, self.input.2, 3, 3]); // stem
        shapes.push(vec![self.width]);
        for _ in 0..self.blocks {
            for _ in 0..2 {
                shapes.push(vec![self.width, self.width, 3, 3]);
                shapes.push(vec![self.width]);
                shapes.push(vec![self.width]); // gamma
                shapes.push(vec![self.width]); // beta
            }
        }
        shapes.push(vec![self.feature_dim(), self.class_count]);
        shapes.push(vec![self.class_count]);
        shapes
    }

    pub fn init(&self, rng: &mut ChaCha12Rng) -> Vec<ArrayD<f64>> {
        let mut params: Vec<ArrayD<f64>> = self
            .param_shapes()
            .iter()
            .map(|s| init_tensor(s, rng))
            .collect();
        // gammas start at one: stem takes 2 slots, each half-block 4 slots
        for b in 0..(self.blocks * 2) {
            params[2 + 4 * b + 2].fill(1.0);
        }
        params
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        let batch = g.shape(x)[0];
        let w = self.width;
        let stem = g.conv2d(x, params[0], 1, 1);
        let sb = g.reshape(params[1], &[1, w, 1, 1]);
        let stem_b = g.add(stem, sb);
        let mut cur = g.relu(stem_b);
        let mut p = 2;
        for _ in 0..self.blocks {
            let skip = cur;
            let mut h = cur;
            for half in 0..2 {
                let conv = g.conv2d(h, params[p], 1, 1);
                let bias = g.reshape(params[p + 1], &[1, w, 1, 1]);
                let biased = g.add(conv, bias);
                let normed = instance_norm(g, biased, params[p + 2], params[p + 3], NORM_EPS);
                h = if half == 0 { g.relu(normed) } else { normed };
                p += 4;
            }
            let joined = g.add(h, skip);
            let act = g.relu(joined);
            cur = g.avg_pool2d(act, 2);
        }
        let flat = g.reshape(cur, &[batch, self.feature_dim()]);
        let l = g.matmul(flat, params[p]);
        let lb = g.reshape(params[p + 1], &[1, self.class_count]);
        g.add(l, lb)
    }
}

/// AlexNet-style: larger kernels, no normalization, two-layer classifier.
#[derive(Clone, Debug)]
pub struct AlexArch {
    pub input: (usize, usize, usize),
    pub width: usize,
    pub class_count: usize,
}

impl AlexArch {
    pub fn new(input: (usize, usize, usize), width: usize, class_count: usize) -> Result<Self> {
        if input.0 % 4 != 0 || input.1 % 4 != 0 {
            return Err(Error::Config(format!(
                "alexnet input {:?} not divisible by 4",
                input
            )));
        }
        Ok(AlexArch { input, width, class_count })
    }

    fn feature_dim(&self) -> usize {
        (self.input.0 / 4) * (self.input.1 / 4) * self.width * 2
    }

    fn hidden(&self) -> usize {
        self.width * 4
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![
            vec![self.width, self.input.2, 5, 5],
            vec![self.width],
            vec![self.width * 2, self.width, 5, 5],
            vec![self.width * 2],
            vec![self.feature_dim(), self.hidden()],
            vec![self.hidden()],
            vec![self.hidden(), self.class_count],
            vec![self.class_count],
        ]
    }

    pub fn init(&self, rng: &mut ChaCha12Rng) -> Vec<ArrayD<f64>> {
        self.param_shapes().iter().map(|s| init_tensor(s, rng)).collect()
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        let batch = g.shape(x)[0];
        let c1 = g.conv2d(x, params[0], 1, 2);
        let b1 = g.reshape(params[1], &[1, self.width, 1, 1]);
        let a1 = g.add(c1, b1);
        let r1 = g.relu(a1);
        let p1 = g.avg_pool2d(r1, 2);
        let c2 = g.conv2d(p1, params[2], 1, 2);
        let b2 = g.reshape(params[3], &[1, self.width * 2, 1, 1]);
        let a2 = g.add(c2, b2);
        let r2 = g.relu(a2);
        let p2 = g.avg_pool2d(r2, 2);
        let flat = g.reshape(p2, &[batch, self.feature_dim()]);
        let h0 = g.matmul(flat, params[4]);
        let hb = g.reshape(params[5], &[1, self.hidden()]);
        let h1 = g.add(h0, hb);
        let h = g.relu(h1);
        let l0 = g.matmul(h, params[6]);
        let lb = g.reshape(params[7], &[1, self.class_count]);
        g.add(l0, lb)
    }
}
