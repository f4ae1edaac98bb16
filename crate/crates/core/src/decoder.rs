//! The generator mapping latent vectors to image space: a linear projection
//! onto a small spatial grid followed by stride-2 transposed-convolution
//! blocks (each ConvTranspose -> BatchNorm -> LeakyReLU), closed by a 3x3
//! convolution with a tanh head, so outputs always land in [-1, 1].
//!
//! Three preset capacities (S/M/L) cover the standard image sizes; fully
//! custom specs serve small experiments and tests.

use autograd::{Graph, Var};
use ndarray::{Array1, ArrayD, IxDyn};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{batch_norm_infer, batch_norm_train, randn, NORM_EPS};
use crate::util::rng;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Momentum for the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeClass {
    S,
    M,
    L,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub size_class: SizeClass,
    pub block_count: usize,
    pub latent_dim: usize,
    /// Spatial grid the projection reshapes to.
    pub base_grid: (usize, usize),
    /// Channel schedule: entry 0 is the projection width, then one entry per
    /// block output. Length = block_count + 1.
    pub channels: Vec<usize>,
    /// (H, W, C)
    pub output_shape: (usize, usize, usize),
}

impl DecoderSpec {
    /// Preset capacity for a given output shape. S projects to a 1x1 grid,
    /// M and L to 2x2; channel schedules halve per block.
    pub fn preset(size: SizeClass, output_shape: (usize, usize, usize)) -> Result<DecoderSpec> {
        let (h, w, _c) = output_shape;
        if h != w {
            return Err(Error::Config(format!(
                "presets require square outputs, got {h}x{w}"
            )));
        }
        let (latent_dim, c0, grid) = match size {
            SizeClass::S => (64, 272, 1),
            SizeClass::M => (1028, 576, 2),
            SizeClass::L => (2048, 480, 2),
            SizeClass::Custom => {
                return Err(Error::Config("custom specs are built directly".into()))
            }
        };
        let blocks = doubling_steps(grid, h).ok_or_else(|| {
            Error::Config(format!("output {h} is not a power-of-two multiple of {grid}"))
        })?;
        let spec = DecoderSpec {
            size_class: size,
            block_count: blocks,
            latent_dim,
            base_grid: (grid, grid),
            channels: halving_schedule(c0, blocks),
            output_shape,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Small custom decoder with a halving channel schedule.
    pub fn custom(
        latent_dim: usize,
        block_count: usize,
        base_channels: usize,
        output_shape: (usize, usize, usize),
    ) -> Result<DecoderSpec> {
        let (h, w, _) = output_shape;
        let gh = h >> block_count;
        let gw = w >> block_count;
        let spec = DecoderSpec {
            size_class: SizeClass::Custom,
            block_count,
            latent_dim,
            base_grid: (gh, gw),
            channels: halving_schedule(base_channels, block_count),
            output_shape,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Dimensionality of the projection output (c0 * grid area).
    pub fn projection_dim(&self) -> usize {
        self.channels[0] * self.base_grid.0 * self.base_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.output_shape;
        if self.latent_dim == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Config("decoder spec has a zero dimension".into()));
        }
        if self.channels.len() != self.block_count + 1 {
            return Err(Error::Config(format!(
                "channel schedule length {} != block_count + 1 = {}",
                self.channels.len(),
                self.block_count + 1
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("zero-width channel in schedule".into()));
        }
        let (gh, gw) = self.base_grid;
        if gh == 0 || gw == 0 {
            return Err(Error::Config(format!(
                "base grid {gh}x{gw} invalid: too many doubling blocks for output {h}x{w}"
            )));
        }
        if gh << self.block_count != h || gw << self.block_count != w {
            return Err(Error::Config(format!(
                "grid {gh}x{gw} doubled {} times gives {}x{}, but output is {h}x{w}",
                self.block_count,
                gh << self.block_count,
                gw << self.block_count,
            )));
        }
        Ok(())
    }

    /// Exact learned-parameter count (projection, blocks, norm affine, head).
    pub fn param_count(&self) -> usize {
        let (_, _, cout) = self.output_shape;
        let pdim = self.projection_dim();
        let mut count = self.latent_dim * pdim + pdim;
        for b in 0..self.block_count {
            let (ci, co) = (self.channels[b], self.channels[b + 1]);
            count += ci * co * 16 + co + 2 * co; // convT weight+bias, gamma+beta
        }
        let last = *self.channels.last().unwrap();
        count += last * cout * 9 + cout;
        count
    }

    /// Elements that end up in the serialized artifact: parameters plus the
    /// batch-norm running statistics.
    pub fn storage_element_count(&self) -> usize {
        let running: usize = self.channels[1..].iter().map(|c| 2 * c).sum();
        self.param_count() + running
    }
}

fn doubling_steps(from: usize, to: usize) -> Option<usize> {
    let mut cur = from;
    let mut steps = 0;
    while cur < to {
        cur <<= 1;
        steps += 1;
    }
    (cur == to).then_some(steps)
}

fn halving_schedule(c0: usize, blocks: usize) -> Vec<usize> {
    let mut channels = vec![c0];
    for _ in 0..blocks {
        let next = (channels.last().unwrap() / 2).max(4);
        channels.push(next);
    }
    channels
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    /// ConvTranspose weight, layout [cin, cout, 4, 4].
    pub weight: ArrayD<f64>,
    pub bias: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub spec: DecoderSpec,
    pub proj_w: ArrayD<f64>,
    pub proj_b: Array1<f64>,
    pub blocks: Vec<DecoderBlock>,
    pub head_w: ArrayD<f64>,
    pub head_b: Array1<f64>,
}

impl DecoderParams {
    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Serialize every tensor (including running stats) into one f32 vector.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.spec.storage_element_count());
        let push = |out: &mut Vec<f32>, it: &ArrayD<f64>| {
            out.extend(it.iter().map(|&v| v as f32));
        };
        let push1 = |out: &mut Vec<f32>, it: &Array1<f64>| {
            out.extend(it.iter().map(|&v| v as f32));
        };
        push(&mut out, &self.proj_w);
        push1(&mut out, &self.proj_b);
        for b in &self.blocks {
            push(&mut out, &b.weight);
            push1(&mut out, &b.bias);
            push1(&mut out, &b.gamma);
            push1(&mut out, &b.beta);
            push1(&mut out, &b.running_mean);
            push1(&mut out, &b.running_var);
        }
        push(&mut out, &self.head_w);
        push1(&mut out, &self.head_b);
        out
    }

    pub fn unflatten(spec: &DecoderSpec, flat: &[f32]) -> Result<DecoderParams> {
        if flat.len() != spec.storage_element_count() {
            return Err(Error::Shape(format!(
                "decoder blob has {} elements, spec wants {}",
                flat.len(),
                spec.storage_element_count()
            )));
        }
        let mut off = 0;
        let mut take = |n: usize| -> Vec<f64> {
            let s: Vec<f64> = flat[off..off + n].iter().map(|&v| v as f64).collect();
            off += n;
            s
        };
        let pdim = spec.projection_dim();
        let proj_w = ArrayD::from_shape_vec(IxDyn(&[spec.latent_dim, pdim]), take(spec.latent_dim * pdim)).unwrap();
        let proj_b = Array1::from_vec(take(pdim));
        let mut blocks = Vec::with_capacity(spec.block_count);
        for b in 0..spec.block_count {
            let (ci, co) = (spec.channels[b], spec.channels[b + 1]);
            let weight =
                ArrayD::from_shape_vec(IxDyn(&[ci, co, 4, 4]), take(ci * co * 16)).unwrap();
            blocks.push(DecoderBlock {
                weight,
                bias: Array1::from_vec(take(co)),
                gamma: Array1::from_vec(take(co)),
                beta: Array1::from_vec(take(co)),
                running_mean: Array1::from_vec(take(co)),
                running_var: Array1::from_vec(take(co)),
            });
        }
        let last = *spec.channels.last().unwrap();
        let cout = spec.output_shape.2;
        let head_w = ArrayD::from_shape_vec(IxDyn(&[cout, last, 3, 3]), take(last * cout * 9)).unwrap();
        let head_b = Array1::from_vec(take(cout));
        Ok(DecoderParams {
            spec: spec.clone(),
            proj_w,
            proj_b,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Trainable tensors in a fixed order (running stats excluded).
    pub fn trainable(&self) -> Vec<ArrayD<f64>> {
        let mut out = vec![self.proj_w.clone(), self.proj_b.clone().into_dyn()];
        for b in &self.blocks {
            out.push(b.weight.clone());
            out.push(b.bias.clone().into_dyn());
            out.push(b.gamma.clone().into_dyn());
            out.push(b.beta.clone().into_dyn());
        }
        out.push(self.head_w.clone());
        out.push(self.head_b.clone().into_dyn());
        out
    }

    /// Write back tensors produced by [`DecoderParams::trainable`].
    pub fn set_trainable(&mut self, tensors: &[ArrayD<f64>]) {
        let mut it = tensors.iter();
        self.proj_w = it.next().unwrap().clone();
        self.proj_b = to1(it.next().unwrap());
        for b in &mut self.blocks {
            b.weight = it.next().unwrap().clone();
            b.bias = to1(it.next().unwrap());
            b.gamma = to1(it.next().unwrap());
            b.beta = to1(it.next().unwrap());
        }
        self.head_w = it.next().unwrap().clone();
        self.head_b = to1(it.next().unwrap());
        assert!(it.next().is_none());
    }
}

fn to1(a: &ArrayD<f64>) -> Array1<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("1-d tensor")
        .to_owned()
}

/// Randomly initialize decoder parameters for a validated spec.
pub fn build_decoder(spec: &DecoderSpec, seed: u64) -> Result<DecoderParams> {
    spec.validate()?;
    let mut r = rng(seed);
    let pdim = spec.projection_dim();
    let proj_w = randn(&[spec.latent_dim, pdim], (1.0 / spec.latent_dim as f64).sqrt(), &mut r);
    let proj_b = Array1::zeros(pdim);
    let mut blocks = Vec::with_capacity(spec.block_count);
    for b in 0..spec.block_count {
        let (ci, co) = (spec.channels[b], spec.channels[b + 1]);
        let std = (2.0 / (ci as f64 * 16.0)).sqrt();
        blocks.push(DecoderBlock {
            weight: randn(&[ci, co, 4, 4], std, &mut r),
            bias: Array1::zeros(co),
            gamma: Array1::ones(co),
            beta: Array1::zeros(co),
            running_mean: Array1::zeros(co),
            running_var: Array1::ones(co),
        });
    }
    let last = *spec.channels.last().unwrap();
    let cout = spec.output_shape.2;
    let head_std = (1.0 / (last as f64 * 9.0)).sqrt();
    let head_w = randn(&[cout, last, 3, 3], head_std, &mut r);
    let head_b = Array1::zeros(cout);
    Ok(DecoderParams { spec: spec.clone(), proj_w, proj_b, blocks, head_w, head_b })
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Graph handles for the trainable decoder tensors.
pub struct DecoderVars {
    pub proj_w: Var,
    pub proj_b: Var,
    /// (weight, bias, gamma, beta) per block.
    pub blocks: Vec<(Var, Var, Var, Var)>,
    pub head_w: Var,
    pub head_b: Var,
}

impl DecoderVars {
    pub fn from_params(g: &mut Graph, p: &DecoderParams, trainable: bool) -> DecoderVars {
        let mut lift = |a: ArrayD<f64>| if trainable { g.param(a) } else { g.constant(a) };
        let proj_w = lift(p.proj_w.clone());
        let proj_b = lift(p.proj_b.clone().into_dyn());
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for b in &p.blocks {
            let w = lift(b.weight.clone());
            let bi = lift(b.bias.clone().into_dyn());
            let ga = lift(b.gamma.clone().into_dyn());
            let be = lift(b.beta.clone().into_dyn());
            blocks.push((w, bi, ga, be));
        }
        let head_w = lift(p.head_w.clone());
        let head_b = lift(p.head_b.clone().into_dyn());
        DecoderVars { proj_w, proj_b, blocks, head_w, head_b }
    }

    /// Flat list in optimizer order (matches [`DecoderParams::trainable`]).
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.proj_w, self.proj_b];
        for (w, b, ga, be) in &self.blocks {
            out.extend([*w, *b, *ga, *be]);
        }
        out.extend([self.head_w, self.head_b]);
        out
    }
}

/// Decode latents on the graph. In train mode batch statistics normalize each
/// block and are returned (mean, var per block) so the caller can update the
/// running estimates; in inference mode the stored running stats are used.
/// Output layout is NCHW in [-1, 1].
pub fn decode_graph(
    g: &mut Graph,
    params: &DecoderParams,
    vars: &DecoderVars,
    z: Var,
    train_mode: bool,
) -> Result<(Var, Vec<(Var, Var)>)> {
    let spec = &params.spec;
    let zshape = g.shape(z).to_vec();
    if zshape.len() != 2 || zshape[1] != spec.latent_dim {
        return Err(Error::Shape(format!(
            "latent batch must be [B, {}], got {:?}",
            spec.latent_dim, zshape
        )));
    }
    let batch = zshape[0];
    let (gh, gw) = spec.base_grid;
    let proj = g.matmul(z, vars.proj_w);
    let pb = g.reshape(vars.proj_b, &[1, spec.projection_dim()]);
    let projb = g.add(proj, pb);
    let mut cur = g.reshape(projb, &[batch, spec.channels[0], gh, gw]);
    let mut stats = Vec::new();
    let (mut h, mut w) = (gh, gw);
    for (bi, (wv, bv, ga, be)) in vars.blocks.iter().enumerate() {
        h *= 2;
        w *= 2;
        let up = g.conv2d_input_grad(cur, *wv, 2, 1, (h, w));
        let co = spec.channels[bi + 1];
        let bias = g.reshape(*bv, &[1, co, 1, 1]);
        let biased = g.add(up, bias);
        let normed = if train_mode {
            let (y, m, v) = batch_norm_train(g, biased, *ga, *be, NORM_EPS);
            stats.push((m, v));
            y
        } else {
            let rm = g.constant(params.blocks[bi].running_mean.clone().into_dyn());
            let rv = g.constant(params.blocks[bi].running_var.clone().into_dyn());
            batch_norm_infer(g, biased, *ga, *be, rm, rv, NORM_EPS)
        };
        cur = g.leaky_relu(normed, LEAKY_SLOPE);
    }
    let conv = g.conv2d(cur, vars.head_w, 1, 1);
    let cout = spec.output_shape.2;
    let hb = g.reshape(vars.head_b, &[1, cout, 1, 1]);
    let biased = g.add(conv, hb);
    Ok((g.tanh(biased), stats))
}

/// Fold fresh batch statistics into the running estimates.
pub fn update_running_stats(params: &mut DecoderParams, stats: &[(ArrayD<f64>, ArrayD<f64>)]) {
    for (block, (m, v)) in params.blocks.iter_mut().zip(stats) {
        let m1 = m.iter().copied().collect::<Vec<f64>>();
        let v1 = v.iter().copied().collect::<Vec<f64>>();
        for (i, rm) in block.running_mean.iter_mut().enumerate() {
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m1[i];
        }
        for (i, rv) in block.running_var.iter_mut().enumerate() {
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v1[i];
        }
    }
}

/// Plain decode: [B, d] latents to an NHWC image batch in [-1, 1].
pub fn decode(params: &DecoderParams, z: &ArrayD<f64>, train_mode: bool) -> Result<ArrayD<f64>> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let vars = DecoderVars::from_params(&mut g, params, false);
    let (out, _) = decode_graph(&mut g, params, &vars, zv, train_mode)?;
    Ok(crate::util::nchw_to_nhwc(g.val(out)))
}
