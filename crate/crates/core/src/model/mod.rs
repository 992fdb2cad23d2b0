//! Siamese convolutional encoder with a projection head.
//!
//! The encoder is a stack of 3x3 convolution stages with rectifiers and no
//! pooling layers; downsampling happens through stride-2 convolutions. Its
//! last feature maps `A` are average-pooled into the latent vector `h`, and
//! a three-layer perceptron maps `h` to the L2-normalized projection `z`.
//!
//! Every pass is written out by hand so that the backward pass can run in
//! [`Gating::Guided`] mode for guided backpropagation. Weights are always
//! held at values exactly representable in `f32`, which is what checkpoints
//! store; arithmetic runs in `f64`.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use self::checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use self::layers::Gating;

use self::layers::{relu_backward, relu_in_place, Conv2d, Linear};
use crate::data::ImageBuffer;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const DESCRIPTION_SIZES: [usize; 3] = [128, 256, 512];

const NORM_EPS: f64 = 1e-12;
const BIAS_INIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Small,
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: Arch,
    /// Output channels of each stage. The first stage keeps full resolution;
    /// each later stage halves it with a stride-2 convolution.
    pub channels_per_stage: Vec<usize>,
    /// Residual blocks (two convolutions plus identity skip) after each
    /// stage's strided convolution.
    pub residual_blocks_per_stage: usize,
    /// Widths of the two hidden projection-head layers.
    pub head_widths: Vec<usize>,
    /// `d`, the projection size.
    pub description_size: usize,
}

impl EncoderConfig {
    /// Desk-scale preset: four plain stages, 128-dim latent.
    pub fn small(description_size: usize) -> Self {
        Self {
            arch: Arch::Small,
            channels_per_stage: vec![16, 32, 64, 128],
            residual_blocks_per_stage: 0,
            head_widths: vec![128, 64],
            description_size,
        }
    }

    /// Deep residual preset with a 2048-dim latent and a (2048, 512, d)
    /// head.
    pub fn large(description_size: usize) -> Self {
        Self {
            arch: Arch::Large,
            channels_per_stage: vec![64, 256, 512, 1024, 2048],
            residual_blocks_per_stage: 2,
            head_widths: vec![2048, 512],
            description_size,
        }
    }

    pub fn latent_size(&self) -> usize {
        *self.channels_per_stage.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if !DESCRIPTION_SIZES.contains(&self.description_size) {
            return Err(Error::InvalidConfig(format!(
                "description size must be one of {DESCRIPTION_SIZES:?}, got {}",
                self.description_size
            )));
        }
        if self.channels_per_stage.is_empty() || self.channels_per_stage.contains(&0) {
            return Err(Error::InvalidConfig("channels_per_stage must be non-empty and positive".into()));
        }
        if self.head_widths.len() != 2 || self.head_widths.contains(&0) {
            return Err(Error::InvalidConfig("head_widths must hold two positive widths".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Block {
    Plain(Conv2d),
    Residual(Conv2d, Conv2d),
}

#[derive(Debug, Clone)]
enum BlockCache {
    Plain { input: Tensor3, pre: Tensor3 },
    Residual { input: Tensor3, pre1: Tensor3, pre2: Tensor3 },
}

/// Forward state of the projection head.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    input: Vec<f64>,
    /// Pre-activations of each layer; the last entry is the unnormalized
    /// projection.
    pre: Vec<Vec<f64>>,
    norm: f64,
    output: Vec<f64>,
}

impl HeadTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// All intermediate state of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input_shape: (usize, usize, usize),
    blocks: Vec<BlockCache>,
    /// `A`: output of the last convolution stage.
    pub feature_maps: Tensor3,
    /// `h`: spatial mean of `A`.
    pub latent: Vec<f64>,
    head: HeadTrace,
    /// `z`: unit-norm projection of `h`.
    pub projection: Vec<f64>,
}

impl ForwardTrace {
    pub fn head(&self) -> &HeadTrace {
        &self.head
    }

    /// `(channels, height, width)` of the traced input.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }
}

/// A scalar node to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// `h[i]`
    Latent(usize),
    /// `z[i]`
    Projection(usize),
}

/// Parameter gradients, one buffer per parameter tensor in
/// [`Model::parameters`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            tensors: model.parameters().iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    fn pair(&mut self, index: usize) -> (&mut [f64], &mut [f64]) {
        let (head, tail) = self.tensors[index..].split_at_mut(1);
        (&mut head[0], &mut tail[0])
    }
}

pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: EncoderConfig,
    blocks: Vec<Block>,
    head: Vec<Linear>,
}

pub(crate) fn round_to_f32(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

fn normalize(u: &[f64]) -> (f64, Vec<f64>) {
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < NORM_EPS {
        let uniform = 1.0 / (u.len() as f64).sqrt();
        return (norm, vec![uniform; u.len()]);
    }
    (norm, u.iter().map(|v| v / norm).collect())
}

impl Model {
    /// Builds the architecture with He-normal weights drawn from `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |w: &mut [f64], fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            w.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            round_to_f32(w);
        };
        for block in &mut model.blocks {
            match block {
                Block::Plain(c) => {
                    let fan = c.fan_in();
                    fill(&mut c.weight, fan);
                }
                Block::Residual(a, b) => {
                    let fan = a.fan_in();
                    fill(&mut a.weight, fan);
                    fill(&mut b.weight, fan);
                    // Start residual branches near identity.
                    b.weight.iter_mut().for_each(|v| *v *= 0.5);
                    round_to_f32(&mut b.weight);
                }
            }
        }
        for layer in &mut model.head {
            let fan = layer.in_features;
            fill(&mut layer.weight, fan);
        }
        for values in model.parameter_values_mut().into_iter().skip(1).step_by(2) {
            values.fill(BIAS_INIT);
            round_to_f32(values);
        }
        Ok(model)
    }

    /// Architecture with all parameters zero.
    pub fn zeroed(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        let mut in_c = 3;
        for (i, &c) in config.channels_per_stage.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(Block::Plain(Conv2d::new(in_c, c, stride)));
            for _ in 0..config.residual_blocks_per_stage {
                blocks.push(Block::Residual(Conv2d::new(c, c, 1), Conv2d::new(c, c, 1)));
            }
            in_c = c;
        }
        let widths = [config.head_widths[0], config.head_widths[1], config.description_size];
        let mut head = Vec::new();
        let mut prev = in_c;
        for w in widths {
            head.push(Linear::new(prev, w));
            prev = w;
        }
        Ok(Self { config, blocks, head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Named parameter tensors in a fixed order; weights precede biases.
    pub fn parameters(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let convs: Vec<(String, &Conv2d)> = match block {
                Block::Plain(c) => vec![(format!("encoder.{i}.conv"), c)],
                Block::Residual(a, b) => vec![(format!("encoder.{i}.conv1"), a), (format!("encoder.{i}.conv2"), b)],
            };
            for (prefix, c) in convs {
                out.push(ParamRef {
                    name: format!("{prefix}.weight"),
                    shape: vec![c.out_channels, c.in_channels, 3, 3],
                    values: &c.weight,
                });
                out.push(ParamRef {
                    name: format!("{prefix}.bias"),
                    shape: vec![c.out_channels],
                    values: &c.bias,
                });
            }
        }
        for (j, layer) in self.head.iter().enumerate() {
            out.push(ParamRef {
                name: format!("head.{j}.weight"),
                shape: vec![layer.out_features, layer.in_features],
                values: &layer.weight,
            });
            out.push(ParamRef {
                name: format!("head.{j}.bias"),
                shape: vec![layer.out_features],
                values: &layer.bias,
            });
        }
        out
    }

    /// Mutable parameter buffers in [`Model::parameters`] order.
    pub(crate) fn parameter_values_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            match block {
                Block::Plain(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Block::Residual(a, b) => {
                    out.push(&mut a.weight);
                    out.push(&mut a.bias);
                    out.push(&mut b.weight);
                    out.push(&mut b.bias);
                }
            }
        }
        for layer in &mut self.head {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    /// Replaces every parameter tensor; `values` follows
    /// [`Model::parameters`] order and must match each tensor's length.
    pub fn set_parameters(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let slots = self.parameter_values_mut();
        if slots.len() != values.len() {
            return Err(Error::ShapeMismatch(format!("{} parameter tensors, got {}", slots.len(), values.len())));
        }
        if let Some(i) = slots.iter().zip(values).position(|(s, v)| s.len() != v.len()) {
            return Err(Error::ShapeMismatch(format!(
                "parameter {i} has {} values, got {}",
                slots[i].len(),
                values[i].len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            slot.copy_from_slice(v);
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.values.len()).sum()
    }

    fn block_offsets(&self) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut at = 0;
        for block in &self.blocks {
            offsets.push(at);
            at += match block {
                Block::Plain(_) => 2,
                Block::Residual(..) => 4,
            };
        }
        (offsets, at)
    }

    pub fn forward(&self, image: &ImageBuffer) -> Result<ForwardTrace> {
        self.forward_tensor(image.to_tensor())
    }

    /// The encoder is fully convolutional, so any `3 x H x W` input with
    /// `H, W >= 1` is accepted.
    pub fn forward_tensor(&self, input: Tensor3) -> Result<ForwardTrace> {
        if input.channels != 3 || input.height == 0 || input.width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "expected a 3-channel image, got {}x{}x{}",
                input.channels, input.height, input.width
            )));
        }
        let input_shape = (input.channels, input.height, input.width);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut x = input;
        for block in &self.blocks {
            match block {
                Block::Plain(conv) => {
                    let pre = conv.forward(&x);
                    let mut out = pre.clone();
                    relu_in_place(&mut out.data);
                    caches.push(BlockCache::Plain { input: x, pre });
                    x = out;
                }
                Block::Residual(first, second) => {
                    let pre1 = first.forward(&x);
                    let mut mid = pre1.clone();
                    relu_in_place(&mut mid.data);
                    let mut pre2 = second.forward(&mid);
                    pre2.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += b);
                    let mut out = pre2.clone();
                    relu_in_place(&mut out.data);
                    caches.push(BlockCache::Residual { input: x, pre1, pre2 });
                    x = out;
                }
            }
        }
        let latent = x.spatial_mean();
        let head = self.project(&latent);
        let projection = head.output.clone();
        Ok(ForwardTrace {
            input_shape,
            blocks: caches,
            feature_maps: x,
            latent,
            head,
            projection,
        })
    }

    /// Runs the projection head on a latent vector.
    pub fn project(&self, latent: &[f64]) -> HeadTrace {
        let mut pre = Vec::with_capacity(self.head.len());
        let mut x = latent.to_vec();
        for (j, layer) in self.head.iter().enumerate() {
            let y = layer.forward(&x);
            pre.push(y.clone());
            x = y;
            if j + 1 < self.head.len() {
                relu_in_place(&mut x);
            }
        }
        let (norm, output) = normalize(&x);
        HeadTrace {
            input: latent.to_vec(),
            pre,
            norm,
            output,
        }
    }

    /// Backward through the head from `grad_z`; returns the latent gradient.
    pub fn project_backward(
        &self,
        trace: &HeadTrace,
        grad_projection: &[f64],
        gating: Gating,
        mut grads: Option<&mut Gradients>,
    ) -> Vec<f64> {
        let z = &trace.output;
        let mut g: Vec<f64> = if trace.norm < NORM_EPS {
            vec![0.0; z.len()]
        } else {
            let dot: f64 = z.iter().zip(grad_projection).map(|(a, b)| a * b).sum();
            grad_projection
                .iter()
                .zip(z)
                .map(|(gz, zi)| (gz - zi * dot) / trace.norm)
                .collect()
        };
        let (_, head_offset) = self.block_offsets();
        for j in (0..self.head.len()).rev() {
            let layer = &self.head[j];
            let input: Vec<f64> = if j == 0 {
                trace.input.clone()
            } else {
                trace.pre[j - 1].iter().map(|v| v.max(0.0)).collect()
            };
            let slot = grads.as_deref_mut().map(|gr| gr.pair(head_offset + 2 * j));
            g = layer.backward(&input, &g, slot);
            if j > 0 {
                relu_backward(&mut g, &trace.pre[j - 1], gating);
            }
        }
        g
    }

    /// Backward through the encoder from a gradient on the feature maps `A`.
    /// Parameter gradients accumulate into `grads`; the input gradient is
    /// returned when `need_input`.
    pub fn encoder_backward(
        &self,
        trace: &ForwardTrace,
        grad_features: &Tensor3,
        gating: Gating,
        mut grads: Option<&mut Gradients>,
        need_input: bool,
    ) -> Option<Tensor3> {
        assert!(grad_features.same_shape(&trace.feature_maps), "feature gradient shape");
        let (offsets, _) = self.block_offsets();
        let mut g = grad_features.clone();
        for (i, (block, cache)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let want_input = need_input || i > 0;
            match (block, cache) {
                (Block::Plain(conv), BlockCache::Plain { input, pre }) => {
                    relu_backward(&mut g.data, &pre.data, gating);
                    let slot = grads.as_deref_mut().map(|gr| gr.pair(offsets[i]));
                    match conv.backward(input, &g, slot, want_input) {
                        Some(next) => g = next,
                        None => return None,
                    }
                }
                (Block::Residual(first, second), BlockCache::Residual { input, pre1, pre2 }) => {
                    relu_backward(&mut g.data, &pre2.data, gating);
                    let skip = g.clone();
                    let mut mid = pre1.clone();
                    relu_in_place(&mut mid.data);
                    let slot = grads.as_deref_mut().map(|gr| gr.pair(offsets[i] + 2));
                    let mut gm = second.backward(&mid, &g, slot, true).expect("input gradient requested");
                    relu_backward(&mut gm.data, &pre1.data, gating);
                    let slot = grads.as_deref_mut().map(|gr| gr.pair(offsets[i]));
                    match first.backward(input, &gm, slot, want_input) {
                        Some(mut next) => {
                            next.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
                            g = next;
                        }
                        None => return None,
                    }
                }
                _ => unreachable!("trace does not belong to this model"),
            }
        }
        Some(g)
    }

    /// Distributes a latent gradient uniformly over the pooled positions.
    pub fn pool_backward(&self, trace: &ForwardTrace, grad_latent: &[f64]) -> Tensor3 {
        let a = &trace.feature_maps;
        let n = a.plane_len() as f64;
        let mut g = Tensor3::zeros(a.channels, a.height, a.width);
        for (c, &dh) in grad_latent.iter().enumerate() {
            g.plane_mut(c).fill(dh / n);
        }
        g
    }

    fn target_latent_gradient(&self, trace: &ForwardTrace, target: Target, gating: Gating) -> Result<Vec<f64>> {
        match target {
            Target::Latent(i) => {
                if i >= trace.latent.len() {
                    return Err(Error::ShapeMismatch(format!("latent index {i} out of range")));
                }
                let mut g = vec![0.0; trace.latent.len()];
                g[i] = 1.0;
                Ok(g)
            }
            Target::Projection(i) => {
                if i >= trace.projection.len() {
                    return Err(Error::ShapeMismatch(format!("projection index {i} out of range")));
                }
                let mut gz = vec![0.0; trace.projection.len()];
                gz[i] = 1.0;
                Ok(self.project_backward(&trace.head, &gz, gating, None))
            }
        }
    }

    /// Gradient of a scalar node with respect to the traced input image.
    pub fn input_gradient(&self, trace: &ForwardTrace, target: Target, gating: Gating) -> Result<Tensor3> {
        let dh = self.target_latent_gradient(trace, target, gating)?;
        let da = self.pool_backward(trace, &dh);
        let grad = self
            .encoder_backward(trace, &da, gating, None, true)
            .expect("input gradient requested");
        if grad.data.iter().all(|v| *v == 0.0) {
            return Err(Error::NoGradientPath);
        }
        Ok(grad)
    }

    /// Guided backpropagation of `target` to the input.
    pub fn backward_guided(&self, trace: &ForwardTrace, target: Target) -> Result<Tensor3> {
        self.input_gradient(trace, target, Gating::Guided)
    }

    /// Accumulates parameter gradients of `<grad_z, z>` into `grads`.
    pub fn accumulate_parameter_gradients(&self, trace: &ForwardTrace, grad_projection: &[f64], grads: &mut Gradients) {
        let dh = self.project_backward(&trace.head, grad_projection, Gating::Standard, Some(grads));
        let da = self.pool_backward(trace, &dh);
        self.encoder_backward(trace, &da, Gating::Standard, Some(grads), false);
    }
}

#[cfg(test)]
mod tests;
