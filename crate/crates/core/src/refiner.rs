//! Stage two: a fully-convolutional U-Net that maps a 20-channel shift
//! stack to RGB at any resolution divisible by `2^(levels-1)`.
//!
//! Encoder level 0 convolves at full resolution; every deeper level halves
//! the resolution with a strided convolution. Each decoder level upsamples
//! (nearest, 2x), concatenates the encoder output of the same resolution and
//! applies a 3x3 convolution. Every convolution except the output head is
//! followed by batch normalization and a leaky rectifier; the head ends in a
//! sigmoid.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coarse::{coarse_fill, CoarseConfig, CoarseResult};
use crate::error::{ensure, Result};
use crate::image::{composite, Image, Mask};
use crate::nn::{
    concat_channels, leaky_relu_backward, leaky_relu_inplace, sigmoid_backward, sigmoid_inplace, split_channels,
    upsample2x, upsample2x_backward, BatchNorm2d, BnCache, Conv2d, LEAKY_SLOPE,
};
use crate::shift::{assemble_stack, ShiftStack, STACK_CHANNELS};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub encoder_channels: Vec<usize>,
    pub encoder_kernel_sizes: Vec<usize>,
    pub decoder_kernel_size: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![32, 64, 128, 256, 256],
            encoder_kernel_sizes: vec![7, 5, 5, 3, 3],
            decoder_kernel_size: 3,
            input_channels: STACK_CHANNELS,
            output_channels: 3,
        }
    }
}

impl RefinerConfig {
    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn grid(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.encoder_channels.is_empty(), "refiner needs at least one encoder level");
        ensure!(
            self.encoder_channels.len() == self.encoder_kernel_sizes.len(),
            "encoder channel list ({}) and kernel list ({}) differ in length",
            self.encoder_channels.len(),
            self.encoder_kernel_sizes.len()
        );
        ensure!(self.encoder_channels.iter().all(|&c| c > 0), "encoder widths must be positive");
        ensure!(
            self.encoder_kernel_sizes.iter().all(|&k| k % 2 == 1),
            "encoder kernels must be odd, got {:?}",
            self.encoder_kernel_sizes
        );
        ensure!(self.decoder_kernel_size == 3, "decoder kernels are 3x3, got {}", self.decoder_kernel_size);
        ensure!(self.input_channels == STACK_CHANNELS, "input must be the {STACK_CHANNELS}-channel stack");
        ensure!(self.output_channels == 3, "output must be RGB");
        ensure!(self.levels() <= 12, "at most 12 levels are supported");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

/// Weights and normalization statistics of the refinement network.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerModel<T = f32> {
    config: RefinerConfig,
    pub encoder: Vec<ConvBlock<T>>,
    /// `decoder[i]` produces the level-`i` resolution.
    pub decoder: Vec<ConvBlock<T>>,
    pub head: Conv2d<T>,
}

/// Tensor name, shape and read-only data.
pub type NamedTensor<'a, T> = (String, Vec<usize>, &'a [T]);

struct BlockCache<T> {
    input: Option<Tensor<T>>,
    bn: BnCache<T>,
    out: Tensor<T>,
}

/// Activations recorded by a training-mode forward pass.
pub struct ForwardCache<T> {
    input: Tensor<T>,
    enc: Vec<BlockCache<T>>,
    dec: Vec<BlockCache<T>>,
    output: Tensor<T>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

/// Parameter gradients in [`RefinerModel::parameters`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> RefinerModel<T> {
    /// Fan-in scaled uniform initialization, deterministic in `seed`.
    pub fn init(config: RefinerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = &config.encoder_channels;
        let gain = libm::sqrt(2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE));
        let mut encoder = Vec::with_capacity(e.len());
        for (i, (&ch, &k)) in e.iter().zip(&config.encoder_kernel_sizes).enumerate() {
            let cin = if i == 0 { config.input_channels } else { e[i - 1] };
            let stride = if i == 0 { 1 } else { 2 };
            let mut conv = Conv2d::new(cin, ch, k, stride, false);
            conv.init_uniform(&mut rng, gain);
            encoder.push(ConvBlock { conv, bn: BatchNorm2d::new(ch) });
        }
        let mut decoder = Vec::with_capacity(e.len() - 1);
        for i in 0..e.len() - 1 {
            let mut conv = Conv2d::new(e[i + 1] + e[i], e[i], config.decoder_kernel_size, 1, false);
            conv.init_uniform(&mut rng, gain);
            decoder.push(ConvBlock { conv, bn: BatchNorm2d::new(e[i]) });
        }
        let mut head = Conv2d::new(e[0], config.output_channels, config.decoder_kernel_size, 1, true);
        head.init_uniform(&mut rng, 1.0);
        Ok(Self { config, encoder, decoder, head })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> RefinerModel<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect::<Vec<U>>();
        let conv = |c: &Conv2d<T>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            weight: cv(&c.weight),
            bias: c.bias.as_deref().map(cv),
        };
        let block = |b: &ConvBlock<T>| ConvBlock {
            conv: conv(&b.conv),
            bn: BatchNorm2d {
                gamma: cv(&b.bn.gamma),
                beta: cv(&b.bn.beta),
                running_mean: cv(&b.bn.running_mean),
                running_var: cv(&b.bn.running_var),
                eps: b.bn.eps,
                momentum: b.bn.momentum,
            },
        };
        RefinerModel {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(block).collect(),
            decoder: self.decoder.iter().map(block).collect(),
            head: conv(&self.head),
        }
    }

    fn blocks(&self) -> impl Iterator<Item = (String, &ConvBlock<T>)> {
        let enc = self.encoder.iter().enumerate().map(|(i, b)| (format!("encoder.{i}"), b));
        let dec = self.decoder.iter().enumerate().map(|(i, b)| (format!("decoder.{i}"), b));
        enc.chain(dec)
    }

    /// Trainable tensors in a fixed order: per block (encoder, then decoder)
    /// convolution weight, normalization scale, normalization shift; then the
    /// head weight and bias.
    pub fn parameters(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out = Vec::new();
        for (name, b) in self.blocks() {
            out.push((format!("{name}.conv.weight"), b.conv.weight_shape().to_vec(), &b.conv.weight[..]));
            out.push((format!("{name}.bn.weight"), vec![b.bn.channels()], &b.bn.gamma[..]));
            out.push((format!("{name}.bn.bias"), vec![b.bn.channels()], &b.bn.beta[..]));
        }
        out.push(("head.weight".into(), self.head.weight_shape().to_vec(), &self.head.weight[..]));
        let bias = self.head.bias.as_deref().expect("head has a bias");
        out.push(("head.bias".into(), vec![bias.len()], bias));
        out
    }

    /// Mutable views of [`RefinerModel::parameters`], same order.
    pub fn parameters_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut b.conv.weight);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out.push(&mut self.head.weight);
        out.push(self.head.bias.as_deref_mut().expect("head has a bias"));
        out
    }

    /// Non-trainable normalization statistics.
    pub fn buffers(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out = Vec::new();
        for (name, b) in self.blocks() {
            out.push((format!("{name}.bn.running_mean"), vec![b.bn.channels()], &b.bn.running_mean[..]));
            out.push((format!("{name}.bn.running_var"), vec![b.bn.channels()], &b.bn.running_var[..]));
        }
        out
    }

    /// Every named tensor: parameters followed by buffers.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut all = self.parameters();
        all.extend(self.buffers());
        all
    }

    /// Overwrites one named tensor; the length must match.
    pub fn load_tensor(&mut self, name: &str, data: &[T]) -> Result<()> {
        let slot: Option<&mut Vec<T>> = if name == "head.weight" {
            Some(&mut self.head.weight)
        } else if name == "head.bias" {
            self.head.bias.as_mut()
        } else {
            let mut parts = name.splitn(3, '.');
            let (side, idx, field) = (parts.next(), parts.next(), parts.next());
            let idx: Option<usize> = idx.and_then(|s| s.parse().ok());
            let block = match (side, idx) {
                (Some("encoder"), Some(i)) => self.encoder.get_mut(i),
                (Some("decoder"), Some(i)) => self.decoder.get_mut(i),
                _ => None,
            };
            block.and_then(|b| match field {
                Some("conv.weight") => Some(&mut b.conv.weight),
                Some("bn.weight") => Some(&mut b.bn.gamma),
                Some("bn.bias") => Some(&mut b.bn.beta),
                Some("bn.running_mean") => Some(&mut b.bn.running_mean),
                Some("bn.running_var") => Some(&mut b.bn.running_var),
                _ => None,
            })
        };
        let slot = slot.ok_or_else(|| crate::error::contract!("unknown refiner tensor {name}"))?;
        ensure!(slot.len() == data.len(), "tensor {name} has {} elements, expected {}", data.len(), slot.len());
        slot.copy_from_slice(data);
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients { tensors: self.parameters().iter().map(|(_, _, d)| vec![T::zero(); d.len()]).collect() }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let g = self.config.grid();
        ensure!(x.c() == self.config.input_channels, "expected {} input channels, got {}", self.config.input_channels, x.c());
        ensure!(
            x.h() % g == 0 && x.w() % g == 0 && x.h() > 0 && x.w() > 0,
            "input {}x{} is not a multiple of {g}; pad it first",
            x.h(),
            x.w()
        );
        Ok(())
    }

    /// Runs the network on a batch of stack tensors. Train mode uses batch
    /// statistics but does not touch the running statistics.
    pub fn forward_tensor(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => Ok(self.forward_train(x)?.output),
            Mode::Infer => self.forward_infer(x),
        }
    }

    fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let run = |b: &ConvBlock<T>, input: &Tensor<T>| -> Result<Tensor<T>> {
            let mut z = b.conv.forward(input)?;
            b.bn.forward_infer(&mut z);
            leaky_relu_inplace(&mut z);
            Ok(z)
        };
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(self.encoder.len());
        for (i, b) in self.encoder.iter().enumerate() {
            let out = run(b, if i == 0 { x } else { &skips[i - 1] })?;
            skips.push(out);
        }
        let mut prev = skips.pop().expect("at least one level");
        for i in (0..self.decoder.len()).rev() {
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = concat_channels(&upsample2x(&prev), &skip);
            drop(skip);
            drop(prev);
            prev = run(&self.decoder[i], &cat)?;
        }
        let mut out = self.head.forward(&prev)?;
        sigmoid_inplace(&mut out);
        Ok(out)
    }

    /// Training-mode forward that records what [`RefinerModel::backward`] needs.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let run = |b: &ConvBlock<T>, input: &Tensor<T>| -> Result<(BnCache<T>, Tensor<T>)> {
            let z = b.conv.forward(input)?;
            let (mut y, bn) = b.bn.forward_train(z);
            leaky_relu_inplace(&mut y);
            Ok((bn, y))
        };
        let mut enc: Vec<BlockCache<T>> = Vec::with_capacity(self.encoder.len());
        for (i, b) in self.encoder.iter().enumerate() {
            let (bn, out) = run(b, if i == 0 { x } else { &enc[i - 1].out })?;
            enc.push(BlockCache { input: None, bn, out });
        }
        let levels = self.encoder.len();
        let mut dec: Vec<Option<BlockCache<T>>> = (0..self.decoder.len()).map(|_| None).collect();
        for i in (0..self.decoder.len()).rev() {
            let prev = if i + 1 == levels - 1 { &enc[levels - 1].out } else { &dec[i + 1].as_ref().expect("computed").out };
            let cat = concat_channels(&upsample2x(prev), &enc[i].out);
            let (bn, out) = run(&self.decoder[i], &cat)?;
            dec[i] = Some(BlockCache { input: Some(cat), bn, out });
        }
        let dec: Vec<BlockCache<T>> = dec.into_iter().map(|d| d.expect("computed")).collect();
        let last = if dec.is_empty() { &enc[0].out } else { &dec[0].out };
        let mut output = self.head.forward(last)?;
        sigmoid_inplace(&mut output);
        Ok(ForwardCache { input: x.clone(), enc, dec, output })
    }

    /// Backpropagates `d_output` (gradient w.r.t. the sigmoid output).
    pub fn backward(&self, cache: &ForwardCache<T>, d_output: &Tensor<T>) -> Gradients<T> {
        let mut grads = self.zero_gradients();
        let levels = self.encoder.len();
        let n_dec = self.decoder.len();
        // Parameter slots: 3 per block, encoder blocks first.
        let enc_slot = |i: usize| 3 * i;
        let dec_slot = |i: usize| 3 * (levels + i);
        let head_slot = 3 * (levels + n_dec);

        let mut d = d_output.clone();
        sigmoid_backward(&cache.output, &mut d);
        let head_in = if n_dec == 0 { &cache.enc[0].out } else { &cache.dec[0].out };
        let (gw, rest) = grads.tensors[head_slot..].split_at_mut(1);
        let mut d_prev = self.head.backward(head_in, &d, Some(&mut gw[0]), Some(&mut rest[0]), true).expect("requested");

        let mut d_enc: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g),
        };

        for i in 0..n_dec {
            let c = &cache.dec[i];
            let block = &self.decoder[i];
            let s = dec_slot(i);
            let d_cat = block_backward(block, c, c.input.as_ref().expect("decoder input"), d_prev, &mut grads, s, true)
                .expect("requested");
            let up_channels = d_cat.c() - cache.enc[i].out.c();
            let (d_up, d_skip) = split_channels(&d_cat, up_channels);
            accumulate(&mut d_enc[i], d_skip);
            d_prev = upsample2x_backward(&d_up);
        }
        // d_prev now flows into the deepest encoder output (or the head input when there is no decoder).
        accumulate(&mut d_enc[levels - 1], d_prev);

        for i in (0..levels).rev() {
            let c = &cache.enc[i];
            let input = if i == 0 { &cache.input } else { &cache.enc[i - 1].out };
            let d_out = d_enc[i].take().expect("every encoder output receives gradient");
            let d_in = block_backward(&self.encoder[i], c, input, d_out, &mut grads, enc_slot(i), i > 0);
            if let Some(g) = d_in {
                accumulate(&mut d_enc[i - 1], g);
            }
        }
        grads
    }

    /// Folds the batch statistics of a training forward into the running statistics.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        for (b, c) in self.encoder.iter_mut().zip(&cache.enc) {
            b.bn.update_running(&c.bn);
        }
        for (b, c) in self.decoder.iter_mut().zip(&cache.dec) {
            b.bn.update_running(&c.bn);
        }
    }

    /// Runs a batch of equally sized stacks and returns one RGB image per stack.
    pub fn forward(&self, stacks: &[&ShiftStack], mode: Mode) -> Result<Vec<Image>> {
        let x = ShiftStack::to_tensor::<T>(stacks)?;
        let y = self.forward_tensor(&x, mode)?;
        (0..y.n()).map(|n| y.to_image(n)).collect()
    }
}

fn block_backward<T: Real>(
    block: &ConvBlock<T>,
    cache: &BlockCache<T>,
    input: &Tensor<T>,
    mut d_out: Tensor<T>,
    grads: &mut Gradients<T>,
    slot: usize,
    want_input_grad: bool,
) -> Option<Tensor<T>> {
    leaky_relu_backward(&cache.out, &mut d_out);
    let (gw, rest) = grads.tensors[slot..slot + 3].split_at_mut(1);
    let (gg, gb) = rest.split_at_mut(1);
    let dz = block.bn.backward(&cache.bn, d_out, &mut gg[0], &mut gb[0]);
    block.conv.backward(input, &dz, Some(&mut gw[0]), None, want_input_grad)
}

/// Size bookkeeping for undoing [`pad_to_grid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub height: usize,
    pub width: usize,
}

/// Reflect index (edge not repeated) valid for any offset past the border.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads right and bottom so both sides divide `2^(levels-1)`.
pub fn pad_to_grid(stack: &ShiftStack, levels: usize) -> Result<(ShiftStack, CropSpec)> {
    ensure!(levels >= 1, "levels must be at least 1");
    let g = 1usize << (levels - 1);
    let (h, w) = stack.dims();
    let (ph, pw) = (h.div_ceil(g) * g, w.div_ceil(g) * g);
    let crop = CropSpec { height: h, width: w };
    if (ph, pw) == (h, w) {
        return Ok((stack.clone(), crop));
    }
    let padded = stack.map_rasters(
        |img| Ok(Image::from_fn(ph, pw, img.channels(), |y, x, c| img.get(reflect(y, h), reflect(x, w), c))),
        |m| Ok(Mask::from_fn(ph, pw, |y, x| m.is_valid(reflect(y, h), reflect(x, w)))),
    )?;
    Ok((padded, crop))
}

/// Undoes [`pad_to_grid`] on an output image.
pub fn crop_to(img: &Image, crop: CropSpec) -> Result<Image> {
    if img.dims() == (crop.height, crop.width) {
        return Ok(img.clone());
    }
    img.crop(0, 0, crop.height, crop.width)
}

/// Pipeline options beyond the coarse stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintOptions {
    pub coarse: CoarseConfig,
    pub shift_fraction: f64,
}

impl Default for InpaintOptions {
    fn default() -> Self {
        Self { coarse: CoarseConfig::default(), shift_fraction: crate::shift::DEFAULT_SHIFT_FRACTION }
    }
}

/// Full pipeline with the built-in coarse backend.
pub fn inpaint<T: Real>(model: &RefinerModel<T>, img: &Image, mask: &Mask, opts: &InpaintOptions) -> Result<Image> {
    ensure!(img.dims() == mask.dims(), "image {:?} and mask {:?} differ in size", img.dims(), mask.dims());
    if mask.is_all_valid() {
        return Ok(img.clone());
    }
    let coarse = coarse_fill(img, mask, &opts.coarse)?;
    refine(model, img, &coarse, opts.shift_fraction)
}

/// Stage two on an existing stage-one result, then the final composite:
/// the output equals `img` exactly wherever the mask is known.
pub fn refine<T: Real>(model: &RefinerModel<T>, img: &Image, coarse: &CoarseResult, shift_fraction: f64) -> Result<Image> {
    let mask = &coarse.mask;
    ensure!(img.dims() == mask.dims(), "image {:?} and mask {:?} differ in size", img.dims(), mask.dims());
    if mask.is_all_valid() {
        return Ok(img.clone());
    }
    let stack = assemble_stack(&coarse.filled_full, mask, shift_fraction)?;
    let (padded, crop) = pad_to_grid(&stack, model.config().levels())?;
    let out = model.forward(&[&padded], Mode::Infer)?.pop().expect("one output per stack");
    let out = crop_to(&out, crop)?;
    let out = if img.channels() == 1 {
        let luma = out.luma();
        Image::from_fn(out.height(), out.width(), 1, |y, x, _| luma[y * out.width() + x] as f32)
    } else {
        out
    };
    composite(img, &out, mask)
}
