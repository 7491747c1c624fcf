//! Frozen convolutional feature extractor used by the perceptual and style losses.
//!
//! The default is a small seeded stack of strided 3x3 convolutions with
//! random weights. [`ExtractorConfig::vgg16`] describes the 16-layer
//! classification-network layout so real pretrained weights can be loaded by
//! name through [`FeatureExtractor::load_tensor`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::Image;
use crate::nn::{max_pool2, max_pool2_backward, relu_backward, relu_inplace, Conv2d};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    /// 2x2 max pooling after the rectifier (taps read before pooling).
    pub pool_after: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub stages: Vec<StageConfig>,
    /// Stage indices whose rectified outputs feed the losses, ascending.
    pub taps: Vec<usize>,
    /// Per-channel input normalization `(x - mean) / std`.
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Seed for the random weights (ignored once weights are loaded).
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        let stage = |c| StageConfig { out_channels: c, kernel: 3, stride: 2, bias: false, pool_after: false };
        Self {
            stages: vec![stage(16), stage(32), stage(64), stage(128)],
            taps: vec![0, 1, 2, 3],
            mean: [0.5; 3],
            std: [0.5; 3],
            seed: 0x5eed_fea7,
        }
    }
}

impl ExtractorConfig {
    /// Thirteen 3x3 convolutions in five pooled blocks, tapping the last
    /// rectifier of the first three blocks.
    pub fn vgg16() -> Self {
        let blocks: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
        let mut stages = Vec::new();
        let mut ends = Vec::new();
        for (c, reps) in blocks {
            for r in 0..reps {
                stages.push(StageConfig { out_channels: c, kernel: 3, stride: 1, bias: true, pool_after: r + 1 == reps });
            }
            ends.push(stages.len() - 1);
        }
        Self {
            stages,
            taps: ends[..3].to_vec(),
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.stages.is_empty(), "feature extractor needs at least one stage");
        ensure!(!self.taps.is_empty(), "feature extractor needs at least one tap");
        ensure!(self.taps.windows(2).all(|w| w[0] < w[1]), "taps must be strictly ascending, got {:?}", self.taps);
        ensure!(
            self.taps.iter().all(|&t| t < self.stages.len()),
            "tap index out of range for {} stages",
            self.stages.len()
        );
        ensure!(self.std.iter().all(|&s| s > 0.0), "normalization std must be positive");
        for s in &self.stages {
            ensure!(s.out_channels > 0 && s.kernel % 2 == 1 && s.stride >= 1, "invalid extractor stage {s:?}");
        }
        Ok(())
    }

    /// Stages that actually run: everything up to the last tap.
    fn depth(&self) -> usize {
        self.taps.last().map_or(0, |&t| t + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T = f32> {
    config: ExtractorConfig,
    pub convs: Vec<Conv2d<T>>,
}

/// Intermediate activations for [`FeatureExtractor::backward`].
pub struct ExtractorCache<T> {
    /// Input of each executed stage (normalized image for stage 0).
    inputs: Vec<Tensor<T>>,
    /// Rectified output of each executed stage.
    outputs: Vec<Tensor<T>>,
    pool_args: Vec<Option<Vec<u32>>>,
}

impl<T: Real> FeatureExtractor<T> {
    /// Random frozen weights, deterministic in `config.seed`.
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut cin = 3;
        let mut convs = Vec::with_capacity(config.stages.len());
        for s in &config.stages {
            let mut conv = Conv2d::new(cin, s.out_channels, s.kernel, s.stride, s.bias);
            conv.init_uniform(&mut rng, libm::sqrt(2.0));
            convs.push(conv);
            cin = s.out_channels;
        }
        Ok(Self { config, convs })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// Channel count of each tapped layer.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.config.taps.iter().map(|&t| self.config.stages[t].out_channels).collect()
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect::<Vec<U>>();
        FeatureExtractor {
            config: self.config.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| Conv2d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                    weight: cv(&c.weight),
                    bias: c.bias.as_deref().map(cv),
                })
                .collect(),
        }
    }

    /// Weights as `(name, shape, data)`, named `features.{i}.weight` / `.bias`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("features.{i}.weight"), c.weight_shape().to_vec(), &c.weight[..]));
            if let Some(b) = &c.bias {
                out.push((format!("features.{i}.bias"), vec![b.len()], &b[..]));
            }
        }
        out
    }

    pub fn load_tensor(&mut self, name: &str, data: &[T]) -> Result<()> {
        let mut parts = name.split('.');
        let slot = match (parts.next(), parts.next().and_then(|s| s.parse::<usize>().ok()), parts.next(), parts.next()) {
            (Some("features"), Some(i), Some(field), None) => self.convs.get_mut(i).and_then(|c| match field {
                "weight" => Some(&mut c.weight),
                "bias" => c.bias.as_mut(),
                _ => None,
            }),
            _ => None,
        };
        let slot = slot.ok_or_else(|| crate::error::contract!("unknown extractor tensor {name}"))?;
        ensure!(slot.len() == data.len(), "tensor {name} has {} elements, expected {}", data.len(), slot.len());
        slot.copy_from_slice(data);
        Ok(())
    }

    fn normalize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ensure!(x.c() == 3, "feature extractor expects RGB input, got {} channels", x.c());
        let mut y = x.clone();
        let plane = x.plane();
        for n in 0..x.n() {
            for (c, chan) in y.sample_mut(n).chunks_mut(plane).enumerate() {
                let (m, s) = (T::lit(self.config.mean[c]), T::lit(1.0 / self.config.std[c]));
                chan.iter_mut().for_each(|v| *v = (*v - m) * s);
            }
        }
        Ok(y)
    }

    /// Tapped feature maps for a batch of RGB tensors in `[0, 1]`.
    pub fn extract(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.run(x, false)?.0)
    }

    /// Tapped feature maps of a single image (gray is replicated to RGB).
    pub fn extract_image(&self, img: &Image) -> Result<Vec<Tensor<T>>> {
        let rgb = img.to_rgb();
        self.extract(&Tensor::from_images(&[&rgb])?)
    }

    /// Like [`FeatureExtractor::extract`], keeping what the backward pass needs.
    pub fn extract_with_cache(&self, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, ExtractorCache<T>)> {
        let (taps, cache) = self.run(x, true)?;
        Ok((taps, cache.expect("cache requested")))
    }

    fn run(&self, x: &Tensor<T>, keep: bool) -> Result<(Vec<Tensor<T>>, Option<ExtractorCache<T>>)> {
        let mut cur = self.normalize(x)?;
        let mut taps = Vec::with_capacity(self.config.taps.len());
        let mut cache = ExtractorCache { inputs: Vec::new(), outputs: Vec::new(), pool_args: Vec::new() };
        let depth = self.config.depth();
        for (i, (conv, stage)) in self.convs.iter().zip(&self.config.stages).take(depth).enumerate() {
            let mut y = conv.forward(&cur)?;
            relu_inplace(&mut y);
            if self.config.taps.contains(&i) {
                taps.push(y.clone());
            }
            let last = i + 1 == depth;
            let (next, arg) = if stage.pool_after && !last {
                let (p, arg) = max_pool2(&y)?;
                (p, Some(arg))
            } else {
                (y.clone(), None)
            };
            if keep {
                cache.inputs.push(core::mem::replace(&mut cur, next));
                cache.outputs.push(y);
                cache.pool_args.push(arg);
            } else {
                cur = next;
            }
        }
        Ok((taps, keep.then_some(cache)))
    }

    /// Gradient w.r.t. the `[0, 1]` input given gradients w.r.t. each tap
    /// (`None` for taps that receive no gradient).
    pub fn backward(&self, cache: &ExtractorCache<T>, d_taps: Vec<Option<Tensor<T>>>) -> Tensor<T> {
        assert_eq!(d_taps.len(), self.config.taps.len(), "one gradient slot per tap");
        let mut pending: Vec<Option<Tensor<T>>> = (0..cache.outputs.len()).map(|_| None).collect();
        for (&t, d) in self.config.taps.iter().zip(d_taps) {
            pending[t] = d;
        }
        // Gradient w.r.t. the input of the stage after the current one.
        let mut carry: Option<Tensor<T>> = None;
        for i in (0..cache.outputs.len()).rev() {
            let out = &cache.outputs[i];
            let mut d_out: Option<Tensor<T>> = carry.take().map(|g| match &cache.pool_args[i] {
                Some(arg) => max_pool2_backward(&g, arg, out.h(), out.w()),
                None => g,
            });
            if let Some(d) = pending[i].take() {
                match d_out.as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(d.data()).for_each(|(a, &b)| *a += b),
                    None => d_out = Some(d),
                }
            }
            let Some(mut d) = d_out else { continue };
            relu_backward(out, &mut d);
            carry = self.convs[i].backward(&cache.inputs[i], &d, None, None, true);
        }
        let input = &cache.inputs[0];
        let mut dx = carry.unwrap_or_else(|| Tensor::zeros(input.n(), input.c(), input.h(), input.w()));
        let plane = dx.plane();
        for n in 0..dx.n() {
            for (c, chan) in dx.sample_mut(n).chunks_mut(plane).enumerate() {
                let s = T::lit(1.0 / self.config.std[c]);
                chan.iter_mut().for_each(|v| *v = *v * s);
            }
        }
        dx
    }
}
