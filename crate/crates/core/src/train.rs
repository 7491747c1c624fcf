//! One optimization step of the refinement network and the patch batches it consumes.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::features::FeatureExtractor;
use crate::image::{Image, Mask};
use crate::losses::{batch_loss, LossConfig, LossReport};
use crate::optim::Adam;
use crate::refiner::RefinerModel;
use crate::shift::{extract_patch, sample_patch, PatchSpec, ShiftStack, Slot};
use crate::tensor::{Real, Tensor};

/// A stack and the ground truth it should reproduce, at equal size.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub stack: ShiftStack,
    pub target: Image,
}

impl TrainSample {
    pub fn new(stack: ShiftStack, target: Image) -> Result<Self> {
        ensure!(stack.dims() == target.dims(), "stack {:?} and target {:?} differ in size", stack.dims(), target.dims());
        Ok(Self { stack, target: target.to_rgb() })
    }

    /// The hole mask of the unshifted slot.
    pub fn mask(&self) -> &Mask {
        self.stack.mask(Slot::Main)
    }

    /// Draws an admissible window and crops stack and target with it.
    pub fn sample_patch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R, max_tries: usize) -> Result<(PatchSpec, TrainSample)> {
        let spec = sample_patch(&self.stack, size, rng, max_tries)?;
        let stack = extract_patch(&self.stack, &spec)?;
        let target = self.target.crop(spec.top, spec.left, size, size)?;
        Ok((spec, TrainSample { stack, target }))
    }
}

/// Network-ready tensors for a list of equally sized samples.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    pub masks: Vec<Mask>,
}

impl<T: Real> Batch<T> {
    pub fn new(samples: &[TrainSample]) -> Result<Self> {
        ensure!(!samples.is_empty(), "empty batch");
        let stacks: Vec<&ShiftStack> = samples.iter().map(|s| &s.stack).collect();
        let targets: Vec<&Image> = samples.iter().map(|s| &s.target).collect();
        Ok(Self {
            input: ShiftStack::to_tensor(&stacks)?,
            target: Tensor::from_images(&targets)?,
            masks: samples.iter().map(|s| s.mask().clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.input.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss of the current weights on a batch without changing anything.
pub fn evaluate_batch<T: Real>(
    model: &RefinerModel<T>,
    fx: &FeatureExtractor<T>,
    batch: &Batch<T>,
    loss: &LossConfig,
) -> Result<LossReport> {
    let out = model.forward_tensor(&batch.input, crate::refiner::Mode::Train)?;
    let masks: Vec<&Mask> = batch.masks.iter().collect();
    Ok(batch_loss(fx, &out, &batch.target, &masks, loss, false)?.0)
}

/// Forward, loss, backward and one Adam update. The returned report is
/// computed from the weights before the update. A non-finite loss aborts
/// the step with the model left untouched.
pub fn train_step<T: Real>(
    model: &mut RefinerModel<T>,
    opt: &mut Adam<T>,
    fx: &FeatureExtractor<T>,
    batch: &Batch<T>,
    loss: &LossConfig,
) -> Result<LossReport> {
    let cache = model.forward_train(&batch.input)?;
    let masks: Vec<&Mask> = batch.masks.iter().collect();
    let (report, grad) = batch_loss(fx, cache.output(), &batch.target, &masks, loss, true)?;
    if !report.is_finite() {
        return Err(Error::NonFinite(format!(
            "tv {} l1 {} perceptual {} style {}",
            report.l_tv, report.l_1, report.l_p, report.l_s
        )));
    }
    let grads = model.backward(&cache, &grad.expect("gradient requested"));
    if grads.tensors.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("gradient".into()));
    }
    opt.step(&mut model.parameters_mut(), &grads.tensors)?;
    model.update_running_stats(&cache);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ExtractorConfig;
    use crate::optim::AdamConfig;
    use crate::refiner::RefinerConfig;
    use crate::shift::assemble_stack;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(side: usize) -> TrainSample {
        let target = Image::from_fn(side, side, 3, |y, x, c| (((y / 3 + x / 5 + c) % 4) as f32) / 3.0);
        let mask = Mask::from_fn(side, side, |y, x| !(side / 4..3 * side / 4).contains(&y) || !(side / 4..side / 2).contains(&x));
        let corrupted = crate::image::composite(&Image::filled(side, side, 3, 0.5), &target, &mask).unwrap();
        TrainSample::new(assemble_stack(&corrupted, &mask, 0.2).unwrap(), target).unwrap()
    }

    fn setup() -> (RefinerModel<f32>, Adam<f32>, FeatureExtractor<f32>) {
        let cfg = RefinerConfig { encoder_channels: alloc::vec![8, 8, 8], encoder_kernel_sizes: alloc::vec![5, 3, 3], ..Default::default() };
        let model = RefinerModel::init(cfg, 1).unwrap();
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.2.len()).collect();
        let opt = Adam::new(AdamConfig::default(), &sizes).unwrap();
        (model, opt, FeatureExtractor::new(ExtractorConfig::default()).unwrap())
    }

    #[test]
    fn patches_respect_hole_bounds() {
        let s = sample(64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (spec, p) = s.sample_patch(32, &mut rng, 64).unwrap();
            let f = p.mask().hole_fraction();
            assert!((0.1..=0.9).contains(&f));
            assert_eq!(f, spec.hole_fraction);
            assert_eq!(p.target.dims(), (32, 32));
        }
    }

    #[test]
    fn step_is_deterministic_and_changes_weights() {
        let batch = Batch::new(&[sample(32), sample(32)]).unwrap();
        let run = || {
            let (mut m, mut o, fx) = setup();
            let r = train_step(&mut m, &mut o, &fx, &batch, &LossConfig::default()).unwrap();
            (m, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let (fresh, _, _) = setup();
        assert_ne!(a.encoder[0].conv.weight, fresh.encoder[0].conv.weight);
        assert_ne!(a.encoder[0].bn.running_mean, fresh.encoder[0].bn.running_mean);
    }

    #[test]
    fn reported_loss_uses_pre_update_weights() {
        let batch = Batch::new(&[sample(32)]).unwrap();
        let (mut m, mut o, fx) = setup();
        let before = evaluate_batch(&m, &fx, &batch, &LossConfig::default()).unwrap();
        let r = train_step(&mut m, &mut o, &fx, &batch, &LossConfig::default()).unwrap();
        assert_eq!(before, r);
    }

    #[test]
    fn repeated_steps_reduce_loss() {
        let batch = Batch::new(&[sample(32)]).unwrap();
        let (mut m, mut o, fx) = setup();
        let first = train_step(&mut m, &mut o, &fx, &batch, &LossConfig::default()).unwrap().total;
        let mut last = first;
        for _ in 0..30 {
            last = train_step(&mut m, &mut o, &fx, &batch, &LossConfig::default()).unwrap().total;
        }
        assert!(last < first, "{last} !< {first}");
    }
}
