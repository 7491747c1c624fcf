//! Stage-two training: cached stage-one results, patch batches, Adam steps,
//! validation, checkpoints and an NDJSON log.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hiresfill_core::coarse::CoarseBackend;
use hiresfill_core::features::FeatureExtractor;
use hiresfill_core::losses::{LossConfig, LossReport};
use hiresfill_core::metrics::{mean_l1_8bit, mean_l1_8bit_masked, psnr, psnr_masked, ssim, ssim_masked};
use hiresfill_core::optim::{Adam, AdamConfig};
use hiresfill_core::refiner::refine;
use hiresfill_core::shift::{DEFAULT_MAX_TRIES, DEFAULT_SHIFT_FRACTION};
use hiresfill_core::train::{train_step, Batch, TrainSample};
use hiresfill_core::{assemble_stack, coarse_fill, coarse_fill_with, composite, CoarseConfig, CoarseResult, Image, Mask, RefinerConfig, RefinerModel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, sha256_hex};
use crate::dataset::{load_external_coarse, Manifest, ManifestEntry};
use crate::error::{io_err, Error, Result};
use crate::io::{load_image, load_mask, save_image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch_size: usize,
    pub max_steps: u64,
    /// Validate every this many steps; 0 disables periodic validation.
    pub validation_interval: u64,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub coarse: CoarseConfig,
    pub shift_fraction: f64,
    pub max_tries: usize,
    pub refiner: RefinerConfig,
    /// Ignore cached stage-one results and recompute them.
    pub recompute_coarse: bool,
    /// Directory with precomputed stage-one results named like the crops,
    /// used by the external backend. Defaults to `<dataset>/coarse`.
    pub external_coarse_dir: Option<PathBuf>,
    /// Feature extractor weights; the seeded default when absent.
    pub extractor: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small batches of small patches for a CPU.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            patch_size: 128,
            max_steps: 300,
            validation_interval: 0,
            checkpoint_interval: 0,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            coarse: CoarseConfig::default(),
            shift_fraction: DEFAULT_SHIFT_FRACTION,
            max_tries: DEFAULT_MAX_TRIES,
            refiner: RefinerConfig::default(),
            recompute_coarse: false,
            external_coarse_dir: None,
            extractor: None,
        }
    }

    /// Batch 18 of 512-pixel patches; the step budget is left to the operator.
    pub fn paper() -> Self {
        Self { batch_size: 18, patch_size: 512, max_steps: 100_000, validation_interval: 1000, checkpoint_interval: 1000, ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patch_size == 0 || self.patch_size % self.refiner.grid() != 0 {
            return Err(Error::Config(format!("patch_size must be a positive multiple of {}", self.refiner.grid())));
        }
        if !(self.shift_fraction > 0.0 && self.shift_fraction < 1.0) {
            return Err(Error::Config("shift_fraction must lie in (0, 1)".into()));
        }
        self.refiner.validate()?;
        self.coarse.validate()?;
        self.adam.validate()?;
        self.loss.weights.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub l1_8bit: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub images: usize,
    pub hole: MetricSet,
    pub full: MetricSet,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: LossReport,
    pub validation: Option<ValidationSummary>,
    pub wall_time_s: f64,
    /// Samples dropped from this step because no admissible patch was found.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub skipped: Vec<String>,
}

/// A dataset entry with its stage-one result resolved.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub name: String,
    pub target: Image,
    pub coarse: CoarseResult,
}

impl PreparedSample {
    pub fn to_train_sample(&self, shift_fraction: f64) -> Result<TrainSample> {
        let stack = assemble_stack(&self.coarse.filled_full, &self.coarse.mask, shift_fraction)?;
        Ok(TrainSample::new(stack, self.target.clone())?)
    }
}

/// Stage-one results for a manifest, computed once and cached as PNG.
pub struct CoarseSource<'a> {
    manifest: &'a Manifest,
    coarse: CoarseConfig,
    cache_dir: PathBuf,
    recompute: bool,
}

impl<'a> CoarseSource<'a> {
    pub fn new(manifest: &'a Manifest, coarse: &CoarseConfig, external_dir: Option<&Path>, recompute: bool) -> Self {
        let cache_dir = match coarse.backend {
            CoarseBackend::ExternalFile => external_dir.map(Path::to_path_buf).unwrap_or_else(|| manifest.root.join("coarse")),
            CoarseBackend::BuiltinPyramid => {
                let key = sha256_hex(serde_json::to_string(coarse).expect("config serializes").as_bytes());
                manifest.root.join(format!("coarse-{}", &key[..12]))
            }
        };
        Self { manifest, coarse: coarse.clone(), cache_dir, recompute }
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache_dir
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    fn entry_name(entry: &ManifestEntry) -> String {
        entry.crop_file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    }

    /// Loads crop, mask and stage-one result for entry `i`. Holes of the
    /// input are zeroed before stage one so no target pixel leaks in.
    pub fn load(&self, i: usize) -> Result<PreparedSample> {
        let entry = &self.manifest.entries[i];
        let name = Self::entry_name(entry);
        let target = load_image(&self.manifest.resolve(&entry.crop_file))?;
        let mask_file = entry.mask_file.as_ref().ok_or_else(|| Error::Dataset(format!("{name} has no mask file")))?;
        let mask = load_mask(&self.manifest.resolve(mask_file))?;
        if mask.dims() != target.dims() {
            return Err(Error::Dataset(format!("{name}: mask {:?} does not match crop {:?}", mask.dims(), target.dims())));
        }
        let corrupted = composite(&target, &Image::filled(target.height(), target.width(), target.channels(), 0.0), &mask)?;
        let cached = self.cache_dir.join(&name);
        let coarse = match self.coarse.backend {
            CoarseBackend::ExternalFile => {
                let (wh, ww) = self.coarse.working_dims(target.height(), target.width());
                let pre = load_image(&cached).map_err(|e| Error::Dataset(format!("{name}: external coarse result: {e}")))?;
                let pre = if pre.dims() == target.dims() { pre } else { load_external_coarse(&cached, wh, ww)? };
                coarse_fill_with(&corrupted, &mask, &self.coarse, &pre)?
            }
            CoarseBackend::BuiltinPyramid => {
                if !self.recompute && cached.is_file() {
                    let filled = load_image(&cached)?;
                    if filled.dims() != target.dims() || filled.channels() != target.channels() {
                        return Err(Error::Dataset(format!("{}: stale coarse cache entry", cached.display())));
                    }
                    CoarseResult { filled_full: composite(&corrupted, &filled, &mask)?, mask: mask.clone() }
                } else {
                    let fresh = coarse_fill(&corrupted, &mask, &self.coarse)?;
                    // Quantize exactly as the cache would so cached and fresh runs agree.
                    let filled = composite(&corrupted, &fresh.filled_full.quantized(), &mask)?;
                    std::fs::create_dir_all(&self.cache_dir).map_err(io_err(&self.cache_dir))?;
                    save_image(&filled, &cached)?;
                    CoarseResult { filled_full: filled, mask: mask.clone() }
                }
            }
        };
        Ok(PreparedSample { name, target, coarse })
    }
}

/// Full-image inference on every entry; hole and full-image metrics averaged.
pub fn validate(model: &RefinerModel<f32>, source: &CoarseSource<'_>, shift_fraction: f64) -> Result<ValidationSummary> {
    if source.is_empty() {
        return Err(Error::Validation("validation manifest is empty".into()));
    }
    let mut hole = MetricSet::default();
    let mut full = MetricSet::default();
    for i in 0..source.len() {
        let s = source.load(i)?;
        let out = refine(model, &s.target, &s.coarse, shift_fraction)?;
        let mask: &Mask = &s.coarse.mask;
        hole.l1_8bit += mean_l1_8bit_masked(&out, &s.target, mask)?;
        hole.psnr_db += psnr_masked(&out, &s.target, mask)?;
        hole.ssim += ssim_masked(&out, &s.target, mask)?;
        full.l1_8bit += mean_l1_8bit(&out, &s.target)?;
        full.psnr_db += psnr(&out, &s.target)?;
        full.ssim += ssim(&out, &s.target)?;
    }
    let n = source.len() as f64;
    for m in [&mut hole, &mut full] {
        m.l1_8bit /= n;
        m.psnr_db /= n;
        m.ssim /= n;
    }
    Ok(ValidationSummary { images: source.len(), hole, full })
}

pub struct TrainOutcome {
    pub model: RefinerModel<f32>,
    pub optimizer: Adam<f32>,
    pub step: u64,
    pub records: Vec<TrainRecord>,
    pub final_checkpoint: PathBuf,
}

/// Training state carried across steps.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    fx: &'a FeatureExtractor<f32>,
    train: CoarseSource<'a>,
    val: Option<CoarseSource<'a>>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, fx: &'a FeatureExtractor<f32>, train: &'a Manifest, val: Option<&'a Manifest>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Dataset("training manifest is empty".into()));
        }
        let ext = cfg.external_coarse_dir.as_deref();
        let train_src = CoarseSource::new(train, &cfg.coarse, ext, cfg.recompute_coarse);
        let val_src = val.map(|m| CoarseSource::new(m, &cfg.coarse, ext, cfg.recompute_coarse));
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { cfg, fx, train: train_src, val: val_src, rng, order: Vec::new(), cursor: 0 })
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.train.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// Draws one batch of patches. Samples without an admissible window are
    /// skipped and reported; a full pass with none usable is an error.
    pub fn next_batch(&mut self) -> Result<(Batch<f32>, Vec<String>)> {
        let mut patches = Vec::with_capacity(self.cfg.batch_size);
        let mut skipped = Vec::new();
        let mut misses = 0;
        while patches.len() < self.cfg.batch_size {
            let i = self.next_index();
            let sample = self.train.load(i)?;
            let ts = sample.to_train_sample(self.cfg.shift_fraction)?;
            match ts.sample_patch(self.cfg.patch_size, &mut self.rng, self.cfg.max_tries) {
                Ok((_, patch)) => {
                    patches.push(patch);
                    misses = 0;
                }
                Err(hiresfill_core::Error::SamplingExhausted { .. }) => {
                    skipped.push(sample.name);
                    misses += 1;
                    if misses >= self.train.len() {
                        return Err(Error::Dataset(format!(
                            "no sample yields a {0}x{0} patch with an admissible hole fraction",
                            self.cfg.patch_size
                        )));
                    }
                }
                Err(e) => return Err(Error::Dataset(format!("{}: {e}", sample.name))),
            }
        }
        Ok((Batch::new(&patches)?, skipped))
    }

    fn checkpoint_path(&self, label: &str) -> PathBuf {
        self.cfg.checkpoint_dir.join(format!("{label}.ckpt"))
    }

    /// Runs steps `start..max_steps`, appending one JSON line per step to `log`.
    pub fn run(
        &mut self,
        mut model: RefinerModel<f32>,
        optimizer: Option<Adam<f32>>,
        start: u64,
        log: &mut dyn Write,
        mut on_record: impl FnMut(&TrainRecord),
    ) -> Result<TrainOutcome> {
        if model.config() != &self.cfg.refiner {
            return Err(Error::Config("model architecture differs from the training configuration".into()));
        }
        let mut opt = match optimizer {
            Some(o) => o,
            None => crate::checkpoint::fresh_optimizer(&model, self.cfg.adam)?,
        };
        let t0 = Instant::now();
        let mut records = Vec::new();
        for step in start..self.cfg.max_steps {
            let (batch, skipped) = self.next_batch()?;
            let loss = match train_step(&mut model, &mut opt, self.fx, &batch, &self.cfg.loss) {
                Ok(r) => r,
                Err(hiresfill_core::Error::NonFinite(what)) => {
                    let path = self.checkpoint_path(&format!("diverged-step{step:08}"));
                    save_checkpoint(&path, &model, Some(&opt), step)?;
                    return Err(Error::Diverged { step, detail: what, checkpoint: path });
                }
                Err(e) => return Err(e.into()),
            };
            let done = step + 1;
            let validation = match &self.val {
                Some(v) if self.cfg.validation_interval > 0 && done % self.cfg.validation_interval == 0 => {
                    Some(validate(&model, v, self.cfg.shift_fraction)?)
                }
                _ => None,
            };
            let record = TrainRecord { step, loss, validation, wall_time_s: t0.elapsed().as_secs_f64(), skipped };
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::Io { path: PathBuf::from("<training log>"), source: e })?;
            on_record(&record);
            records.push(record);
            if self.cfg.checkpoint_interval > 0 && done % self.cfg.checkpoint_interval == 0 && done < self.cfg.max_steps {
                save_checkpoint(&self.checkpoint_path(&format!("step{done:08}")), &model, Some(&opt), done)?;
            }
        }
        let step = self.cfg.max_steps.max(start);
        let final_checkpoint = self.checkpoint_path("final");
        save_checkpoint(&final_checkpoint, &model, Some(&opt), step)?;
        log.flush().map_err(|e| Error::Io { path: PathBuf::from("<training log>"), source: e })?;
        Ok(TrainOutcome { model, optimizer: opt, step, records, final_checkpoint })
    }

    pub fn validation_source(&self) -> Option<&CoarseSource<'a>> {
        self.val.as_ref()
    }

    pub fn train_source(&self) -> &CoarseSource<'a> {
        &self.train
    }
}

/// One-call driver: builds the trainer and runs from step 0.
pub fn train(
    cfg: &TrainConfig,
    fx: &FeatureExtractor<f32>,
    train_manifest: &Manifest,
    val_manifest: Option<&Manifest>,
    model: RefinerModel<f32>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), fx, train_manifest, val_manifest)?;
    trainer.run(model, None, 0, log, |_| {})
}

/// Mean total loss over a window of records.
pub fn mean_total(records: &[TrainRecord]) -> f64 {
    records.iter().map(|r| r.loss.total).sum::<f64>() / records.len().max(1) as f64
}
