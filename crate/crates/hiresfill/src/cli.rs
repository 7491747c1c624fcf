//! Command-line entry point. Settings resolve as built-in defaults, then the
//! `--config` JSON overlay, then explicit flags; the result is echoed to
//! stderr before work starts.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use hiresfill_core::coarse::{CoarseBackend, UpscaleMethod};
use hiresfill_core::features::FeatureExtractor;
use hiresfill_core::maskgen::MaskGenConfig;
use hiresfill_core::ranking::BradleyTerryConfig;
use hiresfill_core::refiner::refine;
use hiresfill_core::shift::DEFAULT_SHIFT_FRACTION;
use hiresfill_core::{assemble_stack, coarse_fill, coarse_fill_with, composite, CoarseConfig, Image, Mask, RefinerConfig, RefinerModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{load_checkpoint, load_extractor};
use crate::dataset::{load_external_coarse, prepare_dataset, save_stack_dir, Manifest, PrepareOptions};
use crate::error::{io_err, json_err, Error, Result};
use crate::evaluate::{evaluate_pairs, format_ranking, format_table, load_votes, rank_votes, write_csv};
use crate::io::{load_image, load_mask, save_image};
use crate::service::{self, AppState, LoadedModel, ServiceConfig};
use crate::trainer::{TrainConfig, Trainer};

pub const THREADS_ENV: &str = "HIRES_INPAINT_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hiresfill", version, about = "Two-stage high-resolution image inpainting")]
pub struct Cli {
    /// JSON settings overlay, keyed by subcommand name
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut square training crops and hole masks from a folder of images
    PrepareData(PrepareArgs),
    /// Run stage one only and write the coarse result (and optionally the stack)
    Coarse(CoarseArgs),
    /// Train the refinement network on a prepared manifest
    Train(TrainArgs),
    /// Fill the holes of one image
    Inpaint(InpaintArgs),
    /// Compare predictions with references at several resolutions
    Evaluate(EvaluateArgs),
    /// Convert pairwise votes into Bradley-Terry scores
    RankVotes(RankArgs),
    /// Serve the HTTP API (and optionally a static UI)
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Folder of source images
    #[arg(long)]
    pub src: PathBuf,
    /// Output folder for crops, masks and manifest.json
    #[arg(long)]
    pub out: PathBuf,
    /// Squares cut from every source image
    #[arg(long)]
    pub squares: Option<usize>,
    /// Output side in pixels
    #[arg(long, conflicts_with = "native")]
    pub side: Option<usize>,
    /// Keep crops at their native size
    #[arg(long)]
    pub native: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Do not generate hole masks
    #[arg(long)]
    pub no_masks: bool,
}

#[derive(Debug, Args, Clone)]
pub struct CoarseFlags {
    /// Side of the square working resolution for stage one
    #[arg(long)]
    pub working_size: Option<usize>,
    /// Upscale method for the coarse result: nearest or bilinear
    #[arg(long, value_parser = parse_upscale)]
    pub upscale: Option<UpscaleMethod>,
    /// Precomputed stage-one result (working or full resolution) instead of the built-in fill
    #[arg(long, value_name = "FILE")]
    pub external_coarse: Option<PathBuf>,
    /// Shift of the side channels as a fraction of each image side
    #[arg(long)]
    pub shift_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CoarseArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Mask file: white = known, black = hole
    #[arg(long)]
    pub mask: PathBuf,
    /// Coarse-filled full-resolution image
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the 20-channel stack as slot rasters plus meta.json
    #[arg(long)]
    pub stack_dir: Option<PathBuf>,
    #[command(flatten)]
    pub coarse: CoarseFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest (file or folder holding manifest.json)
    #[arg(long)]
    pub train: PathBuf,
    /// Validation manifest
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Base settings: desk or paper
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long)]
    pub validation_interval: Option<u64>,
    /// Continue from a checkpoint, including optimizer state and step count
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// NDJSON training log (default: <checkpoint-dir>/train.ndjson)
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Recompute stage-one results instead of reading the cache
    #[arg(long)]
    pub recompute_coarse: bool,
    /// Feature extractor weights in checkpoint format
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    /// Stage-one results come from files in this folder, named like the crops
    #[arg(long)]
    pub external_coarse_dir: Option<PathBuf>,
    /// Print a progress line every this many steps
    #[arg(long, default_value_t = 10)]
    pub progress_every: u64,
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Mask file: white = known, black = hole
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Refiner weights; untrained seeded weights when absent
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed of the untrained fallback model
    #[arg(long)]
    pub seed: Option<u64>,
    /// Process at most this many pixels on the longer side, then upscale
    #[arg(long)]
    pub max_side: Option<usize>,
    #[command(flatten)]
    pub coarse: CoarseFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction folder, optionally named as NAME=DIR; repeatable
    #[arg(long, required = true)]
    pub pred: Vec<String>,
    /// Reference folder
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Mask folder; adds hole-only rows
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Comma-separated output heights in pixels
    #[arg(long, value_delimiter = ',')]
    pub resolutions: Vec<usize>,
    /// Also write rows as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// CSV lines winner,loser[,count]
    #[arg(long)]
    pub votes: PathBuf,
    /// Pseudo-count added to every compared pair in both directions
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub addr: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Serve untrained weights from this seed when no checkpoint is given
    #[arg(long)]
    pub untrained_seed: Option<u64>,
    /// Folder of static UI files served at /
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_pixels: Option<usize>,
    #[arg(long)]
    pub session_ttl_secs: Option<u64>,
    /// Allowed browser origin; repeatable (default: any)
    #[arg(long)]
    pub cors_origin: Vec<String>,
    #[command(flatten)]
    pub coarse: CoarseFlags,
}

fn parse_upscale(s: &str) -> std::result::Result<UpscaleMethod, String> {
    match s {
        "nearest" => Ok(UpscaleMethod::Nearest),
        "bilinear" => Ok(UpscaleMethod::Bilinear),
        other => Err(format!("unknown upscale method {other:?} (expected nearest or bilinear)")),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct ConfigFile {
    prepare_data: Option<Value>,
    coarse: Option<Value>,
    train: Option<Value>,
    inpaint: Option<Value>,
    evaluate: Option<Value>,
    rank_votes: Option<Value>,
    serve: Option<Value>,
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Keys of `given` that do not survive a round trip through `T`.
fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(k)) = (given, known) {
        for (key, v) in g {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

/// Applies a JSON overlay to `base`, rejecting keys the settings do not have.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, section: Option<&Value>) -> Result<T> {
    let Some(section) = section else { return Ok(base) };
    let mut value = serde_json::to_value(&base).expect("settings serialize");
    merge(&mut value, section);
    let resolved: T = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    let mut unknown = Vec::new();
    unknown_keys(section, &serde_json::to_value(&resolved).expect("settings serialize"), "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown settings: {}", unknown.join(", "))));
    }
    Ok(resolved)
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn print_resolved<T: Serialize>(command: &str, settings: &T) {
    eprintln!("{command}: {}", serde_json::to_string(settings).expect("settings serialize"));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareSettings {
    pub squares_per_image: usize,
    pub side: Option<usize>,
    pub seed: u64,
    pub masks: bool,
    pub mask_generator: MaskGenConfig,
}

impl Default for PrepareSettings {
    fn default() -> Self {
        Self { squares_per_image: 3, side: Some(512), seed: 0, masks: true, mask_generator: MaskGenConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSettings {
    pub coarse: CoarseConfig,
    pub shift_fraction: f64,
    pub external_coarse: Option<PathBuf>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self { coarse: CoarseConfig::default(), shift_fraction: DEFAULT_SHIFT_FRACTION, external_coarse: None }
    }
}

impl PipelineSettings {
    fn apply(&mut self, f: &CoarseFlags) {
        if let Some(v) = f.working_size {
            self.coarse.working_size = v;
        }
        if let Some(v) = f.upscale {
            self.coarse.upscale_method = v;
        }
        if let Some(v) = &f.external_coarse {
            self.external_coarse = Some(v.clone());
        }
        if let Some(v) = f.shift_fraction {
            self.shift_fraction = v;
        }
        if self.external_coarse.is_some() {
            self.coarse.backend = CoarseBackend::ExternalFile;
        }
    }

    fn validate(&self) -> Result<()> {
        self.coarse.validate()?;
        if !(self.shift_fraction > 0.0 && self.shift_fraction < 1.0) {
            return Err(Error::Config("shift_fraction must lie in (0, 1)".into()));
        }
        if self.coarse.backend == CoarseBackend::ExternalFile && self.external_coarse.is_none() {
            return Err(Error::Config("the external coarse backend needs external_coarse".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintSettings {
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub max_side: Option<usize>,
    pub pipeline: PipelineSettings,
    /// Architecture of the untrained fallback model.
    pub refiner: RefinerConfig,
}

impl Default for InpaintSettings {
    fn default() -> Self {
        Self { checkpoint: None, seed: 0, max_side: None, pipeline: PipelineSettings::default(), refiner: RefinerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSettings {
    pub resolutions: Vec<usize>,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self { resolutions: vec![512, 1024, 2048] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankSettings {
    pub bradley_terry: BradleyTerryConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSettings {
    pub addr: String,
    pub checkpoint: Option<PathBuf>,
    pub untrained_seed: Option<u64>,
    pub ui_dir: Option<PathBuf>,
    pub max_pixels: usize,
    pub session_ttl_secs: u64,
    pub cors_origins: Vec<String>,
    pub coarse: CoarseConfig,
}

impl Default for ServeSettings {
    fn default() -> Self {
        let svc = ServiceConfig::default();
        Self {
            addr: "127.0.0.1:8080".into(),
            checkpoint: None,
            untrained_seed: None,
            ui_dir: None,
            max_pixels: svc.max_pixels,
            session_ttl_secs: svc.session_ttl.as_secs(),
            cors_origins: Vec::new(),
            coarse: svc.coarse,
        }
    }
}

/// Caps worker threads from the environment before any pool starts.
pub fn apply_thread_limit() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(None) };
    let n: usize = raw.trim().parse().ok().filter(|n| *n >= 1).ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

/// Parses `argv` and runs one subcommand; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", single_line(&e.to_string()));
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn execute(cli: Cli) -> Result<()> {
    apply_thread_limit()?;
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::PrepareData(a) => cmd_prepare(a, cfg.prepare_data.as_ref()),
        Command::Coarse(a) => cmd_coarse(a, cfg.coarse.as_ref()),
        Command::Train(a) => cmd_train(a, cfg.train.as_ref()),
        Command::Inpaint(a) => cmd_inpaint(a, cfg.inpaint.as_ref()),
        Command::Evaluate(a) => cmd_evaluate(a, cfg.evaluate.as_ref()),
        Command::RankVotes(a) => cmd_rank(a, cfg.rank_votes.as_ref()),
        Command::Serve(a) => cmd_serve(a, cfg.serve.as_ref()),
    }
}

fn cmd_prepare(a: PrepareArgs, section: Option<&Value>) -> Result<()> {
    let mut s = overlay(PrepareSettings::default(), section)?;
    if let Some(v) = a.squares {
        s.squares_per_image = v;
    }
    if let Some(v) = a.side {
        s.side = Some(v);
    }
    if a.native {
        s.side = None;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if a.no_masks {
        s.masks = false;
    }
    print_resolved("prepare-data", &s);
    let mask_cfg = s.side.map(|side| scale_mask_config(&s.mask_generator, side)).unwrap_or_else(|| s.mask_generator.clone());
    let opts = PrepareOptions { squares_per_image: s.squares_per_image, side: s.side, seed: s.seed, masks: s.masks.then_some(mask_cfg) };
    let manifest = prepare_dataset(&a.src, &a.out, &opts)?;
    println!("wrote {} crops to {}", manifest.len(), a.out.display());
    Ok(())
}

/// The generator defaults describe 512-pixel canvases; other sides rescale them.
fn scale_mask_config(cfg: &MaskGenConfig, side: usize) -> MaskGenConfig {
    if cfg == &MaskGenConfig::default() {
        MaskGenConfig::for_side(side, cfg.seed)
    } else {
        cfg.clone()
    }
}

fn load_pair(image: &Path, mask_path: &Path) -> Result<(Image, Mask)> {
    let img = load_image(image)?;
    let mask = load_mask(mask_path)?;
    if img.dims() != mask.dims() {
        return Err(Error::Validation(format!(
            "mask {} is {}x{} but image {} is {}x{}",
            mask_path.display(),
            mask.width(),
            mask.height(),
            image.display(),
            img.width(),
            img.height()
        )));
    }
    Ok((img, mask))
}

fn stage_one(img: &Image, mask: &Mask, p: &PipelineSettings) -> Result<hiresfill_core::CoarseResult> {
    match &p.external_coarse {
        Some(path) => {
            let pre = load_image(path)?;
            let pre = if pre.dims() == img.dims() {
                pre
            } else {
                let (wh, ww) = p.coarse.working_dims(img.height(), img.width());
                load_external_coarse(path, wh, ww)?
            };
            Ok(coarse_fill_with(img, mask, &p.coarse, &pre)?)
        }
        None => Ok(coarse_fill(img, mask, &p.coarse)?),
    }
}

fn cmd_coarse(a: CoarseArgs, section: Option<&Value>) -> Result<()> {
    let mut p = overlay(PipelineSettings::default(), section)?;
    p.apply(&a.coarse);
    p.validate()?;
    print_resolved("coarse", &p);
    let (img, mask) = load_pair(&a.image, &a.mask)?;
    let result = stage_one(&img, &mask, &p)?;
    save_image(&result.filled_full, &a.out)?;
    if let Some(dir) = &a.stack_dir {
        let stack = assemble_stack(&result.filled_full, &mask, p.shift_fraction)?;
        save_stack_dir(dir, &stack, img.dims())?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, section: Option<&Value>) -> Result<()> {
    let mut c = overlay(TrainConfig::preset(&a.preset)?, section)?;
    if let Some(v) = a.steps {
        c.max_steps = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.patch_size {
        c.patch_size = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.learning_rate {
        c.adam.learning_rate = v;
    }
    if let Some(v) = a.checkpoint_dir {
        c.checkpoint_dir = v;
    }
    if let Some(v) = a.checkpoint_interval {
        c.checkpoint_interval = v;
    }
    if let Some(v) = a.validation_interval {
        c.validation_interval = v;
    }
    if a.recompute_coarse {
        c.recompute_coarse = true;
    }
    if let Some(v) = a.extractor {
        c.extractor = Some(v);
    }
    if let Some(v) = a.external_coarse_dir {
        c.external_coarse_dir = Some(v);
        c.coarse.backend = CoarseBackend::ExternalFile;
    }
    c.validate()?;
    print_resolved("train", &c);
    let train = Manifest::open(&a.train)?;
    let val = a.val.as_deref().map(Manifest::open).transpose()?;
    let fx = match &c.extractor {
        Some(p) => load_extractor(p)?,
        None => FeatureExtractor::new(Default::default())?,
    };
    let (model, optimizer, start) = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            (ck.model, ck.optimizer, ck.training_step)
        }
        None => (RefinerModel::init(c.refiner.clone(), c.seed)?, None, 0),
    };
    std::fs::create_dir_all(&c.checkpoint_dir).map_err(io_err(&c.checkpoint_dir))?;
    let log_path = a.log.unwrap_or_else(|| c.checkpoint_dir.join("train.ndjson"));
    let file = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = std::io::BufWriter::new(file);
    let every = a.progress_every.max(1);
    let mut trainer = Trainer::new(c, &fx, &train, val.as_ref())?;
    let outcome = trainer.run(model, optimizer, start, &mut log, |r| {
        for name in &r.skipped {
            eprintln!("step {}: skipped {name} (no admissible patch)", r.step);
        }
        if (r.step + 1) % every == 0 || r.validation.is_some() {
            let mut line = format!("step {:>6}  loss {:.5}  ({:.1}s)", r.step + 1, r.loss.total, r.wall_time_s);
            if let Some(v) = &r.validation {
                line.push_str(&format!("  val hole psnr {:.2} dB", v.hole.psnr_db));
            }
            eprintln!("{line}");
        }
    })?;
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn load_refiner(checkpoint: Option<&Path>, refiner: &RefinerConfig, seed: u64) -> Result<RefinerModel<f32>> {
    match checkpoint {
        Some(p) => Ok(load_checkpoint(p)?.model),
        None => {
            eprintln!("warning: no checkpoint given; using untrained weights from seed {seed}");
            Ok(RefinerModel::init(refiner.clone(), seed)?)
        }
    }
}

/// Full pipeline, optionally at a reduced size with the known region
/// restored at full resolution afterwards.
pub fn inpaint_image(model: &RefinerModel<f32>, img: &Image, mask: &Mask, p: &PipelineSettings, max_side: Option<usize>) -> Result<Image> {
    if mask.is_all_valid() {
        return Ok(img.clone());
    }
    let (h, w) = img.dims();
    let longer = h.max(w);
    match max_side {
        Some(cap) if longer > cap => {
            if p.external_coarse.is_some() {
                return Err(Error::Config("max_side cannot be combined with an external coarse result".into()));
            }
            let scale = cap as f64 / longer as f64;
            let (sh, sw) = (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1));
            let small = img.resize_area(sh, sw)?;
            let small_mask = mask.resize_conservative(sh, sw)?;
            let out = if small_mask.is_all_valid() { small } else { refine(model, &small, &stage_one(&small, &small_mask, p)?, p.shift_fraction)? };
            Ok(composite(img, &out.resize_bilinear(h, w)?, mask)?)
        }
        _ => {
            let coarse = stage_one(img, mask, p)?;
            Ok(refine(model, img, &coarse, p.shift_fraction)?)
        }
    }
}

fn cmd_inpaint(a: InpaintArgs, section: Option<&Value>) -> Result<()> {
    let mut s = overlay(InpaintSettings::default(), section)?;
    if let Some(v) = a.checkpoint {
        s.checkpoint = Some(v);
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.max_side {
        s.max_side = Some(v);
    }
    s.pipeline.apply(&a.coarse);
    s.pipeline.validate()?;
    if s.max_side == Some(0) {
        return Err(Error::Config("max_side must be positive".into()));
    }
    print_resolved("inpaint", &s);
    let model = load_refiner(s.checkpoint.as_deref(), &s.refiner, s.seed)?;
    let (img, mask) = load_pair(&a.image, &a.mask)?;
    let out = inpaint_image(&model, &img, &mask, &s.pipeline, s.max_side)?;
    save_image(&out, &a.out)
}

fn cmd_evaluate(a: EvaluateArgs, section: Option<&Value>) -> Result<()> {
    let mut s = overlay(EvaluateSettings::default(), section)?;
    if !a.resolutions.is_empty() {
        s.resolutions = a.resolutions;
    }
    print_resolved("evaluate", &s);
    let mut rows = Vec::new();
    for spec in &a.pred {
        let (name, dir) = match spec.split_once('=') {
            Some((n, d)) if !n.is_empty() => (n.to_string(), PathBuf::from(d)),
            _ => {
                let dir = PathBuf::from(spec);
                let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| spec.clone());
                (name, dir)
            }
        };
        rows.extend(evaluate_pairs(&name, &dir, &a.reference, a.masks.as_deref(), &s.resolutions)?);
    }
    print!("{}", format_table(&rows));
    if let Some(p) = &a.csv {
        write_csv(&rows, p)?;
    }
    Ok(())
}

fn cmd_rank(a: RankArgs, section: Option<&Value>) -> Result<()> {
    let mut s = overlay(RankSettings::default(), section)?;
    if let Some(v) = a.smoothing {
        s.bradley_terry.smoothing = v;
    }
    if let Some(v) = a.max_iter {
        s.bradley_terry.max_iter = v;
    }
    if let Some(v) = a.tol {
        s.bradley_terry.tol = v;
    }
    print_resolved("rank-votes", &s);
    let votes = load_votes(&a.votes)?;
    let (_, ranked) = rank_votes(&votes, &s.bradley_terry)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&ranked).map_err(json_err(&a.votes))?);
    } else {
        print!("{}", format_ranking(&ranked));
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs, section: Option<&Value>) -> Result<()> {
    let mut s = overlay(ServeSettings::default(), section)?;
    if let Some(v) = a.addr {
        s.addr = v;
    }
    if let Some(v) = a.checkpoint {
        s.checkpoint = Some(v);
    }
    if let Some(v) = a.untrained_seed {
        s.untrained_seed = Some(v);
    }
    if let Some(v) = a.ui_dir {
        s.ui_dir = Some(v);
    }
    if let Some(v) = a.max_pixels {
        s.max_pixels = v;
    }
    if let Some(v) = a.session_ttl_secs {
        s.session_ttl_secs = v;
    }
    if !a.cors_origin.is_empty() {
        s.cors_origins = a.cors_origin;
    }
    if let Some(v) = a.coarse.working_size {
        s.coarse.working_size = v;
    }
    if let Some(v) = a.coarse.upscale {
        s.coarse.upscale_method = v;
    }
    s.coarse.validate()?;
    let addr: SocketAddr = s.addr.parse().map_err(|_| Error::Config(format!("invalid listen address {:?}", s.addr)))?;
    print_resolved("serve", &s);
    let model = match (&s.checkpoint, s.untrained_seed) {
        (Some(p), _) => Some(service::load_model(p)?),
        (None, Some(seed)) => Some(LoadedModel { model: RefinerModel::init(RefinerConfig::default(), seed)?, id: format!("untrained-seed-{seed}") }),
        (None, None) => None,
    };
    let config = ServiceConfig {
        max_pixels: s.max_pixels,
        session_ttl: Duration::from_secs(s.session_ttl_secs),
        coarse: s.coarse.clone(),
        ui_dir: s.ui_dir.clone(),
        cors_origins: s.cors_origins.clone(),
        ..ServiceConfig::default()
    };
    let state = AppState::new(config, model);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| Error::Io { path: PathBuf::from("<runtime>"), source: e })?;
    eprintln!("listening on http://{addr}");
    let _ = std::io::stderr().flush();
    runtime.block_on(service::serve(addr, state))
}
