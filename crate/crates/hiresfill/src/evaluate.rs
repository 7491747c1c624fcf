//! Objective comparison tables across resolutions and vote files for the
//! paired-comparison ranking.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hiresfill_core::metrics::{mean_l1_8bit, mean_l1_8bit_masked, psnr, psnr_masked, ssim, ssim_masked};
use hiresfill_core::ranking::{bradley_terry, BradleyTerryConfig, ScoreVector, VoteMatrix};
use hiresfill_core::{resize_nearest, Image, Mask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::list_images;
use crate::error::{io_err, Error, Result};
use crate::io::{load_image, load_mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Full,
    Hole,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Full => "full",
            Region::Hole => "hole",
        }
    }
}

/// Metrics of one method at one resolution, averaged over image pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub region: Region,
    /// Output height in pixels after downsampling.
    pub resolution: usize,
    pub images: usize,
    pub l1_8bit: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

fn stem_map(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for path in list_images(dir)? {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(prev) = map.insert(stem.clone(), path.clone()) {
            return Err(Error::Pairing(format!("{} and {} share the name {stem:?}", prev.display(), path.display())));
        }
    }
    Ok(map)
}

/// Files paired by stem; any name present on one side only is an error.
pub fn pair_files(pred_dir: &Path, ref_dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let pred = stem_map(pred_dir)?;
    let reference = stem_map(ref_dir)?;
    let only_pred: Vec<&String> = pred.keys().filter(|k| !reference.contains_key(*k)).collect();
    let only_ref: Vec<&String> = reference.keys().filter(|k| !pred.contains_key(*k)).collect();
    if !only_pred.is_empty() || !only_ref.is_empty() {
        return Err(Error::Pairing(format!(
            "unmatched names: only in {}: {only_pred:?}; only in {}: {only_ref:?}",
            pred_dir.display(),
            ref_dir.display()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Pairing(format!("no images in {}", pred_dir.display())));
    }
    Ok(pred.into_iter().map(|(k, p)| {
        let r = reference[&k].clone();
        (k, p, r)
    })
    .collect())
}

/// Width for a given height at the source aspect ratio, at least 1.
pub fn scaled_width(height: usize, width: usize, target_height: usize) -> usize {
    ((width as f64 * target_height as f64 / height as f64).round() as usize).max(1)
}

fn to_height(img: &Image, res: usize) -> Result<Image> {
    if img.height() == res {
        return Ok(img.clone());
    }
    Ok(resize_nearest(img, res, scaled_width(img.height(), img.width(), res))?)
}

struct PairMetrics {
    full: [f64; 3],
    hole: Option<[f64; 3]>,
}

fn pair_metrics(pred: &Image, reference: &Image, mask: Option<&Mask>, res: usize) -> Result<PairMetrics> {
    if pred.dims() != reference.dims() {
        return Err(Error::Pairing(format!("prediction {:?} and reference {:?} differ in size", pred.dims(), reference.dims())));
    }
    let p = to_height(pred, res)?;
    let r = to_height(reference, res)?;
    let (p, r) = if p.channels() == r.channels() { (p, r) } else { (p.to_rgb(), r.to_rgb()) };
    let full = [mean_l1_8bit(&p, &r)?, psnr(&p, &r)?, ssim(&p, &r)?];
    let hole = match mask {
        Some(m) => {
            let m = if m.dims() == p.dims() { m.clone() } else { m.resize_nearest(p.height(), p.width())? };
            if m.hole_count() == 0 {
                None
            } else {
                Some([mean_l1_8bit_masked(&p, &r, &m)?, psnr_masked(&p, &r, &m)?, ssim_masked(&p, &r, &m)?])
            }
        }
        None => None,
    };
    Ok(PairMetrics { full, hole })
}

/// Downsamples every pair to each resolution (height, nearest neighbour,
/// aspect preserved) and averages the metrics. With masks, hole-only rows
/// are emitted as well.
pub fn evaluate_pairs(method: &str, pred_dir: &Path, ref_dir: &Path, mask_dir: Option<&Path>, resolutions: &[usize]) -> Result<Vec<MetricRow>> {
    if resolutions.is_empty() {
        return Err(Error::Config("at least one resolution is required".into()));
    }
    let pairs = pair_files(pred_dir, ref_dir)?;
    let masks = match mask_dir {
        Some(dir) => Some(stem_map(dir)?),
        None => None,
    };
    let loaded: Vec<(Image, Image, Option<Mask>)> = pairs
        .par_iter()
        .map(|(name, p, r)| {
            let mask = match &masks {
                Some(m) => {
                    let path = m.get(name).ok_or_else(|| Error::Pairing(format!("no mask named {name:?}")))?;
                    Some(load_mask(path)?)
                }
                None => None,
            };
            Ok((load_image(p)?, load_image(r)?, mask))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &res in resolutions {
        if res == 0 {
            return Err(Error::Config("resolutions must be positive".into()));
        }
        let per_pair: Vec<PairMetrics> =
            loaded.par_iter().map(|(p, r, m)| pair_metrics(p, r, m.as_ref(), res)).collect::<Result<_>>()?;
        let mean = |vals: Vec<[f64; 3]>| -> Option<(usize, [f64; 3])> {
            if vals.is_empty() {
                return None;
            }
            let n = vals.len();
            let mut acc = [0.0; 3];
            for v in &vals {
                for k in 0..3 {
                    acc[k] += v[k];
                }
            }
            Some((n, acc.map(|a| a / n as f64)))
        };
        let regions = [
            (Region::Full, mean(per_pair.iter().map(|m| m.full).collect())),
            (Region::Hole, mean(per_pair.iter().filter_map(|m| m.hole).collect())),
        ];
        for (region, stats) in regions {
            if let Some((images, [l1, ps, ss])) = stats {
                rows.push(MetricRow { method: method.to_string(), region, resolution: res, images, l1_8bit: l1, psnr_db: ps, ssim: ss });
            }
        }
    }
    Ok(rows)
}

/// Methods down, `{L1, PSNR, SSIM}` per resolution across.
pub fn format_table(rows: &[MetricRow]) -> String {
    let mut resolutions: Vec<usize> = rows.iter().map(|r| r.resolution).collect();
    resolutions.sort_unstable();
    resolutions.dedup();
    let mut keys: Vec<(String, Region)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.region);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let label_width = keys.iter().map(|(m, g)| m.len() + g.name().len() + 3).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "method");
    for res in &resolutions {
        let _ = write!(out, " | {:^26}", format!("{res}px"));
    }
    out.push('\n');
    let _ = write!(out, "{:<label_width$}", "");
    for _ in &resolutions {
        let _ = write!(out, " | {:>8} {:>8} {:>8}", "L1", "PSNR", "SSIM");
    }
    out.push('\n');
    for (method, region) in &keys {
        let _ = write!(out, "{:<label_width$}", format!("{method} ({})", region.name()));
        for res in &resolutions {
            match rows.iter().find(|r| &r.method == method && r.region == *region && r.resolution == *res) {
                Some(r) => {
                    let _ = write!(out, " | {:>8.3} {:>8.3} {:>8.4}", r.l1_8bit, r.psnr_db, r.ssim);
                }
                None => {
                    let _ = write!(out, " | {:>8} {:>8} {:>8}", "-", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into() })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into() })?;
    }
    w.flush().map_err(io_err(path))
}

/// Votes keyed by method name, in first-seen order.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedVotes {
    pub methods: Vec<String>,
    pub votes: VoteMatrix,
}

/// Parses `winner,loser[,count]` lines. `#` starts a comment; a first line
/// reading `winner,loser...` is treated as a header.
pub fn parse_votes(text: &str) -> Result<NamedVotes> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut methods: Vec<String> = Vec::new();
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    let index = |name: &str, methods: &mut Vec<String>| match methods.iter().position(|m| m == name) {
        Some(i) => i,
        None => {
            methods.push(name.to_string());
            methods.len() - 1
        }
    };
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Votes(e.to_string()))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if line == 0 && rec.get(0).is_some_and(|f| f.eq_ignore_ascii_case("winner")) {
            continue;
        }
        let row = rec.position().map(|p| p.line()).unwrap_or(line as u64 + 1);
        if !(2..=3).contains(&rec.len()) {
            return Err(Error::Votes(format!("line {row}: expected winner,loser[,count], got {} fields", rec.len())));
        }
        let (w, l) = (&rec[0], &rec[1]);
        if w.is_empty() || l.is_empty() {
            return Err(Error::Votes(format!("line {row}: empty method name")));
        }
        if w == l {
            return Err(Error::Votes(format!("line {row}: {w:?} cannot beat itself")));
        }
        let count = match rec.get(2) {
            Some(c) => c.parse::<f64>().ok().filter(|c| c.is_finite() && *c >= 0.0).ok_or_else(|| Error::Votes(format!("line {row}: bad count {c:?}")))?,
            None => 1.0,
        };
        let (wi, li) = (index(w, &mut methods), index(l, &mut methods));
        edges.push((wi, li, count));
    }
    if methods.len() < 2 {
        return Err(Error::Votes("need votes between at least two methods".into()));
    }
    let mut votes = VoteMatrix::new(methods.len());
    for (w, l, c) in edges {
        votes.add(w, l, c)?;
    }
    Ok(NamedVotes { methods, votes })
}

pub fn load_votes(path: &Path) -> Result<NamedVotes> {
    parse_votes(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedMethod {
    pub method: String,
    pub worth: f64,
    pub score: f64,
}

/// Fits worths and returns methods from best to worst.
pub fn rank_votes(named: &NamedVotes, cfg: &BradleyTerryConfig) -> Result<(ScoreVector, Vec<RankedMethod>)> {
    let scores = bradley_terry(&named.votes, cfg).map_err(|e| match e {
        hiresfill_core::Error::Ranking(msg) => Error::Votes(rename_components(&msg, &named.methods)),
        other => other.into(),
    })?;
    let ranked = scores
        .ranking()
        .into_iter()
        .map(|i| RankedMethod { method: named.methods[i].clone(), worth: scores.worths[i], score: scores.scores[i] })
        .collect();
    Ok((scores, ranked))
}

/// Replaces bracketed index lists like `[0, 1]` with method names.
fn rename_components(msg: &str, methods: &[String]) -> String {
    let mut out = String::new();
    let mut rest = msg;
    while let Some(start) = rest.find('[') {
        let Some(end) = rest[start..].find(']') else { break };
        let inner = &rest[start + 1..start + end];
        let names: Option<Vec<&str>> =
            inner.split(',').map(|s| s.trim().parse::<usize>().ok().and_then(|i| methods.get(i)).map(String::as_str)).collect();
        out.push_str(&rest[..start]);
        match names {
            Some(n) => out.push_str(&format!("[{}]", n.join(", "))),
            None => out.push_str(&rest[start..=start + end]),
        }
        rest = &rest[start + end + 1..];
    }
    out.push_str(rest);
    out
}

pub fn format_ranking(ranked: &[RankedMethod]) -> String {
    let width = ranked.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:>4}  {:<width$}  {:>10}  {:>10}\n", "rank", "method", "score", "worth");
    for (i, r) in ranked.iter().enumerate() {
        let _ = writeln!(out, "{:>4}  {:<width$}  {:>10.4}  {:>10.4}", i + 1, r.method, r.score, r.worth);
    }
    out
}
