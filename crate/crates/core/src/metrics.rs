//! Region similarity J, boundary F-measure, the late-frame score J_tr and
//! per-subset aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use rayon::prelude::*;

use crate::config::{ModelConfig, Rounding};
use crate::error::{Error, Result};

/// Binary mask on an `h × w` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension(format!("{} bits for a {height}×{width} mask", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_probs(height: usize, width: usize, probs: &[f64], threshold: f64) -> Result<Self> {
        Self::new(height, width, probs.iter().map(|&p| p >= threshold).collect())
    }

    pub fn from_labels(height: usize, width: usize, labels: &[u8], id: u8) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == id).collect())
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width && self.bits[y as usize * self.width + x as usize]
    }

    /// Foreground pixels with a background 4-neighbour; outside counts as background.
    pub fn boundary(&self) -> BinaryMask {
        let mut bits = vec![false; self.bits.len()];
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                if self.at(y, x) && !(self.at(y - 1, x) && self.at(y + 1, x) && self.at(y, x - 1) && self.at(y, x + 1)) {
                    bits[y as usize * self.width + x as usize] = true;
                }
            }
        }
        BinaryMask {
            height: self.height,
            width: self.width,
            bits,
        }
    }

    /// Dilation by a Euclidean disk of radius `r`.
    pub fn dilate(&self, r: usize) -> BinaryMask {
        let r = r as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
            .collect();
        let mut bits = vec![false; self.bits.len()];
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                if !self.at(y, x) {
                    continue;
                }
                for (dy, dx) in &offsets {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < self.height && (nx as usize) < self.width {
                        bits[ny as usize * self.width + nx as usize] = true;
                    }
                }
            }
        }
        BinaryMask {
            height: self.height,
            width: self.width,
            bits,
        }
    }
}

fn same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Dimension(format!(
            "masks are {}×{} and {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn region_similarity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Tolerance radius in pixels for a given image size.
pub fn boundary_radius(height: usize, width: usize, tolerance: f64) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    (tolerance * diag).ceil() as usize
}

/// Boundary F-measure with a matching band of `ceil(tolerance · diagonal)` pixels.
pub fn contour_accuracy(pred: &BinaryMask, gt: &BinaryMask, tolerance: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    let bp = pred.boundary();
    let bg = gt.boundary();
    let (np, ng) = (bp.count(), bg.count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let r = boundary_radius(pred.height, pred.width, tolerance);
    let dp = bp.dilate(r);
    let dg = bg.dilate(r);
    let hits = |b: &BinaryMask, band: &BinaryMask| b.bits.iter().zip(&band.bits).filter(|(a, c)| **a && **c).count();
    let precision = hits(&bp, &dg) as f64 / np as f64;
    let recall = hits(&bg, &dp) as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Number of trailing frames that J_tr averages over.
pub fn jtr_count(t_eval: usize, fraction: f64, rounding: Rounding) -> usize {
    let x = fraction * t_eval as f64;
    let k = match rounding {
        Rounding::Ceil => x.ceil(),
        Rounding::Floor => x.floor(),
    } as usize;
    k.clamp(1, t_eval)
}

/// Mean J over the last `fraction` of the evaluated frames.
pub fn j_tr(per_frame_j: &[f64], fraction: f64, rounding: Rounding) -> Result<f64> {
    if per_frame_j.is_empty() {
        return Err(Error::Input("J_tr needs at least one evaluated frame".into()));
    }
    let k = jtr_count(per_frame_j.len(), fraction, rounding);
    let tail = &per_frame_j[per_frame_j.len() - k..];
    Ok(tail.iter().sum::<f64>() / k as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Subset {
    All,
    Lng,
    Mi,
    Sm,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::All, Subset::Lng, Subset::Mi, Subset::Sm];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::All => "ALL",
            Subset::Lng => "LNG",
            Subset::Mi => "MI",
            Subset::Sm => "SM",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const LNG_SECONDS: f64 = 20.0;
pub const SM_FRACTION: f64 = 0.005;

/// Video metadata relevant to subset membership; any field may be missing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubsetMetadata {
    pub duration_sec: Option<f64>,
    /// Per-object mean foreground fraction over frames where the object is present.
    pub object_area_fractions: Option<Vec<f64>>,
    pub object_count: Option<usize>,
}

impl SubsetMetadata {
    pub fn from_video(v: &crate::types::VideoRecord) -> Self {
        Self {
            duration_sec: Some(v.duration_sec),
            object_area_fractions: Some(v.object_area_fractions()),
            object_count: Some(v.gt_masks.len()),
        }
    }

    /// Mean over objects of the per-object area fractions.
    pub fn mean_area_fraction(&self) -> Option<f64> {
        let a = self.object_area_fractions.as_ref()?;
        if a.is_empty() {
            return None;
        }
        Some(a.iter().sum::<f64>() / a.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Membership {
    Classified(BTreeSet<Subset>),
    /// Metadata was incomplete; the reason names the missing field.
    Unclassifiable(String),
}

impl Membership {
    pub fn contains(&self, s: Subset) -> bool {
        matches!(self, Membership::Classified(set) if set.contains(&s))
    }
}

pub fn subset_membership(meta: &SubsetMetadata) -> Membership {
    let Some(duration) = meta.duration_sec else {
        return Membership::Unclassifiable("duration_sec".into());
    };
    let Some(area) = meta.mean_area_fraction() else {
        return Membership::Unclassifiable("object_area_fractions".into());
    };
    let Some(count) = meta.object_count else {
        return Membership::Unclassifiable("object_count".into());
    };
    let mut set = BTreeSet::new();
    if duration > LNG_SECONDS {
        set.insert(Subset::Lng);
    }
    if area < SM_FRACTION {
        set.insert(Subset::Sm);
    }
    if count > 1 {
        set.insert(Subset::Mi);
    }
    Membership::Classified(set)
}

/// Thresholds shared by all evaluation calls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub jtr_fraction: f64,
    pub jtr_rounding: Rounding,
    pub boundary_tolerance: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self::from_config(&ModelConfig::default())
    }
}

impl EvalOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            jtr_fraction: cfg.jtr_fraction,
            jtr_rounding: cfg.jtr_rounding,
            boundary_tolerance: cfg.boundary_tolerance,
        }
    }
}

/// Per-frame label maps of one video (`0` = background).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVideo {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<u8>>,
}

impl LabelVideo {
    pub fn object_ids(&self) -> Vec<u8> {
        let mut ids = BTreeSet::new();
        for f in &self.frames {
            ids.extend(f.iter().copied().filter(|&l| l != 0));
        }
        ids.into_iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub j_mean: f64,
    pub f_mean: f64,
    pub j_tr: f64,
    /// Object-averaged J per evaluated frame (frames 1..T).
    pub per_frame_j: Vec<f64>,
    pub membership: Membership,
}

/// Score a prediction against ground truth. Frame 0 is the given reference
/// and is skipped; objects are the ids present in the ground truth.
pub fn evaluate_video(pred: &LabelVideo, gt: &LabelVideo, membership: Membership, opts: &EvalOptions) -> Result<VideoScores> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Dimension(format!(
            "prediction is {}×{}, annotation {}×{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    if pred.frames.len() != gt.frames.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} frames, annotation {}",
            pred.frames.len(),
            gt.frames.len()
        )));
    }
    if gt.frames.len() < 2 {
        return Err(Error::Input("need at least one frame after the reference".into()));
    }
    let ids = gt.object_ids();
    let (h, w) = (gt.height, gt.width);
    let mut per_frame_j = Vec::with_capacity(gt.frames.len() - 1);
    let mut per_frame_f = Vec::with_capacity(gt.frames.len() - 1);
    for t in 1..gt.frames.len() {
        let (mut js, mut fs) = (0.0, 0.0);
        for &id in &ids {
            let p = BinaryMask::from_labels(h, w, &pred.frames[t], id)?;
            let g = BinaryMask::from_labels(h, w, &gt.frames[t], id)?;
            js += region_similarity(&p, &g)?;
            fs += contour_accuracy(&p, &g, opts.boundary_tolerance)?;
        }
        let k = ids.len().max(1) as f64;
        let (js, fs) = if ids.is_empty() { (1.0, 1.0) } else { (js / k, fs / k) };
        per_frame_j.push(js);
        per_frame_f.push(fs);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(VideoScores {
        j_mean: mean(&per_frame_j),
        f_mean: mean(&per_frame_f),
        j_tr: j_tr(&per_frame_j, opts.jtr_fraction, opts.jtr_rounding)?,
        per_frame_j,
        membership,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetScore {
    pub count: usize,
    pub j_tr: f64,
    pub j: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_video: BTreeMap<String, VideoScores>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub j_tr: f64,
    pub subsets: BTreeMap<Subset, SubsetScore>,
    pub unclassifiable: Vec<String>,
}

impl MetricsReport {
    pub fn from_scores(per_video: BTreeMap<String, VideoScores>) -> Self {
        let n = per_video.len().max(1) as f64;
        let j_mean = per_video.values().map(|s| s.j_mean).sum::<f64>() / n;
        let f_mean = per_video.values().map(|s| s.f_mean).sum::<f64>() / n;
        let j_tr_all = per_video.values().map(|s| s.j_tr).sum::<f64>() / n;
        let mut subsets = BTreeMap::new();
        for subset in Subset::ALL {
            let members: Vec<&VideoScores> = per_video
                .values()
                .filter(|s| subset == Subset::All || s.membership.contains(subset))
                .collect();
            let count = members.len();
            let avg = |f: fn(&VideoScores) -> f64| {
                if count == 0 {
                    f64::NAN
                } else {
                    members.iter().map(|s| f(s)).sum::<f64>() / count as f64
                }
            };
            subsets.insert(
                subset,
                SubsetScore {
                    count,
                    j_tr: avg(|s| s.j_tr),
                    j: avg(|s| s.j_mean),
                },
            );
        }
        let unclassifiable = per_video
            .iter()
            .filter(|(_, s)| matches!(s.membership, Membership::Unclassifiable(_)))
            .map(|(k, _)| k.clone())
            .collect();
        Self {
            per_video,
            j_mean,
            f_mean,
            j_tr: j_tr_all,
            subsets,
            unclassifiable,
        }
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let name_w = self.per_video.keys().map(String::len).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<name_w$}  {:>7}  {:>7}  {:>7}  subsets", "video", "J", "F", "J_tr");
        for (name, v) in &self.per_video {
            let tags = match &v.membership {
                Membership::Classified(set) => set.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
                Membership::Unclassifiable(why) => format!("unclassifiable({why})"),
            };
            let _ = writeln!(s, "{name:<name_w$}  {:>7.4}  {:>7.4}  {:>7.4}  {tags}", v.j_mean, v.f_mean, v.j_tr);
        }
        let _ = writeln!(s, "{:<name_w$}  {:>7.4}  {:>7.4}  {:>7.4}", "mean", self.j_mean, self.f_mean, self.j_tr);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<6}  {:>5}  {:>7}  {:>7}", "subset", "count", "J", "J_tr");
        for (k, v) in &self.subsets {
            let _ = writeln!(s, "{:<6}  {:>5}  {:>7.4}  {:>7.4}", k.as_str(), v.count, v.j, v.j_tr);
        }
        s
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "J={}", self.j_mean);
        let _ = writeln!(s, "F={}", self.f_mean);
        let _ = writeln!(s, "J&F={}", 0.5 * (self.j_mean + self.f_mean));
        let _ = writeln!(s, "J_tr={}", self.j_tr);
        for (k, v) in &self.subsets {
            let _ = writeln!(s, "subset.{k}.count={}", v.count);
            let _ = writeln!(s, "subset.{k}.J={}", v.j);
            let _ = writeln!(s, "subset.{k}.J_tr={}", v.j_tr);
        }
        for (name, v) in &self.per_video {
            let _ = writeln!(s, "video.{name}.J={}", v.j_mean);
            let _ = writeln!(s, "video.{name}.F={}", v.f_mean);
            let _ = writeln!(s, "video.{name}.J_tr={}", v.j_tr);
        }
        s
    }

    /// Write `<stem>.txt` and `<stem>.kv`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let txt = stem.with_extension("txt");
        let kv = stem.with_extension("kv");
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))?;
        std::fs::write(&kv, self.to_key_values()).map_err(|e| Error::io(&kv, e))
    }
}

/// One evaluation job: name, prediction, ground truth, subset metadata.
pub type EvalJob = (String, LabelVideo, LabelVideo, SubsetMetadata);

/// Score many videos in parallel; the result does not depend on scheduling.
pub fn evaluate_all(jobs: &[EvalJob], opts: &EvalOptions) -> Result<MetricsReport> {
    let scored: Vec<Result<(String, VideoScores)>> = jobs
        .par_iter()
        .map(|(name, pred, gt, meta)| {
            let s = evaluate_video(pred, gt, subset_membership(meta), opts)?;
            Ok((name.clone(), s))
        })
        .collect();
    let mut per_video = BTreeMap::new();
    for r in scored {
        let (k, v) = r?;
        per_video.insert(k, v);
    }
    Ok(MetricsReport::from_scores(per_video))
}
