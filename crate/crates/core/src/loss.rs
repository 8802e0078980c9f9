//! Video-level segmentation loss with transformation-aware frame weights.
//!
//! Per-frame change `c^t` of the ground truth is normalized by its mean into
//! `δ^t`, and the weights are `w = L·softmax(δ/τ)`. Weights are constants:
//! no gradient flows through them.

use crate::config::{CentroidUnits, DeltaVariant, ModelConfig, ReweightTargets};
use crate::error::{Error, Result};
use crate::types::MaskSequence;

pub const LOG_EPS: f64 = 1e-8;
pub const DICE_EPS: f64 = 1.0;

/// Foreground pixel count (values ≥ 0.5).
pub fn mask_area(mask: &[f64]) -> f64 {
    mask.iter().filter(|&&v| v >= 0.5).count() as f64
}

/// Number of connected foreground components under 4- or 8-connectivity.
pub fn count_components(mask: &[f64], h: usize, w: usize, connectivity: usize) -> usize {
    let fg: Vec<bool> = mask.iter().map(|&v| v >= 0.5).collect();
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut count = 0;
    let diag = connectivity == 8;
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if (dy == 0 && dx == 0) || (!diag && dy != 0 && dx != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

/// Foreground centroid `(y, x)` with the origin at the top-left pixel.
pub fn centroid(mask: &[f64], h: usize, w: usize, units: CentroidUnits) -> Option<(f64, f64)> {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for (i, &v) in mask.iter().enumerate() {
        if v >= 0.5 {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return None;
    }
    let (y, x) = (sy / n, sx / n);
    Some(match units {
        CentroidUnits::Pixels => (y, x),
        CentroidUnits::Normalized => (y / h as f64, x / w as f64),
    })
}

/// How frame-to-frame change is measured.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaOptions {
    pub variant: DeltaVariant,
    pub connectivity: usize,
    pub centroid_units: CentroidUnits,
}

impl DeltaOptions {
    pub fn new(variant: DeltaVariant) -> Self {
        Self {
            variant,
            connectivity: 4,
            centroid_units: CentroidUnits::Pixels,
        }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            variant: cfg.delta_variant,
            connectivity: cfg.connectivity as usize,
            centroid_units: cfg.centroid_units,
        }
    }
}

/// Raw per-frame change `c^t`, with `c^1 = 0`.
pub fn frame_changes(masks: &MaskSequence, opts: DeltaOptions) -> Vec<f64> {
    let (t, h, w) = (masks.len(), masks.height(), masks.width());
    let mut c = vec![0.0; t];
    match opts.variant {
        DeltaVariant::MaskedArea => {
            let a: Vec<f64> = (0..t).map(|i| mask_area(masks.frame(i))).collect();
            for i in 1..t {
                c[i] = (a[i] - a[i - 1]).abs();
            }
        }
        DeltaVariant::ConnectedComponents => {
            let k: Vec<f64> = (0..t)
                .map(|i| count_components(masks.frame(i), h, w, opts.connectivity) as f64)
                .collect();
            for i in 1..t {
                c[i] = (k[i] - k[i - 1]).abs();
            }
        }
        DeltaVariant::CenterOfMass => {
            let p: Vec<Option<(f64, f64)>> = (0..t)
                .map(|i| centroid(masks.frame(i), h, w, opts.centroid_units))
                .collect();
            // An undefined centroid zeroes its own change and its successor's.
            for i in 1..t {
                if let (Some(a), Some(b)) = (p[i - 1], p[i]) {
                    c[i] = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                }
            }
        }
    }
    c
}

/// `δ^t = c^t / mean(c)`, or all ones when nothing changes.
pub fn normalize_changes(c: &[f64]) -> Vec<f64> {
    let total: f64 = c.iter().sum();
    if total <= 0.0 {
        return vec![1.0; c.len()];
    }
    let mean = total / c.len() as f64;
    c.iter().map(|v| v / mean).collect()
}

pub fn compute_delta(masks: &MaskSequence, opts: DeltaOptions) -> Result<Vec<f64>> {
    if masks.len() < 2 {
        return Err(Error::Input(format!("δ needs at least 2 frames, got {}", masks.len())));
    }
    Ok(normalize_changes(&frame_changes(masks, opts)))
}

/// `w = L·softmax(δ/τ)`.
pub fn compute_weights(delta: &[f64], tau: f64, l: usize) -> Result<Vec<f64>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if delta.len() != l {
        return Err(Error::Dimension(format!("δ has {} entries for L = {l}", delta.len())));
    }
    let mut w: Vec<f64> = delta.iter().map(|d| d / tau).collect();
    crate::autograd::softmax_rows(&mut w, l);
    for v in &mut w {
        *v *= l as f64;
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReweightingResult {
    pub delta: Vec<f64>,
    pub weights: Vec<f64>,
    pub tau: f64,
    pub variant: DeltaVariant,
}

impl ReweightingResult {
    pub fn uniform(l: usize, tau: f64, variant: DeltaVariant) -> Self {
        Self {
            delta: vec![1.0; l],
            weights: vec![1.0; l],
            tau,
            variant,
        }
    }

    pub fn from_changes(c: &[f64], tau: f64, variant: DeltaVariant) -> Result<Self> {
        let delta = normalize_changes(c);
        let weights = compute_weights(&delta, tau, delta.len())?;
        Ok(Self {
            delta,
            weights,
            tau,
            variant,
        })
    }
}

/// Weights from ground truth alone.
pub fn reweight(gt: &MaskSequence, cfg: &ModelConfig) -> Result<ReweightingResult> {
    let delta = compute_delta(gt, DeltaOptions::from_config(cfg))?;
    let weights = compute_weights(&delta, cfg.tau, delta.len())?;
    Ok(ReweightingResult {
        delta,
        weights,
        tau: cfg.tau,
        variant: cfg.delta_variant,
    })
}

fn check_shapes(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Balance factor for one pixel: `α` on foreground, `1 − α` on background,
/// or 1 when balancing is off.
fn balance_for(gt: f64, alpha: Option<f64>) -> f64 {
    match alpha {
        None => 1.0,
        Some(a) if gt >= 0.5 => a,
        Some(a) => 1.0 - a,
    }
}

/// Per-frame focal loss and its gradient w.r.t. the predicted probabilities.
pub fn focal_frame_with_grad(pred: &[f64], gt: &[f64], gamma: f64, alpha: Option<f64>) -> Result<(f64, Vec<f64>)> {
    check_shapes(pred, gt)?;
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (&p, &y)) in pred.iter().zip(gt).enumerate() {
        let pos = y >= 0.5;
        let pt = if pos { p } else { 1.0 - p };
        let a = balance_for(y, alpha);
        let clamped = pt.max(LOG_EPS);
        let log = clamped.ln();
        let one_minus = 1.0 - pt;
        let modulating = one_minus.powf(gamma);
        total += -a * modulating * log;
        let d_mod = if gamma == 0.0 { 0.0 } else { gamma * one_minus.powf(gamma - 1.0) };
        let d_log = if pt > LOG_EPS { 1.0 / pt } else { 0.0 };
        let d_pt = a * (d_mod * log - modulating * d_log);
        grad[i] = if pos { d_pt } else { -d_pt } / n;
    }
    Ok((total / n, grad))
}

pub fn focal_loss_frame(pred: &[f64], gt: &[f64], gamma: f64, alpha: Option<f64>) -> Result<f64> {
    Ok(focal_frame_with_grad(pred, gt, gamma, alpha)?.0)
}

/// Soft Dice loss of one frame and its gradient.
pub fn dice_frame_with_grad(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_shapes(pred, gt)?;
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let num = 2.0 * inter + DICE_EPS;
    let den = pred.iter().sum::<f64>() + gt.iter().sum::<f64>() + DICE_EPS;
    let grad = gt.iter().map(|g| -(2.0 * g * den - num) / (den * den)).collect();
    Ok((1.0 - num / den, grad))
}

fn check_sequences(pred: &MaskSequence, gt: &MaskSequence) -> Result<()> {
    if pred.tensor().shape() != gt.tensor().shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.tensor().shape(),
            gt.tensor().shape()
        )));
    }
    Ok(())
}

/// Frame-averaged Dice loss.
pub fn dice_loss(pred: &MaskSequence, gt: &MaskSequence) -> Result<f64> {
    check_sequences(pred, gt)?;
    let mut s = 0.0;
    for t in 0..pred.len() {
        s += dice_frame_with_grad(pred.frame(t), gt.frame(t))?.0;
    }
    Ok(s / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub dice: f64,
    pub focal_reweighted: f64,
    pub total: f64,
    pub per_frame_focal: Vec<f64>,
    pub per_frame_dice: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LossBreakdown {
    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.dice.is_finite() && self.focal_reweighted.is_finite()
    }

    /// One structured log line.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step={step} dice={:.6} focal_reweighted={:.6} total={:.6} max_w={:.4}",
            self.dice,
            self.focal_reweighted,
            self.total,
            self.max_weight()
        )
    }
}

/// Loss terms and gradient w.r.t. the flattened prediction.
pub fn total_loss_with_grad(
    pred: &MaskSequence,
    gt: &MaskSequence,
    weights: &ReweightingResult,
    cfg: &ModelConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_sequences(pred, gt)?;
    let l = pred.len();
    if weights.weights.len() != l {
        return Err(Error::Dimension(format!("{} weights for {l} frames", weights.weights.len())));
    }
    let (wf, wd): (Vec<f64>, Vec<f64>) = {
        let w = &weights.weights;
        let one = vec![1.0; l];
        match cfg.reweight_targets {
            ReweightTargets::FocalOnly => (w.clone(), one),
            ReweightTargets::DiceOnly => (one, w.clone()),
            ReweightTargets::Both => (w.clone(), w.clone()),
            ReweightTargets::None => (one.clone(), one),
        }
    };
    let alpha = cfg.focal_balance();
    let hw = pred.height() * pred.width();
    let mut grad = vec![0.0; l * hw];
    let (mut focal, mut dice) = (0.0, 0.0);
    let mut per_frame_focal = Vec::with_capacity(l);
    let mut per_frame_dice = Vec::with_capacity(l);
    let lf = l as f64;
    for t in 0..l {
        let (f, gf) = focal_frame_with_grad(pred.frame(t), gt.frame(t), cfg.focal_gamma, alpha)?;
        let (d, gd) = dice_frame_with_grad(pred.frame(t), gt.frame(t))?;
        focal += wf[t] * f / lf;
        dice += wd[t] * d / lf;
        per_frame_focal.push(f);
        per_frame_dice.push(d);
        let cf = cfg.alpha2 * wf[t] / lf;
        let cd = cfg.alpha1 * wd[t] / lf;
        for (o, (a, b)) in grad[t * hw..(t + 1) * hw].iter_mut().zip(gf.iter().zip(&gd)) {
            *o = cf * a + cd * b;
        }
    }
    let breakdown = LossBreakdown {
        dice,
        focal_reweighted: focal,
        total: cfg.alpha1 * dice + cfg.alpha2 * focal,
        per_frame_focal,
        per_frame_dice,
        weights: weights.weights.clone(),
    };
    Ok((breakdown, grad))
}

/// Full objective with weights computed from `gt`.
pub fn total_loss(pred: &MaskSequence, gt: &MaskSequence, cfg: &ModelConfig) -> Result<LossBreakdown> {
    let w = if gt.len() >= 2 {
        reweight(gt, cfg)?
    } else {
        ReweightingResult::uniform(gt.len(), cfg.tau, cfg.delta_variant)
    };
    Ok(total_loss_with_grad(pred, gt, &w, cfg)?.0)
}
