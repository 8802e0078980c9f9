//! Orchestration: clip-windowed inference, training, gradient checking and
//! ablation sweeps.

mod gradcheck;
mod infer;
mod sweep;
mod train;

pub use gradcheck::{gradcheck, gradcheck_video, GradSample, GradcheckOptions, GradcheckReport};
pub use infer::{copy_reference_labels, evaluate_copy_baseline, evaluate_model, infer_video, ClipRecord, InferenceOutput, InferenceOverrides, InferenceTrace};
pub use sweep::{plan_sweep, run_sweep, SweepAxis, SweepCell, SweepRow, SweepSpec, SweepTable};
pub use train::{learning_rate, train, AdamW, TrainOptions, TrainReport};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::loss::{frame_changes, total_loss_with_grad, DeltaOptions, LossBreakdown, ReweightingResult};
use crate::memory::MemoryFeatures;
use crate::model::{object_pass, MemorySource, PassOptions};
use crate::nn::Dropout;
use crate::params::ParamStore;
use crate::types::{MaskSequence, VideoRecord};

/// Frame weights for the predicted frames `1..T`: changes are measured on
/// the whole ground truth, then normalized over the predicted frames only.
pub fn prediction_weights(gt: &MaskSequence, cfg: &ModelConfig) -> Result<ReweightingResult> {
    let c = frame_changes(gt, DeltaOptions::from_config(cfg));
    ReweightingResult::from_changes(&c[1..], cfg.tau, cfg.delta_variant)
}

/// Average several breakdowns field by field.
pub fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let avg_vec = |f: fn(&LossBreakdown) -> &Vec<f64>| {
        let len = parts.first().map_or(0, |p| f(p).len());
        (0..len).map(|i| parts.iter().map(|p| f(p)[i]).sum::<f64>() / n).collect()
    };
    LossBreakdown {
        dice: parts.iter().map(|p| p.dice).sum::<f64>() / n,
        focal_reweighted: parts.iter().map(|p| p.focal_reweighted).sum::<f64>() / n,
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
        per_frame_focal: avg_vec(|p| &p.per_frame_focal),
        per_frame_dice: avg_vec(|p| &p.per_frame_dice),
        weights: avg_vec(|p| &p.weights),
    }
}

/// Loss of a whole video, averaged over objects.
pub struct VideoLoss {
    pub breakdown: LossBreakdown,
    /// Scalar node carrying the analytic gradient, when a graph was given.
    pub total: Option<Var>,
    /// Memory entries written per object, for replay.
    pub memory_logs: Vec<Vec<MemoryFeatures>>,
}

/// Forward every object of `video` and score it against the ground truth.
pub fn video_loss(
    graph: Option<&Graph>,
    params: &ParamStore,
    cfg: &ModelConfig,
    video: &VideoRecord,
    dropout: &Dropout,
    replay: Option<&[Vec<MemoryFeatures>]>,
) -> Result<VideoLoss> {
    if video.len() < 2 {
        return Err(Error::Input(format!("video {} needs at least 2 frames for a loss", video.name)));
    }
    if video.gt_masks.is_empty() {
        return Err(Error::Input(format!("video {} has no annotated object", video.name)));
    }
    let n_obj = video.gt_masks.len();
    let mut parts = Vec::with_capacity(n_obj);
    let mut total: Option<Var> = None;
    let mut logs = Vec::with_capacity(n_obj);
    for (oi, gt) in video.gt_masks.iter().enumerate() {
        let source = match replay {
            Some(r) => MemorySource::Replay(&r[oi]),
            None => MemorySource::Compute,
        };
        let pass = object_pass(graph, params, cfg, &video.frames, gt.frame(0), PassOptions::from_config(cfg), dropout, source)?;
        let t = video.len();
        let pred = MaskSequence::new(pass.probs.clone(), gt.object_id)?;
        let target = gt.slice(1, t - 1);
        let weights = prediction_weights(gt, cfg)?;
        let (b, grad) = total_loss_with_grad(&pred, &target, &weights, cfg)?;
        if let (Some(g), Some(pv)) = (graph, pass.probs_var) {
            let scaled: Vec<f64> = grad.iter().map(|x| x / n_obj as f64).collect();
            let node = g.custom_scalar(pv, b.total / n_obj as f64, scaled);
            total = Some(match total {
                Some(acc) => g.add(acc, node),
                None => node,
            });
        }
        parts.push(b);
        logs.push(pass.memory_log);
    }
    Ok(VideoLoss {
        breakdown: mean_breakdown(&parts),
        total,
        memory_logs: logs,
    })
}
