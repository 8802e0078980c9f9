use rayon::prelude::*;

use crate::davis::merge_objects;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_all, region_similarity, BinaryMask, EvalJob, EvalOptions, LabelVideo, MetricsReport, SubsetMetadata};
use crate::model::{object_pass, MemorySource, Model, PassOptions};
use crate::nn::Dropout;
use crate::tensor::Tensor;
use crate::types::{MaskSequence, VideoRecord};

/// Label threshold for merging per-object probabilities.
const MERGE_THRESHOLD: f64 = 0.5;

/// Inference-time replacements for trained settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferenceOverrides {
    pub clip_length: Option<usize>,
    pub bank_size: Option<usize>,
}

impl InferenceOverrides {
    pub fn resolve(&self, model: &Model) -> PassOptions {
        let base = PassOptions::from_config(&model.cfg);
        PassOptions {
            clip_length: self.clip_length.unwrap_or(base.clip_length),
            bank_size: self.bank_size.unwrap_or(base.bank_size),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub index: usize,
    pub start: usize,
    pub len: usize,
    /// Memory entries matched against (same for every object).
    pub memory_size: usize,
    /// Object-averaged J of each frame in the clip, when ground truth exists
    /// beyond the reference.
    pub frame_j: Option<Vec<f64>>,
    /// Forward time summed over objects.
    pub micros: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InferenceTrace {
    pub clips: Vec<ClipRecord>,
}

impl InferenceTrace {
    pub fn to_text(&self) -> String {
        let mut s = String::from("clip  start  len  memory  micros  frame_j\n");
        for c in &self.clips {
            let j = c
                .frame_j
                .as_ref()
                .map(|v| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(","))
                .unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "{:>4}  {:>5}  {:>3}  {:>6}  {:>6}  {j}\n",
                c.index, c.start, c.len, c.memory_size, c.micros
            ));
        }
        s
    }
}

pub struct InferenceOutput {
    /// Per-object probabilities for all frames; frame 0 is the reference.
    pub per_object: Vec<MaskSequence>,
    /// Merged label map per frame.
    pub labels: Vec<Vec<u8>>,
    pub trace: InferenceTrace,
}

impl InferenceOutput {
    pub fn label_video(&self, height: usize, width: usize) -> LabelVideo {
        LabelVideo {
            height,
            width,
            frames: self.labels.clone(),
        }
    }
}

/// Segment every annotated object of `video` given only its frame-0 mask.
pub fn infer_video(video: &VideoRecord, model: &Model, overrides: InferenceOverrides) -> Result<InferenceOutput> {
    let (t, h, w) = (video.len(), video.frames.height(), video.frames.width());
    if t == 0 {
        return Err(Error::Input(format!("video {} has no frames", video.name)));
    }
    if video.gt_masks.is_empty() {
        return Err(Error::Input(format!("video {} has no reference mask", video.name)));
    }
    let opts = overrides.resolve(model);
    let mut per_object = Vec::with_capacity(video.gt_masks.len());
    let mut clip_steps = Vec::new();
    let mut micros: Vec<u64> = Vec::new();
    for gt in &video.gt_masks {
        let reference = gt.frame(0);
        if reference.iter().all(|&p| p <= 0.0) {
            return Err(Error::Input(format!(
                "video {}: object {} is absent from the reference frame",
                video.name, gt.object_id
            )));
        }
        let pass = object_pass(
            None,
            &model.params,
            &model.cfg,
            &video.frames,
            reference,
            opts,
            &Dropout::inactive(),
            MemorySource::Compute,
        )?;
        let mut data = Vec::with_capacity(t * h * w);
        data.extend_from_slice(reference);
        data.extend_from_slice(pass.probs.data());
        per_object.push(MaskSequence::new(Tensor::new(vec![t, h, w], data), gt.object_id)?);
        if micros.is_empty() {
            micros = pass.clip_micros.clone();
            clip_steps = pass.clips.clone();
        } else {
            micros.iter_mut().zip(&pass.clip_micros).for_each(|(a, b)| *a += b);
        }
    }
    let labels = merge_objects(&per_object, MERGE_THRESHOLD);
    let gt_labels = merge_objects(&video.gt_masks, MERGE_THRESHOLD);
    let ids: Vec<u8> = video.gt_masks.iter().map(|m| m.object_id).collect();
    let frame_j = |f: usize| -> Result<f64> {
        let mut s = 0.0;
        for &id in &ids {
            let p = BinaryMask::from_labels(h, w, &labels[f], id)?;
            let g = BinaryMask::from_labels(h, w, &gt_labels[f], id)?;
            s += region_similarity(&p, &g)?;
        }
        Ok(s / ids.len() as f64)
    };
    let has_gt = video.gt_masks.iter().any(|m| (1..t).any(|f| m.frame(f).iter().any(|&p| p > 0.0)));
    let mut clips = Vec::with_capacity(clip_steps.len());
    for (step, us) in clip_steps.into_iter().zip(micros) {
        let fj = if has_gt {
            Some((step.start..step.start + step.len).map(frame_j).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        clips.push(ClipRecord {
            index: step.index,
            start: step.start,
            len: step.len,
            memory_size: step.memory_size,
            frame_j: fj,
            micros: us,
        });
    }
    Ok(InferenceOutput {
        per_object,
        labels,
        trace: InferenceTrace { clips },
    })
}

fn ground_truth_labels(video: &VideoRecord) -> LabelVideo {
    LabelVideo {
        height: video.frames.height(),
        width: video.frames.width(),
        frames: merge_objects(&video.gt_masks, MERGE_THRESHOLD),
    }
}

/// Baseline prediction that repeats the reference labels in every frame.
pub fn copy_reference_labels(video: &VideoRecord) -> LabelVideo {
    let gt = ground_truth_labels(video);
    let first = gt.frames.first().cloned().unwrap_or_default();
    LabelVideo {
        frames: vec![first; gt.frames.len()],
        ..gt
    }
}

/// Infer every video (in parallel) and score the merged labels.
pub fn evaluate_model(
    model: &Model,
    videos: &[VideoRecord],
    overrides: InferenceOverrides,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let jobs: Vec<EvalJob> = videos
        .par_iter()
        .map(|v| {
            let out = infer_video(v, model, overrides)?;
            let pred = out.label_video(v.frames.height(), v.frames.width());
            Ok((v.name.clone(), pred, ground_truth_labels(v), SubsetMetadata::from_video(v)))
        })
        .collect::<Result<_>>()?;
    evaluate_all(&jobs, opts)
}

/// Score the copy-reference baseline on `videos`.
pub fn evaluate_copy_baseline(videos: &[VideoRecord], opts: &EvalOptions) -> Result<MetricsReport> {
    let jobs: Vec<EvalJob> = videos
        .iter()
        .map(|v| (v.name.clone(), copy_reference_labels(v), ground_truth_labels(v), SubsetMetadata::from_video(v)))
        .collect();
    evaluate_all(&jobs, opts)
}
