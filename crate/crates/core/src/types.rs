//! Video, mask and feature containers shared by every stage.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB frames `[T, 3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTensor {
    data: Tensor,
}

impl FrameTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Dimension(format!("frames must be [T, 3, H, W], got {s:?}")));
        }
        if s[0] == 0 {
            return Err(Error::Input("video has zero frames".into()));
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("frame values must lie in [0, 1]".into()));
        }
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Frames `[start, start+len)`.
    pub fn slice(&self, start: usize, len: usize) -> FrameTensor {
        FrameTensor {
            data: self.data.slice_outer(start, len),
        }
    }

    /// Channels-last copy `[T, H, W, 3]`.
    pub fn to_channels_last(&self) -> Tensor {
        let (t, h, w) = (self.len(), self.height(), self.width());
        let src = self.data.data();
        let mut out = vec![0.0; t * h * w * 3];
        for f in 0..t {
            for c in 0..3 {
                for p in 0..h * w {
                    out[(f * h * w + p) * 3 + c] = src[(f * 3 + c) * h * w + p];
                }
            }
        }
        Tensor::new(vec![t, h, w, 3], out)
    }

    /// Pixel `(t, y, x)` as RGB.
    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f64; 3] {
        let (h, w) = (self.height(), self.width());
        let d = self.data.data();
        std::array::from_fn(|c| d[((t * 3 + c) * h + y) * w + x])
    }
}

/// Per-frame masks `[T, H, W]` for one object.
///
/// Ground truth holds `{0, 1}`; predictions hold probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSequence {
    masks: Tensor,
    pub object_id: u8,
}

impl MaskSequence {
    pub fn new(masks: Tensor, object_id: u8) -> Result<Self> {
        let s = masks.shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("masks must be [T, H, W], got {s:?}")));
        }
        if masks.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { masks, object_id })
    }

    /// Ground-truth constructor: additionally requires binary entries.
    pub fn binary(masks: Tensor, object_id: u8) -> Result<Self> {
        if masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input("ground-truth masks must be binary".into()));
        }
        Self::new(masks, object_id)
    }

    pub fn from_frames(frames: &[Vec<f64>], height: usize, width: usize, object_id: u8) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * height * width);
        for f in frames {
            if f.len() != height * width {
                return Err(Error::Dimension(format!(
                    "mask frame has {} pixels, expected {}",
                    f.len(),
                    height * width
                )));
            }
            data.extend_from_slice(f);
        }
        Self::new(Tensor::new(vec![frames.len(), height, width], data), object_id)
    }

    pub fn len(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.masks.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.masks
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.masks.data()[t * n..(t + 1) * n]
    }

    pub fn slice(&self, start: usize, len: usize) -> MaskSequence {
        MaskSequence {
            masks: self.masks.slice_outer(start, len),
            object_id: self.object_id,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.masks.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// `p >= threshold` → 1.
    pub fn thresholded(&self, threshold: f64) -> MaskSequence {
        let data = self
            .masks
            .data()
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect();
        MaskSequence {
            masks: Tensor::new(self.masks.shape().to_vec(), data),
            object_id: self.object_id,
        }
    }
}

/// Per-scale channels-last features `[T, h_s, w_s, d_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    pub per_scale: Vec<Tensor>,
    pub scale_strides: Vec<usize>,
}

impl MultiScaleFeatures {
    pub fn at_stride(&self, stride: usize) -> Option<&Tensor> {
        self.scale_strides
            .iter()
            .position(|&s| s == stride)
            .map(|i| &self.per_scale[i])
    }

    pub fn frames(&self) -> usize {
        self.per_scale.first().map_or(0, |t| t.shape()[0])
    }

    /// Frames `[start, start+len)` at every scale.
    pub fn slice(&self, start: usize, len: usize) -> MultiScaleFeatures {
        MultiScaleFeatures {
            per_scale: self.per_scale.iter().map(|t| t.slice_outer(start, len)).collect(),
            scale_strides: self.scale_strides.clone(),
        }
    }
}

/// One annotated video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub name: String,
    pub frames: FrameTensor,
    /// One sequence per object, ids starting at 1.
    pub gt_masks: Vec<MaskSequence>,
    pub duration_sec: f64,
    pub fps: f64,
    pub metadata: BTreeMap<String, String>,
}

impl VideoRecord {
    pub fn new(name: impl Into<String>, frames: FrameTensor, gt_masks: Vec<MaskSequence>, fps: f64) -> Result<Self> {
        for m in &gt_masks {
            if m.len() != frames.len() || m.height() != frames.height() || m.width() != frames.width() {
                return Err(Error::Dimension(format!(
                    "object {} masks are [{}, {}, {}] but frames are [{}, 3, {}, {}]",
                    m.object_id,
                    m.len(),
                    m.height(),
                    m.width(),
                    frames.len(),
                    frames.height(),
                    frames.width()
                )));
            }
        }
        let duration_sec = frames.len() as f64 / fps;
        Ok(Self {
            name: name.into(),
            frames,
            gt_masks,
            duration_sec,
            fps,
            metadata: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Mean foreground fraction of each object over the frames where it is present.
    pub fn object_area_fractions(&self) -> Vec<f64> {
        let px = (self.frames.height() * self.frames.width()) as f64;
        self.gt_masks
            .iter()
            .map(|m| {
                let areas: Vec<f64> = (0..m.len())
                    .map(|t| m.frame(t).iter().sum::<f64>())
                    .filter(|&a| a > 0.0)
                    .collect();
                if areas.is_empty() {
                    0.0
                } else {
                    areas.iter().sum::<f64>() / areas.len() as f64 / px
                }
            })
            .collect()
    }

    /// Frames `[start, start+len)` with matching masks.
    pub fn window(&self, start: usize, len: usize) -> VideoRecord {
        VideoRecord {
            name: self.name.clone(),
            frames: self.frames.slice(start, len),
            gt_masks: self.gt_masks.iter().map(|m| m.slice(start, len)).collect(),
            duration_sec: len as f64 / self.fps,
            fps: self.fps,
            metadata: self.metadata.clone(),
        }
    }
}
