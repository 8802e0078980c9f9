//! Strided convolutional encoder shared by frames and masks.
//!
//! Each stage is a 3×3 stride-2 convolution followed by ReLU, so stage `i`
//! runs at stride `2^(i+1)`. Masks are lifted to three channels by a learned
//! 1→3 map and then run through the very same stages.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::types::{FrameTensor, MaskSequence, MultiScaleFeatures};

pub const ADAPTER: &str = "backbone.mask_adapter";

fn stage_name(i: usize) -> String {
    format!("backbone.stage{i}")
}

pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng, store: &mut ParamStore) {
    let mut c_in = 3;
    for (i, &c) in cfg.backbone_channels.iter().enumerate() {
        nn::init_conv(store, rng, &stage_name(i), 3, c_in, c);
        c_in = c;
    }
    // Start as a gray-level lift so masks look like bright images.
    store.insert(format!("{ADAPTER}.weight"), Tensor::ones(&[1, 3]));
    store.insert(format!("{ADAPTER}.bias"), Tensor::zeros(&[3]));
}

/// Reject spatial sizes the stage stack cannot divide evenly.
pub fn check_spatial(cfg: &ModelConfig, height: usize, width: usize) -> Result<()> {
    let s = cfg.deepest_stride();
    for (axis, size) in [("height", height), ("width", width)] {
        if size == 0 || size % s != 0 {
            return Err(Error::Dimension(format!(
                "{axis} {size} is not divisible by the deepest backbone stride {s}"
            )));
        }
    }
    Ok(())
}

/// Run the stage stack on `[t, h, w, 3]` and return the features at the
/// requested strides, in the order requested.
pub fn forward(g: &Graph, store: &ParamStore, cfg: &ModelConfig, x: Var, strides: &[usize]) -> Vec<Var> {
    let deepest_needed = strides.iter().copied().max().unwrap_or(2);
    let mut outputs = Vec::new();
    let mut h = x;
    for i in 0..cfg.backbone_channels.len() {
        let stride = ModelConfig::stage_stride(i);
        if stride > deepest_needed {
            break;
        }
        let y = nn::conv2d(g, store, &stage_name(i), h, 3, 2);
        h = g.relu(y);
        outputs.push((stride, h));
    }
    strides
        .iter()
        .map(|s| {
            outputs
                .iter()
                .find(|(st, _)| st == s)
                .unwrap_or_else(|| panic!("backbone has no stage at stride {s}"))
                .1
        })
        .collect()
}

/// `[t, h, w, 1]` mask probabilities → `[t, h, w, 3]` backbone input.
pub fn lift_masks(g: &Graph, store: &ParamStore, masks: Var) -> Var {
    let s = g.shape(masks);
    let flat = g.reshape(masks, &[s[0] * s[1] * s[2], 1]);
    let y = nn::linear(g, store, ADAPTER, flat);
    g.reshape(y, &[s[0], s[1], s[2], 3])
}

/// Frozen-parameter view of the encoder for value-level calls.
pub struct Backbone<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore,
}

impl<'a> Backbone<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Self { cfg, params }
    }

    /// Features at the matching strides.
    pub fn encode_frames(&self, frames: &FrameTensor) -> Result<MultiScaleFeatures> {
        self.encode_frames_at(frames, &self.cfg.match_strides())
    }

    pub fn encode_frames_at(&self, frames: &FrameTensor, strides: &[usize]) -> Result<MultiScaleFeatures> {
        check_spatial(self.cfg, frames.height(), frames.width())?;
        let g = Graph::inference();
        let x = g.constant(frames.to_channels_last());
        let outs = forward(&g, self.params, self.cfg, x, strides);
        Ok(collect(&g, outs, strides))
    }

    pub fn encode_masks(&self, masks: &MaskSequence) -> Result<MultiScaleFeatures> {
        self.encode_masks_at(masks, &self.cfg.match_strides())
    }

    pub fn encode_masks_at(&self, masks: &MaskSequence, strides: &[usize]) -> Result<MultiScaleFeatures> {
        check_spatial(self.cfg, masks.height(), masks.width())?;
        let g = Graph::inference();
        let m = g.constant(masks.tensor().clone().reshape(&[masks.len(), masks.height(), masks.width(), 1]));
        let lifted = lift_masks(&g, self.params, m);
        let outs = forward(&g, self.params, self.cfg, lifted, strides);
        Ok(collect(&g, outs, strides))
    }
}

fn collect(g: &Graph, outs: Vec<Var>, strides: &[usize]) -> MultiScaleFeatures {
    MultiScaleFeatures {
        per_scale: outs.into_iter().map(|v| g.value(v).clone()).collect(),
        scale_strides: strides.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_params(&cfg, &mut rng, &mut store);
        // Nonzero biases so the zero-input case is not trivially zero.
        for (k, t) in store.iter_mut() {
            if k.ends_with(".bias") {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.1 * ((i % 5) as f64 - 1.5);
                }
            }
        }
        (cfg, store)
    }

    fn random_frames(t: usize, h: usize, w: usize, seed: u64) -> FrameTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameTensor::new(Tensor::from_fn(&[t, 3, h, w], |_| rng.gen())).unwrap()
    }

    #[test]
    fn output_shapes() {
        let (cfg, store) = setup();
        let bb = Backbone::new(&cfg, &store);
        let f = bb.encode_frames(&random_frames(12, 64, 64, 2)).unwrap();
        assert_eq!(f.scale_strides, vec![32, 16]);
        assert_eq!(f.per_scale[0].shape(), &[12, 2, 2, 16]);
        assert_eq!(f.per_scale[1].shape(), &[12, 4, 4, 12]);
        let f = bb.encode_frames(&random_frames(1, 32, 32, 3)).unwrap();
        assert_eq!(f.per_scale[0].shape(), &[1, 1, 1, 16]);
        assert_eq!(f.per_scale[1].shape(), &[1, 2, 2, 12]);
        let m = MaskSequence::new(Tensor::zeros(&[12, 64, 64]), 1).unwrap();
        let mf = bb.encode_masks(&m).unwrap();
        assert_eq!(mf.per_scale[0].shape(), &[12, 2, 2, 16]);
        assert_eq!(mf.per_scale[1].shape(), &[12, 4, 4, 12]);
    }

    #[test]
    fn indivisible_input_names_axis() {
        let (cfg, store) = setup();
        let err = Backbone::new(&cfg, &store)
            .encode_frames(&random_frames(1, 64, 48, 0))
            .unwrap_err();
        assert!(err.to_string().contains("width 48"), "{err}");
    }

    #[test]
    fn zero_input_gives_spatially_constant_features() {
        let (cfg, store) = setup();
        let f = FrameTensor::new(Tensor::zeros(&[2, 3, 64, 64])).unwrap();
        let feats = Backbone::new(&cfg, &store).encode_frames_at(&f, &[32, 16, 8]).unwrap();
        for t in &feats.per_scale {
            let c = t.cols();
            let first = &t.data()[..c];
            for row in t.data().chunks(c) {
                for (a, b) in row.iter().zip(first) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn masks_are_encoded_per_frame() {
        let (cfg, store) = setup();
        let bb = Backbone::new(&cfg, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one: Vec<f64> = (0..32 * 32).map(|_| f64::from(rng.gen::<bool>())).collect();
        let comp: Vec<f64> = one.iter().map(|v| 1.0 - v).collect();
        let seq = MaskSequence::from_frames(&[one.clone(), one.clone(), comp], 32, 32, 1).unwrap();
        let f = bb.encode_masks(&seq).unwrap();
        for t in &f.per_scale {
            let n = t.numel() / 3;
            assert_eq!(&t.data()[..n], &t.data()[n..2 * n]);
            let diff = t.data()[..n]
                .iter()
                .zip(&t.data()[2 * n..])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-6);
        }
    }

    #[test]
    fn permuting_frames_permutes_features() {
        let (cfg, store) = setup();
        let bb = Backbone::new(&cfg, &store);
        let f = random_frames(3, 32, 32, 9);
        let perm = [2, 0, 1];
        let parts: Vec<FrameTensor> = perm.iter().map(|&i| f.slice(i, 1)).collect();
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.tensor()).collect();
        let permuted = FrameTensor::new(Tensor::concat_outer(&refs)).unwrap();
        let a = bb.encode_frames(&f).unwrap();
        let b = bb.encode_frames(&permuted).unwrap();
        for (ta, tb) in a.per_scale.iter().zip(&b.per_scale) {
            for (new, &old) in perm.iter().enumerate() {
                assert_eq!(tb.slice_outer(new, 1), ta.slice_outer(old, 1));
            }
        }
    }

    #[test]
    fn only_the_adapter_is_mask_specific() {
        let (cfg, store) = setup();
        let mask_only: Vec<&String> = store
            .names()
            .filter(|n| ParamGroup::of(n) == ParamGroup::Backbone && !n.starts_with("backbone.stage"))
            .collect();
        assert!(mask_only.iter().all(|n| n.starts_with(ADAPTER)));
        let adapter: usize = mask_only.iter().map(|n| store.expect(n).numel()).sum();
        assert_eq!(adapter, 6);
        let stages: usize = store
            .iter()
            .filter(|(n, _)| n.starts_with("backbone.stage"))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(stages + adapter, store.num_scalars_in(ParamGroup::Backbone));
        let _ = cfg;
    }
}
