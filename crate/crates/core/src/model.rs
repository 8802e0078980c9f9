//! Parameters plus the clip-windowed forward pass shared by inference,
//! training and gradient checking.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{self, Backbone};
use crate::config::ModelConfig;
use crate::decoder;
use crate::error::{Error, Result};
use crate::matching;
use crate::memory::{MemoryBank, MemoryFeatures};
use crate::nn::Dropout;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::types::{FrameTensor, MaskSequence, MultiScaleFeatures};

const CHECKPOINT_TAG: &str = "clipvos checkpoint";

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters; every initializer draws from one seeded stream.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.ensure_valid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&cfg, &mut rng, &mut params);
        matching::init_params(&cfg, &mut rng, &mut params);
        decoder::init_params(&cfg, &mut rng, &mut params);
        Ok(Self { cfg, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = format!("{CHECKPOINT_TAG}\n{}", self.cfg.to_text());
        self.params.save(path, &header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, header) = ParamStore::load(path)?;
        let body = header
            .strip_prefix(CHECKPOINT_TAG)
            .ok_or_else(|| Error::format("checkpoint", format!("{}: missing checkpoint tag", path.display())))?;
        let cfg = ModelConfig::parse(body)?;
        Ok(Self { cfg, params })
    }
}

/// Non-overlapping clips `(start, len)` covering frames `1..t`.
pub fn clip_windows(t: usize, clip_length: usize) -> Vec<(usize, usize)> {
    let l = clip_length.max(1);
    (0..ModelConfig::num_clips(t, l))
        .map(|i| {
            let start = 1 + i * l;
            (start, l.min(t - start))
        })
        .collect()
}

/// Memory entry for one frame: backbone features of the frame and of its
/// (soft) mask at the matching strides, both cut from any gradient path.
pub fn memory_entry(
    params: &ParamStore,
    cfg: &ModelConfig,
    frame_feats: MultiScaleFeatures,
    mask: &[f64],
    height: usize,
    width: usize,
) -> Result<MemoryFeatures> {
    let m = MaskSequence::new(Tensor::new(vec![1, height, width], mask.to_vec()), 1)?;
    let mask_feats = Backbone::new(cfg, params).encode_masks_at(&m, &cfg.match_strides())?;
    MemoryFeatures::new(frame_feats, mask_feats)
}

/// Output of one clip: probabilities `[l, H, W]` and the detached matching-
/// scale features of the clip's last frame.
pub struct ClipOutput {
    pub probs: Var,
    pub last_frame: MultiScaleFeatures,
}

/// Encode, match, build the pyramid, decode and predict one clip.
pub fn clip_forward(
    g: &Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    clip: &FrameTensor,
    memory: &MemoryBank<MemoryFeatures>,
    dropout: &Dropout,
) -> Result<ClipOutput> {
    backbone::check_spatial(cfg, clip.height(), clip.width())?;
    let l = clip.len();
    let strides = cfg.used_strides();
    let x = g.constant(clip.to_channels_last());
    let feats = backbone::forward(g, params, cfg, x, &strides);
    let at = |s: usize| feats[strides.iter().position(|&x| x == s).expect("used stride")];
    let match_strides = cfg.match_strides();
    let query: Vec<Var> = match_strides.iter().map(|&s| at(s)).collect();

    let read = memory.read_rte_order();
    let kf: Vec<Var> = read.frame.into_iter().map(|t| g.constant(t)).collect();
    let km: Vec<Var> = read.mask.into_iter().map(|t| g.constant(t)).collect();
    let matched = matching::match_clip_graph(g, params, cfg, &query, &kf, &km, dropout, false)?;

    let ff: Vec<(usize, Var)> = cfg.pyramid_strides().into_iter().map(|s| (s, at(s))).collect();
    let enc: Vec<(usize, Var)> = match_strides.iter().copied().zip(matched.encoded).collect();
    let pyramid = decoder::build_pyramid_graph(g, params, cfg, &ff, &enc)?;
    let te = decoder::time_embeddings(g, params, l);
    let t_hat = decoder::space_time_decode_graph(g, params, cfg, &pyramid, te, dropout);
    let finest = *pyramid.last().expect("non-empty pyramid");
    let probs = decoder::predict_masks_graph(g, t_hat, finest, clip.height(), clip.width());

    let last_frame = MultiScaleFeatures {
        per_scale: query.iter().map(|v| g.value(*v).slice_outer(l - 1, 1)).collect(),
        scale_strides: match_strides,
    };
    Ok(ClipOutput { probs, last_frame })
}

/// One clip of a pass over a video.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipStep {
    pub index: usize,
    pub start: usize,
    pub len: usize,
    /// Memory entries the clip was matched against.
    pub memory_size: usize,
}

/// Where memory contents come from.
pub enum MemorySource<'a> {
    /// Encode the reference and each clip's prediction as the pass runs.
    Compute,
    /// Reuse entries recorded by an earlier pass: reference first, then one
    /// per clip update, in order.
    Replay(&'a [MemoryFeatures]),
}

/// Result of running one object through a whole video.
pub struct ObjectPass {
    /// Probabilities for frames `1..T` as `[T-1, H·W]` on the shared graph,
    /// when one was supplied.
    pub probs_var: Option<Var>,
    /// The same probabilities as plain values `[T-1, H, W]`.
    pub probs: Tensor,
    pub clips: Vec<ClipStep>,
    /// Wall time of each clip's forward pass, in microseconds.
    pub clip_micros: Vec<u64>,
    /// Every memory entry written, in order (reference first).
    pub memory_log: Vec<MemoryFeatures>,
}

/// Knobs of a pass that may differ from the trained configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PassOptions {
    pub clip_length: usize,
    pub bank_size: usize,
}

impl PassOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            clip_length: cfg.clip_length,
            bank_size: cfg.bank_size,
        }
    }
}

/// Run one object through the video clip by clip. With `graph` every clip is
/// recorded on it (for a backward pass); otherwise each clip gets its own
/// inference graph and only values are kept.
#[allow(clippy::too_many_arguments)]
pub fn object_pass(
    graph: Option<&Graph>,
    params: &ParamStore,
    cfg: &ModelConfig,
    frames: &FrameTensor,
    reference_mask: &[f64],
    opts: PassOptions,
    dropout: &Dropout,
    source: MemorySource<'_>,
) -> Result<ObjectPass> {
    let (t, h, w) = (frames.len(), frames.height(), frames.width());
    if t == 0 {
        return Err(Error::Input("video has no frames".into()));
    }
    if reference_mask.len() != h * w {
        return Err(Error::Input(format!(
            "reference mask has {} pixels, frames are {h}×{w}",
            reference_mask.len()
        )));
    }
    if opts.clip_length == 0 || opts.bank_size == 0 {
        return Err(Error::Config("clip length and bank size must be at least 1".into()));
    }
    backbone::check_spatial(cfg, h, w)?;
    let match_strides = cfg.match_strides();
    let mut replay_iter = match source {
        MemorySource::Replay(entries) => Some(entries.iter()),
        MemorySource::Compute => None,
    };
    let mut next_entry = |compute: &mut dyn FnMut() -> Result<MemoryFeatures>| -> Result<MemoryFeatures> {
        match replay_iter.as_mut() {
            Some(it) => it
                .next()
                .cloned()
                .ok_or_else(|| Error::Input("replayed memory log is shorter than the pass".into())),
            None => compute(),
        }
    };

    let reference = next_entry(&mut || {
        let f = Backbone::new(cfg, params).encode_frames_at(&frames.slice(0, 1), &match_strides)?;
        memory_entry(params, cfg, f, reference_mask, h, w)
    })?;
    let mut memory_log = vec![reference.clone()];
    let mut bank = MemoryBank::init_features(reference, opts.bank_size)?;

    let windows = clip_windows(t, opts.clip_length);
    let mut clips = Vec::with_capacity(windows.len());
    let mut prob_vars = Vec::with_capacity(windows.len());
    let mut probs = Vec::with_capacity((t - 1) * h * w);
    let mut clip_micros = Vec::with_capacity(windows.len());
    for (index, &(start, len)) in windows.iter().enumerate() {
        let clip = frames.slice(start, len);
        let local;
        let g = match graph {
            Some(g) => g,
            None => {
                local = Graph::inference();
                &local
            }
        };
        clips.push(ClipStep {
            index,
            start,
            len,
            memory_size: bank.len(),
        });
        let clock = std::time::Instant::now();
        let out = clip_forward(g, params, cfg, &clip, &bank, dropout)?;
        clip_micros.push(clock.elapsed().as_micros() as u64);
        let values = g.value(out.probs).clone();
        probs.extend_from_slice(values.data());
        if graph.is_some() {
            prob_vars.push(g.reshape(out.probs, &[len, h * w]));
        }
        if index + 1 < windows.len() {
            let last = &values.data()[(len - 1) * h * w..];
            let last_frame = out.last_frame;
            let entry = next_entry(&mut || memory_entry(params, cfg, last_frame.clone(), last, h, w))?;
            memory_log.push(entry.clone());
            bank.update_features(entry, start + len - 1)?;
        }
    }
    let probs_var = match (graph, prob_vars.len()) {
        (Some(_), 0) | (None, _) => None,
        (Some(_), 1) => Some(prob_vars[0]),
        (Some(g), _) => Some(g.concat_rows(&prob_vars)),
    };
    Ok(ObjectPass {
        probs_var,
        probs: Tensor::new(vec![t - 1, h, w], probs),
        clips,
        clip_micros,
        memory_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_frames_after_reference() {
        assert_eq!(clip_windows(5, 2), vec![(1, 2), (3, 2)]);
        assert_eq!(clip_windows(6, 2), vec![(1, 2), (3, 2), (5, 1)]);
        assert_eq!(clip_windows(1, 2), vec![]);
        assert_eq!(clip_windows(2, 3), vec![(1, 1)]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::init(ModelConfig::tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.params, m.params);
    }

    #[test]
    fn desk_model_size() {
        let n = Model::init(ModelConfig::desk(), 0).unwrap().num_parameters();
        assert!((300_000..800_000).contains(&n), "{n}");
    }
}
