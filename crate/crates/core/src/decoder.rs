//! Contextualized feature pyramid, space-time decoder and mask head.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Dropout};
use crate::params::{normal, ParamStore};
use crate::tensor::Tensor;
use crate::types::{MaskSequence, MultiScaleFeatures};

pub const TIME_EMBED: &str = "time_embed";
pub const SCALE_EMBED: &str = "decoder.scale_embed";

fn lateral(stride: usize) -> String {
    format!("pyramid.lateral.s{stride}")
}

fn output(stride: usize) -> String {
    format!("pyramid.output.s{stride}")
}

fn block(b: usize) -> String {
    format!("decoder.block{b}")
}

pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng, store: &mut ParamStore) {
    let d = cfg.hidden_dim;
    let strides = cfg.pyramid_strides();
    // No activation follows these convolutions, so weights are variance
    // preserving; the finest output is further shrunk by 1/√d so that mask
    // logits (a d-term dot product with a normalized embedding) start near
    // unit scale.
    let finest = *strides.last().expect("at least one pyramid stride");
    for &s in &strides {
        let ds = cfg.channels_at(s).expect("validated stride");
        let out_gain = if s == finest { 1.0 / (d as f64).sqrt() } else { 1.0 };
        for (prefix, k, c_in, gain) in [(lateral(s), 1, ds, 1.0), (output(s), 3, d, out_gain)] {
            let fan_in = k * k * c_in;
            store.insert(format!("{prefix}.weight"), normal(rng, &[fan_in, d], gain / (fan_in as f64).sqrt()));
            store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]));
        }
    }
    store.insert(TIME_EMBED, normal(rng, &[cfg.clip_length, d], 1.0));
    store.insert(SCALE_EMBED, normal(rng, &[strides.len(), d], 0.1));
    for b in 0..cfg.decoder_blocks {
        let p = block(b);
        nn::init_mha(store, rng, &format!("{p}.self_attn"), d, cfg.decoder_heads);
        nn::init_mha(store, rng, &format!("{p}.cross_attn"), d, cfg.decoder_heads);
        nn::init_linear(store, rng, &format!("{p}.ffn1"), d, d * cfg.ffn_ratio);
        nn::init_linear(store, rng, &format!("{p}.ffn2"), d * cfg.ffn_ratio, d);
        for ln in ["ln1", "ln2", "ln3"] {
            nn::init_layer_norm(store, &format!("{p}.{ln}"), d);
        }
    }
}

/// Pyramid level consumed by each decoder block: round-robin from the coarsest.
pub fn block_scale_schedule(blocks: usize, levels: usize) -> Vec<usize> {
    (0..blocks).map(|b| b % levels).collect()
}

/// Build the pyramid coarse→fine. `frame_feats` holds backbone features at
/// every pyramid stride; `encoded` holds matching output at a subset of them.
pub fn build_pyramid_graph(
    g: &Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    frame_feats: &[(usize, Var)],
    encoded: &[(usize, Var)],
) -> Result<Vec<Var>> {
    let mut levels: Vec<Var> = Vec::new();
    for &stride in &cfg.pyramid_strides() {
        let x = frame_feats
            .iter()
            .find(|(s, _)| *s == stride)
            .ok_or_else(|| Error::Dimension(format!("no frame features at stride {stride}")))?
            .1;
        let mut acc = nn::conv2d(g, store, &lateral(stride), x, 1, 1);
        let target = g.shape(acc);
        if let Some(&prev) = levels.last() {
            let up = nn::resize_bilinear(g, prev, target[1], target[2]);
            let us = g.shape(up);
            if us != target {
                return Err(Error::Dimension(format!(
                    "stride {stride}: upsampled coarser level {us:?} vs lateral {target:?}"
                )));
            }
            acc = g.add(acc, up);
        }
        if let Some((_, enc)) = encoded.iter().find(|(s, _)| *s == stride) {
            let es = g.shape(*enc);
            if es != target {
                return Err(Error::Dimension(format!(
                    "stride {stride}: encoded mask features {es:?} vs lateral {target:?}"
                )));
            }
            acc = g.add(acc, *enc);
        }
        levels.push(nn::conv2d(g, store, &output(stride), acc, 3, 1));
    }
    Ok(levels)
}

/// Refine the first `l` time embeddings against the pyramid.
pub fn space_time_decode_graph(
    g: &Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pyramid: &[Var],
    time_embed: Var,
    dropout: &Dropout,
) -> Var {
    let d = cfg.hidden_dim;
    let l = g.shape(time_embed)[0];
    let scale_embed = store.var(g, SCALE_EMBED);
    let schedule = block_scale_schedule(cfg.decoder_blocks, pyramid.len());

    // Keys per level: tokens plus positional and scale encodings, per frame.
    let mut keys_by_level: Vec<Option<Vec<(Var, Var)>>> = vec![None; pyramid.len()];
    let mut t = time_embed;
    for (b, &level) in schedule.iter().enumerate() {
        let p = block(b);
        let sa = nn::mha(g, store, &format!("{p}.self_attn"), cfg.decoder_heads, t, t, t, dropout);
        let sa = dropout.apply(g, sa);
        t = nn::layer_norm(g, store, &format!("{p}.ln1"), g.add(t, sa));

        let frame_kv = keys_by_level[level]
            .get_or_insert_with(|| {
                let s = g.shape(pyramid[level]);
                let (h, w) = (s[1], s[2]);
                let pe = g.constant(nn::sinusoidal_2d(h, w, d));
                let se = g.slice_rows(scale_embed, level, 1);
                let se = g.reshape(se, &[d]);
                let flat = g.reshape(pyramid[level], &[l * h * w, d]);
                (0..l)
                    .map(|j| {
                        let v = g.slice_rows(flat, j * h * w, h * w);
                        let k = g.add_row(g.add(v, pe), se);
                        (k, v)
                    })
                    .collect()
            })
            .clone();
        let ca: Vec<Var> = frame_kv
            .iter()
            .enumerate()
            .map(|(j, (k, v))| {
                let q = g.slice_rows(t, j, 1);
                nn::mha(g, store, &format!("{p}.cross_attn"), cfg.decoder_heads, q, *k, *v, dropout)
            })
            .collect();
        let ca = if ca.len() == 1 { ca[0] } else { g.concat_rows(&ca) };
        let ca = dropout.apply(g, ca);
        t = nn::layer_norm(g, store, &format!("{p}.ln2"), g.add(t, ca));

        let hdn = g.relu(nn::linear(g, store, &format!("{p}.ffn1"), t));
        let hdn = dropout.apply(g, hdn);
        let ff = dropout.apply(g, nn::linear(g, store, &format!("{p}.ffn2"), hdn));
        t = nn::layer_norm(g, store, &format!("{p}.ln3"), g.add(t, ff));
    }
    t
}

/// First `l` rows of the learned time embeddings. Clips longer than the
/// table get the table linearly resampled to `l` rows, endpoints kept.
pub fn time_embeddings(g: &Graph, store: &ParamStore, l: usize) -> Var {
    let te = store.var(g, TIME_EMBED);
    let rows = g.shape(te)[0];
    if rows == l {
        te
    } else if l < rows {
        g.slice_rows(te, 0, l)
    } else {
        g.gather(te, Rc::new(crate::matching::resample_map(rows, l)))
    }
}

/// Value-level counterpart of [`time_embeddings`].
pub fn time_embedding_values(store: &ParamStore, l: usize) -> Tensor {
    let g = Graph::inference();
    let v = time_embeddings(&g, store, l);
    let t = g.value(v).clone();
    t
}

/// Per-frame mask probabilities `[l, out_h, out_w]` from refined embeddings
/// `[l, d]` and the finest pyramid level `[l, h, w, d]`.
pub fn predict_masks_graph(g: &Graph, t_hat: Var, finest: Var, out_h: usize, out_w: usize) -> Var {
    let s = g.shape(finest);
    let (l, h, w, d) = (s[0], s[1], s[2], s[3]);
    let flat = g.reshape(finest, &[l * h * w, d]);
    let logits: Vec<Var> = (0..l)
        .map(|j| {
            let tokens = g.slice_rows(flat, j * h * w, h * w);
            let tj = g.slice_rows(t_hat, j, 1);
            g.matmul_t(tokens, tj, false, true)
        })
        .collect();
    let logits = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits) };
    let probs = g.sigmoid(g.reshape(logits, &[l, h, w, 1]));
    let up = nn::resize_bilinear(g, probs, out_h, out_w);
    g.reshape(up, &[l, out_h, out_w])
}

/// Contextualized pyramid levels, coarse to fine, each `[l, h_s, w_s, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub per_scale: Vec<Tensor>,
    pub strides: Vec<usize>,
}

/// Time embeddings `[l, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbeddings {
    pub embeddings: Tensor,
}

pub fn build_pyramid(
    frame_feats: &MultiScaleFeatures,
    encoded: &MultiScaleFeatures,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<FeaturePyramid> {
    let g = Graph::inference();
    let ff: Vec<(usize, Var)> = frame_feats
        .scale_strides
        .iter()
        .zip(&frame_feats.per_scale)
        .map(|(s, t)| (*s, g.constant(t.clone())))
        .collect();
    let enc: Vec<(usize, Var)> = encoded
        .scale_strides
        .iter()
        .zip(&encoded.per_scale)
        .map(|(s, t)| (*s, g.constant(t.clone())))
        .collect();
    let levels = build_pyramid_graph(&g, params, cfg, &ff, &enc)?;
    Ok(FeaturePyramid {
        per_scale: levels.iter().map(|v| g.value(*v).clone()).collect(),
        strides: cfg.pyramid_strides(),
    })
}

/// Decode with the stored time embeddings, truncated to the clip length of `pyr`.
pub fn space_time_decode(pyr: &FeaturePyramid, params: &ParamStore, cfg: &ModelConfig) -> TimeEmbeddings {
    let l = pyr.per_scale[0].shape()[0];
    let te = time_embedding_values(params, l);
    space_time_decode_from(pyr, &TimeEmbeddings { embeddings: te }, params, cfg)
}

pub fn space_time_decode_from(
    pyr: &FeaturePyramid,
    te: &TimeEmbeddings,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> TimeEmbeddings {
    let g = Graph::inference();
    let levels: Vec<Var> = pyr.per_scale.iter().map(|t| g.constant(t.clone())).collect();
    let t = g.constant(te.embeddings.clone());
    let out = space_time_decode_graph(&g, params, cfg, &levels, t, &Dropout::inactive());
    let embeddings = g.value(out).clone();
    TimeEmbeddings { embeddings }
}

pub fn predict_masks(t_hat: &TimeEmbeddings, pyr: &FeaturePyramid, out_h: usize, out_w: usize) -> MaskSequence {
    let g = Graph::inference();
    let t = g.constant(t_hat.embeddings.clone());
    let finest = g.constant(pyr.per_scale.last().expect("non-empty pyramid").clone());
    let p = predict_masks_graph(&g, t, finest, out_h, out_w);
    let probs = g.value(p).clone();
    MaskSequence::new(probs, 1).expect("sigmoid output lies in [0, 1]")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        init_params(cfg, &mut rng, &mut store);
        store
    }

    fn feats(l: usize, side: usize, strides: &[usize], d_of: impl Fn(usize) -> usize, seed: u64) -> MultiScaleFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiScaleFeatures {
            per_scale: strides
                .iter()
                .map(|&s| normal(&mut rng, &[l, side / s, side / s, d_of(s)], 1.0))
                .collect(),
            scale_strides: strides.to_vec(),
        }
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let ff = feats(2, 64, &[32, 16, 8], |s| cfg.channels_at(s).unwrap(), 1);
        let enc = feats(2, 64, &[32, 16], |_| 16, 2);
        let pyr = build_pyramid(&ff, &enc, &store, &cfg).unwrap();
        let shapes: Vec<&[usize]> = pyr.per_scale.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![&[2, 2, 2, 16][..], &[2, 4, 4, 16], &[2, 8, 8, 16]]);
    }

    #[test]
    fn pyramid_shape_mismatch_names_scale() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let ff = feats(2, 64, &[32, 16, 8], |s| cfg.channels_at(s).unwrap(), 1);
        let enc = feats(1, 64, &[32, 16], |_| 16, 2);
        let err = build_pyramid(&ff, &enc, &store, &cfg).unwrap_err();
        assert!(err.to_string().contains("stride 32"), "{err}");
    }

    /// Standard FPN written independently of `build_pyramid_graph`.
    fn reference_fpn(ff: &MultiScaleFeatures, store: &ParamStore) -> Vec<Tensor> {
        let conv = |x: &Tensor, name: &str, k: usize| {
            let (t, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let wt = store.expect(&format!("{name}.weight"));
            let b = store.expect(&format!("{name}.bias"));
            let co = b.numel();
            let r = (k / 2) as isize;
            Tensor::from_fn(&[t, h, w, co], |i| {
                let o = i % co;
                let px = (i / co) % w;
                let py = (i / co / w) % h;
                let f = i / co / w / h;
                let mut acc = b.data()[o];
                for ky in 0..k {
                    for kx in 0..k {
                        let yy = (py as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                        let xx = (px as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                        for ci in 0..c {
                            acc += x.data()[((f * h + yy) * w + xx) * c + ci] * wt.data()[((ky * k + kx) * c + ci) * co + o];
                        }
                    }
                }
                acc
            })
        };
        let mut out: Vec<Tensor> = Vec::new();
        for (x, s) in ff.per_scale.iter().zip(&ff.scale_strides) {
            let mut lat = conv(x, &format!("pyramid.lateral.s{s}"), 1);
            if let Some(prev) = out.last() {
                let (t, h, w, c) = (prev.shape()[0], prev.shape()[1], prev.shape()[2], prev.shape()[3]);
                let up = nn::bilinear_map(t, h, w, lat.shape()[1], lat.shape()[2]).apply(prev.data(), c);
                for (a, b) in lat.data_mut().iter_mut().zip(up) {
                    *a += b;
                }
            }
            out.push(conv(&lat, &format!("pyramid.output.s{s}"), 3));
        }
        out
    }

    #[test]
    fn zero_encoded_features_reduce_to_plain_fpn() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let ff = feats(2, 64, &[32, 16, 8], |s| cfg.channels_at(s).unwrap(), 3);
        let zero = MultiScaleFeatures {
            per_scale: vec![Tensor::zeros(&[2, 2, 2, 16]), Tensor::zeros(&[2, 4, 4, 16])],
            scale_strides: vec![32, 16],
        };
        let pyr = build_pyramid(&ff, &zero, &store, &cfg).unwrap();
        let reference = reference_fpn(&ff, &store);
        for (a, b) in pyr.per_scale.iter().zip(&reference) {
            assert!(a.max_abs_diff(b) < 1e-10);
        }
    }

    #[test]
    fn one_channel_hand_computation() {
        // d = 4 but only channel 0 carries signal; identity 1×1 lateral and
        // centre-tap identity 3×3 output convs.
        let cfg = ModelConfig {
            hidden_dim: 4,
            match_heads: 1,
            decoder_heads: 1,
            backbone_channels: vec![1, 1],
            num_scales: 1,
            mask_stride: 2,
            input_resolution: 4,
            ..ModelConfig::tiny()
        };
        assert_eq!(cfg.pyramid_strides(), vec![4, 2]);
        let mut store = setup(&cfg);
        for s in [4, 2] {
            store.insert(format!("pyramid.lateral.s{s}.weight"), Tensor::new(vec![1, 4], vec![1., 0., 0., 0.]));
            store.insert(format!("pyramid.lateral.s{s}.bias"), Tensor::zeros(&[4]));
            let mut w = Tensor::zeros(&[36, 4]);
            for c in 0..4 {
                w.data_mut()[(4 * 4 + c) * 4 + c] = 1.0;
            }
            store.insert(format!("pyramid.output.s{s}.weight"), w);
            store.insert(format!("pyramid.output.s{s}.bias"), Tensor::zeros(&[4]));
        }
        let ff = MultiScaleFeatures {
            per_scale: vec![
                Tensor::new(vec![1, 1, 1, 1], vec![3.0]),
                Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]),
            ],
            scale_strides: vec![4, 2],
        };
        let enc = MultiScaleFeatures {
            per_scale: vec![Tensor::new(vec![1, 1, 1, 4], vec![0.5, 0., 0., 0.])],
            scale_strides: vec![4],
        };
        let pyr = build_pyramid(&ff, &enc, &store, &cfg).unwrap();
        // coarse: 3 + 0.5 = 3.5; fine: x + upsample(3.5) = x + 3.5
        assert_eq!(pyr.per_scale[0].data(), &[3.5, 0., 0., 0.]);
        let fine: Vec<f64> = pyr.per_scale[1].data().chunks(4).map(|c| c[0]).collect();
        assert_eq!(fine, vec![4.5, 5.5, 6.5, 7.5]);
    }

    #[test]
    fn round_robin_schedule() {
        assert_eq!(block_scale_schedule(6, 3), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(block_scale_schedule(6, 2), vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn identical_frames_decode_identically() {
        let cfg = ModelConfig::tiny();
        let mut store = setup(&cfg);
        let mut te = store.expect(TIME_EMBED).clone();
        let d = cfg.hidden_dim;
        let first = te.data()[..d].to_vec();
        te.data_mut()[d..2 * d].copy_from_slice(&first);
        store.insert(TIME_EMBED, te);
        let one = feats(1, 64, &[32, 16, 8], |_| 16, 5);
        let pyr = FeaturePyramid {
            per_scale: one
                .per_scale
                .iter()
                .map(|t| Tensor::concat_outer(&[t, t]))
                .collect(),
            strides: vec![32, 16, 8],
        };
        let out = space_time_decode(&pyr, &store, &cfg);
        let e = out.embeddings.data();
        for c in 0..d {
            assert!((e[c] - e[d + c]).abs() < 1e-12);
        }
        // A one-frame clip uses only the first embedding.
        let single = FeaturePyramid {
            per_scale: one.per_scale.clone(),
            strides: vec![32, 16, 8],
        };
        assert_eq!(space_time_decode(&single, &store, &cfg).embeddings.shape(), &[1, d]);
    }

    #[test]
    fn mask_head_values() {
        let d = 4;
        let zero = TimeEmbeddings {
            embeddings: Tensor::zeros(&[1, d]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pyr = FeaturePyramid {
            per_scale: vec![normal(&mut rng, &[1, 2, 2, d], 1.0)],
            strides: vec![8],
        };
        let m = predict_masks(&zero, &pyr, 16, 16);
        assert!(m.tensor().data().iter().all(|&p| p == 0.5));

        let t = TimeEmbeddings {
            embeddings: Tensor::new(vec![1, d], vec![1.0, 0.0, 0.0, 0.0]),
        };
        let two = FeaturePyramid {
            per_scale: vec![Tensor::new(vec![1, 1, 2, d], vec![1., 0., 0., 0., -1., 0., 0., 0.])],
            strides: vec![8],
        };
        let m = predict_masks(&t, &two, 1, 2);
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((m.frame(0)[0] - s(1.0)).abs() < 1e-15);
        assert!((m.frame(0)[1] - s(-1.0)).abs() < 1e-15);

        let constant = FeaturePyramid {
            per_scale: vec![Tensor::from_fn(&[1, 2, 2, d], |i| (i % d) as f64 * 0.3)],
            strides: vec![8],
        };
        let m = predict_masks(&t, &constant, 8, 8);
        let p0 = m.frame(0)[0];
        assert!(m.frame(0).iter().all(|&p| (p - p0).abs() < 1e-15));
    }
}
