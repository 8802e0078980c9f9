//! Multi-scale query–memory token matching with relative time encoding.
//!
//! For each matching scale the query clip's frame tokens attend over the
//! memory's frame tokens, and the attention weights pool the memory's mask
//! tokens into encoded mask features for the query. Per-head scores are
//! modulated by a learnable per-memory-entry embedding before the softmax:
//! multiplied elementwise in the default mode, added in the ablation mode.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, RowMap, Var};
use crate::config::{ModelConfig, RteMode};
use crate::error::{Error, Result};
use crate::memory::{MemoryBank, MemoryFeatures};
use crate::nn::{self, Dropout};
use crate::params::{xavier_uniform, ParamStore};
use crate::tensor::Tensor;
use crate::types::MultiScaleFeatures;

pub fn rte_name(i: usize) -> String {
    format!("rte.e{i}")
}

pub fn rte_bias_name(i: usize) -> String {
    format!("rte.b{i}")
}

fn scale_prefix(stride: usize) -> String {
    format!("match.s{stride}")
}

/// Learnable time-importance embeddings `e_i` of length `i`, `i = 1..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct RteTable {
    embeddings: Vec<Vec<f64>>,
}

impl RteTable {
    /// All-ones table (the initialization).
    pub fn identity(bank_size: usize) -> Self {
        Self {
            embeddings: (1..=bank_size).map(|i| vec![1.0; i]).collect(),
        }
    }

    pub fn from_embeddings(embeddings: Vec<Vec<f64>>) -> Result<Self> {
        for (i, e) in embeddings.iter().enumerate() {
            if e.len() != i + 1 {
                return Err(Error::Dimension(format!("e_{} has {} entries", i + 1, e.len())));
            }
        }
        Ok(Self { embeddings })
    }

    /// Multiplicative (`rte.e*`) or additive (`rte.b*`) table from a store.
    pub fn from_store(store: &ParamStore, bank_size: usize, additive: bool) -> Self {
        let name = if additive { rte_bias_name } else { rte_name };
        Self {
            embeddings: (1..=bank_size).map(|i| store.expect(&name(i)).data().to_vec()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.embeddings[i - 1]
    }

    /// `e_n`, or `e_N` linearly resampled to `n` entries when `n > N`.
    pub fn select(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::EmptyMemory);
        }
        let cap = self.len();
        if n <= cap {
            Ok(self.embeddings[n - 1].clone())
        } else {
            Ok(selection_map(cap, n).apply(&self.embeddings[cap - 1], 1))
        }
    }
}

/// Linear resampling weights from `from` entries to `to` entries with both
/// endpoints preserved: output `j` samples position `j·(from−1)/(to−1)`.
pub(crate) fn resample_map(from: usize, to: usize) -> RowMap {
    let mut b = RowMap::builder(from);
    for j in 0..to {
        let x = if to == 1 {
            0.0
        } else {
            j as f64 * (from - 1) as f64 / (to - 1) as f64
        };
        let i0 = (x.floor() as usize).min(from - 1);
        let i1 = (i0 + 1).min(from - 1);
        let f = x - i0 as f64;
        b.push(i0, 1.0 - f);
        if f > 0.0 && i1 != i0 {
            b.push(i1, f);
        }
        b.end_row();
    }
    b.finish()
}

fn selection_map(cap: usize, n: usize) -> RowMap {
    resample_map(cap, n)
}

/// Broadcast `e_n` to `[l·h·w, n·h·w]` with `E[r, c] = e_n[c / (h·w)]`.
pub fn expand_rte(e_n: &[f64], l: usize, h: usize, w: usize) -> Tensor {
    let n = e_n.len();
    let hw = h * w;
    Tensor::from_fn(&[l * hw, n * hw], |i| e_n[(i % (n * hw)) / hw])
}

fn expansion_map(n: usize, rows: usize, hw: usize) -> RowMap {
    let mut b = RowMap::builder(n);
    for _ in 0..rows {
        for c in 0..n * hw {
            b.push(c / hw, 1.0);
            b.end_row();
        }
    }
    b.finish()
}

/// How the memory-entry embedding enters the scores.
#[derive(Clone, Copy, Debug)]
pub enum Modulation {
    None,
    /// `E ∘ scores` with `E` a `[rows, cols]` node.
    Multiply(Var),
    /// `scores + B`.
    Add(Var),
}

/// One head of (optionally modulated) scaled dot-product attention.
/// Returns the attended values and the softmax weights.
pub fn modulated_attention(g: &Graph, q: Var, k: Var, v: Var, modulation: Modulation, dropout: &Dropout) -> (Var, Var) {
    let dh = g.shape(q)[1] as f64;
    let s = g.matmul_t(q, k, false, true);
    let s = g.scale(s, 1.0 / dh.sqrt());
    let s = match modulation {
        Modulation::None => s,
        Modulation::Multiply(e) => g.mul(e, s),
        Modulation::Add(b) => g.add(s, b),
    };
    let p = g.softmax(s);
    let pd = dropout.apply(g, p);
    (g.matmul(pd, v), p)
}

pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng, store: &mut ParamStore) {
    let d = cfg.hidden_dim;
    let heads = cfg.match_heads;
    let dh = cfg.match_head_dim();
    for stride in cfg.match_strides() {
        let p = scale_prefix(stride);
        let ds = cfg.channels_at(stride).expect("validated stride");
        for inp in ["q_in", "k_in", "v_in"] {
            nn::init_linear(store, rng, &format!("{p}.{inp}"), ds, d);
        }
        for ln in ["ln_q", "ln_k", "ln_out"] {
            nn::init_layer_norm(store, &format!("{p}.{ln}"), d);
        }
        for h in 0..heads {
            for w in ["wq", "wk", "wv"] {
                store.insert(format!("{p}.h{h}.{w}"), xavier_uniform(rng, d, dh));
            }
        }
        store.insert(format!("{p}.wo"), xavier_uniform(rng, heads * dh, d));
    }
    for i in 1..=cfg.bank_size {
        store.insert(rte_name(i), Tensor::ones(&[i]));
        store.insert(rte_bias_name(i), Tensor::zeros(&[i]));
    }
}

/// Number of stored embeddings `e_1..e_N`; fixed at training time, so an
/// inference bank larger than `N` falls back to resampling `e_N`.
pub fn table_len(store: &ParamStore, name: fn(usize) -> String) -> usize {
    (1..).take_while(|&i| store.contains(&name(i))).count()
}

/// Graph node for the `[rows, n·hw]` score modulation at one scale.
fn modulation_var(g: &Graph, store: &ParamStore, cfg: &ModelConfig, n: usize, rows: usize, hw: usize) -> Modulation {
    let (name, mode): (fn(usize) -> String, _) = match cfg.rte_mode {
        RteMode::Off => return Modulation::None,
        RteMode::Multiplicative => (rte_name, RteMode::Multiplicative),
        RteMode::Additive => (rte_bias_name, RteMode::Additive),
    };
    let cap = table_len(store, name);
    if cap == 0 {
        return Modulation::None;
    }
    let src_index = n.min(cap);
    let src = store.expect(&name(src_index));
    let leaf = if cfg.freeze_rte {
        g.constant(src.clone())
    } else {
        store.var(g, &name(src_index))
    };
    let col = g.reshape(leaf, &[src_index, 1]);
    let selected = if n > cap {
        g.gather(col, Rc::new(selection_map(cap, n)))
    } else {
        col
    };
    let expanded = g.gather(selected, Rc::new(expansion_map(n, rows, hw)));
    let e = g.reshape(expanded, &[rows, n * hw]);
    match mode {
        RteMode::Additive => Modulation::Add(e),
        _ => Modulation::Multiply(e),
    }
}

/// Result of matching one clip.
pub struct MatchOutput {
    /// Encoded mask features `[l, h_s, w_s, d]` per matching scale.
    pub encoded: Vec<Var>,
    /// Softmax weights `[l·h·w, n·h·w]` per scale, per head (kept only on request).
    pub attention: Vec<Vec<Var>>,
}

/// Match `[l, h, w, d_s]` query features against `[n, h, w, d_s]` memory frame
/// and mask features given nearest-first. One entry per matching stride.
#[allow(clippy::too_many_arguments)]
pub fn match_clip_graph(
    g: &Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    query: &[Var],
    mem_frame: &[Var],
    mem_mask: &[Var],
    dropout: &Dropout,
    keep_attention: bool,
) -> Result<MatchOutput> {
    let strides = cfg.match_strides();
    if query.len() != strides.len() || mem_frame.len() != strides.len() || mem_mask.len() != strides.len() {
        return Err(Error::Config(format!(
            "matching expects {} scales, got query {} / memory {}",
            strides.len(),
            query.len(),
            mem_frame.len()
        )));
    }
    let d = cfg.hidden_dim;
    let mut encoded = Vec::with_capacity(strides.len());
    let mut attention = Vec::new();
    for (si, &stride) in strides.iter().enumerate() {
        let p = scale_prefix(stride);
        let qs = g.shape(query[si]);
        let ks = g.shape(mem_frame[si]);
        let vs = g.shape(mem_mask[si]);
        if qs[1..3] != ks[1..3] || ks[..3] != vs[..3] || qs[3] != ks[3] {
            return Err(Error::Config(format!(
                "scale {stride}: query {qs:?}, memory frames {ks:?} and memory masks {vs:?} disagree"
            )));
        }
        let (l, h, w, ds) = (qs[0], qs[1], qs[2], qs[3]);
        let n = ks[0];
        if n == 0 {
            return Err(Error::EmptyMemory);
        }
        let hw = h * w;
        let pe = nn::sinusoidal_2d(h, w, d);
        let q_flat = g.reshape(query[si], &[l * hw, ds]);
        let k_flat = g.reshape(mem_frame[si], &[n * hw, ds]);
        let v_flat = g.reshape(mem_mask[si], &[n * hw, vs[3]]);
        let q_tok = nn::linear(g, store, &format!("{p}.q_in"), q_flat);
        let k_tok = nn::linear(g, store, &format!("{p}.k_in"), k_flat);
        let v_tok = nn::linear(g, store, &format!("{p}.v_in"), v_flat);
        let q_pos = g.add(q_tok, g.constant(nn::tile_rows(&pe, l)));
        let k_pos = g.add(k_tok, g.constant(nn::tile_rows(&pe, n)));
        let v = g.add(v_tok, g.constant(nn::tile_rows(&pe, n)));
        let q = nn::layer_norm(g, store, &format!("{p}.ln_q"), q_pos);
        let k = nn::layer_norm(g, store, &format!("{p}.ln_k"), k_pos);

        let modulation = modulation_var(g, store, cfg, n, l * hw, hw);
        let mut heads = Vec::with_capacity(cfg.match_heads);
        let mut maps = Vec::new();
        for hd in 0..cfg.match_heads {
            let qh = g.matmul(q, store.var(g, &format!("{p}.h{hd}.wq")));
            let kh = g.matmul(k, store.var(g, &format!("{p}.h{hd}.wk")));
            let vh = g.matmul(v, store.var(g, &format!("{p}.h{hd}.wv")));
            let (o, probs) = modulated_attention(g, qh, kh, vh, modulation, dropout);
            heads.push(o);
            if keep_attention {
                maps.push(probs);
            }
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let mixed = g.matmul(cat, store.var(g, &format!("{p}.wo")));
        let act = g.gelu(mixed);
        let res = g.add(q_tok, act);
        let out = nn::layer_norm(g, store, &format!("{p}.ln_out"), res);
        encoded.push(g.reshape(out, &[l, h, w, d]));
        attention.push(maps);
    }
    Ok(MatchOutput { encoded, attention })
}

/// Attention weights by `(stride, head)`.
pub type AttentionMaps = BTreeMap<(usize, usize), Tensor>;

/// Value-level matching of a query clip against a memory bank.
pub fn match_clip(
    query: &MultiScaleFeatures,
    memory: &MemoryBank<MemoryFeatures>,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<(MultiScaleFeatures, AttentionMaps)> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if query.scale_strides != memory.strides() || query.scale_strides != cfg.match_strides() {
        return Err(Error::Config(format!(
            "query strides {:?}, memory strides {:?}, configured {:?}",
            query.scale_strides,
            memory.strides(),
            cfg.match_strides()
        )));
    }
    let read = memory.read_rte_order();
    let g = Graph::inference();
    let q: Vec<Var> = query.per_scale.iter().map(|t| g.constant(t.clone())).collect();
    let kf: Vec<Var> = read.frame.into_iter().map(|t| g.constant(t)).collect();
    let km: Vec<Var> = read.mask.into_iter().map(|t| g.constant(t)).collect();
    let out = match_clip_graph(&g, params, cfg, &q, &kf, &km, &Dropout::inactive(), true)?;
    let encoded = MultiScaleFeatures {
        per_scale: out.encoded.iter().map(|v| g.value(*v).clone()).collect(),
        scale_strides: query.scale_strides.clone(),
    };
    let mut maps = BTreeMap::new();
    for (stride, heads) in query.scale_strides.iter().zip(&out.attention) {
        for (h, v) in heads.iter().enumerate() {
            maps.insert((*stride, h), g.value(*v).clone());
        }
    }
    Ok((encoded, maps))
}

/// Write attention maps as an array file with keys `attn.s{stride}.h{head}`.
pub fn dump_attention(path: &std::path::Path, maps: &AttentionMaps, header: &str) -> Result<()> {
    let arrays = maps
        .iter()
        .map(|((s, h), t)| (format!("attn.s{s}.h{h}"), t.clone()))
        .collect();
    crate::params::write_array_file(path, header, &arrays)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Piecewise-linear interpolation written directly from the definition.
    fn reference_resample(e: &[f64], n: usize) -> Vec<f64> {
        let big_n = e.len();
        (0..n)
            .map(|j| {
                let pos = j as f64 * (big_n - 1) as f64 / (n - 1) as f64;
                let lo = pos.floor() as usize;
                if lo + 1 >= big_n {
                    e[big_n - 1]
                } else {
                    let t = pos - lo as f64;
                    e[lo] * (1.0 - t) + e[lo + 1] * t
                }
            })
            .collect()
    }

    fn ramp_table(n: usize) -> RteTable {
        RteTable::from_embeddings((1..=n).map(|i| (0..i).map(|j| 1.0 + 0.5 * j as f64 + 0.1 * i as f64).collect()).collect())
            .unwrap()
    }

    #[test]
    fn select_direct_lookup() {
        let t = ramp_table(7);
        assert_eq!(t.select(3).unwrap(), t.get(3).to_vec());
        assert_eq!(RteTable::identity(7).select(7).unwrap(), vec![1.0; 7]);
        assert!(matches!(t.select(0), Err(Error::EmptyMemory)));
    }

    #[test]
    fn select_interpolates_past_capacity() {
        let t = ramp_table(7);
        let e7 = t.get(7).to_vec();
        let got = t.select(13).unwrap();
        let want = reference_resample(&e7, 13);
        assert_eq!(got.len(), 13);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(got[0], e7[0]);
        assert_eq!(got[12], e7[6]);
        for n in 8..20 {
            let got = t.select(n).unwrap();
            let want = reference_resample(&e7, n);
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn expansion_formula() {
        assert_eq!(expand_rte(&[2.0, 3.0], 1, 1, 1).data(), &[2.0, 3.0]);
        let e = expand_rte(&[2.0, 3.0], 1, 1, 2);
        assert_eq!(e.shape(), &[2, 4]);
        assert_eq!(e.data(), &[2., 2., 3., 3., 2., 2., 3., 3.]);
        let e = expand_rte(&[0.5, 1.5, 2.5], 2, 2, 3);
        let hw = 6;
        for r in 0..12 {
            for c in 0..18 {
                assert_eq!(e.data()[r * 18 + c], [0.5, 1.5, 2.5][c / hw]);
            }
        }
        assert!(expand_rte(&[1.0; 4], 3, 2, 2).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn graph_expansion_matches_value_expansion() {
        let cfg = ModelConfig {
            bank_size: 3,
            ..ModelConfig::tiny()
        };
        let mut store = ParamStore::new();
        store.insert(rte_name(1), Tensor::ones(&[1]));
        store.insert(rte_name(2), Tensor::ones(&[2]));
        store.insert(rte_name(3), Tensor::new(vec![3], vec![0.3, 1.2, 2.0]));
        for n in [3, 5] {
            let g = Graph::new();
            let Modulation::Multiply(e) = modulation_var(&g, &store, &cfg, n, 4, 2) else {
                panic!("expected multiplicative modulation")
            };
            let e_n = RteTable::from_embeddings(vec![vec![1.0], vec![1.0, 1.0], vec![0.3, 1.2, 2.0]])
                .unwrap()
                .select(n)
                .unwrap();
            assert_eq!(*g.value(e), expand_rte(&e_n, 2, 1, 2));
        }
    }

    fn toy_setup(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_params(cfg, &mut rng, &mut store);
        store
    }

    fn rand_feats(rng: &mut ChaCha8Rng, t: usize, cfg: &ModelConfig, side: usize) -> MultiScaleFeatures {
        let strides = cfg.match_strides();
        MultiScaleFeatures {
            per_scale: strides
                .iter()
                .map(|&s| crate::params::normal(rng, &[t, side / s, side / s, cfg.channels_at(s).unwrap()], 1.0))
                .collect(),
            scale_strides: strides,
        }
    }

    #[test]
    fn rows_normalize_and_shapes_hold() {
        let cfg = ModelConfig::tiny();
        let store = toy_setup(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_feats(&mut rng, 2, &cfg, 64);
        let entry = MemoryFeatures::new(rand_feats(&mut rng, 1, &cfg, 64), rand_feats(&mut rng, 1, &cfg, 64)).unwrap();
        let bank = MemoryBank::init_features(entry, 7).unwrap();
        let (enc, maps) = match_clip(&q, &bank, &store, &cfg).unwrap();
        assert_eq!(enc.per_scale[0].shape(), &[2, 2, 2, 16]);
        assert_eq!(enc.per_scale[1].shape(), &[2, 4, 4, 16]);
        assert_eq!(maps.len(), 2 * cfg.match_heads);
        for m in maps.values() {
            for row in m.data().chunks(m.cols()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn scale_mismatch_and_empty_memory() {
        let cfg = ModelConfig::tiny();
        let store = toy_setup(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut q = rand_feats(&mut rng, 2, &cfg, 64);
        let entry = MemoryFeatures::new(rand_feats(&mut rng, 1, &cfg, 64), rand_feats(&mut rng, 1, &cfg, 64)).unwrap();
        let bank = MemoryBank::init_features(entry, 7).unwrap();
        q.scale_strides = vec![32, 8];
        assert!(matches!(match_clip(&q, &bank, &store, &cfg), Err(Error::Config(_))));

        let g = Graph::new();
        let qv = vec![g.constant(Tensor::zeros(&[1, 2, 2, 16])), g.constant(Tensor::zeros(&[1, 4, 4, 12]))];
        let kv = vec![g.constant(Tensor::zeros(&[0, 2, 2, 16])), g.constant(Tensor::zeros(&[0, 4, 4, 12]))];
        let r = match_clip_graph(&g, &store, &cfg, &qv, &kv, &kv, &Dropout::inactive(), false);
        assert!(matches!(r, Err(Error::EmptyMemory)));
    }

    #[test]
    fn single_token_hand_calculation() {
        // d = 4, one head, one token everywhere; every projection is set by hand.
        let cfg = ModelConfig {
            hidden_dim: 4,
            match_heads: 1,
            num_scales: 1,
            backbone_channels: vec![4],
            mask_stride: 2,
            input_resolution: 2,
            ..ModelConfig::tiny()
        };
        assert_eq!(cfg.match_strides(), vec![2]);
        let mut store = toy_setup(&cfg, 1);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        for n in ["q_in", "k_in", "v_in"] {
            store.insert(format!("match.s2.{n}.weight"), eye.clone());
        }
        let wv = Tensor::from_fn(&[4, 4], |i| 0.1 * (i as f64) - 0.5);
        let wo = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 2.0 } else { 0.25 });
        store.insert("match.s2.h0.wv", wv.clone());
        store.insert("match.s2.wo", wo.clone());

        let xq = [0.3, -0.2, 0.9, 0.1];
        let xm = [1.0, 0.5, -0.5, 0.0];
        let ym = [0.2, 0.4, 0.6, 0.8];
        let g = Graph::new();
        let q = g.constant(Tensor::new(vec![1, 1, 1, 4], xq.to_vec()));
        let k = g.constant(Tensor::new(vec![1, 1, 1, 4], xm.to_vec()));
        let v = g.constant(Tensor::new(vec![1, 1, 1, 4], ym.to_vec()));
        let out = match_clip_graph(&g, &store, &cfg, &[q], &[k], &[v], &Dropout::inactive(), false).unwrap();
        let got = g.value(out.encoded[0]).data().to_vec();

        // Hand formula: single memory token → softmax weight 1, so the head
        // output is (ym + pe)·Wv; then ·Wo, GELU, residual with xq, LayerNorm.
        let pe = nn::sinusoidal_2d(1, 1, 4);
        let vtok: Vec<f64> = (0..4).map(|i| ym[i] + pe.data()[i]).collect();
        let vw: Vec<f64> = (0..4).map(|j| (0..4).map(|i| vtok[i] * wv.data()[i * 4 + j]).sum()).collect();
        let mixed: Vec<f64> = (0..4).map(|j| (0..4).map(|i| vw[i] * wo.data()[i * 4 + j]).sum()).collect();
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x.powi(3))).tanh());
        let res: Vec<f64> = (0..4).map(|i| xq[i] + gelu(mixed[i])).collect();
        let mean = res.iter().sum::<f64>() / 4.0;
        let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 4.0;
        let want: Vec<f64> = res.iter().map(|r| (r - mean) / (var + 1e-5).sqrt()).collect();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }
}
