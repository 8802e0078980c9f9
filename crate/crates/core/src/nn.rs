//! Layer building blocks over [`Graph`]: linear maps, convolutions,
//! normalization, resampling and positional encodings.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, RowMap, Var};
use crate::params::{he_normal, xavier_uniform, ParamStore};
use crate::tensor::Tensor;

pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.weight"), xavier_uniform(rng, fan_in, fan_out));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

/// `x · W + b` on the `[rows, fan_in]` view.
pub fn linear(g: &Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let w = store.var(g, &format!("{prefix}.weight"));
    let b = store.var(g, &format!("{prefix}.bias"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
}

pub fn layer_norm(g: &Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let gamma = store.var(g, &format!("{prefix}.gamma"));
    let beta = store.var(g, &format!("{prefix}.beta"));
    let n = g.layer_norm(x);
    let y = g.mul_row(n, gamma);
    g.add_row(y, beta)
}

/// Conv weights laid out `[k*k*c_in, c_out]` to match [`im2col_map`] columns.
pub fn init_conv(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, k: usize, c_in: usize, c_out: usize) {
    store.insert(format!("{prefix}.weight"), he_normal(rng, k * k * c_in, c_out));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
}

/// Output side of a `k`-wide, `stride`-step convolution with `k/2` padding.
pub fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    (size + 2 * (k / 2) - k) / stride + 1
}

/// Patch gather for a channels-last `[t, h, w, c]` input. Output rows are
/// `(frame, oy, ox, ky, kx)`; padding replicates the edge pixel so a
/// spatially constant input stays constant.
pub fn im2col_map(t: usize, h: usize, w: usize, k: usize, stride: usize) -> RowMap {
    let pad = (k / 2) as isize;
    let (oh, ow) = (conv_out(h, k, stride), conv_out(w, k, stride));
    let mut b = RowMap::builder(t * h * w);
    for f in 0..t {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        let iy = iy.clamp(0, h as isize - 1) as usize;
                        let ix = ix.clamp(0, w as isize - 1) as usize;
                        b.push((f * h + iy) * w + ix, 1.0);
                        b.end_row();
                    }
                }
            }
        }
    }
    b.finish()
}

/// Frame-wise 2-D convolution on `[t, h, w, c_in]`, returning `[t, oh, ow, c_out]`.
pub fn conv2d(g: &Graph, store: &ParamStore, prefix: &str, x: Var, k: usize, stride: usize) -> Var {
    let s = g.shape(x);
    assert_eq!(s.len(), 4, "conv2d expects [t, h, w, c], got {s:?}");
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (conv_out(h, k, stride), conv_out(w, k, stride));
    let cols = if k == 1 && stride == 1 {
        g.reshape(x, &[t * h * w, c])
    } else {
        let patches = g.gather(x, Rc::new(im2col_map(t, h, w, k, stride)));
        g.reshape(patches, &[t * oh * ow, k * k * c])
    };
    let y = linear(g, store, prefix, cols);
    let c_out = g.shape(y)[1];
    g.reshape(y, &[t, oh, ow, c_out])
}

/// Source taps for resizing one axis with half-pixel centers.
fn axis_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 2]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            let f = x - x0 as f64;
            [(x0, 1.0 - f), (x1, f)]
        })
        .collect()
}

/// Bilinear resize of `[t, h, w, ·]` rows to `[t, oh, ow, ·]`.
pub fn bilinear_map(t: usize, h: usize, w: usize, oh: usize, ow: usize) -> RowMap {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut b = RowMap::builder(t * h * w);
    for f in 0..t {
        for yy in &ty {
            for xx in &tx {
                for &(iy, wy) in yy {
                    for &(ix, wx) in xx {
                        let wgt = wy * wx;
                        if wgt != 0.0 {
                            b.push((f * h + iy) * w + ix, wgt);
                        }
                    }
                }
                b.end_row();
            }
        }
    }
    b.finish()
}

pub fn resize_bilinear(g: &Graph, x: Var, oh: usize, ow: usize) -> Var {
    let s = g.shape(x);
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (oh, ow) {
        return x;
    }
    let y = g.gather(x, Rc::new(bilinear_map(t, h, w, oh, ow)));
    g.reshape(y, &[t, oh, ow, c])
}

/// Plain-buffer bilinear resize of a single-channel `[t, h, w]` stack.
pub fn resize_bilinear_plain(data: &[f64], t: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return data.to_vec();
    }
    bilinear_map(t, h, w, oh, ow).apply(data, 1)
}

/// Fixed 2-D sinusoidal encoding `[h*w, d]`: the first half of the channels
/// encode the row, the second half the column, as interleaved sin/cos pairs
/// over coordinates normalized to `(0, 2π]`.
pub fn sinusoidal_2d(h: usize, w: usize, d: usize) -> Tensor {
    assert!(d % 4 == 0, "positional encoding needs d divisible by 4");
    let half = d / 2;
    let freq = |i: usize| 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let py = (y as f64 + 1.0) / h as f64 * 2.0 * PI;
            let px = (x as f64 + 1.0) / w as f64 * 2.0 * PI;
            let row = &mut out[(y * w + x) * d..(y * w + x + 1) * d];
            for i in 0..half {
                let (vy, vx) = (py / freq(i), px / freq(i));
                if i % 2 == 0 {
                    row[i] = vy.sin();
                    row[half + i] = vx.sin();
                } else {
                    row[i] = vy.cos();
                    row[half + i] = vx.cos();
                }
            }
        }
    }
    Tensor::new(vec![h * w, d], out)
}

/// Repeat a `[rows, d]` tensor `times` along the row axis.
pub fn tile_rows(t: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.numel() * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![t.rows() * times, t.cols()], data)
}

/// Inverted dropout. Without an RNG (inference) it is the identity.
pub struct Dropout {
    pub rate: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl Dropout {
    pub fn inactive() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn training(rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: Some(RefCell::new(rng)),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply(&self, g: &Graph, x: Var) -> Var {
        let Some(rng) = &self.rng else { return x };
        if self.rate <= 0.0 {
            return x;
        }
        let n = g.value(x).numel();
        let keep = 1.0 - self.rate;
        let mut r = rng.borrow_mut();
        let mask: Vec<f64> = (0..n)
            .map(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        g.mul_const(x, Rc::new(mask))
    }
}

/// Per-head projection weights `{prefix}.h{i}.{wq,wk,wv}` (`[d, d/heads]`)
/// and output map `{prefix}.out` (`[d, d]` + bias).
pub fn init_mha(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, heads: usize) {
    let dh = d / heads;
    for h in 0..heads {
        for w in ["wq", "wk", "wv"] {
            store.insert(format!("{prefix}.h{h}.{w}"), xavier_uniform(rng, d, dh));
        }
    }
    init_linear(store, rng, &format!("{prefix}.out"), d, d);
}

/// Scaled dot-product attention for one head, returning the attended values
/// and the post-softmax weights.
pub fn attend(g: &Graph, q: Var, k: Var, v: Var, dropout: &Dropout) -> (Var, Var) {
    let dh = g.shape(q)[1] as f64;
    let s = g.matmul_t(q, k, false, true);
    let s = g.scale(s, 1.0 / dh.sqrt());
    let p = g.softmax(s);
    let pd = dropout.apply(g, p);
    (g.matmul(pd, v), p)
}

/// Standard multi-head attention over `[m, d]` queries and `[n, d]` keys/values.
pub fn mha(g: &Graph, store: &ParamStore, prefix: &str, heads: usize, q: Var, k: Var, v: Var, dropout: &Dropout) -> Var {
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = g.matmul(q, store.var(g, &format!("{prefix}.h{h}.wq")));
            let kh = g.matmul(k, store.var(g, &format!("{prefix}.h{h}.wk")));
            let vh = g.matmul(v, store.var(g, &format!("{prefix}.h{h}.wv")));
            attend(g, qh, kh, vh, dropout).0
        })
        .collect();
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, store, &format!("{prefix}.out"), cat)
}
