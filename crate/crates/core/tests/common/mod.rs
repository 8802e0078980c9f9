//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use rand::Rng;

/// `l · softmax(delta / tau)` evaluated naively in extended steps.
pub fn weights_oracle(delta: &[f64], tau: f64, l: usize) -> Vec<f64> {
    let m = delta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = delta.iter().map(|d| ((d - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| l as f64 * x / z).collect()
}

/// FIFO with a pinned head: timestamps in storage order.
pub struct QueueOracle {
    cap: usize,
    tail: VecDeque<usize>,
}

impl QueueOracle {
    pub fn new(cap: usize) -> Self {
        Self { cap, tail: VecDeque::new() }
    }

    pub fn push(&mut self, ts: usize) {
        if self.cap == 1 {
            return;
        }
        if self.tail.len() + 1 == self.cap {
            self.tail.pop_front();
        }
        self.tail.push_back(ts);
    }

    pub fn storage(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.tail.iter().copied()).collect()
    }

    /// Nearest first, reference last.
    pub fn recency(&self) -> Vec<usize> {
        self.tail.iter().rev().copied().chain(std::iter::once(0)).collect()
    }
}

pub fn random_bits(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> Vec<bool> {
    (0..h * w).map(|_| rng.gen_bool(density)).collect()
}

/// Random blobby mask: union of a few rectangles.
pub fn random_blobs(rng: &mut impl Rng, h: usize, w: usize) -> Vec<bool> {
    let mut bits = vec![false; h * w];
    for _ in 0..rng.gen_range(0..4) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = ((y0 + rng.gen_range(1..h / 2)).min(h), (x0 + rng.gen_range(1..w / 2)).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                bits[y * w + x] = true;
            }
        }
    }
    bits
}

pub fn iou_oracle(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn boundary_points(bits: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let get = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && bits[(y as usize) * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if get(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !get(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Boundary F-measure by pairwise distance checks between boundary pixels.
pub fn f_oracle(a: &[bool], b: &[bool], h: usize, w: usize, tolerance: f64) -> f64 {
    let pa = boundary_points(a, h, w);
    let pb = boundary_points(b, h, w);
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    if pa.is_empty() || pb.is_empty() {
        return 0.0;
    }
    let r = (tolerance * ((h * h + w * w) as f64).sqrt()).ceil() as i64;
    let near = |p: &(i64, i64), set: &[(i64, i64)]| set.iter().any(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2) <= r * r);
    let precision = pa.iter().filter(|p| near(p, &pb)).count() as f64 / pa.len() as f64;
    let recall = pb.iter().filter(|p| near(p, &pa)).count() as f64 / pb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean of the last `ceil(fraction · n)` entries.
pub fn jtr_oracle(j: &[f64], fraction: f64) -> f64 {
    let k = ((fraction * j.len() as f64).ceil() as usize).clamp(1, j.len());
    j[j.len() - k..].iter().sum::<f64>() / k as f64
}
