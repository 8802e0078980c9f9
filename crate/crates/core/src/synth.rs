//! Scripted toy videos: flat-colored shapes moving over a noisy background,
//! with split/shrink/grow/merge/occlude events at chosen frames.
//!
//! Positions and velocities are whole pixels, so a shape's area never changes
//! between events. Objects bounce off the frame border and stay fully inside.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{FrameTensor, MaskSequence, VideoRecord};

pub const FPS: f64 = 5.0;
pub const LONG_FRAMES: usize = 128;
/// Frames an occluder stays in front of its object.
pub const OCCLUDE_FRAMES: usize = 4;
/// Area factors must move at least this far from 1 so events stand out.
pub const MIN_AREA_CHANGE: f64 = 0.15;
const BACKGROUND: f64 = 0.45;
const OCCLUDER: [f64; 3] = [0.12, 0.12, 0.12];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disk,
    Blob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Split,
    Shrink,
    Grow,
    Merge,
    Occlude,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Split => "split",
            EventKind::Shrink => "shrink",
            EventKind::Grow => "grow",
            EventKind::Merge => "merge",
            EventKind::Occlude => "occlude",
        }
    }
}

/// A state change taking effect at 1-based `frame` (range `2..=T`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub frame: usize,
    pub kind: EventKind,
    /// Area factor for split/shrink/grow/merge; covered width fraction for occlude.
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectScript {
    pub shape: ShapeKind,
    /// Radius as a fraction of the shorter frame side.
    pub size: f64,
    /// Initial centre in pixels `(y, x)`.
    pub start: (i64, i64),
    /// Pixels per frame `(dy, dx)`.
    pub velocity: (i64, i64),
    pub color: [f64; 3],
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneScript {
    pub seed: u64,
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: Vec<ObjectScript>,
    /// Standard deviation of the background noise (clipped at 3σ).
    pub noise: f64,
}

impl SceneScript {
    /// 1-based frames at which any object's rendered state changes by script.
    pub fn change_frames(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .objects
            .iter()
            .flat_map(|o| {
                o.events.iter().flat_map(|e| {
                    let mut f = vec![e.frame];
                    if e.kind == EventKind::Occlude {
                        f.push(e.frame + OCCLUDE_FRAMES);
                    }
                    f
                })
            })
            .filter(|&f| f <= self.frames)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn check(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Script("empty video".into()));
        }
        if self.objects.is_empty() || self.objects.len() > 255 {
            return Err(Error::Script(format!("{} objects", self.objects.len())));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.size > 0.0) {
                return Err(Error::Script(format!("object {} has size {}", i + 1, o.size)));
            }
            for e in &o.events {
                if e.frame < 2 || e.frame > self.frames {
                    return Err(Error::Script(format!(
                        "object {} {} event at frame {} outside 2..={}",
                        i + 1,
                        e.kind.as_str(),
                        e.frame,
                        self.frames
                    )));
                }
                let ok = match e.kind {
                    EventKind::Shrink => e.magnitude > 0.0 && e.magnitude <= 1.0 - MIN_AREA_CHANGE,
                    EventKind::Grow => e.magnitude >= 1.0 + MIN_AREA_CHANGE,
                    EventKind::Split | EventKind::Merge => e.magnitude > 0.0,
                    EventKind::Occlude => e.magnitude > 0.0 && e.magnitude < 1.0,
                };
                if !ok {
                    return Err(Error::Script(format!(
                        "object {} {} magnitude {} out of range",
                        i + 1,
                        e.kind.as_str(),
                        e.magnitude
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-frame geometric state of one object.
#[derive(Clone, Copy, Debug)]
struct State {
    /// Linear scale relative to the scripted size.
    scale: f64,
    /// Linear scale of each piece while split.
    split: Option<f64>,
    occluded: Option<(usize, f64)>,
}

fn states(o: &ObjectScript, frames: usize) -> Vec<State> {
    let mut events = o.events.clone();
    events.sort_by_key(|e| e.frame);
    let mut s = State {
        scale: 1.0,
        split: None,
        occluded: None,
    };
    let mut out = Vec::with_capacity(frames);
    let mut next = 0;
    for t in 1..=frames {
        while next < events.len() && events[next].frame == t {
            let e = events[next];
            match e.kind {
                EventKind::Shrink | EventKind::Grow => match s.split.as_mut() {
                    Some(p) => *p *= e.magnitude.sqrt(),
                    None => s.scale *= e.magnitude.sqrt(),
                },
                EventKind::Split => {
                    if s.split.is_none() {
                        s.split = Some(s.scale * (e.magnitude / 2.0).sqrt());
                    }
                }
                EventKind::Merge => {
                    if let Some(p) = s.split.take() {
                        s.scale = p * 2f64.sqrt() * e.magnitude.sqrt();
                    } else {
                        s.scale *= e.magnitude.sqrt();
                    }
                }
                EventKind::Occlude => s.occluded = Some((t + OCCLUDE_FRAMES, e.magnitude)),
            }
            next += 1;
        }
        if matches!(s.occluded, Some((end, _)) if t >= end) {
            s.occluded = None;
        }
        out.push(s);
    }
    out
}

fn inside(shape: ShapeKind, dy: f64, dx: f64, r: f64, phase: f64) -> bool {
    match shape {
        ShapeKind::Rect => dy.abs() <= (0.8 * r).floor() && dx.abs() <= r.floor(),
        ShapeKind::Disk => dy * dy + dx * dx <= r * r,
        ShapeKind::Blob => {
            let theta = dy.atan2(dx);
            let rr = r * (1.0 + 0.25 * (3.0 * theta + phase).sin());
            dy * dy + dx * dx <= rr * rr
        }
    }
}

/// Triangle-wave position in `[lo, hi]`.
fn bounce(p0: i64, v: i64, t: i64, lo: i64, hi: i64) -> i64 {
    let span = hi - lo;
    if span <= 0 {
        return lo;
    }
    let x = (p0 - lo + v * t).rem_euclid(2 * span);
    lo + if x > span { 2 * span - x } else { x }
}

/// Piece centres offset from the object centre while split.
fn piece_offset(piece_r: f64) -> i64 {
    piece_r.ceil() as i64 + 2
}

pub fn generate(script: &SceneScript) -> Result<VideoRecord> {
    script.check()?;
    let (h, w, tn) = (script.height, script.width, script.frames);
    let base_r = |o: &ObjectScript| o.size * h.min(w) as f64;
    let all_states: Vec<Vec<State>> = script.objects.iter().map(|o| states(o, tn)).collect();

    // Margins keep every shape and piece inside the frame at all times.
    let mut paths = Vec::with_capacity(script.objects.len());
    for (i, (o, st)) in script.objects.iter().zip(&all_states).enumerate() {
        let r0 = base_r(o);
        let (mut my, mut mx) = (0i64, 0i64);
        for s in st {
            let r = r0 * s.scale * 1.25;
            let (ey, ex) = match s.split {
                Some(p) => {
                    let pr = r0 * p * 1.25;
                    (pr.ceil() as i64, piece_offset(r0 * p * 1.25) + pr.ceil() as i64)
                }
                None => (r.ceil() as i64, r.ceil() as i64),
            };
            my = my.max(ey);
            mx = mx.max(ex);
        }
        let (lo_y, hi_y) = (my, h as i64 - 1 - my);
        let (lo_x, hi_x) = (mx, w as i64 - 1 - mx);
        if lo_y > hi_y || lo_x > hi_x {
            return Err(Error::Script(format!("object {} does not fit in the frame", i + 1)));
        }
        let path: Vec<(i64, i64)> = (0..tn as i64)
            .map(|t| {
                (
                    bounce(o.start.0.clamp(lo_y, hi_y), o.velocity.0, t, lo_y, hi_y),
                    bounce(o.start.1.clamp(lo_x, hi_x), o.velocity.1, t, lo_x, hi_x),
                )
            })
            .collect();
        paths.push(path);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let noise = Normal::new(0.0, script.noise.max(0.0)).map_err(|e| Error::Script(e.to_string()))?;
    let bound = 3.0 * script.noise.max(0.0);
    let phases: Vec<f64> = script.objects.iter().map(|_| rng.gen::<f64>() * std::f64::consts::TAU).collect();

    let hw = h * w;
    let mut pixels = vec![0.0; tn * 3 * hw];
    let mut masks = vec![vec![0.0; tn * hw]; script.objects.len()];
    let mut label = vec![0u8; hw];
    let mut occluder = vec![false; hw];
    for t in 0..tn {
        label.iter_mut().for_each(|l| *l = 0);
        occluder.iter_mut().for_each(|o| *o = false);
        for (oi, o) in script.objects.iter().enumerate() {
            let s = all_states[oi][t];
            let (cy, cx) = paths[oi][t];
            let r0 = base_r(o);
            let centres: Vec<(i64, i64, f64)> = match s.split {
                Some(p) => {
                    let pr = r0 * p;
                    let off = piece_offset(pr * 1.25);
                    vec![(cy, cx - off, pr), (cy, cx + off, pr)]
                }
                None => vec![(cy, cx, r0 * s.scale)],
            };
            for y in 0..h {
                for x in 0..w {
                    let hit = centres
                        .iter()
                        .any(|&(py, px, r)| inside(o.shape, y as f64 - py as f64, x as f64 - px as f64, r, phases[oi]));
                    if hit {
                        label[y * w + x] = (oi + 1) as u8;
                    }
                }
            }
            if let Some((_, frac)) = s.occluded {
                // Vertical bar covering the left `frac` of the object's extent.
                let ext = centres.iter().map(|&(_, px, r)| (px as f64 + r * 1.25).ceil() as i64).max().unwrap_or(cx);
                let left = centres.iter().map(|&(_, px, r)| (px as f64 - r * 1.25).floor() as i64).min().unwrap_or(cx);
                let right = left + ((ext - left) as f64 * frac).round() as i64;
                let top = centres.iter().map(|&(py, _, r)| (py as f64 - r * 1.25).floor() as i64).min().unwrap_or(cy);
                let bottom = centres.iter().map(|&(py, _, r)| (py as f64 + r * 1.25).ceil() as i64).max().unwrap_or(cy);
                for y in top.max(0)..=bottom.min(h as i64 - 1) {
                    for x in left.max(0)..right.min(w as i64) {
                        occluder[y as usize * w + x as usize] = true;
                    }
                }
            }
        }
        for i in 0..hw {
            let base = if occluder[i] {
                OCCLUDER
            } else if label[i] > 0 {
                script.objects[label[i] as usize - 1].color
            } else {
                [BACKGROUND; 3]
            };
            for (c, b) in base.iter().enumerate() {
                let n = if bound > 0.0 { noise.sample(&mut rng).clamp(-bound, bound) } else { 0.0 };
                pixels[(t * 3 + c) * hw + i] = (b + n).clamp(0.0, 1.0);
            }
            if label[i] > 0 && !occluder[i] {
                masks[label[i] as usize - 1][t * hw + i] = 1.0;
            }
        }
    }

    for (oi, m) in masks.iter().enumerate() {
        if !m[..hw].iter().any(|&v| v > 0.0) {
            return Err(Error::Script(format!("object {} is not visible in frame 1", oi + 1)));
        }
        if !m[(tn - 1) * hw..].iter().any(|&v| v > 0.0) {
            return Err(Error::Script(format!("object {} vanishes before the last frame", oi + 1)));
        }
    }

    let frames = FrameTensor::new(Tensor::new(vec![tn, 3, h, w], pixels))?;
    let gt = masks
        .into_iter()
        .enumerate()
        .map(|(i, m)| MaskSequence::binary(Tensor::new(vec![tn, h, w], m), (i + 1) as u8))
        .collect::<Result<Vec<_>>>()?;
    let mut video = VideoRecord::new(script.name.clone(), frames, gt, FPS)?;
    video.metadata.insert("seed".into(), script.seed.to_string());
    video.metadata.insert("events".into(), event_log(script));
    Ok(video)
}

/// `object:kind@frame:magnitude` entries separated by `;`.
pub fn event_log(script: &SceneScript) -> String {
    let mut parts = Vec::new();
    for (i, o) in script.objects.iter().enumerate() {
        for e in &o.events {
            parts.push(format!("{}:{}@{}:{:.3}", i + 1, e.kind.as_str(), e.frame, e.magnitude));
        }
    }
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join(";")
    }
}

/// Knobs for benchmark generation.
#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyProfile {
    pub resolution: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub val_fraction: f64,
    /// Validation videos with `LONG_FRAMES` frames.
    pub lng_quota: usize,
    /// Validation videos with tiny objects.
    pub sm_quota: usize,
    pub multi_object_prob: f64,
    pub max_speed: i64,
    pub events_per_object: (usize, usize),
    pub noise: f64,
}

impl Default for DifficultyProfile {
    fn default() -> Self {
        Self {
            resolution: 64,
            min_frames: 16,
            max_frames: 28,
            val_fraction: 0.2,
            lng_quota: 1,
            sm_quota: 1,
            multi_object_prob: 0.25,
            max_speed: 3,
            events_per_object: (1, 2),
            noise: 0.04,
        }
    }
}

const COLORS: [[f64; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.30],
    [0.20, 0.40, 0.95],
    [0.95, 0.85, 0.20],
    [0.80, 0.30, 0.90],
    [0.20, 0.90, 0.90],
];

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Regular,
    Long,
    Small,
}

fn random_script(rng: &mut ChaCha8Rng, name: String, p: &DifficultyProfile, kind: Kind) -> SceneScript {
    let res = p.resolution;
    let frames = match kind {
        Kind::Long => LONG_FRAMES,
        _ => rng.gen_range(p.min_frames..=p.max_frames.max(p.min_frames)),
    };
    let n_obj = if kind != Kind::Small && rng.gen::<f64>() < p.multi_object_prob { 2 } else { 1 };
    let mut colors = COLORS.to_vec();
    colors.shuffle(rng);
    let shapes = [ShapeKind::Rect, ShapeKind::Disk, ShapeKind::Blob];
    let band = res as i64 / n_obj as i64;
    let objects = (0..n_obj)
        .map(|i| {
            let size = match kind {
                Kind::Small => 1.6 / res as f64,
                _ => rng.gen_range(0.08..0.13),
            };
            let mut velocity = (0, 0);
            while velocity == (0, 0) {
                velocity = (
                    rng.gen_range(-p.max_speed..=p.max_speed) / n_obj as i64,
                    rng.gen_range(-p.max_speed..=p.max_speed),
                );
            }
            let events = if kind == Kind::Small {
                Vec::new()
            } else {
                scripted_events(rng, frames, p)
            };
            let jitter = |c: f64, rng: &mut ChaCha8Rng| (c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
            let base = colors[i % colors.len()];
            SceneScript::object(
                *shapes.choose(rng).unwrap(),
                size,
                (band * i as i64 + band / 2, rng.gen_range(0..res as i64)),
                velocity,
                [jitter(base[0], rng), jitter(base[1], rng), jitter(base[2], rng)],
                events,
            )
        })
        .collect();
    SceneScript {
        seed: rng.gen(),
        name,
        height: res,
        width: res,
        frames,
        objects,
        noise: p.noise,
    }
}

fn scripted_events(rng: &mut ChaCha8Rng, frames: usize, p: &DifficultyProfile) -> Vec<Event> {
    let (lo, hi) = p.events_per_object;
    let n = rng.gen_range(lo..=hi.max(lo));
    let mut used = Vec::new();
    let mut split = false;
    let mut events = Vec::new();
    for _ in 0..n {
        if frames < 4 {
            break;
        }
        let frame = rng.gen_range(3..frames);
        if used.contains(&frame) {
            continue;
        }
        used.push(frame);
        let kind = *[EventKind::Split, EventKind::Shrink, EventKind::Grow, EventKind::Occlude, EventKind::Merge]
            .choose(rng)
            .unwrap();
        let magnitude = match kind {
            EventKind::Split => rng.gen_range(0.6..1.0),
            EventKind::Shrink => rng.gen_range(0.45..0.7),
            EventKind::Grow => rng.gen_range(1.3..1.6),
            EventKind::Occlude => rng.gen_range(0.3..0.6),
            EventKind::Merge => 1.0,
        };
        split |= kind == EventKind::Split;
        events.push(Event { frame, kind, magnitude });
    }
    events.sort_by_key(|e| e.frame);
    // A merge only means something after a split.
    if !split {
        for e in &mut events {
            if e.kind == EventKind::Merge {
                e.kind = EventKind::Grow;
                e.magnitude = 1.4;
            }
        }
    }
    events
}

impl SceneScript {
    pub fn object(
        shape: ShapeKind,
        size: f64,
        start: (i64, i64),
        velocity: (i64, i64),
        color: [f64; 3],
        events: Vec<Event>,
    ) -> ObjectScript {
        ObjectScript {
            shape,
            size,
            start,
            velocity,
            color,
            events,
        }
    }

    /// One object on a `res × res` canvas.
    pub fn single(seed: u64, res: usize, frames: usize, object: ObjectScript) -> Self {
        Self {
            seed,
            name: format!("scene{seed}"),
            height: res,
            width: res,
            frames,
            objects: vec![object],
            noise: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSplit {
    pub train: Vec<SceneScript>,
    pub val: Vec<SceneScript>,
}

pub fn make_benchmark(seed: u64, n_videos: usize, profile: &DifficultyProfile) -> Result<BenchmarkSplit> {
    if n_videos < 2 {
        return Err(Error::Config(format!("a benchmark needs at least 2 videos, got {n_videos}")));
    }
    let n_val = ((n_videos as f64 * profile.val_fraction).round() as usize).clamp(1, n_videos - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..n_videos - n_val)
        .map(|i| random_script(&mut rng, format!("train{i:03}"), profile, Kind::Regular))
        .collect();
    let lng = profile.lng_quota.min(n_val);
    let sm = profile.sm_quota.min(n_val - lng);
    let val = (0..n_val)
        .map(|i| {
            let kind = if i < lng {
                Kind::Long
            } else if i < lng + sm {
                Kind::Small
            } else {
                Kind::Regular
            };
            random_script(&mut rng, format!("val{i:03}"), profile, kind)
        })
        .collect();
    Ok(BenchmarkSplit { train, val })
}

/// Render scripts in parallel, preserving order.
pub fn generate_all(scripts: &[SceneScript]) -> Result<Vec<VideoRecord>> {
    scripts.par_iter().map(generate).collect()
}

/// Per-object metadata lines for the on-disk metadata file.
pub fn metadata_lines(video: &VideoRecord) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("duration_sec".into(), format!("{}", video.duration_sec));
    m.insert("fps".into(), format!("{}", video.fps));
    m.insert("frames".into(), video.len().to_string());
    m.insert("object_count".into(), video.gt_masks.len().to_string());
    for (i, a) in video.object_area_fractions().iter().enumerate() {
        m.insert(format!("object_area.{}", i + 1), format!("{a}"));
    }
    for (k, v) in &video.metadata {
        m.insert(k.clone(), v.clone());
    }
    m
}
