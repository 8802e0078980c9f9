use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::video_loss;
use crate::autograd::Graph;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::Model;
use crate::nn::Dropout;
use crate::params::{ParamGroup, ParamStore};
use crate::synth::{generate, Event, EventKind, SceneScript, ShapeKind};
use crate::types::VideoRecord;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Minimum number of sampled scalars.
    pub samples: usize,
    /// Central-difference step.
    pub step: f64,
    /// Magnitude below which both gradients count as zero.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            samples: 200,
            step: 1e-4,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub group: ParamGroup,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub loss: f64,
    pub samples: Vec<GradSample>,
    pub max_rel_error: f64,
    /// Sampled scalars per group.
    pub per_group: BTreeMap<ParamGroup, usize>,
    /// L2 norm of the analytic gradient over all RTE parameters.
    pub rte_grad_norm: f64,
    /// Memory size seen by the last clip.
    pub max_memory_size: usize,
}

impl GradcheckReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "loss={:.6e}\nsamples={}\nmax_rel_error={:.3e}\nrte_grad_norm={:.3e}\nmax_memory_size={}\n",
            self.loss,
            self.samples.len(),
            self.max_rel_error,
            self.rte_grad_norm,
            self.max_memory_size
        );
        for (g, n) in &self.per_group {
            let worst = self
                .samples
                .iter()
                .filter(|x| x.group == *g)
                .map(|x| x.rel_error)
                .fold(0.0, f64::max);
            s.push_str(&format!("group.{g}: n={n} max_rel_error={worst:.3e}\n"));
        }
        s
    }
}

/// Five-frame clip of one shrinking, moving disk; with two-frame clips the
/// second clip matches against two memory entries.
pub fn gradcheck_video(cfg: &ModelConfig, seed: u64) -> Result<VideoRecord> {
    let res = cfg.input_resolution as i64;
    let obj = SceneScript::object(
        ShapeKind::Disk,
        0.22,
        (res / 2, res / 3),
        (1, 2),
        [0.9, 0.3, 0.2],
        vec![Event {
            frame: 3,
            kind: EventKind::Shrink,
            magnitude: 0.6,
        }],
    );
    generate(&SceneScript::single(seed, cfg.input_resolution, 5, obj))
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compare analytic and central-difference gradients of the full video loss.
/// Memory contents are replayed from the analytic pass, since the model
/// treats them as constants.
pub fn gradcheck(cfg: &ModelConfig, seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut cfg = cfg.clone();
    cfg.dropout_rate = 0.0;
    let model = Model::init(cfg.clone(), seed)?;
    let video = gradcheck_video(&cfg, seed)?;

    let g = Graph::new();
    let out = video_loss(Some(&g), &model.params, &cfg, &video, &Dropout::inactive(), None)?;
    let total = out.total.expect("graph was supplied");
    let grads = g.backward(total);
    let logs = out.memory_logs;
    let max_memory_size = crate::model::clip_windows(video.len(), cfg.clip_length)
        .len()
        .min(cfg.bank_size);

    let rte_grad_norm = grads
        .by_name
        .iter()
        .filter(|(n, _)| ParamGroup::of(n) == ParamGroup::Rte)
        .flat_map(|(_, t)| t.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();

    // Stratified draw: an equal share per group present, topped up at random.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut pools: BTreeMap<ParamGroup, Vec<(String, usize)>> = BTreeMap::new();
    for (name, t) in &grads.by_name {
        let pool = pools.entry(ParamGroup::of(name)).or_default();
        pool.extend((0..t.numel()).map(|i| (name.clone(), i)));
    }
    let share = opts.samples.div_ceil(pools.len().max(1));
    let mut picked = Vec::new();
    let mut rest = Vec::new();
    for pool in pools.values_mut() {
        pool.shuffle(&mut rng);
        let k = share.min(pool.len());
        picked.extend(pool.drain(..k));
        rest.append(pool);
    }
    rest.shuffle(&mut rng);
    let missing = opts.samples.saturating_sub(picked.len());
    picked.extend(rest.into_iter().take(missing));

    let loss_at = |params: &ParamStore| -> Result<f64> {
        let r = video_loss(None, params, &cfg, &video, &Dropout::inactive(), Some(&logs))?;
        Ok(r.breakdown.total)
    };
    let samples: Vec<GradSample> = picked
        .par_iter()
        .map(|(name, i)| {
            let mut p = model.params.clone();
            let x0 = p.expect(name).data()[*i];
            p.get_mut(name).expect("sampled name").data_mut()[*i] = x0 + opts.step;
            let up = loss_at(&p)?;
            p.get_mut(name).expect("sampled name").data_mut()[*i] = x0 - opts.step;
            let down = loss_at(&p)?;
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = grads.get(name).expect("sampled from gradients").data()[*i];
            Ok(GradSample {
                name: name.clone(),
                index: *i,
                group: ParamGroup::of(name),
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, opts.floor),
            })
        })
        .collect::<Result<_>>()?;

    let mut per_group = BTreeMap::new();
    for s in &samples {
        *per_group.entry(s.group).or_insert(0) += 1;
    }
    Ok(GradcheckReport {
        loss: out.breakdown.total,
        max_rel_error: samples.iter().map(|s| s.rel_error).fold(0.0, f64::max),
        samples,
        per_group,
        rte_grad_norm,
        max_memory_size,
    })
}
