use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::video_loss;
use crate::autograd::{Gradients, Graph};
use crate::config::{LrMode, LrSchedule, ModelConfig};
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::model::Model;
use crate::nn::Dropout;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::types::VideoRecord;

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Update every parameter that has a gradient and is not frozen.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        lr_of: impl Fn(&str) -> f64,
        frozen: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in &grads.by_name {
            if frozen(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else { continue };
            let lr = lr_of(name);
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pi);
            }
        }
    }
}

/// Learning rate of parameter `name` at `step` of a `total`-step run.
pub fn learning_rate(cfg: &ModelConfig, name: &str, step: usize, total: usize) -> f64 {
    let base = match cfg.lr_mode {
        LrMode::Uniform => cfg.lr_uniform,
        LrMode::Split if ParamGroup::of(name) == ParamGroup::Backbone => cfg.lr_backbone,
        LrMode::Split => cfg.lr_rest,
    };
    match cfg.lr_schedule {
        LrSchedule::Constant => base,
        LrSchedule::Step => {
            let passed = cfg
                .lr_step_fractions
                .iter()
                .filter(|&&f| step as f64 >= f * total as f64)
                .count();
            base * 0.1f64.powi(passed as i32)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Loss of each step, averaged over the objects of the sampled window.
    pub losses: Vec<LossBreakdown>,
}

impl TrainReport {
    pub fn loss_curve(&self) -> String {
        self.losses.iter().enumerate().map(|(i, b)| b.log_line(i + 1) + "\n").collect()
    }
}

/// Draw a window of at most `video_length` frames whose first frame shows
/// every kept object. Objects absent from the window start are dropped.
fn sample_window(rng: &mut ChaCha8Rng, data: &[VideoRecord], length: usize) -> Option<VideoRecord> {
    for _ in 0..32 {
        let v = &data[rng.gen_range(0..data.len())];
        if v.len() < 2 {
            continue;
        }
        let len = length.min(v.len());
        let start = rng.gen_range(0..=v.len() - len);
        let mut w = v.window(start, len);
        w.gt_masks.retain(|m| m.frame(0).iter().any(|&p| p > 0.5));
        if !w.gt_masks.is_empty() {
            return Some(w);
        }
    }
    None
}

/// Train `model` in place. `on_step` sees each step's loss as it happens.
pub fn train(
    model: &mut Model,
    data: &[VideoRecord],
    opts: TrainOptions,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainReport> {
    model.cfg.ensure_valid()?;
    if opts.steps > 0 && data.is_empty() {
        return Err(Error::Input("no training videos".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = AdamW::new(model.cfg.weight_decay);
    let mut report = TrainReport::default();
    let freeze = model.cfg.freeze_rte;
    for step in 1..=opts.steps {
        let video = sample_window(&mut rng, data, model.cfg.video_length)
            .ok_or_else(|| Error::Input("could not sample a training window with a visible object".into()))?;
        let dropout = if model.cfg.dropout_rate > 0.0 {
            Dropout::training(model.cfg.dropout_rate, ChaCha8Rng::seed_from_u64(rng.gen()))
        } else {
            Dropout::inactive()
        };
        let g = Graph::new();
        let out = video_loss(Some(&g), &model.params, &model.cfg, &video, &dropout, None)?;
        if !out.breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: out.breakdown.log_line(step),
            });
        }
        if let Some(total) = out.total {
            let grads = g.backward(total);
            let cfg = &model.cfg;
            adam.step(
                &mut model.params,
                &grads,
                |n| learning_rate(cfg, n, step - 1, opts.steps),
                |n| freeze && ParamGroup::of(n) == ParamGroup::Rte,
            );
        }
        on_step(step, &out.breakdown);
        report.losses.push(out.breakdown);
    }
    Ok(report)
}
