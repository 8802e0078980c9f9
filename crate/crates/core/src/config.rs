//! Model and training configuration.
//!
//! The on-disk form is flat text: one `key = value` per line, `#` starts a
//! comment, and unknown keys are rejected.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How per-frame mask change is measured for loss reweighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaVariant {
    MaskedArea,
    ConnectedComponents,
    CenterOfMass,
}

/// Which loss terms receive the per-frame transformation weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReweightTargets {
    FocalOnly,
    DiceOnly,
    Both,
    None,
}

/// Relative time encoding applied to matching scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RteMode {
    /// Scores multiplied elementwise by the expanded embedding.
    Multiplicative,
    /// Scores offset by a learnable per-entry bias.
    Additive,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrMode {
    /// Separate rates for the backbone and the rest of the model.
    Split,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Divide by 10 at each configured fraction of the run.
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rounding {
    Ceil,
    Floor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CentroidUnits {
    Pixels,
    /// Coordinates divided by the image height/width.
    Normalized,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} value `{other}` (expected one of: {})",
                        stringify!($ty),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(DeltaVariant {
    MaskedArea => "masked_area",
    ConnectedComponents => "connected_components",
    CenterOfMass => "center_of_mass",
});
keyword_enum!(ReweightTargets {
    FocalOnly => "focal_only",
    DiceOnly => "dice_only",
    Both => "both",
    None => "none",
});
keyword_enum!(RteMode {
    Multiplicative => "multiplicative",
    Additive => "additive",
    Off => "off",
});
keyword_enum!(LrMode { Split => "split", Uniform => "uniform" });
keyword_enum!(LrSchedule { Constant => "constant", Step => "step" });
keyword_enum!(Rounding { Ceil => "ceil", Floor => "floor" });
keyword_enum!(CentroidUnits { Pixels => "pixels", Normalized => "normalized" });

/// All model, loss, training and evaluation knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frames per training sample.
    pub video_length: usize,
    pub clip_length: usize,
    pub bank_size: usize,
    /// Matching scales, taken from the deepest stride upward (32, then 16, ...).
    pub num_scales: usize,
    pub hidden_dim: usize,
    pub match_heads: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub ffn_ratio: usize,
    pub dropout_rate: f64,
    pub tau: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub delta_variant: DeltaVariant,
    pub reweight_targets: ReweightTargets,
    /// Square input side in pixels.
    pub input_resolution: usize,
    /// Channel count of each stride-2 backbone stage (strides 2, 4, 8, ...).
    pub backbone_channels: Vec<usize>,
    /// Stride of the finest pyramid level; the mask head reads this level.
    pub mask_stride: usize,
    pub rte_mode: RteMode,
    pub freeze_rte: bool,
    pub focal_gamma: f64,
    /// Positive-class weight; a negative value disables class balancing.
    pub focal_alpha: f64,
    pub lr_mode: LrMode,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub lr_uniform: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub lr_step_fractions: Vec<f64>,
    pub connectivity: u8,
    pub centroid_units: CentroidUnits,
    pub jtr_fraction: f64,
    pub jtr_rounding: Rounding,
    /// Boundary match radius as a fraction of the image diagonal.
    pub boundary_tolerance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            video_length: 12,
            clip_length: 2,
            bank_size: 7,
            num_scales: 2,
            hidden_dim: 256,
            match_heads: 4,
            decoder_blocks: 6,
            decoder_heads: 8,
            ffn_ratio: 4,
            dropout_rate: 0.10,
            tau: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            delta_variant: DeltaVariant::MaskedArea,
            reweight_targets: ReweightTargets::FocalOnly,
            input_resolution: 64,
            backbone_channels: vec![16, 32, 64, 128, 256],
            mask_stride: 8,
            rte_mode: RteMode::Multiplicative,
            freeze_rte: false,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            lr_mode: LrMode::Split,
            lr_backbone: 1e-5,
            lr_rest: 2e-4,
            lr_uniform: 2e-5,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Constant,
            lr_step_fractions: vec![0.4, 0.8],
            connectivity: 4,
            centroid_units: CentroidUnits::Pixels,
            jtr_fraction: 0.25,
            jtr_rounding: Rounding::Ceil,
            boundary_tolerance: 0.008,
        }
    }
}

/// Every recognized key, in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "video_length",
    "clip_length",
    "bank_size",
    "num_scales",
    "hidden_dim",
    "match_heads",
    "match_head_dim",
    "decoder_blocks",
    "decoder_heads",
    "ffn_ratio",
    "dropout_rate",
    "tau",
    "alpha1",
    "alpha2",
    "delta_variant",
    "reweight_targets",
    "input_resolution",
    "backbone_channels",
    "mask_stride",
    "rte_mode",
    "freeze_rte",
    "focal_gamma",
    "focal_alpha",
    "lr_mode",
    "lr_backbone",
    "lr_rest",
    "lr_uniform",
    "weight_decay",
    "lr_schedule",
    "lr_step_fractions",
    "connectivity",
    "centroid_units",
    "jtr_fraction",
    "jtr_rounding",
    "boundary_tolerance",
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub fn match_head_dim(&self) -> usize {
        if self.match_heads == 0 {
            0
        } else {
            self.hidden_dim / self.match_heads
        }
    }

    /// Focal class-balance factor, `None` when balancing is disabled.
    pub fn focal_balance(&self) -> Option<f64> {
        (self.focal_alpha >= 0.0).then_some(self.focal_alpha)
    }

    /// Backbone stride of stage `i` (0-based).
    pub fn stage_stride(i: usize) -> usize {
        2usize << i
    }

    pub fn deepest_stride(&self) -> usize {
        Self::stage_stride(self.backbone_channels.len().saturating_sub(1))
    }

    /// Matching strides, coarse to fine (e.g. `[32, 16]`).
    pub fn match_strides(&self) -> Vec<usize> {
        let deepest = self.deepest_stride();
        (0..self.num_scales).map(|i| deepest >> i).collect()
    }

    /// Pyramid strides, coarse to fine, ending at `mask_stride`.
    pub fn pyramid_strides(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut s = self.deepest_stride();
        while s >= self.mask_stride && s >= 2 {
            out.push(s);
            s /= 2;
        }
        out
    }

    /// All backbone strides whose features some module consumes.
    pub fn used_strides(&self) -> Vec<usize> {
        let mut v = self.pyramid_strides();
        for s in self.match_strides() {
            if !v.contains(&s) {
                v.push(s);
            }
        }
        v.sort_unstable_by(|a, b| b.cmp(a));
        v
    }

    /// Backbone channel count at a stride.
    pub fn channels_at(&self, stride: usize) -> Option<usize> {
        (0..self.backbone_channels.len())
            .find(|&i| Self::stage_stride(i) == stride)
            .map(|i| self.backbone_channels[i])
    }

    /// Number of clips after the reference frame for a `frames`-long video.
    pub fn num_clips(frames: usize, clip_length: usize) -> usize {
        frames.saturating_sub(1).div_ceil(clip_length.max(1))
    }

    /// Check every invariant; never fails, reports each violation.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.clip_length < 1 {
            v.push("clip_length must be at least 1".to_string());
        }
        if self.bank_size < 1 {
            v.push("bank_size must be at least 1".to_string());
        }
        if self.video_length < 2 {
            v.push("video_length must be at least 2".to_string());
        }
        if self.hidden_dim == 0 {
            v.push("hidden_dim must be positive".to_string());
        }
        if self.match_heads == 0 {
            v.push("match_heads must be positive".to_string());
        } else if self.hidden_dim % self.match_heads != 0 {
            v.push("hidden_dim not divisible by match_heads".to_string());
        }
        if self.decoder_heads == 0 {
            v.push("decoder_heads must be positive".to_string());
        } else if self.hidden_dim % self.decoder_heads != 0 {
            v.push("hidden_dim not divisible by decoder_heads".to_string());
        }
        if self.hidden_dim % 4 != 0 {
            v.push("hidden_dim must be a multiple of 4 for 2-D sinusoidal positional encoding".to_string());
        }
        if self.decoder_blocks == 0 {
            v.push("decoder_blocks must be positive".to_string());
        }
        if self.ffn_ratio == 0 {
            v.push("ffn_ratio must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            v.push("dropout_rate must lie in [0, 1)".to_string());
        }
        if !(self.tau > 0.0) {
            v.push("tau must be positive".to_string());
        }
        if !(self.alpha1 >= 0.0) {
            v.push("alpha1 must be nonnegative".to_string());
        }
        if !(self.alpha2 >= 0.0) {
            v.push("alpha2 must be nonnegative".to_string());
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            v.push("backbone_channels must be a non-empty list of positive counts".to_string());
        }
        if self.num_scales < 1 {
            v.push("num_scales must be at least 1".to_string());
        } else if self.num_scales > self.backbone_channels.len() {
            v.push("num_scales exceeds the number of backbone stages".to_string());
        }
        if !self.mask_stride.is_power_of_two()
            || self.mask_stride < 2
            || self.mask_stride > self.deepest_stride()
        {
            v.push("mask_stride must be a power of two between 2 and the deepest backbone stride".to_string());
        }
        if self.input_resolution == 0 || self.input_resolution % self.deepest_stride().max(1) != 0 {
            v.push("input_resolution must be a positive multiple of the deepest backbone stride".to_string());
        }
        if !(self.focal_gamma >= 0.0) {
            v.push("focal_gamma must be nonnegative".to_string());
        }
        if self.focal_alpha > 1.0 {
            v.push("focal_alpha must be at most 1 (negative disables balancing)".to_string());
        }
        for (k, lr) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_rest", self.lr_rest),
            ("lr_uniform", self.lr_uniform),
        ] {
            if !(lr >= 0.0) {
                v.push(format!("{k} must be nonnegative"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            v.push("weight_decay must be nonnegative".to_string());
        }
        if self.lr_step_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            v.push("lr_step_fractions must lie in [0, 1]".to_string());
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            v.push("connectivity must be 4 or 8".to_string());
        }
        if !(self.jtr_fraction > 0.0 && self.jtr_fraction <= 1.0) {
            v.push("jtr_fraction must lie in (0, 1]".to_string());
        }
        if !(self.boundary_tolerance >= 0.0) {
            v.push("boundary_tolerance must be nonnegative".to_string());
        }
        v
    }

    /// `Err` with every violation joined, for call sites that need a hard stop.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "video_length" => self.video_length = parse_num(key, value)?,
            "clip_length" => self.clip_length = parse_num(key, value)?,
            "bank_size" => self.bank_size = parse_num(key, value)?,
            "num_scales" => self.num_scales = parse_num(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_num(key, value)?,
            "match_heads" => self.match_heads = parse_num(key, value)?,
            "match_head_dim" => {
                // Derived; accepted only when consistent.
                let dh: usize = parse_num(key, value)?;
                if dh != self.match_head_dim() {
                    return Err(Error::Config(format!(
                        "match_head_dim = {dh} disagrees with hidden_dim / match_heads = {}",
                        self.match_head_dim()
                    )));
                }
            }
            "decoder_blocks" => self.decoder_blocks = parse_num(key, value)?,
            "decoder_heads" => self.decoder_heads = parse_num(key, value)?,
            "ffn_ratio" => self.ffn_ratio = parse_num(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "alpha1" => self.alpha1 = parse_num(key, value)?,
            "alpha2" => self.alpha2 = parse_num(key, value)?,
            "delta_variant" => self.delta_variant = value.parse()?,
            "reweight_targets" => self.reweight_targets = value.parse()?,
            "input_resolution" => self.input_resolution = parse_num(key, value)?,
            "backbone_channels" => self.backbone_channels = parse_list(key, value)?,
            "mask_stride" => self.mask_stride = parse_num(key, value)?,
            "rte_mode" => self.rte_mode = value.parse()?,
            "freeze_rte" => self.freeze_rte = parse_num(key, value)?,
            "focal_gamma" => self.focal_gamma = parse_num(key, value)?,
            "focal_alpha" => self.focal_alpha = parse_num(key, value)?,
            "lr_mode" => self.lr_mode = value.parse()?,
            "lr_backbone" => self.lr_backbone = parse_num(key, value)?,
            "lr_rest" => self.lr_rest = parse_num(key, value)?,
            "lr_uniform" => self.lr_uniform = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "lr_step_fractions" => self.lr_step_fractions = parse_list(key, value)?,
            "connectivity" => self.connectivity = parse_num(key, value)?,
            "centroid_units" => self.centroid_units = value.parse()?,
            "jtr_fraction" => self.jtr_fraction = parse_num(key, value)?,
            "jtr_rounding" => self.jtr_rounding = value.parse()?,
            "boundary_tolerance" => self.boundary_tolerance = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "video_length" => self.video_length.to_string(),
            "clip_length" => self.clip_length.to_string(),
            "bank_size" => self.bank_size.to_string(),
            "num_scales" => self.num_scales.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "match_heads" => self.match_heads.to_string(),
            "match_head_dim" => self.match_head_dim().to_string(),
            "decoder_blocks" => self.decoder_blocks.to_string(),
            "decoder_heads" => self.decoder_heads.to_string(),
            "ffn_ratio" => self.ffn_ratio.to_string(),
            "dropout_rate" => self.dropout_rate.to_string(),
            "tau" => self.tau.to_string(),
            "alpha1" => self.alpha1.to_string(),
            "alpha2" => self.alpha2.to_string(),
            "delta_variant" => self.delta_variant.to_string(),
            "reweight_targets" => self.reweight_targets.to_string(),
            "input_resolution" => self.input_resolution.to_string(),
            "backbone_channels" => join(&self.backbone_channels),
            "mask_stride" => self.mask_stride.to_string(),
            "rte_mode" => self.rte_mode.to_string(),
            "freeze_rte" => self.freeze_rte.to_string(),
            "focal_gamma" => self.focal_gamma.to_string(),
            "focal_alpha" => self.focal_alpha.to_string(),
            "lr_mode" => self.lr_mode.to_string(),
            "lr_backbone" => self.lr_backbone.to_string(),
            "lr_rest" => self.lr_rest.to_string(),
            "lr_uniform" => self.lr_uniform.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "lr_schedule" => self.lr_schedule.to_string(),
            "lr_step_fractions" => join(&self.lr_step_fractions),
            "connectivity" => self.connectivity.to_string(),
            "centroid_units" => self.centroid_units.to_string(),
            "jtr_fraction" => self.jtr_fraction.to_string(),
            "jtr_rounding" => self.jtr_rounding.to_string(),
            "boundary_tolerance" => self.boundary_tolerance.to_string(),
            _ => return None,
        })
    }

    /// Parse flat `key = value` text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut deferred_head_dim = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let key = key.trim();
            if key == "match_head_dim" {
                // Checked after hidden_dim/match_heads are known.
                deferred_head_dim = Some(value.trim().to_string());
                continue;
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        }
        if let Some(v) = deferred_head_dim {
            cfg.set("match_head_dim", &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    /// Small double-precision setup used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            video_length: 5,
            input_resolution: 32,
            hidden_dim: 16,
            match_heads: 2,
            decoder_heads: 2,
            decoder_blocks: 6,
            ffn_ratio: 2,
            backbone_channels: vec![4, 6, 8, 12, 16],
            dropout_rate: 0.0,
            ..Self::default()
        }
    }

    /// The desk-scale training setup (~0.5M parameters, 64×64 input).
    pub fn desk() -> Self {
        Self {
            hidden_dim: 64,
            match_heads: 4,
            decoder_heads: 4,
            ffn_ratio: 2,
            backbone_channels: vec![8, 16, 32, 64, 128],
            lr_mode: LrMode::Uniform,
            lr_uniform: 1e-4,
            dropout_rate: 0.0,
            ..Self::default()
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert_eq!(ModelConfig::default().validate(), Vec::<String>::new());
        assert!(ModelConfig::tiny().validate().is_empty());
        assert!(ModelConfig::desk().validate().is_empty());
    }

    #[test]
    fn head_divisibility_violation() {
        let cfg = ModelConfig {
            hidden_dim: 256,
            match_heads: 5,
            ..Default::default()
        };
        assert_eq!(cfg.validate(), vec!["hidden_dim not divisible by match_heads"]);
    }

    #[test]
    fn zero_tau_violation() {
        let cfg = ModelConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert_eq!(cfg.validate(), vec!["tau must be positive"]);
    }

    #[test]
    fn strides() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.deepest_stride(), 32);
        assert_eq!(cfg.match_strides(), vec![32, 16]);
        assert_eq!(cfg.pyramid_strides(), vec![32, 16, 8]);
        assert_eq!(cfg.channels_at(16), Some(128));
        let one = ModelConfig {
            num_scales: 1,
            ..Default::default()
        };
        assert_eq!(one.match_strides(), vec![32]);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::tiny();
        cfg.tau = 0.37;
        cfg.rte_mode = RteMode::Additive;
        cfg.lr_step_fractions = vec![0.1, 0.25];
        let back = ModelConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let cfg = ModelConfig::parse("# header\nbank_size = 9 # trailing\n\n").unwrap();
        assert_eq!(cfg.bank_size, 9);
        let err = ModelConfig::parse("bank_sise = 9").unwrap_err();
        assert!(err.to_string().contains("unknown key `bank_sise`"), "{err}");
        let err = ModelConfig::parse("hidden_dim = 64\nmatch_head_dim = 32").unwrap_err();
        assert!(err.to_string().contains("match_head_dim"));
        assert!(ModelConfig::parse("match_head_dim = 32\nhidden_dim = 128").is_ok());
    }

    #[test]
    fn windowing_count() {
        assert_eq!(ModelConfig::num_clips(12, 2), 6);
        assert_eq!(ModelConfig::num_clips(5, 2), 2);
        assert_eq!(ModelConfig::num_clips(1, 2), 0);
    }
}
