use std::fmt::Write as _;
use std::str::FromStr;

use super::infer::{evaluate_model, InferenceOverrides};
use super::train::{train, TrainOptions};
use crate::config::{ModelConfig, ReweightTargets, RteMode};
use crate::error::{Error, Result};
use crate::matching::{rte_name, table_len};
use crate::metrics::EvalOptions;
use crate::model::Model;
use crate::types::VideoRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    ClipLength,
    BankSize,
    Rte,
    Reweighting,
    Tau,
    Scales,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::ClipLength,
        SweepAxis::BankSize,
        SweepAxis::Rte,
        SweepAxis::Reweighting,
        SweepAxis::Tau,
        SweepAxis::Scales,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::ClipLength => "clip_length",
            SweepAxis::BankSize => "bank_size",
            SweepAxis::Rte => "rte",
            SweepAxis::Reweighting => "reweighting",
            SweepAxis::Tau => "tau",
            SweepAxis::Scales => "scales",
        }
    }

    /// Axes that only change inference and reuse one trained model.
    pub fn inference_only(self) -> bool {
        matches!(self, SweepAxis::ClipLength | SweepAxis::BankSize)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = SweepAxis::ALL.iter().map(|a| a.as_str()).collect();
                Error::Config(format!("unknown sweep axis {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub base: ModelConfig,
    /// Training steps per trained model.
    pub steps: usize,
    pub seeds: Vec<u64>,
    /// Model to reuse for inference-only axes instead of training one per seed.
    pub checkpoint: Option<Model>,
}

/// A validated sweep cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub value: String,
    pub cfg: ModelConfig,
    pub overrides: InferenceOverrides,
}

fn positive_int(axis: SweepAxis, v: &str) -> Result<usize> {
    match v.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(Error::Config(format!("{}: {v:?} is not a positive integer", axis.as_str()))),
    }
}

/// Turn every value into a cell, failing before any compute on a bad value.
pub fn plan_sweep(spec: &SweepSpec) -> Result<Vec<SweepCell>> {
    if spec.values.is_empty() {
        return Err(Error::Config(format!("{}: no sweep values", spec.axis.as_str())));
    }
    if spec.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let base = spec.checkpoint.as_ref().map_or(&spec.base, |m| &m.cfg);
    base.ensure_valid()?;
    let axis = spec.axis;
    spec.values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            let mut overrides = InferenceOverrides::default();
            match axis {
                SweepAxis::ClipLength => overrides.clip_length = Some(positive_int(axis, v)?),
                SweepAxis::BankSize => overrides.bank_size = Some(positive_int(axis, v)?),
                SweepAxis::Rte => {
                    cfg.rte_mode = match v.as_str() {
                        "on" | "multiplicative" => RteMode::Multiplicative,
                        "off" => RteMode::Off,
                        "additive" => RteMode::Additive,
                        _ => return Err(Error::Config(format!("rte: {v:?} is not one of on, off, additive"))),
                    }
                }
                SweepAxis::Reweighting => {
                    cfg.reweight_targets = match v.as_str() {
                        "on" => ReweightTargets::FocalOnly,
                        "off" => ReweightTargets::None,
                        other => ReweightTargets::from_str(other)
                            .map_err(|_| Error::Config(format!("reweighting: {v:?} is not on, off or a target name")))?,
                    }
                }
                SweepAxis::Tau => cfg.set("tau", v)?,
                SweepAxis::Scales => cfg.num_scales = positive_int(axis, v)?,
            }
            cfg.ensure_valid()
                .map_err(|e| Error::Config(format!("{} = {v}: {e}", axis.as_str())))?;
            Ok(SweepCell {
                value: v.clone(),
                cfg,
                overrides,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub j: f64,
    pub j_tr: f64,
    /// `(J, J_tr)` per seed.
    pub per_seed: Vec<(f64, f64)>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_table(&self) -> String {
        let vw = self.rows.iter().map(|r| r.value.len()).max().unwrap_or(0).max(self.axis.as_str().len());
        let mut s = String::new();
        let _ = writeln!(s, "{:<vw$}  {:>7}  {:>7}  {:>5}  note", self.axis.as_str(), "J", "J_tr", "seeds");
        for r in &self.rows {
            let _ = writeln!(s, "{:<vw$}  {:>7.4}  {:>7.4}  {:>5}  {}", r.value, r.j, r.j_tr, r.per_seed.len(), r.note);
        }
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = format!("axis={}\nrows={}\n", self.axis.as_str(), self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(s, "row.{i}.value={}", r.value);
            let _ = writeln!(s, "row.{i}.J={}", r.j);
            let _ = writeln!(s, "row.{i}.J_tr={}", r.j_tr);
            for (k, (j, jt)) in r.per_seed.iter().enumerate() {
                let _ = writeln!(s, "row.{i}.seed{k}.J={j}");
                let _ = writeln!(s, "row.{i}.seed{k}.J_tr={jt}");
            }
            if !r.note.is_empty() {
                let _ = writeln!(s, "row.{i}.note={}", r.note);
            }
        }
        s
    }
}

fn trained(cfg: &ModelConfig, seed: u64, steps: usize, data: &[VideoRecord]) -> Result<Model> {
    let mut m = Model::init(cfg.clone(), seed)?;
    train(&mut m, data, TrainOptions { steps, seed }, |_, _| {})?;
    Ok(m)
}

/// Run every cell over every seed and average J and J_tr on `val`.
pub fn run_sweep(
    spec: &SweepSpec,
    train_set: &[VideoRecord],
    val: &[VideoRecord],
    mut log: impl FnMut(&str),
) -> Result<SweepTable> {
    let cells = plan_sweep(spec)?;
    if val.is_empty() {
        return Err(Error::Input("sweep needs validation videos".into()));
    }
    let mut per_cell: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cells.len()];
    let mut notes = vec![String::new(); cells.len()];
    let seeds: &[u64] = if spec.axis.inference_only() && spec.checkpoint.is_some() {
        &spec.seeds[..1]
    } else {
        &spec.seeds
    };
    for &seed in seeds {
        let shared = if spec.axis.inference_only() {
            Some(match &spec.checkpoint {
                Some(m) => m.clone(),
                None => trained(&cells[0].cfg, seed, spec.steps, train_set)?,
            })
        } else {
            None
        };
        for (ci, cell) in cells.iter().enumerate() {
            let model = match &shared {
                Some(m) => m.clone(),
                None => trained(&cell.cfg, seed, spec.steps, train_set)?,
            };
            if let Some(n) = cell.overrides.bank_size {
                let cap = table_len(&model.params, rte_name);
                if model.cfg.rte_mode != RteMode::Off && n > cap {
                    notes[ci] = format!("rte interpolated beyond {cap}");
                }
            }
            let report = evaluate_model(&model, val, cell.overrides, &EvalOptions::from_config(&model.cfg))?;
            log(&format!(
                "{}={} seed={seed} J={:.4} J_tr={:.4}",
                spec.axis.as_str(),
                cell.value,
                report.j_mean,
                report.j_tr
            ));
            per_cell[ci].push((report.j_mean, report.j_tr));
        }
    }
    let rows = cells
        .into_iter()
        .zip(per_cell)
        .zip(notes)
        .map(|((cell, runs), note)| {
            let n = runs.len() as f64;
            SweepRow {
                value: cell.value,
                j: runs.iter().map(|r| r.0).sum::<f64>() / n,
                j_tr: runs.iter().map(|r| r.1).sum::<f64>() / n,
                per_seed: runs,
                note,
            }
        })
        .collect();
    Ok(SweepTable { axis: spec.axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(axis: SweepAxis, values: &[&str]) -> SweepSpec {
        SweepSpec {
            axis,
            values: values.iter().map(|s| s.to_string()).collect(),
            base: ModelConfig::tiny(),
            steps: 0,
            seeds: vec![0],
            checkpoint: None,
        }
    }

    #[test]
    fn bad_values_fail_before_compute() {
        assert!(matches!(plan_sweep(&spec(SweepAxis::Tau, &["1", "-2"])), Err(Error::Config(_))));
        assert!(matches!(plan_sweep(&spec(SweepAxis::Rte, &["maybe"])), Err(Error::Config(_))));
        assert!(matches!(plan_sweep(&spec(SweepAxis::ClipLength, &["0"])), Err(Error::Config(_))));
        assert!(matches!(plan_sweep(&spec(SweepAxis::Tau, &[])), Err(Error::Config(_))));
        assert!("depth".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn cells_carry_axis_setting() {
        let cells = plan_sweep(&spec(SweepAxis::Rte, &["on", "off", "additive"])).unwrap();
        let modes: Vec<_> = cells.iter().map(|c| c.cfg.rte_mode).collect();
        assert_eq!(modes, vec![RteMode::Multiplicative, RteMode::Off, RteMode::Additive]);
        let cells = plan_sweep(&spec(SweepAxis::BankSize, &["7", "9"])).unwrap();
        assert_eq!(cells[1].overrides.bank_size, Some(9));
        assert_eq!(cells[1].cfg, ModelConfig::tiny());
    }
}
