use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, Args, FromArgMatches, Parser, Subcommand};

use clipvos::config::CONFIG_KEYS;
use clipvos::davis::{read_label_video, write_label_video, DavisTree};
use clipvos::engine::{
    evaluate_copy_baseline, gradcheck, infer_video, run_sweep, train, GradcheckOptions, InferenceOverrides,
    SweepAxis, SweepSpec, TrainOptions,
};
use clipvos::metrics::{evaluate_all, EvalJob, EvalOptions};
use clipvos::synth::{generate_all, make_benchmark, DifficultyProfile};
use clipvos::{Model, ModelConfig};

#[derive(Parser)]
#[command(name = "clipvos", version, about = "Clip-level video object segmentation")]
struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic benchmark as a DAVIS-style tree.
    GenData(GenData),
    /// Train a model and write a checkpoint.
    Train(TrainCmd),
    /// Segment a split with a checkpoint.
    Infer(InferCmd),
    /// Score predictions against annotations.
    Eval(EvalCmd),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckCmd),
    /// Run one ablation axis.
    Sweep(SweepCmd),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    videos: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long)]
    min_frames: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    lng_quota: Option<usize>,
    #[arg(long)]
    sm_quota: Option<usize>,
    #[arg(long)]
    multi_object_prob: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainCmd {
    /// Dataset root (uses the `train` split).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Where to write the per-step loss lines (default: `<out>.loss.txt`).
    #[arg(long)]
    loss_curve: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct InferCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Output directory; one label-png folder and one trace file per video.
    #[arg(long)]
    out: PathBuf,
    /// Clip length used at inference instead of the trained one.
    #[arg(long)]
    infer_clip_length: Option<usize>,
    /// Memory bank size used at inference instead of the trained one.
    #[arg(long)]
    infer_bank_size: Option<usize>,
}

#[derive(Args)]
struct EvalCmd {
    /// Prediction directory written by `infer`.
    #[arg(long, required_unless_present = "copy_baseline")]
    pred: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Report stem; writes `<stem>.txt` and `<stem>.kv`.
    #[arg(long)]
    out: PathBuf,
    /// Score the baseline that repeats the reference labels.
    #[arg(long)]
    copy_baseline: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradcheckCmd {
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepCmd {
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long)]
    values: String,
    #[arg(long)]
    data: PathBuf,
    /// Trained model reused by inference-only axes.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,
    /// Report stem; writes `<stem>.txt` and `<stem>.kv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

/// `--config FILE`, `--preset NAME` and one `--<key> VALUE` flag per config key.
struct ConfigArgs {
    file: Option<PathBuf>,
    preset: Option<String>,
    sets: Vec<(&'static str, String)>,
}

fn flag_name(key: &'static str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

impl Args for ConfigArgs {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        let mut cmd = cmd
            .arg(clap::Arg::new("config").long("config").value_name("FILE").help("Base config file (key = value lines)"))
            .arg(
                clap::Arg::new("preset")
                    .long("preset")
                    .value_parser(["default", "tiny", "desk"])
                    .help("Built-in base config, applied before --config"),
            );
        for &key in CONFIG_KEYS {
            cmd = cmd.arg(
                clap::Arg::new(key)
                    .long(flag_name(key))
                    .alias(key)
                    .value_name("VALUE")
                    .help_heading("Config keys"),
            );
        }
        cmd
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        Ok(Self {
            file: m.get_one::<String>("config").map(PathBuf::from),
            preset: m.get_one::<String>("preset").cloned(),
            sets: CONFIG_KEYS
                .iter()
                .filter_map(|&k| m.get_one::<String>(k).map(|v| (k, v.clone())))
                .collect(),
        })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl ConfigArgs {
    fn resolve(&self, default_preset: &str) -> Result<ModelConfig> {
        let mut cfg = match self.preset.as_deref().unwrap_or(default_preset) {
            "tiny" => ModelConfig::tiny(),
            "desk" => ModelConfig::desk(),
            _ => ModelConfig::default(),
        };
        if let Some(f) = &self.file {
            let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            for line in text.lines() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}: expected key = value, got {line:?}", f.display()))?;
                cfg.set(k.trim(), v.trim())?;
            }
        }
        for (k, v) in &self.sets {
            cfg.set(k, v)?;
        }
        cfg.ensure_valid()?;
        Ok(cfg)
    }
}

fn split_videos(tree: &DavisTree, split: &str) -> Result<Vec<clipvos::VideoRecord>> {
    let names = tree.read_split(split)?;
    if names.is_empty() {
        bail!("split {split} under {} is empty", tree.root.display());
    }
    Ok(tree.read_videos(&names)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenData, seed: u64) -> Result<()> {
    let d = DifficultyProfile::default();
    let profile = DifficultyProfile {
        resolution: a.resolution,
        min_frames: a.min_frames.unwrap_or(d.min_frames),
        max_frames: a.max_frames.unwrap_or(d.max_frames),
        val_fraction: a.val_fraction.unwrap_or(d.val_fraction),
        lng_quota: a.lng_quota.unwrap_or(d.lng_quota),
        sm_quota: a.sm_quota.unwrap_or(d.sm_quota),
        multi_object_prob: a.multi_object_prob.unwrap_or(d.multi_object_prob),
        noise: a.noise.unwrap_or(d.noise),
        ..d
    };
    let split = make_benchmark(seed, a.videos, &profile)?;
    let tree = DavisTree::new(&a.out);
    for (name, scripts) in [("train", &split.train), ("val", &split.val)] {
        let videos = generate_all(scripts)?;
        for v in &videos {
            tree.write_video(v)?;
        }
        let names: Vec<String> = videos.iter().map(|v| v.name.clone()).collect();
        tree.write_split(name, &names)?;
        let log: String = scripts.iter().map(|s| clipvos::synth::event_log(s) + "\n").collect();
        write_text(&a.out.join(format!("events_{name}.txt")), &log)?;
        println!("{name}: {} videos", videos.len());
    }
    Ok(())
}

fn train_cmd(a: TrainCmd, seed: u64) -> Result<()> {
    let cfg = a.config.resolve("desk")?;
    let data = split_videos(&DavisTree::new(&a.data), "train")?;
    let mut model = Model::init(cfg, seed)?;
    println!("parameters: {}", model.num_parameters());
    let clock = Instant::now();
    let quiet = a.quiet;
    let report = train(&mut model, &data, TrainOptions { steps: a.steps, seed }, |step, b| {
        if !quiet {
            println!("{}", b.log_line(step));
        }
    })?;
    model.save(&a.out)?;
    let curve = a.loss_curve.unwrap_or_else(|| a.out.with_extension("loss.txt"));
    write_text(&curve, &report.loss_curve())?;
    println!("trained {} steps in {:.1}s -> {}", a.steps, clock.elapsed().as_secs_f64(), a.out.display());
    Ok(())
}

fn infer_cmd(a: InferCmd) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let videos = split_videos(&DavisTree::new(&a.data), &a.split)?;
    let overrides = InferenceOverrides {
        clip_length: a.infer_clip_length,
        bank_size: a.infer_bank_size,
    };
    for v in &videos {
        let out = infer_video(v, &model, overrides)?;
        write_label_video(&a.out.join(&v.name), v.frames.height(), v.frames.width(), &out.labels)?;
        write_text(&a.out.join(format!("{}.trace.txt", v.name)), &out.trace.to_text())?;
        println!("{}: {} frames, {} clips", v.name, v.len(), out.trace.clips.len());
    }
    Ok(())
}

fn eval_cmd(a: EvalCmd) -> Result<()> {
    let cfg = a.config.resolve("default")?;
    let opts = EvalOptions::from_config(&cfg);
    let tree = DavisTree::new(&a.data);
    let report = if a.copy_baseline {
        evaluate_copy_baseline(&split_videos(&tree, &a.split)?, &opts)?
    } else {
        let pred_root = a.pred.expect("required unless copy baseline");
        let jobs: Vec<EvalJob> = tree
            .read_split(&a.split)?
            .into_iter()
            .map(|name| {
                let pred = read_label_video(&pred_root.join(&name))?;
                let gt = read_label_video(&tree.annotations_dir(&name))?;
                let meta = tree.subset_metadata(&name)?;
                Ok((name, pred, gt, meta))
            })
            .collect::<clipvos::Result<_>>()?;
        evaluate_all(&jobs, &opts)?
    };
    report.write(&a.out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckCmd, seed: u64) -> Result<()> {
    let cfg = a.config.resolve("tiny")?;
    let opts = GradcheckOptions {
        samples: a.samples,
        step: a.step,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&cfg, seed, opts)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(p) = a.out {
        let mut full = text;
        for s in &report.samples {
            full.push_str(&format!(
                "{}[{}] analytic={:.6e} numeric={:.6e} rel={:.3e}\n",
                s.name, s.index, s.analytic, s.numeric, s.rel_error
            ));
        }
        write_text(&p, &full)?;
    }
    Ok(())
}

fn sweep_cmd(a: SweepCmd) -> Result<()> {
    let axis: SweepAxis = a.axis.parse()?;
    let seeds = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    let checkpoint = a.checkpoint.as_deref().map(Model::load).transpose()?;
    let spec = SweepSpec {
        axis,
        values: a.values.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        base: a.config.resolve("desk")?,
        steps: a.steps,
        seeds,
        checkpoint,
    };
    clipvos::engine::plan_sweep(&spec)?;
    let tree = DavisTree::new(&a.data);
    let train_set = split_videos(&tree, "train")?;
    let val = split_videos(&tree, "val")?;
    let table = run_sweep(&spec, &train_set, &val, |line| println!("{line}"))?;
    write_text(&a.out.with_extension("txt"), &table.to_table())?;
    write_text(&a.out.with_extension("kv"), &table.to_key_values())?;
    print!("{}", table.to_table());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a, cli.seed),
        Cmd::Train(a) => train_cmd(a, cli.seed),
        Cmd::Infer(a) => infer_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Gradcheck(a) => gradcheck_cmd(a, cli.seed),
        Cmd::Sweep(a) => sweep_cmd(a),
    }
}
