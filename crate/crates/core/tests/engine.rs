use std::path::Path;
use std::process::Command;

use clipvos::autograd::Graph;
use clipvos::config::ReweightTargets;
use clipvos::engine::{self, evaluate_model, infer_video, run_sweep, train, InferenceOverrides, SweepAxis, SweepSpec, TrainOptions};
use clipvos::matching::rte_name;
use clipvos::metrics::EvalOptions;
use clipvos::nn::Dropout;
use clipvos::synth::{generate, SceneScript, ShapeKind};
use clipvos::{Model, ModelConfig, VideoRecord};

fn static_video(seed: u64, frames: usize) -> VideoRecord {
    let obj = SceneScript::object(ShapeKind::Disk, 0.2, (14 + seed as i64 % 5, 16), (0, 0), [0.9, 0.4, 0.2], vec![]);
    generate(&SceneScript::single(seed, 32, frames, obj)).unwrap()
}

fn moving_video(seed: u64, frames: usize) -> VideoRecord {
    let obj = SceneScript::object(ShapeKind::Rect, 0.18, (12, 12), (1, 1), [0.2, 0.8, 0.5], vec![]);
    generate(&SceneScript::single(seed, 32, frames, obj)).unwrap()
}

#[test]
fn memory_grows_one_entry_per_clip() {
    let model = Model::init(ModelConfig::tiny(), 0).unwrap();
    let out = infer_video(&moving_video(1, 4), &model, InferenceOverrides::default()).unwrap();
    let sizes: Vec<usize> = out.trace.clips.iter().map(|c| c.memory_size).collect();
    assert_eq!(sizes, vec![1, 2]);

    let out = infer_video(&moving_video(1, 20), &model, InferenceOverrides { clip_length: Some(1), bank_size: Some(3) }).unwrap();
    let sizes: Vec<usize> = out.trace.clips.iter().map(|c| c.memory_size).collect();
    assert_eq!(sizes[..4], [1, 2, 3, 3]);
    assert!(sizes.iter().all(|&n| n <= 3));
}

#[test]
fn untrained_model_gives_valid_masks_and_trace() {
    let model = Model::init(ModelConfig::tiny(), 5).unwrap();
    let video = moving_video(2, 7);
    let out = infer_video(&video, &model, InferenceOverrides::default()).unwrap();
    assert_eq!(out.labels.len(), 7);
    assert_eq!(out.labels[0], engine::copy_reference_labels(&video).frames[0]);
    for seq in &out.per_object {
        assert!(seq.tensor().data().iter().all(|p| (0.0..=1.0).contains(p)));
    }
    assert!(out.labels.iter().flatten().all(|&l| l <= 1));
    let starts: Vec<(usize, usize)> = out.trace.clips.iter().map(|c| (c.start, c.len)).collect();
    assert_eq!(starts, vec![(1, 2), (3, 2), (5, 2)]);
    let text = out.trace.to_text();
    assert_eq!(text.lines().count(), 4);
    assert!(out.trace.clips.iter().all(|c| c.frame_j.as_ref().is_some_and(|j| j.len() == c.len)));
}

#[test]
fn zero_steps_leave_initial_parameters() {
    let init = Model::init(ModelConfig::tiny(), 9).unwrap();
    let mut m = init.clone();
    let report = train(&mut m, &[static_video(0, 6)], TrainOptions { steps: 0, seed: 1 }, |_, _| {}).unwrap();
    assert!(report.losses.is_empty());
    assert_eq!(m.params, init.params);
}

#[test]
fn training_on_static_videos_lowers_dice() {
    let data: Vec<VideoRecord> = (0..4).map(|s| static_video(s, 6)).collect();
    let cfg = ModelConfig { lr_mode: clipvos::config::LrMode::Uniform, lr_uniform: 1e-3, ..ModelConfig::tiny() };
    let mut m = Model::init(cfg, 0).unwrap();
    let report = train(&mut m, &data, TrainOptions { steps: 50, seed: 0 }, |_, _| {}).unwrap();
    let head: f64 = report.losses[..5].iter().map(|b| b.dice).sum::<f64>() / 5.0;
    let tail: f64 = report.losses[45..].iter().map(|b| b.dice).sum::<f64>() / 5.0;
    assert!(tail < head, "dice {head} -> {tail}");
}

#[test]
fn static_videos_make_reweighting_irrelevant() {
    let data: Vec<VideoRecord> = (0..2).map(|s| static_video(s, 6)).collect();
    let run = |targets| {
        let mut m = Model::init(ModelConfig { reweight_targets: targets, ..ModelConfig::tiny() }, 3).unwrap();
        train(&mut m, &data, TrainOptions { steps: 4, seed: 2 }, |_, _| {}).unwrap().losses
    };
    let a = run(ReweightTargets::FocalOnly);
    let b = run(ReweightTargets::None);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.total, y.total);
        assert!(x.weights.iter().all(|&w| w == 1.0));
    }
}

#[test]
fn training_is_reproducible() {
    let data = vec![moving_video(0, 8), static_video(1, 7)];
    let run = || {
        let mut m = Model::init(ModelConfig { dropout_rate: 0.1, ..ModelConfig::tiny() }, 4).unwrap();
        let r = train(&mut m, &data, TrainOptions { steps: 20, seed: 7 }, |_, _| {}).unwrap();
        (m.params, r.loss_curve())
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_time_encoding_gets_no_gradient() {
    let video = moving_video(3, 5);
    let grads_for = |freeze: bool| {
        let cfg = ModelConfig { freeze_rte: freeze, clip_length: 1, ..ModelConfig::tiny() };
        let model = Model::init(cfg.clone(), 1).unwrap();
        let g = Graph::new();
        let out = engine::video_loss(Some(&g), &model.params, &cfg, &video, &Dropout::inactive(), None).unwrap();
        let grads = g.backward(out.total.unwrap());
        (1..=cfg.bank_size)
            .filter_map(|i| grads.get(&rte_name(i)))
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
    };
    assert_eq!(grads_for(true), 0.0);
    assert!(grads_for(false) > 0.0);

    let data = vec![video.clone()];
    let cfg = ModelConfig { freeze_rte: true, ..ModelConfig::tiny() };
    let init = Model::init(cfg, 2).unwrap();
    let mut m = init.clone();
    train(&mut m, &data, TrainOptions { steps: 2, seed: 0 }, |_, _| {}).unwrap();
    for i in 1..=m.cfg.bank_size {
        assert_eq!(m.params.get(&rte_name(i)), init.params.get(&rte_name(i)));
    }
}

#[test]
fn inference_sweep_has_one_row_per_value() {
    let data = vec![moving_video(0, 7), static_video(1, 6)];
    let spec = SweepSpec {
        axis: SweepAxis::ClipLength,
        values: vec!["1".into(), "2".into(), "3".into()],
        base: ModelConfig::tiny(),
        steps: 1,
        seeds: vec![0, 1],
        checkpoint: None,
    };
    let table = run_sweep(&spec, &data, &data, |_| {}).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert!(table.rows.iter().all(|r| r.per_seed.len() == 2 && (0.0..=1.0).contains(&r.j)));
    assert_eq!(table.to_table().lines().filter(|l| !l.trim().is_empty()).count(), 4);
}

#[test]
fn evaluation_is_independent_of_thread_count() {
    let videos: Vec<VideoRecord> = (0..4).map(|s| moving_video(s, 6)).collect();
    let model = Model::init(ModelConfig::tiny(), 6).unwrap();
    let opts = EvalOptions::from_config(&model.cfg);
    let at = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| evaluate_model(&model, &videos, InferenceOverrides::default(), &opts).unwrap().to_key_values())
    };
    let one = at(1);
    assert_eq!(one, at(4));
    assert_eq!(one, at(3));
}

fn cli(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_clipvos")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "clipvos {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.ckpt");
    let pred = dir.path().join("pred");
    let report = dir.path().join("report");
    cli(&["--seed", "3", "gen-data", "--out", path(&data), "--videos", "3", "--resolution", "32", "--min-frames", "4", "--max-frames", "6"]);
    assert!(data.join("ImageSets").exists());
    cli(&["train", "--data", path(&data), "--out", path(&ckpt), "--steps", "2", "--preset", "tiny", "--video-length", "4", "--quiet"]);
    assert!(ckpt.exists());
    cli(&["infer", "--checkpoint", path(&ckpt), "--data", path(&data), "--out", path(&pred)]);
    cli(&["eval", "--pred", path(&pred), "--data", path(&data), "--out", path(&report), "--preset", "tiny"]);
    let kv = std::fs::read_to_string(report.with_extension("kv")).unwrap();
    assert!(kv.contains("J"), "{kv}");
    cli(&["eval", "--copy-baseline", "--data", path(&data), "--out", path(&dir.path().join("copy")), "--preset", "tiny"]);
    let grad = cli(&["gradcheck", "--samples", "12"]);
    assert!(!grad.is_empty());

    let bad = Command::new(env!("CARGO_BIN_EXE_clipvos"))
        .args(["sweep", "--axis", "tau", "--values", "1,-1", "--data", path(&data), "--steps", "1", "--seeds", "0"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let bad = Command::new(env!("CARGO_BIN_EXE_clipvos"))
        .args(["train", "--data", path(&data), "--out", path(&ckpt), "--tau", "0"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
