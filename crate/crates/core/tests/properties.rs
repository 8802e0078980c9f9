mod common;

use clipvos::autograd::Graph;
use clipvos::config::{DeltaVariant, ReweightTargets};
use clipvos::loss::{self, DeltaOptions, ReweightingResult};
use clipvos::matching::{modulated_attention, Modulation};
use clipvos::metrics::{self, BinaryMask, EvalJob, EvalOptions, LabelVideo, SubsetMetadata};
use clipvos::model::clip_windows;
use clipvos::nn::Dropout;
use clipvos::synth::{self, Event, EventKind, SceneScript, ShapeKind};
use clipvos::{MaskSequence, MemoryBank, ModelConfig, Tensor};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn variant_strategy() -> impl Strategy<Value = DeltaVariant> {
    prop_oneof![
        Just(DeltaVariant::MaskedArea),
        Just(DeltaVariant::ConnectedComponents),
        Just(DeltaVariant::CenterOfMass),
    ]
}

fn random_sequence(seed: u64, t: usize, h: usize, w: usize) -> MaskSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            random_blobs(&mut rng, h, w)
                .into_iter()
                .map(|b| if b { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    MaskSequence::from_frames(&frames, h, w, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weights_sum_to_length_and_stay_positive(
        delta in prop::collection::vec(0.0f64..20.0, 1..32),
        tau in 0.05f64..50.0,
    ) {
        let w = loss::compute_weights(&delta, tau, delta.len()).unwrap();
        prop_assert!((w.iter().sum::<f64>() - delta.len() as f64).abs() < 1e-9);
        prop_assert!(w.iter().all(|&v| v > 0.0));
        let oracle = weights_oracle(&delta, tau, delta.len());
        for (a, b) in w.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_ignore_constant_shift(
        delta in prop::collection::vec(0.0f64..8.0, 1..16),
        shift in -50.0f64..50.0,
        tau in 0.1f64..10.0,
    ) {
        let a = loss::compute_weights(&delta, tau, delta.len()).unwrap();
        let shifted: Vec<f64> = delta.iter().map(|d| d + shift).collect();
        let b = loss::compute_weights(&shifted, tau, delta.len()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn change_normalization_ignores_scale(
        c in prop::collection::vec(0.0f64..100.0, 1..16),
        k in 1e-3f64..1e3,
    ) {
        let a = loss::normalize_changes(&c);
        let scaled: Vec<f64> = c.iter().map(|v| v * k).collect();
        let b = loss::normalize_changes(&scaled);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn delta_is_self_normalized(seed in any::<u64>(), t in 2usize..10, variant in variant_strategy()) {
        let m = random_sequence(seed, t, 12, 12);
        let d = loss::compute_delta(&m, DeltaOptions::new(variant)).unwrap();
        prop_assert_eq!(d.len(), t);
        prop_assert!(d[0] == 0.0 || d.iter().all(|&x| x == 1.0));
        prop_assert!((d.iter().sum::<f64>() / t as f64 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_focal_is_unaffected_by_weights(
        seed in any::<u64>(),
        t in 2usize..8,
        gamma in 0.0f64..3.0,
        tau in 0.2f64..4.0,
    ) {
        let gt = random_sequence(seed, t, 8, 8);
        let pred = MaskSequence::new(Tensor::full(&[t, 8, 8], 0.5), 1).unwrap();
        let cfg = ModelConfig { focal_alpha: -1.0, focal_gamma: gamma, tau, ..ModelConfig::tiny() };
        let b = loss::total_loss(&pred, &gt, &cfg).unwrap();
        let constant = 0.5f64.powf(gamma) * 2f64.ln();
        prop_assert!((b.focal_reweighted - constant).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_central_differences(
        seed in any::<u64>(),
        t in 2usize..5,
        targets in prop_oneof![
            Just(ReweightTargets::FocalOnly),
            Just(ReweightTargets::Both),
            Just(ReweightTargets::None),
        ],
    ) {
        let gt = random_sequence(seed, t, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let pred_data: Vec<f64> = (0..t * 64).map(|_| rng.gen_range(0.05..0.95)).collect();
        let cfg = ModelConfig { reweight_targets: targets, ..ModelConfig::tiny() };
        let w = loss::reweight(&gt, &cfg).unwrap();
        let eval = |d: &[f64]| {
            let p = MaskSequence::new(Tensor::new(vec![t, 8, 8], d.to_vec()), 1).unwrap();
            loss::total_loss_with_grad(&p, &gt, &w, &cfg).unwrap()
        };
        let (_, grad) = eval(&pred_data);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..pred_data.len() {
            let mut up = pred_data.clone();
            let mut down = pred_data.clone();
            up[i] += h;
            down[i] -= h;
            let numeric = (eval(&up).0.total - eval(&down).0.total) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        prop_assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn fifo_matches_queue_oracle(cap in 1usize..9, steps in prop::collection::vec(1usize..4, 0..40)) {
        let mut bank = MemoryBank::init((), cap).unwrap();
        let mut oracle = QueueOracle::new(cap);
        let mut ts = 0;
        for gap in steps {
            ts += gap;
            bank.update((), ts).unwrap();
            oracle.push(ts);
            prop_assert_eq!(bank.timestamps(), oracle.storage());
            let recency: Vec<usize> = bank.rte_order().map(|e| e.timestamp).collect();
            prop_assert_eq!(recency, oracle.recency());
            prop_assert!(bank.len() <= cap);
        }
    }

    #[test]
    fn fifo_rejects_stale_timestamps(cap in 2usize..9, first in 1usize..10, back in 0usize..10) {
        let mut bank = MemoryBank::init((), cap).unwrap();
        bank.update((), first).unwrap();
        let before = bank.timestamps();
        prop_assert!(bank.update((), first.saturating_sub(back)).is_err());
        prop_assert_eq!(bank.timestamps(), before);
    }

    #[test]
    fn region_and_contour_match_oracles(seed in any::<u64>(), density in 0.05f64..0.95, blobs in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (32, 32);
        let (a, b) = if blobs {
            (random_blobs(&mut rng, h, w), random_blobs(&mut rng, h, w))
        } else {
            (random_bits(&mut rng, h, w, density), random_bits(&mut rng, h, w, density))
        };
        let pa = BinaryMask::new(h, w, a.clone()).unwrap();
        let pb = BinaryMask::new(h, w, b.clone()).unwrap();
        prop_assert_eq!(metrics::region_similarity(&pa, &pb).unwrap(), iou_oracle(&a, &b));
        let f = metrics::contour_accuracy(&pa, &pb, 0.008).unwrap();
        prop_assert!((f - f_oracle(&a, &b, h, w, 0.008)).abs() < 1e-9);
        let f_wide = metrics::contour_accuracy(&pa, &pb, 0.05).unwrap();
        prop_assert!((f_wide - f_oracle(&a, &b, h, w, 0.05)).abs() < 1e-9);
    }

    #[test]
    fn jtr_matches_tail_mean(j in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let got = metrics::j_tr(&j, 0.25, clipvos::config::Rounding::Ceil).unwrap();
        prop_assert!((got - jtr_oracle(&j, 0.25)).abs() < 1e-12);
    }

    #[test]
    fn windows_partition_frames(t in 1usize..64, l in 1usize..10) {
        let win = clip_windows(t, l);
        let mut next = 1;
        for (i, &(start, len)) in win.iter().enumerate() {
            prop_assert_eq!(start, next);
            prop_assert!(len >= 1 && len <= l);
            if i + 1 < win.len() {
                prop_assert_eq!(len, l);
            }
            next += len;
        }
        prop_assert_eq!(next, t.max(1));
        prop_assert_eq!(win.len(), (t - 1).div_ceil(l));
    }

    #[test]
    fn config_text_round_trips(
        tau in 0.01f64..100.0,
        alpha1 in 0.0f64..5.0,
        clip in 1usize..6,
        bank in 1usize..12,
        gamma in 0.0f64..4.0,
        rte in prop_oneof![Just("multiplicative"), Just("off"), Just("additive")],
        variant in prop_oneof![Just("masked_area"), Just("connected_components"), Just("center_of_mass")],
    ) {
        let mut cfg = ModelConfig::tiny();
        cfg.set("tau", &tau.to_string()).unwrap();
        cfg.set("alpha1", &alpha1.to_string()).unwrap();
        cfg.set("clip_length", &clip.to_string()).unwrap();
        cfg.set("bank_size", &bank.to_string()).unwrap();
        cfg.set("focal_gamma", &gamma.to_string()).unwrap();
        cfg.set("rte_mode", rte).unwrap();
        cfg.set("delta_variant", variant).unwrap();
        let back = ModelConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn attention_rows_follow_query_permutation(seed in any::<u64>(), rows in 2usize..8, cols in 1usize..8, dh in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |r: usize, c: usize| Tensor::from_fn(&[r, c], |_| rng.gen_range(-1.0..1.0));
        let (q, k, v) = (rand_t(rows, dh), rand_t(cols, dh), rand_t(cols, 3));
        let mut perm: Vec<usize> = (0..rows).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % rows);
        let q_perm = Tensor::new(vec![rows, dh], perm.iter().flat_map(|&r| q.data()[r * dh..(r + 1) * dh].to_vec()).collect());
        let run = |qt: Tensor| {
            let g = Graph::inference();
            let (o, _) = modulated_attention(&g, g.constant(qt), g.constant(k.clone()), g.constant(v.clone()), Modulation::None, &Dropout::inactive());
            let out = g.value(o).clone();
            out
        };
        let base = run(q);
        let permuted = run(q_perm);
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..3 {
                prop_assert_eq!(permuted.data()[i * 3 + c], base.data()[r * 3 + c]);
            }
        }
    }

    #[test]
    fn rte_scaling_moves_attention_with_score_sign(seed in any::<u64>(), cols in 2usize..6, target in 0usize..6, e_lo in 0.1f64..2.0, bump in 0.01f64..2.0) {
        let target = target % cols;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::from_fn(&[1, 4], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn(&[cols, 4], |_| rng.gen_range(-1.0..1.0));
        let v = Tensor::from_fn(&[cols, 1], |_| rng.gen_range(-1.0..1.0));
        let score: f64 = q.data().iter().zip(&k.data()[target * 4..target * 4 + 4]).map(|(a, b)| a * b).sum::<f64>() / 2.0;
        let weight_at = |e: f64| {
            let g = Graph::inference();
            let mut row = vec![1.0; cols];
            row[target] = e;
            let m = g.constant(Tensor::new(vec![1, cols], row));
            let (_, p) = modulated_attention(&g, g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), Modulation::Multiply(m), &Dropout::inactive());
            let w = g.value(p).data()[target];
            w
        };
        let (lo, hi) = (weight_at(e_lo), weight_at(e_lo + bump));
        if score > 1e-9 {
            prop_assert!(hi > lo);
        } else if score < -1e-9 {
            prop_assert!(hi < lo);
        }
    }

    #[test]
    fn rendered_pixels_carry_object_color(seed in any::<u64>(), res in prop_oneof![Just(32usize), Just(64)], frames in 2usize..6, shape in prop_oneof![Just(ShapeKind::Rect), Just(ShapeKind::Disk), Just(ShapeKind::Blob)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let color = [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)];
        let obj = SceneScript::object(shape, rng.gen_range(0.1..0.25), (res as i64 / 2, res as i64 / 2), (rng.gen_range(-2..3), rng.gen_range(-2..3)), color, vec![]);
        let script = SceneScript::single(seed, res, frames, obj);
        let video = synth::generate(&script).unwrap();
        let bound = 3.0 * script.noise + 1e-12;
        let m = &video.gt_masks[0];
        prop_assert!(m.is_binary());
        for t in 0..frames {
            for (i, &v) in m.frame(t).iter().enumerate() {
                if v == 1.0 {
                    let px = video.frames.pixel(t, i / res, i % res);
                    for c in 0..3 {
                        prop_assert!((px[c] - color[c]).abs() <= bound);
                    }
                }
            }
        }
        let again = synth::generate(&script).unwrap();
        prop_assert_eq!(again, video);
    }

    #[test]
    fn scripted_events_dominate_frame_changes(seed in any::<u64>(), frames in 5usize..10, at in 2usize..10, size in 0.12f64..0.18, kind in prop_oneof![Just(EventKind::Shrink), Just(EventKind::Grow), Just(EventKind::Split)]) {
        let at = 2 + at % (frames - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (magnitude, variant) = match kind {
            EventKind::Shrink => (0.5, DeltaVariant::MaskedArea),
            EventKind::Grow => (1.6, DeltaVariant::MaskedArea),
            _ => (1.0, DeltaVariant::ConnectedComponents),
        };
        let obj = SceneScript::object(
            ShapeKind::Disk,
            size,
            (32, 32),
            (rng.gen_range(-1..2), rng.gen_range(-1..2)),
            [0.9, 0.3, 0.3],
            vec![Event { frame: at, kind, magnitude }],
        );
        let script = SceneScript::single(seed, 64, frames, obj);
        prop_assert_eq!(script.change_frames(), vec![at]);
        let video = synth::generate(&script).unwrap();
        let c = loss::frame_changes(&video.gt_masks[0], DeltaOptions::new(variant));
        let rw = ReweightingResult::from_changes(&c, 1.0, variant).unwrap();
        let event = rw.delta[at - 1];
        let others: Vec<f64> = (1..frames).filter(|&i| i != at - 1).map(|i| rw.delta[i]).collect();
        let mean_other = others.iter().sum::<f64>() / others.len().max(1) as f64;
        prop_assert!(event >= 2.0 * mean_other, "event δ {event} vs others {mean_other}");
        prop_assert!(event > 0.0);
    }
}

fn label_video(rng: &mut ChaCha8Rng, frames: usize) -> LabelVideo {
    LabelVideo {
        height: 16,
        width: 16,
        frames: (0..frames)
            .map(|_| random_blobs(rng, 16, 16).into_iter().map(u8::from).collect())
            .collect(),
    }
}

#[test]
fn evaluation_ignores_video_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut jobs: Vec<EvalJob> = (0..12)
        .map(|i| {
            let n = rng.gen_range(2..7);
            let meta = SubsetMetadata {
                duration_sec: Some(rng.gen_range(1.0..40.0)),
                object_area_fractions: Some(vec![rng.gen_range(0.001..0.2)]),
                object_count: Some(rng.gen_range(1..3)),
            };
            (format!("v{i}"), label_video(&mut rng, n), label_video(&mut rng, n), meta)
        })
        .collect();
    let opts = EvalOptions::default();
    let base = metrics::evaluate_all(&jobs, &opts).unwrap().to_key_values();
    for _ in 0..5 {
        let k = rng.gen_range(1..jobs.len());
        jobs.rotate_left(k);
        let last = jobs.len() - 1;
        jobs.swap(0, last);
        assert_eq!(metrics::evaluate_all(&jobs, &opts).unwrap().to_key_values(), base);
    }
}
