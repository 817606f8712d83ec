use evfuse::afnet::{
    cross_correlation_terms, deformable_align, motion_aware, motion_modulate, style_transform, Afnet, ArchConfig,
    FusionMode, NormState, ParamSet, FEATURE_STRIDE,
};
use evfuse::events::{EventFrame, NEUTRAL_PIXEL};
use evfuse::image::GrayImage;
use evfuse::tensor::{
    batch_norm, channel_stats, conv2d_raw, deformable_conv2d_raw, relu, BatchNormMode, ConvSpec, Tape, Tensor,
    NORM_EPS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(fusion: FusionMode) -> ArchConfig {
    ArchConfig {
        channels: 4,
        reduction: 2,
        kernel: 3,
        fusion,
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Population mean and standard deviation of each channel over N, H, W.
fn moments(t: &Tensor) -> Vec<(f64, f64)> {
    let (n, c, h, w) = t.dims4().unwrap();
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|i| t.data()[(i * c + ch) * h * w..][..h * w].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            (m, v.sqrt())
        })
        .collect()
}

fn run<F: FnOnce(&mut Tape) -> evfuse::tensor::Var>(f: F) -> Tensor {
    let mut tape = Tape::new();
    let out = f(&mut tape);
    tape.value(out).clone()
}

#[test]
fn zero_offsets_reproduce_conv2d_on_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (h, w) = (rng.random_range(k..k + 6), rng.random_range(k..k + 6));
        let spec = ConvSpec::new(rng.random_range(1..3), rng.random_range(0..=k / 2));
        let x = randn(&mut rng, [n, cin, h, w]);
        let wt = randn(&mut rng, [cout, cin, k, k]);
        let b = rng.random_bool(0.5).then(|| randn(&mut rng, [cout]));
        let plain = conv2d_raw(&x, &wt, b.as_ref(), spec).unwrap();
        let (_, _, oh, ow) = plain.dims4().unwrap();
        let off = Tensor::zeros([n, 2 * k * k, oh, ow]);
        let deformed = deformable_conv2d_raw(&x, &off, &wt, b.as_ref(), spec).unwrap();
        worst = worst.max(plain.max_abs_diff(&deformed).unwrap());
    }
    assert!(worst < 1e-12, "{worst:e}");
}

#[test]
fn adain_matches_style_statistics_on_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut mean_err, mut std_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let shape = [rng.random_range(1..3), rng.random_range(1..5), rng.random_range(4..9), rng.random_range(4..9)];
        let ff = Tensor::randn(shape, 1.0, &mut rng);
        let shift = rng.random_range(-2.0..2.0);
        let fec = Tensor::randn(shape, 1.0, &mut rng).map(|v| v + shift);
        let out = run(|t| {
            let (a, b) = (t.constant(ff.clone()), t.constant(fec.clone()));
            style_transform(t, a, b, NORM_EPS).unwrap()
        });
        for ((mo, so), (me, se)) in moments(&out).into_iter().zip(moments(&fec)) {
            mean_err = mean_err.max((mo - me).abs());
            std_err = std_err.max((so - se).abs());
        }
    }
    assert!(mean_err < 1e-10, "mean {mean_err:e}");
    assert!(std_err < 1e-5, "std {std_err:e}");
}

#[test]
fn zero_event_features_leave_the_frame_term_unchanged() {
    for seed in 0..5 {
        let net = Afnet::init(small(FusionMode::Afnet), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let fda = randn(&mut rng, [2, 4, 6, 6]);
        let p = &net.params;
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let a = tape.constant(fda.clone());
        let z = tape.constant(Tensor::zeros([2, 4, 6, 6]));
        let mut norms = NormState::train(&net.running);
        let (ffe, fef) = cross_correlation_terms(&mut tape, &bound, &mut norms, a, z, 3).unwrap();

        let theta = conv2d_raw(&fda, p.get("cf.frame.theta.w").unwrap(), None, ConvSpec::same(3)).unwrap();
        let (bn, _) = batch_norm(
            &theta,
            p.get("cf.frame.bn.gamma").unwrap(),
            p.get("cf.frame.bn.beta").unwrap(),
            NORM_EPS,
            &BatchNormMode::Train,
        )
        .unwrap();
        let frame_term = relu(&bn);
        assert_eq!(tape.value(ffe).data(), frame_term.data());
        assert!(tape.value(fef).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn delta_kernels_double_the_frame_term() {
    let net = Afnet::init(small(FusionMode::Afnet), 4).unwrap();
    let mut params = net.params.clone();
    let mut ident = Tensor::zeros([4, 4, 3, 3]);
    for c in 0..4 {
        ident.data_mut()[(c * 4 + c) * 9 + 4] = 1.0;
    }
    *params.get_mut("cf.event.kernel.w").unwrap() = ident;
    let delta = Tensor::from_fn([1, 4, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fda = randn(&mut rng, [1, 4, 3, 3]);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let (a, e) = (tape.constant(fda), tape.constant(delta));
    let mut norms = NormState::train(&net.running);
    let (ffe, _) = cross_correlation_terms(&mut tape, &bound, &mut norms, a, e, 3).unwrap();

    let mut tape2 = Tape::new();
    let bound2 = params.bind(&mut tape2, false);
    let a2 = tape2.constant(tape.value(a).clone());
    let z = tape2.constant(Tensor::zeros([1, 4, 3, 3]));
    let mut norms2 = NormState::train(&net.running);
    let (plain, _) = cross_correlation_terms(&mut tape2, &bound2, &mut norms2, a2, z, 3).unwrap();
    let twice = tape2.value(plain).scale(2.0);
    assert!(tape.value(ffe).max_abs_diff(&twice).unwrap() < 1e-12);
}

#[test]
fn motion_aware_zero_and_constant_inputs() {
    let net = Afnet::init(small(FusionMode::Afnet), 1).unwrap();
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape, false);
    let z = tape.constant(Tensor::zeros([1, 4, 5, 5]));
    let (fes, fec) = motion_aware(&mut tape, &p, z).unwrap();
    assert!(tape.value(fes).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(fec).data().iter().all(|&v| v == 0.0));

    let levels = [0.5, -1.0, 2.0, 3.0];
    let c = tape.constant(Tensor::from_fn([1, 4, 5, 5], |i| levels[i / 25]));
    let (fes, _) = motion_aware(&mut tape, &p, c).unwrap();
    for (got, want) in tape.value(fes).data().iter().zip(levels) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn motion_aware_shrinks_magnitudes_and_keeps_signs() {
    let net = Afnet::init(small(FusionMode::Afnet), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fe = randn(&mut rng, [2, 4, 6, 6]);
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape, false);
    let x = tape.constant(fe.clone());
    let (_, fec) = motion_aware(&mut tape, &p, x).unwrap();
    for (o, i) in tape.value(fec).data().iter().zip(fe.data()) {
        assert!(o.abs() < i.abs() || *i == 0.0);
        assert_eq!(o.signum(), i.signum());
    }
}

#[test]
fn motion_aware_gate_ignores_a_logit_offset() {
    let net = Afnet::init(small(FusionMode::Afnet), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fe = randn(&mut rng, [1, 4, 5, 5]);
    let gate = |shift: f64| {
        let mut params = net.params.clone();
        params.insert("ma.logit.b", Tensor::full([1], shift));
        run(|t| {
            let p = params.bind(t, false);
            let x = t.constant(fe.clone());
            motion_aware(t, &p, x).unwrap().1
        })
    };
    assert!(gate(0.0).max_abs_diff(&gate(7.5)).unwrap() < 1e-12);
}

#[test]
fn zero_event_gate_scales_frames_by_one_and_a_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ff = randn(&mut rng, [1, 3, 4, 4]);
    let out = run(|t| {
        let (a, z) = (t.constant(ff.clone()), t.constant(Tensor::zeros([1, 3, 4, 4])));
        motion_modulate(t, a, z).unwrap()
    });
    assert!(out.max_abs_diff(&ff.scale(1.5)).unwrap() < 1e-15);
}

#[test]
fn constant_content_takes_the_style_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ff = Tensor::zeros([1, 2, 4, 4]);
    let fec = randn(&mut rng, [1, 2, 4, 4]);
    let out = run(|t| {
        let (a, b) = (t.constant(ff.clone()), t.constant(fec.clone()));
        style_transform(t, a, b, NORM_EPS).unwrap()
    });
    let (mu, _) = channel_stats(&fec, NORM_EPS).unwrap();
    for (i, v) in out.data().iter().enumerate() {
        assert!(v.is_finite());
        assert!((v - mu.data()[i / 16]).abs() < 1e-12);
    }
}

#[test]
fn fresh_alignment_is_a_plain_conv() {
    let net = Afnet::init(small(FusionMode::Afnet), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (ff, fst, fec) = (randn(&mut rng, [1, 4, 5, 5]), randn(&mut rng, [1, 4, 5, 5]), randn(&mut rng, [1, 4, 5, 5]));
    let out = run(|t| {
        let p = net.params.bind(t, false);
        let (a, b, c) = (t.constant(ff.clone()), t.constant(fst.clone()), t.constant(fec.clone()));
        deformable_align(t, &p, a, b, c).unwrap()
    });
    let plain = conv2d_raw(&ff, net.params.get("da.deform.w").unwrap(), None, ConvSpec::same(3)).unwrap();
    assert!(out.max_abs_diff(&plain).unwrap() < 1e-12);
}

#[test]
fn constant_frames_ignore_learned_offsets() {
    let net = Afnet::init(small(FusionMode::Afnet), 6).unwrap();
    let mut params = net.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    *params.get_mut("da.offset.w").unwrap() = Tensor::randn([18, 4, 3, 3], 0.05, &mut rng);
    let ff = Tensor::from_fn([1, 4, 6, 6], |i| (i / 36) as f64 + 0.5);
    let (fst, fec) = (randn(&mut rng, [1, 4, 6, 6]), randn(&mut rng, [1, 4, 6, 6]));
    let align = |p: &ParamSet| {
        run(|t| {
            let b = p.bind(t, false);
            let (a, s, e) = (t.constant(ff.clone()), t.constant(fst.clone()), t.constant(fec.clone()));
            deformable_align(t, &b, a, s, e).unwrap()
        })
    };
    let moved = align(&params);
    let fixed = align(&net.params);
    // compare away from the zero-padded border, where taps stay in bounds
    for y in 2..4 {
        for x in 2..4 {
            for c in 0..4 {
                let i = (c * 6 + y) * 6 + x;
                assert!((moved.data()[i] - fixed.data()[i]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn every_mode_outputs_c_channels_at_stride_four() {
    let frame = GrayImage::from_fn(32, 24, |x, y| ((x * 7 + y * 3) % 256) as u8);
    let events = EventFrame::neutral(32, 24, 0, 10);
    for fusion in FusionMode::ALL {
        let net = Afnet::init(small(fusion), 0).unwrap();
        let out = net.extract_fused_features(&frame, &events).unwrap();
        assert_eq!(out.shape(), &[1, 4, 24 / FEATURE_STRIDE, 32 / FEATURE_STRIDE]);
        assert!(out.all_finite());
    }
}

#[test]
fn early_fusion_with_neutral_events_adds_a_constant() {
    let frame = GrayImage::from_fn(16, 16, |x, y| (x * 13 + y * 5) as u8);
    let net = Afnet::init(small(FusionMode::Ef), 2).unwrap();
    let fused = net.extract_fused_features(&frame, &EventFrame::neutral(16, 16, 0, 1)).unwrap();
    let shifted = run(|t| {
        let p = net.params.bind(t, false);
        let x = Tensor::from_fn([1, 1, 16, 16], |i| {
            frame.pixels()[i] as f64 / 255.0 + NEUTRAL_PIXEL as f64 / 255.0
        });
        let x = t.constant(x);
        evfuse::afnet::backbone(t, &p, "backbone", x).unwrap()
    });
    assert!(fused.max_abs_diff(&shifted).unwrap() < 1e-12);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let net = Afnet::init(small(FusionMode::Afnet), 0).unwrap();
    let frame = GrayImage::filled(16, 16, 9);
    assert!(net.extract_fused_features(&frame, &EventFrame::neutral(8, 16, 0, 1)).is_err());
    assert!(ArchConfig {
        channels: 6,
        reduction: 4,
        ..ArchConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    let net = Afnet::init(small(FusionMode::Afnet), 12).unwrap();
    evfuse::afnet::save_checkpoint(&path, &net.config, 12, &net.params, &net.running).unwrap();
    let (manifest, params, running) = evfuse::afnet::load_checkpoint(&path).unwrap();
    assert_eq!(manifest.seed, 12);
    assert_eq!(params, net.params);
    assert_eq!(running, net.running);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn modulation_stays_between_one_and_two_times(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ff = Tensor::randn([1, 2, 3, 3], scale, &mut rng);
        let fec = Tensor::randn([1, 2, 3, 3], scale, &mut rng);
        let out = run(|t| {
            let (a, b) = (t.constant(ff.clone()), t.constant(fec.clone()));
            motion_modulate(t, a, b).unwrap()
        });
        for (o, i) in out.data().iter().zip(ff.data()) {
            prop_assert!(o.abs() >= i.abs() && o.abs() <= 2.0 * i.abs());
        }
    }

    #[test]
    fn adain_statistics_hold_for_any_pair(seed in any::<u64>(), a in 0.8f64..1.25, b in 0.8f64..1.25, shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ff = Tensor::randn([1, 3, 8, 8], a, &mut rng);
        let fec = Tensor::randn([1, 3, 8, 8], b, &mut rng).map(|v| v + shift);
        let out = run(|t| {
            let (x, y) = (t.constant(ff.clone()), t.constant(fec.clone()));
            style_transform(t, x, y, NORM_EPS).unwrap()
        });
        for ((mo, so), (me, se)) in moments(&out).into_iter().zip(moments(&fec)) {
            prop_assert!((mo - me).abs() < 1e-10);
            prop_assert!((so - se).abs() < 1e-5);
        }
    }

    #[test]
    fn inference_is_repeatable(seed in 0u64..1000) {
        let net = Afnet::init(small(FusionMode::Afnet), seed).unwrap();
        let frame = GrayImage::from_fn(16, 16, |x, y| ((x * y + seed as usize) % 256) as u8);
        let events = EventFrame::neutral(16, 16, 0, 1);
        let a = net.extract_fused_features(&frame, &events).unwrap();
        let b = net.extract_fused_features(&frame, &events).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}
