use evfuse::bbox::BBox;
use evfuse::eval::{
    evaluate, interpolate_boxes_linear, success_precision_curves, TimedBox, TrackResult, DEFAULT_RPR_THRESHOLD,
};
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
    prop::collection::vec((-20.0..80.0f64, -20.0..80.0f64, 1.0..30.0f64, 1.0..30.0f64), 1..30)
}

fn track(v: &[(f64, f64, f64, f64)], dx: f64) -> TrackResult {
    let b = v
        .iter()
        .enumerate()
        .map(|(i, &(x, y, w, h))| TimedBox {
            t: i as i64 * 100,
            bbox: BBox::new(x + dx, y - dx, w, h).unwrap(),
        })
        .collect();
    TrackResult::new(b, None).unwrap()
}

proptest! {
    #[test]
    fn curves_are_monotone_and_bounded(a in boxes(), b in boxes()) {
        let n = a.len().min(b.len());
        let c = success_precision_curves(&track(&a[..n], 0.0), &track(&b[..n], 0.0)).unwrap();
        prop_assert!(c.success.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(c.precision.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.success.iter().chain(&c.precision).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn joint_translation_leaves_scores_alone(a in boxes(), b in boxes(), d in -50.0..50.0f64) {
        let n = a.len().min(b.len());
        let r0 = evaluate(&track(&a[..n], 0.0), &track(&b[..n], 0.0), DEFAULT_RPR_THRESHOLD).unwrap();
        let r1 = evaluate(&track(&a[..n], d), &track(&b[..n], d), DEFAULT_RPR_THRESHOLD).unwrap();
        prop_assert!((r0.rsr - r1.rsr).abs() < 1e-12);
        prop_assert!((r0.rpr - r1.rpr).abs() < 1e-12);
    }

    #[test]
    fn interpolation_reproduces_source_times(a in boxes()) {
        let src = track(&a, 0.0);
        let back = interpolate_boxes_linear(&src, &src.times()).unwrap();
        prop_assert_eq!(back, src);
    }

    #[test]
    fn interpolation_is_exact_on_linear_motion(x0 in -10.0..10.0f64, vx in -3.0..3.0f64, k in 1usize..12) {
        let src: Vec<TimedBox> = (0..4)
            .map(|i| TimedBox { t: i * 1200, bbox: BBox::new(x0 + vx * i as f64 * 12.0, 0.0, 5.0, 5.0).unwrap() })
            .collect();
        let src = TrackResult::new(src, None).unwrap();
        let t = (k as i64) * 100;
        let out = interpolate_boxes_linear(&src, &[t]).unwrap();
        prop_assert!((out.boxes()[0].bbox.x - (x0 + vx * k as f64)).abs() < 1e-9);
    }
}
