use std::collections::HashMap;

use evfuse::events::Polarity;
use evfuse::simulator::{
    brute_force_events, emit_events, fine_time, ground_truth_box, make_scenario, render_intensity, ScenarioKind,
    FINE_STEPS_PER_TICK,
};

fn per_pixel(events: &[evfuse::events::Event]) -> HashMap<(u32, u32), Vec<(i64, Polarity)>> {
    let mut m: HashMap<_, Vec<_>> = HashMap::new();
    for e in events {
        m.entry((e.x, e.y)).or_default().push((e.t, e.p));
    }
    m
}

#[test]
fn emitter_matches_brute_force_on_every_kind() {
    for kind in ScenarioKind::ALL {
        let scene = make_scenario(kind, 11);
        let t1 = scene.schedule.frame_time(2);
        let fast = emit_events(&scene, 0, t1).unwrap();
        let slow = brute_force_events(&scene, 0, t1).unwrap();
        let step = fine_time(&scene, 1) + 1;
        let (a, b) = (per_pixel(fast.events()), per_pixel(slow.events()));
        assert_eq!(a.len(), b.len(), "{kind}: active pixel count");
        for (px, ea) in &a {
            let eb = &b[px];
            let pa: Vec<_> = ea.iter().map(|e| e.1).collect();
            let pb: Vec<_> = eb.iter().map(|e| e.1).collect();
            assert_eq!(pa, pb, "{kind} pixel {px:?}");
            for (x, y) in ea.iter().zip(eb) {
                assert!((x.0 - y.0).abs() <= step, "{kind} pixel {px:?}: {} vs {}", x.0, y.0);
            }
        }
    }
}

#[test]
fn static_scene_is_silent_on_the_target() {
    let scene = make_scenario(ScenarioKind::Nm, 4);
    let ev = emit_events(&scene, 0, scene.duration).unwrap();
    assert!(ev.is_empty(), "{} events", ev.len());
}

#[test]
fn static_renders_repeat() {
    let scene = make_scenario(ScenarioKind::Nm, 4);
    let a = render_intensity(&scene, 0).unwrap();
    let b = render_intensity(&scene, scene.schedule.frame_time(3)).unwrap();
    assert_eq!(a.image, b.image);
}

#[test]
fn hdr_saturates_and_low_light_is_dark() {
    let hdr = make_scenario(ScenarioKind::Hdr, 2);
    let f = render_intensity(&hdr, 0).unwrap().image;
    let b = ground_truth_box(&hdr, 0).unwrap();
    let region: Vec<u8> = (b.y.ceil() as usize..(b.y + b.h).floor() as usize)
        .flat_map(|y| (b.x.ceil() as usize..(b.x + b.w).floor() as usize).map(move |x| (x, y)))
        .map(|(x, y)| f.get(x, y))
        .collect();
    let sat = region.iter().filter(|&&p| p == 255).count() as f64 / region.len() as f64;
    assert!(sat >= 0.2, "saturated fraction {sat}");
    let ll = make_scenario(ScenarioKind::Ll, 2);
    let f = render_intensity(&ll, 0).unwrap().image;
    assert!(f.mean() < 25.0, "mean {}", f.mean());
}

#[test]
fn doubling_the_threshold_never_adds_events() {
    for kind in [ScenarioKind::Plain, ScenarioKind::Fm, ScenarioKind::Sbm] {
        let scene = make_scenario(kind, 5);
        let mut coarse = scene.clone();
        coarse.contrast_threshold *= 2.0;
        let t1 = scene.schedule.frame_time(1);
        let a = per_pixel(emit_events(&scene, 0, t1).unwrap().events());
        let b = per_pixel(emit_events(&coarse, 0, t1).unwrap().events());
        for (px, eb) in &b {
            assert!(eb.len() <= a.get(px).map_or(0, Vec::len), "{kind} {px:?}");
        }
    }
}

#[test]
fn windows_on_ticks_partition_the_stream() {
    let scene = make_scenario(ScenarioKind::Fm, 9);
    let t1 = scene.schedule.frame_time(1);
    let whole = emit_events(&scene, 0, t1).unwrap();
    let mid = fine_time(&scene, 5 * FINE_STEPS_PER_TICK);
    let a = emit_events(&scene, 0, mid).unwrap();
    let b = emit_events(&scene, mid, t1).unwrap();
    let mut joined: Vec<_> = a.events().iter().chain(b.events()).copied().collect();
    joined.sort_by_key(|e| (e.t, e.y, e.x));
    assert_eq!(joined, whole.events());
}
