use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Exposure, SceneConfig, ScenarioKind, Texture, Trajectory, Waypoint};
use crate::events::RateSchedule;

pub const SENSOR_SIZE: u32 = 96;
pub const TARGET_SIZE: f64 = 16.0;

const GAMMA_F: u32 = 20;
const GAMMA_E: u32 = 240;
const FRAME_INTERVALS: usize = 8;
const CONTRAST: f64 = 0.15;
const MARGIN: f64 = 2.0;

struct Motion {
    /// Pixels per event-frame interval.
    speed: f64,
    /// Probability that a trajectory segment is a pause.
    dwell: f64,
}

fn motion(kind: ScenarioKind) -> Motion {
    match kind {
        ScenarioKind::Fm => Motion { speed: 5.0, dwell: 0.0 },
        ScenarioKind::Nm => Motion { speed: 0.0, dwell: 0.0 },
        ScenarioKind::Sbm => Motion { speed: 1.5, dwell: 0.0 },
        ScenarioKind::Plain | ScenarioKind::Hdr | ScenarioKind::Ll => Motion { speed: 2.0, dwell: 0.3 },
    }
}

fn texture(rng: &mut ChaCha8Rng, base: f64, amplitude: f64, periods: std::ops::Range<f64>) -> Texture {
    Texture {
        base,
        amplitude,
        period_x: rng.random_range(periods.clone()),
        period_y: rng.random_range(periods),
        phase_x: rng.random_range(0.0..TAU),
        phase_y: rng.random_range(0.0..TAU),
    }
}

/// Tick-by-tick path at constant speed; segments of a few ticks turn by a
/// random angle or pause, and the heading reflects off the sensor border.
fn trajectory(rng: &mut ChaCha8Rng, schedule: &RateSchedule, ticks: i64, m: &Motion) -> Trajectory {
    let hi = SENSOR_SIZE as f64 - TARGET_SIZE - MARGIN;
    let (mut x, mut y) = (
        rng.random_range(MARGIN + 8.0..hi - 8.0),
        rng.random_range(MARGIN + 8.0..hi - 8.0),
    );
    let mut heading: f64 = rng.random_range(0.0..TAU);
    let mut waypoints = vec![Waypoint { t: 0, x, y }];
    let mut left = 0;
    let mut pause = false;
    for tick in 1..=ticks {
        if left == 0 {
            left = rng.random_range(3..=7);
            heading += rng.random_range(-1.2..1.2);
            pause = tick > 1 && rng.random_bool(m.dwell);
        }
        left -= 1;
        let v = if pause { 0.0 } else { m.speed };
        if !(MARGIN..=hi).contains(&(x + v * heading.cos())) {
            heading = PI - heading;
        }
        if !(MARGIN..=hi).contains(&(y + v * heading.sin())) {
            heading = -heading;
        }
        x += v * heading.cos();
        y += v * heading.sin();
        waypoints.push(Waypoint {
            t: schedule.tick_time(tick),
            x,
            y,
        });
    }
    Trajectory { waypoints }
}

/// A deterministic scene of the given kind. Speeds are per event-frame
/// interval at 240 Hz: FM moves 5 px, Plain 2 px with pauses, SBM moves its
/// background twice as fast as the target, NM is static.
pub fn make_scenario(kind: ScenarioKind, seed: u64) -> SceneConfig {
    let tag = ScenarioKind::ALL.iter().position(|&k| k == kind).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x5851_F42D_4C95_7F2D) ^ (tag + 1));
    let schedule = RateSchedule::new(GAMMA_F, GAMMA_E).expect("fixed rates are valid");
    let ticks = (FRAME_INTERVALS as u32 * schedule.ratio()) as i64;
    let m = motion(kind);

    let (target_texture, mut background) = match kind {
        ScenarioKind::Hdr => (texture(&mut rng, 170.0, 70.0, 6.0..9.0), texture(&mut rng, 60.0, 30.0, 18.0..30.0)),
        _ => (texture(&mut rng, 170.0, 70.0, 6.0..9.0), texture(&mut rng, 80.0, 45.0, 18.0..30.0)),
    };
    if kind == ScenarioKind::Sbm {
        // a finer background so its motion produces dense clutter events
        background = texture(&mut rng, 110.0, 60.0, 8.0..12.0);
    }
    let trajectory = trajectory(&mut rng, &schedule, ticks, &m);
    let background_velocity = if kind == ScenarioKind::Sbm {
        let a: f64 = rng.random_range(0.0..TAU);
        let speed = 2.0 * m.speed * GAMMA_E as f64;
        [speed * a.cos(), speed * a.sin()]
    } else {
        [0.0, 0.0]
    };
    let exposure = match kind {
        ScenarioKind::Hdr => Exposure { gain: 2.5, saturation: 255.0, noise_std: 1.0 },
        ScenarioKind::Ll => Exposure { gain: 0.12, saturation: 255.0, noise_std: 1.5 },
        ScenarioKind::Nm => Exposure { gain: 1.0, saturation: 255.0, noise_std: 0.0 },
        _ => Exposure { gain: 1.0, saturation: 255.0, noise_std: 1.0 },
    };
    SceneConfig {
        kind,
        width: SENSOR_SIZE,
        height: SENSOR_SIZE,
        contrast_threshold: CONTRAST,
        target_width: TARGET_SIZE,
        target_height: TARGET_SIZE,
        target_texture,
        trajectory,
        background,
        background_velocity,
        exposure,
        schedule,
        duration: schedule.frame_time(FRAME_INTERVALS),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::ground_truth_box;

    #[test]
    fn every_kind_is_valid_and_deterministic() {
        for kind in ScenarioKind::ALL {
            for seed in 0..4 {
                let a = make_scenario(kind, seed);
                a.validate().unwrap();
                assert_eq!(a, make_scenario(kind, seed));
            }
        }
        assert_ne!(make_scenario(ScenarioKind::Plain, 1), make_scenario(ScenarioKind::Plain, 2));
    }

    #[test]
    fn fast_motion_moves_four_pixels_per_tick() {
        for seed in 0..8 {
            let s = make_scenario(ScenarioKind::Fm, seed);
            for m in 0..96 {
                let a = ground_truth_box(&s, s.schedule.tick_time(m)).unwrap();
                let b = ground_truth_box(&s, s.schedule.tick_time(m + 1)).unwrap();
                assert!(a.center_distance(&b) >= 4.0, "seed {seed} tick {m}");
            }
        }
    }

    #[test]
    fn background_outruns_target_in_sbm() {
        let s = make_scenario(ScenarioKind::Sbm, 3);
        let bg = s.background_velocity[0].hypot(s.background_velocity[1]) / s.schedule.gamma_e() as f64;
        assert!(bg >= motion(ScenarioKind::Sbm).speed);
    }
}
