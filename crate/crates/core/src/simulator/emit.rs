use rayon::prelude::*;

use super::SceneConfig;
use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity};

/// Simulation steps per event-frame interval.
pub const FINE_STEPS_PER_TICK: i64 = 10;
/// Oracle samples per simulation step.
const ORACLE_SUBSTEPS: u32 = 10;

/// Timestamp of simulation step `q`, floored to microseconds. Every tenth
/// step coincides with an event-frame tick.
pub fn fine_time(scene: &SceneConfig, q: i64) -> i64 {
    (q * 1_000_000).div_euclid(FINE_STEPS_PER_TICK * scene.schedule.gamma_e() as i64)
}

/// Per-pixel state advanced across one simulation step whose intensity moves
/// linearly from `l0` to `l1`.
type Stepper = fn(r: &mut f64, c: f64, l0: f64, l1: f64, ta: f64, tb: f64, push: &mut dyn FnMut(f64, Polarity));

fn crossing_step(r: &mut f64, c: f64, l0: f64, l1: f64, ta: f64, tb: f64, push: &mut dyn FnMut(f64, Polarity)) {
    let lf = (l1 + 1.0).ln();
    // log(L + 1) is monotone in s along the step, so each reference level is
    // crossed once, at the s solving L(s) + 1 = exp(level)
    let at = |level: f64| {
        let s = ((level.exp() - 1.0 - l0) / (l1 - l0)).clamp(0.0, 1.0);
        ta + s * (tb - ta)
    };
    while lf - *r >= c {
        let level = *r + c;
        push(at(level), Polarity::Positive);
        *r = level;
    }
    while *r - lf >= c {
        let level = *r - c;
        push(at(level), Polarity::Negative);
        *r = level;
    }
}

fn dense_step(r: &mut f64, c: f64, l0: f64, l1: f64, ta: f64, tb: f64, push: &mut dyn FnMut(f64, Polarity)) {
    let (lo, hi) = (l0.min(l1), l0.max(l1));
    for j in 1..=ORACLE_SUBSTEPS {
        let s = j as f64 / ORACLE_SUBSTEPS as f64;
        let lv = ((l0 * (1.0 - s) + l1 * s).clamp(lo, hi) + 1.0).ln();
        let t = ta + s * (tb - ta);
        while lv - *r >= c {
            push(t, Polarity::Positive);
            *r += c;
        }
        while *r - lv >= c {
            push(t, Polarity::Negative);
            *r -= c;
        }
    }
}

fn simulate(scene: &SceneConfig, t0: i64, t1: i64, step: Stepper) -> Result<EventStream> {
    scene.validate()?;
    scene.check_time(t0)?;
    scene.check_time(t1)?;
    if t0 >= t1 {
        return Err(Error::EmptyWindow { start: t0, end: t1 });
    }
    let mut q_end = 0;
    while fine_time(scene, q_end) < t1 {
        q_end += 1;
    }
    let times: Vec<i64> = (0..=q_end).map(|q| fine_time(scene, q)).collect();
    let positions: Vec<(f64, f64)> = times.iter().map(|&t| scene.trajectory.position(t)).collect();
    let (w, h) = (scene.width as usize, scene.height as usize);
    let c = scene.contrast_threshold;

    let rows: Vec<Vec<Event>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = Vec::new();
            let mut values = vec![0.0; times.len()];
            for x in 0..w {
                for (v, (&t, &(tx, ty))) in values.iter_mut().zip(times.iter().zip(&positions)) {
                    *v = scene.radiance_at(x, y, t, tx, ty);
                }
                let mut r = (values[0] + 1.0).ln();
                for q in 0..q_end as usize {
                    let (ta, tb) = (times[q] as f64, times[q + 1] as f64);
                    let last = times[q + 1] - 1;
                    let mut push = |t: f64, p: Polarity| {
                        let t = (t.floor() as i64).min(last);
                        if t >= t0 && t < t1 {
                            out.push(Event::new(t, x as u32, y as u32, p));
                        }
                    };
                    step(&mut r, c, values[q], values[q + 1], ta, tb, &mut push);
                }
            }
            out
        })
        .collect();
    let mut events: Vec<Event> = rows.into_iter().flatten().collect();
    events.sort_by_key(|e| (e.t, e.y, e.x));
    EventStream::new(events, scene.width, scene.height, t0, t1)
}

/// Events in `[t0, t1)`. Each pixel starts from its reference level at time
/// 0; whenever `log(L + 1)` moves a full contrast threshold away from the
/// reference an event fires and the reference moves by that threshold.
/// Crossing times come from the linear intensity ramp of each simulation
/// step and stay inside that step, so windows on the simulation grid never
/// split a crossing.
pub fn emit_events(scene: &SceneConfig, t0: i64, t1: i64) -> Result<EventStream> {
    simulate(scene, t0, t1, crossing_step)
}

/// Reference integrator: samples each simulation step's intensity ramp at
/// ten evenly spaced points and fires at the first sample past a level.
pub fn brute_force_events(scene: &SceneConfig, t0: i64, t1: i64) -> Result<EventStream> {
    simulate(scene, t0, t1, dense_step)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_pixel(l0: f64, l1: f64, c: f64, ref0: f64) -> Vec<(f64, Polarity)> {
        let mut r = ref0;
        let mut out = Vec::new();
        crossing_step(&mut r, c, l0, l1, 0.0, 100.0, &mut |t, p| out.push((t, p)));
        out
    }

    #[test]
    fn ramp_of_three_point_two_thresholds() {
        let c = 0.2;
        let l0 = 10.0;
        let l1 = ((l0 + 1.0f64).ln() + 3.2 * c).exp() - 1.0;
        let ev = one_pixel(l0, l1, c, (l0 + 1.0f64).ln());
        assert_eq!(ev.len(), 3);
        assert!(ev.iter().all(|&(_, p)| p == Polarity::Positive));
        assert!(ev.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn falling_ramp_fires_negative() {
        let ev = one_pixel(100.0, 10.0, 0.5, (101.0f64).ln());
        // ln(101) - ln(11) = 2.217 -> four crossings
        assert_eq!(ev.len(), 4);
        assert!(ev.iter().all(|&(_, p)| p == Polarity::Negative));
    }

    #[test]
    fn flat_step_is_silent() {
        assert!(one_pixel(5.0, 5.0, 0.1, (6.0f64).ln()).is_empty());
    }
}
