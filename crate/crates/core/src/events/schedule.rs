use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MICROS: i64 = 1_000_000;

/// Where an event window starts relative to the queried timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccumulationMode {
    /// (a): only the events since the previous event-frame timestamp.
    SinceLastEventFrame,
    /// (b): every event since the paired intensity frame.
    SinceLastIntensityFrame,
}

impl AccumulationMode {
    pub fn label(self) -> &'static str {
        match self {
            AccumulationMode::SinceLastEventFrame => "a",
            AccumulationMode::SinceLastIntensityFrame => "b",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "a" => Some(AccumulationMode::SinceLastEventFrame),
            "b" => Some(AccumulationMode::SinceLastIntensityFrame),
            _ => None,
        }
    }
}

/// Pairing of a conventional frame rate with a higher event-frame rate.
///
/// All timestamps live on one clock: the `m`-th event-frame tick is at
/// `floor(m / gamma_e)` seconds expressed in microseconds, and intensity frame
/// `k` sits on tick `k * ratio`. Computing every boundary from the tick index
/// keeps consecutive windows exactly adjacent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct RateSchedule {
    gamma_f: u32,
    gamma_e: u32,
}

#[derive(Serialize, Deserialize)]
struct RawSchedule {
    gamma_f: u32,
    gamma_e: u32,
}

impl TryFrom<RawSchedule> for RateSchedule {
    type Error = Error;
    fn try_from(raw: RawSchedule) -> Result<Self> {
        RateSchedule::new(raw.gamma_f, raw.gamma_e)
    }
}

impl From<RateSchedule> for RawSchedule {
    fn from(s: RateSchedule) -> Self {
        RawSchedule {
            gamma_f: s.gamma_f,
            gamma_e: s.gamma_e,
        }
    }
}

/// One event-frame timestamp together with its paired intensity frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventTick {
    pub t: i64,
    pub frame_index: usize,
    pub n: u32,
}

impl RateSchedule {
    pub fn new(gamma_f: u32, gamma_e: u32) -> Result<Self> {
        if gamma_f == 0 || gamma_e == 0 {
            return Err(Error::Schedule("rates must be positive".into()));
        }
        if !gamma_e.is_multiple_of(gamma_f) {
            return Err(Error::Schedule(format!(
                "event rate {gamma_e} Hz is not a multiple of frame rate {gamma_f} Hz"
            )));
        }
        if gamma_e as i64 > MICROS {
            return Err(Error::Schedule(format!(
                "event rate {gamma_e} Hz exceeds the microsecond clock"
            )));
        }
        Ok(Self { gamma_f, gamma_e })
    }

    pub fn gamma_f(&self) -> u32 {
        self.gamma_f
    }

    pub fn gamma_e(&self) -> u32 {
        self.gamma_e
    }

    pub fn ratio(&self) -> u32 {
        self.gamma_e / self.gamma_f
    }

    /// Timestamp of event-frame tick `m`.
    pub fn tick_time(&self, m: i64) -> i64 {
        (m * MICROS).div_euclid(self.gamma_e as i64)
    }

    /// Timestamp of intensity frame `k`.
    pub fn frame_time(&self, k: usize) -> i64 {
        self.tick_time(k as i64 * self.ratio() as i64)
    }

    /// Inverse of [`tick_time`](Self::tick_time), if `t` is on the grid.
    pub fn tick_index(&self, t: i64) -> Option<i64> {
        if t < 0 {
            return None;
        }
        let g = self.gamma_e as i64;
        let m = (t * g + MICROS - 1) / MICROS;
        (self.tick_time(m) == t).then_some(m)
    }

    /// Intensity frame times `0..count`.
    pub fn frame_times(&self, count: usize) -> Vec<i64> {
        (0..count).map(|k| self.frame_time(k)).collect()
    }

    /// Every tracked timestamp `i + n / gamma_e`, `n = 1..=ratio`, over the
    /// intervals between consecutive frames.
    pub fn ticks(&self, frame_count: usize) -> Vec<EventTick> {
        let ratio = self.ratio();
        let mut out = Vec::with_capacity(frame_count.saturating_sub(1) * ratio as usize);
        for k in 0..frame_count.saturating_sub(1) {
            for n in 1..=ratio {
                let m = (k as i64) * ratio as i64 + n as i64;
                out.push(EventTick {
                    t: self.tick_time(m),
                    frame_index: k,
                    n,
                });
            }
        }
        out
    }
}

/// Finds the latest frame strictly before `t` and the tick offset `n` with
/// `t = i + n / gamma_e`, `1 <= n <= gamma_e / gamma_f`.
pub fn pair_frame(schedule: &RateSchedule, t: i64, frame_times: &[i64]) -> Result<(usize, u32)> {
    let count = frame_times.partition_point(|&i| i < t);
    if count == 0 {
        return Err(Error::OffGrid {
            t,
            reason: "no intensity frame precedes it".into(),
        });
    }
    let index = count - 1;
    let i = frame_times[index];
    let m_t = schedule.tick_index(t).ok_or_else(|| Error::OffGrid {
        t,
        reason: format!("expected a multiple of 1/{} s", schedule.gamma_e()),
    })?;
    let m_i = schedule.tick_index(i).ok_or_else(|| Error::OffGrid {
        t: i,
        reason: "frame time is not an event-frame tick".into(),
    })?;
    let n = m_t - m_i;
    if n < 1 || n > schedule.ratio() as i64 {
        return Err(Error::OffGrid {
            t,
            reason: format!(
                "offset n = {n} from frame {index} at {i} us is outside [1, {}]",
                schedule.ratio()
            ),
        });
    }
    Ok((index, n as u32))
}

/// The half-open event window for tick `n` after the frame at `i`.
pub fn accumulation_window(
    schedule: &RateSchedule,
    i: i64,
    n: u32,
    mode: AccumulationMode,
) -> Result<(i64, i64)> {
    if n < 1 || n > schedule.ratio() {
        return Err(Error::Schedule(format!(
            "n = {n} outside [1, {}]",
            schedule.ratio()
        )));
    }
    let m_i = schedule.tick_index(i).ok_or_else(|| Error::OffGrid {
        t: i,
        reason: "frame time is not an event-frame tick".into(),
    })?;
    let end = schedule.tick_time(m_i + n as i64);
    let start = match mode {
        AccumulationMode::SinceLastEventFrame => schedule.tick_time(m_i + n as i64 - 1),
        AccumulationMode::SinceLastIntensityFrame => i,
    };
    Ok((start, end))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(f: u32, e: u32) -> RateSchedule {
        RateSchedule::new(f, e).unwrap()
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(RateSchedule::new(20, 250).is_err());
        assert!(RateSchedule::new(0, 240).is_err());
        assert_eq!(sched(20, 240).ratio(), 12);
    }

    #[test]
    fn pair_frame_examples() {
        let s = sched(20, 240);
        let frames = [0, 50_000];
        assert_eq!(pair_frame(&s, 37_500, &frames).unwrap(), (0, 9));
        assert_eq!(pair_frame(&s, 50_000, &frames).unwrap(), (0, 12));
        assert!(pair_frame(&s, 37_501, &frames).is_err());
        assert!(pair_frame(&s, 0, &frames).is_err());
        assert_eq!(pair_frame(&s, 62_500, &frames).unwrap(), (1, 3));
        // beyond the last known frame interval
        assert!(pair_frame(&s, 112_500, &frames).is_err());
    }

    #[test]
    fn ratio_one_always_pairs_n_one() {
        let s = sched(240, 240);
        let frames = s.frame_times(10);
        for &t in &frames[1..] {
            let (k, n) = pair_frame(&s, t, &frames).unwrap();
            assert_eq!(n, 1);
            assert_eq!(frames[k + 1], t);
        }
    }

    #[test]
    fn window_examples() {
        let s = sched(20, 240);
        let b = AccumulationMode::SinceLastIntensityFrame;
        let a = AccumulationMode::SinceLastEventFrame;
        assert_eq!(accumulation_window(&s, 0, 3, b).unwrap(), (0, 12_500));
        assert_eq!(accumulation_window(&s, 0, 3, a).unwrap(), (8_333, 12_500));
        assert_eq!(
            accumulation_window(&s, 50_000, 1, a).unwrap(),
            accumulation_window(&s, 50_000, 1, b).unwrap()
        );
        assert!(accumulation_window(&s, 0, 0, a).is_err());
        assert!(accumulation_window(&s, 0, 13, a).is_err());
    }

    #[test]
    fn frames_sit_on_the_tick_grid() {
        let s = sched(30, 240);
        for k in 0..100 {
            let t = s.frame_time(k);
            assert_eq!(s.tick_index(t), Some(k as i64 * 8));
        }
        assert_eq!(s.frame_time(3), 100_000);
    }

    #[test]
    fn ticks_cover_each_interval() {
        let s = sched(20, 240);
        let ticks = s.ticks(3);
        assert_eq!(ticks.len(), 24);
        assert_eq!(ticks[11].t, 50_000);
        assert_eq!(ticks[12].frame_index, 1);
        assert_eq!(ticks[12].n, 1);
    }
}
