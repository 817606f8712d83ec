//! Event records, event streams, and their aggregation into 2D event frames.
//!
//! An event camera reports a record `(t, x, y, p)` whenever the log intensity
//! at pixel `(x, y)` changes by a contrast threshold. To feed events to a
//! frame-based network, the events falling in a time window are collapsed
//! into an 8-bit frame where 255 marks a positive event, 0 a negative event
//! and 127 a pixel that saw no event.

mod aggregate;
mod csv;
mod schedule;

pub use aggregate::{aggregate_events, EventFrame, NEGATIVE_PIXEL, NEUTRAL_PIXEL, POSITIVE_PIXEL};
pub use csv::{load_event_stream, read_event_csv, save_event_stream, write_event_csv, CSV_HEADER};
pub use schedule::{accumulation_window, pair_frame, AccumulationMode, EventTick, RateSchedule};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sign of the brightness change carried by an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn from_sign(p: i64) -> Option<Self> {
        match p {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }
}

/// A single sensor event. `t` is in integer microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: i64,
    pub x: u32,
    pub y: u32,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: i64, x: u32, y: u32, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Time-sorted events of one sensor over the span `[t_begin, t_end]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
    t_begin: i64,
    t_end: i64,
}

impl EventStream {
    /// Validates ordering, bounds and span before taking ownership of `events`.
    pub fn new(
        events: Vec<Event>,
        width: u32,
        height: u32,
        t_begin: i64,
        t_end: i64,
    ) -> Result<Self> {
        if t_begin > t_end {
            return Err(Error::InvalidEvent(format!(
                "stream span [{t_begin}, {t_end}] is reversed"
            )));
        }
        let mut prev = t_begin;
        for (k, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::InvalidEvent(format!(
                    "event {k} at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.t < prev {
                return Err(Error::InvalidEvent(format!(
                    "event {k} at t={} precedes t={prev}",
                    e.t
                )));
            }
            prev = e.t;
        }
        if prev > t_end {
            return Err(Error::InvalidEvent(format!(
                "event at t={prev} after stream end {t_end}"
            )));
        }
        Ok(Self {
            events,
            width,
            height,
            t_begin,
            t_end,
        })
    }

    pub fn empty(width: u32, height: u32, t_begin: i64, t_end: i64) -> Result<Self> {
        Self::new(Vec::new(), width, height, t_begin, t_end)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn t_begin(&self) -> i64 {
        self.t_begin
    }

    pub fn t_end(&self) -> i64 {
        self.t_end
    }

    /// Events with `t_start <= t < t_end`.
    pub fn window(&self, t_start: i64, t_end: i64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < t_start);
        let hi = self.events.partition_point(|e| e.t < t_end);
        &self.events[lo..hi.max(lo)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_rejects_unsorted_and_out_of_bounds() {
        let p = Polarity::Positive;
        assert!(EventStream::new(vec![Event::new(5, 0, 0, p), Event::new(4, 0, 0, p)], 2, 2, 0, 10).is_err());
        assert!(EventStream::new(vec![Event::new(5, 2, 0, p)], 2, 2, 0, 10).is_err());
        assert!(EventStream::new(vec![Event::new(11, 0, 0, p)], 2, 2, 0, 10).is_err());
        assert!(EventStream::new(vec![Event::new(10, 1, 1, p)], 2, 2, 0, 10).is_ok());
    }

    #[test]
    fn window_is_half_open() {
        let p = Polarity::Negative;
        let s = EventStream::new(
            (0..5).map(|t| Event::new(t * 10, 0, 0, p)).collect(),
            1,
            1,
            0,
            40,
        )
        .unwrap();
        let w: Vec<i64> = s.window(10, 30).iter().map(|e| e.t).collect();
        assert_eq!(w, vec![10, 20]);
        assert!(s.window(41, 50).is_empty());
    }
}
