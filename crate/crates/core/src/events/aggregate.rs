use super::{AccumulationMode, EventStream, Polarity};
use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const POSITIVE_PIXEL: u8 = 255;
pub const NEGATIVE_PIXEL: u8 = 0;
/// `floor((0 + 1) / 2 * 255)`: the value of a pixel that received no event.
pub const NEUTRAL_PIXEL: u8 = 127;

/// Events of a half-open window `[t_start, t_end)` collapsed to one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventFrame {
    pub image: GrayImage,
    pub t_start: i64,
    pub t_end: i64,
    pub mode: Option<AccumulationMode>,
}

impl EventFrame {
    /// A frame with no events, as used when the event modality is dropped.
    pub fn neutral(width: usize, height: usize, t_start: i64, t_end: i64) -> Self {
        Self {
            image: GrayImage::filled(width, height, NEUTRAL_PIXEL),
            t_start,
            t_end,
            mode: None,
        }
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn pixels(&self) -> &[u8] {
        self.image.pixels()
    }

    pub fn with_mode(mut self, mode: AccumulationMode) -> Self {
        self.mode = Some(mode);
        self
    }
}

#[inline]
fn pixel_value(p: Polarity) -> u8 {
    // floor((p + 1) / 2 * 255) for p = +/-1
    match p {
        Polarity::Positive => POSITIVE_PIXEL,
        Polarity::Negative => NEGATIVE_PIXEL,
    }
}

/// Aggregates the events in `[t_start, t_end)` into an event frame.
///
/// Several events at one pixel resolve to the polarity of the latest one;
/// equal timestamps fall back to stream order.
pub fn aggregate_events(stream: &EventStream, t_start: i64, t_end: i64) -> Result<EventFrame> {
    if t_start >= t_end {
        return Err(Error::EmptyWindow {
            start: t_start,
            end: t_end,
        });
    }
    if t_start < stream.t_begin() || t_end > stream.t_end() {
        return Err(Error::WindowOutOfSpan {
            start: t_start,
            end: t_end,
            span_start: stream.t_begin(),
            span_end: stream.t_end(),
        });
    }
    let width = stream.width() as usize;
    let height = stream.height() as usize;
    let mut image = GrayImage::filled(width, height, NEUTRAL_PIXEL);
    for e in stream.window(t_start, t_end) {
        image.set(e.x as usize, e.y as usize, pixel_value(e.p));
    }
    Ok(EventFrame {
        image,
        t_start,
        t_end,
        mode: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Event;

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream::new(events, 5, 4, 0, 100).unwrap()
    }

    #[test]
    fn empty_window_is_neutral() {
        let f = aggregate_events(&stream(vec![]), 0, 30).unwrap();
        assert!(f.pixels().iter().all(|&v| v == 127));
    }

    #[test]
    fn single_positive_event() {
        let s = stream(vec![Event::new(5, 3, 2, Polarity::Positive)]);
        let f = aggregate_events(&s, 0, 30).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                let want = if (x, y) == (3, 2) { 255 } else { 127 };
                assert_eq!(f.image.get(x, y), want);
            }
        }
    }

    #[test]
    fn last_event_wins() {
        let s = stream(vec![
            Event::new(10, 1, 1, Polarity::Positive),
            Event::new(20, 1, 1, Polarity::Negative),
        ]);
        assert_eq!(aggregate_events(&s, 0, 30).unwrap().image.get(1, 1), 0);
        // the later event falls outside a shorter window
        assert_eq!(aggregate_events(&s, 0, 20).unwrap().image.get(1, 1), 255);
    }

    #[test]
    fn same_timestamp_ties_follow_stream_order() {
        let s = stream(vec![
            Event::new(10, 0, 0, Polarity::Negative),
            Event::new(10, 0, 0, Polarity::Positive),
        ]);
        assert_eq!(aggregate_events(&s, 0, 30).unwrap().image.get(0, 0), 255);
    }

    #[test]
    fn window_errors() {
        let s = stream(vec![]);
        assert!(matches!(aggregate_events(&s, 10, 10), Err(Error::EmptyWindow { .. })));
        let err = aggregate_events(&s, 50, 150).unwrap_err();
        assert!(err.to_string().contains("[0, 100]"), "{err}");
        assert!(aggregate_events(&s, -1, 10).is_err());
    }
}
