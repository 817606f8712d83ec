use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::write_atomic;
use crate::simulator::ScenarioKind;

pub const BOX_CSV_HEADER: &str = "t_us,x,y,w,h";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedBox {
    pub t: i64,
    pub bbox: BBox,
}

/// Timestamped boxes, strictly increasing in time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    boxes: Vec<TimedBox>,
    pub attribute: Option<ScenarioKind>,
}

impl TrackResult {
    pub fn new(boxes: Vec<TimedBox>, attribute: Option<ScenarioKind>) -> Result<Self> {
        if let Some(w) = boxes.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(Error::Config(format!(
                "track timestamps must increase: {} then {}",
                w[0].t, w[1].t
            )));
        }
        Ok(Self { boxes, attribute })
    }

    pub fn boxes(&self) -> &[TimedBox] {
        &self.boxes
    }

    pub fn times(&self) -> Vec<i64> {
        self.boxes.iter().map(|b| b.t).collect()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Box at exactly `t`, if recorded.
    pub fn at(&self, t: i64) -> Option<BBox> {
        self.boxes
            .binary_search_by_key(&t, |b| b.t)
            .ok()
            .map(|i| self.boxes[i].bbox)
    }

    pub fn with_attribute(mut self, attribute: Option<ScenarioKind>) -> Self {
        self.attribute = attribute;
        self
    }
}

/// `t_us,x,y,w,h` rows; floats are written with shortest round-trip
/// formatting.
pub fn write_box_csv(track: &TrackResult) -> String {
    let mut out = String::new();
    out.push_str(BOX_CSV_HEADER);
    out.push('\n');
    for b in track.boxes() {
        let _ = writeln!(out, "{},{},{},{},{}", b.t, b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h);
    }
    out
}

pub fn read_box_csv(text: &str, origin: &Path) -> Result<TrackResult> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == BOX_CSV_HEADER => {}
        _ => return Err(err(1, format!("expected header {BOX_CSV_HEADER:?}"))),
    }
    let mut boxes: Vec<TimedBox> = Vec::new();
    for (idx, raw) in lines {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(err(idx + 1, format!("expected 5 fields, found {}", f.len())));
        }
        let t = f[0]
            .parse::<i64>()
            .map_err(|_| err(idx + 1, format!("bad t_us {:?}", f[0])))?;
        let mut v = [0.0; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = f[k + 1]
                .parse::<f64>()
                .map_err(|_| err(idx + 1, format!("bad number {:?}", f[k + 1])))?;
        }
        let bbox = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| err(idx + 1, e.to_string()))?;
        if boxes.last().is_some_and(|b| b.t >= t) {
            return Err(err(idx + 1, format!("t_us {t} does not increase")));
        }
        boxes.push(TimedBox { t, bbox });
    }
    TrackResult::new(boxes, None)
}

pub fn save_track(track: &TrackResult, path: &Path) -> Result<()> {
    write_atomic(path, write_box_csv(track).as_bytes())
}

pub fn load_track(path: &Path) -> Result<TrackResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_box_csv(&text, path)
}
