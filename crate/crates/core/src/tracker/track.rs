use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{classify, SCALE_RATE, crop_images, init_template, refine_box, score_to_crop, Crop, TrackerModel};
use crate::afnet::image_tensor;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::eval::{interpolate_boxes_linear, TimedBox, TrackResult};
use crate::events::{
    accumulation_window, aggregate_events, AccumulationMode, EventFrame, EventStream, EventTick, RateSchedule,
    NEUTRAL_PIXEL,
};
use crate::image::GrayImage;
use crate::sequence::Sequence;
use crate::tensor::Tensor;

/// Which inputs the tracker sees. The dropped modality is replaced by a
/// neutral image: an all-127 event frame, or a mid-gray intensity frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Fused,
    FrameOnly,
    EventOnly,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Fused, Modality::FrameOnly, Modality::EventOnly];

    pub fn label(self) -> &'static str {
        match self {
            Modality::Fused => "fused",
            Modality::FrameOnly => "frame-only",
            Modality::EventOnly => "event-only",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?}")))
    }
}

/// Frame used at `tick`: the paired frame, except that frame-only tracking
/// takes the frame captured exactly at the tick when one exists.
pub fn paired_frame_index(tick: &EventTick, modality: Modality, ratio: u32) -> usize {
    if modality == Modality::FrameOnly && tick.n == ratio {
        tick.frame_index + 1
    } else {
        tick.frame_index
    }
}

/// Everything [`track_sequence`] reads.
#[derive(Clone, Copy, Debug)]
pub struct TrackInput<'a> {
    pub frames: &'a [GrayImage],
    pub frame_times: &'a [i64],
    pub events: &'a EventStream,
    pub schedule: RateSchedule,
    pub init_box: BBox,
}

impl<'a> TrackInput<'a> {
    pub fn from_sequence(seq: &'a Sequence) -> Result<Self> {
        Ok(Self {
            frames: &seq.frames,
            frame_times: &seq.manifest.frame_times,
            events: &seq.events,
            schedule: seq.schedule()?,
            init_box: seq.manifest.init_box,
        })
    }

    fn validate(&self) -> Result<(usize, usize)> {
        if self.frames.len() < 2 || self.frames.len() != self.frame_times.len() {
            return Err(Error::Schedule(format!(
                "{} frames with {} frame times; need at least two",
                self.frames.len(),
                self.frame_times.len()
            )));
        }
        if self.frame_times != self.schedule.frame_times(self.frames.len()) {
            return Err(Error::Schedule(format!(
                "frame times do not follow the {} Hz clock",
                self.schedule.gamma_f()
            )));
        }
        let (w, h) = (self.frames[0].width(), self.frames[0].height());
        if self.frames.iter().any(|f| (f.width(), f.height()) != (w, h))
            || (self.events.width() as usize, self.events.height() as usize) != (w, h)
        {
            return Err(Error::Shape("frames and event stream disagree on sensor size".into()));
        }
        Ok((w, h))
    }

    /// Frame and event tensors `(1, 1, H, W)` for one query.
    pub(crate) fn inputs(
        &self,
        modality: Modality,
        frame_index: usize,
        window: (i64, i64),
    ) -> Result<(Tensor, Tensor)> {
        let frame = &self.frames[frame_index];
        let (w, h) = (frame.width(), frame.height());
        let f = match modality {
            Modality::EventOnly => image_tensor(&GrayImage::filled(w, h, NEUTRAL_PIXEL)),
            _ => image_tensor(frame),
        };
        let ef = match modality {
            Modality::FrameOnly => EventFrame::neutral(w, h, window.0, window.1),
            _ => aggregate_events(self.events, window.0, window.1)?,
        };
        Ok((f, image_tensor(&ef.image)))
    }

    /// Template inputs: the first frame and the events up to the first tick.
    pub(crate) fn template_inputs(&self, modality: Modality) -> Result<(Tensor, Tensor)> {
        let window = accumulation_window(&self.schedule, self.frame_times[0], 1, AccumulationMode::SinceLastIntensityFrame)?;
        self.inputs(modality, 0, window)
    }
}

/// The refined center with a size moved only `SCALE_RATE` of the way, in
/// log space, from the prior to the refined size.
fn damp_scale(prior: &BBox, refined: &BBox) -> Result<BBox> {
    let (cx, cy) = refined.center();
    let step = |from: f64, to: f64| from * (to / from).powf(SCALE_RATE);
    BBox::from_center(cx, cy, step(prior.w, refined.w), step(prior.h, refined.h))
}

/// One box per event-frame tick after the first frame: the search crop is
/// centered on the previous box, the correlation peak gives the new center
/// and the IoU head picks the final box among jittered candidates.
pub fn track_sequence(
    model: &TrackerModel,
    input: &TrackInput,
    mode: AccumulationMode,
    modality: Modality,
) -> Result<TrackResult> {
    let (w, h) = input.validate()?;
    let (tf, te) = input.template_inputs(modality)?;
    let state = init_template(model, &tf, &te, input.init_box)?;
    let ratio = input.schedule.ratio();
    let mut prev = input.init_box;
    let mut out = Vec::new();
    for tick in input.schedule.ticks(input.frames.len()) {
        let window = accumulation_window(&input.schedule, input.frame_times[tick.frame_index], tick.n, mode)?;
        let (f, e) = input.inputs(modality, paired_frame_index(&tick, modality, ratio), window)?;
        let crop = Crop::around(&prev, w, h);
        let features = model.crop_features(&crop_images(&f, &[crop])?, &crop_images(&e, &[crop])?)?;
        let (r, c) = classify(&state, &features)?.peak();
        let s = crop.scale();
        let prior = BBox::from_center(score_to_crop(c), score_to_crop(r), prev.w * s, prev.h * s)?;
        let refined = refine_box(model, &state, &features, &prior)?;
        prev = crop.to_image(&damp_scale(&prior, &refined)?);
        out.push(TimedBox { t: tick.t, bbox: prev });
    }
    TrackResult::new(out, None)
}

/// Tracks at the intensity-frame rate only, then fills every event-frame
/// tick by linear interpolation between the initial box and the low-rate
/// boxes.
pub fn track_interpolated(
    model: &TrackerModel,
    input: &TrackInput,
    mode: AccumulationMode,
    modality: Modality,
) -> Result<TrackResult> {
    input.validate()?;
    let low = TrackInput {
        schedule: RateSchedule::new(input.schedule.gamma_f(), input.schedule.gamma_f())?,
        ..*input
    };
    let sparse = track_sequence(model, &low, mode, modality)?;
    let mut anchors = vec![TimedBox {
        t: input.frame_times[0],
        bbox: input.init_box,
    }];
    anchors.extend_from_slice(sparse.boxes());
    let times: Vec<i64> = input.schedule.ticks(input.frames.len()).iter().map(|k| k.t).collect();
    interpolate_boxes_linear(&TrackResult::new(anchors, None)?, &times)
}
