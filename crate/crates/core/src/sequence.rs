//! A recorded sequence on disk: manifest, PGM frames, event CSV and
//! ground-truth boxes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::eval::{load_track, save_track, TimedBox, TrackResult};
use crate::events::{load_event_stream, save_event_stream, EventStream, RateSchedule};
use crate::image::{write_atomic, GrayImage};
use crate::simulator::{emit_events, ground_truth_box, render_intensity, SceneConfig, ScenarioKind};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub sensor_width: u32,
    pub sensor_height: u32,
    pub gamma_f: u32,
    pub gamma_e: u32,
    pub t_begin: i64,
    pub t_end: i64,
    /// Target box at the first frame.
    pub init_box: BBox,
    /// Frame paths relative to the manifest.
    pub frames: Vec<String>,
    pub frame_times: Vec<i64>,
    pub events: String,
    pub ground_truth: String,
    #[serde(default)]
    pub scenario: Option<ScenarioKind>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub manifest: SequenceManifest,
    pub frames: Vec<GrayImage>,
    pub events: EventStream,
    /// One box per event-frame tick after the first frame.
    pub ground_truth: TrackResult,
}

impl Sequence {
    pub fn schedule(&self) -> Result<RateSchedule> {
        RateSchedule::new(self.manifest.gamma_f, self.manifest.gamma_e)
    }

    /// Renders every frame, emits the full event stream and samples the
    /// ground truth at every tick.
    pub fn simulate(scene: &SceneConfig) -> Result<Sequence> {
        scene.validate()?;
        let schedule = scene.schedule;
        let intervals = scene.frame_intervals();
        if intervals == 0 {
            return Err(Error::Scene("duration shorter than one frame interval".into()));
        }
        let frame_times = schedule.frame_times(intervals + 1);
        let frames = frame_times
            .iter()
            .map(|&t| render_intensity(scene, t).map(|f| f.image))
            .collect::<Result<Vec<_>>>()?;
        let t_end = *frame_times.last().expect("at least two frames");
        let events = emit_events(scene, 0, t_end)?;
        let ticks = (intervals as i64) * schedule.ratio() as i64;
        let boxes = (1..=ticks)
            .map(|m| {
                let t = schedule.tick_time(m);
                Ok(TimedBox {
                    t,
                    bbox: ground_truth_box(scene, t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = SequenceManifest {
            sensor_width: scene.width,
            sensor_height: scene.height,
            gamma_f: schedule.gamma_f(),
            gamma_e: schedule.gamma_e(),
            t_begin: 0,
            t_end,
            init_box: ground_truth_box(scene, 0)?,
            frames: (0..frame_times.len()).map(|k| format!("frames/{k:06}.pgm")).collect(),
            frame_times,
            events: "events.csv".into(),
            ground_truth: "groundtruth.csv".into(),
            scenario: Some(scene.kind),
            seed: Some(scene.seed),
        };
        Ok(Sequence {
            manifest,
            frames,
            events,
            ground_truth: TrackResult::new(boxes, Some(scene.kind))?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let m = &self.manifest;
        for (rel, frame) in m.frames.iter().zip(&self.frames) {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            frame.save_pgm(&path)?;
        }
        save_event_stream(&self.events, &dir.join(&m.events))?;
        save_track(&self.ground_truth, &dir.join(&m.ground_truth))?;
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_vec_pretty(m).map_err(|e| Error::json(&path, e))?;
        json.push(b'\n');
        write_atomic(&path, &json)
    }

    pub fn load(dir: &Path) -> Result<Sequence> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: SequenceManifest = serde_json::from_slice(&text).map_err(|e| Error::json(&path, e))?;
        let schedule = RateSchedule::new(manifest.gamma_f, manifest.gamma_e)?;
        if manifest.frames.len() != manifest.frame_times.len() || manifest.frames.len() < 2 {
            return Err(Error::Config(format!(
                "{}: need matching frame and frame_times lists with at least two entries",
                path.display()
            )));
        }
        if let Some(&t) = manifest.frame_times.iter().find(|&&t| schedule.tick_index(t).is_none()) {
            return Err(Error::OffGrid {
                t,
                reason: "frame time is not an event-frame tick".into(),
            });
        }
        let frames = manifest
            .frames
            .iter()
            .map(|rel| {
                let f = GrayImage::load_pgm(&dir.join(rel))?;
                if (f.width(), f.height()) != (manifest.sensor_width as usize, manifest.sensor_height as usize) {
                    return Err(Error::Shape(format!(
                        "{rel} is {}x{}, sensor is {}x{}",
                        f.width(),
                        f.height(),
                        manifest.sensor_width,
                        manifest.sensor_height
                    )));
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        let events = load_event_stream(
            &dir.join(&manifest.events),
            manifest.sensor_width,
            manifest.sensor_height,
            manifest.t_begin,
            manifest.t_end,
        )?;
        let ground_truth = load_track(&dir.join(&manifest.ground_truth))?.with_attribute(manifest.scenario);
        Ok(Sequence {
            manifest,
            frames,
            events,
            ground_truth,
        })
    }
}
