//! Synthetic co-located frame and event cameras watching a textured target.
//!
//! A scene is a textured square moving over a textured (possibly moving)
//! background. The conventional camera applies an exposure gain, additive
//! noise and an 8-bit ceiling; the event camera sees the underlying radiance
//! through `log(L + 1)` and is unaffected by exposure.

mod emit;
mod scenario;

pub use emit::{brute_force_events, emit_events, fine_time, FINE_STEPS_PER_TICK};
pub use scenario::{make_scenario, SENSOR_SIZE, TARGET_SIZE};

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::events::RateSchedule;
use crate::image::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Hdr,
    Ll,
    Fm,
    Nm,
    Sbm,
    Plain,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Hdr,
        ScenarioKind::Ll,
        ScenarioKind::Fm,
        ScenarioKind::Nm,
        ScenarioKind::Sbm,
        ScenarioKind::Plain,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::Hdr => "hdr",
            ScenarioKind::Ll => "ll",
            ScenarioKind::Fm => "fm",
            ScenarioKind::Nm => "nm",
            ScenarioKind::Sbm => "sbm",
            ScenarioKind::Plain => "plain",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}, expected one of hdr, ll, fm, nm, sbm, plain")))
    }
}

/// `base + amplitude * sin(2 pi u / period_x + phase_x) * cos(2 pi v / period_y + phase_y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: f64,
    pub amplitude: f64,
    pub period_x: f64,
    pub period_y: f64,
    pub phase_x: f64,
    pub phase_y: f64,
}

impl Texture {
    #[inline]
    pub fn value(&self, u: f64, v: f64) -> f64 {
        self.base
            + self.amplitude * (TAU * u / self.period_x + self.phase_x).sin() * (TAU * v / self.period_y + self.phase_y).cos()
    }
}

/// A timed top-left position of the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: i64,
    pub x: f64,
    pub y: f64,
}

/// Piecewise-linear target path; positions hold before the first and after
/// the last waypoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    pub fn position(&self, t: i64) -> (f64, f64) {
        let w = &self.waypoints;
        let k = w.partition_point(|p| p.t <= t);
        if k == 0 {
            return (w[0].x, w[0].y);
        }
        if k == w.len() {
            let last = w[k - 1];
            return (last.x, last.y);
        }
        let (a, b) = (w[k - 1], w[k]);
        let s = (t - a.t) as f64 / (b.t - a.t) as f64;
        (a.x + s * (b.x - a.x), a.y + s * (b.y - a.y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    pub gain: f64,
    /// Linear intensity mapped to the 8-bit ceiling.
    pub saturation: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub kind: ScenarioKind,
    pub width: u32,
    pub height: u32,
    /// Log-intensity step that triggers one event.
    pub contrast_threshold: f64,
    pub target_width: f64,
    pub target_height: f64,
    pub target_texture: Texture,
    pub trajectory: Trajectory,
    pub background: Texture,
    /// Background drift, pixels per second.
    pub background_velocity: [f64; 2],
    pub exposure: Exposure,
    pub schedule: RateSchedule,
    pub duration: i64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Scene(m));
        if self.contrast_threshold.is_nan() || self.contrast_threshold <= 0.0 {
            return fail(format!("contrast threshold must be positive, got {}", self.contrast_threshold));
        }
        if self.duration <= 0 {
            return fail(format!("duration must be positive, got {}", self.duration));
        }
        if self.width == 0 || self.height == 0 {
            return fail("sensor must be at least 1x1".into());
        }
        if !(self.target_width > 0.0 && self.target_height > 0.0) {
            return fail("target size must be positive".into());
        }
        if self.trajectory.waypoints.is_empty() {
            return fail("trajectory has no waypoints".into());
        }
        if self.trajectory.waypoints.windows(2).any(|p| p[1].t <= p[0].t) {
            return fail("trajectory waypoints must have increasing times".into());
        }
        for p in &self.trajectory.waypoints {
            let b = BBox::new(p.x, p.y, self.target_width, self.target_height)?;
            if !b.inside(self.width as f64, self.height as f64) {
                return fail(format!("target leaves the sensor at t = {} us", p.t));
            }
        }
        for tex in [&self.target_texture, &self.background] {
            if tex.base < tex.amplitude.abs() {
                return fail("texture would produce negative radiance".into());
            }
        }
        if !(self.exposure.gain >= 0.0 && self.exposure.saturation > 0.0 && self.exposure.noise_std >= 0.0) {
            return fail("exposure needs gain >= 0, saturation > 0, noise >= 0".into());
        }
        Ok(())
    }

    pub(crate) fn check_time(&self, t: i64) -> Result<()> {
        if t < 0 || t > self.duration {
            return Err(Error::TimeOutOfRange {
                t,
                duration: self.duration,
            });
        }
        Ok(())
    }

    /// Scene radiance at pixel `(x, y)` at time `t`, integrated over the
    /// pixel footprint for the target edge.
    #[inline]
    pub fn radiance(&self, x: usize, y: usize, t: i64) -> f64 {
        let (tx, ty) = self.trajectory.position(t);
        self.radiance_at(x, y, t, tx, ty)
    }

    #[inline]
    fn radiance_at(&self, x: usize, y: usize, t: i64, tx: f64, ty: f64) -> f64 {
        let (px, py) = (x as f64, y as f64);
        let overlap = |p: f64, lo: f64, len: f64| ((p + 1.0).min(lo + len) - p.max(lo)).clamp(0.0, 1.0);
        let cov = overlap(px, tx, self.target_width) * overlap(py, ty, self.target_height);
        let secs = t as f64 * 1e-6;
        let (ox, oy) = (self.background_velocity[0] * secs, self.background_velocity[1] * secs);
        let bg = self.background.value(px + 0.5 - ox, py + 0.5 - oy);
        if cov == 0.0 {
            return bg;
        }
        cov * self.target_texture.value(px + 0.5 - tx, py + 0.5 - ty) + (1.0 - cov) * bg
    }

    /// Radiance of every pixel, row-major.
    pub fn radiance_image(&self, t: i64) -> Vec<f64> {
        let (w, h) = (self.width as usize, self.height as usize);
        let (tx, ty) = self.trajectory.position(t);
        (0..w * h).map(|i| self.radiance_at(i % w, i / w, t, tx, ty)).collect()
    }

    /// Number of whole frame intervals in the scene.
    pub fn frame_intervals(&self) -> usize {
        let mut k = 0;
        while self.schedule.frame_time(k + 1) <= self.duration {
            k += 1;
        }
        k
    }
}

/// A conventional-camera frame: linear intensities plus the 8-bit view.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityImage {
    pub linear: Vec<f64>,
    pub image: GrayImage,
}

impl IntensityImage {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

fn noise_rng(seed: u64, t: i64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn quantize(linear: f64, saturation: f64) -> u8 {
    (linear.min(saturation) / saturation * 255.0).round().clamp(0.0, 255.0) as u8
}

/// The conventional camera's exposure of the scene at time `t`.
pub fn render_intensity(scene: &SceneConfig, t: i64) -> Result<IntensityImage> {
    scene.check_time(t)?;
    let e = scene.exposure;
    let mut linear: Vec<f64> = scene.radiance_image(t).into_iter().map(|r| r * e.gain).collect();
    if e.noise_std > 0.0 {
        let normal = Normal::new(0.0, e.noise_std).map_err(|err| Error::Scene(err.to_string()))?;
        let mut rng = noise_rng(scene.seed, t);
        for v in &mut linear {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }
    let pixels = linear.iter().map(|&v| quantize(v, e.saturation)).collect();
    let image = GrayImage::new(scene.width as usize, scene.height as usize, pixels)?;
    Ok(IntensityImage { linear, image })
}

pub fn ground_truth_box(scene: &SceneConfig, t: i64) -> Result<BBox> {
    scene.check_time(t)?;
    let (x, y) = scene.trajectory.position(t);
    BBox::new(x, y, scene.target_width, scene.target_height)
}
