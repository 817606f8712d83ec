//! Tracking metrics: success and precision curves, their summaries, pooled
//! attribute breakdowns, and the interpolation baseline.

mod track;

pub use track::{load_track, read_box_csv, save_track, write_box_csv, TimedBox, TrackResult, BOX_CSV_HEADER};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::simulator::ScenarioKind;

pub const SUCCESS_POINTS: usize = 21;
pub const PRECISION_POINTS: usize = 51;
pub const DEFAULT_RPR_THRESHOLD: f64 = 20.0;

/// Reported by the full model on its benchmark; kept for reference only.
pub const REFERENCE_FULL_MODEL_RSR: f64 = 0.584;
pub const REFERENCE_FULL_MODEL_RPR: f64 = 0.870;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    a.center_distance(b)
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_POINTS).map(|i| i as f64 / (SUCCESS_POINTS - 1) as f64).collect()
}

pub fn precision_thresholds() -> Vec<f64> {
    (0..PRECISION_POINTS).map(|d| d as f64).collect()
}

/// Per-timestamp overlap and center error of a prediction against ground
/// truth with identical timestamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub iou: Vec<f64>,
    pub error: Vec<f64>,
}

impl FrameScores {
    pub fn len(&self) -> usize {
        self.iou.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iou.is_empty()
    }

    pub fn extend(&mut self, other: &FrameScores) {
        self.iou.extend_from_slice(&other.iou);
        self.error.extend_from_slice(&other.error);
    }

    pub fn mean_error(&self) -> f64 {
        if self.error.is_empty() {
            return 0.0;
        }
        self.error.iter().sum::<f64>() / self.error.len() as f64
    }
}

pub fn frame_scores(result: &TrackResult, gt: &TrackResult) -> Result<FrameScores> {
    let (p, g) = (result.boxes(), gt.boxes());
    for (index, (a, b)) in p.iter().zip(g).enumerate() {
        if a.t != b.t {
            return Err(Error::TimestampMismatch {
                index,
                pred: a.t,
                gt: b.t,
            });
        }
    }
    if p.len() != g.len() {
        let index = p.len().min(g.len());
        return Err(Error::TimestampMismatch {
            index,
            pred: p.get(index).map_or(-1, |b| b.t),
            gt: g.get(index).map_or(-1, |b| b.t),
        });
    }
    Ok(FrameScores {
        iou: p.iter().zip(g).map(|(a, b)| iou(&a.bbox, &b.bbox)).collect(),
        error: p.iter().zip(g).map(|(a, b)| center_error(&a.bbox, &b.bbox)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// Fraction with IoU strictly above each of 0, 0.05, ..., 1.
    pub success: Vec<f64>,
    /// Fraction with center error at most each of 0, 1, ..., 50 px.
    pub precision: Vec<f64>,
}

impl Curves {
    pub fn from_scores(s: &FrameScores) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Empty("track result"));
        }
        let n = s.len() as f64;
        let success = success_thresholds()
            .into_iter()
            .map(|tau| s.iou.iter().filter(|&&v| v > tau).count() as f64 / n)
            .collect();
        let precision = precision_thresholds()
            .into_iter()
            .map(|d| s.error.iter().filter(|&&e| e <= d).count() as f64 / n)
            .collect();
        Ok(Self { success, precision })
    }

    /// Success value at threshold `tau` on the 0.05 grid.
    pub fn success_at(&self, tau: f64) -> f64 {
        let i = (tau * (SUCCESS_POINTS - 1) as f64).round() as usize;
        self.success[i.min(SUCCESS_POINTS - 1)]
    }

    /// Precision at `d` px, linear between integer grid points.
    pub fn precision_at(&self, d: f64) -> f64 {
        let d = d.clamp(0.0, (PRECISION_POINTS - 1) as f64);
        let lo = d.floor() as usize;
        let hi = (lo + 1).min(PRECISION_POINTS - 1);
        let s = d - lo as f64;
        self.precision[lo] * (1.0 - s) + self.precision[hi] * s
    }
}

pub fn success_precision_curves(result: &TrackResult, gt: &TrackResult) -> Result<Curves> {
    Curves::from_scores(&frame_scores(result, gt)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rsr: f64,
    pub rpr: f64,
    pub op50: f64,
    pub op75: f64,
    pub frames: usize,
    pub mean_center_error: f64,
    pub curves: Curves,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<ScenarioKind, MetricsReport>,
}

/// RSR is the mean of the success samples, RPR the precision at
/// `threshold_px`, and OP the success at 0.5 and 0.75.
pub fn summarize(curves: &Curves, threshold_px: f64) -> MetricsReport {
    MetricsReport {
        rsr: curves.success.iter().sum::<f64>() / curves.success.len() as f64,
        rpr: curves.precision_at(threshold_px),
        op50: curves.success_at(0.5),
        op75: curves.success_at(0.75),
        frames: 0,
        mean_center_error: 0.0,
        curves: curves.clone(),
        attributes: BTreeMap::new(),
    }
}

pub fn report_from_scores(scores: &FrameScores, threshold_px: f64) -> Result<MetricsReport> {
    let curves = Curves::from_scores(scores)?;
    Ok(MetricsReport {
        frames: scores.len(),
        mean_center_error: scores.mean_error(),
        ..summarize(&curves, threshold_px)
    })
}

pub fn evaluate(result: &TrackResult, gt: &TrackResult, threshold_px: f64) -> Result<MetricsReport> {
    report_from_scores(&frame_scores(result, gt)?, threshold_px)
}

/// Pools frames per attribute tag and overall. Results without a tag count
/// towards the overall report only.
pub fn attribute_breakdown(results: &[(TrackResult, TrackResult)], threshold_px: f64) -> Result<MetricsReport> {
    let mut all = FrameScores {
        iou: Vec::new(),
        error: Vec::new(),
    };
    let mut groups: BTreeMap<ScenarioKind, FrameScores> = BTreeMap::new();
    for (pred, gt) in results {
        let s = frame_scores(pred, gt)?;
        all.extend(&s);
        if let Some(kind) = pred.attribute.or(gt.attribute) {
            groups
                .entry(kind)
                .or_insert_with(|| FrameScores {
                    iou: Vec::new(),
                    error: Vec::new(),
                })
                .extend(&s);
        }
    }
    let mut report = report_from_scores(&all, threshold_px)?;
    for (kind, s) in groups {
        if !s.is_empty() {
            report.attributes.insert(kind, report_from_scores(&s, threshold_px)?);
        }
    }
    Ok(report)
}

/// Linear interpolation of each box field between the bracketing source
/// timestamps; targets outside the source range hold the nearest box.
pub fn interpolate_boxes_linear(low_rate: &TrackResult, target_times: &[i64]) -> Result<TrackResult> {
    let src = low_rate.boxes();
    if src.is_empty() {
        return Err(Error::Empty("low-rate track"));
    }
    let boxes = target_times
        .iter()
        .map(|&t| {
            let k = src.partition_point(|b| b.t <= t);
            let bbox = if k == 0 {
                src[0].bbox
            } else if k == src.len() || src[k - 1].t == t {
                src[k - 1].bbox
            } else {
                let (a, b) = (&src[k - 1], &src[k]);
                let s = (t - a.t) as f64 / (b.t - a.t) as f64;
                let lerp = |p: f64, q: f64| p + s * (q - p);
                BBox::new(
                    lerp(a.bbox.x, b.bbox.x),
                    lerp(a.bbox.y, b.bbox.y),
                    lerp(a.bbox.w, b.bbox.w),
                    lerp(a.bbox.h, b.bbox.h),
                )?
            };
            Ok(TimedBox { t, bbox })
        })
        .collect::<Result<Vec<_>>>()?;
    TrackResult::new(boxes, low_rate.attribute)
}

/// Keeps the boxes whose timestamps fall on the `rate` Hz clock.
pub fn subsample_to_rate(result: &TrackResult, rate: u32) -> Result<TrackResult> {
    if rate == 0 {
        return Err(Error::Config("rate must be positive".into()));
    }
    let on_grid = |t: i64| {
        let m = (t * rate as i64 + 999_999) / 1_000_000;
        (m * 1_000_000).div_euclid(rate as i64) == t
    };
    let boxes = result.boxes().iter().copied().filter(|b| on_grid(b.t)).collect();
    TrackResult::new(boxes, result.attribute)
}

/// Keeps the boxes on the `rate` Hz clock, optionally preceded by a known
/// `anchor`, and interpolates back onto every timestamp of `result`.
pub fn interpolate_from_rate(result: &TrackResult, rate: u32, anchor: Option<TimedBox>) -> Result<TrackResult> {
    let low = subsample_to_rate(result, rate)?;
    let boxes: Vec<TimedBox> = anchor
        .into_iter()
        .filter(|a| low.boxes().first().is_none_or(|b| a.t < b.t))
        .chain(low.boxes().iter().copied())
        .collect();
    let dense = interpolate_boxes_linear(&TrackResult::new(boxes, result.attribute)?, &result.times())?;
    Ok(dense.with_attribute(result.attribute))
}

/// Pools reports as if their frames had been scored together. Every summary
/// is linear in the curves, so the frame-weighted mean is exact.
pub fn merge_reports(reports: &[&MetricsReport]) -> Result<MetricsReport> {
    let total: usize = reports.iter().map(|r| r.frames).sum();
    if total == 0 {
        return Err(Error::Empty("report set"));
    }
    let weight = |r: &MetricsReport| r.frames as f64 / total as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(|r| weight(r) * f(r)).sum::<f64>();
    let curve = |f: &dyn Fn(&MetricsReport) -> &Vec<f64>, len: usize| -> Result<Vec<f64>> {
        if reports.iter().any(|r| f(r).len() != len) {
            return Err(Error::Shape("curves of different lengths".into()));
        }
        Ok((0..len).map(|i| reports.iter().map(|r| weight(r) * f(r)[i]).sum()).collect())
    };
    let mut kinds: BTreeMap<ScenarioKind, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        for (kind, sub) in &r.attributes {
            kinds.entry(*kind).or_default().push(sub);
        }
    }
    let attributes = kinds
        .into_iter()
        .map(|(kind, subs)| Ok((kind, merge_reports(&subs)?)))
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        rsr: mean(&|r| r.rsr),
        rpr: mean(&|r| r.rpr),
        op50: mean(&|r| r.op50),
        op75: mean(&|r| r.op75),
        frames: total,
        mean_center_error: mean(&|r| r.mean_center_error),
        curves: Curves {
            success: curve(&|r| &r.curves.success, SUCCESS_POINTS)?,
            precision: curve(&|r| &r.curves.precision, PRECISION_POINTS)?,
        },
        attributes,
    })
}
