//! Template matching over fused features, box refinement by predicted
//! overlap, the training loss, training, and sequence tracking.

mod loss;
mod track;
mod train;

pub use loss::{classification_loss, compute_loss, gaussian_label, loss_on_tape, LossConfig, LossParts};
pub use track::{paired_frame_index, track_interpolated, track_sequence, Modality, TrackInput};
pub use train::{
    build_training_set, train, EpochLog, Optimizer, TrainConfig, TrainOutcome, TRAIN_SEED_BASE,
};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afnet::{
    he_weight, load_checkpoint, save_checkpoint, Afnet, ArchConfig, Bound, NormState, ParamSet, FEATURE_STRIDE,
};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::{sample_points, ConvSpec, SamplePlan, Tape, Tensor, Var};

/// Side of the resampled search and template crops.
pub const CROP_PIXELS: usize = 64;
/// Crop side relative to the box.
pub const SEARCH_FACTOR: f64 = 4.0;
/// Template kernel side `k`, in feature cells.
pub const TEMPLATE_CELLS: usize = 4;
/// Samples per side when pooling a box for the IoU head.
pub const ROI_CELLS: usize = 6;
/// Side of the pooled region relative to the box.
pub const ROI_CONTEXT: f64 = 2.0;
/// Fraction of the refined log-size change applied per tracking step.
pub const SCALE_RATE: f64 = 0.1;
/// Candidates scored per refinement.
pub const CANDIDATES: usize = 16;
const ZNCC_EPS: f64 = 1e-6;
const JITTER_SEED: u64 = 0x6a69_7474_6572;

/// Feature cells per crop side.
pub const FEATURE_CELLS: usize = CROP_PIXELS / FEATURE_STRIDE;
/// Score map side.
pub const SCORE_CELLS: usize = FEATURE_CELLS + 1;

/// A square image region that is resampled to `CROP_PIXELS` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crop {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl Crop {
    /// `SEARCH_FACTOR` times the box, centered on it, shifted to stay inside
    /// a `width x height` image where it fits.
    pub fn around(b: &BBox, width: usize, height: usize) -> Crop {
        let side = SEARCH_FACTOR * (b.w * b.h).sqrt();
        let (cx, cy) = b.center();
        let place = |c: f64, n: usize| {
            let n = n as f64;
            if side >= n {
                (n - side) / 2.0
            } else {
                (c - side / 2.0).clamp(0.0, n - side)
            }
        };
        Crop {
            x0: place(cx, width),
            y0: place(cy, height),
            side,
        }
    }

    /// Crop pixels per image pixel.
    pub fn scale(&self) -> f64 {
        CROP_PIXELS as f64 / self.side
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        let s = self.scale();
        BBox {
            x: (b.x - self.x0) * s,
            y: (b.y - self.y0) * s,
            w: b.w * s,
            h: b.h * s,
        }
    }

    pub fn to_image(&self, b: &BBox) -> BBox {
        let s = self.scale();
        BBox {
            x: b.x / s + self.x0,
            y: b.y / s + self.y0,
            w: b.w / s,
            h: b.h / s,
        }
    }

    /// Adds a row sampling this crop from batch item `batch` of an image
    /// tensor.
    pub fn push_to(&self, plan: &mut SamplePlan, batch: usize) {
        plan.push_box(batch, self.y0, self.x0, self.side, self.side);
    }
}

/// A crop-pixel box in feature-cell units: cell `j` is centered on crop
/// pixel `4 j`.
pub fn box_to_cells(b: &BBox) -> BBox {
    let s = FEATURE_STRIDE as f64;
    let shift = 0.5 - 0.5 / s;
    BBox {
        x: b.x / s + shift,
        y: b.y / s + shift,
        w: b.w / s,
        h: b.h / s,
    }
}

/// Crop-pixel position of the box center that score index `o` stands for.
pub fn score_to_crop(o: f64) -> f64 {
    let s = FEATURE_STRIDE as f64;
    s * o - (0.5 * s - 0.5)
}

/// Inverse of [`score_to_crop`].
pub fn crop_to_score(p: f64) -> f64 {
    let s = FEATURE_STRIDE as f64;
    (p + 0.5 * s - 0.5) / s
}

/// Samples `crops` from the `(1, 1, H, W)` image tensor; returns
/// `(len, 1, CROP_PIXELS, CROP_PIXELS)`.
pub fn crop_images(image: &Tensor, crops: &[Crop]) -> Result<Tensor> {
    let mut plan = SamplePlan::new(CROP_PIXELS, CROP_PIXELS);
    for c in crops {
        c.push_to(&mut plan, 0);
    }
    sample_points(image, &plan)
}

/// Zero-normalized cross-correlation of per-sample `(N, C, k, k)` kernels
/// over `(N, C, H, W)` features, padding `k / 2`. Values lie in `[-1, 1]`;
/// windows without variance score 0.
pub fn zncc(tape: &mut Tape, search: Var, kernel: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(search).dims4()?;
    let (kn, kc, k, k2) = tape.value(kernel).dims4()?;
    if kn != n || kc != c || k != k2 {
        return Err(Error::Shape(format!(
            "kernel {:?} does not match search features {:?}",
            tape.value(kernel).shape(),
            tape.value(search).shape()
        )));
    }
    let count = (c * k * k) as f64;
    let flat = tape.reshape(kernel, [n, 1, c * k, k])?;
    let mean = tape.adaptive_avg_pool(flat, 1, 1)?;
    let centered = tape.sub(flat, mean)?;
    let sq = tape.mul(centered, centered)?;
    let msq = tape.adaptive_avg_pool(sq, 1, 1)?;
    let energy = tape.scale(msq, count);
    let energy = tape.add_scalar(energy, ZNCC_EPS);
    let norm = tape.sqrt(energy)?;
    let unit = tape.div(centered, norm)?;
    let unit = tape.reshape(unit, [n, c, k, k])?;

    let pad = k / 2;
    let grouped = tape.reshape(search, [1, n * c, h, w])?;
    let num = tape.conv2d(grouped, unit, None, ConvSpec::new(1, pad).with_groups(n))?;
    let (oh, ow) = (tape.value(num).shape()[2], tape.value(num).shape()[3]);
    let num = tape.reshape(num, [n, 1, oh, ow])?;

    let ones = tape.constant(Tensor::full([1, c, k, k], 1.0));
    let s1 = tape.conv2d(search, ones, None, ConvSpec::new(1, pad))?;
    let sq = tape.mul(search, search)?;
    let s2 = tape.conv2d(sq, ones, None, ConvSpec::new(1, pad))?;
    let s1sq = tape.mul(s1, s1)?;
    let s1sq = tape.scale(s1sq, 1.0 / count);
    let var = tape.sub(s2, s1sq)?;
    let var = tape.relu(var);
    let var = tape.add_scalar(var, ZNCC_EPS);
    let den = tape.sqrt(var)?;
    tape.div(num, den)
}

/// Predicted IoU of candidate boxes. `rois` and `template_rois` hold
/// `(batch item, box in feature cells)` for the search and template
/// features; the output is `(R, 1, 1, 1)` in `(0, 1)`.
pub fn iou_head(
    tape: &mut Tape,
    p: &Bound,
    search: Var,
    template: Var,
    rois: &[(usize, BBox)],
    template_rois: &[(usize, BBox)],
) -> Result<Var> {
    if rois.len() != template_rois.len() {
        return Err(Error::Shape(format!(
            "{} candidate rois but {} template rois",
            rois.len(),
            template_rois.len()
        )));
    }
    let plan = |list: &[(usize, BBox)]| {
        let mut plan = SamplePlan::new(ROI_CELLS, ROI_CELLS);
        for &(i, b) in list {
            let (h, w) = (b.h * ROI_CONTEXT, b.w * ROI_CONTEXT);
            let (cx, cy) = b.center();
            plan.push_box(i, cy - h / 2.0, cx - w / 2.0, h, w);
        }
        plan
    };
    let a = tape.sample_points(search, plan(rois))?;
    let b = tape.sample_points(template, plan(template_rois))?;
    let cat = tape.concat_channels(&[a, b])?;
    let (r, c2, _, _) = tape.value(cat).dims4()?;
    let flat = tape.reshape(cat, [r, c2 * ROI_CELLS * ROI_CELLS, 1, 1])?;
    let one = ConvSpec::new(1, 0);
    let hidden = crate::afnet::conv(tape, p, "head.fc1", flat, one)?;
    let hidden = tape.relu(hidden);
    let out = crate::afnet::conv(tape, p, "head.fc2", hidden, one)?;
    Ok(tape.sigmoid(out))
}

/// Relative candidate offsets `(dx, dy, log sw, log sh)`; entry 0 keeps the
/// prior.
pub fn jitter_table() -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(JITTER_SEED);
    let mut out = vec![[0.0; 4]];
    out.extend((1..CANDIDATES).map(|_| {
        [
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
        ]
    }));
    out
}

/// The prior plus its jittered variants; sizes scale geometrically about
/// the center, so every candidate has positive size.
pub fn candidates(prior: &BBox) -> Vec<BBox> {
    let (cx, cy) = prior.center();
    jitter_table()
        .into_iter()
        .map(|[dx, dy, sw, sh]| {
            let (w, h) = (prior.w * sw.exp(), prior.h * sh.exp());
            BBox {
                x: cx + dx * prior.w - w / 2.0,
                y: cy + dy * prior.h - h / 2.0,
                w,
                h,
            }
        })
        .collect()
}

/// The first candidate with the highest score.
pub fn select_best(candidates: &[BBox], scores: &[f64]) -> Result<BBox> {
    if candidates.is_empty() || candidates.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} candidates with {} scores",
            candidates.len(),
            scores.len()
        )));
    }
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > scores[best] { i } else { best });
    Ok(candidates[best])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchConfig,
    /// Hidden width of the IoU head.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            head_hidden: 32,
        }
    }
}

/// Feature extractor plus IoU head.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub afnet: Afnet,
    pub head: ParamSet,
}

impl TrackerModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let afnet = Afnet::init(config.arch, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
        let c = config.arch.channels;
        let fan_in = 2 * c * ROI_CELLS * ROI_CELLS;
        let mut head = ParamSet::new();
        head.insert("head.fc1.w", he_weight(&mut rng, config.head_hidden, fan_in, 1));
        head.insert("head.fc1.b", Tensor::zeros([config.head_hidden]));
        head.insert("head.fc2.w", he_weight(&mut rng, 1, config.head_hidden, 1));
        head.insert("head.fc2.b", Tensor::zeros([1]));
        Ok(Self {
            config,
            seed,
            afnet,
            head,
        })
    }

    /// Every trainable tensor, extractor and head together.
    pub fn params(&self) -> ParamSet {
        let mut all = self.afnet.params.clone();
        all.extend(self.head.clone());
        all
    }

    /// Writes back tensors produced by [`params`](Self::params).
    pub fn set_params(&mut self, all: ParamSet) -> Result<()> {
        for (name, t) in all.iter() {
            let slot = if name.starts_with("head.") {
                self.head.get_mut(name)?
            } else {
                self.afnet.params.get_mut(name)?
            };
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!("{name}: {:?} vs {:?}", slot.shape(), t.shape())));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, self.seed, &self.params(), &self.afnet.running)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, params, running) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(manifest.config).map_err(|e| Error::json(path, e))?;
        let mut model = Self::init(config, manifest.seed)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params()
            .iter()
            .map(|(k, t)| (k.to_string(), t.shape().to_vec()))
            .collect();
        let found: Vec<(String, Vec<usize>)> = params.iter().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect();
        if expected != found {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "parameter names or shapes do not match the configured architecture".into(),
            });
        }
        model.set_params(params)?;
        for (name, t) in running.iter() {
            *model.afnet.running.get_mut(name)? = t.clone();
        }
        Ok(model)
    }

    /// Fused features `(N, C, 16, 16)` of crop batches in eval mode.
    pub fn crop_features(&self, frames: &Tensor, events: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.afnet.params.bind(&mut tape, false);
        let f = tape.constant(frames.clone());
        let e = tape.constant(events.clone());
        let mut norms = NormState::eval(&self.afnet.running);
        let out = self.afnet.forward(&mut tape, &p, &mut norms, f, e)?;
        Ok(tape.value(out).clone())
    }
}

/// What the tracker keeps from the first frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateState {
    /// Fused features of the template crop, `(1, C, 16, 16)`.
    pub features: Tensor,
    pub bbox: BBox,
    /// The target box in feature cells of the template crop.
    pub cells: BBox,
    /// Target kernel `(1, C, k, k)`.
    pub kernel: Tensor,
}

/// Samples a `k x k` kernel from the box region of template features.
pub fn template_kernel(features: &Tensor, cells: &BBox) -> Result<Tensor> {
    let mut plan = SamplePlan::new(TEMPLATE_CELLS, TEMPLATE_CELLS);
    plan.push_box(0, cells.y, cells.x, cells.h, cells.w);
    sample_points(features, &plan)
}

/// Builds the template from full-size `(1, 1, H, W)` frame and event
/// tensors.
pub fn init_template(model: &TrackerModel, frame: &Tensor, events: &Tensor, bbox: BBox) -> Result<TemplateState> {
    let (_, _, h, w) = frame.dims4()?;
    if !bbox.inside(w as f64, h as f64) {
        return Err(Error::BadBox(format!("{bbox:?} is not inside the {w}x{h} image")));
    }
    let crop = Crop::around(&bbox, w, h);
    let features = model.crop_features(&crop_images(frame, &[crop])?, &crop_images(events, &[crop])?)?;
    let cells = box_to_cells(&crop.to_crop(&bbox));
    let kernel = template_kernel(&features, &cells)?;
    Ok(TemplateState {
        features,
        bbox,
        cells,
        kernel,
    })
}

/// Correlation scores of one search crop, row-major `SCORE_CELLS` square.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub size: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    /// First maximum in row-major order, refined by a parabola through its
    /// neighbours along each axis. Returns `(row, col)` in score cells.
    pub fn peak(&self) -> (f64, f64) {
        let n = self.size;
        let v = &self.values;
        let best = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, &s)| if s > v[best] { i } else { best });
        let (r, c) = (best / n, best % n);
        let refine = |lo: Option<f64>, mid: f64, hi: Option<f64>| match (lo, hi) {
            (Some(l), Some(h)) => {
                let den = l - 2.0 * mid + h;
                if den < 0.0 {
                    (0.5 * (l - h) / den).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        let at = |r: usize, c: usize| v[r * n + c];
        let dr = refine(r.checked_sub(1).map(|r| at(r, c)), at(r, c), (r + 1 < n).then(|| at(r + 1, c)));
        let dc = refine(c.checked_sub(1).map(|c| at(r, c)), at(r, c), (c + 1 < n).then(|| at(r, c + 1)));
        (r as f64 + dr, c as f64 + dc)
    }
}

/// Normalized cross-correlation of the template kernel over `(1, C, H, W)`
/// search features.
pub fn classify(state: &TemplateState, search: &Tensor) -> Result<ScoreMap> {
    let mut tape = Tape::new();
    let s = tape.constant(search.clone());
    let k = tape.constant(state.kernel.clone());
    let out = zncc(&mut tape, s, k)?;
    let t = tape.value(out);
    let (_, _, h, w) = t.dims4()?;
    if h != w {
        return Err(Error::Shape(format!("score map is {h}x{w}")));
    }
    Ok(ScoreMap {
        size: h,
        values: t.data().to_vec(),
    })
}

/// Picks the candidate around `prior` (crop pixels) with the highest
/// predicted IoU.
pub fn refine_box(model: &TrackerModel, state: &TemplateState, search: &Tensor, prior: &BBox) -> Result<BBox> {
    let cands = candidates(prior);
    let mut tape = Tape::new();
    let p = model.head.bind(&mut tape, false);
    let s = tape.constant(search.clone());
    let t = tape.constant(state.features.clone());
    let rois: Vec<(usize, BBox)> = cands.iter().map(|b| (0, box_to_cells(b))).collect();
    let trois = vec![(0, state.cells); cands.len()];
    let out = iou_head(&mut tape, &p, s, t, &rois, &trois)?;
    select_best(&cands, tape.value(out).data())
}
