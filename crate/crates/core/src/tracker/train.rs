use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    box_to_cells, crop_images, crop_to_score, gaussian_label, iou_head, loss_on_tape, paired_frame_index, zncc,
    Crop, LossConfig, LossParts, Modality, ModelConfig, TrackInput, TrackerModel, SCORE_CELLS, TEMPLATE_CELLS,
};
use crate::afnet::{update_running, NormState, ParamSet};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::events::{accumulation_window, AccumulationMode, EventTick};
use crate::sequence::Sequence;
use crate::simulator::{make_scenario, ScenarioKind};
use crate::tensor::{SamplePlan, Tape, Tensor};

/// Training scenes use seeds from here on, apart from evaluation seeds.
pub const TRAIN_SEED_BASE: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient descent.
    Gd,
    /// Adam with the usual moment decays 0.9 and 0.999.
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Moments {
    first: ParamSet,
    second: ParamSet,
    steps: i32,
}

impl Moments {
    fn new(like: &ParamSet) -> Self {
        let mut zero = like.clone();
        for (_, t) in zero.iter_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        Self {
            first: zero.clone(),
            second: zero,
            steps: 0,
        }
    }
}

/// Applies one update with gradients already scaled by the clip factor.
fn apply_update(params: &mut ParamSet, grads: &ParamSet, scale: f64, cfg: &TrainConfig, m: &mut Moments) -> Result<()> {
    m.steps += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(m.steps);
    let c2 = 1.0 - ADAM_BETA2.powi(m.steps);
    for (name, t) in params.iter_mut() {
        let g = grads.get(name)?.data();
        match cfg.optimizer {
            Optimizer::Gd => t.data_mut().iter_mut().zip(g).for_each(|(v, d)| *v -= cfg.step_size * scale * d),
            Optimizer::Adam => {
                let m1 = m.first.get_mut(name)?.data_mut();
                for (a, d) in m1.iter_mut().zip(g) {
                    *a = ADAM_BETA1 * *a + (1.0 - ADAM_BETA1) * scale * d;
                }
                let m2 = m.second.get_mut(name)?.data_mut();
                for (b, d) in m2.iter_mut().zip(g) {
                    *b = ADAM_BETA2 * *b + (1.0 - ADAM_BETA2) * (scale * d).powi(2);
                }
                let (m1, m2) = (m.first.get(name)?.data(), m.second.get(name)?.data());
                for ((v, a), b) in t.data_mut().iter_mut().zip(m1).zip(m2) {
                    *v -= cfg.step_size * (a / c1) / ((b / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    /// Global gradient norm cap.
    pub clip_norm: f64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub scenarios: Vec<ScenarioKind>,
    pub sequences_per_scenario: usize,
    /// Probability of dropping each modality from a sample.
    pub modality_dropout: f64,
    /// Maximum offset, in pixels, of the search crop center from the
    /// previous ground-truth center.
    pub search_jitter: f64,
    /// Maximum log-scale change of the box the search crop is built around.
    pub search_scale_jitter: f64,
    pub candidates_per_sample: usize,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            steps_per_epoch: 12,
            batch_size: 4,
            step_size: 1e-2,
            optimizer: Optimizer::Gd,
            clip_norm: 10.0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            scenarios: vec![ScenarioKind::Plain, ScenarioKind::Fm],
            sequences_per_scenario: 4,
            modality_dropout: 0.15,
            search_jitter: 8.0,
            search_scale_jitter: 0.2,
            candidates_per_sample: 8,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.model.arch.validate()?;
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, steps_per_epoch and batch_size must be positive");
        }
        if !(self.step_size > 0.0 && self.clip_norm > 0.0) {
            return bad("step_size and clip_norm must be positive");
        }
        if self.scenarios.is_empty() || self.sequences_per_scenario == 0 {
            return bad("training needs at least one scenario and sequence");
        }
        if !(0.0..=0.5).contains(&self.modality_dropout) {
            return bad("modality_dropout must lie in [0, 0.5]");
        }
        if !(self.search_jitter >= 0.0 && self.search_scale_jitter >= 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return bad("search_jitter must be nonnegative and bn_momentum in [0, 1]");
        }
        if self.candidates_per_sample == 0 || self.model.head_hidden == 0 {
            return bad("candidates_per_sample and head_hidden must be positive");
        }
        Ok(())
    }
}

/// One simulated sequence per (scenario, index), seeded apart from any
/// evaluation seed below [`TRAIN_SEED_BASE`].
pub fn build_training_set(cfg: &TrainConfig) -> Result<Vec<Sequence>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (k, &kind) in cfg.scenarios.iter().enumerate() {
        for j in 0..cfg.sequences_per_scenario {
            let seed = TRAIN_SEED_BASE + cfg.seed * 10_000 + (k * 1000 + j) as u64;
            out.push(Sequence::simulate(&make_scenario(kind, seed))?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Means over the epoch's steps.
    pub loss: f64,
    pub cls: f64,
    pub bb: f64,
}

impl EpochLog {
    pub fn csv(log: &[EpochLog]) -> String {
        let mut out = String::from("epoch,loss,cls,bb\n");
        for e in log {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.loss, e.cls, e.bb);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrackerModel,
    pub log: Vec<EpochLog>,
}

struct Sample {
    template_frame: Tensor,
    template_events: Tensor,
    template_cells: BBox,
    frame: Tensor,
    events: Tensor,
    label: Tensor,
    rois: Vec<BBox>,
    roi_iou: Vec<f64>,
}

fn draw_sample(rng: &mut ChaCha8Rng, data: &[Sequence], cfg: &TrainConfig) -> Result<Sample> {
    let seq = &data[rng.random_range(0..data.len())];
    let input = TrackInput::from_sequence(seq)?;
    let u: f64 = rng.random();
    let modality = if u < cfg.modality_dropout {
        Modality::EventOnly
    } else if u < 2.0 * cfg.modality_dropout {
        Modality::FrameOnly
    } else {
        Modality::Fused
    };
    let mode = if rng.random_bool(0.5) {
        AccumulationMode::SinceLastEventFrame
    } else {
        AccumulationMode::SinceLastIntensityFrame
    };
    let ticks: Vec<EventTick> = input.schedule.ticks(input.frames.len());
    let idx = rng.random_range(0..ticks.len());
    let tick = ticks[idx];
    let gt_boxes = seq.ground_truth.boxes();
    if gt_boxes.len() != ticks.len() {
        return Err(Error::Config("ground truth does not cover every tick".into()));
    }
    let gt = gt_boxes[idx].bbox;
    let prev = if idx == 0 { input.init_box } else { gt_boxes[idx - 1].bbox };
    let (w, h) = (input.frames[0].width(), input.frames[0].height());
    let (pcx, pcy) = prev.center();
    let j = cfg.search_jitter;
    let (jx, jy) = if j > 0.0 {
        (rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        (0.0, 0.0)
    };
    let sj = cfg.search_scale_jitter;
    let ls: f64 = if sj > 0.0 { rng.random_range(-sj..=sj) } else { 0.0 };
    let crop = Crop::around(&BBox::from_center(pcx + jx, pcy + jy, prev.w * ls.exp(), prev.h * ls.exp())?, w, h);

    let window = accumulation_window(&input.schedule, input.frame_times[tick.frame_index], tick.n, mode)?;
    let fi = paired_frame_index(&tick, modality, input.schedule.ratio());
    let (f, e) = input.inputs(modality, fi, window)?;
    let (tf, te) = input.template_inputs(modality)?;
    let tcrop = Crop::around(&input.init_box, w, h);

    let gt_crop = crop.to_crop(&gt);
    let (cx, cy) = gt_crop.center();
    let label = gaussian_label(SCORE_CELLS, crop_to_score(cy), crop_to_score(cx), cfg.loss.label_sigma);
    let (rois, roi_iou) = (0..cfg.candidates_per_sample)
        .map(|_| {
            let (dx, dy): (f64, f64) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            let (sw, sh): (f64, f64) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            let (bw, bh) = (gt_crop.w * sw.exp(), gt_crop.h * sh.exp());
            let b = BBox {
                x: cx + dx * gt_crop.w - bw / 2.0,
                y: cy + dy * gt_crop.h - bh / 2.0,
                w: bw,
                h: bh,
            };
            (box_to_cells(&b), b.iou(&gt_crop))
        })
        .unzip();
    Ok(Sample {
        template_frame: crop_images(&tf, &[tcrop])?,
        template_events: crop_images(&te, &[tcrop])?,
        template_cells: box_to_cells(&tcrop.to_crop(&input.init_box)),
        frame: crop_images(&f, &[crop])?,
        events: crop_images(&e, &[crop])?,
        label,
        rois,
        roi_iou,
    })
}

struct StepResult {
    parts: LossParts,
    grads: ParamSet,
    observed: Vec<(String, crate::tensor::BatchStats)>,
}

fn step(model: &TrackerModel, batch: &[Sample], cfg: &TrainConfig) -> Result<StepResult> {
    let stack = |f: fn(&Sample) -> &Tensor| -> Result<Tensor> {
        let items: Vec<Tensor> = batch.iter().map(|s| f(s).clone()).collect();
        Tensor::stack_batch(&items)
    };
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let tf = tape.constant(stack(|s| &s.template_frame)?);
    let te = tape.constant(stack(|s| &s.template_events)?);
    let sf = tape.constant(stack(|s| &s.frame)?);
    let se = tape.constant(stack(|s| &s.events)?);
    let mut observed = Vec::new();
    let mut norms = NormState::train(&model.afnet.running);
    let template = model.afnet.forward(&mut tape, &p, &mut norms, tf, te)?;
    observed.extend(norms.into_observed());
    let mut norms = NormState::train(&model.afnet.running);
    let search = model.afnet.forward(&mut tape, &p, &mut norms, sf, se)?;
    observed.extend(norms.into_observed());

    let mut plan = SamplePlan::new(TEMPLATE_CELLS, TEMPLATE_CELLS);
    for (i, s) in batch.iter().enumerate() {
        let c = s.template_cells;
        plan.push_box(i, c.y, c.x, c.h, c.w);
    }
    let kernel = tape.sample_points(template, plan)?;
    let scores = zncc(&mut tape, search, kernel)?;
    let label = stack(|s| &s.label)?;

    let rois: Vec<(usize, BBox)> = batch
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.rois.iter().map(move |&b| (i, b)))
        .collect();
    let trois: Vec<(usize, BBox)> = batch
        .iter()
        .enumerate()
        .flat_map(|(i, s)| std::iter::repeat_n((i, s.template_cells), s.rois.len()))
        .collect();
    let truth: Vec<f64> = batch.iter().flat_map(|s| s.roi_iou.iter().copied()).collect();
    let truth = Tensor::new([truth.len(), 1, 1, 1], truth)?;
    let pred = iou_head(&mut tape, &p, search, template, &rois, &trois)?;
    let (total, cls, bb) = loss_on_tape(&mut tape, scores, &label, pred, &truth, &cfg.loss)?;
    let parts = LossParts {
        cls: tape.value(cls).data()[0],
        bb: tape.value(bb).data()[0],
        total: tape.value(total).data()[0],
    };
    let grads = tape.backward(total)?;
    Ok(StepResult {
        parts,
        grads: p.gradients(&tape, &grads),
        observed,
    })
}

/// Gradient descent on the tracking loss over samples drawn from `data`.
/// Each step draws `batch_size` samples, takes one gradient step clipped to
/// `clip_norm`, and updates the batch-norm running statistics.
pub fn train(data: &[Sequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut model = TrackerModel::init(cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0074_7261_696e);
    let mut moments = Moments::new(&model.params());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0; 3];
        for s in 0..cfg.steps_per_epoch {
            let batch = (0..cfg.batch_size)
                .map(|_| draw_sample(&mut rng, data, cfg))
                .collect::<Result<Vec<_>>>()?;
            let r = step(&model, &batch, cfg)?;
            let norm = r.grads.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if !r.parts.total.is_finite() || !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: s,
                    loss: r.parts.total,
                });
            }
            let mut params = model.params();
            apply_update(&mut params, &r.grads, (cfg.clip_norm / norm).min(1.0), cfg, &mut moments)?;
            model.set_params(params)?;
            update_running(&mut model.afnet.running, &r.observed, cfg.bn_momentum)?;
            sums[0] += r.parts.total;
            sums[1] += r.parts.cls;
            sums[2] += r.parts.bb;
        }
        let n = cfg.steps_per_epoch as f64;
        log.push(EpochLog {
            epoch,
            loss: sums[0] / n,
            cls: sums[1] / n,
            bb: sums[2] / n,
        });
    }
    Ok(TrainOutcome { model, log })
}
