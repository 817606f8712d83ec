//! Frame and event feature extraction with alignment and cross-correlation
//! fusion, plus the early and middle fusion baselines.

mod blocks;
mod checkpoint;
mod params;

pub use blocks::{
    cross_correlation_fuse, cross_correlation_terms, deformable_align, event_guided_alignment, motion_aware,
    motion_modulate, style_transform,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_FORMAT};
pub use params::{update_running, Bound, NormState, ParamSet};
pub(crate) use params::{conv, he_weight};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventFrame;
use crate::image::GrayImage;
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// Output stride of every backbone.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Two backbones, alignment, then cross-correlation fusion.
    Afnet,
    /// The event frame is added to the intensity frame before one backbone.
    Ef,
    /// The two backbone outputs are added.
    Mf,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Afnet, FusionMode::Ef, FusionMode::Mf];

    pub fn label(self) -> &'static str {
        match self {
            FusionMode::Afnet => "afnet",
            FusionMode::Ef => "ef",
            FusionMode::Mf => "mf",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?} (expected afnet, ef or mf)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Feature channels `C`.
    pub channels: usize,
    /// Bottleneck ratio of the channel gate.
    pub reduction: usize,
    /// Dynamic kernel size `K`.
    pub kernel: usize,
    pub fusion: FusionMode,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            reduction: 4,
            kernel: 3,
            fusion: FusionMode::Afnet,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of reduction {}",
                self.channels, self.reduction
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("dynamic kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

const BACKBONE: [(usize, usize); 3] = [(8, 2), (16, 1), (0, 2)];

fn init_backbone(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, c: usize) {
    let mut c_in = 1;
    for (i, &(width, _)) in BACKBONE.iter().enumerate() {
        let c_out = if width == 0 { c } else { width };
        params.insert(format!("{prefix}.c{}.w", i + 1), he_weight(rng, c_out, c_in, 3));
        c_in = c_out;
    }
}

/// Three 3x3 conv + relu blocks with strides 2, 1, 2.
pub fn backbone(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &(_, stride)) in BACKBONE.iter().enumerate() {
        let y = conv(tape, p, &format!("{prefix}.c{}", i + 1), h, ConvSpec::new(stride, 1))?;
        h = tape.relu(y);
    }
    Ok(h)
}

/// Model weights plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Afnet {
    pub config: ArchConfig,
    pub params: ParamSet,
    pub running: ParamSet,
}

impl Afnet {
    /// He-initialized convolutions, a zero offset predictor, unit batch-norm
    /// scales. All convolutions are bias-free.
    pub fn init(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let mut params = ParamSet::new();
        let mut running = ParamSet::new();
        match config.fusion {
            FusionMode::Ef => init_backbone(&mut params, &mut rng, "backbone", c),
            FusionMode::Mf | FusionMode::Afnet => {
                init_backbone(&mut params, &mut rng, "frame", c);
                init_backbone(&mut params, &mut rng, "event", c);
            }
        }
        if config.fusion == FusionMode::Afnet {
            let (r, k) = (c / config.reduction, config.kernel);
            params.insert("ma.logit.w", he_weight(&mut rng, 1, c, 1));
            params.insert("ma.squeeze.w", he_weight(&mut rng, r, c, 1));
            params.insert("ma.excite.w", he_weight(&mut rng, c, r, 1));
            params.insert("da.reduce.w", he_weight(&mut rng, c, 2 * c, 1));
            params.insert("da.offset.w", Tensor::zeros([2 * k * k, c, 3, 3]));
            params.insert("da.deform.w", he_weight(&mut rng, c, c, 3));
            for side in ["frame", "event"] {
                params.insert(format!("cf.{side}.theta.w"), he_weight(&mut rng, c, c, 3));
                params::insert_bn(&mut params, &mut running, &format!("cf.{side}.bn"), c);
                params.insert(format!("cf.{side}.kernel.w"), he_weight(&mut rng, c, c, 3).scale(0.1));
                params.insert(format!("cf.{side}.out.w"), he_weight(&mut rng, c, c, 1));
            }
            params.insert("cf.fuse.w", he_weight(&mut rng, c, 2 * c, 1));
        }
        Ok(Self {
            config,
            params,
            running,
        })
    }

    /// Fused features at stride 4 for `(N, 1, H, W)` frames and event frames
    /// scaled to `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, norms: &mut NormState, frames: Var, events: Var) -> Result<Var> {
        if tape.value(frames).shape() != tape.value(events).shape() {
            return Err(Error::Shape(format!(
                "frame input {:?} vs event input {:?}",
                tape.value(frames).shape(),
                tape.value(events).shape()
            )));
        }
        match self.config.fusion {
            FusionMode::Ef => {
                let x = tape.add(frames, events)?;
                backbone(tape, p, "backbone", x)
            }
            FusionMode::Mf => {
                let ff = backbone(tape, p, "frame", frames)?;
                let fe = backbone(tape, p, "event", events)?;
                tape.add(ff, fe)
            }
            FusionMode::Afnet => {
                let ff = backbone(tape, p, "frame", frames)?;
                let fe = backbone(tape, p, "event", events)?;
                let (fda, fec) = event_guided_alignment(tape, p, ff, fe)?;
                cross_correlation_fuse(tape, p, norms, fda, fec, self.config.kernel)
            }
        }
    }

    /// Inference on one frame pair with running batch-norm statistics.
    pub fn extract_fused_features(&self, frame: &GrayImage, events: &EventFrame) -> Result<Tensor> {
        if (frame.width(), frame.height()) != (events.width(), events.height()) {
            return Err(Error::Shape(format!(
                "frame is {}x{}, event frame is {}x{}",
                frame.width(),
                frame.height(),
                events.width(),
                events.height()
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let f = tape.constant(image_tensor(frame));
        let e = tape.constant(image_tensor(&events.image));
        let mut norms = NormState::eval(&self.running);
        let out = self.forward(&mut tape, &p, &mut norms, f, e)?;
        Ok(tape.value(out).clone())
    }
}

/// `(1, 1, H, W)` tensor of pixel values divided by 255.
pub fn image_tensor(img: &GrayImage) -> Tensor {
    let data = img.pixels().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new([1, 1, img.height(), img.width()], data).expect("pixel count matches dimensions")
}
