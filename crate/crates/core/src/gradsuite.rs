//! Finite-difference checks for every differentiable kernel and block.
//!
//! ```
//! use evfuse::gradsuite::{run_case, CASES};
//!
//! let report = run_case("sigmoid", 0).unwrap();
//! assert!(report.passed);
//! assert!(CASES.contains(&"extractor_afnet"));
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::afnet::{
    cross_correlation_fuse, deformable_align, motion_aware, style_transform, Afnet, ArchConfig, Bound, FusionMode,
    NormState, ParamSet,
};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::{
    grad_check, BatchNormMode, ConvSpec, DiffOp, GradCheckConfig, GradCheckReport, SamplePlan, Tape, TapeOp,
    Tensor, Var, NORM_EPS,
};
use crate::tracker::{gaussian_label, iou_head, loss_on_tape, zncc, LossConfig, ModelConfig, TrackerModel};

/// Every case name, kernels first.
pub const CASES: [&str; 26] = [
    "conv2d",
    "conv2d_strided_grouped",
    "deform_conv2d",
    "depthwise_conv2d",
    "batch_norm",
    "relu",
    "sigmoid",
    "sqrt",
    "softmax",
    "broadcast_arith",
    "reductions",
    "reshape_concat",
    "adaptive_avg_pool",
    "channel_stats",
    "sample_points",
    "motion_aware",
    "style_transform",
    "deformable_align",
    "cross_correlation_fuse",
    "extractor_afnet",
    "extractor_ef",
    "extractor_mf",
    "zncc",
    "iou_head",
    "loss",
    "tracking_loss",
];

/// Seeds the suite runs each case with.
pub const SUITE_SEEDS: u64 = 5;

/// Finite-difference settings shared by every case.
pub fn suite_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        probes: 3,
        step: 1e-6,
        tolerance: 1e-4,
        floor: 1e-6,
        seed,
    }
}

struct Case {
    op: Box<dyn DiffOp>,
    inputs: Vec<Tensor>,
}

fn rng_for(name: &str, seed: u64) -> ChaCha8Rng {
    let tag = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    ChaCha8Rng::seed_from_u64(tag ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn randn(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn plain<F>(name: &str, inputs: Vec<Tensor>, build: F) -> Case
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    Case {
        op: Box::new(TapeOp::new(name, build)),
        inputs,
    }
}

/// A case whose inputs are `features` followed by every tensor of `params`.
fn with_params<F>(name: &str, features: Vec<Tensor>, params: ParamSet, running: ParamSet, build: F) -> Case
where
    F: Fn(&mut Tape, &Bound, &mut NormState, &[Var]) -> Result<Var> + 'static,
{
    let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();
    let nf = features.len();
    let mut inputs = features;
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    let op = TapeOp::new(name, move |tape: &mut Tape, vars: &[Var]| {
        let (feat, ps) = vars.split_at(nf);
        let p = Bound::from_pairs(names.iter().cloned().zip(ps.iter().copied()));
        let mut norms = NormState::train(&running);
        build(tape, &p, &mut norms, feat)
    });
    Case {
        op: Box::new(op),
        inputs,
    }
}

/// Random parameters with the shapes of a small extractor. Offset weights
/// are nonzero so deformable taps land between grid points.
fn random_params(rng: &mut ChaCha8Rng, fusion: FusionMode) -> Result<(ParamSet, ParamSet)> {
    let config = ArchConfig {
        channels: 4,
        reduction: 2,
        kernel: 3,
        fusion,
    };
    let net = Afnet::init(config, rng.random())?;
    let mut params = net.params;
    for (name, t) in params.iter_mut() {
        let std = if name.starts_with("da.offset") { 0.3 } else { 0.5 };
        *t = Tensor::randn(t.shape().to_vec(), std, rng);
    }
    Ok((params, net.running))
}

fn subset(params: &ParamSet, prefix: &str) -> ParamSet {
    let mut out = ParamSet::new();
    for (k, t) in params.iter().filter(|(k, _)| k.starts_with(prefix)) {
        out.insert(k, t.clone());
    }
    out
}

fn build(name: &str, seed: u64) -> Result<Case> {
    let mut rng = rng_for(name, seed);
    let r = &mut rng;
    let case = match name {
        "conv2d" => plain(name, vec![randn(r, [2, 3, 6, 5]), randn(r, [4, 3, 3, 3]), randn(r, [4])], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::same(3))
        }),
        "conv2d_strided_grouped" => {
            plain(name, vec![randn(r, [2, 4, 7, 7]), randn(r, [6, 2, 3, 3])], |t, v| {
                t.conv2d(v[0], v[1], None, ConvSpec::new(2, 1).with_groups(2))
            })
        }
        "deform_conv2d" => {
            let offsets = Tensor::uniform([2, 18, 5, 5], -1.4, 1.4, r);
            plain(
                name,
                vec![randn(r, [2, 3, 5, 5]), offsets, randn(r, [4, 3, 3, 3]), randn(r, [4])],
                |t, v| t.deform_conv2d(v[0], v[1], v[2], Some(v[3]), ConvSpec::same(3)),
            )
        }
        "depthwise_conv2d" => plain(name, vec![randn(r, [2, 3, 5, 6]), randn(r, [2, 3, 3, 3])], |t, v| {
            t.depthwise_conv2d(v[0], v[1])
        }),
        "batch_norm" => plain(name, vec![randn(r, [3, 4, 3, 3]), randn(r, [4]), randn(r, [4])], |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], NORM_EPS, &BatchNormMode::Train)?.0)
        }),
        "relu" => plain(name, vec![randn(r, [2, 3, 4, 4])], |t, v| Ok(t.relu(v[0]))),
        "sigmoid" => plain(name, vec![randn(r, [2, 3, 4, 4])], |t, v| Ok(t.sigmoid(v[0]))),
        "sqrt" => {
            let x = Tensor::uniform([2, 3, 4, 4], 0.2, 3.0, r);
            plain(name, vec![x], |t, v| t.sqrt(v[0]))
        }
        "softmax" => plain(name, vec![randn(r, [2, 3, 7])], |t, v| t.softmax(v[0], 2)),
        "broadcast_arith" => {
            let d = Tensor::uniform([1, 3, 1, 1], 0.5, 2.0, r);
            plain(
                name,
                vec![randn(r, [2, 3, 4, 4]), randn(r, [2, 3, 1, 1]), randn(r, [1, 3, 4, 4]), d],
                |t, v| {
                    let a = t.add(v[0], v[1])?;
                    let b = t.mul(a, v[2])?;
                    let c = t.sub(b, v[1])?;
                    t.div(c, v[3])
                },
            )
        }
        "reductions" => plain(name, vec![randn(r, [2, 3, 4, 4])], |t, v| {
            let s = t.sum(v[0]);
            let s = t.reshape(s, [1, 1, 1, 1])?;
            let m = t.mean(v[0]);
            let m = t.reshape(m, [1, 1, 1, 1])?;
            let s = t.scale(s, 0.3);
            let m = t.add_scalar(m, 1.5);
            let p = t.mul(s, m)?;
            t.mul(p, v[0])
        }),
        "reshape_concat" => plain(name, vec![randn(r, [2, 3, 4, 4]), randn(r, [2, 2, 4, 4])], |t, v| {
            let c = t.concat_channels(&[v[0], v[1]])?;
            let f = t.reshape(c, [2, 5, 16])?;
            t.softmax(f, 1)
        }),
        "adaptive_avg_pool" => plain(name, vec![randn(r, [2, 3, 7, 5])], |t, v| t.adaptive_avg_pool(v[0], 3, 2)),
        "channel_stats" => plain(name, vec![randn(r, [2, 3, 4, 5])], |t, v| {
            let m = t.channel_mean(v[0])?;
            let s = t.channel_std(v[0], NORM_EPS)?;
            let c = t.sub(v[0], m)?;
            t.div(c, s)
        }),
        "sample_points" => {
            let mut plan = SamplePlan::new(3, 4);
            for i in 0..4 {
                let (y, x) = (r.random_range(-1.0..5.0), r.random_range(-1.0..5.0));
                plan.push_box(i % 2, y, x, r.random_range(1.0..5.0), r.random_range(1.0..5.0));
            }
            plain(name, vec![randn(r, [2, 3, 6, 6])], move |t, v| t.sample_points(v[0], plan.clone()))
        }
        "motion_aware" => {
            let (params, running) = random_params(r, FusionMode::Afnet)?;
            with_params(name, vec![randn(r, [2, 4, 4, 5])], subset(&params, "ma."), running, |t, p, _, v| {
                let (fes, fec) = motion_aware(t, p, v[0])?;
                let fes = t.sum(fes);
                let fes = t.reshape(fes, [1, 1, 1, 1])?;
                t.mul(fec, fes)
            })
        }
        "style_transform" => plain(name, vec![randn(r, [2, 4, 4, 5]), randn(r, [2, 4, 4, 5])], |t, v| {
            style_transform(t, v[0], v[1], NORM_EPS)
        }),
        "deformable_align" => {
            let (params, running) = random_params(r, FusionMode::Afnet)?;
            let feats = vec![randn(r, [2, 4, 5, 5]), randn(r, [2, 4, 5, 5]), randn(r, [2, 4, 5, 5])];
            with_params(name, feats, subset(&params, "da."), running, |t, p, _, v| {
                deformable_align(t, p, v[0], v[1], v[2])
            })
        }
        "cross_correlation_fuse" => {
            let (params, running) = random_params(r, FusionMode::Afnet)?;
            let feats = vec![randn(r, [2, 4, 5, 5]), randn(r, [2, 4, 5, 5])];
            with_params(name, feats, subset(&params, "cf."), running, |t, p, norms, v| {
                cross_correlation_fuse(t, p, norms, v[0], v[1], 3)
            })
        }
        "extractor_afnet" | "extractor_ef" | "extractor_mf" => {
            let fusion = match name {
                "extractor_ef" => FusionMode::Ef,
                "extractor_mf" => FusionMode::Mf,
                _ => FusionMode::Afnet,
            };
            let (params, running) = random_params(r, fusion)?;
            let config = ArchConfig {
                channels: 4,
                reduction: 2,
                kernel: 3,
                fusion,
            };
            let net = Afnet {
                config,
                params: ParamSet::new(),
                running: ParamSet::new(),
            };
            let imgs = vec![
                Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, r),
                Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, r),
            ];
            with_params(name, imgs, params, running, move |t, p, norms, v| net.forward(t, p, norms, v[0], v[1]))
        }
        "zncc" => plain(name, vec![randn(r, [2, 3, 6, 6]), randn(r, [2, 3, 4, 4])], |t, v| zncc(t, v[0], v[1])),
        "iou_head" => {
            let model = TrackerModel::init(small_model(), r.random())?;
            let mut head = model.head.clone();
            for (_, t) in head.iter_mut() {
                *t = Tensor::randn(t.shape().to_vec(), 0.3, r);
            }
            let rois = random_rois(r, 3);
            let trois = random_rois(r, 3);
            let feats = vec![randn(r, [2, 4, 6, 6]), randn(r, [2, 4, 6, 6])];
            with_params(name, feats, head, ParamSet::new(), move |t, p, _, v| {
                iou_head(t, p, v[0], v[1], &rois, &trois)
            })
        }
        "loss" => {
            let label = gaussian_label(5, r.random_range(1.0..3.0), r.random_range(1.0..3.0), 1.0);
            let truth = Tensor::uniform([4, 1, 1, 1], 0.0, 1.0, r);
            let score = Tensor::uniform([1, 1, 5, 5], -0.5, 1.0, r);
            plain(name, vec![score, Tensor::uniform([4, 1, 1, 1], 0.0, 1.0, r)], move |t, v| {
                Ok(loss_on_tape(t, v[0], &label, v[1], &truth, &LossConfig::default())?.0)
            })
        }
        "tracking_loss" => tracking_loss_case(r)?,
        other => return Err(Error::Config(format!("unknown gradient check {other:?}"))),
    };
    Ok(case)
}

fn small_model() -> ModelConfig {
    ModelConfig {
        arch: ArchConfig {
            channels: 4,
            reduction: 2,
            kernel: 3,
            fusion: FusionMode::Afnet,
        },
        head_hidden: 5,
    }
}

fn random_rois(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, BBox)> {
    (0..n)
        .map(|i| {
            let b = BBox {
                x: rng.random_range(0.3..2.7),
                y: rng.random_range(0.3..2.7),
                w: rng.random_range(1.3..2.6),
                h: rng.random_range(1.3..2.6),
            };
            (i % 2, b)
        })
        .collect()
}

/// The training objective of a two-sample batch as a function of every
/// model parameter.
fn tracking_loss_case(r: &mut ChaCha8Rng) -> Result<Case> {
    let model = TrackerModel::init(small_model(), r.random())?;
    let mut params = model.params();
    for (name, t) in params.iter_mut() {
        let std = match name {
            n if n.starts_with("da.offset") => 0.3,
            n if n.starts_with("head.") => 0.05,
            _ => 0.5,
        };
        *t = Tensor::randn(t.shape().to_vec(), std, r);
    }
    let running = model.afnet.running.clone();
    let imgs: Vec<Tensor> = (0..4).map(|_| Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, r)).collect();
    let cells: Vec<BBox> = (0..2)
        .map(|_| BBox {
            x: r.random_range(0.6..1.4),
            y: r.random_range(0.6..1.4),
            w: 2.0,
            h: 2.0,
        })
        .collect();
    let label = Tensor::stack_batch(&[gaussian_label(5, 2.2, 1.6, 1.0), gaussian_label(5, 1.3, 2.7, 1.0)])?;
    let rois = random_rois(r, 4);
    let truth = Tensor::uniform([4, 1, 1, 1], 0.0, 1.0, r);
    let net = model.afnet.clone();
    Ok(with_params("tracking_loss", Vec::new(), params, running, move |t, p, _, _| {
        let v: Vec<Var> = imgs.iter().map(|x| t.constant(x.clone())).collect();
        let mut norms = NormState::train(&net.running);
        let template = net.forward(t, p, &mut norms, v[0], v[1])?;
        let search = net.forward(t, p, &mut norms, v[2], v[3])?;
        let mut plan = SamplePlan::new(4, 4);
        for (i, c) in cells.iter().enumerate() {
            plan.push_box(i, c.y, c.x, c.h, c.w);
        }
        let kernel = t.sample_points(template, plan)?;
        let score = zncc(t, search, kernel)?;
        let trois: Vec<(usize, BBox)> = rois.iter().map(|&(i, _)| (i, cells[i])).collect();
        let pred = iou_head(t, p, search, template, &rois, &trois)?;
        Ok(loss_on_tape(t, score, &label, pred, &truth, &LossConfig::default())?.0)
    }))
}

/// Runs one named case at one seed.
pub fn run_case(name: &str, seed: u64) -> Result<GradCheckReport> {
    let case = build(name, seed)?;
    Ok(grad_check(case.op.as_ref(), &case.inputs, &suite_config(seed)))
}

/// Runs the named case, or every case, over seeds `0..SUITE_SEEDS`.
pub fn run_suite(only: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let names: Vec<&str> = match only {
        Some(n) if CASES.contains(&n) => vec![n],
        Some(n) => return Err(Error::Config(format!("unknown gradient check {n:?}"))),
        None => CASES.to_vec(),
    };
    let mut out = Vec::with_capacity(names.len() * SUITE_SEEDS as usize);
    for name in names {
        for seed in 0..SUITE_SEEDS {
            out.push(run_case(name, seed)?);
        }
    }
    Ok(out)
}
