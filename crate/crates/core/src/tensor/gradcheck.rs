//! Finite-difference verification of vector-Jacobian products.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// A differentiable map from several tensors to one.
pub trait DiffOp {
    fn name(&self) -> String;
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;
    /// Gradients of `<grad_out, forward(inputs)>` w.r.t. every input.
    fn vjp(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>>;
}

/// Wraps a function that records a computation on a [`Tape`], so its
/// gradients come from the tape's backward pass.
pub struct TapeOp<F> {
    name: String,
    build: F,
}

impl<F> TapeOp<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    pub fn new(name: impl Into<String>, build: F) -> Self {
        Self {
            name: name.into(),
            build,
        }
    }
}

impl<F> DiffOp for TapeOp<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    }

    fn vjp(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        let grads = tape.backward_with(out, grad_out.clone())?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Random directions probed per input.
    pub probes: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Magnitudes below this are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 3,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub seed: u64,
    /// Worst relative error per input.
    pub max_rel_err: Vec<f64>,
    pub passed: bool,
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }

    fn failed(name: String, seed: u64, reason: String) -> Self {
        Self {
            name,
            seed,
            max_rel_err: Vec::new(),
            passed: false,
            failure: Some(reason),
        }
    }
}

fn unit_direction(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let d = Tensor::randn(shape.to_vec(), 1.0, rng);
    let n = d.norm();
    if n > 0.0 {
        d.scale(1.0 / n)
    } else {
        d
    }
}

/// Compares `op.vjp` against central differences of `<u, op(x)>` for a
/// random cotangent `u`, along random unit directions in each input.
pub fn grad_check(op: &dyn DiffOp, inputs: &[Tensor], cfg: &GradCheckConfig) -> GradCheckReport {
    match run(op, inputs, cfg) {
        Ok(r) => r,
        Err(e) => GradCheckReport::failed(op.name(), cfg.seed, e.to_string()),
    }
}

fn run(op: &dyn DiffOp, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let name = op.name();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if let Some(i) = inputs.iter().position(|t| !t.all_finite()) {
        return Ok(GradCheckReport::failed(name, cfg.seed, format!("input {i} is not finite")));
    }
    let y = op.forward(inputs)?;
    if !y.all_finite() {
        return Ok(GradCheckReport::failed(name, cfg.seed, "forward output is not finite".into()));
    }
    let u = Tensor::randn(y.shape().to_vec(), 1.0, &mut rng);
    let analytic = op.vjp(inputs, &u)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let objective = |xs: &[Tensor]| -> Result<f64> { op.forward(xs)?.dot(&u) };

    let mut max_rel_err = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[i].shape() || !grad.all_finite() {
            return Ok(GradCheckReport::failed(
                name,
                cfg.seed,
                format!("gradient {i} has wrong shape or non-finite entries"),
            ));
        }
        let mut worst: f64 = 0.0;
        for _ in 0..cfg.probes {
            let d = unit_direction(inputs[i].shape(), &mut rng);
            let a = grad.dot(&d)?;
            let mut xs = inputs.to_vec();
            xs[i] = inputs[i].add(&d.scale(cfg.step))?;
            let plus = objective(&xs)?;
            xs[i] = inputs[i].sub(&d.scale(cfg.step))?;
            let minus = objective(&xs)?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            if !numeric.is_finite() {
                return Ok(GradCheckReport::failed(name, cfg.seed, format!("input {i}: non-finite difference")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max(rel);
        }
        max_rel_err.push(worst);
    }
    let passed = max_rel_err.iter().all(|&e| e < cfg.tolerance);
    Ok(GradCheckReport {
        name,
        seed: cfg.seed,
        max_rel_err,
        passed,
        failure: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvSpec;

    struct Square;

    impl DiffOp for Square {
        fn name(&self) -> String {
            "square".into()
        }
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            Ok(inputs[0].map(|v| v * v))
        }
        fn vjp(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![inputs[0].zip_map(g, |x, g| 2.0 * x * g)?])
        }
    }

    struct Skewed;

    impl DiffOp for Skewed {
        fn name(&self) -> String {
            "square x1.01".into()
        }
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            Square.forward(inputs)
        }
        fn vjp(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![Square.vjp(inputs, g)?[0].scale(1.01)])
        }
    }

    #[test]
    fn correct_vjp_passes_and_skewed_fails() {
        let x = vec![Tensor::from_fn([3, 4], |i| i as f64 * 0.3 - 1.0)];
        let cfg = GradCheckConfig::default();
        assert!(grad_check(&Square, &x, &cfg).passed);
        let bad = grad_check(&Skewed, &x, &cfg);
        assert!(!bad.passed);
        assert!(bad.worst() > 5e-3);
    }

    #[test]
    fn linear_conv_is_nearly_exact() {
        let op = TapeOp::new("conv", |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], None, ConvSpec::same(3)));
        let x = Tensor::from_fn([1, 2, 5, 5], |i| (i as f64 * 0.71).sin());
        let w = Tensor::from_fn([3, 2, 3, 3], |i| (i as f64 * 1.3).cos());
        let r = grad_check(&op, &[x, w], &GradCheckConfig::default());
        assert!(r.worst() < 1e-8, "{r:?}");
    }

    #[test]
    fn non_finite_input_fails() {
        let x = vec![Tensor::new([2], vec![1.0, f64::NAN]).unwrap()];
        let r = grad_check(&Square, &x, &GradCheckConfig::default());
        assert!(!r.passed);
        assert!(r.failure.is_some());
    }
}
