use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchStats, ConvSpec, Gradients, Tape, Tensor, Var, NORM_EPS};

/// Named tensors in a fixed (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Records every tensor on the tape, as a leaf when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    /// Gradient for every bound parameter; zeros where none reached it.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, &v) in &self.vars {
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()));
            out.insert(k.clone(), g);
        }
        out
    }
}

/// Batch-norm bookkeeping for one forward pass: which statistics to use and
/// what the batch looked like.
#[derive(Debug)]
pub struct NormState<'a> {
    running: &'a ParamSet,
    train: bool,
    observed: Vec<(String, BatchStats)>,
}

impl<'a> NormState<'a> {
    pub fn train(running: &'a ParamSet) -> Self {
        Self {
            running,
            train: true,
            observed: Vec::new(),
        }
    }

    pub fn eval(running: &'a ParamSet) -> Self {
        Self {
            running,
            train: false,
            observed: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn observed(&self) -> &[(String, BatchStats)] {
        &self.observed
    }

    pub fn into_observed(self) -> Vec<(String, BatchStats)> {
        self.observed
    }
}

/// `name.w` as a convolution, with `name.b` as bias when present.
pub(crate) fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    tape.conv2d(x, w, p.opt(&format!("{name}.b")), spec)
}

/// `relu(batch_norm(x))` with `name.gamma`, `name.beta` and running
/// statistics `name.mean`, `name.var`.
pub(crate) fn bn_relu(tape: &mut Tape, p: &Bound, norms: &mut NormState, name: &str, x: Var) -> Result<Var> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    let mode = if norms.train {
        BatchNormMode::Train
    } else {
        BatchNormMode::Eval {
            mean: norms.running.get(&format!("{name}.mean"))?.data().to_vec(),
            var: norms.running.get(&format!("{name}.var"))?.data().to_vec(),
        }
    };
    let (y, stats) = tape.batch_norm(x, gamma, beta, NORM_EPS, &mode)?;
    if norms.train {
        norms.observed.push((name.to_string(), stats));
    }
    Ok(tape.relu(y))
}

/// Moves running statistics towards the observed batch statistics. The
/// variance is stored unbiased.
pub fn update_running(running: &mut ParamSet, observed: &[(String, BatchStats)], momentum: f64) -> Result<()> {
    for (name, s) in observed {
        let unbias = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        let mean = running.get_mut(&format!("{name}.mean"))?;
        for (r, &m) in mean.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let var = running.get_mut(&format!("{name}.var"))?;
        for (r, &v) in var.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * v * unbias;
        }
    }
    Ok(())
}

/// He-normal `(c_out, c_in, k, k)` weight.
pub(crate) fn he_weight<R: Rng + ?Sized>(rng: &mut R, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    Tensor::randn([c_out, c_in, k, k], std, rng)
}

pub(crate) fn insert_bn(params: &mut ParamSet, running: &mut ParamSet, name: &str, c: usize) {
    params.insert(format!("{name}.gamma"), Tensor::full([c], 1.0));
    params.insert(format!("{name}.beta"), Tensor::zeros([c]));
    running.insert(format!("{name}.mean"), Tensor::zeros([c]));
    running.insert(format!("{name}.var"), Tensor::full([c], 1.0));
}
