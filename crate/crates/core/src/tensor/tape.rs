//! A record of kernel applications that can be replayed backwards.

use super::activation::{relu, relu_backward, sigmoid, sigmoid_backward, softmax_axis, softmax_backward};
use super::broadcast::{broadcast_binary, reduce_sum_to, BinaryOp};
use super::conv::{conv2d_backward, conv2d_raw, depthwise_conv2d, depthwise_conv2d_backward, ConvSpec};
use super::deform::{deformable_conv2d_backward, deformable_conv2d_raw};
use super::norm::{batch_norm, batch_norm_backward, channel_stats, channel_stats_backward, BatchNormMode, BatchStats};
use super::pool::{adaptive_avg_pool, adaptive_avg_pool_backward};
use super::sample::{sample_points, sample_points_backward, SamplePlan};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Deform {
        x: Var,
        off: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Depthwise {
        x: Var,
        k: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchStats,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
    },
    Sum(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Pool(Var),
    ChannelMean(Var),
    ChannelStd {
        x: Var,
        eps: f64,
    },
    Sample {
        x: Var,
        plan: SamplePlan,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = conv2d_raw(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv { x, w, b, spec }, &inputs))
    }

    pub fn deform_conv2d(&mut self, x: Var, off: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = deformable_conv2d_raw(self.value(x), self.value(off), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, off, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Deform { x, off, w, b, spec }, &inputs))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let y = depthwise_conv2d(self.value(x), self.value(k))?;
        Ok(self.push(y, Op::Depthwise { x, k }, &[x, k]))
    }

    /// Batch norm; also returns the statistics used, so callers can keep
    /// running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: &BatchNormMode,
    ) -> Result<(Var, BatchStats)> {
        let (y, stats) = batch_norm(self.value(x), self.value(gamma), self.value(beta), eps, mode)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            stats: stats.clone(),
            train: matches!(mode, BatchNormMode::Train),
        };
        Ok((self.push(y, op, &[x, gamma, beta]), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = relu(self.value(x));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Shape(format!("sqrt of non-positive value {v}")));
        }
        let y = self.value(x).map(f64::sqrt);
        Ok(self.push(y, Op::Sqrt(x), &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).scale(c);
        self.push(y, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddScalar(x), &[x])
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let y = broadcast_binary(op, self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Binary { op, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = softmax_axis(self.value(x), axis)?;
        Ok(self.push(y, Op::Softmax { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// Concatenates rank-4 values along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut channels = 0;
        for p in parts {
            let (pn, pc, ph, pw) = self.value(*p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "cannot concat {:?} with {:?}",
                    self.value(*p).shape(),
                    self.value(*first).shape()
                )));
            }
            channels += pc;
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for ni in 0..n {
            for p in parts {
                let t = self.value(*p);
                let block = t.numel() / n;
                data.extend_from_slice(&t.data()[ni * block..(ni + 1) * block]);
            }
        }
        let y = Tensor::new([n, channels, h, w], data)?;
        Ok(self.push(y, Op::Concat(parts.to_vec()), parts))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let y = adaptive_avg_pool(self.value(x), oh, ow)?;
        Ok(self.push(y, Op::Pool(x), &[x]))
    }

    /// Per-channel mean over batch and space, shape `(1, C, 1, 1)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (mu, _) = channel_stats(self.value(x), 0.0)?;
        Ok(self.push(mu, Op::ChannelMean(x), &[x]))
    }

    /// Per-channel `sqrt(var + eps)` over batch and space, shape `(1, C, 1, 1)`.
    pub fn channel_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, sigma) = channel_stats(self.value(x), eps)?;
        Ok(self.push(sigma, Op::ChannelStd { x, eps }, &[x]))
    }

    pub fn sample_points(&mut self, x: Var, plan: SamplePlan) -> Result<Var> {
        let y = sample_points(self.value(x), &plan)?;
        Ok(self.push(y, Op::Sample { x, plan }, &[x]))
    }

    /// Gradients of the sum of `output`'s entries.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let seed = Tensor::full(self.value(output).shape().to_vec(), 1.0);
        self.backward_with(output, seed)
    }

    /// Gradients of `<cotangent, output>`.
    pub fn backward_with(&self, output: Var, cotangent: Tensor) -> Result<Gradients> {
        if cotangent.shape() != self.value(output).shape() {
            return Err(Error::Shape(format!(
                "cotangent {:?} does not match output {:?}",
                cotangent.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(cotangent);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, gv) in self.local_grads(node, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv)?,
                    slot => *slot = Some(gv),
                }
            }
            grads[i] = Some(g);
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let need = [self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b))];
                let gr = conv2d_backward(val(*x), val(*w), *spec, g, need)?;
                out.extend(gr.x.map(|t| (*x, t)));
                out.extend(gr.weight.map(|t| (*w, t)));
                if let Some(b) = b {
                    out.extend(gr.bias.map(|t| (*b, t)));
                }
            }
            Op::Deform { x, off, w, b, spec } => {
                let need = [
                    self.wants(*x),
                    self.wants(*off),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                ];
                let gr = deformable_conv2d_backward(val(*x), val(*off), val(*w), *spec, g, need)?;
                out.extend(gr.x.map(|t| (*x, t)));
                out.extend(gr.offsets.map(|t| (*off, t)));
                out.extend(gr.weight.map(|t| (*w, t)));
                if let Some(b) = b {
                    out.extend(gr.bias.map(|t| (*b, t)));
                }
            }
            Op::Depthwise { x, k } => {
                let (gx, gk) = depthwise_conv2d_backward(val(*x), val(*k), g)?;
                out.push((*x, gx));
                out.push((*k, gk));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                train,
            } => {
                let (gx, gg, gb) = batch_norm_backward(val(*x), val(*gamma), stats, *train, g)?;
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gb));
            }
            Op::Relu(x) => out.push((*x, relu_backward(val(*x), g)?)),
            Op::Sigmoid(x) => out.push((*x, sigmoid_backward(&node.value, g)?)),
            Op::Sqrt(x) => out.push((*x, node.value.zip_map(g, |y, gv| gv / (2.0 * y))?)),
            Op::Scale(x, c) => out.push((*x, g.scale(*c))),
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::Binary { op, a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (ga, gb) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.scale(-1.0)),
                    BinaryOp::Mul => (
                        broadcast_binary(BinaryOp::Mul, g, bv)?,
                        broadcast_binary(BinaryOp::Mul, g, av)?,
                    ),
                    BinaryOp::Div => {
                        let ga = broadcast_binary(BinaryOp::Div, g, bv)?;
                        // d(a/b)/db = -(a/b)/b
                        let q = broadcast_binary(BinaryOp::Div, &node.value, bv)?;
                        (ga, broadcast_binary(BinaryOp::Mul, g, &q)?.scale(-1.0))
                    }
                };
                if self.wants(*a) {
                    out.push((*a, reduce_sum_to(&ga, av.shape())?));
                }
                if self.wants(*b) {
                    out.push((*b, reduce_sum_to(&gb, bv.shape())?));
                }
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0]))),
            Op::Softmax { x, axis } => out.push((*x, softmax_backward(&node.value, g, *axis)?)),
            Op::Reshape(x) => out.push((*x, g.reshape(val(*x).shape().to_vec())?)),
            Op::Concat(parts) => {
                let (n, _, _, _) = g.dims4()?;
                let total = g.numel() / n;
                let mut offset = 0;
                for p in parts {
                    let shape = val(*p).shape().to_vec();
                    let block = val(*p).numel() / n;
                    let mut data = Vec::with_capacity(block * n);
                    for ni in 0..n {
                        data.extend_from_slice(&g.data()[ni * total + offset..][..block]);
                    }
                    offset += block;
                    out.push((*p, Tensor::new(shape, data)?));
                }
            }
            Op::Pool(x) => out.push((*x, adaptive_avg_pool_backward(val(*x).shape(), g)?)),
            Op::ChannelMean(x) => {
                let (mu, sigma) = channel_stats(val(*x), 1.0)?;
                out.push((*x, channel_stats_backward(val(*x), &mu, &sigma, Some(g), None)?));
            }
            Op::ChannelStd { x, eps } => {
                let (mu, _) = channel_stats(val(*x), *eps)?;
                out.push((*x, channel_stats_backward(val(*x), &mu, &node.value, None, Some(g))?));
            }
            Op::Sample { x, plan } => out.push((*x, sample_points_backward(val(*x).shape(), plan, g)?)),
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_and_broadcast() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::new([1, 2, 1, 1], vec![10.0, 100.0]).unwrap());
        let y = t.mul(a, b).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[10.0, 10.0, 100.0, 100.0]);
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn reused_values_accumulate() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([2], vec![3.0, -2.0]).unwrap());
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0, -3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.div(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert!((g.get(x).unwrap().data()[0] - 0.2).abs() < 1e-15);
        assert!(g.get(c).is_none());
        assert!(g.get(y).is_none());
    }

    #[test]
    fn concat_splits_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_fn([2, 1, 1, 2], |i| i as f64));
        let b = t.leaf(Tensor::from_fn([2, 2, 1, 2], |i| 10.0 + i as f64));
        let c = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.value(c).data()[..6], [0.0, 1.0, 10.0, 11.0, 12.0, 13.0]);
        let w = Tensor::from_fn([2, 3, 1, 2], |i| i as f64);
        let g = t.backward_with(c, w).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(g.get(b).unwrap().data()[..4], [2.0, 3.0, 4.0, 5.0]);
    }
}
