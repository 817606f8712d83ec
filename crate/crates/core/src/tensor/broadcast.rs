use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

/// Output shape for two equal-rank operands whose dims agree or are 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}: rank differs")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape.iter().zip(out))
        .map(|(s, (&d, &o))| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Calls `f(out_index, source_index)` for every element of `out`.
fn for_each_index(out: &[usize], src: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out.len();
    let numel: usize = out.iter().product();
    let bs = broadcast_strides(src, out);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for linear in 0..numel {
        f(linear, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += bs[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= bs[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Elementwise `op` with size-1 axes of either operand stretched.
pub fn broadcast_binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| op.apply(x, y));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let numel: usize = shape.iter().product();
    let mut ia = vec![0; numel];
    for_each_index(&shape, a.shape(), |o, s| ia[o] = s);
    let mut out = vec![0.0; numel];
    let (ad, bd) = (a.data(), b.data());
    for_each_index(&shape, b.shape(), |o, s| out[o] = op.apply(ad[ia[o]], bd[s]));
    Tensor::new(shape, out)
}

/// Sums `grad` over the axes where `shape` is 1, undoing a broadcast.
pub fn reduce_sum_to(grad: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    if broadcast_shape(shape, grad.shape())? != grad.shape() {
        return Err(Error::Shape(format!(
            "cannot reduce {:?} to {shape:?}",
            grad.shape()
        )));
    }
    let mut out = vec![0.0; shape.iter().product()];
    let gd = grad.data();
    for_each_index(grad.shape(), shape, |o, s| out[s] += gd[o]);
    Tensor::new(shape.to_vec(), out)
}
