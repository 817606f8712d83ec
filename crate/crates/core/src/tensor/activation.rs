use super::Tensor;
use crate::error::{Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of `relu` at `x`; the kink at zero takes the left derivative 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

#[inline]
fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(logistic)
}

/// Gradient of `sigmoid` given its output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    y.zip_map(grad_out, |s, g| g * s * (1.0 - s))
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, stabilized by subtracting the running maximum.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (d[at(j)] - max).exp();
                d[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                d[at(j)] /= total;
            }
        }
    }
    Ok(out)
}

/// Gradient of `softmax_axis` given its output `y`.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let mut gx = y.zip_map(grad_out, |_, g| g)?;
    let yd = y.data();
    let gd = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                gd[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_examples() {
        let s = sigmoid(&Tensor::new([3], vec![0.0, -800.0, 800.0]).unwrap());
        assert_eq!(s.data()[0], 0.5);
        assert!(s.data().iter().all(|v| v.is_finite()));
        let r = relu(&Tensor::new([2], vec![-1.0, 2.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 2.0]);
    }

    #[test]
    fn sigmoid_is_strictly_inside_unit_interval() {
        let x = Tensor::from_fn([41], |i| i as f64 - 20.0);
        assert!(sigmoid(&x).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax_axis(&Tensor::full([1, 5], 3.0), 1).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let p = softmax_axis(&Tensor::new([2], vec![0.0, 3f64.ln()]).unwrap(), 0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_inner_axis_sums_to_one() {
        let x = Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.7).sin() * 5.0);
        let y = softmax_axis(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| y.data()[(o * 3 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let shifted = softmax_axis(&x.map(|v| v + 100.0), 1).unwrap();
        assert!(y.max_abs_diff(&shifted).unwrap() < 1e-12);
        assert!(softmax_axis(&x, 3).is_err());
    }
}
