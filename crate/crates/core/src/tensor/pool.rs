use super::Tensor;
use crate::error::{Error, Result};

/// Bin `[floor(i * n / out), ceil((i + 1) * n / out))`.
#[inline]
fn bin(i: usize, n: usize, out: usize) -> (usize, usize) {
    (i * n / out, ((i + 1) * n).div_ceil(out))
}

fn check(h: usize, w: usize, oh: usize, ow: usize) -> Result<()> {
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::Shape(format!(
            "cannot pool {h}x{w} to {oh}x{ow}"
        )));
    }
    Ok(())
}

pub fn adaptive_avg_pool(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    check(h, w, oh, ow)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for i in 0..oh {
            let (y0, y1) = bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = bin(j, w, ow);
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

pub fn adaptive_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::Shape(format!("expected rank 4, got {input_shape:?}"))),
    };
    let (gn, gc, oh, ow) = grad_out.dims4()?;
    if (gn, gc) != (n, c) {
        return Err(Error::Shape("grad_out does not match pooled input".into()));
    }
    check(h, w, oh, ow)?;
    let mut gx = vec![0.0; n * c * h * w];
    for (plane, g) in gx.chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for i in 0..oh {
            let (y0, y1) = bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = bin(j, w, ow);
                let share = g[i * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut plane[y * w + x0..y * w + x1] {
                        *v += share;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_mean() {
        let x = Tensor::from_fn([1, 2, 3, 5], |i| i as f64);
        let y = adaptive_avg_pool(&x, 1, 1).unwrap();
        assert_eq!(y.data(), &[7.0, 22.0]);
    }

    #[test]
    fn even_blocks_and_identity() {
        let x = Tensor::from_fn([1, 1, 4, 4], |i| i as f64);
        let y = adaptive_avg_pool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert_eq!(adaptive_avg_pool(&x, 4, 4).unwrap(), x);
        assert!(adaptive_avg_pool(&x, 5, 4).is_err());
    }

    #[test]
    fn uneven_bins_overlap() {
        // 5 -> 3: bins [0,2), [1,4), [3,5)
        let x = Tensor::new([1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = adaptive_avg_pool(&x, 1, 3).unwrap();
        assert_eq!(y.data(), &[1.5, 3.0, 4.5]);
    }
}
