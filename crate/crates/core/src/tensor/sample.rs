use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// One bilinear corner: flat plane index, weight, and the weight's partial
/// derivatives along y and x.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub index: usize,
    pub weight: f64,
    pub dy: f64,
    pub dx: f64,
}

/// In-bounds corners of a bilinear read at `(y, x)` on an `h x w` plane.
/// Reads outside the plane are zero. At integer coordinates the derivative is
/// the right-hand limit, which is what `floor` yields.
#[inline]
pub(crate) fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> impl Iterator<Item = Tap> {
    let live = y > -1.0 && x > -1.0 && y < h as f64 && x < w as f64;
    let (y0f, x0f) = if live { (y.floor(), x.floor()) } else { (0.0, 0.0) };
    let (ly, lx) = (y - y0f, x - x0f);
    let (y0, x0) = (y0f as isize, x0f as isize);
    let corners = [
        (y0, x0, (1.0 - ly) * (1.0 - lx), -(1.0 - lx), -(1.0 - ly)),
        (y0, x0 + 1, (1.0 - ly) * lx, -lx, 1.0 - ly),
        (y0 + 1, x0, ly * (1.0 - lx), 1.0 - lx, -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    ];
    corners
        .into_iter()
        .filter(move |&(cy, cx, ..)| live && cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w)
        .map(move |(cy, cx, weight, dy, dx)| Tap {
            index: cy as usize * w + cx as usize,
            weight,
            dy,
            dx,
        })
}

#[inline]
pub(crate) fn bilinear(plane: &[f64], y: f64, x: f64, h: usize, w: usize) -> f64 {
    bilinear_taps(y, x, h, w).map(|t| t.weight * plane[t.index]).sum()
}

/// A batch of `ph x pw` sample grids. Row `r` reads from batch item
/// `batch[r]` at the pixel coordinates `points[r * ph * pw ..]`, each `(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub batch: Vec<usize>,
    pub ph: usize,
    pub pw: usize,
    pub points: Vec<(f64, f64)>,
}

impl SamplePlan {
    /// Regular grid of cell centers covering the box `(y0, x0, h, w)`,
    /// expressed in pixel coordinates of the sampled tensor.
    pub fn push_box(&mut self, batch: usize, y0: f64, x0: f64, h: f64, w: f64) {
        self.batch.push(batch);
        for a in 0..self.ph {
            for b in 0..self.pw {
                let y = y0 + (a as f64 + 0.5) * h / self.ph as f64 - 0.5;
                let x = x0 + (b as f64 + 0.5) * w / self.pw as f64 - 0.5;
                self.points.push((y, x));
            }
        }
    }

    pub fn new(ph: usize, pw: usize) -> Self {
        Self {
            batch: Vec::new(),
            ph,
            pw,
            points: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.batch.len()
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.points.len() != self.batch.len() * self.ph * self.pw {
            return Err(Error::Shape(format!(
                "{} points for {} rows of {}x{}",
                self.points.len(),
                self.batch.len(),
                self.ph,
                self.pw
            )));
        }
        if let Some(&b) = self.batch.iter().find(|&&b| b >= n) {
            return Err(Error::Shape(format!("sample row reads batch item {b} of {n}")));
        }
        Ok(())
    }
}

/// Bilinear reads with zero padding; output `(rows, C, ph, pw)`.
pub fn sample_points(x: &Tensor, plan: &SamplePlan) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    plan.validate(n)?;
    let per = plan.ph * plan.pw;
    let xd = x.data();
    let mut out = vec![0.0; plan.rows() * c * per];
    out.par_chunks_mut(per).enumerate().for_each(|(idx, o)| {
        let r = idx / c;
        let ch = idx % c;
        let plane = &xd[(plan.batch[r] * c + ch) * h * w..][..h * w];
        for (v, &(py, px)) in o.iter_mut().zip(&plan.points[r * per..(r + 1) * per]) {
            *v = bilinear(plane, py, px, h, w);
        }
    });
    Tensor::new([plan.rows(), c, plan.ph, plan.pw], out)
}

/// Gradient of `sample_points` w.r.t. `x`; the sample positions are constants.
pub fn sample_points_backward(input_shape: &[usize], plan: &SamplePlan, grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::Shape(format!("expected rank 4, got {input_shape:?}"))),
    };
    plan.validate(n)?;
    if grad_out.shape() != [plan.rows(), c, plan.ph, plan.pw] {
        return Err(Error::Shape("grad_out does not match sample plan".into()));
    }
    let per = plan.ph * plan.pw;
    let gd = grad_out.data();
    let mut gx = vec![0.0; n * c * h * w];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(idx, plane)| {
        let (bi, ch) = (idx / c, idx % c);
        for (r, _) in plan.batch.iter().enumerate().filter(|(_, &b)| b == bi) {
            let g = &gd[(r * c + ch) * per..][..per];
            for (&gv, &(py, px)) in g.iter().zip(&plan.points[r * per..(r + 1) * per]) {
                for t in bilinear_taps(py, px, h, w) {
                    plane[t.index] += t.weight * gv;
                }
            }
        }
    });
    Tensor::new(input_shape.to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_points_read_pixels() {
        let x = Tensor::from_fn([1, 1, 3, 4], |i| i as f64);
        let plan = SamplePlan {
            batch: vec![0],
            ph: 1,
            pw: 3,
            points: vec![(1.0, 2.0), (0.5, 0.5), (-1.0, 0.0)],
        };
        let y = sample_points(&x, &plan).unwrap();
        assert_eq!(y.data(), &[6.0, 2.5, 0.0]);
    }

    #[test]
    fn half_outside_reads_zero_padding() {
        let x = Tensor::full([1, 1, 2, 2], 1.0);
        assert_eq!(bilinear(x.data(), -0.5, 0.0, 2, 2), 0.5);
        assert_eq!(bilinear(x.data(), 1.5, 1.5, 2, 2), 0.25);
        assert_eq!(bilinear(x.data(), 5.0, 0.0, 2, 2), 0.0);
    }

    #[test]
    fn box_grid_covers_cell_centers() {
        let mut plan = SamplePlan::new(2, 2);
        plan.push_box(0, 0.0, 0.0, 4.0, 4.0);
        assert_eq!(plan.points, vec![(0.5, 0.5), (0.5, 2.5), (2.5, 0.5), (2.5, 2.5)]);
    }

    #[test]
    fn backward_is_the_adjoint() {
        let x = Tensor::from_fn([2, 2, 4, 5], |i| ((i * 37) % 11) as f64 - 5.0);
        let mut plan = SamplePlan::new(3, 2);
        plan.push_box(1, 0.3, -0.7, 3.1, 4.4);
        plan.push_box(0, 1.2, 2.2, 2.0, 1.5);
        let y = sample_points(&x, &plan).unwrap();
        let g = Tensor::from_fn(y.shape().to_vec(), |i| (i as f64 * 0.37).cos());
        let gx = sample_points_backward(x.shape(), &plan, &g).unwrap();
        assert!((y.dot(&g).unwrap() - x.dot(&gx).unwrap()).abs() < 1e-10);
    }
}
