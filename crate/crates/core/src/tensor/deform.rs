use rayon::prelude::*;

use super::conv::{conv_output_size, ConvParams, ConvSpec};
use super::sample::{bilinear, bilinear_taps};
use super::Tensor;
use crate::error::{Error, Result};

struct Dims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

impl Dims {
    fn taps(&self) -> usize {
        self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn dims(x: &Tensor, offsets: &Tensor, weight: &Tensor, spec: ConvSpec) -> Result<Dims> {
    let (n, c_in, h, w) = x.dims4()?;
    let (c_out, wc, kh, kw) = weight.dims4()?;
    if spec.groups != 1 {
        return Err(Error::Shape("deformable convolution supports groups = 1 only".into()));
    }
    if wc != c_in || kh != kw {
        return Err(Error::Shape(format!(
            "weight {:?} does not fit input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let oh = conv_output_size(h, kh, spec.stride, spec.padding)?;
    let ow = conv_output_size(w, kw, spec.stride, spec.padding)?;
    if offsets.shape() != [n, 2 * kh * kw, oh, ow] {
        return Err(Error::Shape(format!(
            "offsets {:?} must be [{n}, {}, {oh}, {ow}]",
            offsets.shape(),
            2 * kh * kw
        )));
    }
    Ok(Dims {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        oh,
        ow,
    })
}

/// Sampling position of tap `tap` at output `pos` of sample `n`.
#[inline]
fn position(d: &Dims, spec: ConvSpec, off: &[f64], n: usize, tap: usize, pos: usize) -> (f64, f64) {
    let p = d.positions();
    let (oy, ox) = (pos / d.ow, pos % d.ow);
    let (ky, kx) = (tap / d.k, tap % d.k);
    let base = n * 2 * d.taps() * p;
    let dy = off[base + 2 * tap * p + pos];
    let dx = off[base + (2 * tap + 1) * p + pos];
    (
        (oy * spec.stride + ky) as f64 - spec.padding as f64 + dy,
        (ox * spec.stride + kx) as f64 - spec.padding as f64 + dx,
    )
}

/// Sampled columns of sample `n`, laid out `[(c_in * K*K + tap) * P + pos]`.
fn columns(d: &Dims, spec: ConvSpec, x: &Tensor, off: &[f64], n: usize) -> Vec<f64> {
    let p = d.positions();
    let kk = d.taps();
    let mut col = vec![0.0; d.c_in * kk * p];
    col.par_chunks_mut(kk * p).enumerate().for_each(|(ci, c)| {
        let plane = &x.data()[(n * d.c_in + ci) * d.h * d.w..][..d.h * d.w];
        for tap in 0..kk {
            for pos in 0..p {
                let (y, xx) = position(d, spec, off, n, tap, pos);
                c[tap * p + pos] = bilinear(plane, y, xx, d.h, d.w);
            }
        }
    });
    col
}

/// Convolution whose taps read `x` at their grid location displaced by
/// `offsets` `(N, 2*K*K, H_out, W_out)`: channel `2k` holds the row shift and
/// `2k + 1` the column shift of tap `k = ky * K + kx`.
pub fn deformable_conv2d_raw(
    x: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<Tensor> {
    let d = dims(x, offsets, weight, spec)?;
    if let Some(b) = bias {
        if b.numel() != d.c_out {
            return Err(Error::Shape(format!("bias length {} != C_out {}", b.numel(), d.c_out)));
        }
    }
    let p = d.positions();
    let inner = d.c_in * d.taps();
    let wd = weight.data();
    let mut out = Vec::with_capacity(d.n * d.c_out * p);
    for n in 0..d.n {
        let col = columns(&d, spec, x, offsets.data(), n);
        let mut sample = vec![0.0; d.c_out * p];
        sample.par_chunks_mut(p).enumerate().for_each(|(co, o)| {
            if let Some(b) = bias {
                o.fill(b.data()[co]);
            }
            for j in 0..inner {
                let wv = wd[co * inner + j];
                if wv == 0.0 {
                    continue;
                }
                for (v, c) in o.iter_mut().zip(&col[j * p..(j + 1) * p]) {
                    *v += wv * c;
                }
            }
        });
        out.extend(sample);
    }
    Tensor::new([d.n, d.c_out, d.oh, d.ow], out)
}

pub fn deformable_conv2d(x: &Tensor, offsets: &Tensor, params: &ConvParams) -> Result<Tensor> {
    deformable_conv2d_raw(x, offsets, &params.weight, params.bias.as_ref(), params.spec)
}

#[derive(Clone, Debug)]
pub struct DeformGrads {
    pub x: Option<Tensor>,
    pub offsets: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// `need` selects gradients for `[x, offsets, weight, bias]`.
pub fn deformable_conv2d_backward(
    x: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    spec: ConvSpec,
    grad_out: &Tensor,
    need: [bool; 4],
) -> Result<DeformGrads> {
    let d = dims(x, offsets, weight, spec)?;
    if grad_out.shape() != [d.n, d.c_out, d.oh, d.ow] {
        return Err(Error::Shape("grad_out does not match deformable conv output".into()));
    }
    let p = d.positions();
    let kk = d.taps();
    let inner = d.c_in * kk;
    let wd = weight.data();
    let gd = grad_out.data();
    let off = offsets.data();

    let mut gw = need[2].then(|| vec![0.0; d.c_out * inner]);
    let mut gx = need[0].then(|| vec![0.0; x.numel()]);
    let mut goff = need[1].then(|| vec![0.0; offsets.numel()]);

    for n in 0..d.n {
        let g = &gd[n * d.c_out * p..][..d.c_out * p];
        if let Some(gw) = gw.as_mut() {
            let col = columns(&d, spec, x, off, n);
            gw.par_chunks_mut(inner).enumerate().for_each(|(co, row)| {
                let gco = &g[co * p..(co + 1) * p];
                for (j, v) in row.iter_mut().enumerate() {
                    *v += gco.iter().zip(&col[j * p..(j + 1) * p]).map(|(a, b)| a * b).sum::<f64>();
                }
            });
        }
        if gx.is_none() && goff.is_none() {
            continue;
        }
        let mut gcol = vec![0.0; inner * p];
        gcol.par_chunks_mut(p).enumerate().for_each(|(j, gc)| {
            for co in 0..d.c_out {
                let wv = wd[co * inner + j];
                if wv == 0.0 {
                    continue;
                }
                for (v, gg) in gc.iter_mut().zip(&g[co * p..(co + 1) * p]) {
                    *v += wv * gg;
                }
            }
        });
        if let Some(gx) = gx.as_mut() {
            let planes = &mut gx[n * d.c_in * d.h * d.w..][..d.c_in * d.h * d.w];
            planes.par_chunks_mut(d.h * d.w).enumerate().for_each(|(ci, plane)| {
                for tap in 0..kk {
                    for pos in 0..p {
                        let gv = gcol[(ci * kk + tap) * p + pos];
                        let (y, xx) = position(&d, spec, off, n, tap, pos);
                        for t in bilinear_taps(y, xx, d.h, d.w) {
                            plane[t.index] += t.weight * gv;
                        }
                    }
                }
            });
        }
        if let Some(goff) = goff.as_mut() {
            let sample = &mut goff[n * 2 * kk * p..][..2 * kk * p];
            sample.par_chunks_mut(2 * p).enumerate().for_each(|(tap, pair)| {
                let (gy, gxx) = pair.split_at_mut(p);
                for pos in 0..p {
                    let (y, xx) = position(&d, spec, off, n, tap, pos);
                    let (mut sy, mut sx) = (0.0, 0.0);
                    for ci in 0..d.c_in {
                        let gv = gcol[(ci * kk + tap) * p + pos];
                        if gv == 0.0 {
                            continue;
                        }
                        let plane = &x.data()[(n * d.c_in + ci) * d.h * d.w..][..d.h * d.w];
                        for t in bilinear_taps(y, xx, d.h, d.w) {
                            sy += gv * t.dy * plane[t.index];
                            sx += gv * t.dx * plane[t.index];
                        }
                    }
                    gy[pos] = sy;
                    gxx[pos] = sx;
                }
            });
        }
    }

    let gb = need[3].then(|| {
        let mut gb = vec![0.0; d.c_out];
        for n in 0..d.n {
            for (co, b) in gb.iter_mut().enumerate() {
                *b += gd[(n * d.c_out + co) * p..][..p].iter().sum::<f64>();
            }
        }
        gb
    });

    Ok(DeformGrads {
        x: gx.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?,
        offsets: goff.map(|v| Tensor::new(offsets.shape().to_vec(), v)).transpose()?,
        weight: gw.map(|v| Tensor::new(weight.shape().to_vec(), v)).transpose()?,
        bias: gb.map(|v| Tensor::new([d.c_out], v)).transpose()?,
    })
}
