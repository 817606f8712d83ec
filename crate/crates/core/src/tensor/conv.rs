use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Stride, zero padding and channel grouping of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    /// Stride 1 with `(k - 1) / 2` padding.
    pub const fn same(k: usize) -> Self {
        Self::new(1, (k - 1) / 2)
    }

    pub const fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Weight `(C_out, C_in / groups, K, K)`, optional bias `(C_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, spec: ConvSpec) -> Result<Self> {
        let (c_out, _, kh, kw) = weight.dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if spec.groups == 0 || c_out % spec.groups != 0 {
            return Err(Error::Shape(format!(
                "groups {} must divide C_out {c_out}",
                spec.groups
            )));
        }
        if let Some(b) = &bias {
            if b.numel() != c_out {
                return Err(Error::Shape(format!("bias length {} != C_out {c_out}", b.numel())));
            }
        }
        Ok(Self { weight, bias, spec })
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }
}

pub fn conv_output_size(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x: &Tensor, weight: &Tensor, spec: ConvSpec) -> Result<Geometry> {
    let (n, c_in, h, w) = x.dims4()?;
    let (c_out, cin_g, kh, kw) = weight.dims4()?;
    if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(Error::Shape(format!(
            "groups {} must divide C_in {c_in} and C_out {c_out}",
            spec.groups
        )));
    }
    if c_in / spec.groups != cin_g {
        return Err(Error::Shape(format!(
            "weight expects {cin_g} input channels per group, input has {}",
            c_in / spec.groups
        )));
    }
    let oh = conv_output_size(h, kh, spec.stride, spec.padding)?;
    let ow = conv_output_size(w, kw, spec.stride, spec.padding)?;
    Ok(Geometry {
        n,
        c_in,
        h,
        w,
        c_out,
        cin_g,
        cout_g: c_out / spec.groups,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Valid output index range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn tap_range(k: usize, out: usize, input: usize, stride: usize, padding: usize) -> (usize, usize) {
    // input index = o * stride + k - padding must lie in [0, input)
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if input + padding > k {
        ((input + padding - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation with explicit weight and bias.
pub fn conv2d_raw(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let g = geometry(x, weight, spec)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(Error::Shape(format!("bias length {} != C_out {}", b.numel(), g.c_out)));
        }
    }
    let (s, p) = (spec.stride, spec.padding);
    let xd = x.data();
    let wd = weight.data();
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.c_out * plane_out];
    out.par_chunks_mut(plane_out).enumerate().for_each(|(idx, o)| {
        let n = idx / g.c_out;
        let co = idx % g.c_out;
        let grp = co / g.cout_g;
        if let Some(b) = bias {
            o.fill(b.data()[co]);
        }
        for cil in 0..g.cin_g {
            let ci = grp * g.cin_g + cil;
            let xp = &xd[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = tap_range(ky, g.oh, g.h, s, p);
                for kx in 0..g.kw {
                    let wv = wd[((co * g.cin_g + cil) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = tap_range(kx, g.ow, g.w, s, p);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let xrow = &xp[iy * g.w..][..g.w];
                        let orow = &mut o[oy * g.ow..][..g.ow];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * xrow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    });
    Tensor::new([g.n, g.c_out, g.oh, g.ow], out)
}

pub fn conv2d(x: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv2d_raw(x, &params.weight, params.bias.as_ref(), params.spec)
}

/// Gradients of a convolution; entries are `None` when not requested.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub x: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    spec: ConvSpec,
    grad_out: &Tensor,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let g = geometry(x, weight, spec)?;
    if grad_out.shape() != [g.n, g.c_out, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "grad_out {:?} does not match conv output",
            grad_out.shape()
        )));
    }
    let (s, p) = (spec.stride, spec.padding);
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;

    let grad_x = need[0].then(|| {
        let mut gx = vec![0.0; g.n * g.c_in * plane_in];
        gx.par_chunks_mut(plane_in).enumerate().for_each(|(idx, gxp)| {
            let n = idx / g.c_in;
            let ci = idx % g.c_in;
            let grp = ci / g.cin_g;
            let cil = ci % g.cin_g;
            for col in 0..g.cout_g {
                let co = grp * g.cout_g + col;
                let gp = &gd[(n * g.c_out + co) * plane_out..][..plane_out];
                for ky in 0..g.kh {
                    let (oy0, oy1) = tap_range(ky, g.oh, g.h, s, p);
                    for kx in 0..g.kw {
                        let wv = wd[((co * g.cin_g + cil) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = tap_range(kx, g.ow, g.w, s, p);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let grow = &gp[oy * g.ow..][..g.ow];
                            let xrow = &mut gxp[iy * g.w..][..g.w];
                            for ox in ox0..ox1 {
                                xrow[ox * s + kx - p] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });
        Tensor::new([g.n, g.c_in, g.h, g.w], gx)
    });

    let grad_w = need[1].then(|| {
        let per_out = g.cin_g * g.kh * g.kw;
        let mut gw = vec![0.0; g.c_out * per_out];
        gw.par_chunks_mut(per_out).enumerate().for_each(|(co, gwc)| {
            let grp = co / g.cout_g;
            for n in 0..g.n {
                let gp = &gd[(n * g.c_out + co) * plane_out..][..plane_out];
                for cil in 0..g.cin_g {
                    let ci = grp * g.cin_g + cil;
                    let xp = &xd[(n * g.c_in + ci) * plane_in..][..plane_in];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = tap_range(ky, g.oh, g.h, s, p);
                        for kx in 0..g.kw {
                            let (ox0, ox1) = tap_range(kx, g.ow, g.w, s, p);
                            let mut acc = 0.0;
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - p;
                                let grow = &gp[oy * g.ow..][..g.ow];
                                let xrow = &xp[iy * g.w..][..g.w];
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[ox * s + kx - p];
                                }
                            }
                            gwc[(cil * g.kh + ky) * g.kw + kx] += acc;
                        }
                    }
                }
            }
        });
        Tensor::new(weight.shape().to_vec(), gw)
    });

    let grad_b = need[2].then(|| {
        let mut gb = vec![0.0; g.c_out];
        for n in 0..g.n {
            for (co, b) in gb.iter_mut().enumerate() {
                *b += gd[(n * g.c_out + co) * plane_out..][..plane_out].iter().sum::<f64>();
            }
        }
        Tensor::new([g.c_out], gb)
    });

    Ok(ConvGrads {
        x: grad_x.transpose()?,
        weight: grad_w.transpose()?,
        bias: grad_b.transpose()?,
    })
}

fn depthwise_dims(x: &Tensor, kernels: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (kn, kc, kh, kw) = kernels.dims4()?;
    if kn != n || kc != c {
        return Err(Error::Shape(format!(
            "kernels {:?} do not match input {:?}",
            kernels.shape(),
            x.shape()
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!("depthwise kernel must be square and odd, got {kh}x{kw}")));
    }
    Ok((n, c, h, w, kh))
}

/// Convolves every `(sample, channel)` plane with its own `K x K` kernel,
/// stride 1, padding `(K - 1) / 2`. `kernels` is `(N, C, K, K)`.
pub fn depthwise_conv2d(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let (n, c, h, w, k) = depthwise_dims(x, kernels)?;
    let pad = (k - 1) / 2;
    let xd = x.data();
    let kd = kernels.data();
    let mut out = vec![0.0; n * c * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(idx, o)| {
        let xp = &xd[idx * h * w..][..h * w];
        let kp = &kd[idx * k * k..][..k * k];
        for ky in 0..k {
            let (y0, y1) = tap_range(ky, h, h, 1, pad);
            for kx in 0..k {
                let kv = kp[ky * k + kx];
                if kv == 0.0 {
                    continue;
                }
                let (x0, x1) = tap_range(kx, w, w, 1, pad);
                for y in y0..y1 {
                    let iy = y + ky - pad;
                    for xx in x0..x1 {
                        o[y * w + xx] += kv * xp[iy * w + xx + kx - pad];
                    }
                }
            }
        }
    });
    Tensor::new([n, c, h, w], out)
}

/// Returns `(grad_x, grad_kernels)`.
pub fn depthwise_conv2d_backward(x: &Tensor, kernels: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w, k) = depthwise_dims(x, kernels)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::Shape("grad_out does not match depthwise output".into()));
    }
    let pad = (k - 1) / 2;
    let xd = x.data();
    let kd = kernels.data();
    let gd = grad_out.data();
    let planes: Vec<(Vec<f64>, Vec<f64>)> = (0..n * c)
        .into_par_iter()
        .map(|idx| {
            let xp = &xd[idx * h * w..][..h * w];
            let kp = &kd[idx * k * k..][..k * k];
            let gp = &gd[idx * h * w..][..h * w];
            let mut gx = vec![0.0; h * w];
            let mut gk = vec![0.0; k * k];
            for ky in 0..k {
                let (y0, y1) = tap_range(ky, h, h, 1, pad);
                for kx in 0..k {
                    let kv = kp[ky * k + kx];
                    let (x0, x1) = tap_range(kx, w, w, 1, pad);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + ky - pad;
                        for xx in x0..x1 {
                            let ix = xx + kx - pad;
                            acc += gp[y * w + xx] * xp[iy * w + ix];
                            gx[iy * w + ix] += kv * gp[y * w + xx];
                        }
                    }
                    gk[ky * k + kx] = acc;
                }
            }
            (gx, gk)
        })
        .collect();
    let mut gx = Vec::with_capacity(n * c * h * w);
    let mut gk = Vec::with_capacity(n * c * k * k);
    for (a, b) in planes {
        gx.extend(a);
        gk.extend(b);
    }
    Ok((Tensor::new([n, c, h, w], gx)?, Tensor::new([n, c, k, k], gk)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition, no loop-range tricks.
    fn conv_naive(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
        let (n, c_in, h, wd) = x.dims4().unwrap();
        let (c_out, cin_g, k, _) = w.dims4().unwrap();
        let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
        let ow = (wd + 2 * spec.padding - k) / spec.stride + 1;
        let cout_g = c_out / spec.groups;
        let mut out = Tensor::zeros([n, c_out, oh, ow]);
        for ni in 0..n {
            for co in 0..c_out {
                let grp = co / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for cil in 0..cin_g {
                            let ci = grp * cin_g + cil;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((co * cin_g + cil) * k + ky) * k + kx]
                                        * x.data()[((ni * c_in + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((ni * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_examples() {
        let x = Tensor::full([1, 1, 3, 3], 1.0);
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        let y = conv2d_raw(&x, &w, None, ConvSpec::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
        let y = conv2d_raw(&x, &w, None, ConvSpec::new(1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[4], 9.0);
    }

    #[test]
    fn matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, padding, groups, k) in &[(1, 1, 1, 3), (2, 1, 1, 3), (1, 0, 2, 3), (2, 2, 4, 5), (1, 2, 1, 4)] {
            let x = Tensor::randn([2, 4, 7, 6], 1.0, &mut rng);
            let w = Tensor::randn([4, 4 / groups, k, k], 1.0, &mut rng);
            let b = Tensor::randn([4], 1.0, &mut rng);
            let spec = ConvSpec::new(stride, padding).with_groups(groups);
            let fast = conv2d_raw(&x, &w, Some(&b), spec).unwrap();
            let slow = conv_naive(&x, &w, Some(&b), spec);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> for the linear map x -> conv(x)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::new(2, 1).with_groups(2);
        let x = Tensor::randn([2, 4, 9, 8], 1.0, &mut rng);
        let w = Tensor::randn([6, 2, 3, 3], 1.0, &mut rng);
        let y = conv2d_raw(&x, &w, None, spec).unwrap();
        let g = Tensor::randn(y.shape().to_vec(), 1.0, &mut rng);
        let grads = conv2d_backward(&x, &w, spec, &g, [true, true, false]).unwrap();
        let lhs = y.dot(&g).unwrap();
        assert!((lhs - x.dot(grads.x.as_ref().unwrap()).unwrap()).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - w.dot(grads.weight.as_ref().unwrap()).unwrap()).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn params_reject_even_kernels() {
        let w = Tensor::zeros([1, 1, 2, 2]);
        assert!(ConvParams::new(w, None, ConvSpec::new(1, 0)).is_err());
        let w = Tensor::zeros([3, 1, 3, 3]);
        assert!(ConvParams::new(w, None, ConvSpec::new(1, 1).with_groups(2)).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = Tensor::zeros([1, 3, 5, 5]);
        let w = Tensor::zeros([2, 2, 3, 3]);
        assert!(conv2d_raw(&x, &w, None, ConvSpec::new(1, 1)).is_err());
    }

    #[test]
    fn depthwise_delta_and_zero_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn([2, 3, 6, 5], 1.0, &mut rng);
        let mut delta = Tensor::zeros([2, 3, 3, 3]);
        for i in 0..6 {
            delta.data_mut()[i * 9 + 4] = 1.0;
        }
        assert_eq!(depthwise_conv2d(&x, &delta).unwrap(), x);
        let zero = depthwise_conv2d(&x, &Tensor::zeros([2, 3, 3, 3])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 4;
        let x = Tensor::randn([2, c, 7, 7], 1.0, &mut rng);
        let k = Tensor::randn([c, 1, 3, 3], 1.0, &mut rng);
        let per_sample = Tensor::stack_batch(&[k.reshape([1, c, 3, 3]).unwrap(), k.reshape([1, c, 3, 3]).unwrap()]).unwrap();
        let dw = depthwise_conv2d(&x, &per_sample).unwrap();
        let grouped = conv2d_raw(&x, &k, None, ConvSpec::same(3).with_groups(c)).unwrap();
        assert!(dw.max_abs_diff(&grouped).unwrap() < 1e-12);
    }
}
