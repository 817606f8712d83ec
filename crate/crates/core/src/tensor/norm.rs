use super::Tensor;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Batch-norm statistics source.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by stored running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel statistics a batch-norm forward pass normalized with.
/// `var` is the biased (population) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Values per channel, `N * H * W`.
    pub count: usize,
}

/// Per-channel mean and biased variance over `N, H, W`.
fn moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = n * plane;
    if count == 0 {
        return Err(Error::Shape("statistics over an empty tensor".into()));
    }
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let values = || (0..n).flat_map(move |ni| &d[(ni * c + ch) * plane..][..plane]);
        let m = values().sum::<f64>() / count as f64;
        mean[ch] = m;
        var[ch] = values().map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
    }
    Ok((mean, var, count))
}

fn check_channels(name: &str, t: &Tensor, c: usize) -> Result<()> {
    if t.numel() != c {
        return Err(Error::Shape(format!("{name} has {} entries, expected {c}", t.numel())));
    }
    Ok(())
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    mode: &BatchNormMode,
) -> Result<(Tensor, BatchStats)> {
    let (n, c, h, w) = x.dims4()?;
    check_channels("gamma", gamma, c)?;
    check_channels("beta", beta, c)?;
    let (mean, var, count) = match mode {
        BatchNormMode::Train => moments(x)?,
        BatchNormMode::Eval { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::Shape("running statistics do not match channels".into()));
            }
            (mean.clone(), var.clone(), n * h * w)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let plane = h * w;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let (m, s, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
        for v in chunk {
            *v = g * (*v - m) * s + b;
        }
    }
    Ok((
        out,
        BatchStats {
            mean,
            var,
            inv_std,
            count,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`. In train mode the statistics
/// depend on `x` and contribute to `grad_x`.
pub fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &BatchStats,
    train: bool,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    if grad_out.shape() != x.shape() {
        return Err(Error::Shape("grad_out does not match batch-norm input".into()));
    }
    let plane = h * w;
    let xd = x.data();
    let gd = grad_out.data();
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * plane;
            let (m, s) = (stats.mean[ch], stats.inv_std[ch]);
            for k in base..base + plane {
                gbeta[ch] += gd[k];
                ggamma[ch] += gd[k] * (xd[k] - m) * s;
            }
        }
    }
    let mut gx = vec![0.0; xd.len()];
    let count = stats.count as f64;
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * plane;
            let (m, s, g) = (stats.mean[ch], stats.inv_std[ch], gamma.data()[ch]);
            for k in base..base + plane {
                gx[k] = if train {
                    let xhat = (xd[k] - m) * s;
                    g * s * (gd[k] - gbeta[ch] / count - xhat * ggamma[ch] / count)
                } else {
                    g * s * gd[k]
                };
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(gamma.shape().to_vec(), ggamma)?,
        Tensor::new(gamma.shape().to_vec(), gbeta)?,
    ))
}

/// Per-channel mean and `sqrt(var + eps)` over batch and space, each shaped
/// `(1, C, 1, 1)`.
pub fn channel_stats(x: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    let (_, c, _, _) = x.dims4()?;
    let (mean, var, _) = moments(x)?;
    let sigma = var.iter().map(|v| (v + eps).sqrt()).collect();
    Ok((Tensor::new([1, c, 1, 1], mean)?, Tensor::new([1, c, 1, 1], sigma)?))
}

/// Gradient of `channel_stats` w.r.t. `x` for cotangents on either output.
pub fn channel_stats_backward(
    x: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    grad_mu: Option<&Tensor>,
    grad_sigma: Option<&Tensor>,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut gx = vec![0.0; x.numel()];
    for ni in 0..n {
        for ch in 0..c {
            let gm = grad_mu.map_or(0.0, |g| g.data()[ch]) / count;
            let gs = grad_sigma.map_or(0.0, |g| g.data()[ch]) / (count * sigma.data()[ch]);
            let m = mu.data()[ch];
            let base = (ni * c + ch) * plane;
            let span = base..base + plane;
            for (g, &v) in gx[span.clone()].iter_mut().zip(&x.data()[span]) {
                *g = gm + gs * (v - m);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stats_closed_forms() {
        let x = Tensor::new([1, 2, 1, 2], vec![3.0, 3.0, -1.0, 1.0]).unwrap();
        let (mu, sigma) = channel_stats(&x, NORM_EPS).unwrap();
        assert_eq!(mu.data(), &[3.0, 0.0]);
        assert!((sigma.data()[0] - NORM_EPS.sqrt()).abs() < 1e-18);
        assert!((sigma.data()[1] - (1.0 + NORM_EPS).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn train_mode_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([3, 4, 5, 5], 2.0, &mut rng).map(|v| v + 1.5);
        let ones = Tensor::full([4], 1.0);
        let zeros = Tensor::zeros([4]);
        let (y, stats) = batch_norm(&x, &ones, &zeros, NORM_EPS, &BatchNormMode::Train).unwrap();
        let (m, s) = channel_stats(&y, 0.0).unwrap();
        for ch in 0..4 {
            assert!(m.data()[ch].abs() < 1e-12);
            let expected = (stats.var[ch] / (stats.var[ch] + NORM_EPS)).sqrt();
            assert!((s.data()[ch] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::full([2, 1, 3, 3], 7.0);
        let (y, _) = batch_norm(&x, &Tensor::full([1], 1.0), &Tensor::zeros([1]), NORM_EPS, &BatchNormMode::Train).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::full([1, 1, 2, 2], 3.0);
        let mode = BatchNormMode::Eval {
            mean: vec![1.0],
            var: vec![4.0 - NORM_EPS],
        };
        let (y, _) = batch_norm(&x, &Tensor::full([1], 2.0), &Tensor::full([1], 0.5), NORM_EPS, &mode).unwrap();
        assert!(y.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
