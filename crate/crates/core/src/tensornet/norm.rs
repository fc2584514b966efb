//! Per-channel batch normalization and pointwise activations.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the running statistic kept at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Saved forward state of a training-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Batch statistics produced by a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f64>,
}

fn check_affine<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, layer: &str) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4(layer)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!("{layer} affine"), &[c], gamma.shape()));
    }
    Ok((n, c, h * w))
}

pub fn batchnorm2d_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    layer: &str,
) -> Result<(Tensor<T>, BnCache<T>, BnStats)> {
    let (n, c, hw) = check_affine(x, gamma, beta, layer)?;
    let m = n * hw;
    if m < 2 {
        return Err(Error::SingletonStatistics {
            layer: layer.to_string(),
        });
    }
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += xd[(i * c + ch) * hw..][..hw].iter().map(|v| v.f64()).sum::<f64>();
        }
        let mu = s / m as f64;
        let mut ss = 0.0;
        for i in 0..n {
            ss += xd[(i * c + ch) * hw..][..hw]
                .iter()
                .map(|v| (v.f64() - mu).powi(2))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / m as f64;
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let mu = T::of(mean[ch]);
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for (k, &xv) in xd.iter().enumerate().skip(off).take(hw) {
                let xh = (xv - mu) * inv_std[ch];
                xhat.data_mut()[k] = xh;
                y.data_mut()[k] = g * xh + b;
            }
        }
    }
    let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
    Ok((y, BnCache { xhat, inv_std }, BnStats { mean, var: unbiased }))
}

pub fn batchnorm2d_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    layer: &str,
) -> Result<Tensor<T>> {
    let (n, c, hw) = check_affine(x, gamma, beta, layer)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape(format!("{layer} running stats"), &[c], running_mean.shape()));
    }
    let mut y = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let inv = T::of(1.0 / (running_var.data()[ch].f64() + BN_EPS).sqrt());
            let scale = gamma.data()[ch] * inv;
            let shift = beta.data()[ch] - running_mean.data()[ch] * scale;
            for v in &mut y.data_mut()[(i * c + ch) * hw..][..hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm2d_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
    layer: &str,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if gy.shape() != cache.xhat.shape() {
        return Err(Error::shape(format!("{layer} upstream gradient"), cache.xhat.shape(), gy.shape()));
    }
    let (n, c, h, w) = gy.dims4(layer)?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let (xh, g) = (cache.xhat.data(), gy.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = Tensor::zeros(gy.shape());
    for ch in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for k in off..off + hw {
                sum_g += g[k].f64();
                sum_gx += g[k].f64() * xh[k].f64();
            }
        }
        dgamma[ch] = T::of(sum_gx);
        dbeta[ch] = T::of(sum_g);
        let gm = gamma.data()[ch].f64();
        let inv = cache.inv_std[ch].f64();
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for k in off..off + hw {
                let v = gm * inv / m * (m * g[k].f64() - sum_g - xh[k].f64() * sum_gx);
                dx.data_mut()[k] = T::of(v);
            }
        }
    }
    Ok((dx, Tensor::from_vec(&[c], dgamma)?, Tensor::from_vec(&[c], dbeta)?))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

/// Gradient of [`relu`] given its input.
pub fn relu_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(gy, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
    let s = T::of(slope);
    x.zip_map(gy, |v, g| if v > T::zero() { g } else { g * s })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::of(1.0 / (1.0 + (-v.f64()).exp())))
}

/// Gradient of [`sigmoid`] given its input.
pub fn sigmoid_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(gy, |v, g| {
        let s = 1.0 / (1.0 + (-v.f64()).exp());
        g * T::of(s * (1.0 - s))
    })
}
