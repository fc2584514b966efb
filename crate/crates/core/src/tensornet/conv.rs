//! 2-D convolution and transposed convolution on NCHW tensors.
//!
//! Convolution is cross-correlation (no kernel flip). Transposed convolution
//! is the adjoint of convolution with respect to its input; both share the
//! same im2col/col2im index map, so `<conv(x), y> == <x, dconv(y)>`.
//!
//! Batch elements are processed in parallel. Weight gradients are computed
//! per element and summed in batch order.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    fn check(&self, context: &str) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::config(context, "kernel and stride must be positive"));
        }
        Ok(())
    }

    /// Output extents of a convolution over an `h × w` input.
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let dim = |i: usize, k: usize, s: usize, p: usize| {
            let padded = i + 2 * p;
            (padded >= k).then(|| (padded - k) / s + 1)
        };
        Some((
            dim(h, self.kernel.0, self.stride.0, self.padding.0)?,
            dim(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    /// Output extents of a transposed convolution over an `h × w` input.
    pub fn dconv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let dim = |i: usize, k: usize, s: usize, p: usize| {
            let full = (i - 1) * s + k;
            (i >= 1 && full > 2 * p).then(|| full - 2 * p)
        };
        Some((
            dim(h, self.kernel.0, self.stride.0, self.padding.0)?,
            dim(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Unfolds one `c × h × w` image into a `(c·kh·kw) × (oh·ow)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(img: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, col: &mut [T]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    let cols = oh * ow;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((ch * kh + ki) * kw + kj) * cols..][..cols];
                for oi in 0..oh {
                    let ii = (oi * sh) as isize - ph + ki as isize;
                    let dst = &mut row[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * sw) as isize - pw + kj as isize;
                        *d = if jj < 0 || jj >= w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, img: &mut [T]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    let cols = oh * ow;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((ch * kh + ki) * kw + kj) * cols..][..cols];
                for oi in 0..oh {
                    let ii = (oi * sh) as isize - ph + ki as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, &v) in row[oi * ow..(oi + 1) * ow].iter().enumerate() {
                        let jj = (oj * sw) as isize - pw + kj as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] = dst[jj as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: &ConvGeom,
    context: &str,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    g.check(context)?;
    let (n, c, h, wd) = x.dims4(context)?;
    let (oc, wc, kh, kw) = w.dims4(context)?;
    if wc != c || (kh, kw) != g.kernel {
        return Err(Error::shape(
            format!("{context} weight"),
            &[oc, c, g.kernel.0, g.kernel.1],
            w.shape(),
        ));
    }
    if b.shape() != [oc] {
        return Err(Error::shape(format!("{context} bias"), &[oc], b.shape()));
    }
    let (oh, ow) = g
        .conv_out(h, wd)
        .ok_or_else(|| Error::shape(format!("{context} input smaller than kernel"), &[g.kernel.0, g.kernel.1], &[h, wd]))?;
    Ok((n, c, h, wd, oc, oh, ow))
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: &ConvGeom,
    context: &str,
) -> Result<Tensor<T>> {
    let (n, c, h, wd, oc, oh, ow) = conv_shapes(x, w, b, g, context)?;
    let ckk = c * g.kernel.0 * g.kernel.1;
    let cols = oh * ow;
    let mut y = Tensor::zeros(&[n, oc, oh, ow]);
    par::for_each_chunk_mut(y.data_mut(), oc * cols, |i, out| {
        let img = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        let mut col = vec![T::zero(); ckk * cols];
        im2col(img, c, h, wd, g, oh, ow, &mut col);
        for (o, row) in out.chunks_mut(cols).enumerate() {
            row.iter_mut().for_each(|v| *v = b.data()[o]);
        }
        T::gemm(oc, ckk, cols, w.data(), (ckk as isize, 1), &col, (cols as isize, 1), T::one(), out, (cols as isize, 1));
    });
    Ok(y)
}

/// Gradients of a convolution: `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    gy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    context: &str,
) -> Result<ConvGrads<T>> {
    let (n, c, h, wd, oc, oh, ow) = conv_shapes(x, w, b, g, context)?;
    if gy.shape() != [n, oc, oh, ow] {
        return Err(Error::shape(format!("{context} upstream gradient"), &[n, oc, oh, ow], gy.shape()));
    }
    let ckk = c * g.kernel.0 * g.kernel.1;
    let cols = oh * ow;
    let per_sample = par::map_indexed(n, |i| {
        let img = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        let gyi = &gy.data()[i * oc * cols..(i + 1) * oc * cols];
        let mut col = vec![T::zero(); ckk * cols];
        im2col(img, c, h, wd, g, oh, ow, &mut col);
        let mut dw = vec![T::zero(); oc * ckk];
        // dw = gy · colᵀ
        T::gemm(oc, cols, ckk, gyi, (cols as isize, 1), &col, (1, cols as isize), T::zero(), &mut dw, (ckk as isize, 1));
        let db: Vec<T> = gyi.chunks(cols).map(|r| r.iter().copied().sum()).collect();
        let dx = need_dx.then(|| {
            // dcol = wᵀ · gy
            T::gemm(ckk, oc, cols, w.data(), (1, ckk as isize), gyi, (cols as isize, 1), T::zero(), &mut col, (cols as isize, 1));
            let mut dxi = vec![T::zero(); c * h * wd];
            col2im(&col, c, h, wd, g, oh, ow, &mut dxi);
            dxi
        });
        (dx, dw, db)
    });
    reduce_grads(per_sample, &[n, c, h, wd], w.shape(), oc)
}

fn dconv_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: &ConvGeom,
    context: &str,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    g.check(context)?;
    let (n, c, h, wd) = x.dims4(context)?;
    let (wc, oc, kh, kw) = w.dims4(context)?;
    if wc != c || (kh, kw) != g.kernel {
        return Err(Error::shape(
            format!("{context} weight"),
            &[c, oc, g.kernel.0, g.kernel.1],
            w.shape(),
        ));
    }
    if b.shape() != [oc] {
        return Err(Error::shape(format!("{context} bias"), &[oc], b.shape()));
    }
    let (oh, ow) = g
        .dconv_out(h, wd)
        .ok_or_else(|| Error::shape(format!("{context} empty output"), &[1, 1], &[h, wd]))?;
    Ok((n, c, h, wd, oc, oh, ow))
}

/// Transposed convolution. Weights are laid out `[in, out, kh, kw]`.
pub fn dconv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: &ConvGeom,
    context: &str,
) -> Result<Tensor<T>> {
    let (n, c, h, wd, oc, oh, ow) = dconv_shapes(x, w, b, g, context)?;
    let okk = oc * g.kernel.0 * g.kernel.1;
    let cols = h * wd;
    let mut y = Tensor::zeros(&[n, oc, oh, ow]);
    par::for_each_chunk_mut(y.data_mut(), oc * oh * ow, |i, out| {
        let xi = &x.data()[i * c * cols..(i + 1) * c * cols];
        let mut col = vec![T::zero(); okk * cols];
        // col = wᵀ · x, with w viewed as [in, out·kh·kw]
        T::gemm(okk, c, cols, w.data(), (1, okk as isize), xi, (cols as isize, 1), T::zero(), &mut col, (cols as isize, 1));
        col2im(&col, oc, oh, ow, g, h, wd, out);
        for (o, plane) in out.chunks_mut(oh * ow).enumerate() {
            plane.iter_mut().for_each(|v| *v = *v + b.data()[o]);
        }
    });
    Ok(y)
}

pub fn dconv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    gy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    context: &str,
) -> Result<ConvGrads<T>> {
    let (n, c, h, wd, oc, oh, ow) = dconv_shapes(x, w, b, g, context)?;
    if gy.shape() != [n, oc, oh, ow] {
        return Err(Error::shape(format!("{context} upstream gradient"), &[n, oc, oh, ow], gy.shape()));
    }
    let okk = oc * g.kernel.0 * g.kernel.1;
    let cols = h * wd;
    let per_sample = par::map_indexed(n, |i| {
        let xi = &x.data()[i * c * cols..(i + 1) * c * cols];
        let gyi = &gy.data()[i * oc * oh * ow..(i + 1) * oc * oh * ow];
        let mut gcol = vec![T::zero(); okk * cols];
        im2col(gyi, oc, oh, ow, g, h, wd, &mut gcol);
        let mut dw = vec![T::zero(); c * okk];
        // dw = x · gcolᵀ
        T::gemm(c, cols, okk, xi, (cols as isize, 1), &gcol, (1, cols as isize), T::zero(), &mut dw, (okk as isize, 1));
        let db: Vec<T> = gyi.chunks(oh * ow).map(|r| r.iter().copied().sum()).collect();
        let dx = need_dx.then(|| {
            let mut dxi = vec![T::zero(); c * cols];
            T::gemm(c, okk, cols, w.data(), (okk as isize, 1), &gcol, (cols as isize, 1), T::zero(), &mut dxi, (cols as isize, 1));
            dxi
        });
        (dx, dw, db)
    });
    reduce_grads(per_sample, &[n, c, h, wd], w.shape(), oc)
}

type SampleGrads<T> = (Option<Vec<T>>, Vec<T>, Vec<T>);

/// `(dx, dw, db)`; `dx` only when requested.
pub type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

fn reduce_grads<T: Real>(
    per_sample: Vec<SampleGrads<T>>,
    x_shape: &[usize],
    w_shape: &[usize],
    oc: usize,
) -> Result<ConvGrads<T>> {
    let mut dw = vec![T::zero(); w_shape.iter().product()];
    let mut db = vec![T::zero(); oc];
    let mut dx = Vec::new();
    let mut have_dx = false;
    for (dxi, dwi, dbi) in per_sample {
        for (a, b) in dw.iter_mut().zip(&dwi) {
            *a = *a + *b;
        }
        for (a, b) in db.iter_mut().zip(&dbi) {
            *a = *a + *b;
        }
        if let Some(d) = dxi {
            have_dx = true;
            dx.extend_from_slice(&d);
        }
    }
    let dx = if have_dx {
        Some(Tensor::from_vec(x_shape, dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::from_vec(w_shape, dw)?, Tensor::from_vec(&[oc], db)?))
}
