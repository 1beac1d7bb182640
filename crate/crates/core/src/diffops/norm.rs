//! Layer normalization (trailing axis) and instance normalization (per
//! channel over space). Both normalize contiguous segments with biased
//! variance and differ only in how the affine parameters are indexed.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

pub(crate) struct NormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

fn normalize_segments<T: Real>(x: &[T], seg: usize, eps: T) -> NormSaved<T> {
    let n = T::from_usize(seg).expect("segment length");
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / seg);
    for (xs, hs) in x.chunks(seg).zip(xhat.chunks_mut(seg)) {
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        for (h, &v) in hs.iter_mut().zip(xs) {
            *h = (v - mean) * r;
        }
        rstd.push(r);
    }
    NormSaved { xhat, rstd }
}

/// Gradient through the normalization for one segment, given `dxhat`.
fn segment_backward<T: Real>(dxhat: &[T], xhat: &[T], rstd: T, dx: &mut [T]) {
    let n = T::from_usize(dxhat.len()).expect("segment length");
    let mean_d = dxhat.iter().copied().sum::<T>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
    for ((o, &d), &h) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o = rstd * (d - mean_d - h * mean_dx);
    }
}

pub(crate) fn layer_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormSaved<T>)> {
    let f = x.last_dim();
    if gamma.len() != f || beta.len() != f {
        return shape_err(format!("layer_norm: {f} features but gamma/beta have {}/{}", gamma.len(), beta.len()));
    }
    let saved = normalize_segments(x.data(), f, eps);
    let (g, b) = (gamma.data(), beta.data());
    let mut y = saved.xhat.clone();
    for row in y.chunks_mut(f) {
        for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
            *v = *v * gv + bv;
        }
    }
    Ok((Tensor::new(x.dims().to_vec(), y)?, saved))
}

pub(crate) fn layer_norm_backward<T: Real>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &NormSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let f = gamma.len();
    let g = gamma.data();
    let mut dgamma = vec![T::zero(); f];
    let mut dbeta = vec![T::zero(); f];
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); f];
    for (((dyr, hr), dxr), &r) in dy.data().chunks(f).zip(saved.xhat.chunks(f)).zip(dx.chunks_mut(f)).zip(&saved.rstd) {
        for i in 0..f {
            dgamma[i] += dyr[i] * hr[i];
            dbeta[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
        }
        segment_backward(&dxhat, hr, r, dxr);
    }
    (
        Tensor::new(dy.dims().to_vec(), dx).expect("dims"),
        Tensor::new(vec![f], dgamma).expect("dims"),
        Tensor::new(vec![f], dbeta).expect("dims"),
    )
}

pub(crate) fn instance_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormSaved<T>)> {
    if x.rank() < 2 {
        return shape_err("instance_norm: input must be [C, spatial...]");
    }
    let c = x.dims()[0];
    if gamma.len() != c || beta.len() != c {
        return shape_err(format!("instance_norm: {c} channels but gamma/beta have {}/{}", gamma.len(), beta.len()));
    }
    let seg = x.len() / c;
    let saved = normalize_segments(x.data(), seg, eps);
    let mut y = saved.xhat.clone();
    for ((chunk, &gv), &bv) in y.chunks_mut(seg).zip(gamma.data()).zip(beta.data()) {
        chunk.iter_mut().for_each(|v| *v = *v * gv + bv);
    }
    Ok((Tensor::new(x.dims().to_vec(), y)?, saved))
}

pub(crate) fn instance_norm_backward<T: Real>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &NormSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let seg = dy.len() / c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); seg];
    for (ch, ((dyr, hr), dxr)) in dy.data().chunks(seg).zip(saved.xhat.chunks(seg)).zip(dx.chunks_mut(seg)).enumerate()
    {
        let g = gamma.data()[ch];
        let mut sg = T::zero();
        let mut sb = T::zero();
        for i in 0..seg {
            sg += dyr[i] * hr[i];
            sb += dyr[i];
            dxhat[i] = dyr[i] * g;
        }
        dgamma[ch] = sg;
        dbeta[ch] = sb;
        segment_backward(&dxhat, hr, saved.rstd[ch], dxr);
    }
    (
        Tensor::new(dy.dims().to_vec(), dx).expect("dims"),
        Tensor::new(vec![c], dgamma).expect("dims"),
        Tensor::new(vec![c], dbeta).expect("dims"),
    )
}

/// Layer normalization over the trailing axis.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    layer_norm_forward(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Instance normalization of `[C, spatial...]` with per-channel affine.
pub fn instance_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    instance_norm_forward(x, gamma, beta, eps).map(|(y, _)| y)
}
