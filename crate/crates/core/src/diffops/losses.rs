//! Scalar-valued loss primitives.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

use super::activation::axis_split;

/// Mean absolute error against a constant target.
pub fn l1_mean<T: Real>(x: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if x.dims() != target.dims() {
        return shape_err(format!("l1 loss: {:?} vs target {:?}", x.dims(), target.dims()));
    }
    let n = T::from_usize(x.len()).expect("count");
    Ok(x.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n)
}

/// Subgradient of `|u|` with `sign(0) = 0`.
pub(crate) fn l1_mean_grad<T: Real>(x: &Tensor<T>, target: &Tensor<T>, g: T) -> Tensor<T> {
    let scale = g / T::from_usize(x.len()).expect("count");
    let data = x
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let u = a - b;
            if u > T::zero() {
                scale
            } else if u < T::zero() {
                -scale
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(x.dims().to_vec(), data).expect("dims")
}

pub(crate) fn check_labels(logits: &Tensor<impl Real>, axis: usize, labels: &[usize]) -> Result<(usize, usize, usize)> {
    let (outer, k, inner) = axis_split(logits.dims(), axis)?;
    if labels.len() != outer * inner {
        return shape_err(format!("cross entropy: {} labels for {} positions", labels.len(), outer * inner));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    Ok((outer, k, inner))
}

/// Mean cross-entropy of `softmax(logits)` along `axis` against integer
/// labels (one per remaining position, in row-major order). Returns the
/// loss and the softmax probabilities.
pub(crate) fn cross_entropy_forward<T: Real>(
    logits: &Tensor<T>,
    axis: usize,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (outer, k, inner) = check_labels(logits, axis, labels)?;
    let z = logits.data();
    let mut probs = vec![T::zero(); z.len()];
    let mut total = T::zero();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * k + j) * inner + i;
            let m = (0..k).map(|j| z[at(j)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..k {
                let e = (z[at(j)] - m).exp();
                probs[at(j)] = e;
                s += e;
            }
            for j in 0..k {
                probs[at(j)] /= s;
            }
            let lse = m + s.ln();
            total += lse - z[at(labels[o * inner + i])];
        }
    }
    let n = T::from_usize(outer * inner).expect("count");
    Ok((total / n, Tensor::new(logits.dims().to_vec(), probs)?))
}

/// Cross-entropy of softmax along `axis`; see [`cross_entropy_forward`].
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, axis: usize, labels: &[usize]) -> Result<T> {
    cross_entropy_forward(logits, axis, labels).map(|(l, _)| l)
}

pub(crate) fn cross_entropy_grad<T: Real>(probs: &Tensor<T>, axis: usize, labels: &[usize], g: T) -> Tensor<T> {
    let (outer, k, inner) = axis_split(probs.dims(), axis).expect("validated");
    let scale = g / T::from_usize(outer * inner).expect("count");
    let mut d: Vec<T> = probs.data().iter().map(|&p| p * scale).collect();
    for o in 0..outer {
        for i in 0..inner {
            let j = labels[o * inner + i];
            d[(o * k + j) * inner + i] -= scale;
        }
    }
    Tensor::new(probs.dims().to_vec(), d).expect("dims")
}

const DICE_SMOOTH: f64 = 1e-5;

pub(crate) struct DiceSaved<T> {
    pub inter: Vec<T>,
    pub denom: Vec<T>,
}

/// Soft Dice loss `1 − mean_k (2Σp·y + ε)/(Σp + Σy + ε)` over all classes of
/// channel-major probabilities `[K, spatial...]`.
pub(crate) fn soft_dice_forward<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<(T, DiceSaved<T>)> {
    let (_, k, n) = check_labels(probs, 0, labels)?;
    let eps = T::lit(DICE_SMOOTH);
    let p = probs.data();
    let mut inter = vec![T::zero(); k];
    let mut psum = vec![T::zero(); k];
    let mut ysum = vec![T::zero(); k];
    for c in 0..k {
        let pc = &p[c * n..(c + 1) * n];
        psum[c] = pc.iter().copied().sum();
        for (i, &l) in labels.iter().enumerate() {
            if l == c {
                inter[c] += pc[i];
                ysum[c] += T::one();
            }
        }
    }
    let denom: Vec<T> = (0..k).map(|c| psum[c] + ysum[c] + eps).collect();
    let two = T::lit(2.0);
    let mean_dice = (0..k).map(|c| (two * inter[c] + eps) / denom[c]).sum::<T>() / T::from_usize(k).expect("count");
    Ok((T::one() - mean_dice, DiceSaved { inter, denom }))
}

/// Soft Dice loss; see [`soft_dice_forward`].
pub fn soft_dice<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    soft_dice_forward(probs, labels).map(|(l, _)| l)
}

pub(crate) fn soft_dice_grad<T: Real>(probs: &Tensor<T>, labels: &[usize], saved: &DiceSaved<T>, g: T) -> Tensor<T> {
    let k = probs.dims()[0];
    let n = probs.len() / k;
    let eps = T::lit(DICE_SMOOTH);
    let two = T::lit(2.0);
    let scale = -g / T::from_usize(k).expect("count");
    let mut d = vec![T::zero(); probs.len()];
    for c in 0..k {
        let den = saved.denom[c];
        let num = two * saved.inter[c] + eps;
        let base = -num / (den * den);
        let hit = two / den;
        for i in 0..n {
            let y = if labels[i] == c { hit } else { T::zero() };
            d[c * n + i] = scale * (y + base);
        }
    }
    Tensor::new(probs.dims().to_vec(), d).expect("dims")
}
