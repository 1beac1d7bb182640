use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let v = x.as_f64();
    T::lit(0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
}

pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let v = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
    T::lit(cdf + v * FRAC_1_SQRT_2PI * (-0.5 * v * v).exp())
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// `(outer, len, inner)` decomposition of `dims` around `axis`.
pub(crate) fn axis_split(dims: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= dims.len() {
        return shape_err(format!("axis {axis} out of range for {dims:?}"));
    }
    Ok((dims[..axis].iter().product(), dims[axis], dims[axis + 1..].iter().product()))
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.dims(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..len {
                let e = (src[at(j)] - m).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] /= z;
            }
        }
    }
    Tensor::new(x.dims().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.dims(), axis).expect("validated in forward");
    let (yv, g) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| yv[at(j)] * g[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = yv[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.dims().to_vec(), dx).expect("dims")
}
