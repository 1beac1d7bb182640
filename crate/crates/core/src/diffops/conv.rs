//! Direct 3D convolution and its transpose, lowered to GEMM through im2col
//! over bounded chunks of output voxels.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 21;

/// Geometry of a strided, zero-padded, cubic-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(channels: usize, input: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return shape_err("kernel and stride must be positive");
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad;
            if padded < kernel {
                return shape_err(format!("axis {a}: extent {} + 2*{pad} is smaller than kernel {kernel}", input[a]));
            }
            output[a] = (padded - kernel) / stride + 1;
        }
        Ok(Self { channels, input, kernel, stride, pad, output })
    }

    pub fn n_in(&self) -> usize {
        self.input.iter().product()
    }

    pub fn n_out(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the column matrix: channels × k³.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / self.col_rows().max(1)).clamp(1, self.n_out())
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Visit the contiguous runs of column `row` for output voxels
    /// `start..start+len`: `f(col_offset, input_base, first_output_d, run)` where
    /// `input_base` is `None` when the whole run falls in padding along h or w.
    fn for_runs(
        &self,
        start: usize,
        len: usize,
        kh: usize,
        kw: usize,
        mut f: impl FnMut(usize, Option<usize>, usize, usize),
    ) {
        let [_, wo, dout] = self.output;
        let [hi, wi, di] = self.input;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let end = start + len;
        let mut pos = start;
        while pos < end {
            let oh = pos / (wo * dout);
            let ow = (pos / dout) % wo;
            let od0 = pos % dout;
            let run = (dout - od0).min(end - pos);
            let ih = oh as isize * s + kh as isize - p;
            let iw = ow as isize * s + kw as isize - p;
            let base = if ih < 0 || ih >= hi as isize || iw < 0 || iw >= wi as isize {
                None
            } else {
                Some((ih as usize * wi + iw as usize) * di)
            };
            f(pos - start, base, od0, run);
            pos += run;
        }
    }

    /// For outputs `od0..od0+run` at kernel offset `kd`, the sub-range `lo..hi`
    /// of run positions whose input d-index is in bounds, and the input
    /// index of position `lo`.
    #[inline]
    fn d_span(&self, od0: usize, run: usize, kd: usize) -> (usize, usize, usize) {
        let (s, p, di) = (self.stride as isize, self.pad as isize, self.input[2] as isize);
        let first = od0 as isize * s + kd as isize - p;
        let lo = if first >= 0 { 0 } else { (-first + s - 1) / s };
        let hi = if first > di - 1 { 0 } else { (di - 1 - first) / s + 1 };
        let (lo, hi) = (lo.min(run as isize) as usize, hi.min(run as isize) as usize);
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, (first + lo as isize * s) as usize)
    }

    /// Fill `col` (`col_rows × len`, row-major) from `x` (`channels × n_in`).
    pub fn im2col<T: Real>(&self, x: &[T], start: usize, len: usize, col: &mut [T]) {
        let k = self.kernel;
        let n_in = self.n_in();
        for c in 0..self.channels {
            let xc = &x[c * n_in..(c + 1) * n_in];
            for kh in 0..k {
                for kw in 0..k {
                    for kd in 0..k {
                        let row = ((c * k + kh) * k + kw) * k + kd;
                        let dst = &mut col[row * len..(row + 1) * len];
                        self.for_runs(start, len, kh, kw, |off, base, od0, run| {
                            let out = &mut dst[off..off + run];
                            let Some(b) = base else {
                                out.fill(T::zero());
                                return;
                            };
                            let (lo, hi, id0) = self.d_span(od0, run, kd);
                            out[..lo].fill(T::zero());
                            out[hi.max(lo)..].fill(T::zero());
                            let src = &xc[b + id0..];
                            if self.stride == 1 {
                                out[lo..hi].copy_from_slice(&src[..hi - lo]);
                            } else {
                                for (o, v) in out[lo..hi].iter_mut().zip(src.iter().step_by(self.stride)) {
                                    *o = *v;
                                }
                            }
                        });
                    }
                }
            }
        }
    }

    /// Scatter-add `col` back onto `x` (the adjoint of [`ConvGeom::im2col`]).
    pub fn col2im_add<T: Real>(&self, col: &[T], start: usize, len: usize, x: &mut [T]) {
        let k = self.kernel;
        let n_in = self.n_in();
        for c in 0..self.channels {
            let xc = &mut x[c * n_in..(c + 1) * n_in];
            for kh in 0..k {
                for kw in 0..k {
                    for kd in 0..k {
                        let row = ((c * k + kh) * k + kw) * k + kd;
                        let src = &col[row * len..(row + 1) * len];
                        self.for_runs(start, len, kh, kw, |off, base, od0, run| {
                            let Some(b) = base else { return };
                            let (lo, hi, id0) = self.d_span(od0, run, kd);
                            let dst = &mut xc[b + id0..];
                            let vals = &src[off + lo..off + hi];
                            if self.stride == 1 {
                                for (o, &v) in dst[..hi - lo].iter_mut().zip(vals) {
                                    *o += v;
                                }
                            } else {
                                for (o, &v) in dst.iter_mut().step_by(self.stride).zip(vals) {
                                    *o += v;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
}

fn spatial(t: &Tensor<impl Real>, what: &str) -> Result<[usize; 3]> {
    match t.dims() {
        [_, h, w, d] => Ok([*h, *w, *d]),
        dims => shape_err(format!("{what} must be [C,H,W,D], got {dims:?}")),
    }
}

fn cubic_kernel(w: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    match w.dims() {
        [a, b, k1, k2, k3] if k1 == k2 && k2 == k3 => Ok((*a, *b, *k1)),
        dims => shape_err(format!("weight must be [A,B,k,k,k], got {dims:?}")),
    }
}

fn check_bias<T: Real>(b: Option<&Tensor<T>>, n: usize) -> Result<()> {
    match b {
        Some(b) if b.len() != n => shape_err(format!("bias length {} != {n} output channels", b.len())),
        _ => Ok(()),
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], b: Option<&Tensor<T>>, per_channel: usize) {
    if let Some(b) = b {
        for (chunk, &bv) in out.chunks_mut(per_channel).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn channel_sums<T: Real>(g: &[T], channels: usize) -> Tensor<T> {
    let per = g.len() / channels;
    Tensor::from_fn(&[channels], |c| g[c * per..(c + 1) * per].iter().copied().sum())
}

/// Validated geometry for `conv3d`.
pub(crate) fn conv3d_geom<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let ext = spatial(x, "conv3d input")?;
    let (_, cin, k) = cubic_kernel(w)?;
    if cin != x.dims()[0] {
        return shape_err(format!("conv3d: input has {} channels, weight expects {cin}", x.dims()[0]));
    }
    if k % 2 == 0 && k != stride {
        return shape_err(format!("conv3d: even kernel {k} requires stride == kernel"));
    }
    ConvGeom::new(cin, ext, k, stride, pad)
}

/// Forward 3D convolution: `x [Cin,H,W,D]`, `w [Cout,Cin,k,k,k]`, optional bias `[Cout]`.
pub fn conv3d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv3d_geom(x, w, stride, pad)?;
    let cout = w.dims()[0];
    check_bias(b, cout)?;
    let (n_out, kr) = (g.n_out(), g.col_rows());
    let mut out = vec![T::zero(); cout * n_out];
    if g.is_pointwise() {
        T::gemm(cout, kr, n_out, (w.data(), kr, 1), (x.data(), n_out, 1), T::zero(), (&mut out, n_out, 1));
    } else {
        let chunk = g.chunk();
        let mut col = vec![T::zero(); kr * chunk];
        for start in (0..n_out).step_by(chunk) {
            let len = chunk.min(n_out - start);
            g.im2col(x.data(), start, len, &mut col);
            T::gemm(cout, kr, len, (w.data(), kr, 1), (&col, len, 1), T::zero(), (&mut out[start..], n_out, 1));
        }
    }
    add_channel_bias(&mut out, b, n_out);
    let [h, wd, d] = g.output;
    Tensor::new(vec![cout, h, wd, d], out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Tensor<T>,
}

pub(crate) fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let g = conv3d_geom(x, w, stride, pad)?;
    let cout = w.dims()[0];
    let (n_out, kr) = (g.n_out(), g.col_rows());
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let dy = dout.data();
    if g.is_pointwise() {
        if let Some(dx) = dx.as_mut() {
            T::gemm(kr, cout, n_out, (w.data(), 1, kr), (dy, n_out, 1), T::zero(), (dx, n_out, 1));
        }
        if let Some(dw) = dw.as_mut() {
            T::gemm(cout, n_out, kr, (dy, n_out, 1), (x.data(), 1, n_out), T::zero(), (dw, kr, 1));
        }
    } else {
        let chunk = g.chunk();
        let mut col = vec![T::zero(); kr * chunk];
        for start in (0..n_out).step_by(chunk) {
            let len = chunk.min(n_out - start);
            if let Some(dw) = dw.as_mut() {
                g.im2col(x.data(), start, len, &mut col);
                T::gemm(cout, len, kr, (&dy[start..], n_out, 1), (&col, 1, len), T::one(), (dw, kr, 1));
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(kr, cout, len, (w.data(), 1, kr), (&dy[start..], n_out, 1), T::zero(), (&mut col, len, 1));
                g.col2im_add(&col, start, len, dx);
            }
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|v| Tensor::new(x.dims().to_vec(), v)).transpose()?,
        dw: dw.map(|v| Tensor::new(w.dims().to_vec(), v)).transpose()?,
        db: channel_sums(dy, cout),
    })
}

/// Geometry of the adjoint convolution: the transposed output plays the role
/// of the convolution input.
pub(crate) fn conv3d_transpose_geom<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<ConvGeom> {
    let ext = spatial(x, "conv3d_transpose input")?;
    let (cin, cout, k) = cubic_kernel(w)?;
    if cin != x.dims()[0] {
        return shape_err(format!("conv3d_transpose: input has {} channels, weight expects {cin}", x.dims()[0]));
    }
    if stride == 0 {
        return shape_err("conv3d_transpose: stride must be >= 1");
    }
    let out = ext.map(|e| (e - 1) * stride + k);
    let g = ConvGeom::new(cout, out, k, stride, 0)?;
    debug_assert_eq!(g.output, ext);
    Ok(g)
}

/// Transposed 3D convolution: `x [Cin,h,w,d]`, `w [Cin,Cout,k,k,k]` →
/// `[Cout,(h-1)s+k,…]`. With the same `w`, this is the adjoint of [`conv3d`]
/// with zero padding.
pub fn conv3d_transpose<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = conv3d_transpose_geom(x, w, stride)?;
    let cin = x.dims()[0];
    check_bias(b, g.channels)?;
    let (n_x, kr) = (g.n_out(), g.col_rows());
    let mut out = vec![T::zero(); g.channels * g.n_in()];
    let chunk = g.chunk();
    let mut col = vec![T::zero(); kr * chunk];
    for start in (0..n_x).step_by(chunk) {
        let len = chunk.min(n_x - start);
        T::gemm(kr, cin, len, (w.data(), 1, kr), (&x.data()[start..], n_x, 1), T::zero(), (&mut col, len, 1));
        g.col2im_add(&col, start, len, &mut out);
    }
    add_channel_bias(&mut out, b, g.n_in());
    let [h, wd, d] = g.input;
    Tensor::new(vec![g.channels, h, wd, d], out)
}

pub(crate) fn conv3d_transpose_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dout: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let g = conv3d_transpose_geom(x, w, stride)?;
    let cin = x.dims()[0];
    let (n_x, kr) = (g.n_out(), g.col_rows());
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let chunk = g.chunk();
    let mut col = vec![T::zero(); kr * chunk];
    for start in (0..n_x).step_by(chunk) {
        let len = chunk.min(n_x - start);
        g.im2col(dout.data(), start, len, &mut col);
        if let Some(dx) = dx.as_mut() {
            T::gemm(cin, kr, len, (w.data(), kr, 1), (&col, len, 1), T::zero(), (&mut dx[start..], n_x, 1));
        }
        if let Some(dw) = dw.as_mut() {
            T::gemm(cin, len, kr, (&x.data()[start..], n_x, 1), (&col, 1, len), T::one(), (dw, kr, 1));
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|v| Tensor::new(x.dims().to_vec(), v)).transpose()?,
        dw: dw.map(|v| Tensor::new(w.dims().to_vec(), v)).transpose()?,
        db: channel_sums(dout.data(), g.channels),
    })
}
