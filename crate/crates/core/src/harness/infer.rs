use crate::decoder::SwinUnetr;
use crate::error::{config_err, shape_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Window origins along one axis. Windows step by `roi·(1 − overlap)` and
/// the last one is shifted inward to end at the border; a `roi` larger than
/// the extent gives one centred window reaching into zero padding.
pub fn window_origins(extent: usize, roi: usize, overlap: f64) -> Vec<isize> {
    if roi >= extent {
        return vec![-(((roi - extent) / 2) as isize)];
    }
    let stride = ((roi as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut out: Vec<isize> = (0..=extent - roi).step_by(stride).map(|o| o as isize).collect();
    let last = (extent - roi) as isize;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Blended prediction and how many windows covered each voxel.
pub struct SlidingOutput {
    /// `[K, H, W, D]`.
    pub probs: Tensor<f32>,
    pub coverage: Vec<u32>,
}

/// Tile `v` (`[S, H, W, D]`) with `roi` windows, run `predict` on each
/// (`[S, roi…]` → `[K, roi…]`), and average the outputs uniformly where
/// windows overlap.
pub fn sliding_window_infer(
    v: &Tensor<f32>,
    roi: [usize; 3],
    overlap: f64,
    mut predict: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<SlidingOutput> {
    let &[s, h, w, d] = v.dims() else {
        return shape_err(format!("sliding window input must be [C,H,W,D], got {:?}", v.dims()));
    };
    if !(0.0..1.0).contains(&overlap) {
        return config_err("overlap", format!("{overlap} outside [0, 1)"));
    }
    if roi.contains(&0) {
        return config_err("roi", "extents must be positive");
    }
    let ext = [h, w, d];
    let origins: Vec<Vec<isize>> = (0..3).map(|a| window_origins(ext[a], roi[a], overlap)).collect();
    let n = h * w * d;
    let rn = roi.iter().product::<usize>();
    let mut acc: Vec<f32> = Vec::new();
    let mut coverage = vec![0u32; n];
    let mut k = 0;
    // Maps window voxel → volume voxel (None outside the volume).
    let inside = |o: [isize; 3], i: usize| -> Option<usize> {
        let p = [i / (roi[1] * roi[2]), (i / roi[2]) % roi[1], i % roi[2]];
        let q: [isize; 3] = std::array::from_fn(|a| o[a] + p[a] as isize);
        (0..3)
            .all(|a| q[a] >= 0 && (q[a] as usize) < ext[a])
            .then(|| (q[0] as usize * w + q[1] as usize) * d + q[2] as usize)
    };
    for &oz in &origins[0] {
        for &oy in &origins[1] {
            for &ox in &origins[2] {
                let o = [oz, oy, ox];
                let map: Vec<Option<usize>> = (0..rn).map(|i| inside(o, i)).collect();
                let mut win = vec![0f32; s * rn];
                for c in 0..s {
                    for (i, m) in map.iter().enumerate() {
                        if let Some(j) = m {
                            win[c * rn + i] = v.data()[c * n + j];
                        }
                    }
                }
                let out = predict(&Tensor::new(vec![s, roi[0], roi[1], roi[2]], win)?)?;
                if out.len() % rn != 0 || out.dims()[1..] != roi {
                    return shape_err(format!("predictor returned {:?} for window {roi:?}", out.dims()));
                }
                if acc.is_empty() {
                    k = out.dims()[0];
                    acc = vec![0.0; k * n];
                }
                for (i, m) in map.iter().enumerate() {
                    if let Some(j) = *m {
                        coverage[j] += 1;
                        for c in 0..k {
                            acc[c * n + j] += out.data()[c * rn + i];
                        }
                    }
                }
            }
        }
    }
    for c in 0..k {
        for j in 0..n {
            acc[c * n + j] /= coverage[j] as f32;
        }
    }
    Ok(SlidingOutput { probs: Tensor::new(vec![k, h, w, d], acc)?, coverage })
}

/// Per-voxel argmax over the class axis of `[K, …]` probabilities.
pub fn argmax_labels(probs: &Tensor<f32>) -> Vec<usize> {
    let k = probs.dims()[0];
    let n = probs.len() / k;
    let p = probs.data();
    (0..n).map(|j| (0..k).fold(0, |best, c| if p[c * n + j] > p[best * n + j] { c } else { best })).collect()
}

/// Sliding-window class probabilities of a model.
pub fn infer_probs(
    model: &SwinUnetr,
    store: &ParamStore<f32>,
    v: &Tensor<f32>,
    roi: [usize; 3],
    overlap: f64,
) -> Result<Tensor<f32>> {
    Ok(sliding_window_infer(v, roi, overlap, |w| model.predict(store, w))?.probs)
}
