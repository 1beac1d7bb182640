//! Volumes, the VOL1 binary format, CT intensity preprocessing, foreground
//! sub-volume sampling and the synthetic phantom generator.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// A `[C, H, W, D]` image with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Tensor<f32>,
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn new(data: Tensor<f32>, spacing: [f32; 3]) -> Result<Self> {
        if data.rank() != 4 {
            return shape_err(format!("volume must be [C,H,W,D], got {:?}", data.dims()));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return config_err("spacing", format!("{spacing:?} must be positive"));
        }
        Ok(Self { data, spacing })
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn extents(&self) -> [usize; 3] {
        let d = self.data.dims();
        [d[1], d[2], d[3]]
    }
}

/// An image with an integer class map over the same extents.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub image: Volume,
    pub labels: Vec<u16>,
}

impl LabeledVolume {
    pub fn new(image: Volume, labels: Vec<u16>, n_classes: usize) -> Result<Self> {
        if labels.len() != image.extents().iter().product::<usize>() {
            return shape_err(format!("{} labels for extents {:?}", labels.len(), image.extents()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return config_err("n_classes", format!("label {bad} outside 0..{n_classes}"));
        }
        Ok(Self { image, labels })
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

pub const VOL1_MAGIC: &[u8; 4] = b"VOL1";
pub const VOL1_VERSION: u32 = 1;
pub const VOL1_HEADER: usize = 40;

/// Voxel payload of a VOL1 file.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U16(Vec<u16>),
}

impl Payload {
    fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::U16(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U16(v) => v.len(),
        }
    }
}

/// Contents of a VOL1 file: `channels × H × W × D` voxels, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Vol1 {
    pub channels: usize,
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    pub payload: Payload,
}

fn fmt_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, msg: msg.into() })
}

impl Vol1 {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let n = self.channels * self.extents.iter().product::<usize>();
        if n == 0 || self.payload.len() != n {
            return shape_err(format!(
                "VOL1: {} voxels for {} channels of {:?}",
                self.payload.len(),
                self.channels,
                self.extents
            ));
        }
        let mut out = Vec::with_capacity(VOL1_HEADER + 4 * n);
        out.extend_from_slice(VOL1_MAGIC);
        out.extend_from_slice(&VOL1_VERSION.to_le_bytes());
        for v in [self.channels, self.extents[0], self.extents[1], self.extents[2]] {
            let v = u32::try_from(v).map_err(|_| Error::Shape(format!("extent {v} exceeds u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.push(self.payload.code());
        out.extend_from_slice(&[0; 3]);
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < VOL1_HEADER {
            return fmt_err(bytes.len(), format!("truncated header: {} of {VOL1_HEADER} bytes", bytes.len()));
        }
        if &bytes[0..4] != VOL1_MAGIC {
            return fmt_err(0, format!("bad magic {:?}, expected \"VOL1\"", String::from_utf8_lossy(&bytes[0..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VOL1_VERSION {
            return fmt_err(4, format!("unsupported version {version}"));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = u32_at(8 + 4 * i) as usize;
            if *d == 0 {
                return fmt_err(8 + 4 * i, "extent must be positive");
            }
        }
        let mut spacing = [0f32; 3];
        for (i, s) in spacing.iter_mut().enumerate() {
            *s = f32::from_le_bytes(bytes[24 + 4 * i..28 + 4 * i].try_into().expect("4 bytes"));
            if !(*s > 0.0) || !s.is_finite() {
                return fmt_err(24 + 4 * i, format!("spacing {s} must be positive"));
            }
        }
        let code = bytes[36];
        if bytes[37..40] != [0; 3] {
            return fmt_err(37, "reserved bytes must be zero");
        }
        let n = dims.iter().product::<usize>();
        let width = match code {
            0 => 4,
            1 => 2,
            c => return fmt_err(36, format!("unknown dtype code {c}")),
        };
        let body = &bytes[VOL1_HEADER..];
        if body.len() < n * width {
            return fmt_err(bytes.len(), format!("truncated payload: {} of {} bytes", body.len(), n * width));
        }
        if body.len() > n * width {
            return fmt_err(VOL1_HEADER + n * width, "trailing bytes after payload");
        }
        let payload = if code == 0 {
            Payload::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
        } else {
            Payload::U16(body.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().expect("2"))).collect())
        };
        Ok(Self { channels: dims[0], extents: [dims[1], dims[2], dims[3]], spacing, payload })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    Vol1 {
        channels: v.channels(),
        extents: v.extents(),
        spacing: v.spacing,
        payload: Payload::F32(v.data.data().to_vec()),
    }
    .write(path)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let f = Vol1::read(path)?;
    match f.payload {
        Payload::F32(data) => {
            let [h, w, d] = f.extents;
            Volume::new(Tensor::new(vec![f.channels, h, w, d], data)?, f.spacing)
        }
        Payload::U16(_) => fmt_err(36, "expected f32 image payload, found u16 labels"),
    }
}

pub fn write_labels(path: &Path, labels: &[u16], extents: [usize; 3], spacing: [f32; 3]) -> Result<()> {
    Vol1 { channels: 1, extents, spacing, payload: Payload::U16(labels.to_vec()) }.write(path)
}

/// Returns the class map and its extents.
pub fn read_labels(path: &Path) -> Result<(Vec<u16>, [usize; 3])> {
    let f = Vol1::read(path)?;
    match f.payload {
        Payload::U16(l) if f.channels == 1 => Ok((l, f.extents)),
        Payload::U16(_) => fmt_err(8, "label files must have one channel"),
        Payload::F32(_) => fmt_err(36, "expected u16 label payload, found f32"),
    }
}

/// Clamp to `[lo, hi]` then map affinely onto `[0, 1]`. Not idempotent:
/// a second application maps `[0, 1]` into `[(0−lo)/(hi−lo), (1−lo)/(hi−lo)]`.
pub fn preprocess_ct(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return config_err("intensity_range", format!("lo {lo} must be below hi {hi}"));
    }
    let scale = hi - lo;
    Ok(Volume { data: v.data.map(|x| (x.clamp(lo, hi) - lo) / scale), spacing: v.spacing })
}

/// Rejection attempts before a volume is declared all air.
pub const MAX_REJECTIONS: usize = 100;

/// Copy `size` voxels starting at `at` out of a `[C, H, W, D]` tensor.
pub fn crop<T: Copy>(data: &[T], channels: usize, extents: [usize; 3], at: [usize; 3], size: [usize; 3]) -> Vec<T> {
    let [_, w, d] = extents;
    let plane = extents.iter().product::<usize>();
    let mut out = Vec::with_capacity(channels * size.iter().product::<usize>());
    for c in 0..channels {
        for z in at[0]..at[0] + size[0] {
            for y in at[1]..at[1] + size[1] {
                let row = c * plane + (z * w + y) * d + at[2];
                out.extend_from_slice(&data[row..row + size[2]]);
            }
        }
    }
    out
}

/// Origin of a uniformly random crop that is not entirely air (max voxel 0).
pub fn sample_origin(v: &Volume, size: [usize; 3], rng: &mut impl Rng) -> Result<[usize; 3]> {
    let ext = v.extents();
    if (0..3).any(|a| size[a] == 0 || size[a] > ext[a]) {
        return shape_err(format!("crop {size:?} does not fit in {ext:?}"));
    }
    for _ in 0..MAX_REJECTIONS {
        let at: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=ext[a] - size[a]));
        let patch = crop(v.data.data(), v.channels(), ext, at, size);
        let max = patch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if max != 0.0 {
            return Ok(at);
        }
    }
    Err(Error::Sampling(format!("{MAX_REJECTIONS} consecutive crops were all air")))
}

pub fn sample_subvolume(v: &Volume, size: [usize; 3], rng: &mut impl Rng) -> Result<Volume> {
    let at = sample_origin(v, size, rng)?;
    let data = crop(v.data.data(), v.channels(), v.extents(), at, size);
    Volume::new(Tensor::new(vec![v.channels(), size[0], size[1], size[2]], data)?, v.spacing)
}

/// Image and labels cropped at the same random origin.
pub fn sample_labeled(v: &LabeledVolume, size: [usize; 3], rng: &mut impl Rng) -> Result<LabeledVolume> {
    let at = sample_origin(&v.image, size, rng)?;
    let img = &v.image;
    let data = crop(img.data.data(), img.channels(), img.extents(), at, size);
    let labels = crop(&v.labels, 1, img.extents(), at, size);
    Ok(LabeledVolume {
        image: Volume::new(Tensor::new(vec![img.channels(), size[0], size[1], size[2]], data)?, img.spacing)?,
        labels,
    })
}

pub const PHANTOM_BACKGROUND: f32 = 0.1;
pub const PHANTOM_NOISE: f32 = 0.02;
/// Intensity of the background-labelled table slab along low y.
pub const PHANTOM_TABLE: f32 = 0.9;

/// Mean intensity of class `c` inside a phantom.
pub fn phantom_class_mean(c: usize) -> f32 {
    0.2 + 0.15 * c as f32
}

/// Synthetic labeled volume: noisy background plus `n_shapes` ellipsoids.
/// Shape `s` has class `1 + s mod (n_classes − 1)` and later shapes
/// overwrite earlier ones. A bright slab labelled background lies along
/// low y, like a scanner table, and ellipsoids are longer along x than y,
/// so in-plane rotations are distinguishable.
pub fn gen_phantom(seed: u64, extents: [usize; 3], n_shapes: usize, n_classes: usize) -> Result<LabeledVolume> {
    if n_shapes == 0 {
        return config_err("n_shapes", "must be at least 1");
    }
    if n_classes == 0 || n_classes > u16::MAX as usize {
        return config_err("n_classes", format!("{n_classes} is out of range"));
    }
    if extents.iter().any(|&e| e < 16) {
        return shape_err(format!("phantom extents {extents:?} must be at least 16 per axis"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, PHANTOM_NOISE).expect("valid std");
    let [h, w, d] = extents;
    let n = h * w * d;
    let mut labels = vec![0u16; n];
    let mut mean = vec![PHANTOM_BACKGROUND; n];
    let table = (w / 16).max(1);
    for z in 0..h {
        for y in 0..table {
            mean[(z * w + y) * d..(z * w + y + 1) * d].fill(PHANTOM_TABLE);
        }
    }
    for s in 0..n_shapes {
        let class = if n_classes >= 2 { 1 + s % (n_classes - 1) } else { 0 };
        let level = phantom_class_mean(class) + rng.gen_range(-0.04..0.04);
        let e = extents.map(|x| x as f32);
        let centre = [rng.gen_range(0.3..0.7) * e[0], rng.gen_range(0.3..0.55) * e[1], rng.gen_range(0.3..0.7) * e[2]];
        let radius =
            [rng.gen_range(0.10..0.22) * e[0], rng.gen_range(0.08..0.14) * e[1], rng.gen_range(0.18..0.30) * e[2]];
        for z in 0..h {
            for y in 0..w {
                for x in 0..d {
                    let p = [z as f32 + 0.5, y as f32 + 0.5, x as f32 + 0.5];
                    let r2: f32 = (0..3).map(|a| ((p[a] - centre[a]) / radius[a]).powi(2)).sum();
                    if r2 <= 1.0 {
                        let i = (z * w + y) * d + x;
                        labels[i] = class as u16;
                        mean[i] = level;
                    }
                }
            }
        }
    }
    let data: Vec<f32> = mean.iter().map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)).collect();
    let image = Volume::new(Tensor::new(vec![1, h, w, d], data)?, [1.0; 3])?;
    LabeledVolume::new(image, labels, n_classes.max(1))
}
