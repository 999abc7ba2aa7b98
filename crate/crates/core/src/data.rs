//! Procedural image datasets, parametric corruptions and an IDX reader.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images in `[0, 1]`, stored flat so that an empty set is representable.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]` of one image.
    pub image_shape: [usize; 3],
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.image_len();
        &self.pixels[i * d..(i + 1) * d]
    }

    /// `[n, C, H, W]` tensor of the selected images.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        Tensor::new(&[indices.len(), c, h, w], data)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// The whole set as one tensor.
    pub fn images(&self) -> Result<Tensor> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Contiguous index chunks of at most `size`, in stored order.
    pub fn chunks(&self, size: usize) -> Vec<Vec<usize>> {
        let size = size.max(1);
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.len() * self.image_len() {
            return Err(Error::ShapeMismatch("pixel count does not match labels".into()));
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.num_classes,
            });
        }
        if self.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Format("pixel outside [0, 1]".into()));
        }
        Ok(())
    }
}

const BACKGROUND_NOISE: f64 = 0.02;

/// Class-specific glyph membership at normalized offset `(dx, dy)` from the
/// glyph centre, with the glyph scaled to unit half-width.
fn glyph(class: usize, dx: f64, dy: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let r = (dx * dx + dy * dy).sqrt();
    match class {
        0 => ay <= 0.25 && ax <= 1.0,                       // horizontal bar
        1 => r <= 0.8,                                      // disk
        2 => (ax <= 0.22 || ay <= 0.22) && ax.max(ay) <= 1.0, // cross
        3 => ax <= 0.25 && ay <= 1.0,                       // vertical bar
        4 => (0.5..=0.95).contains(&r),                     // ring
        5 => ax.max(ay) <= 0.9 && ax.max(ay) >= 0.6,        // square outline
        6 => (dx - dy).abs() <= 0.3 && ax.max(ay) <= 1.0,   // diagonal
        7 => dy <= 0.8 && dy >= -0.8 && ax <= (dy + 0.8) * 0.6, // triangle
        8 => ((dx - 0.5).powi(2) + dy * dy).sqrt() <= 0.35 || ((dx + 0.5).powi(2) + dy * dy).sqrt() <= 0.35,
        _ => ax.max(ay) <= 0.9 && ((dx * 2.0 + 2.0).floor() as i64 + (dy * 2.0 + 2.0).floor() as i64) % 2 == 0,
    }
}

/// Renders `n_per_class` RGB images per class: one glyph per image at a random
/// position, scale and colour over a random flat background, plus mild noise.
/// Samples are interleaved by class.
pub fn gen_synthetic(num_classes: usize, n_per_class: usize, size: (usize, usize), seed: u64) -> Result<Dataset> {
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::InvalidConfig(format!("image size must be at least 8x8, got {h}x{w}")));
    }
    if !(2..=10).contains(&num_classes) {
        return Err(Error::InvalidConfig(format!("num_classes must be in 2..=10, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, BACKGROUND_NOISE).expect("valid std");
    let n = num_classes * n_per_class;
    let mut pixels = Vec::with_capacity(n * 3 * h * w);
    let mut labels = Vec::with_capacity(n);
    let half = h.min(w) as f64 / 2.0;
    for i in 0..n {
        let class = i % num_classes;
        let scale = half * rng.gen_range(0.55..0.85);
        let cy = h as f64 / 2.0 + rng.gen_range(-0.25..0.25) * half;
        let cx = w as f64 / 2.0 + rng.gen_range(-0.25..0.25) * half;
        let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.45));
        let contrast = rng.gen_range(0.25..0.45);
        let fg: [f64; 3] = std::array::from_fn(|c| (bg[c] + contrast * rng.gen_range(0.6..1.0)).min(1.0));
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 + 0.5 - cy) / scale;
                    let dx = (x as f64 + 0.5 - cx) / scale;
                    let base = if glyph(class, dx, dy) { fg[ch] } else { bg[ch] };
                    pixels.push((base + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class);
    }
    Ok(Dataset {
        image_shape: [3, h, w],
        pixels,
        labels,
        num_classes,
        split: Split::Train,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
    ];

    /// Parameter for severities 1..=5.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.12, 0.18],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.04, 0.07, 0.10],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.2],
            CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
            CorruptionKind::Pixelate => [1.0, 2.0, 2.0, 4.0, 4.0],
        }
    }

    /// The parameter value that leaves images unchanged (none for shot noise).
    pub fn identity(self) -> Option<f64> {
        match self {
            CorruptionKind::GaussianNoise | CorruptionKind::ImpulseNoise | CorruptionKind::Brightness => Some(0.0),
            CorruptionKind::Contrast | CorruptionKind::Pixelate => Some(1.0),
            CorruptionKind::ShotNoise => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn parameter(&self) -> Result<f64> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::InvalidSeverity(self.severity));
        }
        Ok(self.kind.table()[self.severity as usize - 1])
    }
}

/// Applies `spec` to every image. Shape and labels are untouched.
pub fn corrupt(ds: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    corrupt_with(ds, spec.kind, spec.parameter()?, spec.seed)
}

/// Applies a corruption with an explicit parameter instead of a severity level.
pub fn corrupt_with(ds: &Dataset, kind: CorruptionKind, param: f64, seed: u64) -> Result<Dataset> {
    if !param.is_finite() || param < 0.0 {
        return Err(Error::InvalidConfig(format!("corruption parameter must be >= 0, got {param}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    let d = ds.image_len();
    let [c, h, w] = ds.image_shape;
    match kind {
        CorruptionKind::GaussianNoise => {
            if param > 0.0 {
                let normal = Normal::new(0.0, param).expect("valid std");
                for p in &mut out.pixels {
                    *p += normal.sample(&mut rng);
                }
            }
        }
        CorruptionKind::ShotNoise => {
            if param <= 0.0 {
                return Err(Error::InvalidConfig("shot noise rate must be positive".into()));
            }
            for p in &mut out.pixels {
                let rate = *p * param;
                *p = if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(&mut rng) / param
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::ImpulseNoise => {
            if param > 1.0 {
                return Err(Error::InvalidConfig("impulse probability must be <= 1".into()));
            }
            for p in &mut out.pixels {
                if rng.gen::<f64>() < param {
                    *p = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::Contrast => {
            for img in out.pixels.chunks_mut(d.max(1)) {
                let mean = img.iter().sum::<f64>() / d as f64;
                for p in img {
                    *p = (*p - mean) * param + mean;
                }
            }
        }
        CorruptionKind::Brightness => {
            for p in &mut out.pixels {
                *p += param;
            }
        }
        CorruptionKind::Pixelate => {
            let k = param.round() as usize;
            if k == 0 {
                return Err(Error::InvalidConfig("pixelate block must be at least 1".into()));
            }
            if k > 1 {
                for img in out.pixels.chunks_mut(d.max(1)) {
                    let src = img.to_vec();
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let (by, bx) = ((y / k) * k, (x / k) * k);
                                img[(ch * h + y) * w + x] = src[(ch * h + by) * w + bx];
                            }
                        }
                    }
                }
            }
        }
    }
    for p in &mut out.pixels {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(out)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::TruncatedFile(path.to_path_buf()))
}

/// Reads an IDX image file (`u8`, `[N, rows, cols]`) and its label file.
/// Pixels are scaled to `[0, 1]`; images get a single channel.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let lab = std::fs::read(labels_path)?;
    for (bytes, path, expected) in [(&img, images_path, IDX_IMAGES), (&lab, labels_path, IDX_LABELS)] {
        let found = be_u32(bytes, 0, path)?;
        if found != expected {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected,
                found,
            });
        }
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let body = img
        .get(16..16 + n * rows * cols)
        .ok_or_else(|| Error::TruncatedFile(images_path.to_path_buf()))?;
    let labels: Vec<usize> = lab
        .get(8..8 + n)
        .ok_or_else(|| Error::TruncatedFile(labels_path.to_path_buf()))?
        .iter()
        .map(|&l| l as usize)
        .collect();
    if rows == 0 || cols == 0 {
        return Err(Error::Format("IDX images have a zero dimension".into()));
    }
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let ds = Dataset {
        image_shape: [1, rows, cols],
        pixels: body.iter().map(|&b| b as f64 / 255.0).collect(),
        labels,
        num_classes,
        split: Split::Test,
    };
    ds.validate()?;
    Ok(ds)
}

/// Encodes a dataset into a pair of IDX files (`u8` pixels, single channel only).
pub fn to_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = ds.image_shape;
    if c != 1 {
        return Err(Error::InvalidConfig("IDX export needs single-channel images".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.pixels.len());
    for v in [IDX_IMAGES, ds.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.pixels.iter().map(|p| (p * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredDataset {
    format_version: u32,
    image_shape: [usize; 3],
    num_classes: usize,
    split: Split,
    labels: Vec<usize>,
    pixels: crate::checkpoint::StoredTensor,
}

impl Dataset {
    /// Same JSON container as checkpoints.
    pub fn to_json(&self) -> Result<String> {
        let stored = StoredDataset {
            format_version: crate::checkpoint::FORMAT_VERSION,
            image_shape: self.image_shape,
            num_classes: self.num_classes,
            split: self.split,
            labels: self.labels.clone(),
            pixels: crate::checkpoint::StoredTensor::raw(&self.pixels),
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: StoredDataset = serde_json::from_str(text)?;
        if s.format_version != crate::checkpoint::FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", s.format_version)));
        }
        let ds = Dataset {
            image_shape: s.image_shape,
            pixels: s.pixels.decode_raw()?,
            labels: s.labels,
            num_classes: s.num_classes,
            split: s.split,
        };
        ds.validate()?;
        Ok(ds)
    }
}
