//! Labelled image collections: IDX ingestion, synthetic blobs and seeded
//! splits.
//!
//! Pixels are always stored in `[0, 1]`.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("IDX data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("label {label} outside 0..{classes}")]
    LabelRange { label: usize, classes: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("split fractions sum to {0}, expected 1")]
    Fractions(f64),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("images do not match shape {0:?}")]
    Shape(Vec<usize>),
}

/// Where a dataset's rows came from within a parent split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub index: usize,
    pub fractions: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    shape: Vec<usize>,
    labels: Vec<usize>,
    classes: usize,
    split: Option<SplitInfo>,
}

impl Dataset {
    /// `images` holds `labels.len()` flat images of `shape`, pixels in `[0, 1]`.
    pub fn new(images: Vec<f64>, shape: Vec<usize>, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        let per: usize = shape.iter().product();
        if per == 0 || images.len() != per * labels.len() || images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Shape(shape));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::LabelRange { label, classes });
        }
        Ok(Self {
            images,
            shape,
            labels,
            classes,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one image.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.shape.clone(), self.image(i).to_vec()).expect("shape")
    }

    pub fn split_info(&self) -> Option<&SplitInfo> {
        self.split.as_ref()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let mut images = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, self.shape.clone(), labels, self.classes)
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Seeded shuffle cut into consecutive parts. Part sizes are rounded
    /// `fraction * len`; the last part takes the remainder.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<Self>, DataError> {
        let total: f64 = fractions.iter().sum();
        if fractions.is_empty() || (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
            return Err(DataError::Fractions(total));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut parts = Vec::with_capacity(fractions.len());
        let mut start = 0;
        for (index, &f) in fractions.iter().enumerate() {
            let end = if index + 1 == fractions.len() {
                self.len()
            } else {
                (start + (f * self.len() as f64).round() as usize).min(self.len())
            };
            let mut part = self.subset(&order[start..end])?;
            part.split = Some(SplitInfo {
                index,
                fractions: fractions.to_vec(),
                seed,
            });
            parts.push(part);
            start = end;
        }
        Ok(parts)
    }

    /// `k` distinct row indices drawn by seed, in draw order.
    pub fn sample_n(&self, k: usize, seed: u64) -> Vec<usize> {
        sample_indices(self.len(), k, seed)
    }
}

/// `k` distinct indices out of `0..n` (all of them if `k >= n`).
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(k);
    order
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or(DataError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_idx_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

/// Decodes an IDX image file into `(pixels in [0, 1], [rows, cols], count)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f64>, [usize; 2], usize), DataError> {
    check_idx_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((pixels, [rows, cols], count))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    check_idx_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| usize::from(b)).collect())
}

/// Encodes `[count, rows, cols]` byte images as an IDX image file.
pub fn encode_idx_images(pixels: &[u8], rows: usize, cols: usize) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an image/label IDX pair, either raw or gzip-compressed.
/// Images get shape `[1, rows, cols]`; the class count is the largest label
/// plus one.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (pixels, [rows, cols], count) = parse_idx_images(&read_maybe_gz(images.as_ref())?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels.as_ref())?)?;
    if labels.len() != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(pixels, vec![1, rows, cols], labels, classes)
}

/// Parameters of a Gaussian blob dataset.
///
/// Written as `M=4,dims=16,sep=8,per_class=200,seed=7`; missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            dims: 16,
            separation: 8.0,
            per_class: 200,
            seed: 0,
        }
    }
}

impl FromStr for BlobSpec {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut spec = BlobSpec::default();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| DataError::Spec(format!("expected key=value, got {item:?}")))?;
            let bad = |_| DataError::Spec(format!("bad value for {key}: {value:?}"));
            match key.trim() {
                "M" | "classes" => spec.classes = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "dims" => spec.dims = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "sep" | "separation" => {
                    spec.separation = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
                }
                "per_class" => spec.per_class = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "seed" => spec.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                other => return Err(DataError::Spec(format!("unknown key {other:?}"))),
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for BlobSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "M={},dims={},sep={},per_class={},seed={}",
            self.classes, self.dims, self.separation, self.per_class, self.seed
        )
    }
}

/// Class `k` has mean `separation * bits(k)` (bit `j` of `k` on axis `j`)
/// and unit-variance noise. Values are mapped by `(v + 4) / (separation + 8)`
/// and clipped to `[0, 1]`. Samples are interleaved by class.
pub fn synthesize_gaussian_blobs(spec: &BlobSpec) -> Result<Dataset, DataError> {
    if spec.classes < 2 {
        return Err(DataError::Spec("at least two classes are required".into()));
    }
    if !(spec.separation > 0.0) {
        return Err(DataError::Spec("separation must be positive".into()));
    }
    let needed = usize::BITS - (spec.classes - 1).leading_zeros();
    if spec.dims < needed as usize {
        return Err(DataError::Spec(format!(
            "{} classes need at least {needed} dimensions",
            spec.classes
        )));
    }
    if spec.per_class == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = spec.separation + 8.0;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class * spec.dims);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for _ in 0..spec.per_class {
        for k in 0..spec.classes {
            for j in 0..spec.dims {
                let mean = if j < 64 && (k >> j) & 1 == 1 { spec.separation } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                images.push(((mean + noise + 4.0) / scale).clamp(0.0, 1.0));
            }
            labels.push(k);
        }
    }
    Dataset::new(images, vec![spec.dims], labels, spec.classes)
}
