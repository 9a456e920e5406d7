//! IDX dataset loading (MNIST / FashionMNIST) and dyadic zero padding.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: bad magic number {found}, expected {expected}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: truncated file ({len} bytes, need {needed})")]
    TruncatedFile {
        path: String,
        len: usize,
        needed: usize,
    },
    #[error("target size 2^{m} is smaller than the {size}x{size} source image")]
    TooSmallTarget { m: u32, size: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A raw grayscale image as stored in the IDX file, scaled to [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
    pub label: Option<u8>,
}

/// A square dyadic image, `M = 2^m`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub m: u32,
    pub pixels: Vec<f64>,
    pub label: Option<u8>,
}

impl Image {
    pub fn new(m: u32, pixels: Vec<f64>, label: Option<u8>) -> Self {
        assert_eq!(pixels.len(), 1usize << (2 * m), "pixel count must be 4^m");
        Self { m, pixels, label }
    }

    pub fn zeros(m: u32) -> Self {
        Self::new(m, vec![0.0; 1usize << (2 * m)], None)
    }

    pub fn size(&self) -> usize {
        1 << self.m
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.size() + col]
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_header(
    bytes: &[u8],
    path: &Path,
    magic: u32,
    header_len: usize,
) -> Result<(), DatasetError> {
    if bytes.len() < header_len {
        return Err(DatasetError::TruncatedFile {
            path: path.display().to_string(),
            len: bytes.len(),
            needed: header_len,
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DatasetError::BadMagic {
            path: path.display().to_string(),
            found,
            expected: magic,
        });
    }
    Ok(())
}

/// Parses an IDX3 image file (magic 2051) from memory.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Vec<RawImage>, DatasetError> {
    check_header(bytes, path, IMAGES_MAGIC, 16)?;
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(DatasetError::TruncatedFile {
            path: path.display().to_string(),
            len: bytes.len(),
            needed,
        });
    }
    Ok(bytes[16..needed]
        .chunks_exact(rows * cols)
        .map(|px| RawImage {
            rows,
            cols,
            pixels: px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            label: None,
        })
        .collect())
}

/// Parses an IDX1 label file (magic 2049) from memory.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DatasetError> {
    check_header(bytes, path, LABELS_MAGIC, 8)?;
    let count = be_u32(bytes, 4) as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(DatasetError::TruncatedFile {
            path: path.display().to_string(),
            len: bytes.len(),
            needed,
        });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Loads a labeled image set from an IDX image file and its label file.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Vec<RawImage>, DatasetError> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let mut images = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if images.len() != labels.len() {
        return Err(DatasetError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    for (img, label) in images.iter_mut().zip(labels) {
        img.label = Some(label);
    }
    Ok(images)
}

/// Centers `img` inside a zero `2^m x 2^m` canvas at offset `floor((M - size) / 2)`.
pub fn pad_to_dyadic(img: &RawImage, m: u32) -> Result<Image, DatasetError> {
    let size = 1usize << m;
    let largest = img.rows.max(img.cols);
    if largest > size {
        return Err(DatasetError::TooSmallTarget { m, size: largest });
    }
    let top = (size - img.rows) / 2;
    let left = (size - img.cols) / 2;
    let mut pixels = vec![0.0; size * size];
    for r in 0..img.rows {
        let dst = (r + top) * size + left;
        pixels[dst..dst + img.cols].copy_from_slice(&img.pixels[r * img.cols..(r + 1) * img.cols]);
    }
    Ok(Image {
        m,
        pixels,
        label: img.label,
    })
}

/// Inverse of [`pad_to_dyadic`] for a known source shape.
pub fn crop_center(img: &Image, rows: usize, cols: usize) -> RawImage {
    let size = img.size();
    let top = (size - rows) / 2;
    let left = (size - cols) / 2;
    let mut pixels = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let start = (r + top) * size + left;
        pixels.extend_from_slice(&img.pixels[start..start + cols]);
    }
    RawImage {
        rows,
        cols,
        pixels,
        label: img.label,
    }
}

/// Groups dataset indices by label; index `c` lists the images of class `c`.
pub fn indices_by_class(labels: impl IntoIterator<Item = Option<u8>>) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, label) in labels.into_iter().enumerate() {
        if let Some(c) = label {
            let c = c as usize;
            if out.len() <= c {
                out.resize(c + 1, Vec::new());
            }
            out[c].push(i);
        }
    }
    out
}
