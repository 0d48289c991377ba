//! Labeled image corpus: decoding, resizing, normalization and augmentation.
//!
//! A dataset root holds one directory per class, `fire/` and `nofire/`.
//! Files are read in sorted path order. Binary PPM (P6) is decoded by this
//! crate; PNG and JPEG files are decoded through the `image` crate.

mod ppm;
mod resize;
pub mod synthetic;

pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use resize::resize_bilinear;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::network::CLASS_LABELS;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("not a binary PPM (expected P6 magic)")]
    BadMagic,
    #[error("malformed PPM header: {0}")]
    BadHeader(String),
    #[error("unsupported PPM maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("PPM payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("could not decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("missing class directory {0}")]
    MissingClassDir(PathBuf),
    #[error("class {class:?} has no decodable images in {dir}")]
    NoImages { class: String, dir: PathBuf },
    #[error("malformed image: {0}")]
    Malformed(String),
}

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        let img = Self { width, height, pixels };
        img.validate()?;
        Ok(img)
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.width == 0 || self.height == 0 {
            return Err(DataError::Malformed(format!(
                "empty image {}x{}",
                self.width, self.height
            )));
        }
        if self.pixels.len() != self.width * self.height * 3 {
            return Err(DataError::Malformed(format!(
                "{}x{} RGB image needs {} bytes, has {}",
                self.width,
                self.height,
                self.width * self.height * 3,
                self.pixels.len()
            )));
        }
        Ok(())
    }

    /// Resizes to `side × side` and scales to `[0, 1]`.
    pub fn to_tensor(&self, side: usize) -> Result<Tensor, DataError> {
        self.validate()?;
        let unit: Vec<f32> = self.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        let mut data = resize_bilinear(&unit, self.width, self.height, 3, side, side);
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(vec![side, side, 3], data).map_err(|e| DataError::Malformed(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[side, side, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassFiles {
    pub name: String,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Successfully loaded files per class, in class-index order.
    pub classes: Vec<ClassFiles>,
    /// Files that failed to decode, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl DatasetManifest {
    pub fn counts(&self) -> Vec<(String, usize)> {
        self.classes.iter().map(|c| (c.name.clone(), c.files.len())).collect()
    }

    pub fn report(&self) -> String {
        let mut s = format!("root={}\n", self.root.display());
        for (name, n) in self.counts() {
            let _ = writeln!(s, "{name}={n}");
        }
        let _ = writeln!(s, "skipped={}", self.skipped.len());
        for (path, reason) in &self.skipped {
            let _ = writeln!(s, "skip {}: {reason}", path.display());
        }
        s
    }
}

/// Decodes an image file, choosing the decoder from the extension.
pub fn decode_file(path: &Path) -> Result<RgbImage, DataError> {
    let bytes = fs::read(path)?;
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        return decode_ppm(&bytes);
    }
    let decoded = image::load_from_memory(&bytes).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    RgbImage::new(rgb.width() as usize, rgb.height() as usize, rgb.into_raw())
}

/// Regular files of `dir`, sorted by path.
pub fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            files.push(entry.path());
        }
    }
    files.sort();
    Ok(files)
}

/// Loads `root/fire` and `root/nofire` as samples of `input_side²` pixels.
/// Undecodable files are listed in the manifest's skip list.
pub fn load_dataset(root: impl AsRef<Path>, input_side: usize) -> Result<(Vec<Sample>, DatasetManifest), DataError> {
    let root = root.as_ref();
    let mut samples = Vec::new();
    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes: Vec::new(),
        skipped: Vec::new(),
    };
    for (label, name) in CLASS_LABELS.iter().enumerate() {
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(DataError::MissingClassDir(dir));
        }
        let mut loaded = Vec::new();
        for path in sorted_files(&dir)? {
            match decode_file(&path).and_then(|img| img.to_tensor(input_side)) {
                Ok(image) => {
                    samples.push(Sample {
                        image,
                        label,
                        source_id: path.display().to_string(),
                    });
                    loaded.push(path);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    manifest.skipped.push((path, e.to_string()));
                }
            }
        }
        if loaded.is_empty() {
            return Err(DataError::NoImages {
                class: name.to_string(),
                dir,
            });
        }
        manifest.classes.push(ClassFiles {
            name: name.to_string(),
            files: loaded,
        });
    }
    Ok((samples, manifest))
}

/// Mirrors an HWC tensor left to right.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    Tensor::from_fn(s, |i| {
        let (y, rem) = (i / (w * c), i % (w * c));
        let (x, ch) = (rem / c, rem % c);
        src[(y * w + (w - 1 - x)) * c + ch]
    })
    .reshape(&[h, w, c])
    .expect("same shape")
}

/// Crops the square `[top, top + side) × [left, left + side)` and resizes it
/// back to the original size.
pub fn crop_and_resize(image: &Tensor, top: usize, left: usize, side: usize) -> Tensor {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut crop = Vec::with_capacity(side * side * c);
    for y in top..top + side {
        let start = (y * w + left) * c;
        crop.extend_from_slice(&src[start..start + side * c]);
    }
    let mut out = resize_bilinear(&crop, side, side, c, w, h);
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![h, w, c], out).expect("resized to original shape")
}

/// Random horizontal flip and random 90–100 %-area square crop, each applied
/// with probability one half. The label is never changed.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let mut image = sample.image.clone();
    if rng.random_bool(0.5) {
        image = flip_horizontal(&image);
    }
    if rng.random_bool(0.5) {
        let side = image.shape()[0].min(image.shape()[1]);
        let area = rng.random_range(0.9..=1.0f64);
        let crop = ((side as f64 * area.sqrt()).round() as usize).clamp(1, side);
        let top = rng.random_range(0..=image.shape()[0] - crop);
        let left = rng.random_range(0..=image.shape()[1] - crop);
        image = crop_and_resize(&image, top, left, crop);
    }
    Sample {
        image,
        label: sample.label,
        source_id: sample.source_id.clone(),
    }
}
