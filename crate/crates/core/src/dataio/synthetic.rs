//! Two-color blob images: a warm flame-colored disc for the fire class and a
//! cool blue disc for the nofire class, on a noisy dark background. The
//! classes are trivially separable, which makes the set useful for checking
//! that the whole pipeline can fit data at all.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{encode_ppm, DataError, RgbImage, Sample};
use crate::network::{CLASS_LABELS, FIRE_CLASS, NOFIRE_CLASS};

const FIRE_RGB: [u8; 3] = [235, 95, 25];
const NOFIRE_RGB: [u8; 3] = [35, 105, 225];

fn jitter<R: Rng>(base: u8, spread: i32, rng: &mut R) -> u8 {
    (base as i32 + rng.random_range(-spread..=spread)).clamp(0, 255) as u8
}

/// One blob image of the given class.
pub fn blob_image<R: Rng>(side: usize, label: usize, rng: &mut R) -> RgbImage {
    let base = if label == FIRE_CLASS { FIRE_RGB } else { NOFIRE_RGB };
    let color = base.map(|b| jitter(b, 15, rng));
    let radius = rng.random_range(side as f32 / 6.0..=side as f32 / 3.0);
    let cx = rng.random_range(radius..=side as f32 - radius);
    let cy = rng.random_range(radius..=side as f32 - radius);
    let mut pixels = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            if dx * dx + dy * dy <= radius * radius {
                pixels.extend(color.map(|c| jitter(c, 8, rng)));
            } else {
                let g = rng.random_range(20..=70u8);
                pixels.extend([g, g, g]);
            }
        }
    }
    RgbImage {
        width: side,
        height: side,
        pixels,
    }
}

/// `per_class` images of each class, fire first, deterministic in `seed`.
pub fn blob_images(per_class: usize, side: usize, seed: u64) -> Vec<(RgbImage, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [FIRE_CLASS, NOFIRE_CLASS]
        .into_iter()
        .flat_map(|label| (0..per_class).map(move |_| label))
        .map(|label| (blob_image(side, label, &mut rng), label))
        .collect()
}

/// In-memory blob samples at the image's own resolution.
pub fn blob_samples(per_class: usize, side: usize, seed: u64) -> Vec<Sample> {
    blob_images(per_class, side, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (img, label))| Sample {
            image: img.to_tensor(side).expect("generated image is well formed"),
            label,
            source_id: format!("synthetic/{}/{i:03}", CLASS_LABELS[label]),
        })
        .collect()
}

/// Writes a blob dataset as `root/{fire,nofire}/NNN.ppm`.
pub fn write_blob_dataset(root: impl AsRef<Path>, per_class: usize, side: usize, seed: u64) -> Result<(), DataError> {
    let root = root.as_ref();
    for name in CLASS_LABELS {
        fs::create_dir_all(root.join(name))?;
    }
    for (i, (img, label)) in blob_images(per_class, side, seed).into_iter().enumerate() {
        let path = root.join(CLASS_LABELS[label]).join(format!("{i:03}.ppm"));
        fs::write(path, encode_ppm(&img))?;
    }
    Ok(())
}
