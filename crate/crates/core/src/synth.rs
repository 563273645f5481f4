//! Seeded synthetic datasets for tests, demos and the trend fixture.
//!
//! Texture images carry one elliptical object per image. Each class has a
//! base color and a stripe texture; every image jitters the color and draws
//! a fresh two-color gradient background.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{ManifestRecord, SizeBucket};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Rgb, RgbImage};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub classes: u32,
    pub images_per_class: u32,
    pub width: u32,
    pub height: u32,
    pub color_jitter: f64,
    pub stripe_contrast: f64,
    pub seed: u64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            images_per_class: 12,
            width: 48,
            height: 48,
            color_jitter: 40.0,
            stripe_contrast: 50.0,
            seed: 7,
        }
    }
}

pub struct TextureSample {
    pub record: ManifestRecord,
    pub image: RgbImage,
    pub mask: BinaryMask,
}

fn class_color(class: u32) -> [f64; 3] {
    const BASE: [[f64; 3]; 6] = [
        [200.0, 60.0, 50.0],
        [60.0, 90.0, 200.0],
        [70.0, 180.0, 80.0],
        [210.0, 190.0, 60.0],
        [160.0, 70.0, 180.0],
        [60.0, 190.0, 190.0],
    ];
    BASE[(class as usize - 1) % BASE.len()]
}

pub fn texture_samples(cfg: &TextureConfig) -> Result<Vec<TextureSample>> {
    if cfg.classes == 0 || cfg.images_per_class == 0 || cfg.width < 8 || cfg.height < 8 {
        return Err(Error::InvalidArgument(
            "texture dataset needs classes, images and at least 8x8 pixels".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);
    let mut out = Vec::new();
    for class in 1..=cfg.classes {
        let base = class_color(class);
        let period = 3.0 + class as f64;
        for i in 0..cfg.images_per_class {
            let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-cfg.color_jitter..=cfg.color_jitter));
            let fg: [f64; 3] = std::array::from_fn(|c| base[c] + jitter[c]);
            let cx = rng.random_range(0.3..0.7) * w as f64;
            let cy = rng.random_range(0.3..0.7) * h as f64;
            let rx = rng.random_range(0.15..0.3) * w as f64;
            let ry = rng.random_range(0.15..0.3) * h as f64;
            let phase = rng.random_range(0.0..period);
            let b0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=255.0));
            let b1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=255.0));
            let vertical = rng.random_bool(0.5);

            let inside = |x: u32, y: u32| {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            };
            let mask = BinaryMask::from_fn(w, h, inside)?;
            let image = RgbImage::from_fn(w, h, |x, y| {
                if inside(x, y) {
                    let s = ((x + y) as f64 + phase) % period < period / 2.0;
                    let d = if s { cfg.stripe_contrast } else { -cfg.stripe_contrast };
                    Rgb(std::array::from_fn(|c| (fg[c] + d).round().clamp(0.0, 255.0) as u8))
                } else {
                    let t = if vertical { y as f64 / (h - 1) as f64 } else { x as f64 / (w - 1) as f64 };
                    Rgb(std::array::from_fn(|c| (b0[c] * (1.0 - t) + b1[c] * t).round() as u8))
                }
            });
            let id = format!("c{class}_{i:03}");
            out.push(TextureSample {
                record: ManifestRecord {
                    id: id.clone(),
                    image: format!("images/{id}.png"),
                    mask: format!("masks/{id}.png"),
                    classes: vec![class],
                    size_buckets: vec![SizeBucket::from_area(mask.count() as f64)],
                    class_name: Some(format!("texture{class}")),
                },
                image,
                mask,
            });
        }
    }
    Ok(out)
}

/// Writes `manifest.jsonl`, `images/` and `masks/` under `dir`.
pub fn write_texture_dataset(dir: &Path, cfg: &TextureConfig) -> Result<PathBuf> {
    let samples = texture_samples(cfg)?;
    for s in &samples {
        io::save_rgb(&dir.join(&s.record.image), &s.image)?;
        io::save_mask(&dir.join(&s.record.mask), &s.mask)?;
    }
    let manifest = dir.join("manifest.jsonl");
    let records: Vec<&ManifestRecord> = samples.iter().map(|s| &s.record).collect();
    io::write_jsonl(&manifest, &records)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub classes: u32,
    pub per_class: u32,
    /// Class `c` gets `per_class * skew^(c-1)` images (rounded, at least 1).
    pub skew: f64,
    pub seed: u64,
}

impl Default for ManifestConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 100,
            skew: 1.0,
            seed: 0,
        }
    }
}

/// Image-free manifest records with one to three instances each and a
/// spread of size buckets, for exercising the stratified builder.
pub fn synthetic_manifest(prefix: &str, cfg: &ManifestConfig) -> Vec<ManifestRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let mut next = 0u64;
    for class in 1..=cfg.classes {
        let n = ((cfg.per_class as f64) * cfg.skew.powi(class as i32 - 1)).round().max(1.0) as u32;
        for _ in 0..n {
            let mut classes = vec![class];
            let extra = rng.random_range(0..3);
            for _ in 0..extra {
                classes.push(rng.random_range(1..=cfg.classes));
            }
            let size_buckets = classes
                .iter()
                .map(|_| SizeBucket::from_area(rng.random_range(4.0f64..200.0).powi(2)))
                .collect();
            let id = format!("{prefix}{next}");
            next += 1;
            out.push(ManifestRecord {
                image: format!("images/{id}.png"),
                mask: format!("masks/{id}.png"),
                id,
                classes,
                size_buckets,
                class_name: None,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_seeded() {
        let cfg = TextureConfig { images_per_class: 3, ..Default::default() };
        let a = texture_samples(&cfg).unwrap();
        let b = texture_samples(&cfg).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
            assert!(!x.mask.is_empty());
        }
    }

    #[test]
    fn skew_shapes_counts() {
        let recs = synthetic_manifest("i", &ManifestConfig { classes: 3, per_class: 40, skew: 0.5, seed: 1 });
        let count = |c| recs.iter().filter(|r| r.classes[0] == c).count();
        assert_eq!((count(1), count(2), count(3)), (40, 20, 10));
        assert!(recs.iter().all(|r| r.classes.len() == r.size_buckets.len()));
    }
}
