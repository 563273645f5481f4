//! Few-shot segmentation model contract and a prototype-matching reference model.
//!
//! A model consumes every support of an episode (originals and auxiliaries
//! alike) and predicts the query mask. The reference model pools
//! foreground and background prototypes from handcrafted per-pixel features
//! and labels each query pixel by cosine similarity.

use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::imaging::{self, check_image, check_same, BinaryMask, RgbImage};
use crate::io;

/// Dense per-pixel feature vectors, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: u32,
    height: u32,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: u32, height: u32, channels: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        if channels == 0 || values.len() != width as usize * height as usize * channels {
            return Err(Error::InvalidArgument(format!(
                "{} values for {width}x{height}x{channels} features",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f64] {
        let i = (y as usize * self.width as usize + x as usize) * self.channels;
        &self.values[i..i + self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.channels)
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;
    fn extract(&self, image: &RgbImage) -> Result<FeatureMap>;
}

/// Six channels per pixel: R, G, B in `[0, 1]`, luma gradient magnitude
/// (central differences), and local mean and population variance of luma
/// over the 3x3 window. Borders replicate edge pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct HandcraftedExtractor;

impl HandcraftedExtractor {
    pub const CHANNELS: usize = 6;
}

impl FeatureExtractor for HandcraftedExtractor {
    fn id(&self) -> String {
        "handcrafted-rgb-grad-stats".into()
    }

    fn extract(&self, image: &RgbImage) -> Result<FeatureMap> {
        check_image(image)?;
        let (w, h) = image.dimensions();
        let luma: Vec<f64> = image
            .pixels()
            .map(|p| imaging::luma(p) as f64 / 255.0)
            .collect();
        let at = |x: i64, y: i64| {
            let x = x.clamp(0, w as i64 - 1) as usize;
            let y = y.clamp(0, h as i64 - 1) as usize;
            luma[y * w as usize + x]
        };
        let mut values = Vec::with_capacity(w as usize * h as usize * Self::CHANNELS);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let p = image.get_pixel(x as u32, y as u32).0;
                let gx = at(x + 1, y) - at(x - 1, y);
                let gy = at(x, y + 1) - at(x, y - 1);
                let mut window = [0.0; 9];
                for (i, (dx, dy)) in (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dx, dy))).enumerate() {
                    window[i] = at(x + dx, y + dy);
                }
                let mean = window.iter().sum::<f64>() / 9.0;
                let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
                values.extend_from_slice(&[
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                    (gx * gx + gy * gy).sqrt(),
                    mean,
                    var,
                ]);
            }
        }
        FeatureMap::new(w, h, Self::CHANNELS, values)
    }
}

pub fn extract_features(image: &RgbImage, extractor: &dyn FeatureExtractor) -> Result<FeatureMap> {
    extractor.extract(image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Raw,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub norm_kind: NormKind,
}

impl Prototype {
    pub fn raw(vector: Vec<f64>) -> Self {
        Self {
            vector,
            norm_kind: NormKind::Raw,
        }
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Mean feature vector over the mask foreground.
pub fn masked_average_pool(features: &FeatureMap, mask: &BinaryMask) -> Result<Prototype> {
    check_same(features.dimensions(), mask.dimensions())?;
    let mut sum = vec![0.0; features.channels()];
    let mut count = 0usize;
    for (f, &m) in features.pixels().zip(mask.as_raw()) {
        if m == 1 {
            for (s, v) in sum.iter_mut().zip(f) {
                *s += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(Prototype::raw(sum.into_iter().map(|s| s / count as f64).collect()))
}

pub fn l2_normalize(p: &Prototype) -> Result<Prototype> {
    let n = p.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(Prototype {
        vector: p.vector.iter().map(|v| v / n).collect(),
        norm_kind: NormKind::L2,
    })
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedMask {
    pub mask: BinaryMask,
    /// `(cos_fg - cos_bg + 2) / 4` per pixel; foreground iff above one half.
    pub scores: Option<Vec<f64>>,
}

/// Labels a pixel foreground iff its cosine to `fg` strictly exceeds its
/// cosine to `bg`; ties go to background.
pub fn predict(query: &FeatureMap, fg: &Prototype, bg: &Prototype) -> Result<PredictedMask> {
    for p in [fg, bg] {
        if p.vector.len() != query.channels() {
            return Err(Error::ChannelMismatch {
                expected: query.channels(),
                actual: p.vector.len(),
            });
        }
        if p.norm() == 0.0 {
            return Err(Error::ZeroVector);
        }
    }
    let mut labels = Vec::with_capacity(query.pixels().len());
    let mut scores = Vec::with_capacity(labels.capacity());
    for f in query.pixels() {
        let (cf, cb) = (cosine(f, &fg.vector), cosine(f, &bg.vector));
        labels.push(u8::from(cf > cb));
        scores.push((cf - cb + 2.0) / 4.0);
    }
    let (w, h) = query.dimensions();
    Ok(PredictedMask {
        mask: BinaryMask::new(w, h, labels)?,
        scores: Some(scores),
    })
}

/// The segmentation contract: predict the query mask from all supports.
pub trait FssModel: Send + Sync {
    fn id(&self) -> String;
    fn segment(&self, ep: &Episode) -> Result<PredictedMask>;
}

/// Runs `model` and attaches the episode id to any failure.
pub fn segment_episode(ep: &Episode, model: &dyn FssModel) -> Result<PredictedMask> {
    let pred = model.segment(ep).map_err(|e| match e {
        Error::ModelFailure { .. } => e,
        other => Error::ModelFailure {
            episode: ep.id.clone(),
            reason: other.to_string(),
        },
    })?;
    check_same(ep.query.image.dimensions(), pred.mask.dimensions()).map_err(|e| {
        Error::ModelFailure {
            episode: ep.id.clone(),
            reason: e.to_string(),
        }
    })?;
    Ok(pred)
}

/// Order-independent mean: vectors are sorted by a total order first, then
/// averaged with a running mean, which is exact for identical inputs.
fn fuse(mut protos: Vec<Vec<f64>>) -> Vec<f64> {
    protos.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = protos[0].clone();
    for (i, p) in protos.iter().enumerate().skip(1) {
        let n = (i + 1) as f64;
        for (m, v) in mean.iter_mut().zip(p) {
            *m += (v - *m) / n;
        }
    }
    mean
}

/// Prototype-matching reference model.
///
/// Foreground prototype: mean of per-support masked averages. Background
/// prototype: mean of per-support complement-mask averages (supports whose
/// mask covers the whole image contribute no background).
#[derive(Clone)]
pub struct ReferenceModel<E = HandcraftedExtractor> {
    pub extractor: E,
}

impl Default for ReferenceModel<HandcraftedExtractor> {
    fn default() -> Self {
        Self {
            extractor: HandcraftedExtractor,
        }
    }
}

impl<E: FeatureExtractor> ReferenceModel<E> {
    pub fn new(extractor: E) -> Self {
        Self { extractor }
    }

    pub fn prototypes(&self, ep: &Episode) -> Result<(Prototype, Prototype)> {
        if ep.supports.is_empty() {
            return Err(Error::InsufficientSamples("episode has no supports".into()));
        }
        let mut fgs = Vec::new();
        let mut bgs = Vec::new();
        for s in &ep.supports {
            let feats = self.extractor.extract(&s.image)?;
            fgs.push(masked_average_pool(&feats, &s.mask)?.vector);
            let complement = s.mask.complement();
            if !complement.is_empty() {
                bgs.push(masked_average_pool(&feats, &complement)?.vector);
            }
        }
        if bgs.is_empty() {
            return Err(Error::InsufficientSamples(
                "no support has background pixels".into(),
            ));
        }
        Ok((Prototype::raw(fuse(fgs)), Prototype::raw(fuse(bgs))))
    }
}

impl<E: FeatureExtractor> FssModel for ReferenceModel<E> {
    fn id(&self) -> String {
        format!("reference-prototype({})", self.extractor.id())
    }

    fn segment(&self, ep: &Episode) -> Result<PredictedMask> {
        let (fg, bg) = self.prototypes(ep)?;
        let query = self.extractor.extract(&ep.query.image)?;
        predict(&query, &fg, &bg)
    }
}

/// Episode handed to an external model: PNG paths relative to the dump file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeDump {
    pub episode_id: String,
    pub fold: u32,
    pub class_index: u32,
    pub class_name: String,
    pub k_original: usize,
    pub n_aux: usize,
    pub supports: Vec<DumpSupport>,
    pub query: DumpQuery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpSupport {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub auxiliary: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpQuery {
    pub id: String,
    pub image: String,
}

/// Writes `episode.jsonl` (one line) plus PNGs into `dir`. The query mask
/// is never written.
pub fn write_episode_dump(ep: &Episode, dir: &std::path::Path) -> Result<PathBuf> {
    let mut supports = Vec::new();
    for (i, s) in ep.supports.iter().enumerate() {
        let image = format!("support_{i}.png");
        let mask = format!("support_{i}_mask.png");
        io::save_rgb(&dir.join(&image), &s.image)?;
        io::save_mask(&dir.join(&mask), &s.mask)?;
        supports.push(DumpSupport {
            id: s.id.clone(),
            image,
            mask,
            auxiliary: i >= ep.k_original,
        });
    }
    io::save_rgb(&dir.join("query.png"), &ep.query.image)?;
    let dump = EpisodeDump {
        episode_id: ep.id.clone(),
        fold: ep.fold,
        class_index: ep.class_index,
        class_name: ep.supports.first().map(|s| s.class_name.clone()).unwrap_or_default(),
        k_original: ep.k_original,
        n_aux: ep.n_aux,
        supports,
        query: DumpQuery {
            id: ep.query.id.clone(),
            image: "query.png".into(),
        },
    };
    let path = dir.join("episode.jsonl");
    io::write_jsonl(&path, &[dump])?;
    Ok(path)
}

/// External model run as a subprocess: `<program> <args..> <episode.jsonl>
/// <prediction.png>`. Exit status 0 and a single-channel {0,255} PNG of the
/// query size are required.
#[derive(Debug, Clone)]
pub struct SubprocessModel {
    pub program: String,
    pub args: Vec<String>,
}

impl FssModel for SubprocessModel {
    fn id(&self) -> String {
        format!("subprocess:{}", self.program)
    }

    fn segment(&self, ep: &Episode) -> Result<PredictedMask> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let dump = write_episode_dump(ep, dir.path())?;
        let out = dir.path().join("prediction.png");
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&dump)
            .arg(&out)
            .status()
            .map_err(|e| Error::ModelFailure {
                episode: ep.id.clone(),
                reason: format!("cannot launch {}: {e}", self.program),
            })?;
        if !status.success() {
            return Err(Error::ModelFailure {
                episode: ep.id.clone(),
                reason: format!("{} exited with {status}", self.program),
            });
        }
        Ok(PredictedMask {
            mask: imaging::load_mask(&out)?,
            scores: None,
        })
    }
}
