//! Auxiliary image generation from a control condition and prompt.
//!
//! Two backends implement [`Generator`]: [`HttpGenerator`] forwards requests
//! to a diffusion service, [`MockGenerator`] re-renders the source support
//! image with seeded appearance changes while keeping the object in place.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition_gen::{ConditionKind, ControlCondition};
use crate::error::{Error, Result};
use crate::imaging::{self, check_same, BinaryMask, Rgb, RgbImage};
use crate::io;
use crate::remote::{JsonService, RemoteConfig};

pub const GENERATOR_URL_ENV: &str = "DIFFSS_GENERATOR_URL";
/// One original support plus four auxiliaries gives a pseudo 5-shot episode.
pub const DEFAULT_AUX_COUNT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    pub seed: u64,
    pub kind: ConditionKind,
    pub source_id: String,
    /// 1-based position within the request.
    pub index: u32,
}

impl Provenance {
    pub fn image_id(&self) -> String {
        format!("{}@{}#{}", self.source_id, self.kind, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedImage {
    #[serde(with = "imaging::serde_png::rgb")]
    pub image: RgbImage,
    pub provenance: Provenance,
}

/// Source pixels needed by backends that edit the support image directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceImage {
    pub image: RgbImage,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub condition: ControlCondition,
    pub prompt: String,
    pub count: usize,
    pub seed: u64,
    /// Forwarded to the backend untouched (guidance scale, steps, ...).
    pub params: BTreeMap<String, serde_json::Value>,
    pub source: Option<SourceImage>,
}

impl GenerationRequest {
    pub fn new(condition: ControlCondition, count: usize, seed: u64) -> Self {
        Self {
            prompt: condition.prompt.clone(),
            condition,
            count,
            seed,
            params: BTreeMap::new(),
            source: None,
        }
    }

    pub fn with_source(mut self, image: RgbImage, mask: BinaryMask) -> Self {
        self.source = Some(SourceImage { image, mask });
        self
    }
}

pub trait Generator: Send + Sync {
    fn id(&self) -> String;

    /// Largest `count` accepted per request, if bounded.
    fn max_count(&self) -> Option<usize> {
        None
    }

    /// Returns exactly `req.count` images in index order.
    fn generate_batch(&self, req: &GenerationRequest) -> Result<Vec<GeneratedImage>>;
}

/// Runs `backend` and checks the batch contract: length, order, dimensions.
pub fn generate(req: &GenerationRequest, backend: &dyn Generator) -> Result<Vec<GeneratedImage>> {
    if req.count == 0 {
        return Ok(Vec::new());
    }
    if let Some(limit) = backend.max_count() {
        if req.count > limit {
            return Err(Error::CountExceedsLimit {
                requested: req.count,
                limit,
            });
        }
    }
    let images = backend.generate_batch(req)?;
    let malformed = |reason: String| Error::MalformedResponse {
        backend: backend.id(),
        reason,
    };
    if images.len() != req.count {
        return Err(malformed(format!(
            "{} images for a request of {}",
            images.len(),
            req.count
        )));
    }
    for (i, g) in images.iter().enumerate() {
        if g.provenance.index as usize != i + 1 {
            return Err(malformed(format!("image {} carries index {}", i + 1, g.provenance.index)));
        }
        check_same(req.condition.image.dimensions(), g.image.dimensions())?;
    }
    Ok(images)
}

/// Appearance perturbation amplitudes of the mock backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    /// Per-channel multiplicative jitter: gain drawn from `1 ± gain_amplitude`.
    pub gain_amplitude: f64,
    /// Per-channel additive jitter in intensity units.
    pub bias_amplitude: f64,
    /// Peak amplitude of the smooth texture noise, intensity units.
    pub noise_amplitude: f64,
    /// Noise lattice spacing in pixels; larger is smoother.
    pub noise_cell: u32,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            gain_amplitude: 0.15,
            bias_amplitude: 20.0,
            noise_amplitude: 12.0,
            noise_cell: 4,
        }
    }
}

impl MockConfig {
    pub fn identity() -> Self {
        Self {
            gain_amplitude: 0.0,
            bias_amplitude: 0.0,
            noise_amplitude: 0.0,
            noise_cell: 4,
        }
    }

    /// Upper bound on `|out - in|` for any foreground channel value, and so
    /// on the mean foreground intensity shift. Clamping never widens it.
    pub fn max_intensity_shift(&self) -> f64 {
        255.0 * self.gain_amplitude + self.bias_amplitude + self.noise_amplitude + 0.5
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

fn mock_stream_seed(condition: &ControlCondition, seed: u64, k: u32) -> u64 {
    let mut key = condition.source_id.as_bytes().to_vec();
    key.push(0);
    key.extend_from_slice(condition.kind.as_str().as_bytes());
    splitmix64(splitmix64(fnv1a(&key) ^ seed) ^ u64::from(k))
}

/// Smooth noise in `[-1, 1]`: a random lattice bilinearly interpolated.
fn lattice_noise(rng: &mut ChaCha8Rng, w: u32, h: u32, cell: u32) -> Vec<f64> {
    let cell = cell.max(1);
    let gw = (w / cell + 2) as usize;
    let gh = (h / cell + 2) as usize;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |gx: usize, gy: usize| lattice[gy * gw + gx];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Deterministic stand-in for a diffusion backend.
///
/// Foreground pixels get a seeded per-channel affine color jitter plus smooth
/// texture noise; background pixels are replaced by a seeded two-color linear
/// gradient. The object never moves, so the support mask stays exact.
pub fn mock_generate(
    condition: &ControlCondition,
    support_image: &RgbImage,
    mask: &BinaryMask,
    seed: u64,
    k: u32,
    cfg: &MockConfig,
) -> Result<GeneratedImage> {
    check_same(condition.image.dimensions(), support_image.dimensions())?;
    check_same(support_image.dimensions(), mask.dimensions())?;
    let (w, h) = support_image.dimensions();
    let mut rng = ChaCha8Rng::seed_from_u64(mock_stream_seed(condition, seed, k));

    let mut gains = [1.0; 3];
    let mut biases = [0.0; 3];
    for c in 0..3 {
        if cfg.gain_amplitude > 0.0 {
            gains[c] = 1.0 + rng.random_range(-cfg.gain_amplitude..=cfg.gain_amplitude);
        }
        if cfg.bias_amplitude > 0.0 {
            biases[c] = rng.random_range(-cfg.bias_amplitude..=cfg.bias_amplitude);
        }
    }
    let noise = lattice_noise(&mut rng, w, h, cfg.noise_cell);

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=255.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=255.0));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let corners = [(0.0, 0.0), (w as f64 - 1.0, 0.0), (0.0, h as f64 - 1.0), (w as f64 - 1.0, h as f64 - 1.0)];
    let proj: Vec<f64> = corners.iter().map(|(x, y)| x * dx + y * dy).collect();
    let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let image = RgbImage::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            let src = support_image.get_pixel(x, y).0;
            let n = cfg.noise_amplitude * noise[(y * w + x) as usize];
            Rgb(std::array::from_fn(|c| {
                (gains[c] * src[c] as f64 + biases[c] + n).round().clamp(0.0, 255.0) as u8
            }))
        } else {
            let t = ((x as f64 * dx + y as f64 * dy) - lo) / span;
            Rgb(std::array::from_fn(|c| {
                (c0[c] * (1.0 - t) + c1[c] * t).round().clamp(0.0, 255.0) as u8
            }))
        }
    });
    Ok(GeneratedImage {
        image,
        provenance: Provenance {
            backend: MockGenerator::ID.to_string(),
            seed,
            kind: condition.kind,
            source_id: condition.source_id.clone(),
            index: k,
        },
    })
}

#[derive(Debug, Clone, Default)]
pub struct MockGenerator {
    pub config: MockConfig,
}

impl MockGenerator {
    pub const ID: &'static str = "mock";

    pub fn new(config: MockConfig) -> Self {
        Self { config }
    }
}

impl Generator for MockGenerator {
    fn id(&self) -> String {
        Self::ID.to_string()
    }

    fn generate_batch(&self, req: &GenerationRequest) -> Result<Vec<GeneratedImage>> {
        let source = req
            .source
            .as_ref()
            .ok_or_else(|| Error::MissingSource(req.condition.source_id.clone()))?;
        (1..=req.count as u32)
            .map(|k| {
                mock_generate(
                    &req.condition,
                    &source.image,
                    &source.mask,
                    req.seed,
                    k,
                    &self.config,
                )
            })
            .collect()
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    condition_image: String,
    condition_kind: ConditionKind,
    prompt: &'a str,
    count: usize,
    seed: u64,
    params: &'a BTreeMap<String, serde_json::Value>,
}

#[derive(Deserialize)]
struct WireResponse {
    images: Vec<String>,
}

/// Client for a diffusion service.
///
/// `POST` body: `{"condition_image", "condition_kind", "prompt", "count",
/// "seed", "params"}` with the condition as base64 PNG. Response:
/// `{"images": [<base64 PNG>, ...]}` in index order. Images of a different
/// size are resized bilinearly to the condition size.
pub struct HttpGenerator {
    service: JsonService,
    max_count: Option<usize>,
}

impl HttpGenerator {
    pub fn new(config: RemoteConfig, max_count: Option<usize>) -> Self {
        Self {
            service: JsonService::new("diffusion-service", config),
            max_count,
        }
    }

    pub fn from_env() -> Result<Self> {
        let url = std::env::var(GENERATOR_URL_ENV).map_err(|_| Error::BackendUnavailable {
            backend: "diffusion-service".into(),
            reason: format!("{GENERATOR_URL_ENV} is not set"),
        })?;
        Ok(Self::new(RemoteConfig::new(url), None))
    }
}

impl Generator for HttpGenerator {
    fn id(&self) -> String {
        format!("http:{}", self.service.url())
    }

    fn max_count(&self) -> Option<usize> {
        self.max_count
    }

    fn generate_batch(&self, req: &GenerationRequest) -> Result<Vec<GeneratedImage>> {
        let body = WireRequest {
            condition_image: imaging::base64_encode(&req.condition.image.encode_png()),
            condition_kind: req.condition.kind,
            prompt: &req.prompt,
            count: req.count,
            seed: req.seed,
            params: &req.params,
        };
        let resp: WireResponse = self.service.post(&body)?;
        let (w, h) = req.condition.image.dimensions();
        resp.images
            .iter()
            .enumerate()
            .map(|(i, text)| {
                let bytes = imaging::base64_decode(text)
                    .map_err(|e| self.service.malformed(format!("image {}: {e}", i + 1)))?;
                let img = imaging::decode_png_rgb(&bytes)
                    .map_err(|e| self.service.malformed(format!("image {}: {e}", i + 1)))?;
                Ok(GeneratedImage {
                    image: imaging::resize_rgb(&img, w, h),
                    provenance: Provenance {
                        backend: self.id(),
                        seed: req.seed,
                        kind: req.condition.kind,
                        source_id: req.condition.source_id.clone(),
                        index: i as u32 + 1,
                    },
                })
            })
            .collect()
    }
}

/// On-disk store of generated images: one PNG per image under
/// `<root>/<kind>/`, plus `<root>/provenance.jsonl`.
#[derive(Debug)]
pub struct GeneratedStore {
    root: PathBuf,
    records: BTreeMap<(String, ConditionKind, u32), StoreRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreRecord {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub path: String,
}

impl GeneratedStore {
    pub const PROVENANCE_FILE: &'static str = "provenance.jsonl";

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let sidecar = root.join(Self::PROVENANCE_FILE);
        let mut records = BTreeMap::new();
        if sidecar.exists() {
            for r in io::read_jsonl::<StoreRecord>(&sidecar)? {
                records.insert(Self::key(&r.provenance), r);
            }
        }
        Ok(Self { root, records })
    }

    fn key(p: &Provenance) -> (String, ConditionKind, u32) {
        (p.source_id.clone(), p.kind, p.index)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, source_id: &str, kind: ConditionKind, index: u32) -> bool {
        self.records
            .contains_key(&(source_id.to_string(), kind, index))
    }

    pub fn records(&self) -> impl Iterator<Item = &StoreRecord> {
        self.records.values()
    }

    /// Writes the PNG immediately; the sidecar is rewritten by [`flush`](Self::flush).
    pub fn insert(&mut self, img: &GeneratedImage) -> Result<()> {
        let p = &img.provenance;
        let file = format!("{}_k{}.png", sanitize(&p.source_id), p.index);
        let rel = format!("{}/{}", p.kind, file);
        io::save_rgb(&self.root.join(&rel), &img.image)?;
        self.records.insert(
            Self::key(p),
            StoreRecord {
                provenance: p.clone(),
                path: rel,
            },
        );
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        let recs: Vec<&StoreRecord> = self.records.values().collect();
        io::write_jsonl(&self.root.join(Self::PROVENANCE_FILE), &recs)
    }

    pub fn load(&self, record: &StoreRecord) -> Result<GeneratedImage> {
        Ok(GeneratedImage {
            image: imaging::load_rgb(&self.root.join(&record.path))?,
            provenance: record.provenance.clone(),
        })
    }

    /// The first `count` images of one source and kind, by index.
    pub fn load_for(&self, source_id: &str, kind: ConditionKind, count: usize) -> Result<Vec<GeneratedImage>> {
        (1..=count as u32)
            .map(|k| {
                let rec = self
                    .records
                    .get(&(source_id.to_string(), kind, k))
                    .ok_or_else(|| {
                        Error::InsufficientSamples(format!(
                            "generated store lacks {source_id}@{kind}#{k}"
                        ))
                    })?;
                self.load(rec)
            })
            .collect()
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}
