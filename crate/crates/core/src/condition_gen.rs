//! Control-condition extraction from a support image and its mask.
//!
//! Three condition kinds are produced:
//!
//! * `hed`: an edge map with its background zeroed by the support mask,
//! * `scribble`: the `hed` map binarized at a fixed threshold,
//! * `segmap`: the mask painted with the class color of a VOC-style palette.
//!
//! Each condition carries the text prompt built from the class name.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episodes::SupportSample;
use crate::error::{Error, Result};
use crate::imaging::{
    self, check_image, check_same, decode_png_gray, BinaryMask, GrayImage, Rgb, RgbImage,
};
use crate::remote::{JsonService, RemoteConfig};

pub const CLASS_PLACEHOLDER: &str = "{class name}";
pub const DEFAULT_PROMPT_TEMPLATE: &str = "a real shot photo of {class name}";
pub const DEFAULT_SCRIBBLE_THRESHOLD: u8 = 128;
pub const HED_URL_ENV: &str = "DIFFSS_HED_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Segmap,
    Hed,
    Scribble,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 3] = [Self::Segmap, Self::Hed, Self::Scribble];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Segmap => "segmap",
            Self::Hed => "hed",
            Self::Scribble => "scribble",
        }
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmap" | "seg-map" => Ok(Self::Segmap),
            "hed" => Ok(Self::Hed),
            "scribble" => Ok(Self::Scribble),
            other => Err(Error::InvalidArgument(format!(
                "unknown condition kind `{other}`"
            ))),
        }
    }
}

/// Produces an edge-strength map with the same dimensions as its input.
pub trait EdgeDetector: Send + Sync {
    fn id(&self) -> String;
    fn detect(&self, image: &RgbImage) -> Result<GrayImage>;
}

/// Classical fallback: gradient magnitude of the Rec.601 luma using 3x3
/// central differences `I(x+1) - I(x-1)` on each axis, replicated borders,
/// `round(sqrt(gx^2 + gy^2))` clamped to 255.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientEdgeDetector;

impl EdgeDetector for GradientEdgeDetector {
    fn id(&self) -> String {
        "gradient-fallback".to_string()
    }

    fn detect(&self, image: &RgbImage) -> Result<GrayImage> {
        check_image(image)?;
        let gray = imaging::to_luma(image);
        let (w, h) = gray.dimensions();
        let at = |x: i64, y: i64| -> f64 {
            let x = x.clamp(0, w as i64 - 1) as u32;
            let y = y.clamp(0, h as i64 - 1) as u32;
            gray.get(x, y) as f64
        };
        GrayImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as i64, y as i64);
            let gx = at(x + 1, y) - at(x - 1, y);
            let gy = at(x, y + 1) - at(x, y - 1);
            (gx * gx + gy * gy).sqrt().round().min(255.0) as u8
        })
    }
}

/// Neural edge detector reached over HTTP.
///
/// Request: `{"image": "<base64 PNG>"}`. Response: `{"edge": "<base64 PNG>"}`
/// holding an 8-bit grayscale map; it is resized back to the input size if
/// the service answers at a different resolution.
pub struct HedServiceDetector {
    service: JsonService,
}

#[derive(Serialize)]
struct HedRequest<'a> {
    image: &'a str,
}

#[derive(Deserialize)]
struct HedResponse {
    edge: String,
}

impl HedServiceDetector {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            service: JsonService::new("hed-service", config),
        }
    }

    /// Reads the endpoint from `DIFFSS_HED_URL`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(HED_URL_ENV).map_err(|_| Error::BackendUnavailable {
            backend: "hed-service".into(),
            reason: format!("{HED_URL_ENV} is not set"),
        })?;
        Ok(Self::new(RemoteConfig::new(url)))
    }
}

impl EdgeDetector for HedServiceDetector {
    fn id(&self) -> String {
        format!("hed-service:{}", self.service.url())
    }

    fn detect(&self, image: &RgbImage) -> Result<GrayImage> {
        check_image(image)?;
        let encoded = imaging::base64_png_rgb(image);
        let resp: HedResponse = self.service.post(&HedRequest { image: &encoded })?;
        let bytes = imaging::base64_decode(&resp.edge)
            .map_err(|e| self.service.malformed(format!("edge is not base64: {e}")))?;
        let edge = decode_png_gray(&bytes)
            .map_err(|e| self.service.malformed(format!("edge is not a PNG: {e}")))?;
        let edge = GrayImage::from_image(&edge)
            .map_err(|e| self.service.malformed(e.to_string()))?;
        Ok(imaging::resize_gray(&edge, image.width(), image.height()))
    }
}

/// Runs `detector`, optionally at a reduced working resolution whose longer
/// side is `long_side`; the result is resized back to native dimensions.
pub fn detect_edges(
    image: &RgbImage,
    detector: &dyn EdgeDetector,
    long_side: Option<u32>,
) -> Result<GrayImage> {
    check_image(image)?;
    let (w, h) = image.dimensions();
    let edge = match long_side {
        Some(side) if side > 0 && side != w.max(h) => {
            let scale = side as f64 / w.max(h) as f64;
            let sw = ((w as f64 * scale).round() as u32).max(1);
            let sh = ((h as f64 * scale).round() as u32).max(1);
            let small = imaging::resize_rgb(image, sw, sh);
            imaging::resize_gray(&detector.detect(&small)?, w, h)
        }
        _ => detector.detect(image)?,
    };
    check_same((w, h), edge.dimensions())?;
    Ok(edge)
}

/// Zeroes every edge response outside the mask. No dilation.
pub fn filter_background(edge: &GrayImage, mask: &BinaryMask) -> Result<GrayImage> {
    check_same(edge.dimensions(), mask.dimensions())?;
    let values = edge
        .as_raw()
        .iter()
        .zip(mask.as_raw())
        .map(|(&e, &m)| e * m)
        .collect();
    GrayImage::new(edge.width(), edge.height(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScribbleConfig {
    pub threshold: u8,
}

impl Default for ScribbleConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_SCRIBBLE_THRESHOLD,
        }
    }
}

/// `255` where `boundary >= threshold`, else `0`.
pub fn make_scribble(boundary: &GrayImage, cfg: ScribbleConfig) -> GrayImage {
    let values = boundary
        .as_raw()
        .iter()
        .map(|&v| if v >= cfg.threshold { 255 } else { 0 })
        .collect();
    GrayImage::new(boundary.width(), boundary.height(), values)
        .expect("same shape as a valid map")
}

/// Class-index to color table in the PASCAL VOC layout: the bits of the
/// index are spread across the three channels, most significant bit first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

impl Palette {
    pub fn voc(size: usize) -> Self {
        let colors = (0..size)
            .map(|index| {
                let mut rgb = [0u8; 3];
                let mut c = index;
                for bit in 0..8 {
                    for (ch, value) in rgb.iter_mut().enumerate() {
                        *value |= (((c >> ch) & 1) as u8) << (7 - bit);
                    }
                    c >>= 3;
                }
                rgb
            })
            .collect();
        Self { colors }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, index: u32) -> Option<[u8; 3]> {
        self.colors.get(index as usize).copied()
    }
}

impl Default for Palette {
    fn default() -> Self {
        Self::voc(256)
    }
}

pub fn make_segmap(mask: &BinaryMask, class_index: u32, palette: &Palette) -> Result<RgbImage> {
    let out_of_range = || Error::ClassOutOfPalette {
        index: class_index,
        size: palette.len(),
    };
    if class_index == 0 {
        return Err(out_of_range());
    }
    let fg = palette.color(class_index).ok_or_else(out_of_range)?;
    let bg = palette.color(0).ok_or_else(out_of_range)?;
    Ok(RgbImage::from_fn(mask.width(), mask.height(), |x, y| {
        Rgb(if mask.get(x, y) { fg } else { bg })
    }))
}

/// Substitutes `class_name` verbatim for the single `{class name}` token.
pub fn make_prompt(class_name: &str, template: &str) -> Result<String> {
    if class_name.trim().is_empty() {
        return Err(Error::EmptyClassName);
    }
    let found = template.matches(CLASS_PLACEHOLDER).count();
    if found != 1 {
        return Err(Error::TemplatePlaceholder {
            placeholder: CLASS_PLACEHOLDER,
            found,
        });
    }
    Ok(template.replacen(CLASS_PLACEHOLDER, class_name, 1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "color", content = "data", rename_all = "lowercase")]
pub enum ConditionImage {
    #[serde(with = "imaging::serde_png::gray")]
    Gray(GrayImage),
    #[serde(with = "imaging::serde_png::rgb")]
    Rgb(RgbImage),
}

impl ConditionImage {
    pub fn dimensions(&self) -> (u32, u32) {
        match self {
            Self::Gray(g) => g.dimensions(),
            Self::Rgb(c) => c.dimensions(),
        }
    }

    /// Three-channel view, replicating gray values.
    pub fn to_rgb(&self) -> RgbImage {
        match self {
            Self::Rgb(c) => c.clone(),
            Self::Gray(g) => {
                RgbImage::from_fn(g.width(), g.height(), |x, y| Rgb([g.get(x, y); 3]))
            }
        }
    }

    pub fn encode_png(&self) -> Vec<u8> {
        match self {
            Self::Gray(g) => imaging::encode_png_gray(&g.to_image()),
            Self::Rgb(c) => imaging::encode_png_rgb(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlCondition {
    pub kind: ConditionKind,
    pub image: ConditionImage,
    pub prompt: String,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionConfig {
    pub scribble: ScribbleConfig,
    /// Working resolution (longer side) for edge detection; `None` = native.
    pub detect_long_side: Option<u32>,
    pub prompt_template: String,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            scribble: ScribbleConfig::default(),
            detect_long_side: None,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
        }
    }
}

pub fn build_condition(
    support: &SupportSample,
    kind: ConditionKind,
    detector: &dyn EdgeDetector,
    cfg: &ConditionConfig,
    palette: &Palette,
) -> Result<ControlCondition> {
    check_same(support.image.dimensions(), support.mask.dimensions())?;
    let prompt = make_prompt(&support.class_name, &cfg.prompt_template)?;
    let image = match kind {
        ConditionKind::Segmap => {
            ConditionImage::Rgb(make_segmap(&support.mask, support.class_index, palette)?)
        }
        ConditionKind::Hed | ConditionKind::Scribble => {
            let edge = detect_edges(&support.image, detector, cfg.detect_long_side)?;
            let boundary = filter_background(&edge, &support.mask)?;
            if kind == ConditionKind::Hed {
                ConditionImage::Gray(boundary)
            } else {
                ConditionImage::Gray(make_scribble(&boundary, cfg.scribble))
            }
        }
    };
    Ok(ControlCondition {
        kind,
        image,
        prompt,
        source_id: support.id.clone(),
    })
}

/// One line of the condition provenance sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub source_id: String,
    pub kind: ConditionKind,
    pub threshold: u8,
    pub detector: String,
    pub detect_long_side: Option<u32>,
    pub prompt: String,
    pub path: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step_image() -> RgbImage {
        RgbImage::from_fn(8, 8, |x, _| if x < 4 { Rgb([0; 3]) } else { Rgb([255; 3]) })
    }

    fn sample(image: RgbImage, mask: BinaryMask) -> SupportSample {
        SupportSample {
            id: "s0".into(),
            image,
            mask,
            class_index: 1,
            class_name: "sheep".into(),
        }
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = RgbImage::from_pixel(9, 5, Rgb([77, 77, 77]));
        let edge = GradientEdgeDetector.detect(&img).unwrap();
        assert!(edge.as_raw().iter().all(|&v| v == 0));
    }

    #[test]
    fn step_image_edges_by_hand() {
        // Columns 3 and 4 see |255 - 0| horizontally and 0 vertically.
        let edge = GradientEdgeDetector.detect(&step_image()).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expected = if x == 3 || x == 4 { 255 } else { 0 };
                assert_eq!(edge.get(x, y), expected, "({x},{y})");
            }
        }
    }

    #[test]
    fn diagonal_gradient_is_clamped() {
        // Corner pixel of a checker quadrant: gx = gy = 255 -> 360.6 -> 255.
        let img = RgbImage::from_fn(4, 4, |x, y| {
            if x >= 2 && y >= 2 {
                Rgb([255; 3])
            } else {
                Rgb([0; 3])
            }
        });
        let edge = GradientEdgeDetector.detect(&img).unwrap();
        assert_eq!(edge.get(2, 2), 255);
        // gx = 255 - 0 at (1,2), gy = 0 - 0: plain 255.
        assert_eq!(edge.get(1, 2), 255);
        // (1,1): both neighbours at +1 are 0 -> none.
        assert_eq!(edge.get(1, 1), 0);
    }

    #[test]
    fn gradient_magnitude_rounds() {
        // Horizontal ramp 0,10,20,... -> interior gx = 20.
        let img = RgbImage::from_fn(5, 1, |x, _| Rgb([x as u8 * 10; 3]));
        let edge = GradientEdgeDetector.detect(&img).unwrap();
        assert_eq!(edge.as_raw(), &[10, 20, 20, 20, 10]);
    }

    #[test]
    fn filter_identity_and_zero() {
        let edge = GrayImage::from_fn(6, 4, |x, y| (x * 40 + y) as u8).unwrap();
        let zero = filter_background(&edge, &BinaryMask::empty(6, 4).unwrap()).unwrap();
        assert!(zero.as_raw().iter().all(|&v| v == 0));
        let same = filter_background(&edge, &BinaryMask::full(6, 4).unwrap()).unwrap();
        assert_eq!(same, edge);
        assert!(matches!(
            filter_background(&edge, &BinaryMask::full(4, 6).unwrap()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn scribble_threshold_is_inclusive() {
        let map = GrayImage::new(3, 1, vec![127, 128, 200]).unwrap();
        let s = make_scribble(&map, ScribbleConfig::default());
        assert_eq!(s.as_raw(), &[0, 255, 255]);
        assert_eq!(ScribbleConfig::default().threshold, 128);
    }

    #[test]
    fn voc_palette_known_entries() {
        let p = Palette::default();
        assert_eq!(p.color(0), Some([0, 0, 0]));
        assert_eq!(p.color(1), Some([128, 0, 0]));
        assert_eq!(p.color(2), Some([0, 128, 0]));
        assert_eq!(p.color(3), Some([128, 128, 0]));
        assert_eq!(p.color(15), Some([192, 128, 128]));
    }

    #[test]
    fn voc_palette_matches_bit_reversal_oracle() {
        // Channel c of index i collects bits c, c+3, c+6 of i, mirrored into
        // the top of the byte.
        let p = Palette::default();
        for i in 0..256u32 {
            let mut rgb = [0u8; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                let mut gathered = 0u8;
                for k in 0..3 {
                    let bit = (i >> (c + 3 * k)) & 1;
                    gathered |= (bit as u8) << k;
                }
                *v = gathered.reverse_bits();
            }
            assert_eq!(p.color(i), Some(rgb), "index {i}");
        }
        let distinct: std::collections::HashSet<_> = (0..256).map(|i| p.color(i)).collect();
        assert_eq!(distinct.len(), 256);
    }

    #[test]
    fn segmap_cases() {
        let p = Palette::default();
        let empty = make_segmap(&BinaryMask::empty(4, 4).unwrap(), 1, &p).unwrap();
        assert!(empty.pixels().all(|px| px.0 == [0, 0, 0]));
        let full = make_segmap(&BinaryMask::full(4, 4).unwrap(), 1, &p).unwrap();
        assert!(full.pixels().all(|px| px.0 == [128, 0, 0]));

        let checker = BinaryMask::from_fn(5, 3, |x, y| (x + y) % 2 == 0).unwrap();
        let seg = make_segmap(&checker, 7, &p).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                let want = if (x + y) % 2 == 0 { [128, 128, 128] } else { [0, 0, 0] };
                assert_eq!(seg.get_pixel(x, y).0, want);
            }
        }
        assert!(make_segmap(&checker, 0, &p).is_err());
        assert!(make_segmap(&checker, 256, &p).is_err());
    }

    #[test]
    fn prompt_template() {
        let t = DEFAULT_PROMPT_TEMPLATE;
        assert_eq!(make_prompt("sheep", t).unwrap(), "a real shot photo of sheep");
        assert_eq!(
            make_prompt("potted plant", t).unwrap(),
            "a real shot photo of potted plant"
        );
        assert!(matches!(make_prompt("", t), Err(Error::EmptyClassName)));
        assert!(matches!(
            make_prompt("cat", "a photo"),
            Err(Error::TemplatePlaceholder { found: 0, .. })
        ));
        assert!(make_prompt("cat", "{class name} and {class name}").is_err());
    }

    #[test]
    fn build_condition_dispatch() {
        let img = step_image();
        let mask = BinaryMask::from_fn(8, 8, |x, _| x >= 2 && x < 7).unwrap();
        let s = sample(img.clone(), mask.clone());
        let cfg = ConditionConfig::default();
        let p = Palette::default();

        let seg = build_condition(&s, ConditionKind::Segmap, &GradientEdgeDetector, &cfg, &p).unwrap();
        assert_eq!(seg.image, ConditionImage::Rgb(make_segmap(&mask, 1, &p).unwrap()));
        assert_eq!(seg.prompt, "a real shot photo of sheep");
        assert_eq!(seg.source_id, "s0");

        let hed = build_condition(&s, ConditionKind::Hed, &GradientEdgeDetector, &cfg, &p).unwrap();
        let by_hand = filter_background(&GradientEdgeDetector.detect(&img).unwrap(), &mask).unwrap();
        assert_eq!(hed.image, ConditionImage::Gray(by_hand));

        let empty = sample(img, BinaryMask::empty(8, 8).unwrap());
        let scr = build_condition(&empty, ConditionKind::Scribble, &GradientEdgeDetector, &cfg, &p)
            .unwrap();
        match scr.image {
            ConditionImage::Gray(g) => assert!(g.as_raw().iter().all(|&v| v == 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn build_condition_rejects_mismatched_sample() {
        let s = sample(step_image(), BinaryMask::full(4, 4).unwrap());
        let r = build_condition(
            &s,
            ConditionKind::Segmap,
            &GradientEdgeDetector,
            &ConditionConfig::default(),
            &Palette::default(),
        );
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn reduced_resolution_keeps_native_dims() {
        let img = RgbImage::from_fn(20, 10, |x, _| Rgb([(x * 12) as u8; 3]));
        let e = detect_edges(&img, &GradientEdgeDetector, Some(8)).unwrap();
        assert_eq!(e.dimensions(), (20, 10));
    }

    fn arb_map(w: u32, h: u32) -> impl Strategy<Value = GrayImage> {
        proptest::collection::vec(any::<u8>(), (w * h) as usize)
            .prop_map(move |v| GrayImage::new(w, h, v).unwrap())
    }

    fn arb_mask(w: u32, h: u32) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(0u8..=1, (w * h) as usize)
            .prop_map(move |v| BinaryMask::new(w, h, v).unwrap())
    }

    proptest! {
        #[test]
        fn filter_is_elementwise_product(edge in arb_map(16, 16), mask in arb_mask(16, 16)) {
            let out = filter_background(&edge, &mask).unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    let want = if mask.get(x, y) { edge.get(x, y) } else { 0 };
                    prop_assert_eq!(out.get(x, y), want);
                }
            }
            prop_assert_eq!(filter_background(&out, &mask).unwrap(), out);
        }

        #[test]
        fn scribble_is_two_valued(map in arb_map(7, 9), t in any::<u8>()) {
            let s = make_scribble(&map, ScribbleConfig { threshold: t });
            for (o, i) in s.as_raw().iter().zip(map.as_raw()) {
                prop_assert!(*o == 0 || *o == 255);
                prop_assert_eq!(*o == 255, *i >= t);
            }
        }

        #[test]
        fn segmap_has_at_most_two_colors(mask in arb_mask(6, 6), class in 1u32..256) {
            let p = Palette::default();
            let seg = make_segmap(&mask, class, &p).unwrap();
            let colors: std::collections::BTreeSet<_> = seg.pixels().map(|px| px.0).collect();
            let allowed = [p.color(0).unwrap(), p.color(class).unwrap()];
            prop_assert!(colors.len() <= 2);
            prop_assert!(colors.iter().all(|c| allowed.contains(c)));
        }

        #[test]
        fn scribble_composes_hed(
            pixels in proptest::collection::vec(any::<u8>(), 10 * 8 * 3),
            mask in arb_mask(10, 8),
        ) {
            let img = RgbImage::from_raw(10, 8, pixels).unwrap();
            let s = sample(img.clone(), mask.clone());
            let cfg = ConditionConfig::default();
            let p = Palette::default();
            let hed = build_condition(&s, ConditionKind::Hed, &GradientEdgeDetector, &cfg, &p).unwrap();
            let scr = build_condition(&s, ConditionKind::Scribble, &GradientEdgeDetector, &cfg, &p).unwrap();
            let ConditionImage::Gray(hed_map) = hed.image else { panic!() };
            prop_assert_eq!(scr.image, ConditionImage::Gray(make_scribble(&hed_map, cfg.scribble)));
            prop_assert_eq!(hed_map.dimensions(), (10, 8));
        }
    }
}
