//! Generation drift: how far a generated object strays from the support mask
//! it inherits, measured as segmenter IoU against that mask.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::episodes::{Episode, QuerySample, SupportSample};
use crate::error::{Error, Result};
use crate::generation::GeneratedImage;
use crate::imaging::{BinaryMask, RgbImage};
use crate::metrics::{iou, IouAccumulator};
use crate::refseg::{FssModel, ReferenceModel};

/// Row label of the ungenerated support images.
pub const ORIGINAL_ROW: &str = "original";

/// Published drift mIoU (%) of a UPerNet segmenter on PASCAL-5i, per guidance.
/// Context for reading reports; never asserted.
pub const PUBLISHED_DRIFT_MIOU: [(&str, f64); 4] = [
    ("segmap", 51.34),
    ("hed", 56.39),
    ("scribble", 51.56),
    (ORIGINAL_ROW, 71.41),
];

/// Segments the source-class object in `image`.
pub trait Segmenter: Send + Sync {
    fn id(&self) -> String;
    fn segment(&self, image: &RgbImage, source: &SupportSample) -> Result<BinaryMask>;
}

/// Returns the source mask unchanged: zero drift by definition.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn segment(&self, _image: &RgbImage, source: &SupportSample) -> Result<BinaryMask> {
        Ok(source.mask.clone())
    }
}

/// Any few-shot model used as a segmenter: the source support is the single
/// support, the audited image the query.
pub struct FssSegmenter<M = ReferenceModel> {
    pub model: M,
}

impl Default for FssSegmenter<ReferenceModel> {
    fn default() -> Self {
        Self {
            model: ReferenceModel::default(),
        }
    }
}

impl<M: FssModel> Segmenter for FssSegmenter<M> {
    fn id(&self) -> String {
        format!("fss:{}", self.model.id())
    }

    fn segment(&self, image: &RgbImage, source: &SupportSample) -> Result<BinaryMask> {
        let ep = Episode {
            id: format!("drift:{}", source.id),
            fold: 0,
            class_index: source.class_index,
            supports: vec![source.clone()],
            query: QuerySample {
                id: "audited".into(),
                image: image.clone(),
                mask: source.mask.clone(),
                class_index: source.class_index,
            },
            k_original: 1,
            n_aux: 0,
        };
        Ok(self.model.segment(&ep)?.mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub image_id: String,
    pub guidance: String,
    pub source_id: String,
    pub class_index: u32,
    pub segmenter: String,
    pub iou: Option<f64>,
    #[serde(default)]
    pub intersection: u64,
    #[serde(default)]
    pub union: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceDrift {
    pub guidance: String,
    pub images: usize,
    pub failed: usize,
    /// Mean of per-image IoU.
    pub mean_iou: f64,
    /// Per-class aggregated mIoU over the same images.
    pub class_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub segmenter: String,
    /// One row per guidance kind, then the original-support baseline.
    pub rows: Vec<GuidanceDrift>,
    pub records: Vec<DriftRecord>,
    pub baseline: Vec<DriftRecord>,
}

fn measure(
    image_id: String,
    guidance: &str,
    image: &RgbImage,
    source: &SupportSample,
    segmenter: &dyn Segmenter,
) -> DriftRecord {
    let mut rec = DriftRecord {
        image_id,
        guidance: guidance.to_string(),
        source_id: source.id.clone(),
        class_index: source.class_index,
        segmenter: segmenter.id(),
        iou: None,
        intersection: 0,
        union: 0,
        error: None,
    };
    let outcome = segmenter.segment(image, source).and_then(|pred| {
        let counts = crate::metrics::ClassIoU::from_masks(source.class_index, &pred, &source.mask)?;
        Ok((iou(&pred, &source.mask)?, counts))
    });
    match outcome {
        Ok((v, c)) => {
            rec.iou = Some(v);
            rec.intersection = c.intersection;
            rec.union = c.union;
        }
        Err(e) => {
            log::warn!("drift audit of {} failed: {e}", rec.image_id);
            rec.error = Some(e.to_string());
        }
    }
    rec
}

fn summarize(guidance: &str, records: &[&DriftRecord]) -> GuidanceDrift {
    let ok: Vec<&&DriftRecord> = records.iter().filter(|r| r.iou.is_some()).collect();
    let mean_iou = if ok.is_empty() {
        0.0
    } else {
        ok.iter().map(|r| r.iou.unwrap()).sum::<f64>() / ok.len() as f64
    };
    let mut acc = IouAccumulator::new();
    for r in &ok {
        acc.add_counts(crate::metrics::ClassIoU {
            class_index: r.class_index,
            intersection: r.intersection,
            union: r.union,
        });
    }
    GuidanceDrift {
        guidance: guidance.to_string(),
        images: records.len(),
        failed: records.len() - ok.len(),
        mean_iou,
        class_miou: acc.miou().unwrap_or(0.0),
    }
}

impl DriftReport {
    /// Rebuilds the summary rows from stored records.
    pub fn from_records(segmenter: String, records: Vec<DriftRecord>, baseline: Vec<DriftRecord>) -> Self {
        let mut by_kind: BTreeMap<&str, Vec<&DriftRecord>> = BTreeMap::new();
        for r in &records {
            by_kind.entry(r.guidance.as_str()).or_default().push(r);
        }
        let mut rows: Vec<GuidanceDrift> = by_kind.iter().map(|(k, v)| summarize(k, v)).collect();
        rows.push(summarize(ORIGINAL_ROW, &baseline.iter().collect::<Vec<_>>()));
        Self {
            segmenter,
            rows,
            records,
            baseline,
        }
    }

    pub fn row(&self, guidance: &str) -> Option<&GuidanceDrift> {
        self.rows.iter().find(|r| r.guidance == guidance)
    }

    pub fn record(&self, image_id: &str) -> Option<&DriftRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("generation drift, segmenter {}\n", self.segmenter);
        let _ = writeln!(
            out,
            "{:<10}{:>8}{:>8}{:>12}{:>12}{:>12}",
            "guidance", "images", "failed", "mean IoU %", "class mIoU %", "published %"
        );
        for r in &self.rows {
            let published = PUBLISHED_DRIFT_MIOU
                .iter()
                .find(|(k, _)| *k == r.guidance)
                .map(|(_, v)| format!("{v:.2}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<10}{:>8}{:>8}{:>12.2}{:>12.2}{:>12}",
                r.guidance,
                r.images,
                r.failed,
                r.mean_iou * 100.0,
                r.class_miou * 100.0,
                published
            );
        }
        out
    }
}

/// Segments every generated image and its source support.
pub fn audit(
    gen: &[GeneratedImage],
    sources: &BTreeMap<String, SupportSample>,
    segmenter: &dyn Segmenter,
) -> Result<DriftReport> {
    let mut records = Vec::with_capacity(gen.len());
    let mut used = BTreeSet::new();
    for g in gen {
        let p = &g.provenance;
        let source = sources
            .get(&p.source_id)
            .ok_or_else(|| Error::UnresolvedSource(p.source_id.clone()))?;
        used.insert(p.source_id.clone());
        records.push(measure(p.image_id(), p.kind.as_str(), &g.image, source, segmenter));
    }
    let baseline = used
        .iter()
        .map(|id| {
            let s = &sources[id];
            measure(id.clone(), ORIGINAL_ROW, &s.image, s, segmenter)
        })
        .collect();
    Ok(DriftReport::from_records(segmenter.id(), records, baseline))
}

/// Keeps images whose audited IoU is at least `floor`, in input order.
/// Images whose audit failed pass only when `floor` is zero.
pub fn filter_drifted(gen: &[GeneratedImage], report: &DriftReport, floor: f64) -> Result<Vec<GeneratedImage>> {
    if !(0.0..=1.0).contains(&floor) {
        return Err(Error::FloorOutOfRange(floor));
    }
    let by_id: BTreeMap<&str, &DriftRecord> =
        report.records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut kept = Vec::new();
    for g in gen {
        let id = g.provenance.image_id();
        let rec = by_id.get(id.as_str()).ok_or_else(|| Error::MissingDriftRecord(id.clone()))?;
        let pass = match rec.iou {
            Some(v) => v >= floor,
            None => floor == 0.0,
        };
        if pass {
            kept.push(g.clone());
        }
    }
    Ok(kept)
}
