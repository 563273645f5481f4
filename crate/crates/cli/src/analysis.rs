use std::collections::{BTreeMap, BTreeSet};

use diffss_core::drift_audit::{audit, filter_drifted, DriftReport, FssSegmenter, OracleSegmenter, Segmenter};
use diffss_core::episodes::{Dataset, SupportSample};
use diffss_core::generation::{GeneratedImage, GeneratedStore, StoreRecord};
use diffss_core::io;
use diffss_core::proto_analysis::{
    consistency_score, embed2d, prototype_set, EmbeddingExport, Origin, ProtoSample, PrototypeSet, Reducer,
    TsneConfig,
};
use diffss_core::refseg::HandcraftedExtractor;
use serde::{Deserialize, Serialize};

use crate::common;
use crate::error::{CliError, CliResult};
use crate::settings::{SegmenterKind, Settings};

fn load_store(settings: &Settings) -> CliResult<(GeneratedStore, Vec<GeneratedImage>)> {
    let store = GeneratedStore::open(Settings::existing(&settings.store, "store")?)?;
    let kinds = settings.guidance().kinds();
    let images = store
        .records()
        .filter(|r| kinds.contains(&r.provenance.kind))
        .map(|r| store.load(r))
        .collect::<diffss_core::Result<Vec<_>>>()?;
    Ok((store, images))
}

fn supports(dataset: &Dataset) -> BTreeMap<String, SupportSample> {
    dataset
        .samples
        .iter()
        .map(|s| (s.id.clone(), s.to_support(s.class_index())))
        .collect()
}

pub fn drift(settings: &Settings) -> CliResult<DriftReport> {
    let dataset = common::load_dataset(settings)?;
    if let Some(f) = settings.floor {
        if !(0.0..=1.0).contains(&f) {
            return Err(CliError::Config(format!("--floor {f} outside [0, 1]")));
        }
    }
    let (store, images) = load_store(settings)?;
    let out = common::out_dir(settings)?;
    let segmenter: Box<dyn Segmenter> = match settings.segmenter.unwrap_or(SegmenterKind::Reference) {
        SegmenterKind::Oracle => Box::new(OracleSegmenter),
        SegmenterKind::Reference => Box::new(FssSegmenter::default()),
    };
    let report = audit(&images, &supports(&dataset), segmenter.as_ref())?;
    io::write_json(&out.join("drift.json"), &report)?;
    io::write_atomic(&out.join("drift.txt"), report.to_table().as_bytes())?;
    if let Some(floor) = settings.floor {
        let kept: BTreeSet<String> = filter_drifted(&images, &report, floor)?
            .iter()
            .map(|g| g.provenance.image_id())
            .collect();
        let records: Vec<&StoreRecord> = store
            .records()
            .filter(|r| kept.contains(&r.provenance.image_id()))
            .collect();
        io::write_jsonl(&out.join("kept.jsonl"), &records)?;
    }
    common::write_fingerprint(&out, "drift", settings)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoSummary {
    pub prototypes: usize,
    pub skipped: usize,
    /// Per-class consistency of generated with raw prototypes, for classes
    /// that have both.
    pub consistency: BTreeMap<u32, f64>,
}

pub fn proto(settings: &Settings) -> CliResult<(EmbeddingExport, ProtoSummary)> {
    let dataset = common::load_dataset(settings)?;
    let images = match settings.store {
        Some(_) => load_store(settings)?.1,
        None => Vec::new(),
    };
    let out = common::out_dir(settings)?;
    let mut samples: Vec<ProtoSample<'_>> = dataset
        .samples
        .iter()
        .map(|s| ProtoSample {
            id: s.id.clone(),
            image: &s.image,
            mask: &s.mask,
            class_index: s.class_index(),
            origin: Origin::Raw,
        })
        .collect();
    for g in &images {
        let src = dataset
            .get(&g.provenance.source_id)
            .ok_or_else(|| diffss_core::Error::UnresolvedSource(g.provenance.source_id.clone()))?;
        samples.push(ProtoSample {
            id: g.provenance.image_id(),
            image: &g.image,
            mask: &src.mask,
            class_index: src.class_index(),
            origin: Origin::Generated,
        });
    }
    let (set, skipped) = prototype_set(&samples, &HandcraftedExtractor)?;
    let tsne = TsneConfig {
        perplexity: settings.perplexity.unwrap_or(TsneConfig::default().perplexity),
        ..Default::default()
    };
    let export = embed2d(&set, settings.reducer.unwrap_or(Reducer::Pca), settings.seed(), &tsne)?;

    let with_generated: BTreeSet<u32> = set
        .entries
        .iter()
        .filter(|e| e.origin == Origin::Generated)
        .map(|e| e.class_index)
        .collect();
    let paired = PrototypeSet {
        entries: set
            .entries
            .iter()
            .filter(|e| with_generated.contains(&e.class_index))
            .cloned()
            .collect(),
    };
    let consistency = if paired.is_empty() {
        BTreeMap::new()
    } else {
        consistency_score(&paired)?
    };
    let summary = ProtoSummary {
        prototypes: set.len(),
        skipped,
        consistency,
    };
    io::write_atomic(&out.join("embedding.csv"), export.to_csv()?.as_bytes())?;
    io::write_atomic(&out.join("embedding.svg"), export.to_svg().as_bytes())?;
    io::write_json(&out.join("embedding.json"), &export)?;
    io::write_json(&out.join("consistency.json"), &summary)?;
    common::write_fingerprint(&out, "proto", settings)?;
    Ok((export, summary))
}
