use diffss_core::condition_gen::{
    build_condition, ConditionConfig, ConditionKind, ConditionRecord, EdgeDetector, GradientEdgeDetector,
    HedServiceDetector, Palette, ScribbleConfig, DEFAULT_PROMPT_TEMPLATE,
};
use diffss_core::episodes::Sample;
use diffss_core::io;
use diffss_core::remote::RemoteConfig;
use rayon::prelude::*;

use crate::common::{self, CONDITIONS_FILE};
use crate::error::{CliError, CliResult};
use crate::settings::Settings;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionsSummary {
    pub written: usize,
    pub failed: usize,
}

fn detector(settings: &Settings) -> Box<dyn EdgeDetector> {
    match &settings.hed_url {
        Some(url) => Box::new(HedServiceDetector::new(RemoteConfig::new(url.clone()))),
        None => Box::new(GradientEdgeDetector),
    }
}

pub fn condition_config(settings: &Settings) -> ConditionConfig {
    ConditionConfig {
        scribble: ScribbleConfig {
            threshold: settings.threshold.unwrap_or(ScribbleConfig::default().threshold),
        },
        detect_long_side: settings.detect_long_side,
        prompt_template: settings
            .prompt_template
            .clone()
            .unwrap_or_else(|| DEFAULT_PROMPT_TEMPLATE.to_string()),
    }
}

pub fn run(settings: &Settings) -> CliResult<ConditionsSummary> {
    let dataset = common::load_dataset(settings)?;
    let cfg = condition_config(settings);
    diffss_core::condition_gen::make_prompt("x", &cfg.prompt_template)?;
    let out = common::out_dir(settings)?;
    let kinds = settings.guidance().kinds();
    let detector = detector(settings);
    let palette = Palette::default();
    let pool = common::thread_pool(settings)?;

    let jobs: Vec<(&Sample, ConditionKind)> = dataset
        .samples
        .iter()
        .flat_map(|s| kinds.iter().map(move |&k| (s, k)))
        .collect();
    let results: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .map(|&(sample, kind)| -> diffss_core::Result<ConditionRecord> {
                let support = sample.to_support(sample.class_index());
                let cond = build_condition(&support, kind, detector.as_ref(), &cfg, &palette)?;
                let path = format!("{kind}/{}.png", sample.id);
                io::write_atomic(&out.join(&path), &cond.image.encode_png())?;
                Ok(ConditionRecord {
                    source_id: sample.id.clone(),
                    kind,
                    threshold: cfg.scribble.threshold,
                    detector: detector.id(),
                    detect_long_side: cfg.detect_long_side,
                    prompt: cond.prompt,
                    path,
                })
            })
            .collect()
    });

    let mut records = Vec::with_capacity(results.len());
    let mut failed = 0;
    for (r, (sample, kind)) in results.into_iter().zip(&jobs) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) if settings.keep_going() && !e.is_backend() => {
                log::warn!("{} ({kind}): {e}", sample.id);
                failed += 1;
            }
            Err(e) => return Err(CliError::Core(e)),
        }
    }
    records.sort_by(|a, b| (a.kind, &a.source_id).cmp(&(b.kind, &b.source_id)));
    io::write_jsonl(&out.join(CONDITIONS_FILE), &records)?;
    common::write_fingerprint(&out, "conditions", settings)?;
    log::info!("{} conditions written, {failed} failed", records.len());
    Ok(ConditionsSummary {
        written: records.len(),
        failed,
    })
}
