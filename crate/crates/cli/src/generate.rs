use diffss_core::condition_gen::ConditionRecord;
use diffss_core::generation::{DEFAULT_AUX_COUNT, 
    generate, GeneratedImage, GeneratedStore, GenerationRequest, Generator, HttpGenerator, MockGenerator,
};
use diffss_core::remote::RemoteConfig;
use rayon::prelude::*;

use crate::common;
use crate::error::{CliError, CliResult};
use crate::settings::Settings;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub generated: usize,
    pub skipped: usize,
    pub total: usize,
}

pub fn run(settings: &Settings) -> CliResult<GenerateSummary> {
    let cond_dir = Settings::existing(&settings.conditions, "conditions")?;
    let n_aux = settings.n_aux.unwrap_or(DEFAULT_AUX_COUNT);
    let records = common::read_conditions(&cond_dir)?;
    let kinds = settings.guidance().kinds();
    let dataset = match &settings.backend_url {
        None => Some(common::load_dataset(settings)?),
        Some(_) => None,
    };
    let backend: Box<dyn Generator> = match &settings.backend_url {
        Some(url) => Box::new(HttpGenerator::new(RemoteConfig::new(url.clone()), None)),
        None => Box::new(MockGenerator::default()),
    };
    let out = common::out_dir(settings)?;
    let mut store = GeneratedStore::open(&out)?;
    let seed = settings.seed();

    let todo: Vec<&ConditionRecord> = records
        .iter()
        .filter(|r| kinds.contains(&r.kind))
        .collect();
    let pending: Vec<&ConditionRecord> = todo
        .iter()
        .copied()
        .filter(|r| (1..=n_aux as u32).any(|k| !store.contains(&r.source_id, r.kind, k)))
        .collect();
    let skipped = todo.len() - pending.len();

    let pool = common::thread_pool(settings)?;
    let results: Vec<diffss_core::Result<Vec<GeneratedImage>>> = pool.install(|| {
        pending
            .par_iter()
            .map(|rec| {
                let cond = common::load_condition(&cond_dir, rec).map_err(|e| match e {
                    CliError::Core(e) => e,
                    other => diffss_core::Error::InvalidArgument(other.to_string()),
                })?;
                let mut req = GenerationRequest::new(cond, n_aux, seed);
                if let Some(ds) = &dataset {
                    let sample = ds
                        .get(&rec.source_id)
                        .ok_or_else(|| diffss_core::Error::UnresolvedSource(rec.source_id.clone()))?;
                    req = req.with_source(sample.image.clone(), sample.mask.clone());
                }
                generate(&req, backend.as_ref())
            })
            .collect()
    });

    let mut generated = 0;
    let mut first_err = None;
    for (r, rec) in results.into_iter().zip(&pending) {
        match r {
            Ok(images) => {
                for img in &images {
                    let p = &img.provenance;
                    if !store.contains(&p.source_id, p.kind, p.index) {
                        store.insert(img)?;
                        generated += 1;
                    }
                }
            }
            Err(e) => {
                log::error!("{} ({}): {e}", rec.source_id, rec.kind);
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    store.flush()?;
    common::write_fingerprint(&out, "generate", settings)?;
    if let Some(e) = first_err {
        return Err(e.into());
    }
    Ok(GenerateSummary {
        generated,
        skipped,
        total: store.len(),
    })
}
