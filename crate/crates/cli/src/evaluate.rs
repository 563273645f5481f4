use std::collections::BTreeMap;
use std::path::Path;

use diffss_core::condition_gen::ConditionKind;
use diffss_core::episodes::{extend_episode, sample_episode, Episode, EpisodePool, SplitSpec};
use diffss_core::generation::{GeneratedStore, DEFAULT_AUX_COUNT};
use diffss_core::io;
use diffss_core::metrics::{gain, FoldReport, GainRecord, IouAccumulator, RunFingerprint};
use diffss_core::refseg::{segment_episode, FssModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::common;
use crate::error::{CliError, CliResult};
use crate::settings::Settings;

/// Runs fail when more than this fraction of episodes fail.
pub const MAX_FAILURE_RATE: f64 = 0.01;
pub const DEFAULT_EPISODES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub run: String,
    pub episode: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEntry {
    pub guidance: ConditionKind,
    pub summary: String,
    #[serde(flatten)]
    pub record: GainRecord,
}

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub baseline: FoldReport,
    pub augmented: BTreeMap<ConditionKind, FoldReport>,
    pub reference: Option<FoldReport>,
    pub gains: Vec<GainEntry>,
    pub failures: Vec<EpisodeFailure>,
}

struct Aux<'a> {
    store: &'a GeneratedStore,
    kind: ConditionKind,
    n_aux: usize,
}

struct FoldRun {
    acc: IouAccumulator,
    episodes: usize,
    failures: Vec<EpisodeFailure>,
}

fn run_fold(
    workers: &rayon::ThreadPool,
    pool: &EpisodePool<'_>,
    label: &str,
    count: usize,
    seed: u64,
    shots: usize,
    aux: Option<&Aux<'_>>,
    model: &dyn FssModel,
) -> CliResult<FoldRun> {
    let results: Vec<diffss_core::Result<(Episode, diffss_core::Result<diffss_core::BinaryMask>)>> =
        workers.install(|| {
            (0..count)
                .into_par_iter()
                .map(|i| {
                    let mut ep = sample_episode(pool, shots, seed.wrapping_add(i as u64))?;
                    if let Some(a) = aux {
                        let images = a.store.load_for(&ep.supports[0].id, a.kind, a.n_aux)?;
                        ep = extend_episode(&ep, &images)?;
                    }
                    let pred = segment_episode(&ep, model).map(|p| p.mask);
                    Ok((ep, pred))
                })
                .collect()
        });
    let mut acc = IouAccumulator::new();
    let mut failures = Vec::new();
    for r in results {
        let (ep, pred) = r?;
        match pred {
            Ok(mask) => acc.add(ep.class_index, &mask, &ep.query.mask)?,
            Err(e) => {
                log::warn!("{label}: {e}");
                failures.push(EpisodeFailure {
                    run: label.to_string(),
                    episode: ep.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(FoldRun {
        acc,
        episodes: count,
        failures,
    })
}

fn run_all(
    workers: &rayon::ThreadPool,
    pools: &[(SplitSpec, EpisodePool<'_>)],
    fingerprint: RunFingerprint,
    aux: Option<&Aux<'_>>,
    model: &dyn FssModel,
    failures: &mut Vec<EpisodeFailure>,
) -> CliResult<FoldReport> {
    let label = match aux {
        Some(a) => format!("augmented-{}", a.kind),
        None if fingerprint.shots == 1 => "baseline".to_string(),
        None => "reference".to_string(),
    };
    let mut folds = Vec::new();
    for (split, pool) in pools {
        let run = run_fold(
            workers,
            pool,
            &format!("{label}/fold-{}", split.fold),
            fingerprint.episodes_per_fold,
            fingerprint.seed,
            fingerprint.shots - fingerprint.n_aux,
            aux,
            model,
        )?;
        let failed = run.failures.len();
        failures.extend(run.failures);
        if failed as f64 > MAX_FAILURE_RATE * run.episodes as f64 {
            return Err(CliError::QualityGate(format!(
                "{label}: {failed} of {} episodes failed in fold {}",
                run.episodes, split.fold
            )));
        }
        folds.push((split.fold, run.acc, run.episodes, failed));
    }
    Ok(FoldReport::from_folds(fingerprint, folds)?)
}

fn write_report(dir: &Path, report: &FoldReport) -> CliResult<()> {
    io::write_json(&dir.join("report.json"), report)?;
    io::write_atomic(&dir.join("report.txt"), report.to_table().as_bytes())?;
    io::write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    Ok(())
}

pub fn run(settings: &Settings) -> CliResult<EvaluateOutcome> {
    let dataset = common::load_dataset(settings)?;
    let n_aux = settings
        .n_aux
        .unwrap_or(if settings.store.is_some() { DEFAULT_AUX_COUNT } else { 0 });
    let store = if n_aux > 0 {
        Some(GeneratedStore::open(Settings::existing(&settings.store, "store")?)?)
    } else {
        None
    };
    let model = common::build_model(settings)?;
    let splits = common::splits(settings, &dataset)?;
    let episodes = settings.episodes.unwrap_or(DEFAULT_EPISODES);
    if episodes == 0 {
        return Err(CliError::Config("--episodes must be positive".into()));
    }
    let out = common::out_dir(settings)?;
    let workers = common::thread_pool(settings)?;
    let pools: Vec<(SplitSpec, EpisodePool<'_>)> = splits
        .into_iter()
        .map(|s| (s.clone(), EpisodePool::new(&dataset, s)))
        .collect();

    let fp = |shots: usize, n_aux: usize, guidance: Option<ConditionKind>| RunFingerprint {
        dataset: format!(
            "{}:{}",
            settings.dataset_kind(),
            settings.dataset.as_deref().unwrap_or(Path::new("")).display()
        ),
        folds: pools.iter().map(|(s, _)| s.fold).collect(),
        shots,
        n_aux,
        guidance: guidance.map(|g| g.to_string()),
        model: model.id(),
        episodes_per_fold: episodes,
        seed: settings.seed(),
    };

    let mut failures = Vec::new();
    let outcome = (|| -> CliResult<EvaluateOutcome> {
        let baseline = run_all(&workers, &pools, fp(1, 0, None), None, model.as_ref(), &mut failures)?;
        write_report(&out.join("baseline"), &baseline)?;

        let reference = match settings.reference_shots {
            Some(k) if k > 1 => {
                let r = run_all(&workers, &pools, fp(k, 0, None), None, model.as_ref(), &mut failures)?;
                write_report(&out.join("reference"), &r)?;
                Some(r)
            }
            Some(k) => {
                return Err(CliError::Config(format!(
                    "--reference-shots must exceed 1, got {k}"
                )))
            }
            None => None,
        };

        let mut augmented = BTreeMap::new();
        let mut gains = Vec::new();
        if let Some(store) = &store {
            for kind in settings.guidance().kinds() {
                let aux = Aux { store, kind, n_aux };
                let report = run_all(
                    &workers,
                    &pools,
                    fp(1 + n_aux, n_aux, Some(kind)),
                    Some(&aux),
                    model.as_ref(),
                    &mut failures,
                )?;
                write_report(&out.join(format!("augmented-{kind}")), &report)?;
                let record = gain(&baseline, &report, reference.as_ref())?;
                log::info!("{kind}: {}", record.format());
                gains.push(GainEntry {
                    guidance: kind,
                    summary: record.format(),
                    record,
                });
                augmented.insert(kind, report);
            }
            io::write_json(&out.join("gain.json"), &gains)?;
        }
        Ok(EvaluateOutcome {
            baseline,
            augmented,
            reference,
            gains,
            failures: Vec::new(),
        })
    })();
    io::write_jsonl(&out.join("failures.jsonl"), &failures)?;
    common::write_fingerprint(&out, "evaluate", settings)?;
    let mut outcome = outcome?;
    outcome.failures = failures;
    Ok(outcome)
}
