use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diffss_core::condition_gen::{ConditionImage, ConditionKind, ConditionRecord, ControlCondition};
use diffss_core::episodes::{self, Dataset, DatasetKind, Phase, SplitSpec};
use diffss_core::imaging;
use diffss_core::io;
use diffss_core::refseg::{FssModel, ReferenceModel, SubprocessModel};
use diffss_core::Error;

use crate::error::{CliError, CliResult};
use crate::settings::Settings;

pub const FINGERPRINT_FILE: &str = "run.toml";
pub const CONDITIONS_FILE: &str = "conditions.jsonl";

/// Writes `run.toml`: the resolved settings, loadable again with `--config`.
pub fn write_fingerprint(out: &Path, command: &str, settings: &Settings) -> CliResult<()> {
    let mut s = settings.clone();
    s.config = None;
    let text = format!(
        "# diffss {command} ({})\n{}",
        env!("CARGO_PKG_VERSION"),
        s.to_toml()
    );
    io::write_atomic(&out.join(FINGERPRINT_FILE), text.as_bytes())?;
    Ok(())
}

pub fn out_dir(settings: &Settings) -> CliResult<PathBuf> {
    let out = Settings::require(&settings.out, "out")?.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

pub fn thread_pool(settings: &Settings) -> CliResult<rayon::ThreadPool> {
    let workers = settings.workers.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))
}

pub fn load_dataset(settings: &Settings) -> CliResult<Dataset> {
    let manifest = Settings::existing(&settings.dataset, "dataset")?;
    Ok(Dataset::load(&manifest, settings.dataset_kind())?)
}

/// One split per evaluated fold.
pub fn splits(settings: &Settings, dataset: &Dataset) -> CliResult<Vec<SplitSpec>> {
    let kind = settings.dataset_kind();
    let phase = settings.phase.unwrap_or(Phase::Test);
    let folds: Vec<u32> = match settings.fold {
        Some(f) if f >= kind.folds() => {
            return Err(Error::FoldOutOfRange {
                fold: f,
                folds: kind.folds(),
            }
            .into())
        }
        Some(f) => vec![f],
        None => (0..kind.folds()).collect(),
    };
    folds
        .into_iter()
        .map(|fold| {
            Ok(match kind {
                DatasetKind::Pascal5i | DatasetKind::Minicoco20i => SplitSpec::benchmark(kind, fold, phase)?,
                DatasetKind::Fss1000 => fss1000_split(settings, dataset, phase)?,
                DatasetKind::Custom => SplitSpec {
                    dataset: kind,
                    fold,
                    phase,
                    classes: settings.classes.clone().unwrap_or_else(|| dataset.classes()),
                },
            })
        })
        .collect()
}

fn fss1000_split(settings: &Settings, dataset: &Dataset, phase: Phase) -> CliResult<SplitSpec> {
    let list = Settings::existing(&settings.class_list, "class-list")?;
    let names = episodes::read_class_list(&list)?;
    let split = episodes::split_fss1000(&names)?;
    let wanted = match phase {
        Phase::Train => &split.train,
        Phase::Val => &split.val,
        Phase::Test => &split.test,
    };
    let index: BTreeMap<&str, u32> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i as u32 + 1))
        .collect();
    let mut classes: Vec<u32> = wanted.iter().map(|n| index[n.as_str()]).collect();
    classes.sort_unstable();
    let known = dataset.classes();
    classes.retain(|c| known.contains(c));
    Ok(SplitSpec {
        dataset: DatasetKind::Fss1000,
        fold: 0,
        phase,
        classes,
    })
}

pub fn build_model(settings: &Settings) -> CliResult<Box<dyn FssModel>> {
    let spec = settings.model.as_deref().unwrap_or("reference");
    if spec == "reference" {
        return Ok(Box::new(ReferenceModel::default()));
    }
    if let Some(cmd) = spec.strip_prefix("subprocess:") {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| CliError::Config("--model subprocess: needs a program".into()))?;
        return Ok(Box::new(SubprocessModel {
            program,
            args: parts.collect(),
        }));
    }
    Err(CliError::Config(format!("unknown model `{spec}`")))
}

pub fn read_conditions(dir: &Path) -> CliResult<Vec<ConditionRecord>> {
    let path = dir.join(CONDITIONS_FILE);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "{} holds no {CONDITIONS_FILE}",
            dir.display()
        )));
    }
    Ok(io::read_jsonl(&path)?)
}

pub fn load_condition(dir: &Path, rec: &ConditionRecord) -> CliResult<ControlCondition> {
    let path = dir.join(&rec.path);
    let image = match rec.kind {
        ConditionKind::Segmap => ConditionImage::Rgb(imaging::load_rgb(&path)?),
        _ => ConditionImage::Gray(imaging::load_gray(&path)?),
    };
    Ok(ControlCondition {
        kind: rec.kind,
        image,
        prompt: rec.prompt.clone(),
        source_id: rec.source_id.clone(),
    })
}
