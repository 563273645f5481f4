use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use diffss_core::condition_gen::ConditionKind;
use diffss_core::episodes::{DatasetKind, Phase};
use diffss_core::proto_analysis::Reducer;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Which guidance kinds a command touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Guidance {
    One(ConditionKind),
    #[default]
    All,
}

impl Guidance {
    pub fn kinds(self) -> Vec<ConditionKind> {
        match self {
            Self::One(k) => vec![k],
            Self::All => ConditionKind::ALL.to_vec(),
        }
    }
}

impl FromStr for Guidance {
    type Err = diffss_core::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            Ok(Self::All)
        } else {
            s.parse().map(Self::One)
        }
    }
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::One(k) => write!(f, "{k}"),
            Self::All => f.write_str("all"),
        }
    }
}

impl Serialize for Guidance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Guidance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmenterKind {
    Oracle,
    Reference,
}

impl FromStr for SegmenterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "reference" => Ok(Self::Reference),
            other => Err(format!("unknown segmenter `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthLayout {
    /// Texture images with masks and a manifest.
    Texture,
    /// Image-free train/val manifests for the MiniCOCO builder.
    Coco,
}

impl FromStr for SynthLayout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "texture" => Ok(Self::Texture),
            "coco" => Ok(Self::Coco),
            other => Err(format!("unknown layout `{other}`")),
        }
    }
}

/// Every knob of every subcommand. The same keys are accepted as flags and
/// in the flat TOML config; flags win.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Flat TOML file with the same keys as the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Dataset manifest (JSONL).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub dataset_kind: Option<DatasetKind>,
    /// Ordered class-name list, required for fss1000.
    #[arg(long)]
    pub class_list: Option<PathBuf>,
    /// Explicit class set for custom datasets.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<u32>>,
    #[arg(long)]
    pub fold: Option<u32>,
    #[arg(long)]
    pub phase: Option<Phase>,
    #[arg(long)]
    pub guidance: Option<Guidance>,
    #[arg(long)]
    pub n_aux: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Episodes per fold.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Also evaluate a true K-shot run with this many real supports.
    #[arg(long)]
    pub reference_shots: Option<usize>,

    #[arg(long, env = "DIFFSS_GENERATOR_URL")]
    pub backend_url: Option<String>,
    #[arg(long, env = "DIFFSS_HED_URL")]
    pub hed_url: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory written by `conditions`.
    #[arg(long)]
    pub conditions: Option<PathBuf>,
    /// Generated-image store written by `generate`.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Log and skip failing items instead of stopping at the first one.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub keep_going: Option<bool>,

    #[arg(long)]
    pub threshold: Option<u8>,
    #[arg(long)]
    pub detect_long_side: Option<u32>,
    #[arg(long)]
    pub prompt_template: Option<String>,

    /// `reference`, or `subprocess:<program> [args..]`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub segmenter: Option<SegmenterKind>,
    /// Drop generated images whose drift IoU is below this value.
    #[arg(long)]
    pub floor: Option<f64>,
    #[arg(long)]
    pub reducer: Option<Reducer>,
    #[arg(long)]
    pub perplexity: Option<f64>,

    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Validation pool for MiniCOCO top-up (defaults to --val).
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub min_val: Option<usize>,

    #[arg(long)]
    pub layout: Option<SynthLayout>,
    #[arg(long)]
    pub images_per_class: Option<u32>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($field:ident),* $(,)?) => {
        $( if $dst.$field.is_none() { $dst.$field = $src.$field; } )*
    };
}

impl Settings {
    /// Flags first, then the config file named by `--config`.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let file = Self::read_file(&path)?;
        overlay!(self, file;
            dataset, dataset_kind, class_list, classes, fold, phase, guidance, n_aux, seed,
            episodes, reference_shots, backend_url, hed_url, workers, out, conditions, store,
            keep_going, threshold, detect_long_side, prompt_template, model, segmenter, floor,
            reducer, perplexity, train, val, pool, ratio, min_val, layout, images_per_class,
        );
        Ok(self)
    }

    pub fn read_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize to toml")
    }

    pub fn keep_going(&self) -> bool {
        self.keep_going.unwrap_or(false)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn dataset_kind(&self) -> DatasetKind {
        self.dataset_kind.unwrap_or(DatasetKind::Custom)
    }

    pub fn guidance(&self) -> Guidance {
        self.guidance.unwrap_or_default()
    }

    pub fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("--{flag} is required")))
    }

    pub fn existing(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
        let p = Self::require(path, flag)?;
        if !p.exists() {
            return Err(CliError::Config(format!(
                "--{flag}: {} does not exist",
                p.display()
            )));
        }
        Ok(p.clone())
    }
}
