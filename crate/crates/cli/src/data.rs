use std::path::PathBuf;

use diffss_core::episodes::{build_minicoco, ManifestRecord, MiniCoco, MiniCocoConfig};
use diffss_core::io;
use diffss_core::synth::{synthetic_manifest, write_texture_dataset, ManifestConfig, TextureConfig};

use crate::common;
use crate::error::CliResult;
use crate::settings::{Settings, SynthLayout};

pub fn minicoco(settings: &Settings) -> CliResult<MiniCoco> {
    let train_path = Settings::existing(&settings.train, "train")?;
    let val_path = Settings::existing(&settings.val, "val")?;
    let pool_path = match &settings.pool {
        Some(_) => Settings::existing(&settings.pool, "pool")?,
        None => val_path.clone(),
    };
    let defaults = MiniCocoConfig::default();
    let cfg = MiniCocoConfig {
        ratio: settings.ratio.unwrap_or(defaults.ratio),
        seed: settings.seed(),
        min_val_per_class: settings.min_val.unwrap_or(defaults.min_val_per_class),
    };
    let train: Vec<ManifestRecord> = io::read_jsonl(&train_path)?;
    let val: Vec<ManifestRecord> = io::read_jsonl(&val_path)?;
    let pool: Vec<ManifestRecord> = io::read_jsonl(&pool_path)?;
    let out = common::out_dir(settings)?;
    let mini = build_minicoco(&train, &val, &pool, &cfg)?;
    io::write_jsonl(&out.join("train.jsonl"), &mini.train)?;
    io::write_jsonl(&out.join("val.jsonl"), &mini.val)?;
    io::write_json(&out.join("meta.json"), &mini.meta)?;
    common::write_fingerprint(&out, "minicoco", settings)?;
    Ok(mini)
}

/// Writes a synthetic dataset and returns its main manifest.
pub fn synth(settings: &Settings) -> CliResult<PathBuf> {
    let out = common::out_dir(settings)?;
    let seed = settings.seed.unwrap_or(TextureConfig::default().seed);
    let path = match settings.layout.unwrap_or(SynthLayout::Texture) {
        SynthLayout::Texture => {
            let defaults = TextureConfig::default();
            let cfg = TextureConfig {
                classes: settings.classes.as_ref().map_or(defaults.classes, |c| c.len() as u32),
                images_per_class: settings.images_per_class.unwrap_or(defaults.images_per_class),
                seed,
                ..defaults
            };
            write_texture_dataset(&out, &cfg)?
        }
        SynthLayout::Coco => {
            let cfg = ManifestConfig {
                per_class: settings.images_per_class.unwrap_or(ManifestConfig::default().per_class),
                seed,
                ..Default::default()
            };
            let train = synthetic_manifest("t", &cfg);
            let val = synthetic_manifest(
                "v",
                &ManifestConfig {
                    per_class: (cfg.per_class / 5).max(1),
                    seed: seed.wrapping_add(1),
                    ..cfg.clone()
                },
            );
            io::write_jsonl(&out.join("val.jsonl"), &val)?;
            let p = out.join("train.jsonl");
            io::write_jsonl(&p, &train)?;
            p
        }
    };
    common::write_fingerprint(&out, "synth", settings)?;
    Ok(path)
}
