//! Subcommands of the `diffss` tool. Each one reads a [`Settings`], writes
//! its artifacts plus a `run.toml` fingerprint into `--out`, and reports
//! failures through [`CliError::exit_code`].

pub mod analysis;
pub mod common;
pub mod conditions;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod generate;
pub mod settings;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};
pub use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "diffss", version, about = "Diffusion-augmented few-shot segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Derive seg-map, boundary and scribble conditions from a manifest.
    Conditions(Settings),
    /// Generate auxiliary images from stored conditions (resumable).
    Generate(Settings),
    /// Score 1-shot, augmented and optional K-shot runs; emit reports and gains.
    Evaluate(Settings),
    /// Measure generation drift of a store against its source masks.
    Drift(Settings),
    /// Export 2D prototype embeddings and consistency scores.
    Proto(Settings),
    /// Build a stratified MiniCOCO subset.
    Minicoco(Settings),
    /// Write a seeded synthetic dataset.
    Synth(Settings),
}

impl Command {
    pub fn settings(&self) -> &Settings {
        match self {
            Self::Conditions(s)
            | Self::Generate(s)
            | Self::Evaluate(s)
            | Self::Drift(s)
            | Self::Proto(s)
            | Self::Minicoco(s)
            | Self::Synth(s) => s,
        }
    }
}

pub fn execute(command: &Command) -> CliResult<()> {
    let settings = command.settings().clone().resolve()?;
    match command {
        Command::Conditions(_) => {
            let s = conditions::run(&settings)?;
            println!("{} conditions written, {} failed", s.written, s.failed);
        }
        Command::Generate(_) => {
            let s = generate::run(&settings)?;
            println!("{} generated, {} sources skipped, {} in store", s.generated, s.skipped, s.total);
        }
        Command::Evaluate(_) => {
            let o = evaluate::run(&settings)?;
            print!("{}", o.baseline.to_table());
            for (kind, r) in &o.augmented {
                print!("{}", r.to_table());
                if let Some(g) = o.gains.iter().find(|g| g.guidance == *kind) {
                    println!("gain ({kind}): {}", g.summary);
                }
            }
        }
        Command::Drift(_) => print!("{}", analysis::drift(&settings)?.to_table()),
        Command::Proto(_) => {
            let (_, s) = analysis::proto(&settings)?;
            println!("{} prototypes ({} skipped)", s.prototypes, s.skipped);
            for (class, score) in &s.consistency {
                println!("class {class}: consistency {score:.4}");
            }
        }
        Command::Minicoco(_) => {
            let m = minicoco_summary(&data::minicoco(&settings)?);
            println!("{m}");
        }
        Command::Synth(_) => println!("{}", data::synth(&settings)?.display()),
    }
    Ok(())
}

fn minicoco_summary(m: &diffss_core::episodes::MiniCoco) -> String {
    format!(
        "{} train / {} val images ({} topped up)",
        m.meta.train_images,
        m.meta.val_images,
        m.meta.topped_up.len()
    )
}
