//! Command-line interface: config-driven pipeline stages under one
//! experiment directory.

mod config;
mod exp;
mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{ExperimentConfig, HitmapConfig, ModelConfig, Paths, SplitCounts, SynthConfig};
pub use exp::{sha256_file, Experiment, StageManifest, MANIFEST};
pub use stages::{
    cmd_evaluate, cmd_finetune, cmd_gen_labels, cmd_hitmap, cmd_patch, cmd_predict_slides, cmd_synth,
    cmd_train_detector, cmd_train_subtyper, evaluate_slides, Context, SlidePredictions, SlideRegistry, Slides,
    REGISTRY,
};

use crate::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_UPSTREAM: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "minpoint", version, about = "Point-annotated RCC detection and subtyping pipeline")]
pub struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the experiment directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing stage outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Override any config field, e.g. `--set detector.epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate synthetic slides with ground truth and point annotations.
    Synth,
    /// Extract patch manifests for detection and subtyping.
    Patch,
    /// Train one binary detector per subtype.
    TrainDetector,
    /// Fine-tune SSL detectors on the extension slides.
    Finetune,
    /// Render detector hit-maps for validation and test slides.
    Hitmap,
    /// Label subtype training patches with the detectors.
    GenLabels,
    /// Train the subtype classifier.
    TrainSubtyper,
    /// Slide-level subtype predictions for the test slides.
    PredictSlides,
    /// Metrics report for predictions and detectors.
    Evaluate,
    /// Print the effective config and exit.
    ShowConfig,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) | Error::HashMismatch(_) | Error::SlideNotFound(_) => EXIT_MISSING_UPSTREAM,
        _ => EXIT_FAILURE,
    }
}

/// Resolves the config file plus flag overrides.
pub fn resolve_config(cli: &Cli) -> crate::Result<ExperimentConfig> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("paths.out={}", toml::Value::String(out.display().to_string())));
    }
    match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => {
            log::info!("no --config given, using built-in defaults");
            ExperimentConfig::from_toml_with_overrides("", &overrides)
        }
    }
}

pub fn run_command(ctx: &Context, command: Command) -> crate::Result<()> {
    match command {
        Command::Synth => cmd_synth(ctx),
        Command::Patch => {
            let summary = cmd_patch(ctx)?;
            print!("{summary}");
            Ok(())
        }
        Command::TrainDetector => cmd_train_detector(ctx),
        Command::Finetune => cmd_finetune(ctx),
        Command::Hitmap => cmd_hitmap(ctx),
        Command::GenLabels => cmd_gen_labels(ctx),
        Command::TrainSubtyper => cmd_train_subtyper(ctx),
        Command::PredictSlides => cmd_predict_slides(ctx),
        Command::Evaluate => {
            let report = cmd_evaluate(ctx)?;
            for (name, b) in &report.blocks {
                let auc = b.auc.map(|a| format!("  auc {a:.4}")).unwrap_or_default();
                println!("{name:<12} macro_f1 {:.4}  weighted_f1 {:.4}{auc}", b.metrics.macro_f1, b.metrics.weighted_f1);
            }
            Ok(())
        }
        Command::ShowConfig => unreachable!("handled before the experiment is opened"),
    }
}

/// Parses arguments, runs one command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let cfg = match resolve_config(&cli).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if cli.command == Command::ShowConfig {
        print!("{}", cfg.to_toml());
        return 0;
    }
    let result = Context::new(cfg, cli.force).and_then(|ctx| run_command(&ctx, cli.command));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from(["minpoint", "patch", "--seed", "9", "--out", "x/y", "--set", "subtype.mu=1"]).unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.paths.out, PathBuf::from("x/y"));
        assert_eq!(cfg.subtype.mu, 1.0);
        assert_eq!(cli.command, Command::Patch);
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::MissingArtifact("x".into())), 3);
        assert_eq!(exit_code(&Error::HashMismatch("x".into())), 3);
        assert_eq!(exit_code(&Error::Empty("x".into())), 1);
    }

    #[test]
    fn bad_config_file_exits_two() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("c.toml");
        std::fs::write(&p, "[ssl]\nt = 3.0\n").unwrap();
        let code = main_with_args(["minpoint", "synth", "--config", p.to_str().unwrap()]);
        assert_eq!(code, 2);
    }
}
