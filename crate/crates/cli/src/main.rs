use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gelvec::study::{
    load_manifest, report_table, run_eval, run_featurize, run_normalize, run_pipeline, run_predict,
    run_refs, run_synth, run_train, ModeChoice, StudyError, StudyManifest,
};

/// Gel-image diagnosis pipeline: synthesize, register, vectorize, classify.
#[derive(Parser)]
#[command(name = "gelvec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic cohort described by the manifest.
    Synth(Common),
    /// Resolve reference points for every image.
    Refs(Common),
    /// Map every image into the canonical frame and crop the ROI.
    Normalize(Common),
    /// Turn normalized ROIs into feature vectors.
    Featurize(Staged),
    /// Train the final classifier on all labelled samples.
    Train(Staged),
    /// Apply the trained classifier to the feature file.
    Predict(Staged),
    /// Cross-validate and write the report.
    Eval(Staged),
    /// Run every stage in order.
    Pipeline(Staged),
}

#[derive(Args)]
struct Common {
    /// Study manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Master seed, overriding the manifest.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Staged {
    #[command(flatten)]
    common: Common,
    /// Run both whole-rectangle and chosen-spot representations.
    #[arg(long)]
    compare: bool,
}

fn load(common: &Common) -> Result<StudyManifest, StudyError> {
    let mut manifest = load_manifest(&common.manifest)?;
    if let Some(seed) = common.seed {
        manifest.set_seed(seed);
    }
    if let Some(out) = &common.out {
        manifest.output_dir = std::env::current_dir()
            .map(|cwd| cwd.join(out))
            .unwrap_or_else(|_| out.clone());
    }
    Ok(manifest)
}

fn load_staged(staged: &Staged) -> Result<StudyManifest, StudyError> {
    let mut manifest = load(&staged.common)?;
    if staged.compare {
        if manifest.representation.seeds.is_empty() {
            return Err(StudyError::Schema {
                key: "representation.seeds".into(),
                msg: "--compare needs chosen-spot seeds".into(),
            });
        }
        manifest.representation.mode = ModeChoice::Compare;
    }
    Ok(manifest)
}

fn run(command: Command) -> Result<(), StudyError> {
    match command {
        Command::Synth(c) => {
            let n = run_synth(&load(&c)?)?;
            println!("synthesized {n} images");
        }
        Command::Refs(c) => {
            let refs = run_refs(&load(&c)?)?;
            println!("resolved references for {} images", refs.images.len());
        }
        Command::Normalize(c) => {
            let n = run_normalize(&load(&c)?)?;
            println!("normalized {n} images");
        }
        Command::Featurize(s) => {
            let m = load_staged(&s)?;
            for matrix in run_featurize(&m, &m.representation.modes())? {
                println!(
                    "{}: {} samples, dim {}",
                    matrix.mode.name(),
                    matrix.samples.len(),
                    matrix.dim
                );
            }
        }
        Command::Train(s) => {
            let m = load_staged(&s)?;
            run_train(&m, &m.representation.modes())?;
            println!("model written to {}", m.out_dir().display());
        }
        Command::Predict(s) => {
            let m = load_staged(&s)?;
            let modes = m.representation.modes();
            for (mode, predictions) in modes.iter().zip(run_predict(&m, &modes)?) {
                let positive = predictions.iter().filter(|p| p.predicted > 0).count();
                println!(
                    "{}: {} of {} predicted positive",
                    mode.name(),
                    positive,
                    predictions.len()
                );
            }
        }
        Command::Eval(s) => {
            let m = load_staged(&s)?;
            print!(
                "{}",
                report_table(&run_eval(&m, &m.representation.modes())?)
            );
        }
        Command::Pipeline(s) => {
            print!("{}", report_table(&run_pipeline(&load_staged(&s)?)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let usage_error = err.use_stderr();
            let _ = err.print();
            return ExitCode::from(if usage_error { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                log::error!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
