//! Command-line front end: synthesize bundles, run the experiment grid, and
//! extract broadband envelopes from raw audio.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aad_lab::dataset::save_bundle;
use aad_lab::error::Error;
use aad_lab::experiment::{run_experiment, ExperimentSpec};
use aad_lab::signal::{envelope_pipeline, EnvelopePipelineConfig, Waveform};
use aad_lab::synth::gen_bundle;

const OUT_ENV_VAR: &str = "AAD_LAB_OUT";

#[derive(Parser)]
#[command(name = "aad-lab", about = "Auditory attention decoding lab on synthetic EEG", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment spec (TOML). Omit to use built-in defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory. Falls back to the spec's out_dir, then $AAD_LAB_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the spec's seed list with a single seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a trial bundle and write it to disk.
    Synth(SpecArgs),
    /// Run the full grid: train, evaluate, compare, report.
    Run {
        #[command(flatten)]
        spec: SpecArgs,
        /// Concurrent grid cells; 0 = one per logical CPU.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Reuse completed grid cells from a previous run.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        resume: bool,
    },
    /// Extract a 128 Hz broadband envelope from mono audio.
    Envelope {
        /// Headerless 32-bit little-endian float mono audio.
        #[arg(long, required_unless_present = "tone_seconds")]
        audio: Option<PathBuf>,
        /// Sample rate of the input audio in Hz.
        #[arg(long)]
        rate: f64,
        /// Generate a 1 kHz test tone of this length instead of reading audio.
        #[arg(long)]
        tone_seconds: Option<f64>,
        /// Output file: envelope as 32-bit little-endian floats.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_spec(args: &SpecArgs) -> Result<ExperimentSpec, Error> {
    let mut spec = match &args.spec {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = args.seed_override {
        spec.seeds = vec![seed];
    }
    Ok(spec)
}

fn resolve_out(args: &SpecArgs, spec: &ExperimentSpec) -> Result<PathBuf, Error> {
    if let Some(out) = &args.out {
        return Ok(out.clone());
    }
    if let Some(out) = &spec.out_dir {
        return Ok(out.clone());
    }
    if let Ok(root) = std::env::var(OUT_ENV_VAR) {
        return Ok(PathBuf::from(root));
    }
    Err(Error::Config(format!(
        "no output directory: pass --out, set out_dir in the spec, or set ${OUT_ENV_VAR}"
    )))
}

fn cmd_synth(args: &SpecArgs) -> Result<(), Error> {
    let spec = load_spec(args)?;
    let out = resolve_out(args, &spec)?;
    let bundle = gen_bundle(&spec.synth)?;
    save_bundle(&bundle, &out)?;
    let total_seconds: f64 =
        bundle.trials.iter().map(|t| t.n_samples as f64 / bundle.rate_hz).sum();
    println!("wrote {} trials, {:.1} s total, to {}", bundle.trials.len(), total_seconds, out.display());
    Ok(())
}

fn cmd_run(args: &SpecArgs, jobs: usize, resume: bool) -> Result<(), Error> {
    let spec = load_spec(args)?;
    let out = resolve_out(args, &spec)?;
    let result = run_experiment(&spec, &out, jobs, resume)?;
    println!(
        "{} cells ({} failed); report in {}",
        result.n_cells,
        result.n_failed,
        result.out_dir.display()
    );
    for row in &result.table.rows {
        println!(
            "  {} / {} / {} s: accuracy {:.4}, DeltaPCC {:.4}",
            row.family, row.loss, row.window_seconds, row.accuracy, row.mean_delta
        );
    }
    if let Some(imp) = result.relative_improvement {
        println!("  relative DeltaPCC improvement: {:.2}%", 100.0 * imp);
    }
    Ok(())
}

fn read_audio_f32(path: &Path, rate: f64) -> Result<Waveform, Error> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::CorruptBundle {
            file: path.display().to_string(),
            reason: "length not a multiple of 4 bytes".into(),
        });
    }
    let samples: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Waveform::new(samples, rate)
}

fn cmd_envelope(
    audio: Option<&Path>,
    rate: f64,
    tone_seconds: Option<f64>,
    out: &Path,
) -> Result<(), Error> {
    let wave = match (audio, tone_seconds) {
        (_, Some(seconds)) => {
            let n = (seconds * rate).round() as usize;
            let samples = (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / rate).sin())
                .collect();
            Waveform::new(samples, rate)?
        }
        (Some(path), None) => read_audio_f32(path, rate)?,
        (None, None) => return Err(Error::Config("need --audio or --tone-seconds".into())),
    };
    let cfg = EnvelopePipelineConfig::default();
    let env = envelope_pipeline(&wave, &cfg)?;
    let bytes: Vec<u8> = env.samples.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    std::fs::write(out, bytes)?;
    println!(
        "{} subbands; wrote {} samples at {} Hz to {}",
        cfg.n_bands,
        env.len(),
        env.rate_hz,
        out.display()
    );
    Ok(())
}

/// Exit codes: 0 success, 1 runtime failure, 2 usage/spec error.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::SpecParse(_) | Error::InvalidSpec(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with code 2 on bad usage
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Run { spec, jobs, resume } => cmd_run(spec, *jobs, *resume),
        Command::Envelope { audio, rate, tone_seconds, out } => {
            cmd_envelope(audio.as_deref(), *rate, *tone_seconds, out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
