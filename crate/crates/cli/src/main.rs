//! `relight`: light-stage simulation, training-pair synthesis, training,
//! inference and evaluation for the portrait relighting network.

mod commands;

use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use commands::*;

#[derive(Parser)]
#[command(name = "relight", version, about = "Single-image portrait relighting pipeline")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print the resolved configuration as JSON on standard output.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a light-stage layout.
    GenStage(GenStage),
    /// Render a synthetic OLAT set of a shaded sphere.
    RenderOlat(RenderOlat),
    /// Project an environment map onto a light stage's LEDs.
    ProjectEnv(ProjectEnv),
    /// Synthesize training or validation pairs.
    SynthPairs(SynthPairs),
    /// Train the network on a synthesized dataset.
    Train(Train),
    /// Relight an image under a target environment.
    Relight(Relight),
    /// Re-render an image under its own estimated light, rotated.
    Retarget(Retarget),
    /// Estimate the light of an image.
    EstimateLight(EstimateLight),
    /// Score a checkpoint on a dataset.
    Eval(Eval),
    /// Check analytic gradients against finite differences.
    Gradcheck(Gradcheck),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use relight_core::ErrorKind;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<relight_core::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Io => 2,
                ErrorKind::Numeric => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<relight_autodiff::TensorError>() {
            return if matches!(e, relight_autodiff::TensorError::NonFinite { .. }) { 3 } else { 1 };
        }
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("RELIGHT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| relight_core::Error::InvalidArgument(format!("RELIGHT_THREADS={value:?} is not a count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

/// One-line echo on standard error; full JSON on standard output with `--verbose`.
fn echo<T: Serialize>(name: &str, seed: u64, verbose: bool, args: &T) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct Resolved<'a, T> {
        command: &'a str,
        seed: u64,
        threads: usize,
        #[serde(flatten)]
        args: &'a T,
    }
    let resolved = Resolved {
        command: name,
        seed,
        threads: rayon::current_num_threads(),
        args,
    };
    eprintln!("relight {name}: {}", serde_json::to_string(&resolved)?);
    if verbose {
        println!("{}", serde_json::to_string_pretty(&resolved)?);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let (seed, verbose) = (cli.seed, cli.verbose);
    macro_rules! dispatch {
        ($($variant:ident => $name:literal),* $(,)?) => {
            match cli.command {
                $(Command::$variant(args) => {
                    echo($name, seed, verbose, &args)?;
                    args.run(seed)
                })*
            }
        };
    }
    dispatch!(
        GenStage => "gen-stage",
        RenderOlat => "render-olat",
        ProjectEnv => "project-env",
        SynthPairs => "synth-pairs",
        Train => "train",
        Relight => "relight",
        Retarget => "retarget",
        EstimateLight => "estimate-light",
        Eval => "eval",
        Gradcheck => "gradcheck",
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
