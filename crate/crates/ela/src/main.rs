use clap::{Parser, Subcommand};
use ela::error::ElaError;
use ela::harness::{
    attack_stage, baseline_stage, gen_scenes, oracle_stage, report_stage, run_selftest,
    train_agent_stage, train_classifier_stage, train_ptn_stage, write_run_config, RunConfig,
};
use std::path::PathBuf;
use std::process::ExitCode;

/// Desk-scale simulator of laser attacks on traffic-sign classifiers:
/// synthetic drive-by scenes, a perspective-transformation perception model,
/// a PPO agent choosing laser parameters, and held-out victim classifiers.
#[derive(Parser)]
#[command(name = "ela", version, about)]
struct Cli {
    /// Optional `key = value` config file. Defaults apply for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a single config key, e.g. --set agent.epochs=20. Repeatable;
    /// applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Output directory for artifacts (and input directory for later stages).
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic scene corpus for every sign class.
    GenScenes,
    /// Train surrogate and victim classifiers on clean crops.
    TrainClassifier,
    /// Fit the perspective transformation network per attacked class.
    TrainPtn,
    /// Train the PPO laser agent against the surrogate ensemble.
    TrainAgent,
    /// Run the trained agent on held-out routes against the victims.
    Attack,
    /// Run the random, search, and static-pattern baselines.
    Baseline,
    /// Exhaustive fine-grid upper bound on a sample of test frames.
    Oracle,
    /// Aggregate a finished run directory into tables and a summary.
    Report,
    /// Check per-module invariants; fails on the first violation.
    Selftest,
    /// Print the effective config, its hash, and exit.
    Describe,
}

fn parse_sets(raw: &[String]) -> Result<Vec<(String, String)>, ElaError> {
    raw.iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| ElaError::Config(format!("--set needs KEY=VALUE, got `{s}`")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn run(cli: &Cli) -> Result<(), ElaError> {
    let overrides = parse_sets(&cli.sets)?;
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path, &overrides)?,
        None => RunConfig::from_overrides(&overrides)?,
    };
    let out = cli.out.as_path();
    match cli.command {
        Command::Selftest => return run_selftest(),
        Command::Describe => {
            print!("{}", cfg.canonical_text());
            println!("# hash: {}", cfg.hash());
            return Ok(());
        }
        Command::Report => return report_stage(out),
        _ => {}
    }
    write_run_config(&cfg, out)?;
    match cli.command {
        Command::GenScenes => gen_scenes(&cfg, out),
        Command::TrainClassifier => train_classifier_stage(&cfg, out),
        Command::TrainPtn => train_ptn_stage(&cfg, out),
        Command::TrainAgent => train_agent_stage(&cfg, out),
        Command::Attack => attack_stage(&cfg, out),
        Command::Baseline => baseline_stage(&cfg, out),
        Command::Oracle => oracle_stage(&cfg, out),
        Command::Report | Command::Selftest | Command::Describe => unreachable!(),
    }
}

fn main() -> ExitCode {
    // ELA_THREADS caps the global rayon pool; unset means rayon's default.
    if let Ok(v) = std::env::var("ELA_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ela: {e}");
            match e {
                ElaError::Config(_) | ElaError::Argument(_) | ElaError::Format { .. }
                | ElaError::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
