use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use amint::data::DatasetName;
use amint::eval::{build_report, collect_results};
use amint::experiment::{reproduce_plan, Chain, ExperimentConfig, Scale, Stage, Unit};
use amint::Error;
use clap::{Args, Parser, Subcommand};

/// Active and passive MINT experiments on small image classifiers.
///
/// Datasets are read from `dataset.root`, else `$AMINT_DATA_DIR`, else `./data`.
#[derive(Parser)]
#[command(name = "amint", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the audited model jointly with its MINT head.
    TrainActive(StageArgs),
    /// Train a MINT head against a frozen audited model.
    TrainPassive(StageArgs),
    /// Run the loss and confidence threshold attacks.
    RunMia(StageArgs),
    /// Aggregate every results.csv under a directory into report tables.
    Report(ReportArgs),
    /// Run the whole experiment grid and write the report.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct StageArgs {
    /// TOML experiment config; without it the `--scale` preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "smoke")]
    scale: Scale,
    /// Dataset of the preset when no config is given.
    #[arg(long, default_value = "mnist")]
    dataset: DatasetName,
    /// Accepted for symmetry; a single stage runs on one thread.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory searched recursively for results.csv files.
    #[arg(long)]
    results: PathBuf,
    /// Where report.txt and report.csv go; defaults to `--results`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "smoke")]
    scale: Scale,
    /// First of the three run seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent chains run as this many child processes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Rerun units that already finished.
    #[arg(long)]
    force: bool,
    /// Only print the plan.
    #[arg(long)]
    dry_run: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Resolution(_) => 2,
        _ => 3,
    }
}

fn stage_config(a: &StageArgs) -> amint::Result<ExperimentConfig> {
    if a.jobs == 0 {
        return Err(Error::config("--jobs", "must be positive"));
    }
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(a.scale, a.dataset, 0),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn run_stage(stage: Stage, a: &StageArgs) -> amint::Result<()> {
    let cfg = stage_config(a)?;
    let records = amint::experiment::run_stage(stage, &cfg, &a.out)?;
    for r in records {
        println!(
            "{} {} {} seed={} mint_acc={:.4} audited_acc={:.4}",
            r.method.as_str(),
            r.setup.map(|s| s.name()).unwrap_or("-"),
            r.dataset,
            r.seed,
            r.mint_acc,
            r.audited_acc
        );
    }
    Ok(())
}

fn report(results: &Path, out: &Path) -> amint::Result<()> {
    let rep = build_report(&collect_results(results)?)?;
    rep.write(out)?;
    print!("{}", rep.text);
    Ok(())
}

fn finished(unit: &Unit) -> bool {
    let Ok(text) = std::fs::read_to_string(unit.out.join("manifest.json")) else { return false };
    text.contains("\"finalized\": true") && unit.out.join("results.csv").is_file()
}

fn subcommand(stage: Stage) -> &'static str {
    match stage {
        Stage::Active => "train-active",
        Stage::Passive => "train-passive",
        Stage::Mia => "run-mia",
    }
}

fn run_unit(unit: &Unit, in_process: bool) -> amint::Result<()> {
    std::fs::create_dir_all(&unit.out)?;
    let cfg_path = unit.out.join("config.toml");
    std::fs::write(&cfg_path, unit.config.to_toml())?;
    log::info!("running {} -> {}", unit.stage.as_str(), unit.out.display());
    if in_process {
        amint::experiment::run_stage(unit.stage, &unit.config, &unit.out)?;
        return Ok(());
    }
    let exe = std::env::current_exe()?;
    let status = Command::new(exe).arg(subcommand(unit.stage)).arg("--config").arg(&cfg_path).arg("--out").arg(&unit.out).status()?;
    if !status.success() {
        return Err(Error::TrainingAborted(format!("{} exited with {status}", unit.out.display())));
    }
    Ok(())
}

fn reproduce(a: &ReproduceArgs) -> amint::Result<()> {
    if a.jobs == 0 {
        return Err(Error::config("--jobs", "must be positive"));
    }
    let data_root = std::env::var_os(amint::experiment::DATA_ENV).map(PathBuf::from);
    let chains = reproduce_plan(a.scale, &a.out, a.seed, data_root.as_deref());
    for chain in &chains {
        for u in chain {
            u.config.validate()?;
        }
    }
    if a.dry_run {
        for u in chains.iter().flatten() {
            println!("{} {}", u.stage.as_str(), u.out.display());
        }
        return Ok(());
    }
    let run_chain = |chain: &Chain, in_process: bool| -> amint::Result<()> {
        for u in chain {
            if !a.force && finished(u) {
                log::info!("skipping finished {}", u.out.display());
                continue;
            }
            run_unit(u, in_process)?;
        }
        Ok(())
    };
    if a.jobs == 1 {
        for chain in &chains {
            run_chain(chain, true)?;
        }
    } else {
        let next = AtomicUsize::new(0);
        let failures = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..a.jobs.min(chains.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(chain) = chains.get(i) else { break };
                    if let Err(e) = run_chain(chain, false) {
                        failures.lock().unwrap().push(e.to_string());
                    }
                });
            }
        });
        let failures = failures.into_inner().unwrap();
        if !failures.is_empty() {
            return Err(Error::TrainingAborted(failures.join("; ")));
        }
    }
    report(&a.out, &a.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::TrainActive(a) => run_stage(Stage::Active, a),
        Cmd::TrainPassive(a) => run_stage(Stage::Passive, a),
        Cmd::RunMia(a) => run_stage(Stage::Mia, a),
        Cmd::Report(a) => report(&a.results, a.out.as_deref().unwrap_or(&a.results)),
        Cmd::Reproduce(a) => reproduce(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
