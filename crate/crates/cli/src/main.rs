use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aglrls_core::fplg::PseudoState;
use aglrls_core::harness::{self, report, TrainConfig, CONFIG_FILE, MODEL_FILE, STATE_FILE};
use aglrls_core::model::ModelBundle;
use aglrls_core::synthdata;
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "aglrls",
    version,
    about = "Global/local adversarial domain adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source and target datasets of the configured preset.
    GenData(Common),
    /// Run both training stages and evaluate every configured strategy.
    Train(Common),
    /// Evaluate a trained model directory on the configured target data.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory of an earlier `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Sweep thresholds and policies, reporting GP/RP/CP.
    SimulateFplg(Common),
    /// Run the module ablation ladder over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Friedman average ranks and Nemenyi critical differences.
    Stats {
        /// CSV with header `method,setting,accuracy`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failures that are the caller's fault exit with 2.
struct Usage(String);

enum Failure {
    Usage(Usage),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<aglrls_core::Error> for Failure {
    fn from(e: aglrls_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn resolve_config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) if !path.exists() => {
            return Err(Failure::Usage(Usage(format!(
                "config file not found: {}",
                path.display()
            ))))
        }
        Some(path) => TrainConfig::load(path)
            .map_err(|e| Failure::Usage(Usage(format!("{}: {e}", path.display()))))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()
        .map_err(|e| Failure::Usage(Usage(e.to_string())))?;
    Ok(cfg)
}

fn gen_data(common: &Common) -> Result<(), Failure> {
    let cfg = resolve_config(common)?;
    let (source, target) = synthdata::generate(&cfg.dataset_spec(), cfg.seed)?;
    harness::write_file(&common.out, CONFIG_FILE, &cfg.to_text())?;
    synthdata::save(&source, &common.out.join("source.csv"))?;
    synthdata::save(&target, &common.out.join("target.csv"))?;
    println!(
        "wrote {} source and {} target samples to {}",
        source.len(),
        target.len(),
        common.out.display()
    );
    Ok(())
}

fn train(common: &Common) -> Result<(), Failure> {
    let cfg = resolve_config(common)?;
    let out = harness::train(&cfg)?;
    harness::write_train_outputs(&common.out, &cfg, &out)?;
    print!("{}", report::metrics_csv(&out.record.reports));
    Ok(())
}

fn eval(common: &Common, model: &Path) -> Result<(), Failure> {
    let cfg = match &common.config {
        Some(_) => resolve_config(common)?,
        None => {
            let saved = Common {
                config: Some(model.join(CONFIG_FILE)),
                seed: common.seed,
                out: common.out.clone(),
            };
            resolve_config(&saved)?
        }
    };
    let bundle = ModelBundle::load(&model.join(MODEL_FILE))?;
    let state_path = model.join(STATE_FILE);
    let text = fs::read_to_string(&state_path)
        .with_context(|| format!("reading {}", state_path.display()))?;
    let state = PseudoState::from_csv(&text)?;
    let (_, target) = harness::load_data(&cfg)?;
    let truth = target
        .evaluation_labels()
        .ok_or_else(|| anyhow!("target data carries no evaluation labels"))?;
    let reports = harness::evaluate_run(&bundle, &state, &target, &truth, &cfg.strategies)?;
    harness::write_file(&common.out, CONFIG_FILE, &cfg.to_text())?;
    harness::write_file(&common.out, "metrics.csv", &report::metrics_csv(&reports))?;
    harness::write_file(
        &common.out,
        "confusion.csv",
        &report::confusion_csv(&reports),
    )?;
    print!("{}", report::metrics_csv(&reports));
    Ok(())
}

fn simulate(common: &Common) -> Result<(), Failure> {
    let cfg = resolve_config(common)?;
    let cells = harness::simulate_fplg(&cfg)?;
    harness::write_file(&common.out, CONFIG_FILE, &cfg.to_text())?;
    harness::write_file(&common.out, "pseudo.csv", &report::sim_epochs_csv(&cells))?;
    let summary = report::sim_summary_csv(&cells);
    harness::write_file(&common.out, "summary.csv", &summary)?;
    harness::write_file(
        &common.out,
        "accuracy.csv",
        &report::sim_accuracy_csv(&cells),
    )?;
    print!("{summary}");
    Ok(())
}

fn ablate(common: &Common, seeds: &[u64]) -> Result<(), Failure> {
    let cfg = resolve_config(common)?;
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = TrainConfig {
            seed,
            ..cfg.clone()
        };
        results.push(harness::run_ablation(&run)?);
    }
    let csv = report::ablation_csv(&results);
    harness::write_file(&common.out, CONFIG_FILE, &cfg.to_text())?;
    harness::write_file(&common.out, "ablation.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn stats(input: &Path, out: &Path) -> Result<(), Failure> {
    if !input.exists() {
        return Err(Failure::Usage(Usage(format!(
            "input file not found: {}",
            input.display()
        ))));
    }
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let table = report::parse_accuracy_csv(&text)
        .with_context(|| format!("parsing {}", input.display()))?;
    let ranks = report::ranks_report(&table)?;
    harness::write_file(out, "ranks.csv", &ranks)?;
    print!("{ranks}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Eval { common, model } => eval(common, model),
        Command::SimulateFplg(c) => simulate(c),
        Command::Ablate { common, seeds } => ablate(common, seeds),
        Command::Stats { input, out } => stats(input, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(Usage(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
