//! `fedgen`: experiment runner, bounds verifier and partition inspector.
//!
//! Exit codes: 0 success, 1 runtime failure (or a violated bound), 2 usage or
//! parse error.

mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use fedgen::bounds::{verify_random_worlds, verify_world, GapReport, ToyWorld, WorldGenConfig};
use fedgen::data::PartitionManifest;
use fedgen::models::write_checkpoint;
use fedgen::orchestrator::{build_partition, run_experiment_with, ExperimentConfig, SgdUpdate, CSV_HEADER};
use serde::Serialize;

use crate::manifest::{unix_millis, RunManifest};

#[derive(Parser)]
#[command(name = "fedgen", version, about = "Federated client-selection simulator and bounds verifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train under a config and write metrics, manifest and checkpoint to DIR.
    Run {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Check the generalization inequalities on a world file or on random worlds.
    #[command(group(ArgGroup::new("source").required(true).args(["world", "random"])))]
    VerifyBounds {
        #[arg(long, value_name = "PATH")]
        world: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        random: Option<usize>,
        #[arg(long, value_name = "S", default_value_t = 0, requires = "random")]
        seed: u64,
    },
    /// Print the client partition implied by a config, without training.
    InspectPartition {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

type Outcome = Result<(), Failure>;

fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out } => cmd_run(&config, &out),
        Command::VerifyBounds { world, random, seed } => cmd_verify_bounds(world.as_deref(), random, seed),
        Command::InspectPartition { config } => cmd_inspect_partition(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) | Failure::Runtime(m) => eprintln!("fedgen: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("cannot parse config {}: {e}", path.display())))?;
    config
        .validate()
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn cmd_run(config_path: &Path, out: &Path) -> Outcome {
    let config = load_config(config_path)?;
    let started = unix_millis();
    fs::create_dir_all(out).map_err(runtime("cannot create output directory"))?;

    let mut csv = BufWriter::new(File::create(out.join("metrics.csv")).map_err(runtime("metrics.csv"))?);
    let mut jsonl = BufWriter::new(File::create(out.join("metrics.jsonl")).map_err(runtime("metrics.jsonl"))?);
    writeln!(csv, "{CSV_HEADER}").map_err(runtime("metrics.csv"))?;

    let local = SgdUpdate {
        sgd: config.sgd(),
        seed: config.seed_init,
    };
    let mut sink = |m: &fedgen::orchestrator::RoundMetrics| -> Result<(), String> {
        writeln!(csv, "{}", m.csv_row()).map_err(|e| e.to_string())?;
        let line = serde_json::to_string(m).map_err(|e| e.to_string())?;
        writeln!(jsonl, "{line}").map_err(|e| e.to_string())?;
        csv.flush().and_then(|_| jsonl.flush()).map_err(|e| e.to_string())
    };
    let result = run_experiment_with(&config, &local, &mut sink).map_err(runtime("run failed"))?;
    drop(sink);
    csv.flush().map_err(runtime("metrics.csv"))?;
    jsonl.flush().map_err(runtime("metrics.jsonl"))?;

    let ckpt = BufWriter::new(File::create(out.join("checkpoint.bin")).map_err(runtime("checkpoint.bin"))?);
    write_checkpoint(&result.final_params, ckpt).map_err(runtime("checkpoint.bin"))?;
    let table = serde_json::to_string_pretty(&result.table).map_err(runtime("table.json"))?;
    fs::write(out.join("table.json"), table + "\n").map_err(runtime("table.json"))?;

    let manifest = RunManifest::new(config, out, started, unix_millis());
    let text = serde_json::to_string_pretty(&manifest).map_err(runtime("manifest.json"))?;
    fs::write(out.join("manifest.json"), text + "\n").map_err(runtime("manifest.json"))?;

    match result.metrics.last() {
        Some(m) => println!(
            "{} rounds, final ood_acc {:.4}, id_acc {:.4} -> {}",
            m.round,
            m.ood_accuracy,
            m.id_accuracy,
            out.display()
        ),
        None => println!("0 rounds -> {}", out.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepLine<'a> {
    world: usize,
    world_seed: u64,
    #[serde(flatten)]
    report: &'a GapReport,
}

fn cmd_verify_bounds(world: Option<&Path>, random: Option<usize>, seed: u64) -> Outcome {
    let mut all_hold = true;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if let Some(path) = world {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read world {}: {e}", path.display())))?;
        let world: ToyWorld =
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("cannot parse world {}: {e}", path.display())))?;
        for r in verify_world(&world).map_err(runtime("verification failed"))? {
            all_hold &= r.holds;
            writeln!(out, "{}", serde_json::to_string(&r).map_err(runtime("output"))?).map_err(runtime("stdout"))?;
        }
    } else {
        let count = random.unwrap_or(0);
        let results = verify_random_worlds(count, seed, &WorldGenConfig::default()).map_err(runtime("verification failed"))?;
        for (world, (world_seed, reports)) in results.iter().enumerate() {
            for report in reports {
                all_hold &= report.holds;
                let line = SweepLine {
                    world,
                    world_seed: *world_seed,
                    report,
                };
                writeln!(out, "{}", serde_json::to_string(&line).map_err(runtime("output"))?).map_err(runtime("stdout"))?;
            }
        }
    }
    if all_hold {
        Ok(())
    } else {
        Err(Failure::Runtime("at least one inequality is violated".into()))
    }
}

fn cmd_inspect_partition(config_path: &Path) -> Outcome {
    let config = load_config(config_path)?;
    let partition = build_partition(&config).map_err(runtime("partition failed"))?;
    let manifest = PartitionManifest::from_clients(&partition.pool, &partition.clients);
    println!("{}", serde_json::to_string_pretty(&manifest).map_err(runtime("output"))?);
    Ok(())
}
