use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Parser, Subcommand};
use fedsim::harness::{partition_report, simulate_to_dir, theorem_bound, BoundParams, RunSummary, SimConfig};
use fedsim::{FedError, Result};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Desk-scale federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config and write metrics.csv and summary.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: runs/<config name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "FEDSIM_WORKERS")]
        workers: Option<usize>,
    },
    /// Run every *.json config in a directory, in name order.
    Sweep {
        #[arg(long)]
        configs: PathBuf,
        /// Parent directory for per-config outputs.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, env = "FEDSIM_WORKERS")]
        workers: Option<usize>,
    },
    /// Evaluate the convergence bound for a JSON parameter file.
    Bound {
        #[arg(long)]
        params: PathBuf,
    },
    /// Print per-client label histograms for a config's partition.
    PartitionReport {
        #[arg(long)]
        config: PathBuf,
    },
}

fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn print_summary(name: &str, out: &Path, s: &RunSummary) {
    println!(
        "{name}: {} rounds, tail accuracy {:.4}, final train loss {:.6}, wall {:.2}s -> {}",
        s.rounds,
        s.tail_average,
        s.final_train_loss,
        s.wall_time_secs,
        out.display()
    );
}

fn simulate(config: &Path, out: Option<PathBuf>, seed: Option<u64>, workers: usize) -> Result<()> {
    let mut cfg = SimConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let out = out.unwrap_or_else(|| Path::new("runs").join(stem(config)));
    let summary = simulate_to_dir(&cfg, &out, workers)?;
    print_summary(&stem(config), &out, &summary);
    Ok(())
}

fn sweep(dir: &Path, out: &Path, workers: usize) -> Result<()> {
    let mut configs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| FedError::Io { path: dir.to_path_buf(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(FedError::Config(format!("no .json configs in {}", dir.display())));
    }
    for path in configs {
        simulate(&path, Some(out.join(stem(&path))), None, workers)?;
    }
    Ok(())
}

fn bound(path: &Path) -> Result<()> {
    let raw = fs::read(path).map_err(|e| FedError::Io { path: path.to_path_buf(), source: e })?;
    let params: BoundParams = serde_json::from_slice(&raw)?;
    let report = theorem_bound(&params)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn report(path: &Path) -> Result<()> {
    let cfg = SimConfig::load(path)?;
    let hist = partition_report(&cfg)?;
    let header: Vec<String> = (0..cfg.model.num_classes()).map(|c| format!("c{c}")).collect();
    println!("client,{},total", header.join(","));
    for (i, h) in hist.iter().enumerate() {
        let cells: Vec<String> = h.iter().map(usize::to_string).collect();
        println!("{i},{},{}", cells.join(","), h.iter().sum::<usize>());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, seed, workers } => {
            simulate(&config, out, seed, workers.unwrap_or_else(default_workers))
        }
        Command::Sweep { configs, out, workers } => sweep(&configs, &out, workers.unwrap_or_else(default_workers)),
        Command::Bound { params } => bound(&params),
        Command::PartitionReport { config } => report(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
