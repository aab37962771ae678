//! Command-line front end for the simulation pipeline. Each stage is
//! also exposed as its own subcommand so stages can be re-run or swapped
//! for external tools that honor the same file layout.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use simpipe::metrics;
use simpipe::mobility;
use simpipe::orchestrator::{
    self, Mode, OrchestratorError, PipelineConfig, RunManifest,
};
use simpipe::otn;
use simpipe::traffic5g;

#[derive(Parser)]
#[command(name = "simpipe", version, about = "5G-over-OTN traffic dataset pipeline")]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// singular or distributed.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// This worker's index in distributed mode.
    #[arg(long, global = true)]
    worker_id: Option<u32>,
    /// Total worker count in distributed mode.
    #[arg(long, global = true)]
    workers: Option<u32>,
    /// Stage trigger timeout in seconds.
    #[arg(long, global = true)]
    timeout_s: Option<f64>,
    /// Overrides the master output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesizes the mobility trace and exports it as XML.
    Mobility,
    /// Generates per-user demand schedules and ingress pcaps.
    Traffic,
    /// Transports ingress pcaps over the optical topology.
    Transport,
    /// Extracts metrics and writes the per-user report.
    Report,
    /// Runs all four stages end to end with file triggers.
    Run,
    /// Emits plot-ready tables from a completed run.
    Plotdata,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, OrchestratorError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| OrchestratorError::Config("--config is required".into()))?;
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(mode) = &cli.mode {
        config.mode = match mode.as_str() {
            "singular" => Mode::Singular,
            "distributed" => Mode::Distributed,
            other => {
                return Err(OrchestratorError::Config(format!(
                    "unknown mode {other:?}; expected singular or distributed"
                )))
            }
        };
    }
    if let Some(id) = cli.worker_id {
        config.worker_id = id;
    }
    if let Some(n) = cli.workers {
        config.workers = n;
    }
    if let Some(t) = cli.timeout_s {
        config.timeout_s = t;
    }
    if let Some(out) = &cli.out {
        config.master_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn topology_for(config: &PipelineConfig) -> Result<otn::OtnTopology, OrchestratorError> {
    Ok(match &config.topology_file {
        Some(path) => otn::build_topology(path)?,
        None => otn::reference_topology(),
    })
}

fn run(cli: &Cli) -> Result<(), OrchestratorError> {
    match cli.command {
        Command::Mobility => {
            let config = load_config(cli)?;
            std::fs::create_dir_all(&config.master_dir)?;
            let agents = mobility::generate_population(&config.mobility.population)?;
            let trace = mobility::simulate_mobility(
                &agents,
                &config.mobility.events,
                config.mobility.time_step_s,
                config.mobility.duration_s,
                config.seed,
                &config.mobility.population.locations,
            )?;
            let count = mobility::export_trace(&trace, &config.trace_path())?;
            println!("{} element_count={count}", config.trace_path().display());
        }
        Command::Traffic => {
            let config = load_config(cli)?;
            std::fs::create_dir_all(config.dataset_dir())?;
            let agents = mobility::generate_population(&config.mobility.population)?;
            let trace = mobility::simulate_mobility(
                &agents,
                &config.mobility.events,
                config.mobility.time_step_s,
                config.mobility.duration_s,
                config.seed,
                &config.mobility.population.locations,
            )?;
            let topology = topology_for(&config)?;
            let profiles = config
                .traffic
                .profiles
                .clone()
                .unwrap_or_else(traffic5g::default_profiles);
            let egress_set: Vec<u16> = topology.egress_set.iter().copied().collect();
            let schedules = traffic5g::assign_apps(
                &trace,
                &config.traffic.policy,
                &profiles,
                &egress_set,
                config.seed,
            )?;
            let src_of =
                traffic5g::ingress_assignment(&trace, &topology.ingress_positions())?;
            let cap = trace.element_count() as usize;
            let mine: Vec<traffic5g::DemandSchedule> = schedules
                .iter()
                .filter(|s| !s.sessions.is_empty())
                .take(cap)
                .filter(|s| s.user_id % config.workers as u64 == config.worker_id as u64)
                .cloned()
                .collect();
            let count = traffic5g::emit_user_pcaps(
                &mine,
                &profiles,
                &src_of,
                &config.dataset_dir(),
                config.seed,
            )?;
            if config.worker_id == 0 {
                let mut pcap_files: Vec<String> = std::fs::read_dir(config.dataset_dir())?
                    .filter_map(|e| e.ok())
                    .map(|e| e.file_name().to_string_lossy().to_string())
                    .filter(|n| {
                        n.ends_with(".pcap")
                            && !n.ends_with(".egress.pcap")
                            && !n.ends_with(".trunc.pcap")
                    })
                    .collect();
                pcap_files.sort();
                let manifest = metrics::DatasetManifest {
                    label: config.label.clone(),
                    profiles,
                    schedules,
                    duration_s: config.mobility.duration_s,
                    user_count: trace.element_count(),
                    pcap_files,
                };
                metrics::write_manifest(
                    &manifest,
                    &config.dataset_dir().join("manifest.json"),
                )?;
            }
            println!("{count} pcap files in {}", config.dataset_dir().display());
        }
        Command::Transport => {
            let config = load_config(cli)?;
            let topology = topology_for(&config)?;
            let count = orchestrator::transport_dataset(
                &config.dataset_dir(),
                &topology,
                config.mobility.duration_s,
                config.seed,
                config.worker_id,
                config.workers,
            )?;
            println!("{count} streams transported in {}", config.dataset_dir().display());
        }
        Command::Report => {
            let config = load_config(cli)?;
            let path = orchestrator::report_dataset(
                &config.dataset_dir(),
                &config.report_dir(),
                &config.label,
                config.reference_dataset.as_deref(),
                &config.report_format,
            )?;
            println!("{}", path.display());
        }
        Command::Run => {
            let config = load_config(cli)?;
            let artifacts = orchestrator::run_pipeline(&config)?;
            println!("{}", artifacts.manifest_path.display());
            if let Some(report) = artifacts.report_path {
                println!("{}", report.display());
            }
        }
        Command::Plotdata => {
            let config = load_config(cli)?;
            let manifest_path = config.manifest_path();
            if !manifest_path.exists() {
                return Err(OrchestratorError::Config(format!(
                    "no run manifest at {}",
                    manifest_path.display()
                )));
            }
            // sanity-parse before deriving tables
            RunManifest::load(&manifest_path)?;
            let report = ["report.tsv", "report.jsonl"]
                .iter()
                .map(|n| config.report_dir().join(n))
                .find(|p| p.exists());
            let out_dir = config.report_dir().join("plots");
            let written =
                orchestrator::plot_data(&manifest_path, report.as_deref(), &out_dir)?;
            for path in written {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
