//! The controlling file-triggered script: watches stage output
//! directories, fires each stage when the expected pcap count is reached
//! or a timeout elapses, partitions work across distributed workers, and
//! records everything in a resumable run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::metrics::{
    self, ConformityWeights, DatasetManifest, ReportFormat, SidecarCause, SidecarRecord,
};
use crate::mobility::{self, EventInjection, PopulationConfig};
use crate::otn::{self, DropCause, Flow, OtnTopology, PacketOutcome};
use crate::pcapio;
use crate::traffic5g::{self, AppAssignmentPolicy, DemandSchedule, ProfileMap};

pub const MASTER_DIR_ENV: &str = "SIMPIPE_MASTER_DIR";
pub const DEFAULT_POLL_INTERVAL_MS: u64 = 250;
pub const DEFAULT_TIMEOUT_S: f64 = 600.0;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("watched directory {0} disappeared")]
    DirectoryGone(PathBuf),
    #[error("trace file has no element_count attribute")]
    MissingElementCount,
    #[error("rename collision on {0}; nothing renamed")]
    RenameCollision(String),
    #[error("unparseable foreign name {0} with no map entry")]
    UnmappedForeignName(String),
    #[error("worker_count must be positive")]
    BadWorkerCount,
    #[error("stage {stage} failed: {message}")]
    StageFailure { stage: String, message: String },
    #[error("stage {0} timed out with zero inputs")]
    TimeoutEmpty(String),
    #[error(transparent)]
    Mobility(#[from] mobility::MobilityError),
    #[error(transparent)]
    Traffic(#[from] traffic5g::TrafficError),
    #[error(transparent)]
    Otn(#[from] otn::OtnError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Pcap(#[from] pcapio::PcapError),
}

impl OrchestratorError {
    /// CLI exit code contract: 2 config, 3 stage failure, 4 empty timeout.
    pub fn exit_code(&self) -> i32 {
        match self {
            OrchestratorError::Config(_) | OrchestratorError::BadWorkerCount => 2,
            OrchestratorError::TimeoutEmpty(_) => 4,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Singular,
    Distributed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MobilitySection {
    pub population: PopulationConfig,
    #[serde(default)]
    pub events: Vec<EventInjection>,
    pub time_step_s: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrafficSection {
    pub policy: AppAssignmentPolicy,
    #[serde(default)]
    pub profiles: Option<ProfileMap>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_label")]
    pub label: String,
    pub mode: Mode,
    pub master_dir: PathBuf,
    pub seed: u64,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_poll")]
    pub poll_interval_ms: u64,
    #[serde(default)]
    pub worker_id: u32,
    #[serde(default = "default_workers")]
    pub workers: u32,
    pub mobility: MobilitySection,
    pub traffic: TrafficSection,
    /// Topology TOML path; the bundled reference topology when absent.
    #[serde(default)]
    pub topology_file: Option<PathBuf>,
    /// Optional reference dataset directory for conformity scoring.
    #[serde(default)]
    pub reference_dataset: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub report_format: String,
}

fn default_label() -> String {
    "run".to_string()
}
fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_S
}
fn default_poll() -> u64 {
    DEFAULT_POLL_INTERVAL_MS
}
fn default_workers() -> u32 {
    1
}
fn default_format() -> String {
    "tsv".to_string()
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig, OrchestratorError> {
        let text = fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let mut config: PipelineConfig =
            toml::from_str(&text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        if let Ok(dir) = std::env::var(MASTER_DIR_ENV) {
            config.master_dir = PathBuf::from(dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.timeout_s <= 0.0 {
            return Err(OrchestratorError::Config("timeout_s must be > 0".into()));
        }
        if self.workers == 0 {
            return Err(OrchestratorError::BadWorkerCount);
        }
        if self.mode == Mode::Distributed && self.worker_id >= self.workers {
            return Err(OrchestratorError::Config(format!(
                "worker_id {} out of range for {} workers",
                self.worker_id, self.workers
            )));
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.master_dir.join("dataset")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.master_dir.join("report")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.master_dir.join("trace.xml")
    }

    /// Workers keep separate run manifests so a resumed worker never
    /// mistakes a peer's progress for its own.
    pub fn manifest_path(&self) -> PathBuf {
        if self.workers > 1 {
            self.master_dir
                .join(format!("run_manifest_w{}.json", self.worker_id))
        } else {
            self.master_dir.join("run_manifest.json")
        }
    }
}

/// Reads the element_count attribute stamped on an exported trace.
pub fn read_element_count(trace_path: &Path) -> Result<u64, OrchestratorError> {
    let text = fs::read_to_string(trace_path)?;
    let pat = "element_count=\"";
    let start = text
        .find(pat)
        .ok_or(OrchestratorError::MissingElementCount)?
        + pat.len();
    let end = text[start..]
        .find('"')
        .ok_or(OrchestratorError::MissingElementCount)?
        + start;
    text[start..end]
        .parse()
        .map_err(|_| OrchestratorError::MissingElementCount)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerStatus {
    Waiting,
    FiredOnCount,
    FiredOnTimeout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerState {
    pub dir: PathBuf,
    /// Only files ending with this suffix are counted.
    pub suffix: String,
    pub expected: u64,
    pub observed: u64,
    pub status: TriggerStatus,
}

impl TriggerState {
    pub fn new(dir: PathBuf, suffix: &str, expected: u64) -> TriggerState {
        TriggerState {
            dir,
            suffix: suffix.to_string(),
            expected,
            observed: 0,
            status: TriggerStatus::Waiting,
        }
    }
}

fn snapshot_sizes(
    dir: &Path,
    suffix: &str,
) -> Result<BTreeMap<String, u64>, OrchestratorError> {
    let mut sizes = BTreeMap::new();
    let entries = fs::read_dir(dir)
        .map_err(|_| OrchestratorError::DirectoryGone(dir.to_path_buf()))?;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.ends_with(suffix) {
            // egress/trunc files also end in .pcap; keep suffix classes apart
            if suffix == ".pcap"
                && (name.ends_with(".egress.pcap") || name.ends_with(".trunc.pcap"))
            {
                continue;
            }
            sizes.insert(name, entry.metadata()?.len());
        }
    }
    Ok(sizes)
}

/// Polls the watched directory until the expected count of size-stable
/// files appears or the deadline passes. A file only counts once its
/// size is unchanged across two consecutive polls, so half-written files
/// never fire the trigger. Never fires twice.
pub fn watch_and_trigger(
    mut state: TriggerState,
    poll_interval: Duration,
    timeout: Duration,
) -> Result<TriggerState, OrchestratorError> {
    if state.status != TriggerStatus::Waiting {
        return Ok(state);
    }
    let deadline = Instant::now() + timeout;
    let mut previous = snapshot_sizes(&state.dir, &state.suffix)?;
    loop {
        std::thread::sleep(poll_interval.min(Duration::from_millis(50)));
        let current = snapshot_sizes(&state.dir, &state.suffix)?;
        let stable = current
            .iter()
            .filter(|(name, size)| previous.get(*name) == Some(size))
            .count() as u64;
        state.observed = stable;
        if stable >= state.expected {
            state.status = TriggerStatus::FiredOnCount;
            return Ok(state);
        }
        if Instant::now() >= deadline {
            state.status = TriggerStatus::FiredOnTimeout;
            return Ok(state);
        }
        previous = current;
    }
}

/// Deterministic user partition: user_id mod worker_count.
pub fn partition_work(
    user_ids: &[u64],
    worker_count: u32,
) -> Result<Vec<Vec<u64>>, OrchestratorError> {
    if worker_count == 0 {
        return Err(OrchestratorError::BadWorkerCount);
    }
    let mut partitions = vec![Vec::new(); worker_count as usize];
    for &id in user_ids {
        partitions[(id % worker_count as u64) as usize].push(id);
    }
    Ok(partitions)
}

/// Applies a rename map to a directory, all-or-nothing: any collision
/// aborts before a single file is touched. Foreign `.pcap` names without
/// a map entry and no canonical form are an error. Returns the count
/// renamed and records the applied mapping in `rename_map.tsv`.
pub fn rename_batch(
    dir: &Path,
    map: &BTreeMap<String, String>,
) -> Result<u64, OrchestratorError> {
    let mut planned: Vec<(String, String)> = Vec::new();
    let mut existing: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().to_string();
        if !name.ends_with(".pcap") {
            continue;
        }
        existing.push(name.clone());
        if let Some(target) = map.get(&name) {
            if target != &name {
                planned.push((name, target.clone()));
            }
            continue;
        }
        let stem = name
            .strip_suffix(".egress.pcap")
            .or_else(|| name.strip_suffix(".trunc.pcap"))
            .or_else(|| name.strip_suffix(".pcap"))
            .unwrap_or(&name);
        if traffic5g::parse_stream_key(stem).is_none() {
            return Err(OrchestratorError::UnmappedForeignName(name));
        }
    }

    // collision check before any rename
    let mut targets: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    let moved_away: std::collections::BTreeSet<String> =
        planned.iter().map(|(from, _)| from.clone()).collect();
    for (_, to) in &planned {
        if !targets.insert(to.clone()) {
            return Err(OrchestratorError::RenameCollision(to.clone()));
        }
        if existing.contains(to) && !moved_away.contains(to) {
            return Err(OrchestratorError::RenameCollision(to.clone()));
        }
    }

    for (from, to) in &planned {
        fs::rename(dir.join(from), dir.join(to))?;
    }
    if !planned.is_empty() {
        let mut out = String::new();
        for (from, to) in &planned {
            out.push_str(from);
            out.push('\t');
            out.push_str(to);
            out.push('\n');
        }
        fs::write(dir.join("rename_map.tsv"), out)?;
    }
    Ok(planned.len() as u64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: TriggerStatus,
    pub expected: u64,
    pub observed: u64,
    /// Unattended computation time.
    pub automated_s: f64,
    /// Time blocked on interactive prompts; always zero for this CLI.
    pub monitored_s: f64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub label: String,
    pub seed: u64,
    pub mode: Mode,
    pub worker_id: u32,
    pub workers: u32,
    pub element_count: u64,
    pub stages: Vec<StageRecord>,
    #[serde(default)]
    pub failure: Option<String>,
}

impl RunManifest {
    fn save(&self, path: &Path) -> Result<(), OrchestratorError> {
        fs::write(path, serde_json::to_string_pretty(self).unwrap())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest, OrchestratorError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| OrchestratorError::Config(format!("bad manifest: {e}")))
    }

    fn stage_fired(&self, name: &str) -> bool {
        self.stages
            .iter()
            .any(|s| s.name == name && s.status != TriggerStatus::Waiting)
    }
}

fn list_files(dir: &Path, suffix: &str) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map(|entries| {
            entries
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().to_string())
                .filter(|n| n.ends_with(suffix))
                .collect()
        })
        .unwrap_or_default();
    names.sort();
    names
}

/// Transports every ingress pcap found in `dataset` over the topology
/// and writes egress, truncated-vantage, and sidecar files for the users
/// in this worker's partition. Every worker simulates the full ingress
/// set so shared-channel policing matches the singular run; the return
/// value is the global egress file count the trigger should expect.
pub fn transport_dataset(
    dataset: &Path,
    topology: &OtnTopology,
    duration_s: f64,
    seed: u64,
    worker_id: u32,
    workers: u32,
) -> Result<u64, OrchestratorError> {
    if workers == 0 {
        return Err(OrchestratorError::BadWorkerCount);
    }
    let mut ingress: Vec<((u64, u16, u16), pcapio::PcapStream)> = Vec::new();
    for name in list_files(dataset, ".pcap") {
        if name.ends_with(".egress.pcap") || name.ends_with(".trunc.pcap") {
            continue;
        }
        let stem = name.strip_suffix(".pcap").unwrap();
        if let Some(key) = traffic5g::parse_stream_key(stem) {
            ingress.push((key, pcapio::read_pcap(&dataset.join(&name))?));
        }
    }
    ingress.sort_by_key(|(key, _)| *key);

    // committed rate per flow: bytes over the user's active session time
    // (sessions are bursty, so averaging over the whole trace would
    // systematically underprovision), plus 25% policing headroom
    let mut active_s: BTreeMap<u64, f64> = BTreeMap::new();
    if let Ok(m) = metrics::read_manifest(&dataset.join("manifest.json")) {
        for schedule in &m.schedules {
            let total: f64 = schedule
                .sessions
                .iter()
                .map(|s| (s.end_s - s.start_s).max(0.0))
                .sum();
            active_s.insert(schedule.user_id, total);
        }
    }
    let mut flows = Vec::new();
    let mut pairs: std::collections::BTreeSet<(u16, u16)> = Default::default();
    for ((user, src, dst), stream) in &ingress {
        let bytes: u64 = stream.records.iter().map(|r| r.payload.len() as u64).sum();
        let window = active_s
            .get(user)
            .copied()
            .filter(|&s| s > 0.0)
            .unwrap_or(duration_s);
        let rate = bytes as f64 * 8.0 / window * 1.25;
        flows.push(Flow {
            id: *user,
            src: *src,
            dst: *dst,
            mean_rate_bps: rate.max(1.0),
        });
        pairs.insert((*src, *dst));
    }
    let mut path_sets = BTreeMap::new();
    for (src, dst) in pairs {
        path_sets.insert((src, dst), otn::compute_disjoint_paths(topology, src, dst, 2)?);
    }
    let grooming = otn::groom(&flows, topology, &path_sets)?;
    let (records, egress) =
        otn::simulate_transport(&ingress, &grooming, topology, &path_sets, seed)?;

    let ingress_by_key: BTreeMap<(u64, u16, u16), &pcapio::PcapStream> =
        ingress.iter().map(|(k, s)| (*k, s)).collect();
    for (key, stream) in &egress {
        if key.0 % workers as u64 != worker_id as u64 {
            continue;
        }
        let stem = format!("u{}_s{}_d{}", key.0, key.1, key.2);
        pcapio::write_pcap(stream, &dataset.join(format!("{stem}.egress.pcap")))?;
        let truncated = otn::truncate_stream(ingress_by_key[key], stream)?;
        pcapio::write_pcap(&truncated, &dataset.join(format!("{stem}.trunc.pcap")))?;
        let sidecar: Vec<SidecarRecord> = records
            .iter()
            .filter(|r| r.user_id == key.0)
            .map(|r| SidecarRecord {
                sequence: r.sequence,
                ingress_us: r.ingress_us,
                egress_us: match r.outcome {
                    PacketOutcome::Delivered { egress_us } => Some(egress_us),
                    PacketOutcome::Dropped { .. } => None,
                },
                cause: match r.outcome {
                    PacketOutcome::Dropped {
                        cause: DropCause::Capacity,
                    } => Some(SidecarCause::Capacity),
                    PacketOutcome::Dropped {
                        cause: DropCause::Corruption,
                    } => Some(SidecarCause::Corruption),
                    _ => None,
                },
            })
            .collect();
        metrics::write_sidecar(&sidecar, &dataset.join(format!("{stem}.records.tsv")))?;
    }
    Ok(ingress.len() as u64)
}

/// Computes per-user metrics and the conformity trailer for a dataset
/// directory and writes `report.{tsv,jsonl}` into `report_dir`. Without a
/// reference dataset the dataset is scored against itself.
pub fn report_dataset(
    dataset: &Path,
    report_dir: &Path,
    label: &str,
    reference_dataset: Option<&Path>,
    format: &str,
) -> Result<PathBuf, OrchestratorError> {
    fs::create_dir_all(report_dir)?;
    let outcome = metrics::pair_streams(dataset)?;
    let mut user_metrics = Vec::new();
    for pair in &outcome.pairs {
        user_metrics.push(metrics::compute_user_metrics(pair).map_err(|e| {
            OrchestratorError::StageFailure {
                stage: "report".into(),
                message: e.to_string(),
            }
        })?);
    }
    let features = metrics::extract_features(dataset)?;
    let reference = match reference_dataset {
        Some(dir) => metrics::extract_features(dir)?,
        None => features,
    };
    let ref_label = reference_dataset
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "self".to_string());
    let conformity = metrics::conformity_score(
        &features,
        &reference,
        &ConformityWeights::default(),
        label,
        &ref_label,
    )?;
    let format = match format {
        "jsonl" | "json-lines" => ReportFormat::JsonLines,
        _ => ReportFormat::Tsv,
    };
    let ext = match format {
        ReportFormat::Tsv => "tsv",
        ReportFormat::JsonLines => "jsonl",
    };
    let path = report_dir.join(format!("report.{ext}"));
    metrics::export_report(&user_metrics, Some(&conformity), &path, format)?;
    Ok(path)
}

#[derive(Debug)]
pub struct PipelineArtifacts {
    pub manifest_path: PathBuf,
    pub report_path: Option<PathBuf>,
}

/// Runs the four stages in order, each gated by a directory watch on its
/// predecessor's output. Deterministic for a fixed config and seed; a
/// re-run resumes from the manifest without recomputing fired stages.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineArtifacts, OrchestratorError> {
    config.validate()?;
    fs::create_dir_all(&config.master_dir)?;
    fs::create_dir_all(config.dataset_dir())?;
    fs::create_dir_all(config.report_dir())?;

    let poll = Duration::from_millis(config.poll_interval_ms);
    let timeout = Duration::from_secs_f64(config.timeout_s);
    let manifest_path = config.manifest_path();
    let mut manifest = if manifest_path.exists() {
        RunManifest::load(&manifest_path)?
    } else {
        RunManifest {
            label: config.label.clone(),
            seed: config.seed,
            mode: config.mode,
            worker_id: config.worker_id,
            workers: config.workers,
            element_count: 0,
            stages: Vec::new(),
            failure: None,
        }
    };
    manifest.failure = None;

    let topology = match &config.topology_file {
        Some(path) => otn::build_topology(path)?,
        None => otn::reference_topology(),
    };
    let profiles = config
        .traffic
        .profiles
        .clone()
        .unwrap_or_else(traffic5g::default_profiles);
    let egress_set: Vec<u16> = topology.egress_set.iter().copied().collect();
    let is_primary = config.worker_id == 0;

    // --- stage 1: mobility ---------------------------------------------
    let stage_start = Instant::now();
    let agents = mobility::generate_population(&config.mobility.population)?;
    let trace = mobility::simulate_mobility(
        &agents,
        &config.mobility.events,
        config.mobility.time_step_s,
        config.mobility.duration_s,
        config.seed,
        &config.mobility.population.locations,
    )?;
    if !manifest.stage_fired("mobility") {
        if is_primary {
            mobility::export_trace(&trace, &config.trace_path())?;
        }
        let state = watch_and_trigger(
            TriggerState::new(config.master_dir.clone(), ".xml", 1),
            poll,
            timeout,
        )?;
        if state.status == TriggerStatus::FiredOnTimeout && state.observed == 0 {
            manifest.failure = Some("mobility: timeout with zero inputs".into());
            manifest.save(&manifest_path)?;
            return Err(OrchestratorError::TimeoutEmpty("mobility".into()));
        }
        manifest.stages.push(StageRecord {
            name: "mobility".into(),
            status: state.status,
            expected: 1,
            observed: state.observed,
            automated_s: stage_start.elapsed().as_secs_f64(),
            monitored_s: 0.0,
            files: vec!["trace.xml".into()],
        });
    }
    manifest.element_count = read_element_count(&config.trace_path())?;
    manifest.save(&manifest_path)?;

    // --- stage 2: 5G traffic -------------------------------------------
    let stage_start = Instant::now();
    let schedules = traffic5g::assign_apps(
        &trace,
        &config.traffic.policy,
        &profiles,
        &egress_set,
        config.seed,
    )?;
    // cap enforcement: never emit more pcaps than the trace declares
    let active: Vec<&DemandSchedule> = schedules
        .iter()
        .filter(|s| !s.sessions.is_empty())
        .take(manifest.element_count as usize)
        .collect();
    let ingress_nodes = topology.ingress_positions();
    let src_of = traffic5g::ingress_assignment(&trace, &ingress_nodes)?;

    // every worker generates the full capped set deterministically so the
    // expected trigger count is global; each writes only its own share
    let mut pcap_files: Vec<String> = Vec::new();
    {
        let dataset = config.dataset_dir();
        for schedule in &active {
            let src = src_of.get(&schedule.user_id).copied().unwrap_or(0);
            let stream =
                traffic5g::generate_packets(schedule, &profiles, src, config.seed).map_err(
                    |e| OrchestratorError::StageFailure {
                        stage: "traffic".into(),
                        message: e.to_string(),
                    },
                )?;
            if stream.records.is_empty() {
                continue;
            }
            let name = traffic5g::pcap_file_name(
                schedule.user_id,
                src,
                schedule.sessions[0].dst_node,
            );
            let mine = schedule.user_id % config.workers as u64 == config.worker_id as u64;
            if mine && !manifest.stage_fired("traffic") {
                pcapio::write_pcap(&stream, &dataset.join(&name))?;
            }
            pcap_files.push(name);
        }
    }
    let expected_pcaps = pcap_files.len() as u64;

    if !manifest.stage_fired("traffic") {
        if is_primary {
            let dataset_manifest = DatasetManifest {
                label: config.label.clone(),
                profiles: profiles.clone(),
                schedules: schedules.clone(),
                duration_s: config.mobility.duration_s,
                user_count: manifest.element_count,
                pcap_files: pcap_files.clone(),
            };
            metrics::write_manifest(
                &dataset_manifest,
                &config.dataset_dir().join("manifest.json"),
            )?;
        }
        let state = watch_and_trigger(
            TriggerState::new(config.dataset_dir(), ".pcap", expected_pcaps),
            poll,
            timeout,
        )?;
        if state.status == TriggerStatus::FiredOnTimeout && state.observed == 0 {
            manifest.failure = Some("traffic: timeout with zero inputs".into());
            manifest.save(&manifest_path)?;
            return Err(OrchestratorError::TimeoutEmpty("traffic".into()));
        }
        manifest.stages.push(StageRecord {
            name: "traffic".into(),
            status: state.status,
            expected: expected_pcaps,
            observed: state.observed,
            automated_s: stage_start.elapsed().as_secs_f64(),
            monitored_s: 0.0,
            files: list_files(&config.dataset_dir(), ".pcap"),
        });
        manifest.save(&manifest_path)?;
    }

    // --- stage 3: OTN transport ----------------------------------------
    let stage_start = Instant::now();
    if !manifest.stage_fired("transport") {
        let expected_egress = transport_dataset(
            &config.dataset_dir(),
            &topology,
            config.mobility.duration_s,
            config.seed,
            config.worker_id,
            config.workers,
        )?;
        let state = watch_and_trigger(
            TriggerState::new(config.dataset_dir(), ".egress.pcap", expected_egress),
            poll,
            timeout,
        )?;
        manifest.stages.push(StageRecord {
            name: "transport".into(),
            status: state.status,
            expected: expected_egress,
            observed: state.observed,
            automated_s: stage_start.elapsed().as_secs_f64(),
            monitored_s: 0.0,
            files: list_files(&config.dataset_dir(), ".egress.pcap"),
        });
        manifest.save(&manifest_path)?;
    }

    // --- stage 4: report -----------------------------------------------
    let stage_start = Instant::now();
    let mut report_path = None;
    if !manifest.stage_fired("report") {
        if is_primary {
            report_path = Some(report_dataset(
                &config.dataset_dir(),
                &config.report_dir(),
                &config.label,
                config.reference_dataset.as_deref(),
                &config.report_format,
            )?);
        }
        let state = watch_and_trigger(
            TriggerState::new(config.report_dir(), "", 1),
            poll,
            timeout,
        )?;
        manifest.stages.push(StageRecord {
            name: "report".into(),
            status: state.status,
            expected: 1,
            observed: state.observed,
            automated_s: stage_start.elapsed().as_secs_f64(),
            monitored_s: 0.0,
            files: list_files(&config.report_dir(), ""),
        });
        manifest.save(&manifest_path)?;
    }

    Ok(PipelineArtifacts {
        manifest_path,
        report_path,
    })
}

/// Emits per-figure data tables from a run manifest and a report file:
/// stage runtimes (monitored vs automated) and conformity components.
pub fn plot_data(
    manifest_path: &Path,
    report_path: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, OrchestratorError> {
    fs::create_dir_all(out_dir)?;
    let manifest = RunManifest::load(manifest_path)?;
    let mut written = Vec::new();

    let mut runtime = String::from("stage\tstatus\tmonitored_s\tautomated_s\n");
    for stage in &manifest.stages {
        let status = match stage.status {
            TriggerStatus::Waiting => "waiting",
            TriggerStatus::FiredOnCount => "fired_on_count",
            TriggerStatus::FiredOnTimeout => "fired_on_timeout",
        };
        runtime.push_str(&format!(
            "{}\t{}\t{:.3}\t{:.3}\n",
            stage.name, status, stage.monitored_s, stage.automated_s
        ));
    }
    let runtime_path = out_dir.join("runtime_by_stage.tsv");
    fs::write(&runtime_path, runtime)?;
    written.push(runtime_path);

    if let Some(report) = report_path {
        let text = fs::read_to_string(report)?;
        let mut table = String::from("feature\tsimilarity\n");
        for line in text.lines().filter(|l| l.starts_with("# s_latency")) {
            for field in line.trim_start_matches("# ").split('\t') {
                if let Some((key, value)) = field.split_once('=') {
                    table.push_str(&format!("{key}\t{value}\n"));
                }
            }
        }
        let conformity_path = out_dir.join("conformity_components.tsv");
        fs::write(&conformity_path, table)?;
        written.push(conformity_path);
    }
    Ok(written)
}
