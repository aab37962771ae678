//! Metric extraction from paired pcap streams and the weighted
//! conformity score between two datasets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pcapio::{read_pcap, PcapStream};
use crate::traffic5g::{
    parse_stream_key, AppKind, DemandSchedule, ProfileMap, SyntheticPacketHeader, HEADER_LEN,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pcap(#[from] crate::pcapio::PcapError),
    #[error("stream key ({0}, {1}, {2}) appears twice")]
    DuplicateKey(u64, u16, u16),
    #[error("egress record with no ingress counterpart, sequence {0}")]
    OrphanEgress(u64),
    #[error("packet without a synthetic header at record {0}")]
    MissingHeader(usize),
    #[error("missing dataset manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("reference feature {0} must be positive, got {1}")]
    NonPositiveReference(&'static str, f64),
    #[error("conformity report violates its aggregate invariant")]
    BadAggregate,
}

/// One ingress/egress stream pair plus an optional transport-record
/// sidecar carrying drop causes.
#[derive(Debug, Clone)]
pub struct StreamPair {
    pub user_id: u64,
    pub src: u16,
    pub dst: u16,
    pub ingress: PcapStream,
    pub egress: PcapStream,
    pub sidecar: Option<Vec<SidecarRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SidecarRecord {
    pub sequence: u64,
    pub ingress_us: u64,
    /// None when dropped.
    pub egress_us: Option<u64>,
    pub cause: Option<SidecarCause>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SidecarCause {
    Capacity,
    Corruption,
}

#[derive(Debug, Clone)]
pub struct PairingOutcome {
    pub pairs: Vec<StreamPair>,
    /// Files that parsed as canonical names but had no counterpart.
    pub unmatched: Vec<PathBuf>,
}

/// Scans a directory for `u*_s*_d*.pcap` / `.egress.pcap` pairs. Files
/// without a counterpart are listed, never silently dropped.
pub fn pair_streams(dir: &Path) -> Result<PairingOutcome, MetricsError> {
    let mut ingress_files: BTreeMap<(u64, u16, u16), PathBuf> = BTreeMap::new();
    let mut egress_files: BTreeMap<(u64, u16, u16), PathBuf> = BTreeMap::new();
    if dir.exists() {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = match path.file_name().and_then(|n| n.to_str()) {
                Some(n) => n.to_string(),
                None => continue,
            };
            if let Some(stem) = name.strip_suffix(".egress.pcap") {
                if let Some(key) = parse_stream_key(stem) {
                    if egress_files.insert(key, path).is_some() {
                        return Err(MetricsError::DuplicateKey(key.0, key.1, key.2));
                    }
                }
            } else if let Some(stem) = name.strip_suffix(".pcap") {
                if stem.ends_with(".trunc") {
                    continue;
                }
                if let Some(key) = parse_stream_key(stem) {
                    if ingress_files.insert(key, path).is_some() {
                        return Err(MetricsError::DuplicateKey(key.0, key.1, key.2));
                    }
                }
            }
        }
    }

    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (key, ingress_path) in &ingress_files {
        match egress_files.remove(key) {
            Some(egress_path) => {
                let sidecar_path = dir.join(format!(
                    "u{}_s{}_d{}.records.tsv",
                    key.0, key.1, key.2
                ));
                let sidecar = if sidecar_path.exists() {
                    Some(read_sidecar(&sidecar_path)?)
                } else {
                    None
                };
                pairs.push(StreamPair {
                    user_id: key.0,
                    src: key.1,
                    dst: key.2,
                    ingress: read_pcap(ingress_path)?,
                    egress: read_pcap(&egress_path)?,
                    sidecar,
                });
            }
            None => unmatched.push(ingress_path.clone()),
        }
    }
    unmatched.extend(egress_files.into_values());
    unmatched.sort();
    Ok(PairingOutcome { pairs, unmatched })
}

/// Sidecar format: TSV with columns seq, ingress_us, egress_us (or
/// DROPPED), cause (capacity | corruption | -).
pub fn write_sidecar(records: &[SidecarRecord], path: &Path) -> Result<(), MetricsError> {
    let mut out = String::from("seq\tingress_us\tegress_us\tcause\n");
    for r in records {
        let egress = match r.egress_us {
            Some(us) => us.to_string(),
            None => "DROPPED".to_string(),
        };
        let cause = match r.cause {
            Some(SidecarCause::Capacity) => "capacity",
            Some(SidecarCause::Corruption) => "corruption",
            None => "-",
        };
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.sequence, r.ingress_us, egress, cause);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Vec<SidecarRecord>, MetricsError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            continue;
        }
        let sequence = cols[0].parse().unwrap_or(0);
        let ingress_us = cols[1].parse().unwrap_or(0);
        let egress_us = if cols[2] == "DROPPED" {
            None
        } else {
            cols[2].parse().ok()
        };
        let cause = match cols[3] {
            "capacity" => Some(SidecarCause::Capacity),
            "corruption" => Some(SidecarCause::Corruption),
            _ => None,
        };
        records.push(SidecarRecord {
            sequence,
            ingress_us,
            egress_us,
            cause,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Serialize)]
pub struct UserMetrics {
    pub user_id: u64,
    pub src: u16,
    pub dst: u16,
    pub packet_count: u64,
    pub latency_ms: Vec<f64>,
    pub loss_rate: f64,
    /// Corruption-cause drop fraction; None without a sidecar.
    pub error_rate: Option<f64>,
    pub mean_latency_ms: f64,
    pub p95_latency_ms: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Per-sequence latency, loss, and (with a sidecar) error rates for one
/// stream pair. Duplicate egress sequences count as errors and are
/// excluded from the latency statistics.
pub fn compute_user_metrics(pair: &StreamPair) -> Result<UserMetrics, MetricsError> {
    let mut ingress_times: BTreeMap<u64, u64> = BTreeMap::new();
    for (i, rec) in pair.ingress.records.iter().enumerate() {
        let h = SyntheticPacketHeader::decode(&rec.payload)
            .ok_or(MetricsError::MissingHeader(i))?;
        ingress_times.insert(h.sequence, rec.time_us());
    }
    let mut latency_ms = Vec::new();
    let mut seen: BTreeMap<u64, u32> = BTreeMap::new();
    let mut duplicate_drops = 0u64;
    for (i, rec) in pair.egress.records.iter().enumerate() {
        let h = SyntheticPacketHeader::decode(&rec.payload)
            .ok_or(MetricsError::MissingHeader(i))?;
        let ingress_us = *ingress_times
            .get(&h.sequence)
            .ok_or(MetricsError::OrphanEgress(h.sequence))?;
        let count = seen.entry(h.sequence).or_insert(0);
        *count += 1;
        if *count > 1 {
            duplicate_drops += 1;
            continue;
        }
        latency_ms.push((rec.time_us().saturating_sub(ingress_us)) as f64 / 1000.0);
    }

    let sent = ingress_times.len() as u64;
    let delivered = seen.len() as u64;
    let missing = sent - delivered;
    let loss_rate = if sent == 0 {
        0.0
    } else {
        missing as f64 / sent as f64
    };
    let error_rate = pair.sidecar.as_ref().map(|records| {
        let corrupted = records
            .iter()
            .filter(|r| r.cause == Some(SidecarCause::Corruption))
            .count() as u64
            + duplicate_drops;
        if sent == 0 {
            0.0
        } else {
            corrupted as f64 / sent as f64
        }
    });

    let mut sorted = latency_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = if sorted.is_empty() {
        0.0
    } else {
        sorted.iter().sum::<f64>() / sorted.len() as f64
    };
    Ok(UserMetrics {
        user_id: pair.user_id,
        src: pair.src,
        dst: pair.dst,
        packet_count: sent,
        loss_rate,
        error_rate,
        mean_latency_ms: mean,
        p95_latency_ms: percentile(&sorted, 0.95),
        latency_ms,
    })
}

/// The four dataset-level summary statistics feeding the conformity
/// score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub latency_req_ms_mean: f64,
    pub demand_dur_s_mean: f64,
    pub demand_freq_per_hour_mean: f64,
    pub packet_avg_size_bytes: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConformityWeights {
    pub w_latency: f64,
    pub w_duration: f64,
    pub w_frequency: f64,
    pub w_size: f64,
}

impl Default for ConformityWeights {
    fn default() -> Self {
        ConformityWeights {
            w_latency: 6.0,
            w_duration: 4.0,
            w_frequency: 2.0,
            w_size: 3.0,
        }
    }
}

impl ConformityWeights {
    pub fn total(&self) -> f64 {
        self.w_latency + self.w_duration + self.w_frequency + self.w_size
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConformityReport {
    pub reference_label: String,
    pub candidate_label: String,
    pub s_latency: f64,
    pub s_duration: f64,
    pub s_frequency: f64,
    pub s_size: f64,
    pub aggregate: f64,
}

/// Dataset manifest: the structured index linking profiles, schedules,
/// and the pcap inventory of one generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub label: String,
    pub profiles: ProfileMap,
    pub schedules: Vec<DemandSchedule>,
    pub duration_s: f64,
    pub user_count: u64,
    pub pcap_files: Vec<String>,
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), MetricsError> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| MetricsError::BadManifest(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, MetricsError> {
    if !path.exists() {
        return Err(MetricsError::MissingManifest(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MetricsError::BadManifest(e.to_string()))
}

/// Computes the feature vector of a dataset directory containing
/// `manifest.json` and the ingress pcaps it lists.
pub fn extract_features(dataset_dir: &Path) -> Result<FeatureVector, MetricsError> {
    let manifest = read_manifest(&dataset_dir.join("manifest.json"))?;
    extract_features_with(&manifest, dataset_dir)
}

pub fn extract_features_with(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
) -> Result<FeatureVector, MetricsError> {
    // session-weighted mean of profile latency budgets, empirical
    // duration means from the realized schedules
    let mut session_count = 0u64;
    let mut latency_sum = 0.0;
    let mut duration_sum = 0.0;
    for schedule in &manifest.schedules {
        for session in &schedule.sessions {
            let profile = manifest.profiles.get(&session.app_kind).ok_or_else(|| {
                MetricsError::BadManifest(format!(
                    "profile missing for {:?}",
                    session.app_kind
                ))
            })?;
            latency_sum += profile.latency_req_ms;
            duration_sum += session.end_s - session.start_s;
            session_count += 1;
        }
    }
    let users_with_any = manifest.schedules.len().max(1) as u64;
    let duration_hours = manifest.duration_s / 3600.0;
    let freq_mean = if duration_hours > 0.0 {
        session_count as f64 / users_with_any as f64 / duration_hours
    } else {
        0.0
    };

    let mut byte_sum = 0.0f64;
    let mut packet_count = 0u64;
    for name in &manifest.pcap_files {
        let stream = read_pcap(&dataset_dir.join(name))?;
        for rec in &stream.records {
            byte_sum += (rec.captured_len() as f64) - HEADER_LEN as f64;
            packet_count += 1;
        }
    }

    Ok(FeatureVector {
        latency_req_ms_mean: if session_count == 0 {
            0.0
        } else {
            latency_sum / session_count as f64
        },
        demand_dur_s_mean: if session_count == 0 {
            0.0
        } else {
            duration_sum / session_count as f64
        },
        demand_freq_per_hour_mean: freq_mean,
        packet_avg_size_bytes: if packet_count == 0 {
            0.0
        } else {
            byte_sum / packet_count as f64
        },
    })
}

fn similarity(candidate: f64, reference: f64) -> f64 {
    1.0 - ((candidate - reference).abs() / reference).min(1.0)
}

/// Weighted per-feature similarity between a candidate and a reference
/// feature vector: s_i = 1 - min(1, |c_i - r_i| / r_i), aggregated as
/// (6 s_lat + 4 s_dur + 2 s_freq + 3 s_size) / 15.
pub fn conformity_score(
    candidate: &FeatureVector,
    reference: &FeatureVector,
    weights: &ConformityWeights,
    candidate_label: &str,
    reference_label: &str,
) -> Result<ConformityReport, MetricsError> {
    let checks = [
        ("latency_req_ms_mean", reference.latency_req_ms_mean),
        ("demand_dur_s_mean", reference.demand_dur_s_mean),
        ("demand_freq_per_hour_mean", reference.demand_freq_per_hour_mean),
        ("packet_avg_size_bytes", reference.packet_avg_size_bytes),
    ];
    for (name, v) in checks {
        if v <= 0.0 {
            return Err(MetricsError::NonPositiveReference(name, v));
        }
    }
    let s_latency = similarity(candidate.latency_req_ms_mean, reference.latency_req_ms_mean);
    let s_duration = similarity(candidate.demand_dur_s_mean, reference.demand_dur_s_mean);
    let s_frequency = similarity(
        candidate.demand_freq_per_hour_mean,
        reference.demand_freq_per_hour_mean,
    );
    let s_size = similarity(
        candidate.packet_avg_size_bytes,
        reference.packet_avg_size_bytes,
    );
    let aggregate = (weights.w_latency * s_latency
        + weights.w_duration * s_duration
        + weights.w_frequency * s_frequency
        + weights.w_size * s_size)
        / weights.total();
    let report = ConformityReport {
        reference_label: reference_label.to_string(),
        candidate_label: candidate_label.to_string(),
        s_latency,
        s_duration,
        s_frequency,
        s_size,
        aggregate,
    };
    let recomputed = (weights.w_latency * report.s_latency
        + weights.w_duration * report.s_duration
        + weights.w_frequency * report.s_frequency
        + weights.w_size * report.s_size)
        / weights.total();
    if (report.aggregate - recomputed).abs() > 1e-12 {
        return Err(MetricsError::BadAggregate);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    JsonLines,
}

/// Writes one row per user plus a conformity trailer. Numbers are
/// printed at 9 significant digits; re-export of the same input is
/// byte-identical.
pub fn export_report(
    metrics: &[UserMetrics],
    report: Option<&ConformityReport>,
    path: &Path,
    format: ReportFormat,
) -> Result<PathBuf, MetricsError> {
    let mut rows: Vec<&UserMetrics> = metrics.iter().collect();
    rows.sort_by_key(|m| (m.user_id, m.src, m.dst));
    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            out.push_str(
                "user_id\tsrc\tdst\tpacket_count\tloss_rate\terror_rate\tmean_latency_ms\tp95_latency_ms\n",
            );
            for m in rows {
                let error = match m.error_rate {
                    Some(e) => format!("{:.9e}", e),
                    None => "unknown".to_string(),
                };
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{:.9e}\t{}\t{:.9e}\t{:.9e}",
                    m.user_id,
                    m.src,
                    m.dst,
                    m.packet_count,
                    m.loss_rate,
                    error,
                    m.mean_latency_ms,
                    m.p95_latency_ms
                );
            }
            if let Some(r) = report {
                let _ = writeln!(out, "# conformity\treference={}\tcandidate={}", r.reference_label, r.candidate_label);
                let _ = writeln!(
                    out,
                    "# s_latency={:.9e}\ts_duration={:.9e}\ts_frequency={:.9e}\ts_size={:.9e}\taggregate={:.9e}",
                    r.s_latency, r.s_duration, r.s_frequency, r.s_size, r.aggregate
                );
            }
        }
        ReportFormat::JsonLines => {
            for m in rows {
                let _ = writeln!(out, "{}", serde_json::to_string(m).unwrap());
            }
            if let Some(r) = report {
                let _ = writeln!(out, "{}", serde_json::to_string(r).unwrap());
            }
        }
    }
    fs::write(path, out)?;
    Ok(path.to_path_buf())
}

/// Recomputes the per-pair conservation identity at metric time.
pub fn check_conservation(pair: &StreamPair, metrics: &UserMetrics) -> bool {
    let sent = metrics.packet_count;
    let delivered = metrics.latency_ms.len() as u64;
    let missing = (metrics.loss_rate * sent as f64).round() as u64;
    delivered + missing == sent && pair.ingress.records.len() as u64 == sent
}

pub fn app_kind_label(kind: AppKind) -> &'static str {
    match kind {
        AppKind::VideoStreaming => "video_streaming",
        AppKind::Voip => "voip",
        AppKind::FileTransfer => "file_transfer",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcapio::{write_pcap, PacketRecord};
    use crate::traffic5g::AppKind;
    use proptest::prelude::*;

    fn make_stream(user: u64, src: u16, dst: u16, times_us: &[u64], bytes: u32) -> PcapStream {
        let records = times_us
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let header = SyntheticPacketHeader {
                    user_id: user,
                    sequence: i as u64,
                    app_kind: AppKind::Voip,
                    dst_node: dst,
                    src_node: src,
                    flags: 0,
                    payload_len: bytes as u16,
                    send_time_us: t as u32,
                };
                let mut payload = header.encode().to_vec();
                payload.resize(HEADER_LEN + bytes as usize, 0);
                PacketRecord {
                    timestamp_s: (t / 1_000_000) as u32,
                    timestamp_us: (t % 1_000_000) as u32,
                    original_len: HEADER_LEN as u32 + bytes,
                    payload,
                }
            })
            .collect();
        PcapStream::new(records)
    }

    fn shift_stream(stream: &PcapStream, delta_us: u64) -> PcapStream {
        let mut out = stream.clone();
        for rec in &mut out.records {
            let t = rec.time_us() + delta_us;
            rec.timestamp_s = (t / 1_000_000) as u32;
            rec.timestamp_us = (t % 1_000_000) as u32;
        }
        out
    }

    #[test]
    fn empty_directory_pairs_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = pair_streams(dir.path()).unwrap();
        assert!(outcome.pairs.is_empty());
        assert!(outcome.unmatched.is_empty());
    }

    #[test]
    fn single_pair_keyed_correctly() {
        let dir = tempfile::tempdir().unwrap();
        let ingress = make_stream(7, 1, 4, &[0, 1000], 100);
        let egress = shift_stream(&ingress, 500);
        write_pcap(&ingress, &dir.path().join("u7_s1_d4.pcap")).unwrap();
        write_pcap(&egress, &dir.path().join("u7_s1_d4.egress.pcap")).unwrap();
        let outcome = pair_streams(dir.path()).unwrap();
        assert_eq!(outcome.pairs.len(), 1);
        assert!(outcome.unmatched.is_empty());
        let p = &outcome.pairs[0];
        assert_eq!((p.user_id, p.src, p.dst), (7, 1, 4));
    }

    #[test]
    fn unmatched_files_listed() {
        let dir = tempfile::tempdir().unwrap();
        for user in 0..10u64 {
            let ingress = make_stream(user, 1, 4, &[0], 64);
            write_pcap(&ingress, &dir.path().join(format!("u{user}_s1_d4.pcap"))).unwrap();
            if user >= 5 {
                write_pcap(
                    &shift_stream(&ingress, 100),
                    &dir.path().join(format!("u{user}_s1_d4.egress.pcap")),
                )
                .unwrap();
            }
        }
        let outcome = pair_streams(dir.path()).unwrap();
        assert_eq!(outcome.pairs.len(), 5);
        assert_eq!(outcome.unmatched.len(), 5);
    }

    #[test]
    fn latency_is_subtraction() {
        let ingress = make_stream(1, 1, 2, &[1_000_000], 64);
        let egress = shift_stream(&ingress, 5000);
        let pair = StreamPair {
            user_id: 1,
            src: 1,
            dst: 2,
            ingress,
            egress,
            sidecar: None,
        };
        let m = compute_user_metrics(&pair).unwrap();
        assert!((m.latency_ms[0] - 5.0).abs() < 1e-12);
        assert_eq!(m.error_rate, None);
    }

    #[test]
    fn loss_rate_is_ratio() {
        let times: Vec<u64> = (0..100).map(|i| i * 1000).collect();
        let ingress = make_stream(1, 1, 2, &times, 64);
        let mut egress = shift_stream(&ingress, 100);
        egress.records.truncate(97);
        let pair = StreamPair {
            user_id: 1,
            src: 1,
            dst: 2,
            ingress,
            egress,
            sidecar: None,
        };
        let m = compute_user_metrics(&pair).unwrap();
        assert!((m.loss_rate - 0.03).abs() < 1e-12);
    }

    #[test]
    fn mean_and_p95_match_brute_force() {
        let times: Vec<u64> = (0..1000).map(|i| i * 777).collect();
        let ingress = make_stream(2, 1, 3, &times, 128);
        let mut egress = ingress.clone();
        for (i, rec) in egress.records.iter_mut().enumerate() {
            let t = rec.time_us() + 400 + (i as u64 % 37) * 13;
            rec.timestamp_s = (t / 1_000_000) as u32;
            rec.timestamp_us = (t % 1_000_000) as u32;
        }
        let pair = StreamPair {
            user_id: 2,
            src: 1,
            dst: 3,
            ingress,
            egress,
            sidecar: None,
        };
        let m = compute_user_metrics(&pair).unwrap();

        // independent flat recomputation
        let lats: Vec<f64> = (0..1000)
            .map(|i| (400 + (i as u64 % 37) * 13) as f64 / 1000.0)
            .collect();
        let mean = lats.iter().sum::<f64>() / lats.len() as f64;
        let mut sorted = lats.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p95 = sorted[((0.95 * 999.0f64).round()) as usize];
        assert!((m.mean_latency_ms - mean).abs() < 1e-9);
        assert!((m.p95_latency_ms - p95).abs() < 1e-9);
    }

    #[test]
    fn orphan_egress_rejected() {
        let ingress = make_stream(1, 1, 2, &[0], 64);
        let egress = make_stream(1, 1, 2, &[0, 1000, 2000], 64);
        let pair = StreamPair {
            user_id: 1,
            src: 1,
            dst: 2,
            ingress,
            egress,
            sidecar: None,
        };
        assert!(matches!(
            compute_user_metrics(&pair),
            Err(MetricsError::OrphanEgress(_))
        ));
    }

    #[test]
    fn sidecar_drives_error_rate() {
        let times: Vec<u64> = (0..10).map(|i| i * 1000).collect();
        let ingress = make_stream(1, 1, 2, &times, 64);
        let mut egress = shift_stream(&ingress, 100);
        egress.records.truncate(8);
        let sidecar: Vec<SidecarRecord> = (0..10)
            .map(|i| SidecarRecord {
                sequence: i,
                ingress_us: i * 1000,
                egress_us: if i < 8 { Some(i * 1000 + 100) } else { None },
                cause: match i {
                    8 => Some(SidecarCause::Corruption),
                    9 => Some(SidecarCause::Capacity),
                    _ => None,
                },
            })
            .collect();
        let pair = StreamPair {
            user_id: 1,
            src: 1,
            dst: 2,
            ingress,
            egress,
            sidecar: Some(sidecar),
        };
        let m = compute_user_metrics(&pair).unwrap();
        assert!((m.loss_rate - 0.2).abs() < 1e-12);
        assert!((m.error_rate.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sidecar_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u1_s1_d2.records.tsv");
        let records = vec![
            SidecarRecord {
                sequence: 0,
                ingress_us: 100,
                egress_us: Some(600),
                cause: None,
            },
            SidecarRecord {
                sequence: 1,
                ingress_us: 200,
                egress_us: None,
                cause: Some(SidecarCause::Corruption),
            },
        ];
        write_sidecar(&records, &path).unwrap();
        assert_eq!(read_sidecar(&path).unwrap(), records);
    }

    fn fv(a: f64, b: f64, c: f64, d: f64) -> FeatureVector {
        FeatureVector {
            latency_req_ms_mean: a,
            demand_dur_s_mean: b,
            demand_freq_per_hour_mean: c,
            packet_avg_size_bytes: d,
        }
    }

    #[test]
    fn identical_vectors_score_one() {
        let x = fv(50.0, 120.0, 4.0, 160.0);
        let r = conformity_score(&x, &x, &ConformityWeights::default(), "a", "b").unwrap();
        assert_eq!(r.aggregate, 1.0);
    }

    #[test]
    fn weights_match_published_equation() {
        // similarities forced to (1,1,1,0): aggregate (6+4+2)/15 = 0.8
        let reference = fv(50.0, 120.0, 4.0, 160.0);
        let candidate = fv(50.0, 120.0, 4.0, 1600.0); // size off by >100%
        let r = conformity_score(
            &candidate,
            &reference,
            &ConformityWeights::default(),
            "a",
            "b",
        )
        .unwrap();
        assert_eq!(r.s_size, 0.0);
        assert!((r.aggregate - 0.8).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_reference_rejected() {
        let reference = fv(50.0, 0.0, 4.0, 160.0);
        let candidate = fv(50.0, 120.0, 4.0, 160.0);
        assert!(matches!(
            conformity_score(
                &candidate,
                &reference,
                &ConformityWeights::default(),
                "a",
                "b"
            ),
            Err(MetricsError::NonPositiveReference(_, _))
        ));
    }

    #[test]
    fn scale_property_single_feature() {
        let reference = fv(50.0, 120.0, 4.0, 160.0);
        for delta in [0.1, 0.5, 0.9, 1.0] {
            let mut candidate = reference;
            candidate.demand_dur_s_mean *= 1.0 + delta;
            let r = conformity_score(
                &candidate,
                &reference,
                &ConformityWeights::default(),
                "a",
                "b",
            )
            .unwrap();
            let expect = 1.0 - delta.min(1.0) * 4.0 / 15.0;
            assert!(
                (r.aggregate - expect).abs() < 1e-12,
                "delta {delta}: {} vs {expect}",
                r.aggregate
            );
        }
    }

    proptest! {
        #[test]
        fn prop_self_conformity_is_one(
            a in 1e-3..1e4f64,
            b in 1e-3..1e4f64,
            c in 1e-3..1e4f64,
            d in 1e-3..1e4f64,
        ) {
            let x = fv(a, b, c, d);
            let r = conformity_score(&x, &x, &ConformityWeights::default(), "x", "x").unwrap();
            prop_assert_eq!(r.aggregate, 1.0);
        }

        #[test]
        fn prop_aggregate_bounded_and_monotone(
            a in 1e-3..1e4f64,
            b in 1e-3..1e4f64,
            scale1 in 1.0..3.0f64,
            scale2 in 1.0..3.0f64,
        ) {
            let reference = fv(a, b, 4.0, 160.0);
            let mut c1 = reference;
            let mut c2 = reference;
            c1.latency_req_ms_mean *= scale1.min(scale2);
            c2.latency_req_ms_mean *= scale1.max(scale2);
            let r1 = conformity_score(&c1, &reference, &ConformityWeights::default(), "a", "b").unwrap();
            let r2 = conformity_score(&c2, &reference, &ConformityWeights::default(), "a", "b").unwrap();
            prop_assert!((0.0..=1.0).contains(&r1.aggregate));
            prop_assert!(r2.aggregate <= r1.aggregate + 1e-12);
        }
    }

    #[test]
    fn export_report_roundtrip_and_golden() {
        let metrics = vec![
            UserMetrics {
                user_id: 2,
                src: 1,
                dst: 4,
                packet_count: 10,
                latency_ms: vec![1.0; 9],
                loss_rate: 0.1,
                error_rate: Some(0.0),
                mean_latency_ms: 1.0,
                p95_latency_ms: 1.0,
            },
            UserMetrics {
                user_id: 0,
                src: 1,
                dst: 4,
                packet_count: 5,
                latency_ms: vec![2.0; 5],
                loss_rate: 0.0,
                error_rate: None,
                mean_latency_ms: 2.0,
                p95_latency_ms: 2.0,
            },
            UserMetrics {
                user_id: 1,
                src: 2,
                dst: 4,
                packet_count: 8,
                latency_ms: vec![0.5; 8],
                loss_rate: 0.0,
                error_rate: Some(0.0),
                mean_latency_ms: 0.5,
                p95_latency_ms: 0.5,
            },
        ];
        let x = fv(50.0, 120.0, 4.0, 160.0);
        let report =
            conformity_score(&x, &x, &ConformityWeights::default(), "cand", "ref").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.tsv");
        export_report(&metrics, Some(&report), &path, ReportFormat::Tsv).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let golden = include_str!("../fixtures/report_golden.tsv");
        assert_eq!(text, golden);

        // re-export identical
        let path2 = dir.path().join("report2.tsv");
        export_report(&metrics, Some(&report), &path2, ReportFormat::Tsv).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn export_empty_metrics() {
        let x = fv(50.0, 120.0, 4.0, 160.0);
        let report =
            conformity_score(&x, &x, &ConformityWeights::default(), "c", "r").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        export_report(&[], Some(&report), &path, ReportFormat::Tsv).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("user_id"));
        assert!(lines[1].starts_with("# conformity"));
    }

    #[test]
    fn feature_extraction_subtracts_header() {
        let dir = tempfile::tempdir().unwrap();
        // all packets exactly 192 B captured -> 160 B payload feature
        let stream = make_stream(0, 1, 4, &[0, 1000, 2000], 160);
        write_pcap(&stream, &dir.path().join("u0_s1_d4.pcap")).unwrap();
        let manifest = DatasetManifest {
            label: "test".into(),
            profiles: crate::traffic5g::default_profiles(),
            schedules: vec![DemandSchedule {
                user_id: 0,
                sessions: vec![crate::traffic5g::Session {
                    app_kind: AppKind::Voip,
                    start_s: 0.0,
                    end_s: 60.0,
                    dst_node: 4,
                }],
            }],
            duration_s: 3600.0,
            user_count: 1,
            pcap_files: vec!["u0_s1_d4.pcap".into()],
        };
        write_manifest(&manifest, &dir.path().join("manifest.json")).unwrap();
        let features = extract_features(dir.path()).unwrap();
        assert!((features.packet_avg_size_bytes - 160.0).abs() < 1e-9);
        assert!((features.latency_req_ms_mean - 50.0).abs() < 1e-9);
        assert!((features.demand_dur_s_mean - 60.0).abs() < 1e-9);
        assert!((features.demand_freq_per_hour_mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn missing_manifest_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            extract_features(dir.path()),
            Err(MetricsError::MissingManifest(_))
        ));
    }
}
