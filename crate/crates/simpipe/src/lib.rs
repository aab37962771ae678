//! Self-contained simulation pipeline that synthesizes 5G-over-OTN
//! network traffic datasets for machine-learning research.
//!
//! The pipeline has four file-coupled stages: mobility synthesis, 5G
//! traffic demand and packet generation, optical transport simulation,
//! and metric extraction with cross-dataset conformity scoring. Pcap
//! files are the only interchange between stages; the orchestrator
//! watches directories and fires each stage on file-count triggers.

pub mod metrics;
pub mod mobility;
pub mod orchestrator;
pub mod otn;
pub mod pcapio;
pub mod traffic5g;
