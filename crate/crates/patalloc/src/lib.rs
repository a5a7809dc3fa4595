//! Topology-aware allocation of multi-accelerator jobs on multi-GPU servers.
//!
//! The crate models a server's accelerator interconnect as a weighted graph
//! ([`topology`]), describes a job's inter-GPU communication as a small
//! pattern graph ([`appgraph`]), enumerates every placement of the pattern
//! onto the free devices ([`matcher`]), scores placements by aggregated,
//! predicted-effective, and preserved bandwidth ([`scoring`]), and selects
//! one under four allocation policies ([`policies`]). A FIFO scheduling
//! simulator ([`simulator`]) replays job streams and logs per-job
//! allocation quality, using effective bandwidth as the execution-time
//! proxy.

pub mod appgraph;
pub mod matcher;
pub mod policies;
pub mod scoring;
pub mod simulator;
pub mod topology;

pub use appgraph::{AppPattern, JobSpec, MixEntry, PatternShape};
pub use matcher::{find_matches, link_census, LinkCensus, Match};
pub use policies::{AllocationDecision, Policy};
pub use scoring::{aggregated_bw, fit_effbw_model, preserved_bw, BwSample, EffBwModel};
pub use simulator::{run_simulation, summarize_log, JobLogRecord, SimConfig};
pub use topology::{AllocationState, DeviceId, HardwareGraph, LinkClass};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown topology `{0}`; valid names: dgx1v, dgx1p, summit, torus2d16, cubemesh16")]
    UnknownTopology(String),

    #[error("topology file: {0}")]
    TopologyFile(String),

    #[error("device id {0} is not a valid device")]
    InvalidDevice(DeviceId),

    #[error("device pair ({0}, {0}) is a self-loop")]
    SelfLoop(DeviceId),

    #[error("device {0} is already allocated")]
    DeviceBusy(DeviceId),

    #[error("device {0} is not allocated")]
    DeviceNotBusy(DeviceId),

    #[error("job file line {line}: {detail}")]
    JobFile { line: usize, detail: String },

    #[error("invalid pattern: {0}")]
    InvalidPattern(String),

    #[error("job mix must not be empty")]
    EmptyMix,

    #[error("embedding cap of {0} raw embeddings exceeded; raise the cap or shrink the job")]
    EmbeddingCapExceeded(usize),

    #[error("match references devices outside the available graph: {0}")]
    MatchInvalid(String),

    #[error("model fit: {0}")]
    Fit(String),

    #[error("model file: {0}")]
    ModelFile(String),

    #[error("samples file line {line}: {detail}")]
    SamplesFile { line: usize, detail: String },

    #[error("log file line {line}: {detail}")]
    LogFile { line: usize, detail: String },

    #[error("job `{job_id}` requests {requested} GPUs but the machine has only {available}")]
    JobTooLarge {
        job_id: String,
        requested: u16,
        available: u16,
    },

    #[error("cannot summarize an empty log")]
    EmptyLog,

    #[error("unknown group-by field `{0}`; valid: all, network, gpus, sensitive")]
    UnknownGroupBy(String),

    #[error("unknown policy `{0}`; valid: baseline, topo, greedy, preserve")]
    UnknownPolicy(String),

    #[error("unknown pattern shape `{0}`; valid: ring, tree, ringtree, full")]
    UnknownShape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
