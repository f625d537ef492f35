//! Coordinator/participant protocol for FLAM rounds.
//!
//! A round runs in up to two request/response phases:
//!
//! 1. `stat_request` → `stat_response`: only when some requested metric needs
//!    a global statistic (R² needs the global target mean). Participants send
//!    additive `(sum, count)` pieces.
//! 2. `am_request` → `am_response`: the request carries the aggregated
//!    statistics; each participant answers with one aggregatable measure
//!    computed from its own data.
//!
//! The coordinator sums the measures in participant-id order, recombines one
//! metric per requested spec and sends a `result_broadcast`. Participants
//! announce themselves once with a `register` message carrying their task,
//! class count and schema version.
//!
//! Messages travel over a [`CoordinatorTransport`]: in-process channels or
//! TCP with the length-prefixed JSON framing in [`codec`].

pub mod codec;
mod coordinator;
mod participant;
pub mod transport;

use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::am::{AggregatableMeasure, GlobalStatistics, LocalStatistic, StatisticId};
use crate::metrics::{LabeledPredictions, MetricSpec, MetricValue, Task};

pub use codec::{decode_message, encode_message, read_message, write_message, MAX_FRAME_BYTES};
pub use coordinator::{Coordinator, CoordinatorConfig, RoundOutcome};
pub use participant::{Participant, ParticipantLink};
pub use transport::{
    CoordinatorTransport, Incoming, InProcessTransport, TcpCoordinatorTransport, TcpParticipantLink,
};

pub const SCHEMA_VERSION: u32 = 1;

pub const ENV_COORDINATOR_ADDR: &str = "FLAM_COORDINATOR_ADDR";
pub const ENV_PHASE_TIMEOUT_MS: &str = "FLAM_PHASE_TIMEOUT_MS";
pub const ENV_REGISTRATION_TIMEOUT_MS: &str = "FLAM_REGISTRATION_TIMEOUT_MS";

pub const DEFAULT_PHASE_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_REGISTRATION_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub version: u32,
    pub round_id: u64,
    /// Sender for participant messages, addressee for coordinator messages.
    pub participant_id: Option<u32>,
    #[serde(flatten)]
    pub body: Body,
}

impl RoundMessage {
    pub fn new(round_id: u64, participant_id: Option<u32>, body: Body) -> Self {
        Self {
            version: SCHEMA_VERSION,
            round_id,
            participant_id,
            body,
        }
    }

    pub fn phase(&self) -> &'static str {
        self.body.phase()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", content = "payload", rename_all = "snake_case")]
pub enum Body {
    Register(Registration),
    StatRequest { statistics: Vec<StatisticId> },
    StatResponse { statistics: Vec<LocalStatistic> },
    AmRequest { specs: Vec<MetricSpec>, statistics: GlobalStatistics },
    AmResponse { measure: AggregatableMeasure },
    ResultBroadcast { values: Vec<MetricValue> },
    Error { message: String },
}

impl Body {
    pub const PHASES: [&'static str; 7] = [
        "register",
        "stat_request",
        "stat_response",
        "am_request",
        "am_response",
        "result_broadcast",
        "error",
    ];

    pub fn phase(&self) -> &'static str {
        match self {
            Body::Register(_) => "register",
            Body::StatRequest { .. } => "stat_request",
            Body::StatResponse { .. } => "stat_response",
            Body::AmRequest { .. } => "am_request",
            Body::AmResponse { .. } => "am_response",
            Body::ResultBroadcast { .. } => "result_broadcast",
            Body::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub task: Task,
    pub class_count: Option<usize>,
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("truncated frame: header declares {declared} bytes, {available} available")]
    Truncated { declared: usize, available: usize },

    #[error("frame of {size} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")]
    Oversize { size: usize },

    #[error("unknown phase `{0}`")]
    UnknownPhase(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("malformed message: {0}")]
    Malformed(String),

    #[error("participant {participant}: expected `{expected}`, got `{found}`")]
    UnexpectedPhase {
        participant: u32,
        expected: &'static str,
        found: &'static str,
    },

    #[error("participant {0} answered twice in one phase")]
    DuplicateResponse(u32),

    #[error("participant {0} registered twice")]
    DuplicateRegistration(u32),

    #[error("message from unregistered participant {0}")]
    UnknownParticipant(u32),

    #[error("participant {participant} does not match the federation: {reason}")]
    RegistrationMismatch { participant: u32, reason: String },

    #[error("participant {participant} reported an error: {message}")]
    ParticipantFailed { participant: u32, message: String },

    #[error("timed out in {phase}; missing participants {missing:?}")]
    Timeout { phase: &'static str, missing: Vec<u32> },

    #[error("timed out waiting for registrations: {registered} of {expected} participants joined")]
    RegistrationTimeout { expected: usize, registered: usize },

    #[error("participant {0} disconnected")]
    Disconnected(u32),

    #[error("interrupted by shutdown request")]
    Interrupted,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn participants_for(partitions: &[LabeledPredictions]) -> Vec<Participant> {
    partitions
        .iter()
        .enumerate()
        .map(|(i, p)| Participant::new(i as u32, p.clone()))
        .collect()
}

/// One round with participant `i` holding `partitions[i]`, each on its own
/// thread, over channels.
pub fn evaluate_in_process(
    partitions: &[LabeledPredictions],
    specs: &[MetricSpec],
    config: CoordinatorConfig,
) -> crate::Result<RoundOutcome> {
    let mut transport = InProcessTransport::spawn(participants_for(partitions), DEFAULT_REGISTRATION_TIMEOUT)?;
    Coordinator::new(config).run_round(&mut transport, specs)
}

/// One round over loopback TCP, each participant on its own thread with its
/// own connection.
pub fn evaluate_over_tcp(
    partitions: &[LabeledPredictions],
    specs: &[MetricSpec],
    config: CoordinatorConfig,
) -> crate::Result<RoundOutcome> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handles: Vec<_> = participants_for(partitions)
        .into_iter()
        .map(|participant| {
            thread::spawn(move || -> Result<_, ProtocolError> {
                let mut link = TcpParticipantLink::connect(addr, DEFAULT_REGISTRATION_TIMEOUT)?;
                participant.serve(&mut link)
            })
        })
        .collect();
    let outcome = TcpCoordinatorTransport::accept(
        &listener,
        partitions.len(),
        DEFAULT_REGISTRATION_TIMEOUT,
        config.shutdown.clone(),
    )
    .map_err(crate::Error::from)
    .and_then(|mut transport| Coordinator::new(config).run_round(&mut transport, specs));
    // unaccepted connections are reset so their participants stop waiting
    drop(listener);
    for h in handles {
        let _ = h.join();
    }
    outcome
}
