use crate::am::{compute_am, GlobalStatistics, LocalStatistic};
use crate::metrics::{LabeledPredictions, MetricValue};

use super::{Body, ProtocolError, Registration, RoundMessage, SCHEMA_VERSION};

/// Participant end of a connection.
pub trait ParticipantLink {
    fn send(&mut self, msg: &RoundMessage) -> Result<(), ProtocolError>;
    /// `Ok(None)` once the coordinator has closed the connection.
    fn recv(&mut self) -> Result<Option<RoundMessage>, ProtocolError>;
}

/// Holds one participant's local data and answers coordinator requests
/// from it plus the statistics the coordinator broadcasts.
#[derive(Debug, Clone)]
pub struct Participant {
    id: u32,
    data: LabeledPredictions,
    schema_version: u32,
    statistics: GlobalStatistics,
    results: Option<Vec<MetricValue>>,
}

impl Participant {
    pub fn new(id: u32, data: LabeledPredictions) -> Self {
        Self {
            id,
            data,
            schema_version: SCHEMA_VERSION,
            statistics: GlobalStatistics::default(),
            results: None,
        }
    }

    /// Speak a different schema version; only useful for exercising the
    /// coordinator's version gate.
    pub fn with_schema_version(mut self, version: u32) -> Self {
        self.schema_version = version;
        self
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn registration(&self) -> Registration {
        Registration {
            task: self.data.task(),
            class_count: self.data.class_count(),
        }
    }

    pub fn register_message(&self) -> RoundMessage {
        self.reply(0, Body::Register(self.registration()))
    }

    /// Last result broadcast received.
    pub fn results(&self) -> Option<&[MetricValue]> {
        self.results.as_deref()
    }

    fn reply(&self, round_id: u64, body: Body) -> RoundMessage {
        RoundMessage {
            version: self.schema_version,
            round_id,
            participant_id: Some(self.id),
            body,
        }
    }

    /// Applies one coordinator message; returns the reply, if any.
    pub fn handle(&mut self, msg: &RoundMessage) -> Option<RoundMessage> {
        let round = msg.round_id;
        if msg.version != self.schema_version {
            return Some(self.reply(
                round,
                Body::Error {
                    message: format!(
                        "schema version mismatch: expected {}, found {}",
                        self.schema_version, msg.version
                    ),
                },
            ));
        }
        let body = match &msg.body {
            Body::StatRequest { statistics } => {
                match statistics
                    .iter()
                    .map(|&id| LocalStatistic::compute(id, &self.data))
                    .collect::<Result<Vec<_>, _>>()
                {
                    Ok(statistics) => Body::StatResponse { statistics },
                    Err(e) => Body::Error { message: e.to_string() },
                }
            }
            Body::AmRequest { statistics, .. } => {
                self.statistics = *statistics;
                match compute_am(&self.data, &self.statistics) {
                    Ok(measure) => Body::AmResponse { measure },
                    Err(e) => Body::Error { message: e.to_string() },
                }
            }
            Body::ResultBroadcast { values } => {
                self.results = Some(values.clone());
                return None;
            }
            Body::Error { message } => {
                log::warn!("participant {}: coordinator aborted round {round}: {message}", self.id);
                return None;
            }
            other => Body::Error {
                message: format!("participants do not accept `{}`", other.phase()),
            },
        };
        Some(self.reply(round, body))
    }

    /// Registers, then answers requests until the coordinator hangs up.
    /// Returns the last broadcast results.
    pub fn serve<L: ParticipantLink>(mut self, link: &mut L) -> Result<Option<Vec<MetricValue>>, ProtocolError> {
        link.send(&self.register_message())?;
        while let Some(msg) = link.recv()? {
            if let Some(reply) = self.handle(&msg) {
                link.send(&reply)?;
            }
        }
        Ok(self.results)
    }
}
