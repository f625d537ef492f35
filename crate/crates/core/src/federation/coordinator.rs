use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::am::{aggregate_ams, metric_from_am, GlobalStatistics, LocalStatistic, MeanStatistic, StatisticId, StatisticPlan};
use crate::error::{Error, Result};
use crate::metrics::{MetricSpec, MetricValue, Task};

use super::transport::{CoordinatorTransport, Incoming};
use super::{Body, ProtocolError, Registration, RoundMessage, DEFAULT_PHASE_TIMEOUT, SCHEMA_VERSION};

const POLL_SLICE: Duration = Duration::from_millis(100);

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub phase_timeout: Duration,
    /// Aggregate whoever answered when a phase times out instead of aborting.
    pub allow_partial: bool,
    /// Set to abort the round at the next poll.
    pub shutdown: Option<Arc<AtomicBool>>,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            phase_timeout: DEFAULT_PHASE_TIMEOUT,
            allow_partial: false,
            shutdown: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round_id: u64,
    pub values: Vec<MetricValue>,
    /// Participants whose measures were aggregated, ascending.
    pub participants: Vec<u32>,
}

/// Drives rounds over a transport. Holds no participant data, only the
/// expected federation shape.
#[derive(Debug)]
pub struct Coordinator {
    expected_task: Option<Task>,
    expected_class_count: Option<usize>,
    config: CoordinatorConfig,
    next_round: u64,
}

impl Coordinator {
    pub fn new(config: CoordinatorConfig) -> Self {
        Self {
            expected_task: None,
            expected_class_count: None,
            config,
            next_round: 1,
        }
    }

    /// Rejects registrations for another task or class count. Without this
    /// the first registration fixes the shape.
    pub fn expecting(mut self, task: Task, class_count: Option<usize>) -> Self {
        self.expected_task = Some(task);
        self.expected_class_count = class_count;
        self
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    /// One evaluation round. On failure every participant is sent an `error`
    /// message before the error is returned.
    pub fn run_round<T: CoordinatorTransport>(
        &mut self,
        transport: &mut T,
        specs: &[MetricSpec],
    ) -> Result<RoundOutcome> {
        let round_id = self.next_round;
        self.next_round += 1;
        let result = self.round(transport, round_id, specs);
        if let Err(e) = &result {
            log::error!("round {round_id} aborted: {e}");
            let ids: Vec<u32> = transport.registrations().keys().copied().collect();
            for id in ids {
                let msg = RoundMessage::new(round_id, Some(id), Body::Error { message: e.to_string() });
                let _ = transport.send(id, &msg);
            }
        }
        result
    }

    fn round<T: CoordinatorTransport>(
        &self,
        transport: &mut T,
        round_id: u64,
        specs: &[MetricSpec],
    ) -> Result<RoundOutcome> {
        let (task, _) = self.check_registrations(transport.registrations())?;
        for spec in specs {
            spec.validate()?;
            spec.check_task(task)?;
        }
        let mut participants: Vec<u32> = transport.registrations().keys().copied().collect();
        if specs.is_empty() {
            return Ok(RoundOutcome {
                round_id,
                values: Vec::new(),
                participants,
            });
        }

        let plan = StatisticPlan::for_specs(specs);
        let mut statistics = GlobalStatistics::default();
        if !plan.is_empty() {
            let request = Body::StatRequest {
                statistics: plan.phases.clone(),
            };
            let replies = self.exchange(transport, round_id, &participants, &request, "stat_response")?;
            participants = replies.keys().copied().collect();
            statistics = combine_statistics(&plan, replies)?;
        }

        let request = Body::AmRequest {
            specs: specs.to_vec(),
            statistics,
        };
        let replies = self.exchange(transport, round_id, &participants, &request, "am_response")?;
        let participants: Vec<u32> = replies.keys().copied().collect();
        let ams = replies
            .into_values()
            .map(|body| match body {
                Body::AmResponse { measure } => measure,
                _ => unreachable!("exchange only returns the expected phase"),
            })
            .collect::<Vec<_>>();
        let total = aggregate_ams(&ams)?;
        let values = specs
            .iter()
            .map(|spec| metric_from_am(&total, spec))
            .collect::<Result<Vec<_>>>()?;

        for &id in &participants {
            let msg = RoundMessage::new(round_id, Some(id), Body::ResultBroadcast { values: values.clone() });
            transport.send(id, &msg)?;
        }
        Ok(RoundOutcome {
            round_id,
            values,
            participants,
        })
    }

    fn check_registrations(&self, regs: &BTreeMap<u32, Registration>) -> Result<(Task, Option<usize>)> {
        let first = regs.values().next().ok_or(Error::EmptyFederation)?;
        let task = self.expected_task.unwrap_or(first.task);
        let class_count = if self.expected_task.is_some() {
            self.expected_class_count
        } else {
            first.class_count
        };
        for (&participant, reg) in regs {
            if reg.task != task {
                return Err(ProtocolError::RegistrationMismatch {
                    participant,
                    reason: format!("task {} instead of {task}", reg.task),
                }
                .into());
            }
            if task == Task::Classification && class_count.is_some() && reg.class_count != class_count {
                return Err(ProtocolError::RegistrationMismatch {
                    participant,
                    reason: format!(
                        "class count {:?} instead of {:?}",
                        reg.class_count, class_count
                    ),
                }
                .into());
            }
        }
        Ok((task, class_count))
    }

    /// Sends `request` to `participants` and collects one reply of phase
    /// `expected` from each, keyed by participant id.
    fn exchange<T: CoordinatorTransport>(
        &self,
        transport: &mut T,
        round_id: u64,
        participants: &[u32],
        request: &Body,
        expected: &'static str,
    ) -> Result<BTreeMap<u32, Body>> {
        for &id in participants {
            transport.send(id, &RoundMessage::new(round_id, Some(id), request.clone()))?;
        }
        let mut replies = BTreeMap::new();
        let deadline = Instant::now() + self.config.phase_timeout;
        while replies.len() < participants.len() {
            if self.config.shutdown.as_ref().is_some_and(|s| s.load(Ordering::SeqCst)) {
                return Err(ProtocolError::Interrupted.into());
            }
            let now = Instant::now();
            if now >= deadline {
                let missing: Vec<u32> = participants
                    .iter()
                    .copied()
                    .filter(|id| !replies.contains_key(id))
                    .collect();
                if self.config.allow_partial && !replies.is_empty() {
                    log::warn!("{expected}: proceeding without participants {missing:?}");
                    break;
                }
                return Err(ProtocolError::Timeout {
                    phase: expected,
                    missing,
                }
                .into());
            }
            let Some(incoming) = transport.recv_timeout(POLL_SLICE.min(deadline - now)) else {
                continue;
            };
            let (id, msg) = match incoming {
                Incoming::Message(id, msg) => (id, msg),
                Incoming::Failed(id, e) => {
                    if self.config.allow_partial && !participants.contains(&id) {
                        continue;
                    }
                    return Err(e.into());
                }
            };
            if !participants.contains(&id) {
                if transport.registrations().contains_key(&id) {
                    log::warn!("ignoring {} from excluded participant {id}", msg.phase());
                    continue;
                }
                return Err(ProtocolError::UnknownParticipant(id).into());
            }
            if msg.version != SCHEMA_VERSION {
                return Err(ProtocolError::VersionMismatch {
                    expected: SCHEMA_VERSION,
                    found: msg.version,
                }
                .into());
            }
            if msg.round_id != round_id {
                log::warn!(
                    "ignoring {} for round {} from participant {id} during round {round_id}",
                    msg.phase(),
                    msg.round_id
                );
                continue;
            }
            if let Body::Error { message } = msg.body {
                return Err(ProtocolError::ParticipantFailed {
                    participant: id,
                    message,
                }
                .into());
            }
            if msg.phase() != expected {
                return Err(ProtocolError::UnexpectedPhase {
                    participant: id,
                    expected,
                    found: msg.phase(),
                }
                .into());
            }
            if replies.insert(id, msg.body).is_some() {
                return Err(ProtocolError::DuplicateResponse(id).into());
            }
        }
        Ok(replies)
    }
}

fn combine_statistics(plan: &StatisticPlan, replies: BTreeMap<u32, Body>) -> Result<GlobalStatistics> {
    let mut means = Vec::new();
    for (participant, body) in replies {
        let Body::StatResponse { statistics } = body else {
            unreachable!("exchange only returns the expected phase");
        };
        for id in &plan.phases {
            let found = statistics.iter().find(|s| s.id() == *id);
            match (id, found) {
                (StatisticId::GlobalMean, Some(LocalStatistic::GlobalMean(m))) => means.push(*m),
                (_, None) => {
                    return Err(ProtocolError::Malformed(format!(
                        "participant {participant} omitted statistic {id:?}"
                    ))
                    .into())
                }
            }
        }
    }
    let mut stats = GlobalStatistics::default();
    if plan.phases.contains(&StatisticId::GlobalMean) {
        stats.global_mean = Some(MeanStatistic::aggregate(&means).global_mean()?);
    }
    Ok(stats)
}
