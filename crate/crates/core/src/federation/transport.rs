//! Coordinator-side transports.
//!
//! Both transports finish registration in their constructor and then funnel
//! every participant message into one queue owned by the coordinator, so
//! aggregation state has a single owner while participants run concurrently.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::metrics::MetricValue;

use super::codec::{read_message, write_message};
use super::participant::{Participant, ParticipantLink};
use super::{Body, ProtocolError, Registration, RoundMessage, SCHEMA_VERSION};

/// Something a participant sent, or the reason its connection failed.
#[derive(Debug)]
pub enum Incoming {
    Message(u32, RoundMessage),
    Failed(u32, ProtocolError),
}

pub trait CoordinatorTransport {
    fn registrations(&self) -> &BTreeMap<u32, Registration>;
    fn send(&mut self, participant: u32, msg: &RoundMessage) -> Result<(), ProtocolError>;
    /// `None` when nothing arrived within `timeout`.
    fn recv_timeout(&mut self, timeout: Duration) -> Option<Incoming>;
}

type ParticipantOutcome = Result<Option<Vec<MetricValue>>, ProtocolError>;

/// Participants run on their own threads and talk over channels.
pub struct InProcessTransport {
    registrations: BTreeMap<u32, Registration>,
    to_participants: BTreeMap<u32, Sender<RoundMessage>>,
    from_participants: Receiver<Incoming>,
    handles: Vec<(u32, JoinHandle<ParticipantOutcome>)>,
}

struct ChannelLink {
    id: u32,
    tx: Sender<Incoming>,
    rx: Receiver<RoundMessage>,
}

impl ParticipantLink for ChannelLink {
    fn send(&mut self, msg: &RoundMessage) -> Result<(), ProtocolError> {
        self.tx
            .send(Incoming::Message(self.id, msg.clone()))
            .map_err(|_| ProtocolError::Disconnected(self.id))
    }

    fn recv(&mut self) -> Result<Option<RoundMessage>, ProtocolError> {
        Ok(self.rx.recv().ok())
    }
}

impl InProcessTransport {
    pub fn spawn(participants: Vec<Participant>, timeout: Duration) -> Result<Self, ProtocolError> {
        let (tx, from_participants) = mpsc::channel();
        let mut to_participants = BTreeMap::new();
        let mut handles = Vec::new();
        for participant in participants {
            let id = participant.id();
            if to_participants.contains_key(&id) {
                return Err(ProtocolError::DuplicateRegistration(id));
            }
            let (to_tx, to_rx) = mpsc::channel();
            to_participants.insert(id, to_tx);
            let mut link = ChannelLink {
                id,
                tx: tx.clone(),
                rx: to_rx,
            };
            handles.push((id, thread::spawn(move || participant.serve(&mut link))));
        }
        drop(tx);

        let expected = to_participants.len();
        let deadline = Instant::now() + timeout;
        let mut registrations = BTreeMap::new();
        while registrations.len() < expected {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match from_participants.recv_timeout(remaining) {
                Ok(Incoming::Message(id, msg)) => {
                    let reg = check_registration(&msg)?;
                    if registrations.insert(id, reg).is_some() {
                        return Err(ProtocolError::DuplicateRegistration(id));
                    }
                }
                Ok(Incoming::Failed(_, e)) => return Err(e),
                Err(_) => {
                    return Err(ProtocolError::RegistrationTimeout {
                        expected,
                        registered: registrations.len(),
                    })
                }
            }
        }
        Ok(Self {
            registrations,
            to_participants,
            from_participants,
            handles,
        })
    }

    /// Hangs up on every participant and returns what each one saw last.
    pub fn shutdown(mut self) -> Vec<(u32, ParticipantOutcome)> {
        self.to_participants.clear();
        std::mem::take(&mut self.handles)
            .into_iter()
            .map(|(id, h)| (id, h.join().expect("participant thread panicked")))
            .collect()
    }
}

impl Drop for InProcessTransport {
    fn drop(&mut self) {
        self.to_participants.clear();
        for (_, h) in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl CoordinatorTransport for InProcessTransport {
    fn registrations(&self) -> &BTreeMap<u32, Registration> {
        &self.registrations
    }

    fn send(&mut self, participant: u32, msg: &RoundMessage) -> Result<(), ProtocolError> {
        self.to_participants
            .get(&participant)
            .ok_or(ProtocolError::UnknownParticipant(participant))?
            .send(msg.clone())
            .map_err(|_| ProtocolError::Disconnected(participant))
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Option<Incoming> {
        self.from_participants.recv_timeout(timeout).ok()
    }
}

fn check_registration(msg: &RoundMessage) -> Result<Registration, ProtocolError> {
    if msg.version != SCHEMA_VERSION {
        return Err(ProtocolError::VersionMismatch {
            expected: SCHEMA_VERSION,
            found: msg.version,
        });
    }
    match (&msg.body, msg.participant_id) {
        (Body::Register(reg), Some(_)) => Ok(*reg),
        (Body::Register(_), None) => Err(ProtocolError::Malformed(
            "registration without a participant id".into(),
        )),
        (other, id) => Err(ProtocolError::UnexpectedPhase {
            participant: id.unwrap_or(u32::MAX),
            expected: "register",
            found: other.phase(),
        }),
    }
}

enum Event {
    Registered(u32, Registration, TcpStream),
    Incoming(Incoming),
    Rejected(ProtocolError),
}

/// Accepts participant connections on a TCP listener.
pub struct TcpCoordinatorTransport {
    registrations: BTreeMap<u32, Registration>,
    writers: BTreeMap<u32, TcpStream>,
    events: Receiver<Event>,
    readers: Vec<JoinHandle<()>>,
}

impl TcpCoordinatorTransport {
    /// Accepts connections until `expected` participants have registered or
    /// `timeout` expires. A participant speaking another schema version, or
    /// anything other than a registration as its first frame, aborts.
    pub fn accept(
        listener: &TcpListener,
        expected: usize,
        timeout: Duration,
        shutdown: Option<Arc<AtomicBool>>,
    ) -> Result<Self, ProtocolError> {
        listener.set_nonblocking(true)?;
        let (tx, events) = mpsc::channel();
        let mut transport = Self {
            registrations: BTreeMap::new(),
            writers: BTreeMap::new(),
            events,
            readers: Vec::new(),
        };
        let deadline = Instant::now() + timeout;
        while transport.registrations.len() < expected {
            if shutdown.as_ref().is_some_and(|s| s.load(Ordering::SeqCst)) {
                return Err(ProtocolError::Interrupted);
            }
            if Instant::now() >= deadline {
                return Err(ProtocolError::RegistrationTimeout {
                    expected,
                    registered: transport.registrations.len(),
                });
            }
            match listener.accept() {
                Ok((stream, peer)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    log::debug!("connection from {peer}");
                    let tx = tx.clone();
                    transport.readers.push(thread::spawn(move || read_connection(stream, tx)));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {}
                Err(e) => return Err(e.into()),
            }
            match transport.events.recv_timeout(Duration::from_millis(10)) {
                Ok(Event::Registered(id, reg, writer)) => {
                    if transport.registrations.insert(id, reg).is_some() {
                        return Err(ProtocolError::DuplicateRegistration(id));
                    }
                    log::info!("participant {id} registered ({} of {expected})", transport.registrations.len());
                    transport.writers.insert(id, writer);
                }
                Ok(Event::Rejected(e)) => return Err(e),
                Ok(Event::Incoming(Incoming::Failed(_, e))) => return Err(e),
                Ok(Event::Incoming(Incoming::Message(id, msg))) => {
                    return Err(ProtocolError::UnexpectedPhase {
                        participant: id,
                        expected: "register",
                        found: msg.phase(),
                    })
                }
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {}
            }
        }
        Ok(transport)
    }
}

fn read_connection(mut stream: TcpStream, tx: Sender<Event>) {
    let registration = match read_message(&mut stream) {
        Ok(Some(msg)) => check_registration(&msg).map(|reg| (msg.participant_id.unwrap_or_default(), reg)),
        Ok(None) => Err(ProtocolError::Malformed("connection closed before registering".into())),
        Err(e) => Err(e),
    };
    let id = match registration {
        Ok((id, reg)) => match stream.try_clone() {
            Ok(writer) => {
                let _ = tx.send(Event::Registered(id, reg, writer));
                id
            }
            Err(e) => {
                let _ = tx.send(Event::Rejected(e.into()));
                return;
            }
        },
        Err(e) => {
            let _ = tx.send(Event::Rejected(e));
            return;
        }
    };
    loop {
        let event = match read_message(&mut stream) {
            Ok(Some(msg)) => Incoming::Message(id, msg),
            Ok(None) => Incoming::Failed(id, ProtocolError::Disconnected(id)),
            Err(e) => Incoming::Failed(id, e),
        };
        let stop = matches!(event, Incoming::Failed(..));
        if tx.send(Event::Incoming(event)).is_err() || stop {
            return;
        }
    }
}

impl CoordinatorTransport for TcpCoordinatorTransport {
    fn registrations(&self) -> &BTreeMap<u32, Registration> {
        &self.registrations
    }

    fn send(&mut self, participant: u32, msg: &RoundMessage) -> Result<(), ProtocolError> {
        let stream = self
            .writers
            .get_mut(&participant)
            .ok_or(ProtocolError::UnknownParticipant(participant))?;
        write_message(stream, msg)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Option<Incoming> {
        match self.events.recv_timeout(timeout) {
            Ok(Event::Incoming(incoming)) => Some(incoming),
            Ok(Event::Registered(id, ..)) => Some(Incoming::Failed(id, ProtocolError::DuplicateRegistration(id))),
            Ok(Event::Rejected(e)) => Some(Incoming::Failed(u32::MAX, e)),
            Err(_) => None,
        }
    }
}

impl Drop for TcpCoordinatorTransport {
    fn drop(&mut self) {
        for stream in self.writers.values() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        for h in self.readers.drain(..) {
            let _ = h.join();
        }
    }
}

/// Participant side of a TCP connection.
pub struct TcpParticipantLink {
    stream: TcpStream,
}

impl TcpParticipantLink {
    /// Connects, retrying until `timeout` so participants may start before
    /// the coordinator listens.
    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<Self, ProtocolError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let deadline = Instant::now() + timeout;
        loop {
            let mut last_err = None;
            for a in &addrs {
                match TcpStream::connect(a) {
                    Ok(stream) => {
                        stream.set_nodelay(true)?;
                        return Ok(Self { stream });
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            if Instant::now() >= deadline {
                return Err(last_err
                    .map(ProtocolError::Io)
                    .unwrap_or_else(|| ProtocolError::Malformed("no address to connect to".into())));
            }
            thread::sleep(Duration::from_millis(50));
        }
    }
}

impl ParticipantLink for TcpParticipantLink {
    fn send(&mut self, msg: &RoundMessage) -> Result<(), ProtocolError> {
        write_message(&mut self.stream, msg)
    }

    fn recv(&mut self) -> Result<Option<RoundMessage>, ProtocolError> {
        match read_message(&mut self.stream) {
            Err(ProtocolError::Io(e)) if e.kind() == ErrorKind::ConnectionReset => Ok(None),
            other => other,
        }
    }
}
