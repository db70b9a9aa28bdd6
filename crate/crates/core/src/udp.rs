//! Datagram protocol between plant and controller.
//!
//! Layout (little-endian): `"SNMP"`, version `u8 = 1`, kind `u8`, seq `u32`,
//! timestamp `u64` ns, then `f64` payload — three values for a pose, two for
//! wheel rates and commands.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};

use thiserror::Error;

use crate::se2::Pose;
use crate::skidsteer::WheelRates;

pub const MAGIC: [u8; 4] = *b"SNMP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
pub const POSE_LEN: usize = HEADER_LEN + 24;
pub const RATES_LEN: usize = HEADER_LEN + 16;
/// Largest datagram any endpoint accepts.
pub const MAX_DATAGRAM: usize = POSE_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    Pose = 1,
    Rates = 2,
    Command = 3,
}

impl MessageKind {
    pub const ALL: [MessageKind; 3] = [MessageKind::Pose, MessageKind::Rates, MessageKind::Command];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Pose),
            2 => Some(Self::Rates),
            3 => Some(Self::Command),
            _ => None,
        }
    }

    pub fn wire_len(self) -> usize {
        match self {
            Self::Pose => POSE_LEN,
            Self::Rates | Self::Command => RATES_LEN,
        }
    }

    fn index(self) -> usize {
        self as usize - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payload {
    Pose(Pose<f64>),
    Rates(WheelRates<f64>),
    Command(WheelRates<f64>),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::Pose(_) => MessageKind::Pose,
            Self::Rates(_) => MessageKind::Rates,
            Self::Command(_) => MessageKind::Command,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Message {
    pub seq: u32,
    pub timestamp_ns: u64,
    pub payload: Payload,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    /// Bitwise equality; unlike `==` this treats NaN payloads as equal.
    pub fn bit_eq(&self, other: &Message) -> bool {
        self.seq == other.seq && self.timestamp_ns == other.timestamp_ns && encode(self) == encode(other)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown message kind {0}")]
    Kind(u8),
    #[error("{kind:?} message must be {expected} bytes, got {found}")]
    Length { kind: MessageKind, expected: usize, found: usize },
    #[error("datagram of {0} bytes is shorter than the header")]
    Truncated(usize),
    #[error("datagram of {0} bytes exceeds the maximum")]
    Oversized(usize),
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.kind().wire_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.kind() as u8);
    out.extend_from_slice(&msg.seq.to_le_bytes());
    out.extend_from_slice(&msg.timestamp_ns.to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    match msg.payload {
        Payload::Pose(p) => {
            put(p.x());
            put(p.y());
            put(p.alpha);
        }
        Payload::Rates(r) | Payload::Command(r) => {
            put(r.right);
            put(r.left);
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    if bytes.len() > MAX_DATAGRAM {
        return Err(DecodeError::Oversized(bytes.len()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated(bytes.len()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("length checked");
    if magic != MAGIC {
        return Err(DecodeError::Magic(magic));
    }
    if bytes[4] != VERSION {
        return Err(DecodeError::Version(bytes[4]));
    }
    let kind = MessageKind::from_u8(bytes[5]).ok_or(DecodeError::Kind(bytes[5]))?;
    if bytes.len() != kind.wire_len() {
        return Err(DecodeError::Length { kind, expected: kind.wire_len(), found: bytes.len() });
    }
    let seq = u32::from_le_bytes(bytes[6..10].try_into().expect("length checked"));
    let timestamp_ns = u64::from_le_bytes(bytes[10..18].try_into().expect("length checked"));
    let f = |i: usize| f64::from_le_bytes(bytes[HEADER_LEN + 8 * i..HEADER_LEN + 8 * i + 8].try_into().expect("length checked"));
    let payload = match kind {
        MessageKind::Pose => Payload::Pose(Pose::new(f(0), f(1), f(2))),
        MessageKind::Rates => Payload::Rates(WheelRates::new(f(0), f(1))),
        MessageKind::Command => Payload::Command(WheelRates::new(f(0), f(1))),
    };
    Ok(Message { seq, timestamp_ns, payload })
}

/// Receiver-side sequence bookkeeping: drops anything not newer than the
/// last accepted message of its kind and counts skipped sequence numbers.
#[derive(Debug, Clone, Default)]
pub struct LatestFilter {
    last: [Option<u32>; 3],
    pub stale: u64,
    pub gaps: u64,
}

impl LatestFilter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Whether `msg` is newer than everything accepted so far of its kind.
    pub fn accept(&mut self, msg: &Message) -> bool {
        let slot = &mut self.last[msg.kind().index()];
        match *slot {
            Some(last) if msg.seq <= last => {
                self.stale += 1;
                false
            }
            last => {
                if let Some(last) = last {
                    self.gaps += u64::from(msg.seq - last - 1);
                }
                *slot = Some(msg.seq);
                true
            }
        }
    }
}

/// Result of one drain: the newest message per kind and how many valid
/// messages were superseded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Drained {
    pub latest: [Option<Message>; 3],
    pub dropped: u64,
    pub invalid: u64,
}

impl Drained {
    pub fn get(&self, kind: MessageKind) -> Option<Message> {
        self.latest[kind.index()]
    }
}

/// Applies the latest-only policy to a batch in arrival order.
pub fn drain_latest<I: IntoIterator<Item = Message>>(filter: &mut LatestFilter, batch: I) -> Drained {
    let mut out = Drained::default();
    for msg in batch {
        if !filter.accept(&msg) {
            out.dropped += 1;
            continue;
        }
        let slot = &mut out.latest[msg.kind().index()];
        if slot.is_some() {
            out.dropped += 1;
        }
        *slot = Some(msg);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    PoseSource,
    RateSource,
    CommandSource,
    Sink,
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("cannot resolve address `{0}`")]
    Address(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("send failed: {0}")]
    Send(io::Error),
    #[error("receive failed: {0}")]
    Receive(io::Error),
    #[error("{0} endpoint cannot {1}")]
    Role(&'static str, &'static str),
}

fn resolve(addr: &str) -> Result<SocketAddr, LinkError> {
    addr.to_socket_addrs().ok().and_then(|mut a| a.next()).ok_or_else(|| LinkError::Address(addr.to_string()))
}

/// Nonblocking UDP endpoint. Sources send one message kind to a fixed peer
/// and number their messages; sinks receive and drain latest-only.
#[derive(Debug)]
pub struct Endpoint {
    role: Role,
    socket: UdpSocket,
    peer: Option<SocketAddr>,
    seq: u32,
    filter: LatestFilter,
    buf: [u8; 64],
}

impl Endpoint {
    /// For sources `address` is the destination; a sink binds to it.
    pub fn open(role: Role, address: &str) -> Result<Self, LinkError> {
        let target = resolve(address)?;
        let (bind, peer) = match role {
            Role::Sink => (target, None),
            _ => (SocketAddr::new(if target.is_ipv4() { [0, 0, 0, 0].into() } else { [0u16; 8].into() }, 0), Some(target)),
        };
        let socket = UdpSocket::bind(bind).map_err(|source| LinkError::Bind { addr: bind.to_string(), source })?;
        socket.set_nonblocking(true).map_err(|source| LinkError::Bind { addr: bind.to_string(), source })?;
        Ok(Self { role, socket, peer, seq: 0, filter: LatestFilter::new(), buf: [0; 64] })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn filter(&self) -> &LatestFilter {
        &self.filter
    }

    fn send_payload(&mut self, payload: Payload, timestamp_ns: u64) -> Result<(), LinkError> {
        let peer = self.peer.ok_or(LinkError::Role("sink", "send"))?;
        let msg = Message { seq: self.seq, timestamp_ns, payload };
        self.seq = self.seq.wrapping_add(1);
        self.socket.send_to(&encode(&msg), peer).map(|_| ()).map_err(LinkError::Send)
    }

    pub fn send_pose(&mut self, pose: Pose<f64>, timestamp_ns: u64) -> Result<(), LinkError> {
        if self.role != Role::PoseSource {
            return Err(LinkError::Role("non-pose", "send poses"));
        }
        self.send_payload(Payload::Pose(pose), timestamp_ns)
    }

    pub fn send_rates(&mut self, rates: WheelRates<f64>, timestamp_ns: u64) -> Result<(), LinkError> {
        if self.role != Role::RateSource {
            return Err(LinkError::Role("non-rate", "send wheel rates"));
        }
        self.send_payload(Payload::Rates(rates), timestamp_ns)
    }

    pub fn send_command(&mut self, command: WheelRates<f64>, timestamp_ns: u64) -> Result<(), LinkError> {
        if self.role != Role::CommandSource {
            return Err(LinkError::Role("non-command", "send commands"));
        }
        self.send_payload(Payload::Command(command), timestamp_ns)
    }

    /// Reads every pending datagram without blocking and keeps only the
    /// newest valid message per kind.
    pub fn drain(&mut self) -> Result<Drained, LinkError> {
        if self.role != Role::Sink {
            return Err(LinkError::Role("source", "receive"));
        }
        let mut batch = Vec::new();
        let mut invalid = 0;
        loop {
            match self.socket.recv_from(&mut self.buf) {
                // a datagram filling the buffer may have been cut short
                Ok((n, _)) if n >= self.buf.len() => invalid += 1,
                Ok((n, _)) => match decode(&self.buf[..n]) {
                    Ok(m) => batch.push(m),
                    Err(_) => invalid += 1,
                },
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::ConnectionReset => continue,
                Err(e) => return Err(LinkError::Receive(e)),
            }
        }
        let mut out = drain_latest(&mut self.filter, batch);
        out.invalid = invalid;
        Ok(out)
    }
}
