//! Trace ingestion and connection-outcome tracking.
//!
//! Packets from a pcap file or an NDJSON fixture are normalized into
//! [`PacketRecord`]s. [`ConnTracker`] then turns them into
//! [`ConnectionEvent`]s: one `attempted` per new flow and exactly one terminal
//! outcome (`established` or `failed`) per flow. Failed connection attempts
//! are what the scan detector counts.

mod ndjson;
mod pcap;
mod tcp;
mod udp;

use std::cmp::Ordering;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ndjson::{ingest_ndjson, write_ndjson, LineError, NdjsonIngest};
pub use pcap::{encode_frame, ingest_pcap, is_pcap_magic, write_pcap, PcapIngest, PCAP_MAGIC, PCAP_MAGIC_SWAPPED};
pub use tcp::TcpTracker;
pub use udp::UdpTracker;

/// Default time a SYN (or an unanswered UDP request) may wait for a reply.
pub const DEFAULT_HANDSHAKE_TIMEOUT: f64 = 30.0;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("unsupported capture format: {0}")]
    UnsupportedFormat(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write packet: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Tcp,
    Udp,
}

impl fmt::Display for Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Proto::Tcp => "tcp",
            Proto::Udp => "udp",
        })
    }
}

/// The subset of TCP flags the handshake tracker cares about.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TcpFlags(u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const ACK: TcpFlags = TcpFlags(0x10);
    pub const SYN_ACK: TcpFlags = TcpFlags(0x12);
    pub const RST_ACK: TcpFlags = TcpFlags(0x14);

    pub const fn empty() -> Self {
        TcpFlags(0)
    }

    pub const fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub const fn union(self, other: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | other.0)
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn syn(self) -> bool {
        self.contains(Self::SYN)
    }

    pub fn ack(self) -> bool {
        self.contains(Self::ACK)
    }

    pub fn rst(self) -> bool {
        self.contains(Self::RST)
    }

    pub fn fin(self) -> bool {
        self.contains(Self::FIN)
    }

    /// Parses a flag string over `S`, `A`, `R`, `F` (e.g. `"SA"`).
    pub fn parse(s: &str) -> Option<TcpFlags> {
        s.chars().try_fold(TcpFlags::empty(), |acc, c| {
            let f = match c {
                'S' => Self::SYN,
                'A' => Self::ACK,
                'R' => Self::RST,
                'F' => Self::FIN,
                _ => return None,
            };
            Some(acc.union(f))
        })
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (flag, c) in [(Self::SYN, 'S'), (Self::ACK, 'A'), (Self::RST, 'R'), (Self::FIN, 'F')] {
            if self.contains(flag) {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TcpFlags({self})")
    }
}

/// One captured IPv4 TCP segment or UDP datagram.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    /// Seconds since the epoch.
    pub ts: f64,
    pub src_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_ip: Ipv4Addr,
    pub dst_port: u16,
    pub proto: Proto,
    /// Always empty for UDP.
    pub flags: TcpFlags,
    pub payload: Vec<u8>,
}

impl PacketRecord {
    pub fn tcp(ts: f64, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), flags: TcpFlags, payload: Vec<u8>) -> Self {
        PacketRecord {
            ts,
            src_ip: src.0,
            src_port: src.1,
            dst_ip: dst.0,
            dst_port: dst.1,
            proto: Proto::Tcp,
            flags,
            payload,
        }
    }

    pub fn udp(ts: f64, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), payload: Vec<u8>) -> Self {
        PacketRecord {
            ts,
            src_ip: src.0,
            src_port: src.1,
            dst_ip: dst.0,
            dst_port: dst.1,
            proto: Proto::Udp,
            flags: TcpFlags::empty(),
            payload,
        }
    }
}

/// A connection identified initiator-first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub proto: Proto,
    pub initiator: Ipv4Addr,
    pub initiator_port: u16,
    pub responder: Ipv4Addr,
    pub responder_port: u16,
}

impl FlowKey {
    /// Key for a packet travelling initiator → responder.
    pub fn forward(pkt: &PacketRecord) -> Self {
        FlowKey {
            proto: pkt.proto,
            initiator: pkt.src_ip,
            initiator_port: pkt.src_port,
            responder: pkt.dst_ip,
            responder_port: pkt.dst_port,
        }
    }

    /// Key for a packet travelling responder → initiator.
    pub fn reverse(pkt: &PacketRecord) -> Self {
        FlowKey {
            proto: pkt.proto,
            initiator: pkt.dst_ip,
            initiator_port: pkt.dst_port,
            responder: pkt.src_ip,
            responder_port: pkt.src_port,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Attempted,
    Established,
    Failed,
}

impl Outcome {
    pub fn is_terminal(self) -> bool {
        !matches!(self, Outcome::Attempted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionEvent {
    /// Time of the first packet of the attempt.
    pub ts: f64,
    pub initiator: Ipv4Addr,
    pub responder: Ipv4Addr,
    pub responder_port: u16,
    pub proto: Proto,
    pub outcome: Outcome,
}

/// A pending handshake deadline, ordered by time then creation sequence.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Deadline<K> {
    pub ts: f64,
    pub id: u64,
    pub key: K,
}

impl<K> PartialEq for Deadline<K> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<K> Eq for Deadline<K> {}

impl<K> PartialOrd for Deadline<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> Ord for Deadline<K> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ts.total_cmp(&other.ts).then(self.id.cmp(&other.id))
    }
}

/// TCP and UDP outcome tracking for one trace.
#[derive(Debug)]
pub struct ConnTracker {
    pub tcp: TcpTracker,
    pub udp: UdpTracker,
}

impl Default for ConnTracker {
    fn default() -> Self {
        Self::new(DEFAULT_HANDSHAKE_TIMEOUT)
    }
}

impl ConnTracker {
    pub fn new(handshake_timeout: f64) -> Self {
        ConnTracker {
            tcp: TcpTracker::new(handshake_timeout),
            udp: UdpTracker::new(handshake_timeout),
        }
    }

    pub fn timeout(&self) -> f64 {
        self.tcp.timeout()
    }

    /// Feeds one packet, returning every event it causes, including lazy
    /// timeouts of earlier flows.
    pub fn process(&mut self, pkt: &PacketRecord) -> Vec<ConnectionEvent> {
        let mut out = self.tcp.expire(pkt.ts);
        out.extend(self.udp.expire(pkt.ts));
        match pkt.proto {
            Proto::Tcp => out.extend(self.tcp.track(pkt)),
            Proto::Udp => out.extend(self.udp.track(pkt)),
        }
        out
    }

    /// Resolves every flow still waiting for a reply.
    pub fn flush(&mut self) -> Vec<ConnectionEvent> {
        let mut out = self.tcp.flush();
        out.extend(self.udp.flush());
        out
    }
}

/// Runs a whole trace through a fresh tracker.
pub fn track_all(packets: &[PacketRecord], handshake_timeout: f64) -> Vec<ConnectionEvent> {
    let mut tracker = ConnTracker::new(handshake_timeout);
    let mut out: Vec<ConnectionEvent> = packets.iter().flat_map(|p| tracker.process(p)).collect();
    out.extend(tracker.flush());
    out
}
