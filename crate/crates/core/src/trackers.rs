//! Peer lists handed out by central trackers.
//!
//! HTTP tracker responses are found by scanning raw TCP payloads for the
//! bencoded `peers` key; no HTTP parsing is attempted. UDP tracker
//! `announce_response` packets are recognized by their length and action
//! field alone, without seeing the matching request.

use std::net::{Ipv4Addr, SocketAddrV4};

use crate::bencode::{self, BencValue};
use crate::capture::{PacketRecord, Proto};
use crate::wire::{self, Cursor};

/// Wire form of the `peers` dictionary key.
pub const PEERS_MARKER: &[u8] = b"5:peers";

/// `action` value of an announce response.
pub const ACTION_ANNOUNCE: u32 = 1;

/// Fixed header preceding the peer entries of an announce response.
pub const ANNOUNCE_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnounceResponse {
    pub action: u32,
    pub transaction_id: u32,
    pub interval: u32,
    pub leechers: u32,
    pub seeders: u32,
    /// Every entry as encoded, in order.
    pub peers: Vec<SocketAddrV4>,
}

impl AnnounceResponse {
    /// Peers that can actually be connected to.
    pub fn targets(&self) -> Vec<SocketAddrV4> {
        self.peers.iter().copied().filter(wire::is_usable_target).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ANNOUNCE_HEADER_LEN + 6 * self.peers.len());
        for field in [
            self.action,
            self.transaction_id,
            self.interval,
            self.leechers,
            self.seeders,
        ] {
            out.extend_from_slice(&field.to_be_bytes());
        }
        out.extend(wire::encode_compact(&self.peers));
        out
    }
}

/// Matches a UDP payload against the announce_response layout.
pub fn parse_udp_tracker(pkt: &PacketRecord) -> Option<AnnounceResponse> {
    if pkt.proto != Proto::Udp {
        return None;
    }
    parse_announce_response(&pkt.payload)
}

pub fn parse_announce_response(payload: &[u8]) -> Option<AnnounceResponse> {
    if payload.len() < ANNOUNCE_HEADER_LEN
        || !(payload.len() - ANNOUNCE_HEADER_LEN).is_multiple_of(wire::COMPACT_PEER_LEN)
    {
        return None;
    }
    let mut c = Cursor::new(payload);
    let action = c.u32().ok()?;
    if action != ACTION_ANNOUNCE {
        return None;
    }
    let transaction_id = c.u32().ok()?;
    let interval = c.u32().ok()?;
    let leechers = c.u32().ok()?;
    let seeders = c.u32().ok()?;
    let n = (payload.len() - ANNOUNCE_HEADER_LEN) / wire::COMPACT_PEER_LEN;
    let mut peers = Vec::with_capacity(n);
    for k in 0..n {
        let ip = wire::read_u32_be(payload, 20 + 6 * k).ok()?;
        let port = wire::read_u16_be(payload, 24 + 6 * k).ok()?;
        peers.push(SocketAddrV4::new(Ipv4Addr::from(ip), port));
    }
    Some(AnnounceResponse {
        action,
        transaction_id,
        interval,
        leechers,
        seeders,
        peers,
    })
}

/// Decodes a `peers` value in either the compact (binary string) or the
/// dictionary (list of `{ip, port}`) model.
fn peers_from_value(v: &BencValue) -> Option<Vec<SocketAddrV4>> {
    match v {
        BencValue::Bytes(b) => wire::compact_peers(b),
        BencValue::List(entries) => Some(
            entries
                .iter()
                .filter_map(|e| {
                    let ip: Ipv4Addr = std::str::from_utf8(e.get(b"ip")?.as_bytes()?).ok()?.parse().ok()?;
                    let port = u16::try_from(e.get(b"port")?.as_int()?).ok()?;
                    Some(SocketAddrV4::new(ip, port))
                })
                .collect(),
        ),
        _ => None,
    }
}

/// Extracts the peers of an HTTP tracker response carried anywhere in a TCP
/// payload. Returns an empty list when no peer list is present.
pub fn scan_http_tracker(pkt: &PacketRecord) -> Vec<SocketAddrV4> {
    if pkt.proto != Proto::Tcp || pkt.payload.is_empty() {
        return Vec::new();
    }
    bencode::scan_all_values(&pkt.payload, PEERS_MARKER)
        .find_map(|(v, _)| peers_from_value(&v))
        .unwrap_or_default()
        .into_iter()
        .filter(wire::is_usable_target)
        .collect()
}
