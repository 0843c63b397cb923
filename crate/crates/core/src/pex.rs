//! µTorrent peer exchange (`ut_pex`) `added` lists.
//!
//! The extension message is located by scanning the raw TCP payload for the
//! bencoded `added` key, so captures that start mid-connection still work.
//! `added.f` flags and `dropped` lists are ignored.

use std::net::{Ipv4Addr, SocketAddrV4};

use crate::bencode::{self, BencValue};
use crate::capture::{PacketRecord, Proto};
use crate::wire;

pub const ADDED_MARKER: &[u8] = b"5:added";

#[derive(Debug, Clone, PartialEq)]
pub struct PexAddedBatch {
    /// Host that sent the gossip.
    pub source: Ipv4Addr,
    pub peers: Vec<SocketAddrV4>,
    pub ts: f64,
}

/// Peers announced in an `added` list, or empty if the payload has none.
pub fn scan_utpex(pkt: &PacketRecord) -> Vec<SocketAddrV4> {
    if pkt.proto != Proto::Tcp || pkt.payload.is_empty() {
        return Vec::new();
    }
    bencode::scan_all_values(&pkt.payload, ADDED_MARKER)
        .find_map(|(v, _)| match v {
            BencValue::Bytes(b) => wire::compact_peers(&b),
            _ => None,
        })
        .unwrap_or_default()
        .into_iter()
        .filter(wire::is_usable_target)
        .collect()
}

pub fn scan_utpex_batch(pkt: &PacketRecord) -> Option<PexAddedBatch> {
    let peers = scan_utpex(pkt);
    (!peers.is_empty()).then_some(PexAddedBatch {
        source: pkt.src_ip,
        peers,
        ts: pkt.ts,
    })
}
