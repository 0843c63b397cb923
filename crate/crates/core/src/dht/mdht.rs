//! Mainline DHT `values` and `nodes` responses.

use std::net::SocketAddrV4;

use crate::bencode::{self, BencValue};
use crate::capture::{PacketRecord, Proto};
use crate::wire;

pub const VALUES_MARKER: &[u8] = b"6:values";
pub const NODES_MARKER: &[u8] = b"5:nodes";

/// 20-byte node id followed by a compact address.
pub const NODE_ENTRY_LEN: usize = 26;

/// Peers listed in a `values` list. Entries that are not 6-byte compact
/// strings are skipped.
pub fn values_peers(payload: &[u8]) -> Vec<SocketAddrV4> {
    bencode::scan_all_values(payload, VALUES_MARKER)
        .find_map(|(v, _)| match v {
            BencValue::List(items) => Some(
                items
                    .iter()
                    .filter_map(BencValue::as_bytes)
                    .filter(|b| b.len() == wire::COMPACT_PEER_LEN)
                    .map(wire::compact_peer)
                    .collect::<Vec<_>>(),
            ),
            _ => None,
        })
        .unwrap_or_default()
}

/// Node addresses from a `nodes` string (a multiple of 26 bytes).
pub fn nodes_endpoints(payload: &[u8]) -> Vec<SocketAddrV4> {
    bencode::scan_all_values(payload, NODES_MARKER)
        .find_map(|(v, _)| match v {
            BencValue::Bytes(b) if b.len() % NODE_ENTRY_LEN == 0 => Some(
                b.chunks_exact(NODE_ENTRY_LEN)
                    .map(|e| wire::compact_peer(&e[20..]))
                    .collect::<Vec<_>>(),
            ),
            _ => None,
        })
        .unwrap_or_default()
}

/// All endpoints a Mainline DHT response hands out.
pub fn mdht_extract(pkt: &PacketRecord) -> Vec<SocketAddrV4> {
    if pkt.proto != Proto::Udp {
        return Vec::new();
    }
    let mut out = values_peers(&pkt.payload);
    out.extend(nodes_endpoints(&pkt.payload));
    out.retain(wire::is_usable_target);
    out
}
