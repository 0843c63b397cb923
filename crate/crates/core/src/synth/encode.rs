//! Payload builders for the coordination protocols the analyzers read.

use std::net::SocketAddrV4;

use crate::bencode::{self, BencValue};
use crate::dht::AdhtConfig;
use crate::trackers::{AnnounceResponse, ACTION_ANNOUNCE};
use crate::wire;

/// HTTP tracker response carrying `peers` in the compact or the dictionary
/// model.
pub fn http_tracker_response(peers: &[SocketAddrV4], compact: bool) -> Vec<u8> {
    let list = if compact {
        BencValue::bytes(wire::encode_compact(peers))
    } else {
        BencValue::List(
            peers
                .iter()
                .map(|p| {
                    BencValue::dict([
                        ("ip", BencValue::bytes(p.ip().to_string())),
                        ("peer id", BencValue::bytes(peer_id(p))),
                        ("port", BencValue::Integer(i64::from(p.port()))),
                    ])
                })
                .collect(),
        )
    };
    let body = bencode::encode(&BencValue::dict([
        ("complete", BencValue::Integer(peers.len() as i64)),
        ("incomplete", BencValue::Integer(0)),
        ("interval", BencValue::Integer(1800)),
        ("peers", list),
    ]));
    let mut out = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\nContent-Length: {}\r\n\r\n",
        body.len()
    )
    .into_bytes();
    out.extend(body);
    out
}

fn peer_id(p: &SocketAddrV4) -> Vec<u8> {
    let mut id = b"-SY0001-".to_vec();
    id.extend(p.ip().octets());
    id.extend(p.port().to_be_bytes());
    id.resize(20, b'0');
    id
}

pub fn http_announce_request(info_hash: &[u8; 20], port: u16) -> Vec<u8> {
    let hash: String = info_hash.iter().map(|b| format!("%{b:02X}")).collect();
    format!(
        "GET /announce?info_hash={hash}&peer_id=-SY0001-000000000000&port={port}&compact=1 HTTP/1.1\r\nHost: tracker\r\n\r\n"
    )
    .into_bytes()
}

/// UDP tracker announce request. The protocol magic keeps its first word
/// from ever reading as an announce action.
pub fn udp_announce_request(txid: u32, info_hash: &[u8; 20], port: u16) -> Vec<u8> {
    let mut b = Vec::with_capacity(98);
    b.extend(0x0417_2710_1980u64.to_be_bytes());
    b.extend(ACTION_ANNOUNCE.to_be_bytes());
    b.extend(txid.to_be_bytes());
    b.extend(info_hash);
    b.extend(b"-SY0001-000000000000");
    b.extend(0u64.to_be_bytes());
    b.extend(1_000_000u64.to_be_bytes());
    b.extend(0u64.to_be_bytes());
    b.extend(2u32.to_be_bytes());
    b.extend(0u32.to_be_bytes());
    b.extend(txid.rotate_left(7).to_be_bytes());
    b.extend((-1i32).to_be_bytes());
    b.extend(port.to_be_bytes());
    b
}

pub fn udp_announce_response(txid: u32, peers: &[SocketAddrV4]) -> Vec<u8> {
    AnnounceResponse {
        action: ACTION_ANNOUNCE,
        transaction_id: txid,
        interval: 1800,
        leechers: 0,
        seeders: peers.len() as u32,
        peers: peers.to_vec(),
    }
    .encode()
}

pub fn mdht_get_peers(txid: &[u8], node_id: &[u8; 20], info_hash: &[u8; 20]) -> Vec<u8> {
    bencode::encode(&BencValue::dict([
        (
            "a",
            BencValue::dict([
                ("id", BencValue::bytes(node_id.to_vec())),
                ("info_hash", BencValue::bytes(info_hash.to_vec())),
            ]),
        ),
        ("q", BencValue::bytes("get_peers")),
        ("t", BencValue::bytes(txid)),
        ("y", BencValue::bytes("q")),
    ]))
}

fn mdht_response(txid: &[u8], body: Vec<(&str, BencValue)>) -> Vec<u8> {
    bencode::encode(&BencValue::dict([
        ("r", BencValue::dict(body)),
        ("t", BencValue::bytes(txid)),
        ("y", BencValue::bytes("r")),
    ]))
}

/// `get_peers` response listing peers in `values`.
pub fn mdht_values_response(txid: &[u8], node_id: &[u8; 20], peers: &[SocketAddrV4]) -> Vec<u8> {
    let values = peers
        .iter()
        .map(|p| BencValue::bytes(wire::encode_compact(std::slice::from_ref(p))))
        .collect();
    mdht_response(
        txid,
        vec![
            ("id", BencValue::bytes(node_id.to_vec())),
            ("token", BencValue::bytes(&b"tok8tok8"[..])),
            ("values", BencValue::List(values)),
        ],
    )
}

/// `find_node` style response listing `(node id, address)` pairs.
pub fn mdht_nodes_response(txid: &[u8], node_id: &[u8; 20], nodes: &[([u8; 20], SocketAddrV4)]) -> Vec<u8> {
    let mut packed = Vec::with_capacity(nodes.len() * 26);
    for (id, addr) in nodes {
        packed.extend(id);
        packed.extend(wire::encode_compact(std::slice::from_ref(addr)));
    }
    mdht_response(
        txid,
        vec![
            ("id", BencValue::bytes(node_id.to_vec())),
            ("nodes", BencValue::bytes(packed)),
        ],
    )
}

/// Fields shared by ADHT requests and replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdhtHeader {
    pub version: u8,
    pub connection_id: u64,
    pub transaction_id: u32,
    pub instance_id: u32,
}

fn adht_optional_fields(b: &mut Vec<u8>, cfg: &AdhtConfig, version: u8, request: bool) {
    if cfg.has_vendor_id(version) {
        b.push(0);
    }
    if cfg.has_network_id(version) {
        b.extend(0u32.to_be_bytes());
    }
    if request && cfg.has_local_version(version) {
        b.push(version);
    }
}

fn adht_address(b: &mut Vec<u8>, addr: &SocketAddrV4) {
    b.push(4);
    b.extend(addr.ip().octets());
    b.extend(addr.port().to_be_bytes());
}

fn adht_contact(b: &mut Vec<u8>, addr: &SocketAddrV4) {
    b.push(1);
    b.push(5);
    adht_address(b, addr);
}

/// A request whose embedded node address is `node`; its port must equal the
/// UDP source port for the request to be recognized.
pub fn adht_request(cfg: &AdhtConfig, h: AdhtHeader, action: u32, node: &SocketAddrV4) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend((h.connection_id | 1 << 63).to_be_bytes());
    b.extend(action.to_be_bytes());
    b.extend(h.transaction_id.to_be_bytes());
    b.push(h.version);
    adht_optional_fields(&mut b, cfg, h.version, true);
    adht_address(&mut b, node);
    b.extend(h.instance_id.to_be_bytes());
    b.extend(1_300_000_000_000u64.to_be_bytes());
    b
}

fn adht_reply_header(cfg: &AdhtConfig, h: AdhtHeader, action: u32) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend(action.to_be_bytes());
    b.extend(h.transaction_id.to_be_bytes());
    b.extend((h.connection_id | 1 << 63).to_be_bytes());
    b.push(h.version);
    adht_optional_fields(&mut b, cfg, h.version, false);
    b.extend(h.instance_id.to_be_bytes());
    b
}

pub fn adht_find_node_reply(cfg: &AdhtConfig, h: AdhtHeader, contacts: &[SocketAddrV4]) -> Vec<u8> {
    let mut b = adht_reply_header(cfg, h, cfg.find_node_reply);
    b.extend((contacts.len() as u16).to_be_bytes());
    for c in contacts {
        adht_contact(&mut b, c);
    }
    b
}

/// Find-value reply. With `values`, each peer is the originator of one
/// stored value; otherwise the peers are returned as closer contacts.
pub fn adht_find_value_reply(cfg: &AdhtConfig, h: AdhtHeader, peers: &[SocketAddrV4], values: bool) -> Vec<u8> {
    let mut b = adht_reply_header(cfg, h, cfg.find_value_reply);
    b.push(u8::from(values));
    b.extend((peers.len() as u16).to_be_bytes());
    for p in peers {
        adht_contact(&mut b, p);
        if values {
            let v = peer_id(p);
            b.extend((v.len() as u16).to_be_bytes());
            b.extend(v);
        }
    }
    b
}

/// A complete extension-protocol `ut_pex` message.
pub fn pex_message(added: &[SocketAddrV4]) -> Vec<u8> {
    let dict = bencode::encode(&BencValue::dict([
        ("added", BencValue::bytes(wire::encode_compact(added))),
        ("added.f", BencValue::bytes(vec![0x10; added.len()])),
        ("dropped", BencValue::bytes(Vec::new())),
    ]));
    let mut b = ((dict.len() + 2) as u32).to_be_bytes().to_vec();
    b.push(20);
    b.push(1);
    b.extend(dict);
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{PacketRecord, TcpFlags};
    use crate::dht::{self, AdhtTransactionTable};
    use crate::{pex, trackers};
    use std::net::Ipv4Addr;

    const HOST: Ipv4Addr = Ipv4Addr::new(10, 2, 0, 1);
    const REMOTE: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 1);

    fn peers() -> Vec<SocketAddrV4> {
        vec!["100.64.0.1:6881".parse().unwrap(), "100.64.0.2:51413".parse().unwrap()]
    }

    #[test]
    fn http_both_models() {
        for compact in [true, false] {
            let pkt = PacketRecord::tcp(
                0.0,
                (REMOTE, 80),
                (HOST, 40000),
                TcpFlags::ACK,
                http_tracker_response(&peers(), compact),
            );
            assert_eq!(trackers::scan_http_tracker(&pkt), peers());
        }
    }

    #[test]
    fn udp_tracker_pair() {
        let req = PacketRecord::udp(
            0.0,
            (HOST, 40001),
            (REMOTE, 6969),
            udp_announce_request(9, &[1; 20], 6881),
        );
        assert_eq!(req.payload.len(), 98);
        assert!(trackers::parse_udp_tracker(&req).is_none());
        let resp = PacketRecord::udp(0.1, (REMOTE, 6969), (HOST, 40001), udp_announce_response(9, &peers()));
        assert_eq!(trackers::parse_udp_tracker(&resp).unwrap().peers, peers());
    }

    #[test]
    fn mdht_round_trip() {
        let q = mdht_get_peers(b"aa", &[1; 20], &[2; 20]);
        assert!(dht::mdht_extract(&PacketRecord::udp(0.0, (HOST, 6881), (REMOTE, 6881), q)).is_empty());
        let r = mdht_values_response(b"aa", &[3; 20], &peers());
        assert_eq!(
            dht::mdht_extract(&PacketRecord::udp(0.0, (REMOTE, 6881), (HOST, 6881), r)),
            peers()
        );
        let nodes: Vec<_> = peers().into_iter().map(|p| ([7u8; 20], p)).collect();
        let r = mdht_nodes_response(b"ab", &[3; 20], &nodes);
        assert_eq!(
            dht::mdht_extract(&PacketRecord::udp(0.0, (REMOTE, 6881), (HOST, 6881), r)),
            peers()
        );
    }

    #[test]
    fn adht_round_trip() {
        let cfg = AdhtConfig::default();
        for (version, values) in [(5, true), (30, false), (50, true)] {
            let h = AdhtHeader {
                version,
                connection_id: 0x1234,
                transaction_id: 77,
                instance_id: 5,
            };
            let node = SocketAddrV4::new(HOST, 7001);
            let mut table = AdhtTransactionTable::from_config(&cfg);
            let req = PacketRecord::udp(
                0.0,
                (HOST, 7001),
                (REMOTE, 7000),
                adht_request(&cfg, h, cfg.find_value_request, &node),
            );
            let parsed = dht::adht::parse_request(&req, &cfg).unwrap();
            assert!(table.register(&parsed, HOST, 0.0, &cfg));
            let reply = PacketRecord::udp(
                0.5,
                (REMOTE, 7000),
                (HOST, 7001),
                adht_find_value_reply(&cfg, h, &peers(), values),
            );
            let got = dht::adht::parse_reply(&reply, &mut table, &cfg).unwrap();
            assert_eq!(got.requester, HOST);
            let want: Vec<std::net::SocketAddr> = peers().into_iter().map(Into::into).collect();
            assert_eq!(got.contacts, want);
        }
    }

    #[test]
    fn pex_round_trip() {
        let pkt = PacketRecord::tcp(
            0.0,
            (REMOTE, 51413),
            (HOST, 40000),
            TcpFlags::ACK,
            pex_message(&peers()),
        );
        assert_eq!(pex::scan_utpex(&pkt), peers());
    }
}
