//! The peer-mappings table: which endpoints each host has been told about.
//!
//! Every analyzer records the peers it extracts here, indexed by the host
//! expected to connect to them. The scan detector asks whether a failed
//! connection was predicted before counting it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::net::{Ipv4Addr, SocketAddrV4};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    HttpTracker,
    UdpTracker,
    Adht,
    Mdht,
    Btudp,
    Pex,
}

impl Provenance {
    pub const ALL: [Provenance; 6] = [
        Provenance::HttpTracker,
        Provenance::UdpTracker,
        Provenance::Adht,
        Provenance::Mdht,
        Provenance::Btudp,
        Provenance::Pex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Provenance::HttpTracker => "http_tracker",
            Provenance::UdpTracker => "udp_tracker",
            Provenance::Adht => "adht",
            Provenance::Mdht => "mdht",
            Provenance::Btudp => "btudp",
            Provenance::Pex => "pex",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Provenance::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown analyzer {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedPeer {
    pub target: SocketAddrV4,
    pub provenance: Provenance,
    pub first_seen: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeerMapConfig {
    /// Seconds after the last sighting that a mapping stays live.
    pub ttl: f64,
    pub cap_per_source: usize,
    /// Match on target address alone, ignoring the port.
    pub ip_only: bool,
}

impl Default for PeerMapConfig {
    fn default() -> Self {
        PeerMapConfig {
            ttl: 1800.0,
            cap_per_source: 50_000,
            ip_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    provenance: Provenance,
    first_seen: f64,
    last_seen: f64,
    seq: u64,
}

impl Entry {
    fn live_at(&self, now: f64, ttl: f64) -> bool {
        self.first_seen <= now && now - self.last_seen <= ttl
    }
}

#[derive(Debug, Default)]
struct SourceMap {
    /// target address → port → entry
    targets: HashMap<Ipv4Addr, HashMap<u16, Entry>>,
    /// insertion order, for oldest-first eviction
    order: BTreeMap<u64, SocketAddrV4>,
}

impl SourceMap {
    fn len(&self) -> usize {
        self.order.len()
    }

    fn remove(&mut self, target: SocketAddrV4) {
        if let Some(ports) = self.targets.get_mut(target.ip()) {
            ports.remove(&target.port());
            if ports.is_empty() {
                self.targets.remove(target.ip());
            }
        }
    }
}

/// Summary counts over the table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PeerMapStats {
    pub total: usize,
    pub by_provenance: BTreeMap<Provenance, usize>,
    pub by_source: BTreeMap<Ipv4Addr, usize>,
    pub rejected_port_zero: u64,
}

#[derive(Debug, Default)]
pub struct PeerMappings {
    cfg: PeerMapConfig,
    sources: HashMap<Ipv4Addr, SourceMap>,
    next_seq: u64,
    rejected_port_zero: u64,
}

#[derive(Serialize)]
struct ExportLine {
    source: Ipv4Addr,
    target: Ipv4Addr,
    port: u16,
    provenance: Provenance,
    first_seen: f64,
}

impl PeerMappings {
    pub fn new(cfg: PeerMapConfig) -> Self {
        PeerMappings {
            cfg,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &PeerMapConfig {
        &self.cfg
    }

    /// Records that `source` may connect to `peer.target`. Re-adding an
    /// existing mapping refreshes it without changing its provenance or
    /// first-seen time. Port 0 is rejected and counted.
    pub fn add(&mut self, source: Ipv4Addr, peer: PredictedPeer) {
        if peer.target.port() == 0 {
            self.rejected_port_zero += 1;
            return;
        }
        let map = self.sources.entry(source).or_default();
        let ports = map.targets.entry(*peer.target.ip()).or_default();
        if let Some(e) = ports.get_mut(&peer.target.port()) {
            e.last_seen = e.last_seen.max(peer.first_seen);
            e.first_seen = e.first_seen.min(peer.first_seen);
            return;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        ports.insert(
            peer.target.port(),
            Entry {
                provenance: peer.provenance,
                first_seen: peer.first_seen,
                last_seen: peer.first_seen,
                seq,
            },
        );
        map.order.insert(seq, peer.target);
        while map.len() > self.cfg.cap_per_source {
            let (_, oldest) = map.order.pop_first().expect("non-empty");
            map.remove(oldest);
        }
    }

    pub fn add_all(
        &mut self,
        source: Ipv4Addr,
        targets: impl IntoIterator<Item = SocketAddrV4>,
        provenance: Provenance,
        ts: f64,
    ) {
        for target in targets {
            self.add(
                source,
                PredictedPeer {
                    target,
                    provenance,
                    first_seen: ts,
                },
            );
        }
    }

    /// True iff `source` has a live mapping for `(dst, dport)` at `now`.
    pub fn is_predicted(&self, source: Ipv4Addr, dst: Ipv4Addr, dport: u16, now: f64) -> bool {
        self.lookup(source, dst, dport, now).is_some()
    }

    /// The live mapping that predicts `(dst, dport)`, if any.
    pub fn lookup(&self, source: Ipv4Addr, dst: Ipv4Addr, dport: u16, now: f64) -> Option<PredictedPeer> {
        let ports = self.sources.get(&source)?.targets.get(&dst)?;
        let ttl = self.cfg.ttl;
        let hit = if self.cfg.ip_only {
            ports
                .iter()
                .filter(|(_, e)| e.live_at(now, ttl))
                .min_by_key(|(_, e)| e.seq)
                .map(|(p, e)| (*p, *e))
        } else {
            ports.get(&dport).filter(|e| e.live_at(now, ttl)).map(|e| (dport, *e))
        };
        hit.map(|(port, e)| PredictedPeer {
            target: SocketAddrV4::new(dst, port),
            provenance: e.provenance,
            first_seen: e.first_seen,
        })
    }

    pub fn len(&self) -> usize {
        self.sources.values().map(SourceMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> PeerMapStats {
        let mut s = PeerMapStats {
            rejected_port_zero: self.rejected_port_zero,
            by_provenance: Provenance::ALL.iter().map(|p| (*p, 0)).collect(),
            ..Default::default()
        };
        for (src, map) in &self.sources {
            if map.len() == 0 {
                continue;
            }
            s.by_source.insert(*src, map.len());
            for ports in map.targets.values() {
                for e in ports.values() {
                    *s.by_provenance.entry(e.provenance).or_default() += 1;
                    s.total += 1;
                }
            }
        }
        s
    }

    /// Every mapping as `(source, peer)`, sorted by source then target.
    pub fn entries(&self) -> Vec<(Ipv4Addr, PredictedPeer)> {
        let mut out: Vec<_> = self
            .sources
            .iter()
            .flat_map(|(src, map)| {
                map.targets.iter().flat_map(move |(ip, ports)| {
                    ports.iter().map(move |(port, e)| {
                        (
                            *src,
                            PredictedPeer {
                                target: SocketAddrV4::new(*ip, *port),
                                provenance: e.provenance,
                                first_seen: e.first_seen,
                            },
                        )
                    })
                })
            })
            .collect();
        out.sort_by_key(|a| (a.0, a.1.target));
        out
    }

    /// Writes one JSON object per mapping.
    pub fn export_ndjson<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        for (source, p) in self.entries() {
            let line = ExportLine {
                source,
                target: *p.target.ip(),
                port: p.target.port(),
                provenance: p.provenance,
                first_seen: p.first_seen,
            };
            serde_json::to_writer(&mut sink, &line)?;
            sink.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const X: Ipv4Addr = Ipv4Addr::new(10, 2, 0, 1);
    const Y: Ipv4Addr = Ipv4Addr::new(10, 2, 0, 2);
    const A: Ipv4Addr = Ipv4Addr::new(100, 64, 0, 1);

    fn peer(port: u16, provenance: Provenance, ts: f64) -> PredictedPeer {
        PredictedPeer {
            target: SocketAddrV4::new(A, port),
            provenance,
            first_seen: ts,
        }
    }

    #[test]
    fn exact_match_per_source() {
        let mut m = PeerMappings::default();
        m.add(X, peer(6668, Provenance::HttpTracker, 0.0));
        assert!(m.is_predicted(X, A, 6668, 10.0));
        assert!(!m.is_predicted(X, A, 6669, 10.0));
        assert!(!m.is_predicted(Y, A, 6668, 10.0));
    }

    #[test]
    fn expiry() {
        let mut m = PeerMappings::default();
        m.add(X, peer(6668, Provenance::Mdht, 0.0));
        assert!(m.is_predicted(X, A, 6668, 1800.0));
        assert!(!m.is_predicted(X, A, 6668, 1801.0));
        assert!(!m.is_predicted(X, A, 6668, -1.0));
        assert!(!PeerMappings::default().is_predicted(X, A, 6668, 0.0));
    }

    #[test]
    fn set_semantics_and_stats() {
        let mut m = PeerMappings::default();
        assert_eq!(m.stats().total, 0);
        assert!(m.stats().by_provenance.values().all(|&c| c == 0));
        for port in [1, 2, 3] {
            m.add(X, peer(port, Provenance::Mdht, 0.0));
        }
        m.add(X, peer(3, Provenance::Pex, 5.0));
        let s = m.stats();
        assert_eq!(s.by_provenance[&Provenance::Mdht], 3);
        assert_eq!(s.by_provenance[&Provenance::Pex], 0);
        assert_eq!(s.total, 3);
        assert_eq!(s.by_source[&X], 3);
        assert!(m.is_predicted(X, A, 3, 1.0));
    }

    #[test]
    fn port_zero_rejected() {
        let mut m = PeerMappings::default();
        m.add(X, peer(0, Provenance::Btudp, 0.0));
        assert!(m.is_empty());
        assert_eq!(m.stats().rejected_port_zero, 1);
    }

    #[test]
    fn ip_only_mode() {
        let mut m = PeerMappings::new(PeerMapConfig {
            ip_only: true,
            ..Default::default()
        });
        m.add(X, peer(6668, Provenance::Adht, 0.0));
        assert!(m.is_predicted(X, A, 9999, 1.0));
        assert_eq!(m.lookup(X, A, 9999, 1.0).unwrap().target.port(), 6668);
    }

    #[test]
    fn cap_evicts_oldest() {
        let mut m = PeerMappings::new(PeerMapConfig {
            cap_per_source: 2,
            ..Default::default()
        });
        for port in [1, 2, 3] {
            m.add(X, peer(port, Provenance::Pex, f64::from(port)));
        }
        assert_eq!(m.len(), 2);
        assert!(!m.is_predicted(X, A, 1, 4.0));
        assert!(m.is_predicted(X, A, 2, 4.0));
        assert!(m.is_predicted(X, A, 3, 4.0));
    }

    #[test]
    fn export_lines() {
        let mut m = PeerMappings::default();
        m.add(Y, peer(2, Provenance::Pex, 1.5));
        m.add(X, peer(1, Provenance::UdpTracker, 0.5));
        let mut out = Vec::new();
        m.export_ndjson(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(
            lines,
            [
                r#"{"source":"10.2.0.1","target":"100.64.0.1","port":1,"provenance":"udp_tracker","first_seen":0.5}"#,
                r#"{"source":"10.2.0.2","target":"100.64.0.1","port":2,"provenance":"pex","first_seen":1.5}"#,
            ]
        );
    }

    #[derive(Debug, Clone)]
    enum Op {
        Add { src: u8, port: u16 },
        Query { src: u8, port: u16 },
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..3, 1u16..6).prop_map(|(src, port)| Op::Add { src, port }),
            (0u8..3, 1u16..6).prop_map(|(src, port)| Op::Query { src, port }),
        ]
    }

    proptest! {
        /// Query answers match a replay of the add log, with time advancing
        /// by a random step between operations.
        #[test]
        fn consistent_with_add_log(ops in proptest::collection::vec((op(), 0.0f64..700.0), 1..80)) {
            let ttl = 1800.0;
            let mut m = PeerMappings::default();
            let mut log: Vec<(u8, u16, f64)> = Vec::new();
            let mut now = 0.0;
            for (op, step) in ops {
                now += step;
                match op {
                    Op::Add { src, port } => {
                        m.add(Ipv4Addr::new(10, 2, 0, src), peer(port, Provenance::Mdht, now));
                        log.push((src, port, now));
                    }
                    Op::Query { src, port } => {
                        let expected = log.iter().any(|&(s, p, t)| s == src && p == port && t <= now && now - t <= ttl);
                        prop_assert_eq!(m.is_predicted(Ipv4Addr::new(10, 2, 0, src), A, port, now), expected);
                    }
                }
            }
        }

        #[test]
        fn cap_never_exceeded(ports in proptest::collection::vec(1u16..200, 0..300), cap in 1usize..20) {
            let mut m = PeerMappings::new(PeerMapConfig { cap_per_source: cap, ..Default::default() });
            for (i, p) in ports.iter().enumerate() {
                m.add(X, peer(*p, Provenance::Pex, i as f64));
                m.add(Y, peer(*p, Provenance::Pex, i as f64));
                prop_assert!(m.len() <= 2 * cap);
                prop_assert!(m.stats().by_source.values().all(|&n| n <= cap));
            }
        }
    }
}
