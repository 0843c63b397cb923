//! Capture → analyzers → peer map → detector, one packet at a time.
//!
//! Connection outcomes are only known some time after the attempt, so
//! terminal events are held in a reorder buffer and handed to the detector
//! in attempt-time order once no earlier outcome can still appear.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::str::FromStr;

use serde::Serialize;

use crate::capture::{ConnTracker, ConnectionEvent, PacketRecord, DEFAULT_HANDSHAKE_TIMEOUT};
use crate::dht::{self, AdhtConfig, AdhtTransactionTable, SignatureTable};
use crate::peermap::{PeerMapConfig, PeerMappings, Provenance};
use crate::scandet::{Alarm, AlarmKind, ConfigError, DetectorConfig, ScanTracker};
use crate::{pex, trackers, wire};

/// Which analyzers feed the peer map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalyzerSet(u8);

impl AnalyzerSet {
    fn bit(p: Provenance) -> u8 {
        1 << Provenance::ALL.iter().position(|q| *q == p).expect("listed")
    }

    pub fn all() -> Self {
        AnalyzerSet((1 << Provenance::ALL.len()) - 1)
    }

    pub fn none() -> Self {
        AnalyzerSet(0)
    }

    pub fn only(ps: impl IntoIterator<Item = Provenance>) -> Self {
        ps.into_iter().fold(Self::none(), |s, p| s.with(p))
    }

    pub fn with(self, p: Provenance) -> Self {
        AnalyzerSet(self.0 | Self::bit(p))
    }

    pub fn without(self, p: Provenance) -> Self {
        AnalyzerSet(self.0 & !Self::bit(p))
    }

    pub fn contains(self, p: Provenance) -> bool {
        self.0 & Self::bit(p) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Provenance> {
        Provenance::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

impl Default for AnalyzerSet {
    fn default() -> Self {
        Self::all()
    }
}

impl FromStr for AnalyzerSet {
    type Err = String;

    /// Comma-separated analyzer names, or `all` / `none`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "all" => return Ok(Self::all()),
            "none" | "" => return Ok(Self::none()),
            _ => {}
        }
        s.split(',')
            .map(|n| n.trim().parse::<Provenance>())
            .collect::<Result<Vec<_>, _>>()
            .map(Self::only)
    }
}

impl fmt::Display for AnalyzerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Provenance::name).collect();
        f.write_str(&names.join(","))
    }
}

/// Which end of a peer-exchange message is credited with its peers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PexCredit {
    Sender,
    Receiver,
    #[default]
    Both,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub detector: DetectorConfig,
    pub peermap: PeerMapConfig,
    pub analyzers: AnalyzerSet,
    pub signatures: SignatureTable,
    pub adht: AdhtConfig,
    pub handshake_timeout: f64,
    pub pex_credit: PexCredit,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            detector: DetectorConfig::default(),
            peermap: PeerMapConfig::default(),
            analyzers: AnalyzerSet::all(),
            signatures: SignatureTable::default(),
            adht: AdhtConfig::default(),
            handshake_timeout: DEFAULT_HANDSHAKE_TIMEOUT,
            pex_credit: PexCredit::Both,
        }
    }
}

impl PipelineConfig {
    pub fn with_detector(detector: DetectorConfig) -> Self {
        PipelineConfig {
            detector,
            ..Default::default()
        }
    }
}

/// A terminal outcome as the detector saw it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservedEvent {
    #[serde(flatten)]
    pub event: ConnectionEvent,
    /// Whether the peer map predicted this connection at attempt time.
    pub predicted: bool,
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct PipelineSummary {
    pub packets: u64,
    pub terminal_events: u64,
    pub predicted_events: u64,
    pub alarms: BTreeMap<AlarmKind, usize>,
    pub predictions: BTreeMap<Provenance, usize>,
    pub rejected_port_zero: u64,
}

#[derive(Debug)]
pub struct PipelineOutput {
    /// Alarms and suppression records in emission order.
    pub alarms: Vec<Alarm>,
    pub events: Vec<ObservedEvent>,
    pub first_packet: HashMap<Ipv4Addr, f64>,
    pub peermap: PeerMappings,
    pub packets: u64,
}

impl PipelineOutput {
    pub fn alarms_of(&self, kind: AlarmKind) -> impl Iterator<Item = &Alarm> {
        self.alarms.iter().filter(move |a| a.kind == kind)
    }

    /// Sources with at least one AddressScan.
    pub fn flagged(&self) -> Vec<Ipv4Addr> {
        let mut v: Vec<_> = self.alarms_of(AlarmKind::AddressScan).map(|a| a.source).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn summary(&self) -> PipelineSummary {
        let stats = self.peermap.stats();
        let mut alarms: BTreeMap<_, _> = AlarmKind::ALL.iter().map(|k| (*k, 0)).collect();
        for a in &self.alarms {
            *alarms.entry(a.kind).or_default() += 1;
        }
        PipelineSummary {
            packets: self.packets,
            terminal_events: self.events.len() as u64,
            predicted_events: self.events.iter().filter(|e| e.predicted).count() as u64,
            alarms,
            predictions: stats.by_provenance,
            rejected_port_zero: stats.rejected_port_zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    ts: f64,
    seq: u64,
    event: ConnectionEvent,
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.ts.total_cmp(&other.ts).then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug)]
pub struct Pipeline {
    cfg: PipelineConfig,
    conn: ConnTracker,
    map: PeerMappings,
    adht_table: AdhtTransactionTable,
    scan: ScanTracker,
    buffer: BinaryHeap<Reverse<Pending>>,
    seq: u64,
    out: PipelineOutput,
}

fn v4(addr: SocketAddr) -> Option<SocketAddrV4> {
    match addr {
        SocketAddr::V4(a) => Some(a).filter(wire::is_usable_target),
        SocketAddr::V6(_) => None,
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, ConfigError> {
        let scan = ScanTracker::new(cfg.detector.clone())?;
        Ok(Pipeline {
            conn: ConnTracker::new(cfg.handshake_timeout),
            map: PeerMappings::new(cfg.peermap.clone()),
            adht_table: AdhtTransactionTable::from_config(&cfg.adht),
            scan,
            buffer: BinaryHeap::new(),
            seq: 0,
            out: PipelineOutput {
                alarms: Vec::new(),
                events: Vec::new(),
                first_packet: HashMap::new(),
                peermap: PeerMappings::default(),
                packets: 0,
            },
            cfg,
        })
    }

    pub fn peermap(&self) -> &PeerMappings {
        &self.map
    }

    /// Runs every enabled analyzer over one packet.
    fn analyze(&mut self, pkt: &PacketRecord) {
        let on = self.cfg.analyzers;
        let ts = pkt.ts;
        if on.contains(Provenance::HttpTracker) {
            let peers = trackers::scan_http_tracker(pkt);
            self.map.add_all(pkt.dst_ip, peers, Provenance::HttpTracker, ts);
        }
        if on.contains(Provenance::UdpTracker) {
            if let Some(r) = trackers::parse_udp_tracker(pkt) {
                self.map.add_all(pkt.dst_ip, r.targets(), Provenance::UdpTracker, ts);
            }
        }
        if on.contains(Provenance::Adht) {
            if let Some(req) = dht::adht::parse_request(pkt, &self.cfg.adht) {
                self.adht_table.register(&req, pkt.src_ip, ts, &self.cfg.adht);
            } else if let Some(reply) = dht::adht::parse_reply(pkt, &mut self.adht_table, &self.cfg.adht) {
                let peers = reply.contacts.into_iter().filter_map(v4);
                self.map.add_all(reply.requester, peers, Provenance::Adht, ts);
            }
        }
        if on.contains(Provenance::Mdht) {
            let peers = dht::mdht_extract(pkt);
            self.map.add_all(pkt.dst_ip, peers, Provenance::Mdht, ts);
        }
        if on.contains(Provenance::Btudp) && dht::btudp_match(pkt, &self.cfg.signatures) {
            let target = SocketAddrV4::new(pkt.dst_ip, pkt.dst_port);
            if wire::is_usable_target(&target) {
                self.map.add_all(pkt.src_ip, [target], Provenance::Btudp, ts);
            }
        }
        if on.contains(Provenance::Pex) {
            let peers = pex::scan_utpex(pkt);
            if !peers.is_empty() {
                let credit = self.cfg.pex_credit;
                if matches!(credit, PexCredit::Sender | PexCredit::Both) {
                    self.map.add_all(pkt.src_ip, peers.iter().copied(), Provenance::Pex, ts);
                }
                if matches!(credit, PexCredit::Receiver | PexCredit::Both) {
                    self.map.add_all(pkt.dst_ip, peers, Provenance::Pex, ts);
                }
            }
        }
    }

    fn enqueue(&mut self, events: Vec<ConnectionEvent>) {
        for event in events.into_iter().filter(|e| e.outcome.is_terminal()) {
            self.seq += 1;
            self.buffer.push(Reverse(Pending {
                ts: event.ts,
                seq: self.seq,
                event,
            }));
        }
    }

    /// Hands buffered events older than `horizon` to the detector.
    fn release(&mut self, horizon: Option<f64>) {
        while let Some(Reverse(p)) = self.buffer.peek() {
            if horizon.is_some_and(|h| p.ts >= h) {
                break;
            }
            let Reverse(p) = self.buffer.pop().expect("peeked");
            let ev = p.event;
            let predicted = self
                .map
                .is_predicted(ev.initiator, ev.responder, ev.responder_port, ev.ts);
            self.out.alarms.extend(self.scan.observe(&ev, &self.map));
            self.out.events.push(ObservedEvent { event: ev, predicted });
        }
    }

    pub fn process(&mut self, pkt: &PacketRecord) {
        self.out.packets += 1;
        self.out.first_packet.entry(pkt.src_ip).or_insert(pkt.ts);
        self.analyze(pkt);
        let events = self.conn.process(pkt);
        self.enqueue(events);
        // Outcomes still pending belong to attempts no older than this.
        self.release(Some(pkt.ts - self.conn.timeout()));
    }

    pub fn finish(mut self) -> PipelineOutput {
        let events = self.conn.flush();
        self.enqueue(events);
        self.release(None);
        self.out.alarms.extend(self.scan.finalize());
        self.out.peermap = self.map;
        self.out
    }
}

/// Runs a whole trace through a fresh pipeline.
pub fn run<'a>(
    packets: impl IntoIterator<Item = &'a PacketRecord>,
    cfg: PipelineConfig,
) -> Result<PipelineOutput, ConfigError> {
    let mut p = Pipeline::new(cfg)?;
    for pkt in packets {
        p.process(pkt);
    }
    Ok(p.finish())
}
