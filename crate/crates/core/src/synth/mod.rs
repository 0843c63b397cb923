//! Labeled synthetic traces: port scanners of three geometries and
//! BitTorrent hosts whose coordination traffic precedes their connection
//! attempts.
//!
//! Address plan ("separate networks" for labeling):
//!
//! ```text
//! 10.1.0.0/16     scanners
//! 10.2.0.0/16     BitTorrent hosts
//! 172.16.0.0/12   scan targets
//! 100.64.0.0/10   BitTorrent peers
//! 198.51.100.0/24 trackers
//! 203.0.113.0/24  DHT nodes
//! ```

pub mod encode;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{PacketRecord, TcpFlags};
use crate::dht::AdhtConfig;
use encode::AdhtHeader;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostKind {
    HorizontalScanner,
    VerticalScanner,
    HybridScanner,
    Bittorrent,
}

impl HostKind {
    pub fn is_scanner(self) -> bool {
        self != HostKind::Bittorrent
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordination {
    Http,
    UdpTracker,
    Mdht,
    Adht,
    Pex,
}

impl Coordination {
    pub const ALL: [Coordination; 5] = [
        Coordination::Http,
        Coordination::UdpTracker,
        Coordination::Mdht,
        Coordination::Adht,
        Coordination::Pex,
    ];
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid host profile: {0}")]
    InvalidProfile(String),
    #[error("address block {block} exhausted")]
    AddressExhausted { block: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HostProfile {
    pub kind: HostKind,
    /// Connection attempts per second.
    pub rate: f64,
    pub address: Ipv4Addr,
    /// Offset of this host's targets inside the scan-target or peer block.
    pub block_offset: u32,
    /// Scanners: distinct target addresses and ports.
    pub target_count: usize,
    pub port_count: usize,
    pub first_port: u16,
    pub no_reply_fraction: f64,
    /// BitTorrent: peers learned, unconnectable share and how they are learned.
    pub peer_count: usize,
    pub unconnectable_fraction: f64,
    pub coordination_mix: Vec<Coordination>,
    pub seed: u64,
}

const SCANNER_NET: u32 = 0x0A01_0000;
const BT_NET: u32 = 0x0A02_0000;
const TARGET_NET: u32 = 0xAC10_0000;
const TARGET_NET_SIZE: u32 = 1 << 20;
const PEER_NET: u32 = 0x6440_0000;
const PEER_NET_SIZE: u32 = 1 << 22;
const HTTP_TRACKER: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 1);
const UDP_TRACKER: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 2);
const MDHT_NODE: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 1);
const ADHT_NODE: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 2);
const PEX_PORT: u16 = 51413;

impl HostProfile {
    fn scanner(kind: HostKind, rate: f64, targets: usize, ports: usize, first_port: u16, seed: u64) -> Self {
        HostProfile {
            kind,
            rate,
            address: Ipv4Addr::from(SCANNER_NET + 1),
            block_offset: 0,
            target_count: targets,
            port_count: ports,
            first_port,
            no_reply_fraction: 0.95,
            peer_count: 0,
            unconnectable_fraction: 0.0,
            coordination_mix: Vec::new(),
            seed,
        }
    }

    /// Many addresses, one port.
    pub fn horizontal(rate: f64, targets: usize, port: u16, seed: u64) -> Self {
        Self::scanner(HostKind::HorizontalScanner, rate, targets, 1, port, seed)
    }

    /// One address, many ports starting at 1.
    pub fn vertical(rate: f64, ports: usize, seed: u64) -> Self {
        Self::scanner(HostKind::VerticalScanner, rate, 1, ports, 1, seed)
    }

    /// A vertical sweep of every address in turn.
    pub fn hybrid(rate: f64, targets: usize, ports: usize, seed: u64) -> Self {
        Self::scanner(HostKind::HybridScanner, rate, targets, ports, 1, seed)
    }

    pub fn bittorrent(peers: usize, unconnectable: f64, mix: Vec<Coordination>, seed: u64) -> Self {
        HostProfile {
            kind: HostKind::Bittorrent,
            rate: 2.0,
            address: Ipv4Addr::from(BT_NET + 1),
            block_offset: 0,
            target_count: 0,
            port_count: 0,
            first_port: 0,
            no_reply_fraction: 0.5,
            peer_count: peers,
            unconnectable_fraction: unconnectable,
            coordination_mix: mix,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidProfile(m));
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return bad(format!("rate must be positive, got {}", self.rate));
        }
        for (name, f) in [
            ("no_reply_fraction", self.no_reply_fraction),
            ("unconnectable_fraction", self.unconnectable_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must lie in [0, 1], got {f}"));
            }
        }
        match self.kind {
            HostKind::Bittorrent => {
                if self.peer_count > 0 && self.coordination_mix.is_empty() {
                    return bad("a BitTorrent host needs at least one coordination protocol".into());
                }
            }
            _ => {
                if self.target_count == 0 || self.port_count == 0 {
                    return bad("scanners need at least one target and one port".into());
                }
                if usize::from(self.first_port) + self.port_count - 1 > usize::from(u16::MAX) || self.first_port == 0 {
                    return bad(format!("ports {}+{} out of range", self.first_port, self.port_count));
                }
            }
        }
        Ok(())
    }

    /// Addresses used from the host's block.
    pub fn block_size(&self) -> u32 {
        match self.kind {
            HostKind::Bittorrent => self.peer_count as u32 + 1,
            _ => self.target_count as u32,
        }
    }
}

/// Rounds to the microsecond so traces survive a pcap round trip unchanged.
pub fn quantize(ts: f64) -> f64 {
    Duration::from_micros((ts * 1e6).round() as u64).as_secs_f64()
}

fn sort_stream(mut pkts: Vec<PacketRecord>) -> Vec<PacketRecord> {
    for p in &mut pkts {
        p.ts = quantize(p.ts);
    }
    pkts.sort_by(|a, b| a.ts.total_cmp(&b.ts));
    pkts
}

/// Probes at `profile.rate`; most go unanswered, the rest are refused.
pub fn gen_scanner(profile: &HostProfile, start: f64) -> Result<Vec<PacketRecord>, SynthError> {
    profile.validate()?;
    if !profile.kind.is_scanner() {
        return Err(SynthError::InvalidProfile("not a scanner profile".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let base = TARGET_NET + profile.block_offset;
    let probes = profile.target_count * profile.port_count;
    let mut out = Vec::with_capacity(probes * 2);
    for j in 0..probes {
        // address-major: every port of one target before the next
        let ip = Ipv4Addr::from(base + (j / profile.port_count) as u32);
        let port = profile.first_port + (j % profile.port_count) as u16;
        let sport = 1024 + (j % 60_000) as u16;
        let ts = start + j as f64 / profile.rate;
        out.push(PacketRecord::tcp(
            ts,
            (profile.address, sport),
            (ip, port),
            TcpFlags::SYN,
            Vec::new(),
        ));
        if rng.gen::<f64>() >= profile.no_reply_fraction {
            let rtt = rng.gen_range(0.005..0.1);
            out.push(PacketRecord::tcp(
                ts + rtt,
                (ip, port),
                (profile.address, sport),
                TcpFlags::RST_ACK,
                Vec::new(),
            ));
        }
    }
    Ok(sort_stream(out))
}

fn random_id(rng: &mut ChaCha8Rng) -> [u8; 20] {
    let mut id = [0u8; 20];
    rng.fill_bytes(&mut id);
    id
}

/// The peers a BitTorrent host will learn about, in announcement order.
pub fn bittorrent_peers(profile: &HostProfile) -> Vec<SocketAddrV4> {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0x005e_ed0f_9ee7);
    (0..profile.peer_count)
        .map(|j| {
            let ip = Ipv4Addr::from(PEER_NET + profile.block_offset + j as u32);
            let port = if rng.gen_bool(0.1) {
                6881
            } else {
                rng.gen_range(10_000..=65_000)
            };
            SocketAddrV4::new(ip, port)
        })
        .collect()
}

struct BtStream<'a> {
    profile: &'a HostProfile,
    rng: ChaCha8Rng,
    out: Vec<PacketRecord>,
    next_sport: u16,
}

impl BtStream<'_> {
    fn host(&self) -> Ipv4Addr {
        self.profile.address
    }

    fn sport(&mut self) -> u16 {
        self.next_sport += 1;
        self.next_sport
    }

    fn tcp(&mut self, ts: f64, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), flags: TcpFlags, payload: Vec<u8>) {
        self.out.push(PacketRecord::tcp(ts, src, dst, flags, payload));
    }

    fn udp(&mut self, ts: f64, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), payload: Vec<u8>) {
        self.out.push(PacketRecord::udp(ts, src, dst, payload));
    }

    /// Full handshake from the host to `remote`, returning the host port.
    fn connect(&mut self, ts: f64, remote: (Ipv4Addr, u16)) -> u16 {
        let me = (self.host(), self.sport());
        self.tcp(ts, me, remote, TcpFlags::SYN, Vec::new());
        self.tcp(ts + 0.01, remote, me, TcpFlags::SYN_ACK, Vec::new());
        self.tcp(ts + 0.02, me, remote, TcpFlags::ACK, Vec::new());
        me.1
    }

    fn coordinate(&mut self, ts: f64, proto: Coordination, peers: &[SocketAddrV4], pex_peer: SocketAddrV4) {
        let info_hash = random_id(&mut self.rng);
        match proto {
            Coordination::Http => {
                let tracker = (HTTP_TRACKER, 80);
                let port = self.connect(ts, tracker);
                let me = (self.host(), port);
                self.tcp(
                    ts + 0.03,
                    me,
                    tracker,
                    TcpFlags::ACK,
                    encode::http_announce_request(&info_hash, 6881),
                );
                let compact = self.rng.gen_bool(0.5);
                self.tcp(
                    ts + 0.05,
                    tracker,
                    me,
                    TcpFlags::ACK,
                    encode::http_tracker_response(peers, compact),
                );
            }
            Coordination::UdpTracker => {
                let tracker = (UDP_TRACKER, 6969);
                let me = (self.host(), self.sport());
                let txid = self.rng.gen();
                self.udp(ts, me, tracker, encode::udp_announce_request(txid, &info_hash, 6881));
                self.udp(ts + 0.04, tracker, me, encode::udp_announce_response(txid, peers));
            }
            Coordination::Mdht => {
                let node = (MDHT_NODE, 6881);
                let me = (self.host(), 6881);
                let txid = self.rng.gen::<[u8; 2]>();
                let id = random_id(&mut self.rng);
                self.udp(ts, me, node, encode::mdht_get_peers(&txid, &id, &info_hash));
                let node_id = random_id(&mut self.rng);
                self.udp(
                    ts + 0.04,
                    node,
                    me,
                    encode::mdht_values_response(&txid, &node_id, peers),
                );
            }
            Coordination::Adht => {
                let cfg = AdhtConfig::default();
                let node = (ADHT_NODE, 6881);
                let me = (self.host(), 27_000);
                let h = AdhtHeader {
                    version: *[8u8, 12, 20, 26, 50].choose(&mut self.rng).expect("non-empty"),
                    connection_id: self.rng.gen(),
                    transaction_id: self.rng.gen(),
                    instance_id: self.rng.gen(),
                };
                let find_value = self.rng.gen_bool(0.5);
                let action = if find_value {
                    cfg.find_value_request
                } else {
                    cfg.find_node_request
                };
                let addr = SocketAddrV4::new(me.0, me.1);
                self.udp(ts, me, node, encode::adht_request(&cfg, h, action, &addr));
                let reply = if find_value {
                    encode::adht_find_value_reply(&cfg, h, peers, true)
                } else {
                    encode::adht_find_node_reply(&cfg, h, peers)
                };
                self.udp(ts + 0.04, node, me, reply);
            }
            Coordination::Pex => {
                let remote = (*pex_peer.ip(), pex_peer.port());
                let port = self.connect(ts, remote);
                self.tcp(
                    ts + 0.05,
                    remote,
                    (self.host(), port),
                    TcpFlags::ACK,
                    encode::pex_message(peers),
                );
            }
        }
    }
}

/// Coordination first, then one connection attempt per learned peer.
pub fn gen_bittorrent_host(profile: &HostProfile, start: f64) -> Result<Vec<PacketRecord>, SynthError> {
    profile.validate()?;
    if profile.kind != HostKind::Bittorrent {
        return Err(SynthError::InvalidProfile("not a BitTorrent profile".into()));
    }
    let peers = bittorrent_peers(profile);
    let pex_peer = SocketAddrV4::new(
        Ipv4Addr::from(PEER_NET + profile.block_offset + peers.len() as u32),
        PEX_PORT,
    );
    let mut s = BtStream {
        profile,
        rng: ChaCha8Rng::seed_from_u64(profile.seed),
        out: Vec::new(),
        next_sport: 40_000,
    };

    let mix = &profile.coordination_mix;
    let mut t = start;
    if !peers.is_empty() {
        let per = peers.len().div_ceil(mix.len());
        for (proto, chunk) in mix.iter().cycle().zip(peers.chunks(per)) {
            s.coordinate(t, *proto, chunk, pex_peer);
            t += 0.2;
        }
    }

    let unconnectable = (profile.unconnectable_fraction * peers.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..peers.len()).collect();
    order.shuffle(&mut s.rng);
    let mut dead = vec![false; peers.len()];
    for &i in order.iter().take(unconnectable) {
        dead[i] = true;
    }
    order.shuffle(&mut s.rng);

    let t0 = t + 0.5;
    for (n, &i) in order.iter().enumerate() {
        let peer = peers[i];
        let ts = t0 + n as f64 / profile.rate + s.rng.gen_range(0.0..0.25 / profile.rate);
        let remote = (*peer.ip(), peer.port());
        if dead[i] {
            let me = (s.host(), s.sport());
            s.tcp(ts, me, remote, TcpFlags::SYN, Vec::new());
            if s.rng.gen::<f64>() >= profile.no_reply_fraction {
                let rtt = s.rng.gen_range(0.01..0.3);
                s.tcp(ts + rtt, remote, me, TcpFlags::RST_ACK, Vec::new());
            }
        } else {
            s.connect(ts, remote);
        }
    }
    Ok(sort_stream(s.out))
}

pub type Labels = BTreeMap<Ipv4Addr, HostKind>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledTrace {
    pub packets: Vec<PacketRecord>,
    /// Kind of every host that initiates connections in `packets`.
    pub labels: Labels,
}

impl LabeledTrace {
    pub fn scanners(&self) -> impl Iterator<Item = Ipv4Addr> + '_ {
        self.labels.iter().filter(|(_, k)| k.is_scanner()).map(|(ip, _)| *ip)
    }

    pub fn bittorrent_hosts(&self) -> impl Iterator<Item = Ipv4Addr> + '_ {
        self.labels.iter().filter(|(_, k)| !k.is_scanner()).map(|(ip, _)| *ip)
    }
}

fn assign(
    profiles: &mut [HostProfile],
    net: u32,
    block: &'static str,
    block_size: u32,
    master: &mut ChaCha8Rng,
) -> Result<(), SynthError> {
    if profiles.len() > 65_534 {
        return Err(SynthError::AddressExhausted { block });
    }
    let mut offset = 0u32;
    for (i, p) in profiles.iter_mut().enumerate() {
        p.address = Ipv4Addr::from(net + i as u32 + 1);
        p.block_offset = offset;
        p.seed ^= master.next_u64();
        offset = offset
            .checked_add(p.block_size())
            .filter(|o| *o <= block_size)
            .ok_or(SynthError::AddressExhausted { block })?;
    }
    Ok(())
}

/// Merges every host, all starting at t = 0, into one labeled trace. Host
/// addresses, target blocks and per-host seeds are assigned here.
pub fn assemble_experiment(
    mut scanners: Vec<HostProfile>,
    mut bt_hosts: Vec<HostProfile>,
    seed: u64,
) -> Result<LabeledTrace, SynthError> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    assign(&mut scanners, SCANNER_NET, "scan targets", TARGET_NET_SIZE, &mut master)?;
    assign(&mut bt_hosts, BT_NET, "BitTorrent peers", PEER_NET_SIZE, &mut master)?;
    let mut trace = LabeledTrace::default();
    for p in &scanners {
        trace.packets.extend(gen_scanner(p, 0.0)?);
        trace.labels.insert(p.address, p.kind);
    }
    for p in &bt_hosts {
        trace.packets.extend(gen_bittorrent_host(p, 0.0)?);
        trace.labels.insert(p.address, p.kind);
    }
    trace.packets.sort_by(|a, b| a.ts.total_cmp(&b.ts));
    Ok(trace)
}

/// Population parameters for the controlled experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scanners: usize,
    pub bt_hosts: usize,
    pub min_rate: f64,
    pub max_rate: f64,
    /// Probes per scanner.
    pub scan_probes: usize,
    pub peers: usize,
    pub unconnectable: f64,
    pub mix: Vec<Coordination>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scanners: 51,
            bt_hosts: 49,
            min_rate: 0.01,
            max_rate: 1000.0,
            scan_probes: 1000,
            peers: 200,
            unconnectable: 0.8,
            mix: Coordination::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    /// Scanner rates spaced log-uniformly over `[min_rate, max_rate]`;
    /// geometries cycle horizontal, vertical, hybrid.
    pub fn profiles(&self) -> (Vec<HostProfile>, Vec<HostProfile>) {
        let n = self.scanners;
        let span = (self.max_rate / self.min_rate).log10();
        let scanners = (0..n)
            .map(|i| {
                let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                let rate = self.min_rate * 10f64.powf(span * frac);
                let probes = self.scan_probes;
                let seed = i as u64;
                match i % 3 {
                    0 => HostProfile::horizontal(rate, probes, 445, seed),
                    1 => HostProfile::vertical(rate, probes, seed),
                    _ => {
                        let ports = (probes / 20).max(1);
                        HostProfile::hybrid(rate, probes.div_ceil(ports), ports, seed)
                    }
                }
            })
            .collect();
        let bt = (0..self.bt_hosts)
            .map(|i| HostProfile::bittorrent(self.peers, self.unconnectable, self.mix.clone(), 1000 + i as u64))
            .collect();
        (scanners, bt)
    }

    pub fn generate(&self, seed: u64) -> Result<LabeledTrace, SynthError> {
        let (s, b) = self.profiles();
        assemble_experiment(s, b, seed)
    }
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    source: Ipv4Addr,
    kind: HostKind,
}

pub fn write_labels<W: Write>(mut sink: W, labels: &Labels) -> std::io::Result<()> {
    for (source, kind) in labels {
        serde_json::to_writer(
            &mut sink,
            &LabelLine {
                source: *source,
                kind: *kind,
            },
        )?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("labels line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_labels<R: BufRead>(source: R) -> Result<Labels, LabelError> {
    let mut out = Labels::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: LabelLine = serde_json::from_str(&line).map_err(|e| LabelError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(l.source, l.kind);
    }
    Ok(out)
}
