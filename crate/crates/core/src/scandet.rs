//! Failed-connection scan detection with prediction and port/peer-ratio
//! suppression.
//!
//! Each initiator keeps a sliding window of the distinct destinations it
//! failed to reach. Crossing a report threshold raises `AddressScan` unless
//! the host's port/peer ratio looks like P2P traffic; crossing the shutdown
//! threshold silences the host. Failures to a destination the peer map
//! predicted never enter the window.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::net::Ipv4Addr;

use serde::Serialize;
use thiserror::Error;

use crate::capture::{ConnectionEvent, Outcome};
use crate::peermap::PeerMappings;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorConfig {
    pub report_thresholds: Vec<usize>,
    pub window: f64,
    pub shutdown_threshold: usize,
    pub ppr_lower: f64,
    pub ppr_upper: f64,
    pub suppress_predicted: bool,
    pub suppress_ppr: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            report_thresholds: vec![20, 100],
            window: 900.0,
            shutdown_threshold: 100,
            ppr_lower: 0.75,
            ppr_upper: 1.0,
            suppress_predicted: true,
            suppress_ppr: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("report thresholds must be non-empty, positive and strictly ascending")]
    Thresholds,
    #[error("shutdown threshold must be positive")]
    Shutdown,
    #[error("window must be a positive number of seconds")]
    Window,
    #[error("PPR bounds must satisfy 0 < lower <= upper (got {lower}, {upper})")]
    PprBounds { lower: f64, upper: f64 },
}

impl DetectorConfig {
    /// A single report threshold that also shuts the source down.
    pub fn single_threshold(threshold: usize) -> Self {
        DetectorConfig {
            report_thresholds: vec![threshold],
            shutdown_threshold: threshold,
            ..Default::default()
        }
    }

    pub fn with_suppression(mut self, predicted: bool, ppr: bool) -> Self {
        self.suppress_predicted = predicted;
        self.suppress_ppr = ppr;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.report_thresholds;
        if t.is_empty() || t[0] == 0 || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::Thresholds);
        }
        if self.shutdown_threshold == 0 {
            return Err(ConfigError::Shutdown);
        }
        if !(self.window.is_finite() && self.window > 0.0) {
            return Err(ConfigError::Window);
        }
        let (lower, upper) = (self.ppr_lower, self.ppr_upper);
        if !(lower > 0.0 && lower <= upper) {
            return Err(ConfigError::PprBounds { lower, upper });
        }
        Ok(())
    }

    fn ppr_suppresses(&self, ppr: Option<f64>) -> bool {
        self.suppress_ppr && ppr.is_some_and(|r| self.ppr_lower <= r && r <= self.ppr_upper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum AlarmKind {
    AddressScan,
    ShutdownThresh,
    ScanSummary,
    PortScanSummary,
    SuppressedByPrediction,
    SuppressedByPPR,
}

impl AlarmKind {
    pub const ALL: [AlarmKind; 6] = [
        AlarmKind::AddressScan,
        AlarmKind::ShutdownThresh,
        AlarmKind::ScanSummary,
        AlarmKind::PortScanSummary,
        AlarmKind::SuppressedByPrediction,
        AlarmKind::SuppressedByPPR,
    ];

    /// Suppression records go to their own log and are not alarms.
    pub fn is_suppression(self) -> bool {
        matches!(self, AlarmKind::SuppressedByPrediction | AlarmKind::SuppressedByPPR)
    }

    pub fn name(self) -> &'static str {
        match self {
            AlarmKind::AddressScan => "AddressScan",
            AlarmKind::ShutdownThresh => "ShutdownThresh",
            AlarmKind::ScanSummary => "ScanSummary",
            AlarmKind::PortScanSummary => "PortScanSummary",
            AlarmKind::SuppressedByPrediction => "SuppressedByPrediction",
            AlarmKind::SuppressedByPPR => "SuppressedByPPR",
        }
    }
}

impl fmt::Display for AlarmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alarm {
    pub kind: AlarmKind,
    pub ts: f64,
    pub source: Ipv4Addr,
    pub count: usize,
    pub detail: String,
}

impl fmt::Display for Alarm {
    /// `<ts> <kind> <source> <count> <detail>`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.6} {} {} {} {}",
            self.ts, self.kind, self.source, self.count, self.detail
        )
    }
}

/// Unique ports over unique peers; absent when no peers were seen.
pub fn compute_ppr(unique_ports: usize, unique_peers: usize) -> Option<f64> {
    (unique_peers > 0).then(|| unique_ports as f64 / unique_peers as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ts(f64);

impl Eq for Ts {}

impl PartialOrd for Ts {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ts {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Default)]
struct SourceState {
    /// Latest event time seen for this source.
    now: f64,
    /// Failed destination → time of its latest failure.
    last_failure: HashMap<Ipv4Addr, f64>,
    by_time: BTreeSet<(Ts, Ipv4Addr)>,
    ports: HashSet<u16>,
    peers: HashSet<Ipv4Addr>,
    fired: usize,
    shutdown_checked: bool,
    shut_down: bool,
    flagged: bool,
}

impl SourceState {
    fn prune(&mut self, window: f64) {
        while let Some(&(Ts(t), ip)) = self.by_time.first() {
            if self.now - t <= window {
                break;
            }
            self.by_time.pop_first();
            self.last_failure.remove(&ip);
        }
    }

    fn record_failure(&mut self, dst: Ipv4Addr, ts: f64, window: f64) {
        if self.now - ts > window {
            return;
        }
        let prev = self.last_failure.get(&dst).copied();
        if prev.is_some_and(|p| p >= ts) {
            return;
        }
        if let Some(p) = prev {
            self.by_time.remove(&(Ts(p), dst));
        }
        self.last_failure.insert(dst, ts);
        self.by_time.insert((Ts(ts), dst));
    }

    fn ppr(&self) -> Option<f64> {
        compute_ppr(self.ports.len(), self.peers.len())
    }
}

/// Streaming detector state for a whole trace.
#[derive(Debug)]
pub struct ScanTracker {
    cfg: DetectorConfig,
    sources: HashMap<Ipv4Addr, SourceState>,
}

impl ScanTracker {
    pub fn new(cfg: DetectorConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        Ok(ScanTracker {
            cfg,
            sources: HashMap::new(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    /// Feeds one connection outcome. `Attempted` events are ignored.
    pub fn observe(&mut self, ev: &ConnectionEvent, map: &PeerMappings) -> Vec<Alarm> {
        if !ev.outcome.is_terminal() {
            return Vec::new();
        }
        let cfg = &self.cfg;
        let st = self.sources.entry(ev.initiator).or_insert_with(|| SourceState {
            now: ev.ts,
            ..Default::default()
        });
        st.now = st.now.max(ev.ts);
        st.ports.insert(ev.responder_port);
        st.peers.insert(ev.responder);
        if ev.outcome != Outcome::Failed {
            return Vec::new();
        }
        st.prune(cfg.window);

        let mut out = Vec::new();
        if cfg.suppress_predicted {
            if let Some(p) = map.lookup(ev.initiator, ev.responder, ev.responder_port, ev.ts) {
                if !st.shut_down {
                    out.push(Alarm {
                        kind: AlarmKind::SuppressedByPrediction,
                        ts: ev.ts,
                        source: ev.initiator,
                        count: st.last_failure.len(),
                        detail: format!("{}:{} {}", ev.responder, ev.responder_port, p.provenance),
                    });
                }
                return out;
            }
        }

        st.record_failure(ev.responder, ev.ts, cfg.window);
        st.prune(cfg.window);
        if st.shut_down {
            return out;
        }
        let count = st.last_failure.len();
        let alarm = |kind, count, detail| Alarm {
            kind,
            ts: ev.ts,
            source: ev.initiator,
            count,
            detail,
        };
        while st.fired < cfg.report_thresholds.len() && count >= cfg.report_thresholds[st.fired] {
            let threshold = cfg.report_thresholds[st.fired];
            st.fired += 1;
            let ppr = st.ppr();
            if cfg.ppr_suppresses(ppr) {
                out.push(alarm(
                    AlarmKind::SuppressedByPPR,
                    threshold,
                    format!("ppr={:.4}", ppr.unwrap_or_default()),
                ));
            } else {
                st.flagged = true;
                out.push(alarm(
                    AlarmKind::AddressScan,
                    threshold,
                    format!("port={}", ev.responder_port),
                ));
            }
        }
        if !st.shutdown_checked && count >= cfg.shutdown_threshold {
            st.shutdown_checked = true;
            if !cfg.ppr_suppresses(st.ppr()) {
                st.shut_down = true;
                out.push(alarm(
                    AlarmKind::ShutdownThresh,
                    cfg.shutdown_threshold,
                    format!("threshold={}", cfg.shutdown_threshold),
                ));
            }
        }
        out
    }

    /// Current port/peer ratio of a source.
    pub fn compute_ppr(&self, source: Ipv4Addr) -> Option<f64> {
        self.sources.get(&source).and_then(SourceState::ppr)
    }

    /// Distinct failed destinations currently in the source's window.
    pub fn window_count(&self, source: Ipv4Addr) -> usize {
        self.sources.get(&source).map_or(0, |s| s.last_failure.len())
    }

    pub fn is_shut_down(&self, source: Ipv4Addr) -> bool {
        self.sources.get(&source).is_some_and(|s| s.shut_down)
    }

    /// End-of-trace summaries for every source that raised an AddressScan,
    /// ordered by source address.
    pub fn finalize(&self) -> Vec<Alarm> {
        let mut flagged: Vec<_> = self.sources.iter().filter(|(_, s)| s.flagged).collect();
        flagged.sort_by_key(|(ip, _)| **ip);
        flagged
            .into_iter()
            .flat_map(|(ip, s)| {
                [
                    Alarm {
                        kind: AlarmKind::ScanSummary,
                        ts: s.now,
                        source: *ip,
                        count: s.peers.len(),
                        detail: format!("hosts={}", s.peers.len()),
                    },
                    Alarm {
                        kind: AlarmKind::PortScanSummary,
                        ts: s.now,
                        source: *ip,
                        count: s.ports.len(),
                        detail: format!("ports={}", s.ports.len()),
                    },
                ]
            })
            .collect()
    }
}
