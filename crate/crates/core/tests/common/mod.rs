//! Oracles and generators shared by the integration tests. Each oracle
//! recomputes its answer from scratch instead of reusing library state.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::ops::RangeInclusive;

use btscan::capture::{ConnectionEvent, Outcome, Proto};
use btscan::peermap::{PeerMapConfig, PeerMappings, PredictedPeer, Provenance};
use btscan::scandet::{Alarm, AlarmKind, DetectorConfig, ScanTracker};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random number of usable endpoints: nonzero address and port.
pub fn random_peers(rng: &mut impl Rng, count: RangeInclusive<usize>) -> Vec<SocketAddrV4> {
    let n = rng.gen_range(count);
    (0..n)
        .map(|_| SocketAddrV4::new(Ipv4Addr::from(rng.gen_range(1..=u32::MAX)), rng.gen_range(1..=u16::MAX)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Add {
    pub source: Ipv4Addr,
    pub target: SocketAddrV4,
    pub provenance: Provenance,
    pub ts: f64,
}

#[derive(Debug, Clone)]
pub struct DetectorCase {
    pub events: Vec<ConnectionEvent>,
    pub adds: Vec<Add>,
    pub ttl: f64,
    pub cfg: DetectorConfig,
}

/// A random event stream over a handful of sources with a small
/// destination pool, so windows fill, expire and refill.
pub fn random_detector_case(seed: u64, max_events: usize, suppress: bool) -> DetectorCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<Ipv4Addr> = (1..=rng.gen_range(1..=4)).map(|i| Ipv4Addr::new(10, 9, 0, i)).collect();
    let dsts: Vec<Ipv4Addr> = (0..rng.gen_range(2..=60))
        .map(|i| Ipv4Addr::from(0x6440_0000 + i))
        .collect();
    let ports: Vec<u16> = (0..rng.gen_range(1..=40)).map(|i| 1000 + i).collect();
    let n = rng.gen_range(0..=max_events);
    let window = rng.gen_range(5.0..200.0);
    let mut ts = 0.0;
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        ts += rng.gen_range(0.0..window / 10.0);
        let outcome = match rng.gen_range(0..10) {
            0 => Outcome::Attempted,
            1..=2 => Outcome::Established,
            _ => Outcome::Failed,
        };
        events.push(ConnectionEvent {
            ts: (ts * 1e6_f64).round() / 1e6,
            initiator: *sources.choose(&mut rng).unwrap(),
            responder: *dsts.choose(&mut rng).unwrap(),
            responder_port: *ports.choose(&mut rng).unwrap(),
            proto: if rng.gen_bool(0.8) { Proto::Tcp } else { Proto::Udp },
            outcome,
        });
    }

    // Unique (source, target) keys so the add log has a single reading.
    let mut adds = Vec::new();
    let mut keys = HashSet::new();
    for _ in 0..rng.gen_range(0..=n / 2 + 1) {
        let source = *sources.choose(&mut rng).unwrap();
        let target = SocketAddrV4::new(*dsts.choose(&mut rng).unwrap(), *ports.choose(&mut rng).unwrap());
        if keys.insert((source, target)) {
            adds.push(Add {
                source,
                target,
                provenance: *Provenance::ALL.choose(&mut rng).unwrap(),
                ts: rng.gen_range(-10.0..ts.max(1.0)),
            });
        }
    }

    let mut thresholds: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=25)).collect();
    thresholds.sort_unstable();
    thresholds.dedup();
    let shutdown = rng.gen_range(1..=30);
    let lower = rng.gen_range(0.2..1.0);
    let cfg = DetectorConfig {
        report_thresholds: thresholds,
        window,
        shutdown_threshold: shutdown,
        ppr_lower: lower,
        ppr_upper: lower + rng.gen_range(0.0..1.0),
        suppress_predicted: suppress,
        suppress_ppr: suppress,
    };
    DetectorCase {
        events,
        adds,
        ttl: rng.gen_range(20.0..400.0),
        cfg,
    }
}

/// Streaming detector over the case.
pub fn run_streaming(case: &DetectorCase) -> Vec<Alarm> {
    let mut map = PeerMappings::new(PeerMapConfig {
        ttl: case.ttl,
        ..Default::default()
    });
    for a in &case.adds {
        map.add(
            a.source,
            PredictedPeer {
                target: a.target,
                provenance: a.provenance,
                first_seen: a.ts,
            },
        );
    }
    let mut st = ScanTracker::new(case.cfg.clone()).expect("valid config");
    let mut out: Vec<Alarm> = case.events.iter().flat_map(|e| st.observe(e, &map)).collect();
    out.extend(st.finalize());
    out
}

fn predicted_by(case: &DetectorCase, ev: &ConnectionEvent) -> Option<Provenance> {
    case.adds
        .iter()
        .find(|a| {
            a.source == ev.initiator
                && a.target == SocketAddrV4::new(ev.responder, ev.responder_port)
                && a.ts <= ev.ts
                && ev.ts - a.ts <= case.ttl
        })
        .map(|a| a.provenance)
}

/// Recomputes every decision from the event prefix.
pub fn run_oracle(case: &DetectorCase) -> Vec<Alarm> {
    let cfg = &case.cfg;
    let ev = &case.events;
    let mut out: Vec<Alarm> = Vec::new();
    let mut shutdown_checked: HashSet<Ipv4Addr> = HashSet::new();

    // Whether an event was predicted depends only on the event itself.
    let pred: Vec<Option<Provenance>> = ev.iter().map(|e| predicted_by(case, e)).collect();
    let suppressed = |j: usize| cfg.suppress_predicted && pred[j].is_some();

    for i in 0..ev.len() {
        let e = &ev[i];
        if e.outcome == Outcome::Attempted {
            continue;
        }
        let src = e.initiator;
        let prefix: Vec<usize> = (0..=i)
            .filter(|&j| ev[j].initiator == src && ev[j].outcome != Outcome::Attempted)
            .collect();
        if e.outcome != Outcome::Failed {
            continue;
        }
        let now = prefix.iter().map(|&j| ev[j].ts).fold(f64::NEG_INFINITY, f64::max);
        let window_count = |upto: &[usize]| {
            upto.iter()
                .filter(|&&j| ev[j].outcome == Outcome::Failed && !suppressed(j) && now - ev[j].ts <= cfg.window)
                .map(|&j| ev[j].responder)
                .collect::<BTreeSet<_>>()
                .len()
        };
        let shut = out
            .iter()
            .any(|a| a.source == src && a.kind == AlarmKind::ShutdownThresh);
        let alarm = |kind, count, detail| Alarm {
            kind,
            ts: e.ts,
            source: src,
            count,
            detail,
        };

        if suppressed(i) {
            if !shut {
                let p = pred[i].unwrap();
                let before = window_count(&prefix[..prefix.len() - 1]);
                out.push(alarm(
                    AlarmKind::SuppressedByPrediction,
                    before,
                    format!("{}:{} {}", e.responder, e.responder_port, p),
                ));
            }
            continue;
        }
        if shut {
            continue;
        }
        let count = window_count(&prefix);
        let ports = prefix
            .iter()
            .map(|&j| ev[j].responder_port)
            .collect::<BTreeSet<_>>()
            .len();
        let peers = prefix.iter().map(|&j| ev[j].responder).collect::<BTreeSet<_>>().len();
        let ppr = ports as f64 / peers as f64;
        let ppr_hit = cfg.suppress_ppr && cfg.ppr_lower <= ppr && ppr <= cfg.ppr_upper;
        let mut fired = out
            .iter()
            .filter(|a| a.source == src && matches!(a.kind, AlarmKind::AddressScan | AlarmKind::SuppressedByPPR))
            .count();
        while fired < cfg.report_thresholds.len() && count >= cfg.report_thresholds[fired] {
            let t = cfg.report_thresholds[fired];
            out.push(if ppr_hit {
                alarm(AlarmKind::SuppressedByPPR, t, format!("ppr={ppr:.4}"))
            } else {
                alarm(AlarmKind::AddressScan, t, format!("port={}", e.responder_port))
            });
            fired += 1;
        }
        if count >= cfg.shutdown_threshold && shutdown_checked.insert(src) && !ppr_hit {
            out.push(alarm(
                AlarmKind::ShutdownThresh,
                cfg.shutdown_threshold,
                format!("threshold={}", cfg.shutdown_threshold),
            ));
        }
    }

    let flagged: BTreeSet<Ipv4Addr> = out
        .iter()
        .filter(|a| a.kind == AlarmKind::AddressScan)
        .map(|a| a.source)
        .collect();
    for src in flagged {
        let all: Vec<_> = ev
            .iter()
            .filter(|x| x.initiator == src && x.outcome != Outcome::Attempted)
            .collect();
        let ts = all.iter().map(|x| x.ts).fold(f64::NEG_INFINITY, f64::max);
        let hosts = all.iter().map(|x| x.responder).collect::<BTreeSet<_>>().len();
        let ports = all.iter().map(|x| x.responder_port).collect::<BTreeSet<_>>().len();
        out.push(Alarm {
            kind: AlarmKind::ScanSummary,
            ts,
            source: src,
            count: hosts,
            detail: format!("hosts={hosts}"),
        });
        out.push(Alarm {
            kind: AlarmKind::PortScanSummary,
            ts,
            source: src,
            count: ports,
            detail: format!("ports={ports}"),
        });
    }
    out
}
