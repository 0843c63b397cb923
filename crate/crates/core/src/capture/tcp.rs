use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use super::{ConnectionEvent, Deadline, FlowKey, Outcome, PacketRecord, Proto};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HandshakeState {
    SynSent,
    /// The responder answered; only the final ACK is outstanding.
    SynAckSeen,
}

#[derive(Debug, Clone, Copy)]
struct Flow {
    id: u64,
    syn_ts: f64,
    state: HandshakeState,
}

/// Three-way-handshake tracker.
///
/// A flow starts at the initiator's first SYN and is forgotten as soon as its
/// terminal event is emitted, so a fresh SYN after a failure is a new attempt.
/// Retransmitted SYNs while a flow is pending are ignored.
#[derive(Debug)]
pub struct TcpTracker {
    timeout: f64,
    flows: HashMap<FlowKey, Flow>,
    deadlines: BinaryHeap<Reverse<Deadline<FlowKey>>>,
    next_id: u64,
}

impl TcpTracker {
    pub fn new(timeout: f64) -> Self {
        TcpTracker {
            timeout,
            flows: HashMap::new(),
            deadlines: BinaryHeap::new(),
            next_id: 0,
        }
    }

    pub fn timeout(&self) -> f64 {
        self.timeout
    }

    pub fn pending(&self) -> usize {
        self.flows.len()
    }

    fn event(key: &FlowKey, flow: &Flow, outcome: Outcome) -> ConnectionEvent {
        ConnectionEvent {
            ts: flow.syn_ts,
            initiator: key.initiator,
            responder: key.responder,
            responder_port: key.responder_port,
            proto: Proto::Tcp,
            outcome,
        }
    }

    /// Closes `key` with the outcome its state implies when no further
    /// packets arrive.
    fn resolve(&mut self, key: &FlowKey, id: u64) -> Option<ConnectionEvent> {
        match self.flows.get(key) {
            Some(flow) if flow.id == id => {
                let flow = self.flows.remove(key).expect("present");
                let outcome = match flow.state {
                    HandshakeState::SynSent => Outcome::Failed,
                    HandshakeState::SynAckSeen => Outcome::Established,
                };
                Some(Self::event(key, &flow, outcome))
            }
            _ => None,
        }
    }

    /// Resolves flows whose SYN is more than `timeout` seconds older than
    /// `now`.
    pub fn expire(&mut self, now: f64) -> Vec<ConnectionEvent> {
        let mut out = Vec::new();
        while let Some(Reverse(d)) = self.deadlines.peek() {
            if now - d.ts <= self.timeout {
                break;
            }
            let Reverse(d) = self.deadlines.pop().expect("peeked");
            out.extend(self.resolve(&d.key, d.id));
        }
        out
    }

    pub fn flush(&mut self) -> Vec<ConnectionEvent> {
        let mut out = Vec::new();
        while let Some(Reverse(d)) = self.deadlines.pop() {
            out.extend(self.resolve(&d.key, d.id));
        }
        out
    }

    /// Feeds one TCP packet. Call [`TcpTracker::expire`] first when packets
    /// are processed in time order; [`super::ConnTracker`] does this.
    pub fn track(&mut self, pkt: &PacketRecord) -> Option<ConnectionEvent> {
        debug_assert_eq!(pkt.proto, Proto::Tcp);
        let flags = pkt.flags;
        let fwd = FlowKey::forward(pkt);
        if let Some(flow) = self.flows.get_mut(&fwd) {
            // Initiator → responder on a pending flow.
            if flow.state == HandshakeState::SynAckSeen && flags.ack() && !flags.syn() {
                let flow = self.flows.remove(&fwd).expect("present");
                return Some(Self::event(&fwd, &flow, Outcome::Established));
            }
            return None;
        }
        let rev = FlowKey::reverse(pkt);
        if let Some(flow) = self.flows.get_mut(&rev) {
            // Responder → initiator.
            if flow.state == HandshakeState::SynSent {
                if flags.rst() {
                    let flow = self.flows.remove(&rev).expect("present");
                    return Some(Self::event(&rev, &flow, Outcome::Failed));
                }
                if flags.syn() && flags.ack() {
                    flow.state = HandshakeState::SynAckSeen;
                }
            } else if flags.rst() {
                // Answered, then torn down before the final ACK.
                let flow = self.flows.remove(&rev).expect("present");
                return Some(Self::event(&rev, &flow, Outcome::Established));
            }
            return None;
        }
        if flags.syn() && !flags.ack() && !flags.rst() {
            let id = self.next_id;
            self.next_id += 1;
            let flow = Flow {
                id,
                syn_ts: pkt.ts,
                state: HandshakeState::SynSent,
            };
            self.flows.insert(fwd, flow);
            self.deadlines.push(Reverse(Deadline {
                ts: pkt.ts,
                id,
                key: fwd,
            }));
            return Some(Self::event(&fwd, &flow, Outcome::Attempted));
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::super::{track_all, TcpFlags};
    use super::*;
    use std::net::Ipv4Addr;

    const A: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
    const B: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);

    fn out(ts: f64, flags: TcpFlags) -> PacketRecord {
        PacketRecord::tcp(ts, (A, 40000), (B, 80), flags, vec![])
    }

    fn back(ts: f64, flags: TcpFlags) -> PacketRecord {
        PacketRecord::tcp(ts, (B, 80), (A, 40000), flags, vec![])
    }

    fn outcomes(events: &[ConnectionEvent]) -> Vec<Outcome> {
        events.iter().map(|e| e.outcome).collect()
    }

    #[test]
    fn three_way_handshake() {
        let ev = track_all(
            &[
                out(0.0, TcpFlags::SYN),
                back(0.1, TcpFlags::SYN_ACK),
                out(0.2, TcpFlags::ACK),
            ],
            30.0,
        );
        assert_eq!(outcomes(&ev), [Outcome::Attempted, Outcome::Established]);
        assert_eq!(ev[1].ts, 0.0);
    }

    #[test]
    fn reset_fails() {
        let ev = track_all(&[out(0.0, TcpFlags::SYN), back(0.1, TcpFlags::RST_ACK)], 30.0);
        assert_eq!(outcomes(&ev), [Outcome::Attempted, Outcome::Failed]);
    }

    #[test]
    fn lazy_timeout() {
        let other = PacketRecord::tcp(31.0, (B, 1), (A, 2), TcpFlags::ACK, vec![]);
        let mut t = TcpTracker::new(30.0);
        assert!(t.track(&out(0.0, TcpFlags::SYN)).is_some());
        assert!(t.expire(30.0).is_empty());
        let ev = t.expire(other.ts);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].outcome, Outcome::Failed);
        assert_eq!(ev[0].ts, 0.0);
        assert_eq!(t.pending(), 0);
    }

    #[test]
    fn late_syn_ack_is_too_late() {
        let ev = track_all(&[out(0.0, TcpFlags::SYN), back(40.0, TcpFlags::SYN_ACK)], 30.0);
        assert_eq!(outcomes(&ev), [Outcome::Attempted, Outcome::Failed]);
    }

    #[test]
    fn retransmitted_syn_is_one_attempt() {
        let ev = track_all(
            &[
                out(0.0, TcpFlags::SYN),
                out(3.0, TcpFlags::SYN),
                out(9.0, TcpFlags::SYN),
            ],
            30.0,
        );
        assert_eq!(outcomes(&ev), [Outcome::Attempted, Outcome::Failed]);
    }

    #[test]
    fn syn_after_failure_is_new_attempt() {
        let ev = track_all(
            &[
                out(0.0, TcpFlags::SYN),
                back(0.1, TcpFlags::RST),
                out(1.0, TcpFlags::SYN),
            ],
            30.0,
        );
        assert_eq!(
            outcomes(&ev),
            [Outcome::Attempted, Outcome::Failed, Outcome::Attempted, Outcome::Failed]
        );
    }

    #[test]
    fn answered_without_final_ack_is_established() {
        let ev = track_all(&[out(0.0, TcpFlags::SYN), back(0.1, TcpFlags::SYN_ACK)], 30.0);
        assert_eq!(outcomes(&ev), [Outcome::Attempted, Outcome::Established]);
    }

    #[test]
    fn midstream_packets_ignored() {
        let ev = track_all(&[out(0.0, TcpFlags::ACK), back(0.1, TcpFlags::ACK)], 30.0);
        assert!(ev.is_empty());
    }
}
