use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::net::Ipv4Addr;

use super::{ConnectionEvent, Deadline, Outcome, PacketRecord, Proto};

/// `(initiator, responder, responder port)`; the initiator's port is not part
/// of the identity.
type Triple = (Ipv4Addr, Ipv4Addr, u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Waiting,
    Answered,
    Unanswered,
}

#[derive(Debug, Clone, Copy)]
struct Flow {
    id: u64,
    first_ts: f64,
    initiator_port: u16,
    state: State,
}

/// UDP exchange tracker.
///
/// The first datagram of a triple is an attempt. A datagram in the reverse
/// direction establishes it; silence for longer than the timeout fails it.
/// Resolved triples stay in the table so later datagrams are not new attempts.
#[derive(Debug)]
pub struct UdpTracker {
    timeout: f64,
    flows: HashMap<Triple, Flow>,
    deadlines: BinaryHeap<Reverse<Deadline<Triple>>>,
    next_id: u64,
}

impl UdpTracker {
    pub fn new(timeout: f64) -> Self {
        UdpTracker {
            timeout,
            flows: HashMap::new(),
            deadlines: BinaryHeap::new(),
            next_id: 0,
        }
    }

    fn event(key: &Triple, flow: &Flow, outcome: Outcome) -> ConnectionEvent {
        ConnectionEvent {
            ts: flow.first_ts,
            initiator: key.0,
            responder: key.1,
            responder_port: key.2,
            proto: Proto::Udp,
            outcome,
        }
    }

    fn fail(&mut self, d: &Deadline<Triple>) -> Option<ConnectionEvent> {
        let flow = self.flows.get_mut(&d.key)?;
        if flow.id != d.id || flow.state != State::Waiting {
            return None;
        }
        flow.state = State::Unanswered;
        let flow = *flow;
        Some(Self::event(&d.key, &flow, Outcome::Failed))
    }

    pub fn expire(&mut self, now: f64) -> Vec<ConnectionEvent> {
        let mut out = Vec::new();
        while let Some(Reverse(d)) = self.deadlines.peek() {
            if now - d.ts <= self.timeout {
                break;
            }
            let Reverse(d) = self.deadlines.pop().expect("peeked");
            out.extend(self.fail(&d));
        }
        out
    }

    pub fn flush(&mut self) -> Vec<ConnectionEvent> {
        let mut out = Vec::new();
        while let Some(Reverse(d)) = self.deadlines.pop() {
            out.extend(self.fail(&d));
        }
        out
    }

    pub fn track(&mut self, pkt: &PacketRecord) -> Option<ConnectionEvent> {
        debug_assert_eq!(pkt.proto, Proto::Udp);
        let fwd = (pkt.src_ip, pkt.dst_ip, pkt.dst_port);
        if self.flows.contains_key(&fwd) {
            return None;
        }
        let rev = (pkt.dst_ip, pkt.src_ip, pkt.src_port);
        if let Some(flow) = self.flows.get_mut(&rev) {
            if flow.initiator_port == pkt.dst_port && flow.state == State::Waiting {
                flow.state = State::Answered;
                let flow = *flow;
                return Some(Self::event(&rev, &flow, Outcome::Established));
            }
            if flow.initiator_port == pkt.dst_port {
                return None;
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        let flow = Flow {
            id,
            first_ts: pkt.ts,
            initiator_port: pkt.src_port,
            state: State::Waiting,
        };
        self.flows.insert(fwd, flow);
        self.deadlines.push(Reverse(Deadline {
            ts: pkt.ts,
            id,
            key: fwd,
        }));
        Some(Self::event(&fwd, &flow, Outcome::Attempted))
    }
}
