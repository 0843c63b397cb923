//! BitTorrent-aware scan detection.
//!
//! Parses BitTorrent coordination traffic (HTTP and UDP trackers, Azureus and
//! Mainline DHTs, peer exchange) to learn which peers each host is about to
//! contact, then uses those predictions, together with a host's port/peer
//! ratio, to keep a failed-connection port-scan detector from flagging
//! BitTorrent clients.

pub mod bencode;
pub mod capture;
pub mod dht;
pub mod eval;
pub mod peermap;
pub mod pex;
pub mod pipeline;
pub mod scandet;
pub mod synth;
pub mod trackers;
pub mod wire;
