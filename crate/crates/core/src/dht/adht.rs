//! Azureus (Vuze) DHT.
//!
//! Requests have no fixed length, so they are recognized structurally: the
//! protocol version sits at byte 16, the version decides which optional
//! header fields follow, and the node address embedded after them must carry
//! the packet's own UDP source port. Find-node and find-value requests are
//! remembered by transaction id; a later reply with the same id and
//! connection id is decoded and its contacts credited to the requester.
//!
//! Request header (byte offsets where fixed):
//!
//! ```text
//!  0  connection id   long   (most significant bit set)
//!  8  action          int
//! 12  transaction id  int
//! 16  version         byte
//! 17  vendor id       byte   iff version >= VENDOR_ID
//!     network id      int    iff version >= NETWORKS
//!     local version   byte   iff version >= FIX_ORIGINATOR
//!     node address    address (7 or 19 bytes)
//!     instance id     int
//!     time            long
//! ```
//!
//! Reply header:
//!
//! ```text
//!  0  action          int
//!  4  transaction id  int
//!  8  connection id   long
//! 16  version         byte
//! 17  vendor id       byte   iff version >= VENDOR_ID
//!     network id      int    iff version >= NETWORKS
//!     instance id     int
//! ```
//!
//! Reply bodies:
//!
//! ```text
//! find-node reply:   count short, count × contact
//! find-value reply:  has_values boolean
//!                    false: count short, count × contact
//!                    true:  count short, count × (originator contact,
//!                                                 length short, value bytes)
//! ```
//!
//! A contact is `type byte (1 = UDP), version byte, address`; an address is
//! `length byte (4 or 16), address bytes, port short`.

use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};
use std::ops::RangeInclusive;

use crate::capture::{PacketRecord, Proto};
use crate::wire::{Cursor, RangeError};

pub const CONTACT_TYPE_UDP: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdhtConfig {
    pub valid_versions: RangeInclusive<u8>,
    pub vendor_id_threshold: u8,
    pub networks_threshold: u8,
    pub fix_originator_threshold: u8,
    pub find_node_request: u32,
    pub find_node_reply: u32,
    pub find_value_request: u32,
    pub find_value_reply: u32,
    /// Seconds a registered request waits for its reply.
    pub ttl: f64,
    pub capacity: usize,
}

impl Default for AdhtConfig {
    fn default() -> Self {
        AdhtConfig {
            valid_versions: 1..=64,
            vendor_id_threshold: 13,
            networks_threshold: 9,
            fix_originator_threshold: 24,
            find_node_request: 1024,
            find_node_reply: 1025,
            find_value_request: 1030,
            find_value_reply: 1031,
            ttl: 60.0,
            capacity: 65_536,
        }
    }
}

impl AdhtConfig {
    pub fn has_vendor_id(&self, version: u8) -> bool {
        version >= self.vendor_id_threshold
    }

    pub fn has_network_id(&self, version: u8) -> bool {
        version >= self.networks_threshold
    }

    pub fn has_local_version(&self, version: u8) -> bool {
        version >= self.fix_originator_threshold
    }

    pub fn is_find_request(&self, action: u32) -> bool {
        action == self.find_node_request || action == self.find_value_request
    }

    fn reply_for(&self, request_action: u32) -> Option<u32> {
        if request_action == self.find_node_request {
            Some(self.find_node_reply)
        } else if request_action == self.find_value_request {
            Some(self.find_value_reply)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdhtRequest {
    pub connection_id: u64,
    pub action: u32,
    pub transaction_id: u32,
    pub protocol_version: u8,
    pub vendor_id: Option<u8>,
    pub network_id: Option<u32>,
    pub local_protocol_version: Option<u8>,
    pub node_address: SocketAddr,
    pub instance_id: u32,
    pub time: u64,
}

fn read_address(c: &mut Cursor<'_>) -> Result<Option<SocketAddr>, RangeError> {
    let ip = match c.u8()? {
        4 => {
            let b = c.take(4)?;
            IpAddr::V4(Ipv4Addr::new(b[0], b[1], b[2], b[3]))
        }
        16 => {
            let b: [u8; 16] = c.take(16)?.try_into().expect("16 bytes");
            IpAddr::V6(Ipv6Addr::from(b))
        }
        _ => return Ok(None),
    };
    let port = c.u16()?;
    Ok(Some(SocketAddr::new(ip, port)))
}

/// Recognizes an ADHT request. Every structural check must pass.
pub fn parse_request(pkt: &PacketRecord, cfg: &AdhtConfig) -> Option<AdhtRequest> {
    if pkt.proto != Proto::Udp || pkt.payload.len() < 17 {
        return None;
    }
    let data = &pkt.payload;
    let protocol_version = data[16];
    if !cfg.valid_versions.contains(&protocol_version) {
        return None;
    }
    let mut c = Cursor::new(data);
    let connection_id = c.u64().ok()?;
    if connection_id >> 63 != 1 {
        return None;
    }
    c.take(9).ok()?; // action, transaction id, version: read below by offset
    let vendor_id = if cfg.has_vendor_id(protocol_version) {
        Some(c.u8().ok()?)
    } else {
        None
    };
    let network_id = if cfg.has_network_id(protocol_version) {
        Some(c.u32().ok()?)
    } else {
        None
    };
    let local_protocol_version = if cfg.has_local_version(protocol_version) {
        Some(c.u8().ok()?)
    } else {
        None
    };
    let node_address = read_address(&mut c).ok()??;
    if node_address.port() != pkt.src_port {
        return None;
    }
    let instance_id = c.u32().ok()?;
    let time = c.u64().ok()?;
    let mut fixed = Cursor::at(data, 8);
    let action = fixed.u32().ok()?;
    let transaction_id = fixed.u32().ok()?;
    Some(AdhtRequest {
        connection_id,
        action,
        transaction_id,
        protocol_version,
        vendor_id,
        network_id,
        local_protocol_version,
        node_address,
        instance_id,
        time,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    requester: Ipv4Addr,
    action: u32,
    connection_id: u64,
    ts: f64,
    seq: u64,
}

/// Outstanding find requests keyed by transaction id.
///
/// Entries expire after the configured TTL. When full, the oldest entry is
/// evicted.
#[derive(Debug)]
pub struct AdhtTransactionTable {
    ttl: f64,
    capacity: usize,
    entries: HashMap<u32, Pending>,
    order: BTreeMap<u64, u32>,
    next_seq: u64,
}

impl AdhtTransactionTable {
    pub fn new(ttl: f64, capacity: usize) -> Self {
        AdhtTransactionTable {
            ttl,
            capacity: capacity.max(1),
            entries: HashMap::new(),
            order: BTreeMap::new(),
            next_seq: 0,
        }
    }

    pub fn from_config(cfg: &AdhtConfig) -> Self {
        Self::new(cfg.ttl, cfg.capacity)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Remembers a find request. A repeated transaction id replaces the
    /// older entry. Returns false (and records nothing) for other actions.
    pub fn register(&mut self, req: &AdhtRequest, src: Ipv4Addr, ts: f64, cfg: &AdhtConfig) -> bool {
        if !cfg.is_find_request(req.action) {
            return false;
        }
        if let Some(old) = self.entries.remove(&req.transaction_id) {
            self.order.remove(&old.seq);
        }
        while self.entries.len() >= self.capacity {
            let Some((_, txid)) = self.order.pop_first() else {
                break;
            };
            self.entries.remove(&txid);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.insert(
            req.transaction_id,
            Pending {
                requester: src,
                action: req.action,
                connection_id: req.connection_id,
                ts,
                seq,
            },
        );
        self.order.insert(seq, req.transaction_id);
        true
    }

    /// Returns the requester of a live entry without consuming it.
    pub fn lookup(&self, transaction_id: u32, now: f64) -> Option<Ipv4Addr> {
        self.entries
            .get(&transaction_id)
            .filter(|p| now - p.ts <= self.ttl)
            .map(|p| p.requester)
    }

    fn take(&mut self, transaction_id: u32, now: f64) -> Option<Pending> {
        let p = self.entries.remove(&transaction_id)?;
        self.order.remove(&p.seq);
        (now - p.ts <= self.ttl).then_some(p)
    }
}

/// Contacts recovered from a reply, credited to the host that asked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdhtReply {
    pub requester: Ipv4Addr,
    pub transaction_id: u32,
    pub contacts: Vec<SocketAddr>,
}

fn read_contact(c: &mut Cursor<'_>) -> Result<Option<Option<SocketAddr>>, RangeError> {
    let kind = c.u8()?;
    let _version = c.u8()?;
    let Some(addr) = read_address(c)? else {
        return Ok(None);
    };
    Ok(Some((kind == CONTACT_TYPE_UDP).then_some(addr)))
}

/// Reads `count` contacts, skipping non-UDP ones. Stops at the first
/// malformed entry, keeping what was read.
fn read_contacts(c: &mut Cursor<'_>, out: &mut Vec<SocketAddr>, values: bool) {
    let Ok(count) = c.u16() else {
        return;
    };
    for _ in 0..count {
        match read_contact(c) {
            Ok(Some(contact)) => {
                if values {
                    let Ok(len) = c.u16() else { return };
                    if c.take(usize::from(len)).is_err() {
                        return;
                    }
                }
                out.extend(contact);
            }
            _ => return,
        }
    }
}

/// Decodes a reply if its transaction matches a registered request. The
/// matching entry is consumed.
pub fn parse_reply(pkt: &PacketRecord, table: &mut AdhtTransactionTable, cfg: &AdhtConfig) -> Option<AdhtReply> {
    if pkt.proto != Proto::Udp || pkt.payload.len() < 17 {
        return None;
    }
    let mut c = Cursor::new(&pkt.payload);
    let action = c.u32().ok()?;
    if action != cfg.find_node_reply && action != cfg.find_value_reply {
        return None;
    }
    let transaction_id = c.u32().ok()?;
    let connection_id = c.u64().ok()?;
    let pending = table.entries.get(&transaction_id)?;
    if pending.connection_id != connection_id || cfg.reply_for(pending.action) != Some(action) {
        return None;
    }
    let pending = table.take(transaction_id, pkt.ts)?;
    let version = c.u8().ok()?;
    if cfg.has_vendor_id(version) {
        c.u8().ok()?;
    }
    if cfg.has_network_id(version) {
        c.u32().ok()?;
    }
    let _instance = c.u32().ok()?;
    let mut contacts = Vec::new();
    if action == cfg.find_value_reply {
        let has_values = c.u8().ok()? != 0;
        read_contacts(&mut c, &mut contacts, has_values);
    } else {
        read_contacts(&mut c, &mut contacts, false);
    }
    Some(AdhtReply {
        requester: pending.requester,
        transaction_id,
        contacts,
    })
}
