//! Decentralized peer discovery: Azureus DHT, Mainline DHT, and
//! signature-matched BitTorrent UDP.

pub mod adht;
pub mod btudp;
pub mod mdht;

pub use adht::{AdhtConfig, AdhtReply, AdhtRequest, AdhtTransactionTable};
pub use btudp::{btudp_match, Signature, SignatureError, SignatureTable};
pub use mdht::mdht_extract;
