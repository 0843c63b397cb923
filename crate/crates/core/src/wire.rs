//! Bounds-checked byte primitives shared by every analyzer.
//!
//! All offsets are 0-based and all ranges half-open. Multi-byte integers are
//! read in network byte order. Reading past the end of a buffer is a
//! recoverable [`RangeError`]; analyzers treat it as "this packet is not the
//! protocol I am looking for".

use std::net::{Ipv4Addr, SocketAddrV4};

use thiserror::Error;

/// An access that falls outside the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("byte range {start}..{end} out of bounds for length {len}")]
pub struct RangeError {
    pub start: usize,
    pub end: usize,
    pub len: usize,
}

fn check(data: &[u8], start: usize, end: usize) -> Result<(), RangeError> {
    if start <= end && end <= data.len() {
        Ok(())
    } else {
        Err(RangeError {
            start,
            end,
            len: data.len(),
        })
    }
}

/// Reads a big-endian `u16` at `offset`.
pub fn read_u16_be(data: &[u8], offset: usize) -> Result<u16, RangeError> {
    let end = offset.checked_add(2).ok_or(RangeError {
        start: offset,
        end: usize::MAX,
        len: data.len(),
    })?;
    check(data, offset, end)?;
    Ok(u16::from_be_bytes([data[offset], data[offset + 1]]))
}

/// Reads a big-endian `u32` at `offset`.
pub fn read_u32_be(data: &[u8], offset: usize) -> Result<u32, RangeError> {
    let bytes = slice(data, offset, offset.saturating_add(4))?;
    Ok(u32::from_be_bytes(bytes.try_into().expect("length checked")))
}

/// Reads a big-endian `u64` at `offset`.
pub fn read_u64_be(data: &[u8], offset: usize) -> Result<u64, RangeError> {
    let bytes = slice(data, offset, offset.saturating_add(8))?;
    Ok(u64::from_be_bytes(bytes.try_into().expect("length checked")))
}

/// Returns `data[start..end]`.
pub fn slice(data: &[u8], start: usize, end: usize) -> Result<&[u8], RangeError> {
    check(data, start, end)?;
    Ok(&data[start..end])
}

/// Returns the byte at `idx`.
pub fn byte_at(data: &[u8], idx: usize) -> Result<u8, RangeError> {
    data.get(idx).copied().ok_or(RangeError {
        start: idx,
        end: idx.saturating_add(1),
        len: data.len(),
    })
}

/// Widens every byte to an unsigned integer.
pub fn bytes_as_uints(data: &[u8]) -> Vec<u32> {
    data.iter().map(|&b| u32::from(b)).collect()
}

/// Width of one compact IPv4 peer entry (4 address bytes, 2 port bytes).
pub const COMPACT_PEER_LEN: usize = 6;

/// Decodes a compact IPv4 peer list. Returns `None` unless the length is a
/// multiple of six.
pub fn compact_peers(data: &[u8]) -> Option<Vec<SocketAddrV4>> {
    if !data.len().is_multiple_of(COMPACT_PEER_LEN) {
        return None;
    }
    Some(data.chunks_exact(COMPACT_PEER_LEN).map(compact_peer).collect())
}

/// Decodes one 6-byte compact entry. Panics if `entry` is shorter.
pub fn compact_peer(entry: &[u8]) -> SocketAddrV4 {
    SocketAddrV4::new(
        Ipv4Addr::new(entry[0], entry[1], entry[2], entry[3]),
        u16::from_be_bytes([entry[4], entry[5]]),
    )
}

pub fn encode_compact(peers: &[SocketAddrV4]) -> Vec<u8> {
    let mut out = Vec::with_capacity(peers.len() * COMPACT_PEER_LEN);
    for p in peers {
        out.extend_from_slice(&p.ip().octets());
        out.extend_from_slice(&p.port().to_be_bytes());
    }
    out
}

/// False for endpoints that can never be connection targets (port 0 or the
/// unspecified address).
pub fn is_usable_target(peer: &SocketAddrV4) -> bool {
    peer.port() != 0 && !peer.ip().is_unspecified()
}

/// A forward-only reader over a byte buffer.
///
/// Used for the variable-layout headers (ADHT) where each field's presence
/// depends on earlier fields.
#[derive(Debug, Clone)]
pub struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn at(data: &'a [u8], pos: usize) -> Self {
        Self { data, pos }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len().saturating_sub(self.pos)
    }

    pub fn u8(&mut self) -> Result<u8, RangeError> {
        let v = byte_at(self.data, self.pos)?;
        self.pos += 1;
        Ok(v)
    }

    pub fn u16(&mut self) -> Result<u16, RangeError> {
        let v = read_u16_be(self.data, self.pos)?;
        self.pos += 2;
        Ok(v)
    }

    pub fn u32(&mut self) -> Result<u32, RangeError> {
        let v = read_u32_be(self.data, self.pos)?;
        self.pos += 4;
        Ok(v)
    }

    pub fn u64(&mut self) -> Result<u64, RangeError> {
        let v = read_u64_be(self.data, self.pos)?;
        self.pos += 8;
        Ok(v)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], RangeError> {
        let v = slice(self.data, self.pos, self.pos.saturating_add(n))?;
        self.pos += n;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn u16_examples() {
        assert_eq!(read_u16_be(&[0x1A, 0xE1], 0), Ok(6881));
        assert_eq!(read_u16_be(&[0, 0], 0), Ok(0));
        assert_eq!(read_u16_be(&[0xFF, 0xFF, 0x01], 1), Ok(65281));
        assert!(read_u16_be(&[0xFF], 0).is_err());
        assert!(read_u16_be(&[0, 0], usize::MAX).is_err());
    }

    #[test]
    fn u32_examples() {
        assert_eq!(read_u32_be(&[0, 0, 0, 1], 0), Ok(1));
        assert_eq!(read_u32_be(&[0x0A, 0, 0, 1], 0), Ok(167_772_161));
        assert_eq!(read_u32_be(&[0xFF; 4], 0), Ok(u32::MAX));
        assert!(read_u32_be(&[0; 4], 1).is_err());
    }

    #[test]
    fn slice_examples() {
        assert_eq!(slice(b"abcdef", 1, 3), Ok(&b"bc"[..]));
        assert_eq!(slice(b"abcdef", 0, 0), Ok(&b""[..]));
        assert_eq!(slice(b"abcdef", 0, 6), Ok(&b"abcdef"[..]));
        assert!(slice(b"abc", 2, 1).is_err());
        assert!(slice(b"abc", 0, 4).is_err());
    }

    #[test]
    fn byte_examples() {
        assert_eq!(byte_at(b"abc", 1), Ok(98));
        assert_eq!(byte_at(&[0x80], 0), Ok(128));
        assert!(byte_at(b"", 0).is_err());
        assert_eq!(bytes_as_uints(b"ab"), vec![97, 98]);
        assert!(bytes_as_uints(b"").is_empty());
        assert_eq!(bytes_as_uints(&[0, 0xFF]), vec![0, 255]);
    }

    #[test]
    fn cursor_walks_fields() {
        let data = [1u8, 0, 2, 0, 0, 0, 3, 9];
        let mut c = Cursor::new(&data);
        assert_eq!(c.u8(), Ok(1));
        assert_eq!(c.u16(), Ok(2));
        assert_eq!(c.u32(), Ok(3));
        assert_eq!(c.remaining(), 1);
        assert!(c.u16().is_err());
        assert_eq!(c.position(), 7);
        assert_eq!(c.take(1), Ok(&[9u8][..]));
    }

    #[test]
    fn compact_lists() {
        let peers = compact_peers(&[10, 0, 0, 1, 0x1A, 0xE1]).unwrap();
        assert_eq!(peers, vec!["10.0.0.1:6881".parse().unwrap()]);
        assert_eq!(encode_compact(&peers), vec![10, 0, 0, 1, 0x1A, 0xE1]);
        assert_eq!(compact_peers(&[]), Some(vec![]));
        assert_eq!(compact_peers(&[0; 7]), None);
        assert!(!is_usable_target(&"1.2.3.4:0".parse().unwrap()));
        assert!(!is_usable_target(&"0.0.0.0:80".parse().unwrap()));
    }

    proptest! {
        #[test]
        fn u16_composes_from_bytes(data in proptest::collection::vec(any::<u8>(), 2..64), o in 0usize..62) {
            prop_assume!(o + 2 <= data.len());
            let hi = u16::from(byte_at(&data, o).unwrap());
            let lo = u16::from(byte_at(&data, o + 1).unwrap());
            prop_assert_eq!(read_u16_be(&data, o).unwrap(), hi * 256 + lo);
        }

        #[test]
        fn u32_composes_from_u16(data in proptest::collection::vec(any::<u8>(), 4..64), o in 0usize..60) {
            prop_assume!(o + 4 <= data.len());
            let hi = u32::from(read_u16_be(&data, o).unwrap());
            let lo = u32::from(read_u16_be(&data, o + 2).unwrap());
            prop_assert_eq!(read_u32_be(&data, o).unwrap(), hi * 65536 + lo);
        }

        #[test]
        fn slice_composes(data in proptest::collection::vec(any::<u8>(), 0..64),
                          cuts in proptest::collection::vec(any::<proptest::sample::Index>(), 4)) {
            let b = cuts[0].index(data.len() + 1);
            let a = cuts[1].index(b + 1);
            let e = cuts[2].index(b - a + 1);
            let c = cuts[3].index(e + 1);
            let inner = slice(slice(&data, a, b).unwrap(), c, e).unwrap();
            prop_assert_eq!(inner, slice(&data, a + c, a + e).unwrap());
        }
    }
}
