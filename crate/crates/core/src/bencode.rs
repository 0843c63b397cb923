//! Bencode decoding and encoding.
//!
//! Tracker responses, Mainline DHT messages and extension-protocol payloads
//! all carry bencoded dictionaries. The decoder is strict about integers and
//! lengths but tolerant of trailing bytes, so it can be pointed at an offset
//! inside an arbitrary TCP or UDP payload.

use std::fmt;

use memchr::memmem;
use thiserror::Error;

/// Nesting depth beyond which decoding is abandoned.
pub const MAX_DEPTH: usize = 32;

/// A decoded bencode value.
///
/// Dictionaries keep their entries in wire order; use [`BencValue::canonical`]
/// before comparing values that may have been re-encoded.
#[derive(Clone, PartialEq, Eq)]
pub enum BencValue {
    Integer(i64),
    Bytes(Vec<u8>),
    List(Vec<BencValue>),
    Dict(Vec<(Vec<u8>, BencValue)>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("invalid integer at offset {0}")]
    InvalidInteger(usize),
    #[error("integer out of 64-bit range at offset {0}")]
    IntegerOverflow(usize),
    #[error("invalid string length at offset {0}")]
    InvalidLength(usize),
    #[error("negative string length at offset {0}")]
    NegativeLength(usize),
    #[error("unexpected byte {byte:#04x} at offset {offset}")]
    UnexpectedByte { offset: usize, byte: u8 },
    #[error("nesting deeper than {MAX_DEPTH} at offset {0}")]
    TooDeep(usize),
}

impl DecodeError {
    pub fn offset(&self) -> usize {
        match *self {
            DecodeError::Truncated(o)
            | DecodeError::InvalidInteger(o)
            | DecodeError::IntegerOverflow(o)
            | DecodeError::InvalidLength(o)
            | DecodeError::NegativeLength(o)
            | DecodeError::TooDeep(o) => o,
            DecodeError::UnexpectedByte { offset, .. } => offset,
        }
    }
}

impl BencValue {
    pub fn bytes(b: impl Into<Vec<u8>>) -> Self {
        BencValue::Bytes(b.into())
    }

    /// Builds a dictionary from `(key, value)` pairs in the given order.
    pub fn dict<K: Into<Vec<u8>>>(entries: impl IntoIterator<Item = (K, BencValue)>) -> Self {
        BencValue::Dict(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            BencValue::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            BencValue::Integer(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[BencValue]> {
        match self {
            BencValue::List(l) => Some(l),
            _ => None,
        }
    }

    /// Looks up the first entry with `key` in a dictionary.
    pub fn get(&self, key: &[u8]) -> Option<&BencValue> {
        match self {
            BencValue::Dict(entries) => entries.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            _ => None,
        }
    }

    /// Returns a copy with every dictionary sorted by key, the order
    /// [`encode`] produces.
    pub fn canonical(&self) -> BencValue {
        match self {
            BencValue::Integer(_) | BencValue::Bytes(_) => self.clone(),
            BencValue::List(l) => BencValue::List(l.iter().map(BencValue::canonical).collect()),
            BencValue::Dict(entries) => {
                let mut sorted: Vec<_> = entries.iter().map(|(k, v)| (k.clone(), v.canonical())).collect();
                sorted.sort_by(|a, b| a.0.cmp(&b.0));
                BencValue::Dict(sorted)
            }
        }
    }
}

impl fmt::Debug for BencValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BencValue::Integer(i) => write!(f, "{i}"),
            BencValue::Bytes(b) => match std::str::from_utf8(b) {
                Ok(s) if s.chars().all(|c| !c.is_control()) => write!(f, "{s:?}"),
                _ => write!(f, "0x{}", hex::encode(b)),
            },
            BencValue::List(l) => f.debug_list().entries(l).finish(),
            BencValue::Dict(entries) => f
                .debug_map()
                .entries(entries.iter().map(|(k, v)| (BencValue::Bytes(k.clone()), v)))
                .finish(),
        }
    }
}

struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Decoder<'_> {
    fn peek(&self) -> Result<u8, DecodeError> {
        self.data.get(self.pos).copied().ok_or(DecodeError::Truncated(self.pos))
    }

    fn value(&mut self, depth: usize) -> Result<BencValue, DecodeError> {
        if depth > MAX_DEPTH {
            return Err(DecodeError::TooDeep(self.pos));
        }
        match self.peek()? {
            b'i' => self.integer(),
            b'0'..=b'9' => self.byte_string().map(BencValue::Bytes),
            b'-' => Err(DecodeError::NegativeLength(self.pos)),
            b'l' => {
                self.pos += 1;
                let mut items = Vec::new();
                while self.peek()? != b'e' {
                    items.push(self.value(depth + 1)?);
                }
                self.pos += 1;
                Ok(BencValue::List(items))
            }
            b'd' => {
                self.pos += 1;
                let mut entries = Vec::new();
                while self.peek()? != b'e' {
                    let at = self.pos;
                    let key = match self.peek()? {
                        b'0'..=b'9' => self.byte_string()?,
                        byte => return Err(DecodeError::UnexpectedByte { offset: at, byte }),
                    };
                    let value = self.value(depth + 1)?;
                    entries.push((key, value));
                }
                self.pos += 1;
                Ok(BencValue::Dict(entries))
            }
            byte => Err(DecodeError::UnexpectedByte { offset: self.pos, byte }),
        }
    }

    fn integer(&mut self) -> Result<BencValue, DecodeError> {
        let start = self.pos;
        self.pos += 1;
        let rest = &self.data[self.pos..];
        let end = memchr::memchr(b'e', rest).ok_or(DecodeError::Truncated(self.data.len()))?;
        let digits = &rest[..end];
        let (negative, magnitude) = match digits.split_first() {
            Some((b'-', m)) => (true, m),
            _ => (false, digits),
        };
        let canonical = !magnitude.is_empty()
            && magnitude.iter().all(u8::is_ascii_digit)
            && !(magnitude.len() > 1 && magnitude[0] == b'0')
            && !(negative && magnitude == b"0");
        if !canonical {
            return Err(DecodeError::InvalidInteger(start));
        }
        // Digits are ASCII so the conversion cannot fail.
        let text = std::str::from_utf8(digits).expect("ascii digits");
        let value: i64 = text.parse().map_err(|_| DecodeError::IntegerOverflow(start))?;
        self.pos += end + 1;
        Ok(BencValue::Integer(value))
    }

    fn byte_string(&mut self) -> Result<Vec<u8>, DecodeError> {
        let start = self.pos;
        let mut len: usize = 0;
        loop {
            let b = self.peek()?;
            match b {
                b'0'..=b'9' => {
                    len = len
                        .checked_mul(10)
                        .and_then(|l| l.checked_add(usize::from(b - b'0')))
                        .ok_or(DecodeError::InvalidLength(start))?;
                    self.pos += 1;
                }
                b':' if self.pos > start => {
                    self.pos += 1;
                    break;
                }
                _ => return Err(DecodeError::InvalidLength(start)),
            }
        }
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.data.len())
            .ok_or(DecodeError::Truncated(self.data.len()))?;
        let bytes = self.data[self.pos..end].to_vec();
        self.pos = end;
        Ok(bytes)
    }
}

/// Decodes one value from the front of `data`, returning it together with
/// the number of bytes it occupied. Trailing bytes are ignored.
pub fn decode(data: &[u8]) -> Result<(BencValue, usize), DecodeError> {
    let mut d = Decoder { data, pos: 0 };
    let v = d.value(0)?;
    Ok((v, d.pos))
}

/// Encodes `v` canonically (dictionary keys in byte order).
pub fn encode(v: &BencValue) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(v, &mut out);
    out
}

fn encode_bytes(b: &[u8], out: &mut Vec<u8>) {
    out.extend_from_slice(b.len().to_string().as_bytes());
    out.push(b':');
    out.extend_from_slice(b);
}

fn encode_into(v: &BencValue, out: &mut Vec<u8>) {
    match v {
        BencValue::Integer(i) => {
            out.push(b'i');
            out.extend_from_slice(i.to_string().as_bytes());
            out.push(b'e');
        }
        BencValue::Bytes(b) => encode_bytes(b, out),
        BencValue::List(items) => {
            out.push(b'l');
            for item in items {
                encode_into(item, out);
            }
            out.push(b'e');
        }
        BencValue::Dict(entries) => {
            let mut sorted: Vec<_> = entries.iter().collect();
            sorted.sort_by(|a, b| a.0.cmp(&b.0));
            out.push(b'd');
            for (k, v) in sorted {
                encode_bytes(k, out);
                encode_into(v, out);
            }
            out.push(b'e');
        }
    }
}

/// Encodes a dictionary key the way it appears on the wire, e.g. `peers` →
/// `5:peers`.
pub fn key_marker(key: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(key.len() + 4);
    encode_bytes(key.as_bytes(), &mut out);
    out
}

/// Finds `marker` anywhere in `data` and decodes the value immediately after
/// it. Occurrences that are not followed by a well-formed value are skipped.
/// Returns the value and the offset at which it starts.
pub fn scan_for_value(data: &[u8], marker: &[u8]) -> Option<(BencValue, usize)> {
    if marker.is_empty() {
        return None;
    }
    memmem::find_iter(data, marker).find_map(|at| {
        let start = at + marker.len();
        decode(&data[start..]).ok().map(|(v, _)| (v, start))
    })
}

/// Like [`scan_for_value`] but yields every occurrence that decodes.
pub fn scan_all_values<'a>(data: &'a [u8], marker: &'a [u8]) -> impl Iterator<Item = (BencValue, usize)> + 'a {
    memmem::find_iter(data, marker).filter_map(move |at| {
        let start = at + marker.len();
        decode(&data[start..]).ok().map(|(v, _)| (v, start))
    })
}
