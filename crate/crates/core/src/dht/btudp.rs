//! Signature matching for miscellaneous BitTorrent UDP traffic.
//!
//! A signature pairs a payload-length predicate with a prefix pattern in
//! which `??` matches any byte. Signature files hold one signature per line:
//!
//! ```text
//! # name        length   prefix
//! mdht-query    len==33  64313a61????
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::capture::{PacketRecord, Proto};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LenOp {
    Eq,
    Ge,
    Le,
    Gt,
    Lt,
}

impl LenOp {
    fn holds(self, len: usize, bound: usize) -> bool {
        match self {
            LenOp::Eq => len == bound,
            LenOp::Ge => len >= bound,
            LenOp::Le => len <= bound,
            LenOp::Gt => len > bound,
            LenOp::Lt => len < bound,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            LenOp::Eq => "==",
            LenOp::Ge => ">=",
            LenOp::Le => "<=",
            LenOp::Gt => ">",
            LenOp::Lt => "<",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub name: String,
    pub len_op: LenOp,
    pub len: usize,
    /// `None` is a wildcard byte.
    pub prefix: Vec<Option<u8>>,
}

impl Signature {
    pub fn matches(&self, payload: &[u8]) -> bool {
        self.len_op.holds(payload.len(), self.len)
            && payload.len() >= self.prefix.len()
            && self.prefix.iter().zip(payload).all(|(p, b)| p.is_none_or(|p| p == *b))
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} len{}{} ", self.name, self.len_op.symbol(), self.len)?;
        for b in &self.prefix {
            match b {
                Some(b) => write!(f, "{b:02x}")?,
                None => f.write_str("??")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("signature line {line}: {message}")]
pub struct SignatureError {
    pub line: usize,
    pub message: String,
}

fn parse_signature(text: &str) -> Result<Signature, String> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    let [name, len_spec, pattern] = fields[..] else {
        return Err(format!("expected 3 fields, found {}", fields.len()));
    };
    let spec = len_spec
        .strip_prefix("len")
        .ok_or_else(|| format!("length predicate {len_spec:?} must start with \"len\""))?;
    let (len_op, bound) = [
        ("==", LenOp::Eq),
        (">=", LenOp::Ge),
        ("<=", LenOp::Le),
        (">", LenOp::Gt),
        ("<", LenOp::Lt),
    ]
    .iter()
    .find_map(|(sym, op)| spec.strip_prefix(sym).map(|rest| (*op, rest)))
    .ok_or_else(|| format!("unknown length operator in {len_spec:?}"))?;
    let len = bound.parse().map_err(|_| format!("bad length bound {bound:?}"))?;
    if pattern.len() % 2 != 0 || pattern.is_empty() {
        return Err(format!(
            "pattern {pattern:?} must be a non-empty even-length hex string"
        ));
    }
    let prefix = pattern
        .as_bytes()
        .chunks(2)
        .map(|pair| match pair {
            b"??" => Ok(None),
            _ => std::str::from_utf8(pair)
                .ok()
                .and_then(|s| u8::from_str_radix(s, 16).ok())
                .map(Some)
                .ok_or_else(|| format!("bad hex byte in pattern {pattern:?}")),
        })
        .collect::<Result<_, _>>()?;
    Ok(Signature {
        name: name.to_string(),
        len_op,
        len,
        prefix,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureTable {
    pub signatures: Vec<Signature>,
}

/// Shipped signatures: KRPC queries and responses and uTP connection setup.
const DEFAULT_SIGNATURES: &str = "\
mdht-query    len>=20 64313a61
mdht-response len>=20 64313a72
utp-syn       len>=20 4100
";

impl Default for SignatureTable {
    fn default() -> Self {
        DEFAULT_SIGNATURES.parse().expect("built-in signatures parse")
    }
}

impl FromStr for SignatureTable {
    type Err = SignatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let signatures = s
            .lines()
            .enumerate()
            .filter_map(|(i, l)| {
                let l = l.split('#').next().unwrap_or("").trim();
                (!l.is_empty()).then_some((i + 1, l))
            })
            .map(|(line, l)| parse_signature(l).map_err(|message| SignatureError { line, message }))
            .collect::<Result<_, _>>()?;
        Ok(SignatureTable { signatures })
    }
}

impl SignatureTable {
    pub fn empty() -> Self {
        SignatureTable { signatures: Vec::new() }
    }

    /// Appends the signatures of another table.
    pub fn extend(&mut self, other: SignatureTable) {
        self.signatures.extend(other.signatures);
    }

    pub fn first_match(&self, payload: &[u8]) -> Option<&Signature> {
        self.signatures.iter().find(|s| s.matches(payload))
    }
}

/// True if a UDP packet matches any signature. On a match the packet's
/// destination endpoint becomes a predicted target of its source.
pub fn btudp_match(pkt: &PacketRecord, signatures: &SignatureTable) -> bool {
    pkt.proto == Proto::Udp && signatures.first_match(&pkt.payload).is_some()
}
