use std::io::{BufRead, Write};
use std::net::{IpAddr, Ipv4Addr};

use serde::{Deserialize, Serialize};

use super::{CaptureError, PacketRecord, Proto, TcpFlags};

/// On-disk shape of one NDJSON packet line.
#[derive(Debug, Serialize, Deserialize)]
struct Line {
    ts: f64,
    src: String,
    sport: i64,
    dst: String,
    dport: i64,
    proto: Proto,
    #[serde(default)]
    flags: String,
    #[serde(default)]
    payload_hex: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Default)]
pub struct NdjsonIngest {
    pub packets: Vec<PacketRecord>,
    pub errors: Vec<LineError>,
}

fn parse_addr(field: &str, s: &str) -> Result<Ipv4Addr, String> {
    match s.parse::<IpAddr>() {
        Ok(IpAddr::V4(a)) => Ok(a),
        Ok(IpAddr::V6(_)) => Err(format!("{field}: IPv6 addresses are not supported")),
        Err(_) => Err(format!("{field}: {s:?} is not a dotted-quad address")),
    }
}

fn parse_port(field: &str, v: i64) -> Result<u16, String> {
    u16::try_from(v).map_err(|_| format!("{field}: {v} outside 0-65535"))
}

fn parse_line(text: &str) -> Result<PacketRecord, String> {
    let l: Line = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if !l.ts.is_finite() {
        return Err("ts: not a finite number".into());
    }
    let flags =
        TcpFlags::parse(&l.flags).ok_or_else(|| format!("flags: {:?} is not a string over S, A, R, F", l.flags))?;
    if l.proto == Proto::Udp && !flags.is_empty() {
        return Err("flags: must be empty for udp".into());
    }
    let hex_ok = l.payload_hex.len().is_multiple_of(2)
        && l.payload_hex
            .bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
    if !hex_ok {
        return Err("payload_hex: expected even-length lowercase hex".into());
    }
    Ok(PacketRecord {
        ts: l.ts,
        src_ip: parse_addr("src", &l.src)?,
        src_port: parse_port("sport", l.sport)?,
        dst_ip: parse_addr("dst", &l.dst)?,
        dst_port: parse_port("dport", l.dport)?,
        proto: l.proto,
        flags,
        payload: hex::decode(&l.payload_hex).expect("validated hex"),
    })
}

/// Reads one packet per line. Blank lines are skipped; lines that fail the
/// schema are reported and reading continues.
pub fn ingest_ndjson<R: BufRead>(source: R) -> Result<NdjsonIngest, CaptureError> {
    let mut out = NdjsonIngest::default();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line) {
            Ok(p) => out.packets.push(p),
            Err(message) => out.errors.push(LineError { line: i + 1, message }),
        }
    }
    Ok(out)
}

pub fn write_ndjson<W: Write>(mut sink: W, packets: &[PacketRecord]) -> Result<(), CaptureError> {
    for p in packets {
        let line = Line {
            ts: p.ts,
            src: p.src_ip.to_string(),
            sport: p.src_port.into(),
            dst: p.dst_ip.to_string(),
            dport: p.dst_port.into(),
            proto: p.proto,
            flags: p.flags.to_string(),
            payload_hex: hex::encode(&p.payload),
        };
        serde_json::to_writer(&mut sink, &line).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}
