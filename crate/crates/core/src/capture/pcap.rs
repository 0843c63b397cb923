use std::io::{Read, Write};
use std::time::Duration;

use etherparse::{NetSlice, PacketBuilder, SlicedPacket, TcpHeader, TransportSlice};
use pcap_file::pcap::{PcapPacket, PcapReader, PcapWriter};
use pcap_file::DataLink;

use super::{CaptureError, PacketRecord, Proto, TcpFlags};

pub const PCAP_MAGIC: u32 = 0xa1b2_c3d4;
pub const PCAP_MAGIC_SWAPPED: u32 = 0xd4c3_b2a1;
const PCAP_MAGIC_NANO: u32 = 0xa1b2_3c4d;
const PCAP_MAGIC_NANO_SWAPPED: u32 = 0x4d3c_b2a1;

/// Result of reading a pcap file.
#[derive(Debug, Default)]
pub struct PcapIngest {
    pub packets: Vec<PacketRecord>,
    pub frames: usize,
    pub skipped_ipv6: usize,
    /// Non-IP frames, non-TCP/UDP transports, fragments and malformed frames.
    pub skipped_other: usize,
    /// Set when the file ended in the middle of a record.
    pub truncated: Option<String>,
}

impl PcapIngest {
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.skipped_ipv6 > 0 {
            w.push(format!(
                "{} IPv6 frame(s) skipped: only IPv4 is supported",
                self.skipped_ipv6
            ));
        }
        if let Some(t) = &self.truncated {
            w.push(format!("partial trace: {t}"));
        }
        w
    }
}

/// Returns true if `head` starts with a classic pcap magic number in either
/// byte order.
pub fn is_pcap_magic(head: &[u8]) -> bool {
    if head.len() < 4 {
        return false;
    }
    let m = u32::from_be_bytes([head[0], head[1], head[2], head[3]]);
    matches!(
        m,
        PCAP_MAGIC | PCAP_MAGIC_SWAPPED | PCAP_MAGIC_NANO | PCAP_MAGIC_NANO_SWAPPED
    )
}

/// Reads a classic pcap stream with an Ethernet link layer.
pub fn ingest_pcap<R: Read>(source: R) -> Result<PcapIngest, CaptureError> {
    let mut reader = PcapReader::new(source)
        .map_err(|e| CaptureError::UnsupportedFormat(format!("not a classic pcap file: {e}")))?;
    let datalink = reader.header().datalink;
    if datalink != DataLink::ETHERNET {
        return Err(CaptureError::UnsupportedFormat(format!(
            "link type {datalink:?} (only Ethernet is supported)"
        )));
    }
    let mut out = PcapIngest::default();
    while let Some(next) = reader.next_packet() {
        let pkt = match next {
            Ok(p) => p,
            Err(e) => {
                out.truncated = Some(format!("stopped after {} frames: {e}", out.frames));
                break;
            }
        };
        out.frames += 1;
        match decode_frame(pkt.timestamp.as_secs_f64(), &pkt.data) {
            Frame::Record(r) => out.packets.push(r),
            Frame::Ipv6 => out.skipped_ipv6 += 1,
            Frame::Other => out.skipped_other += 1,
        }
    }
    Ok(out)
}

enum Frame {
    Record(PacketRecord),
    Ipv6,
    Other,
}

fn decode_frame(ts: f64, data: &[u8]) -> Frame {
    let Ok(sliced) = SlicedPacket::from_ethernet(data) else {
        return Frame::Other;
    };
    let ip = match &sliced.net {
        Some(NetSlice::Ipv4(ip)) => ip.header(),
        Some(NetSlice::Ipv6(_)) => return Frame::Ipv6,
        _ => return Frame::Other,
    };
    let (src_ip, dst_ip) = (ip.source_addr(), ip.destination_addr());
    match &sliced.transport {
        Some(TransportSlice::Tcp(tcp)) => {
            let mut flags = TcpFlags::empty();
            for (set, f) in [
                (tcp.syn(), TcpFlags::SYN),
                (tcp.ack(), TcpFlags::ACK),
                (tcp.rst(), TcpFlags::RST),
                (tcp.fin(), TcpFlags::FIN),
            ] {
                if set {
                    flags = flags.union(f);
                }
            }
            Frame::Record(PacketRecord {
                ts,
                src_ip,
                src_port: tcp.source_port(),
                dst_ip,
                dst_port: tcp.destination_port(),
                proto: Proto::Tcp,
                flags,
                payload: tcp.payload().to_vec(),
            })
        }
        Some(TransportSlice::Udp(udp)) => Frame::Record(PacketRecord {
            ts,
            src_ip,
            src_port: udp.source_port(),
            dst_ip,
            dst_port: udp.destination_port(),
            proto: Proto::Udp,
            flags: TcpFlags::empty(),
            payload: udp.payload().to_vec(),
        }),
        _ => Frame::Other,
    }
}

fn mac_for(ip: std::net::Ipv4Addr) -> [u8; 6] {
    let o = ip.octets();
    [0x02, 0x00, o[0], o[1], o[2], o[3]]
}

/// Serializes one record as an Ethernet/IPv4 frame with valid checksums.
pub fn encode_frame(p: &PacketRecord) -> Result<Vec<u8>, CaptureError> {
    let eth = PacketBuilder::ethernet2(mac_for(p.src_ip), mac_for(p.dst_ip));
    let ip = eth.ipv4(p.src_ip.octets(), p.dst_ip.octets(), 64);
    let mut frame = Vec::new();
    let res = match p.proto {
        Proto::Tcp => {
            let mut h = TcpHeader::new(p.src_port, p.dst_port, 1, 64240);
            h.syn = p.flags.syn();
            h.ack = p.flags.ack();
            h.rst = p.flags.rst();
            h.fin = p.flags.fin();
            if h.ack {
                h.acknowledgment_number = 1;
            }
            let b = ip.tcp_header(h);
            frame.reserve(b.size(p.payload.len()));
            b.write(&mut frame, &p.payload)
        }
        Proto::Udp => {
            let b = ip.udp(p.src_port, p.dst_port);
            frame.reserve(b.size(p.payload.len()));
            b.write(&mut frame, &p.payload)
        }
    };
    res.map_err(|e| CaptureError::Encode(e.to_string()))?;
    Ok(frame)
}

/// Writes records as a microsecond-resolution classic pcap (native byte
/// order, Ethernet link type).
pub fn write_pcap<W: Write>(sink: W, packets: &[PacketRecord]) -> Result<(), CaptureError> {
    let mut w = PcapWriter::new(sink).map_err(|e| CaptureError::Encode(e.to_string()))?;
    for p in packets {
        if !(p.ts.is_finite() && p.ts >= 0.0) {
            return Err(CaptureError::Encode(format!("timestamp {} not representable", p.ts)));
        }
        let frame = encode_frame(p)?;
        let ts = Duration::from_micros((p.ts * 1e6).round() as u64);
        let len = u32::try_from(frame.len()).expect("frame fits in u32");
        w.write_packet(&PcapPacket::new(ts, len, &frame))
            .map_err(|e| CaptureError::Encode(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn sample() -> Vec<PacketRecord> {
        let a = Ipv4Addr::new(10, 0, 0, 1);
        let b = Ipv4Addr::new(10, 0, 0, 2);
        vec![
            PacketRecord::tcp(1.5, (a, 1234), (b, 80), TcpFlags::SYN, vec![]),
            PacketRecord::tcp(1.75, (b, 80), (a, 1234), TcpFlags::SYN_ACK, vec![]),
            PacketRecord::udp(2.0, (a, 5000), (b, 6881), b"d1:ad2:id20:e".to_vec()),
        ]
    }

    /// Builds a big-endian classic pcap by hand, independently of the writer.
    fn swapped_file(frames: &[(u32, u32, Vec<u8>)]) -> Vec<u8> {
        let mut f = Vec::new();
        f.extend(PCAP_MAGIC.to_be_bytes());
        f.extend(2u16.to_be_bytes());
        f.extend(4u16.to_be_bytes());
        f.extend(0i32.to_be_bytes());
        f.extend(0u32.to_be_bytes());
        f.extend(65535u32.to_be_bytes());
        f.extend(1u32.to_be_bytes());
        for (sec, usec, data) in frames {
            f.extend(sec.to_be_bytes());
            f.extend(usec.to_be_bytes());
            f.extend((data.len() as u32).to_be_bytes());
            f.extend((data.len() as u32).to_be_bytes());
            f.extend(data);
        }
        f
    }

    #[test]
    fn round_trips_records() {
        let pkts = sample();
        let mut buf = Vec::new();
        write_pcap(&mut buf, &pkts).unwrap();
        assert!(is_pcap_magic(&buf));
        let back = ingest_pcap(&buf[..]).unwrap();
        assert_eq!(back.packets, pkts);
        assert!(back.truncated.is_none());
    }

    #[test]
    fn reads_big_endian_magic() {
        let pkts = sample();
        let frames: Vec<_> = pkts
            .iter()
            .map(|p| {
                let us = (p.ts * 1e6).round() as u64;
                (
                    (us / 1_000_000) as u32,
                    (us % 1_000_000) as u32,
                    encode_frame(p).unwrap(),
                )
            })
            .collect();
        let file = swapped_file(&frames);
        // On little-endian hosts this is the byte-swapped magic.
        assert_eq!(u32::from_le_bytes(file[..4].try_into().unwrap()), PCAP_MAGIC_SWAPPED);
        assert!(is_pcap_magic(&file));
        assert_eq!(ingest_pcap(&file[..]).unwrap().packets, pkts);
    }

    #[test]
    fn skips_arp_and_ipv6() {
        let udp = encode_frame(&sample()[2]).unwrap();
        let mut arp = vec![0xff; 12];
        arp.extend([0x08, 0x06]);
        arp.extend([0u8; 28]);
        let mut v6 = vec![0x02; 12];
        v6.extend([0x86, 0xdd]);
        v6.extend([0x60, 0, 0, 0, 0, 0, 59, 64]);
        v6.extend([0u8; 32]);
        let file = swapped_file(&[(1, 0, arp), (2, 0, udp), (3, 0, v6)]);
        let got = ingest_pcap(&file[..]).unwrap();
        assert_eq!(got.packets.len(), 1);
        assert_eq!(got.packets[0].proto, Proto::Udp);
        assert_eq!(got.skipped_ipv6, 1);
        assert_eq!(got.frames, 3);
        assert_eq!(got.warnings().len(), 1);
    }

    #[test]
    fn bad_magic_rejected() {
        let err = ingest_pcap(&b"\x00\x01\x02\x03rest of a file that is not pcap"[..]).unwrap_err();
        assert!(matches!(err, CaptureError::UnsupportedFormat(_)));
        assert!(!is_pcap_magic(b"{\"ts\""));
    }

    #[test]
    fn truncated_record_keeps_prefix() {
        let mut buf = Vec::new();
        write_pcap(&mut buf, &sample()).unwrap();
        buf.truncate(buf.len() - 5);
        let got = ingest_pcap(&buf[..]).unwrap();
        assert_eq!(got.packets.len(), 2);
        assert!(got.truncated.is_some());
    }
}
