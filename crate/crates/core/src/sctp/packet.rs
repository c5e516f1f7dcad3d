//! Reduced SCTP wire format: the 12-byte common header followed by exactly
//! one DATA, SACK, HEARTBEAT or HEARTBEAT-ACK chunk.

use thiserror::Error;

use crate::checksum::crc32c_update;
use crate::types::NodeId;

pub const COMMON_HEADER_LEN: usize = 12;
/// Offset of the checksum field inside the common header.
pub const CHECKSUM_OFFSET: usize = 8;

const CHUNK_DATA: u8 = 0;
const CHUNK_SACK: u8 = 3;
const CHUNK_HEARTBEAT: u8 = 4;
const CHUNK_HEARTBEAT_ACK: u8 = 5;

const DATA_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SackChunk {
    pub cumulative_tsn: u32,
    /// Inclusive TSN ranges received above `cumulative_tsn`.
    pub gap_reports: Vec<(u32, u32)>,
}

impl SackChunk {
    /// Gap ranges are disjoint, ascending and strictly above the cumulative
    /// TSN.
    pub fn is_well_formed(&self) -> bool {
        let mut floor = self.cumulative_tsn;
        for &(start, end) in &self.gap_reports {
            if start <= floor || end < start {
                return false;
            }
            floor = end;
        }
        true
    }

    pub fn acks(&self, tsn: u32) -> bool {
        tsn <= self.cumulative_tsn
            || self
                .gap_reports
                .iter()
                .any(|&(s, e)| (s..=e).contains(&tsn))
    }

    pub fn highest_reported(&self) -> u32 {
        self.gap_reports
            .last()
            .map(|&(_, e)| e)
            .unwrap_or(self.cumulative_tsn)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Chunk {
    Data {
        tsn: u32,
        stream: u16,
        ssn: u16,
        payload: Vec<u8>,
    },
    Sack(SackChunk),
    Heartbeat {
        address: NodeId,
        sent_time: f64,
    },
    HeartbeatAck {
        address: NodeId,
        sent_time: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SctpPacket {
    pub src_port: u16,
    pub dst_port: u16,
    pub vtag: u32,
    pub chunk: Chunk,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("packet truncated")]
    Truncated,
    #[error("unknown chunk type {0}")]
    UnknownChunk(u8),
    #[error("chunk length mismatch")]
    BadLength,
    #[error("transport checksum mismatch")]
    BadChecksum,
    #[error("malformed SACK")]
    BadSack,
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn get_u16(b: &[u8], at: usize) -> Result<u16, DecodeError> {
    b.get(at..at + 2)
        .map(|s| u16::from_be_bytes([s[0], s[1]]))
        .ok_or(DecodeError::Truncated)
}

fn get_u32(b: &[u8], at: usize) -> Result<u32, DecodeError> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or(DecodeError::Truncated)
}

fn get_u64(b: &[u8], at: usize) -> Result<u64, DecodeError> {
    b.get(at..at + 8)
        .map(|s| u64::from_be_bytes(s.try_into().unwrap()))
        .ok_or(DecodeError::Truncated)
}

/// Checksum over a packet with its checksum field treated as zero.
pub fn packet_checksum(bytes: &[u8]) -> u32 {
    let reg = crc32c_update(!0, &bytes[..CHECKSUM_OFFSET]);
    let reg = crc32c_update(reg, &[0; 4]);
    !crc32c_update(reg, &bytes[CHECKSUM_OFFSET + 4..])
}

pub fn verify_checksum(bytes: &[u8]) -> bool {
    if bytes.len() < COMMON_HEADER_LEN {
        return false;
    }
    let stored = u32::from_le_bytes(
        bytes[CHECKSUM_OFFSET..CHECKSUM_OFFSET + 4]
            .try_into()
            .unwrap(),
    );
    packet_checksum(bytes) == stored
}

impl SctpPacket {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        put_u16(&mut out, self.src_port);
        put_u16(&mut out, self.dst_port);
        put_u32(&mut out, self.vtag);
        put_u32(&mut out, 0);
        match &self.chunk {
            Chunk::Data {
                tsn,
                stream,
                ssn,
                payload,
            } => {
                out.push(CHUNK_DATA);
                out.push(0x03);
                put_u16(&mut out, (DATA_HEADER_LEN + payload.len()) as u16);
                put_u32(&mut out, *tsn);
                put_u16(&mut out, *stream);
                put_u16(&mut out, *ssn);
                put_u32(&mut out, 0);
                out.extend_from_slice(payload);
            }
            Chunk::Sack(sack) => {
                out.push(CHUNK_SACK);
                out.push(0);
                put_u16(&mut out, (16 + 4 * sack.gap_reports.len()) as u16);
                put_u32(&mut out, sack.cumulative_tsn);
                put_u32(&mut out, 65_536);
                put_u16(&mut out, sack.gap_reports.len() as u16);
                put_u16(&mut out, 0);
                for &(s, e) in &sack.gap_reports {
                    put_u16(&mut out, (s - sack.cumulative_tsn) as u16);
                    put_u16(&mut out, (e - sack.cumulative_tsn) as u16);
                }
            }
            Chunk::Heartbeat { address, sent_time }
            | Chunk::HeartbeatAck { address, sent_time } => {
                let kind = if matches!(self.chunk, Chunk::Heartbeat { .. }) {
                    CHUNK_HEARTBEAT
                } else {
                    CHUNK_HEARTBEAT_ACK
                };
                out.push(kind);
                out.push(0);
                put_u16(&mut out, 4 + 4 + 12);
                // heartbeat info parameter
                put_u16(&mut out, 1);
                put_u16(&mut out, 4 + 12);
                put_u32(&mut out, address.0);
                out.extend_from_slice(&sent_time.to_bits().to_be_bytes());
            }
        }
        let sum = packet_checksum(&out);
        out[CHECKSUM_OFFSET..CHECKSUM_OFFSET + 4].copy_from_slice(&sum.to_le_bytes());
        out
    }

    /// Parses a packet, optionally verifying the transport checksum.
    pub fn decode(bytes: &[u8], verify: bool) -> Result<Self, DecodeError> {
        if bytes.len() < COMMON_HEADER_LEN + 4 {
            return Err(DecodeError::Truncated);
        }
        if verify && !verify_checksum(bytes) {
            return Err(DecodeError::BadChecksum);
        }
        let src_port = get_u16(bytes, 0)?;
        let dst_port = get_u16(bytes, 2)?;
        let vtag = get_u32(bytes, 4)?;
        let c = COMMON_HEADER_LEN;
        let kind = bytes[c];
        let len = get_u16(bytes, c + 2)? as usize;
        if c + len != bytes.len() {
            return Err(DecodeError::BadLength);
        }
        let chunk = match kind {
            CHUNK_DATA => {
                if len < DATA_HEADER_LEN {
                    return Err(DecodeError::BadLength);
                }
                Chunk::Data {
                    tsn: get_u32(bytes, c + 4)?,
                    stream: get_u16(bytes, c + 8)?,
                    ssn: get_u16(bytes, c + 10)?,
                    payload: bytes[c + DATA_HEADER_LEN..].to_vec(),
                }
            }
            CHUNK_SACK => {
                let cum = get_u32(bytes, c + 4)?;
                let n = get_u16(bytes, c + 12)? as usize;
                if len != 16 + 4 * n {
                    return Err(DecodeError::BadLength);
                }
                let gap_reports = (0..n)
                    .map(|i| {
                        let at = c + 16 + 4 * i;
                        Ok((
                            cum + get_u16(bytes, at)? as u32,
                            cum + get_u16(bytes, at + 2)? as u32,
                        ))
                    })
                    .collect::<Result<Vec<_>, DecodeError>>()?;
                let sack = SackChunk {
                    cumulative_tsn: cum,
                    gap_reports,
                };
                if !sack.is_well_formed() {
                    return Err(DecodeError::BadSack);
                }
                Chunk::Sack(sack)
            }
            CHUNK_HEARTBEAT | CHUNK_HEARTBEAT_ACK => {
                if len != 20 {
                    return Err(DecodeError::BadLength);
                }
                let address = NodeId(get_u32(bytes, c + 8)?);
                let sent_time = f64::from_bits(get_u64(bytes, c + 12)?);
                if kind == CHUNK_HEARTBEAT {
                    Chunk::Heartbeat { address, sent_time }
                } else {
                    Chunk::HeartbeatAck { address, sent_time }
                }
            }
            other => return Err(DecodeError::UnknownChunk(other)),
        };
        Ok(SctpPacket {
            src_port,
            dst_port,
            vtag,
            chunk,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pkt(chunk: Chunk) -> SctpPacket {
        SctpPacket {
            src_port: 5000,
            dst_port: 5001,
            vtag: 0xDEAD_BEEF,
            chunk,
        }
    }

    #[test]
    fn sack_well_formed() {
        let ok = SackChunk {
            cumulative_tsn: 4,
            gap_reports: vec![(6, 7), (9, 9)],
        };
        assert!(ok.is_well_formed());
        assert!(ok.acks(3) && ok.acks(7) && !ok.acks(5) && !ok.acks(8));
        assert_eq!(ok.highest_reported(), 9);
        let overlapping = SackChunk {
            cumulative_tsn: 4,
            gap_reports: vec![(6, 8), (8, 9)],
        };
        assert!(!overlapping.is_well_formed());
        let below = SackChunk {
            cumulative_tsn: 4,
            gap_reports: vec![(4, 5)],
        };
        assert!(!below.is_well_formed());
    }

    #[test]
    fn corrupted_packet_fails_checksum() {
        let mut bytes = pkt(Chunk::Data {
            tsn: 1,
            stream: 0,
            ssn: 0,
            payload: vec![1, 2, 3],
        })
        .encode();
        assert!(verify_checksum(&bytes));
        bytes[20] ^= 0x80;
        assert_eq!(
            SctpPacket::decode(&bytes, true),
            Err(DecodeError::BadChecksum)
        );
        assert!(SctpPacket::decode(&bytes, false).is_ok());
    }

    #[test]
    fn heartbeat_round_trip() {
        let p = pkt(Chunk::HeartbeatAck {
            address: NodeId(7),
            sent_time: 12.5,
        });
        assert_eq!(SctpPacket::decode(&p.encode(), true).unwrap(), p);
    }

    fn arb_chunk() -> impl Strategy<Value = Chunk> {
        prop_oneof![
            (
                any::<u32>(),
                any::<u16>(),
                any::<u16>(),
                proptest::collection::vec(any::<u8>(), 0..300)
            )
                .prop_map(|(tsn, stream, ssn, payload)| Chunk::Data {
                    tsn,
                    stream,
                    ssn,
                    payload
                }),
            (
                0u32..1_000_000,
                proptest::collection::vec((1u32..50, 0u32..10), 0..6)
            )
                .prop_map(|(cum, steps)| {
                    let mut gaps = Vec::new();
                    let mut floor = cum;
                    for (skip, width) in steps {
                        let s = floor + skip + 1;
                        gaps.push((s, s + width));
                        floor = s + width;
                    }
                    Chunk::Sack(SackChunk {
                        cumulative_tsn: cum,
                        gap_reports: gaps,
                    })
                }),
            (any::<u32>(), 0.0f64..1e6).prop_map(|(a, t)| Chunk::Heartbeat {
                address: NodeId(a),
                sent_time: t
            }),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(chunk in arb_chunk()) {
            let p = pkt(chunk);
            let bytes = p.encode();
            prop_assert!(verify_checksum(&bytes));
            prop_assert_eq!(SctpPacket::decode(&bytes, true).unwrap(), p);
        }
    }
}
