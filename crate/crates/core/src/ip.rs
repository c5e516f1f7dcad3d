//! Pass-through IP encapsulation: node addressing, a hop limit and the
//! congestion-experienced mark set by forwarding nodes.

use thiserror::Error;

use crate::types::NodeId;

pub const HEADER_LEN: usize = 12;
pub const BROADCAST: NodeId = NodeId(u32::MAX);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proto {
    Sctp = 132,
    Olsr = 138,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub src: NodeId,
    pub dst: NodeId,
    pub ttl: u8,
    pub proto: Proto,
    pub ce: bool,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IpError {
    #[error("datagram shorter than its header")]
    Truncated,
    #[error("unknown protocol {0}")]
    UnknownProto(u8),
}

impl Datagram {
    pub fn new(src: NodeId, dst: NodeId, proto: Proto, payload: Vec<u8>) -> Self {
        let ttl = if dst == BROADCAST { 1 } else { 64 };
        Datagram {
            src,
            dst,
            ttl,
            proto,
            ce: false,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut o = Vec::with_capacity(HEADER_LEN + self.payload.len());
        o.push(self.ttl);
        o.push(self.proto as u8);
        o.push(self.ce as u8);
        o.push(0);
        o.extend_from_slice(&self.src.0.to_be_bytes());
        o.extend_from_slice(&self.dst.0.to_be_bytes());
        o.extend_from_slice(&self.payload);
        o
    }

    pub fn decode(b: &[u8]) -> Result<Self, IpError> {
        if b.len() < HEADER_LEN {
            return Err(IpError::Truncated);
        }
        let proto = match b[1] {
            132 => Proto::Sctp,
            138 => Proto::Olsr,
            p => return Err(IpError::UnknownProto(p)),
        };
        Ok(Datagram {
            ttl: b[0],
            proto,
            ce: b[2] & 1 == 1,
            src: NodeId(u32::from_be_bytes(b[4..8].try_into().unwrap())),
            dst: NodeId(u32::from_be_bytes(b[8..12].try_into().unwrap())),
            payload: b[HEADER_LEN..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct IpCounters {
    pub forwarded: u64,
    pub no_route_drops: u64,
    pub ttl_drops: u64,
    pub ecn_notices: u64,
    pub malformed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut d = Datagram::new(NodeId(1), NodeId(3), Proto::Sctp, vec![1, 2, 3]);
        d.ce = true;
        assert_eq!(Datagram::decode(&d.encode()).unwrap(), d);
        assert_eq!(
            Datagram::new(NodeId(1), BROADCAST, Proto::Olsr, vec![]).ttl,
            1
        );
        assert_eq!(Datagram::decode(&[0; 4]), Err(IpError::Truncated));
    }
}
