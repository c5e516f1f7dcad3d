//! Simplified SCTP endpoint: transferred-data control, error correction,
//! congestion control and path management, plus the reactions to every CLAA
//! SCTP consumes.
//!
//! The endpoint is sans-IO. Callers feed it application messages, inbound
//! packets, bus deliveries and timer expiries; it returns the packets to
//! transmit and exposes [`Endpoint::poll_timeout`] for the next deadline.

mod association;
pub mod packet;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{Bus, EventRecord};
use crate::registry::{ids, ClaaFlags, LayerId};
use crate::types::{NodeId, Time};

pub use association::{Association, PathState, PathStatus};
pub use packet::{Chunk, SackChunk, SctpPacket};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SctpConfig {
    pub rto_initial: f64,
    pub rto_min: f64,
    pub rto_max: f64,
    pub path_max_retrans: u32,
    pub hb_max_unacked: u32,
    pub hb_delay: f64,
    pub mtu: usize,
    pub initial_cwnd_mtus: usize,
    /// Minimum link quality of the next hop for a send to go ahead.
    pub send_quality_threshold: f64,
    pub rss_direct_threshold: f64,
    pub adaptation_factor: f64,
    pub loss_bad: f64,
    pub loss_good: f64,
    pub snr_bad: f64,
    pub snr_good: f64,
    pub ber_bad: f64,
    pub ber_good: f64,
    pub energy_low: f64,
    pub trace: bool,
}

impl Default for SctpConfig {
    fn default() -> Self {
        SctpConfig {
            rto_initial: 3.0,
            rto_min: 1.0,
            rto_max: 60.0,
            path_max_retrans: 5,
            hb_max_unacked: 5,
            hb_delay: 30.0,
            mtu: 1200,
            initial_cwnd_mtus: 4,
            send_quality_threshold: 0.3,
            rss_direct_threshold: 0.7,
            adaptation_factor: 2.0,
            loss_bad: 0.2,
            loss_good: 0.05,
            snr_bad: 10.0,
            snr_good: 15.0,
            ber_bad: 1e-4,
            ber_good: 1e-6,
            energy_low: 0.2,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutKind {
    Data,
    Retransmission,
    Sack,
    Heartbeat,
    HeartbeatAck,
}

/// A packet the endpoint wants transmitted to `dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub dst: NodeId,
    pub kind: OutKind,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SctpError {
    #[error("no active path to {0}")]
    NoActivePath(NodeId),
    #[error("no association with {0}")]
    NoAssociation(NodeId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SctpCounters {
    pub data_sent: u64,
    pub retransmissions: u64,
    pub fast_retransmissions: u64,
    pub timeouts: u64,
    pub spurious_retransmissions: u64,
    pub heartbeats_sent: u64,
    pub heartbeat_bytes: u64,
    pub heartbeats_suppressed: u64,
    pub heartbeat_ticks: u64,
    pub heartbeat_acks_received: u64,
    pub path_failovers: u64,
    pub node_unavailable_events: u64,
    pub deferred: u64,
    pub sacks_sent: u64,
    pub malformed_sacks: u64,
    pub checksum_verifications: u64,
    pub checksum_verifications_skipped: u64,
    pub checksum_drops: u64,
    pub decode_errors: u64,
    pub early_releases: u64,
    pub freeze_windows: u64,
    pub ecn_reductions: u64,
    pub messages_delivered: u64,
    pub bytes_delivered: u64,
    pub ignored_claa: u64,
}

impl AddAssign<&SctpCounters> for SctpCounters {
    fn add_assign(&mut self, o: &SctpCounters) {
        self.data_sent += o.data_sent;
        self.retransmissions += o.retransmissions;
        self.fast_retransmissions += o.fast_retransmissions;
        self.timeouts += o.timeouts;
        self.spurious_retransmissions += o.spurious_retransmissions;
        self.heartbeats_sent += o.heartbeats_sent;
        self.heartbeat_bytes += o.heartbeat_bytes;
        self.heartbeats_suppressed += o.heartbeats_suppressed;
        self.heartbeat_ticks += o.heartbeat_ticks;
        self.heartbeat_acks_received += o.heartbeat_acks_received;
        self.path_failovers += o.path_failovers;
        self.node_unavailable_events += o.node_unavailable_events;
        self.deferred += o.deferred;
        self.sacks_sent += o.sacks_sent;
        self.malformed_sacks += o.malformed_sacks;
        self.checksum_verifications += o.checksum_verifications;
        self.checksum_verifications_skipped += o.checksum_verifications_skipped;
        self.checksum_drops += o.checksum_drops;
        self.decode_errors += o.decode_errors;
        self.early_releases += o.early_releases;
        self.freeze_windows += o.freeze_windows;
        self.ecn_reductions += o.ecn_reductions;
        self.messages_delivered += o.messages_delivered;
        self.bytes_delivered += o.bytes_delivered;
        self.ignored_claa += o.ignored_claa;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Emit(OutKind),
    ErrorCount(u32),
    HbUnacked(u32),
    Freeze { until: Time },
    PathInactive,
    PathActive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SctpTraceRecord {
    pub time: Time,
    pub peer: NodeId,
    pub event: TraceEvent,
}

/// A message handed to the local application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivered {
    pub from: NodeId,
    pub stream: u16,
    pub payload: Vec<u8>,
}

/// All associations of one node.
pub struct Endpoint {
    node: NodeId,
    config: SctpConfig,
    flags: ClaaFlags,
    assocs: BTreeMap<NodeId, Association>,
    /// Frames the link layer certified error-free, announced through the
    /// common checksum event.
    link_verified: BTreeSet<u64>,
    delivered: Vec<Delivered>,
    ignored_claa: u64,
}

impl Endpoint {
    pub fn new(node: NodeId, config: SctpConfig, flags: ClaaFlags) -> Self {
        Endpoint {
            node,
            config,
            flags,
            assocs: BTreeMap::new(),
            link_verified: BTreeSet::new(),
            delivered: Vec::new(),
            ignored_claa: 0,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn config(&self) -> &SctpConfig {
        &self.config
    }

    /// Subscribes to every notified event SCTP is a destination of.
    pub fn subscribe(bus: &mut Bus) -> Result<(), crate::bus::BusError> {
        for id in SUBSCRIBED_EVENTS {
            if bus.matrix().contains(id) {
                bus.subscribe_mailbox(LayerId::Sctp, id)?;
            }
        }
        Ok(())
    }

    /// Opens an association towards `remote`, whose first address is the
    /// primary path. Re-opening an existing association is a no-op.
    pub fn associate(&mut self, remote: &[NodeId], now: Time) -> &mut Association {
        let key = remote[0];
        let (node, cfg, flags) = (self.node, &self.config, &self.flags);
        self.assocs
            .entry(key)
            .or_insert_with(|| Association::new(node, remote, cfg.clone(), flags.clone(), now))
    }

    pub fn association(&self, peer: NodeId) -> Option<&Association> {
        self.assoc_key(peer).and_then(|k| self.assocs.get(&k))
    }

    pub fn association_mut(&mut self, peer: NodeId) -> Option<&mut Association> {
        self.assoc_key(peer).and_then(|k| self.assocs.get_mut(&k))
    }

    pub fn associations(&self) -> impl Iterator<Item = &Association> {
        self.assocs.values()
    }

    fn assoc_key(&self, addr: NodeId) -> Option<NodeId> {
        if self.assocs.contains_key(&addr) {
            return Some(addr);
        }
        self.assocs
            .iter()
            .find(|(_, a)| a.has_address(addr))
            .map(|(k, _)| *k)
    }

    pub fn send(
        &mut self,
        bus: &mut Bus,
        peer: NodeId,
        stream: u16,
        payload: Vec<u8>,
        now: Time,
    ) -> Result<Vec<Outbound>, SctpError> {
        let assoc = self
            .association_mut(peer)
            .ok_or(SctpError::NoAssociation(peer))?;
        assoc.send_message(bus, stream, payload, now)
    }

    /// Handles a packet from `src`. `frame_id` identifies the carrying link
    /// frame so a preceding common checksum event can be matched to it.
    pub fn receive(
        &mut self,
        bus: &mut Bus,
        src: NodeId,
        bytes: &[u8],
        frame_id: Option<u64>,
        now: Time,
    ) -> Vec<Outbound> {
        let link_ok = frame_id.is_some_and(|id| self.link_verified.remove(&id));
        if self.assoc_key(src).is_none() {
            self.associate(&[src], now);
        }
        let key = self.assoc_key(src).expect("association just opened");
        let assoc = self.assocs.get_mut(&key).expect("key from lookup");
        let out = assoc.receive(bus, src, bytes, link_ok, now);
        self.delivered.extend(assoc.take_delivered());
        out
    }

    pub fn take_delivered(&mut self) -> Vec<Delivered> {
        std::mem::take(&mut self.delivered)
    }

    /// Dispatches a bus delivery to the associations it concerns.
    pub fn on_claa(&mut self, bus: &mut Bus, ev: &EventRecord, now: Time) -> Vec<Outbound> {
        let id = ev.claa_id.as_str();
        if !SUBSCRIBED_EVENTS.contains(&id) {
            self.ignored_claa += 1;
            return Vec::new();
        }
        if !self.flags.is_on(id) {
            return Vec::new();
        }
        if id == ids::COMMON_CHECKSUM {
            if let Some(frame) = ev.payload.field_f64("frame") {
                self.link_verified.insert(frame as u64);
            }
            return Vec::new();
        }
        let target = ev
            .payload
            .field_node("peer")
            .or_else(|| ev.payload.field_node("destination"))
            .or_else(|| ev.payload.field_node("dst"));
        let keys: Vec<NodeId> = match (id, target) {
            // a stalled local queue affects every destination
            (ids::JITTER | ids::RETRANSMISSION_AVOIDANCE | ids::SIGNIFICANT_ENERGY_DECREASE, _) => {
                self.assocs.keys().copied().collect()
            }
            (_, Some(t)) => self.assoc_key(t).into_iter().collect(),
            (_, None) => self.assocs.keys().copied().collect(),
        };
        let mut out = Vec::new();
        for k in keys {
            if let Some(a) = self.assocs.get_mut(&k) {
                out.extend(a.on_claa(bus, ev, now));
            }
        }
        out
    }

    pub fn poll_timeout(&self) -> Option<Time> {
        self.assocs
            .values()
            .filter_map(Association::poll_timeout)
            .min_by(f64::total_cmp)
    }

    pub fn handle_timeout(&mut self, bus: &mut Bus, now: Time) -> Vec<Outbound> {
        let mut out = Vec::new();
        for a in self.assocs.values_mut() {
            out.extend(a.handle_timeout(bus, now));
        }
        out
    }

    /// Peers towards which data is queued or in flight.
    pub fn pending_destinations(&self) -> BTreeSet<NodeId> {
        self.assocs
            .values()
            .filter(|a| a.has_pending())
            .flat_map(|a| a.addresses().to_vec())
            .collect()
    }

    pub fn counters(&self) -> SctpCounters {
        let mut c = SctpCounters {
            ignored_claa: self.ignored_claa,
            ..Default::default()
        };
        for a in self.assocs.values() {
            c += a.counters();
        }
        c
    }

    /// Times at which a peer was declared unreachable, in order.
    pub fn unavailability_detections(&self) -> Vec<(NodeId, Time)> {
        let mut v: Vec<_> = self
            .assocs
            .values()
            .flat_map(|a| {
                a.detections()
                    .iter()
                    .map(move |t| (a.primary_address(), *t))
            })
            .collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1));
        v
    }

    pub fn trace(&self) -> Vec<SctpTraceRecord> {
        let mut v: Vec<_> = self
            .assocs
            .values()
            .flat_map(|a| a.trace().iter().cloned())
            .collect();
        v.sort_by(|a, b| a.time.total_cmp(&b.time));
        v
    }
}

/// Notified events SCTP reacts to.
pub const SUBSCRIBED_EVENTS: [&str; 8] = [
    ids::JITTER,
    ids::RETRANSMISSION_AVOIDANCE,
    ids::ACKNOWLEDGEMENT,
    ids::EXPLICIT_CONGESTION,
    ids::SIGNIFICANT_ENERGY_DECREASE,
    ids::UNAVAILABLE_LINK,
    ids::COMMON_CHECKSUM,
    ids::EXPLICIT_LOST,
];
