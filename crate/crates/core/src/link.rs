//! Abstract 802.11-style link and physical layers: a transmit queue, a
//! per-link channel model (SNR → BER, erasures), link CRC, SIFS-style
//! acknowledgements with optional ARQ, FEC, an energy budget and the
//! physical/link CLAA sources.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{Bus, BusError, EventRecord, Value};
use crate::checksum::crc32c;
use crate::registry::{ids, LayerId};
use crate::types::{quantize, NodeId, Time};

pub const LINK_HEADER_LEN: usize = 8;
pub const CRC_LEN: usize = 4;
const BROADCAST_ADDR: u32 = u32::MAX;
const NJ_PER_J: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub bitrate: f64,
    pub sifs: f64,
    /// Extra wait past the expected acknowledgement before a unicast frame
    /// counts as lost.
    pub ack_timeout: f64,
    pub queue_capacity: usize,
    pub jitter_threshold: f64,
    pub ecn_threshold: usize,
    pub ecn_notice_delay: f64,
    pub arq_max_retries: u32,
    pub fec_exponent: i32,
    pub fec_overhead: f64,
    pub ber_max: f64,
    pub snr_mid: f64,
    pub energy_budget: f64,
    pub tx_cost_per_byte: f64,
    pub rx_cost_per_byte: f64,
    pub energy_thresholds: Vec<f64>,
    pub export_interval: f64,
    pub loss_window: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            bitrate: 2e6,
            sifs: 10e-6,
            ack_timeout: 50e-6,
            queue_capacity: 64,
            jitter_threshold: 0.05,
            ecn_threshold: 16,
            ecn_notice_delay: 1e-3,
            arq_max_retries: 3,
            fec_exponent: 2,
            fec_overhead: 0.125,
            ber_max: 0.5,
            snr_mid: 5.0,
            energy_budget: 100.0,
            tx_cost_per_byte: 1e-6,
            rx_cost_per_byte: 5e-7,
            energy_thresholds: vec![0.5, 0.25, 0.1],
            export_interval: 1.0,
            loss_window: 10,
        }
    }
}

/// Radio conditions of one (bidirectional) link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelState {
    pub snr_db: f64,
    /// Normalized received signal strength.
    pub rss: f64,
    /// Probability that a frame is erased outright.
    pub loss_prob: f64,
    /// Fixed bit error rate replacing the SNR curve.
    pub ber: Option<f64>,
    pub delay: f64,
    pub up: bool,
}

impl Default for ChannelState {
    fn default() -> Self {
        ChannelState {
            snr_db: 30.0,
            rss: 0.9,
            loss_prob: 0.0,
            ber: None,
            delay: 1e-4,
            up: true,
        }
    }
}

/// Logistic BER curve scaled to `[0, ber_max]`; nonincreasing in `snr`.
pub fn ber_from_snr(snr_db: f64, ber_max: f64, snr_mid: f64) -> f64 {
    ber_max / (1.0 + (snr_db - snr_mid).exp())
}

pub fn fec_ber(ber: f64, exponent: i32) -> f64 {
    ber.powi(exponent)
}

pub fn frame_error_probability(ber: f64, bits: usize) -> f64 {
    1.0 - (1.0 - ber).powi(bits as i32)
}

impl ChannelState {
    pub fn raw_ber(&self, cfg: &LinkConfig) -> f64 {
        self.ber
            .unwrap_or_else(|| ber_from_snr(self.snr_db, cfg.ber_max, cfg.snr_mid))
            .clamp(0.0, 1.0)
    }

    pub fn effective_ber(&self, cfg: &LinkConfig, fec: bool) -> f64 {
        let b = self.raw_ber(cfg);
        if fec {
            fec_ber(b, cfg.fec_exponent)
        } else {
            b
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delivery {
    Lost,
    Corrupted(Vec<u8>),
    Clean,
}

/// Draws the fate of one frame: erasure, then bit errors at `ber`. A
/// corrupted copy has one or two flipped bits.
pub fn realize(rng: &mut ChaCha8Rng, bytes: &[u8], ber: f64, loss_prob: f64) -> Delivery {
    let erase: f64 = rng.random();
    let err: f64 = rng.random();
    if erase < loss_prob {
        return Delivery::Lost;
    }
    if err < frame_error_probability(ber, bytes.len() * 8) {
        let mut c = bytes.to_vec();
        let flips = rng.random_range(1..=2usize);
        let bits = c.len() * 8;
        let first = rng.random_range(0..bits);
        c[first / 8] ^= 1 << (first % 8);
        if flips == 2 {
            let mut second = rng.random_range(0..bits);
            if second == first {
                second = (first + 1) % bits;
            }
            c[second / 8] ^= 1 << (second % 8);
        }
        return Delivery::Corrupted(c);
    }
    Delivery::Clean
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub src: NodeId,
    pub dst: Option<NodeId>,
    pub datagram: Vec<u8>,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated")]
    Truncated,
    #[error("link CRC mismatch")]
    BadCrc,
}

impl Frame {
    pub fn needs_ack(&self) -> bool {
        self.dst.is_some()
    }

    /// `[src | dst | datagram | crc32c LE]`; the CRC covers everything
    /// before it, including the embedded transport checksum.
    pub fn encode(&self) -> Vec<u8> {
        let mut o = Vec::with_capacity(LINK_HEADER_LEN + self.datagram.len() + CRC_LEN);
        o.extend_from_slice(&self.src.0.to_be_bytes());
        o.extend_from_slice(&self.dst.map_or(BROADCAST_ADDR, |d| d.0).to_be_bytes());
        o.extend_from_slice(&self.datagram);
        let crc = crc32c(&o);
        o.extend_from_slice(&crc.to_le_bytes());
        o
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, FrameError> {
        if bytes.len() < LINK_HEADER_LEN + CRC_LEN {
            return Err(FrameError::Truncated);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - CRC_LEN);
        if crc32c(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(FrameError::BadCrc);
        }
        let dst = u32::from_be_bytes(body[4..8].try_into().unwrap());
        Ok(Frame {
            src: NodeId(u32::from_be_bytes(body[0..4].try_into().unwrap())),
            dst: (dst != BROADCAST_ADDR).then_some(NodeId(dst)),
            datagram: body[LINK_HEADER_LEN..].to_vec(),
        })
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("energy exhausted")]
pub struct ZeroEnergy;

/// Energy budget kept in integer nanojoules so accounting is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Energy {
    initial_nj: u64,
    remaining_nj: u64,
    spent_tx_nj: u64,
    spent_rx_nj: u64,
    thresholds: Vec<f64>,
    crossed: BTreeSet<usize>,
}

impl Energy {
    pub fn new(budget_j: f64, thresholds: &[f64]) -> Self {
        let nj = (budget_j * NJ_PER_J).round() as u64;
        let mut t = thresholds.to_vec();
        t.sort_by(|a, b| b.total_cmp(a));
        Energy {
            initial_nj: nj,
            remaining_nj: nj,
            spent_tx_nj: 0,
            spent_rx_nj: 0,
            thresholds: t,
            crossed: BTreeSet::new(),
        }
    }

    pub fn level(&self) -> f64 {
        if self.initial_nj == 0 {
            0.0
        } else {
            self.remaining_nj as f64 / self.initial_nj as f64
        }
    }

    pub fn remaining_j(&self) -> f64 {
        self.remaining_nj as f64 / NJ_PER_J
    }

    pub fn consumed_j(&self) -> f64 {
        (self.initial_nj - self.remaining_nj) as f64 / NJ_PER_J
    }

    pub fn is_depleted(&self) -> bool {
        self.remaining_nj == 0
    }

    /// Spends `nj`; returns the thresholds crossed by this debit.
    pub fn debit(&mut self, nj: u64, tx: bool) -> Result<Vec<f64>, ZeroEnergy> {
        if nj > self.remaining_nj {
            return Err(ZeroEnergy);
        }
        self.remaining_nj -= nj;
        if tx {
            self.spent_tx_nj += nj;
        } else {
            self.spent_rx_nj += nj;
        }
        let level = self.level();
        let mut crossed = Vec::new();
        for (i, &t) in self.thresholds.iter().enumerate() {
            if level < t && self.crossed.insert(i) {
                crossed.push(t);
            }
        }
        Ok(crossed)
    }

    pub fn accounted(&self) -> bool {
        self.initial_nj == self.remaining_nj + self.spent_tx_nj + self.spent_rx_nj
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueuedFrame {
    pub id: u64,
    pub dst: Option<NodeId>,
    pub bytes: Vec<u8>,
    pub retries: u32,
    pub enqueued: Time,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LinkCounters {
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub frames_received: u64,
    pub frames_lost: u64,
    pub link_retx: u64,
    pub arq_failures: u64,
    pub acks_received: u64,
    pub crc_drops: u64,
    pub queue_drops: u64,
    pub zero_energy_drops: u64,
    pub jitter_events: u64,
    pub retransmission_avoidance_events: u64,
    pub ecn_marks: u64,
    pub energy_decrease_events: u64,
    pub common_checksum_events: u64,
}

type PeerSet = Rc<RefCell<BTreeSet<NodeId>>>;

pub struct LinkLayer {
    node: NodeId,
    cfg: LinkConfig,
    rng: ChaCha8Rng,
    queue: VecDeque<QueuedFrame>,
    in_tx: Option<QueuedFrame>,
    tx_free_at: Time,
    hold_until: Time,
    jitter_quiet_until: Time,
    saturation_quiet_until: Time,
    awaiting_ack: BTreeMap<u64, QueuedFrame>,
    fec: PeerSet,
    arq: PeerSet,
    neighbors: PeerSet,
    outcomes: BTreeMap<NodeId, VecDeque<bool>>,
    energy: Energy,
    counters: LinkCounters,
}

impl LinkLayer {
    pub fn new(node: NodeId, cfg: LinkConfig, seed: u64, neighbors: BTreeSet<NodeId>) -> Self {
        LinkLayer {
            node,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: VecDeque::new(),
            in_tx: None,
            tx_free_at: 0.0,
            hold_until: f64::NEG_INFINITY,
            jitter_quiet_until: f64::NEG_INFINITY,
            saturation_quiet_until: f64::NEG_INFINITY,
            awaiting_ack: BTreeMap::new(),
            fec: Rc::default(),
            arq: Rc::default(),
            neighbors: Rc::new(RefCell::new(neighbors)),
            outcomes: BTreeMap::new(),
            energy: Energy::new(cfg.energy_budget, &cfg.energy_thresholds),
            counters: LinkCounters::default(),
            cfg,
        }
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn counters(&self) -> &LinkCounters {
        &self.counters
    }

    pub fn counters_mut(&mut self) -> &mut LinkCounters {
        &mut self.counters
    }

    pub fn energy(&self) -> &Energy {
        &self.energy
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_busy(&self) -> bool {
        self.in_tx.is_some()
    }

    pub fn fec_on(&self, peer: NodeId) -> bool {
        self.fec.borrow().contains(&peer)
    }

    pub fn arq_on(&self, peer: NodeId) -> bool {
        self.arq.borrow().contains(&peer)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Registers the FEC and ARQ activable services on the bus.
    pub fn register_services(&self, bus: &mut Bus) -> Result<(), BusError> {
        for (id, set) in [(ids::FEC, &self.fec), (ids::ARQ, &self.arq)] {
            if !bus.matrix().contains(id) {
                continue;
            }
            let set = Rc::clone(set);
            let neighbors = Rc::clone(&self.neighbors);
            bus.register_provider(
                LayerId::Link,
                id,
                "{peer: node, enable: bool}",
                Box::new(move |p: &Value| {
                    let peer = p.field_node("peer").ok_or("missing peer")?;
                    if !neighbors.borrow().contains(&peer) {
                        return Err(format!("no such link: {peer}"));
                    }
                    if p.field_bool("enable").unwrap_or(true) {
                        set.borrow_mut().insert(peer);
                        Ok(Value::Bool(true))
                    } else {
                        set.borrow_mut().remove(&peer);
                        Ok(Value::Bool(false))
                    }
                }),
            )?;
        }
        Ok(())
    }

    pub fn subscribe(bus: &mut Bus) -> Result<(), BusError> {
        if bus.matrix().contains(ids::ACKNOWLEDGEMENT) {
            bus.subscribe_mailbox(LayerId::Link, ids::ACKNOWLEDGEMENT)?;
        }
        Ok(())
    }

    /// Stalls the transmitter for `duration`. A stall longer than the
    /// jitter threshold is announced right away.
    pub fn inject_jitter(&mut self, bus: &mut Bus, now: Time, duration: f64) {
        self.hold_until = self.hold_until.max(now + duration);
        let wait = (self.tx_free_at.max(self.hold_until) - now).max(0.0);
        if wait > self.cfg.jitter_threshold {
            self.announce_jitter(bus, wait, now);
        }
    }

    fn announce_jitter(&mut self, bus: &mut Bus, wait: f64, now: Time) {
        self.jitter_quiet_until = now + wait;
        self.counters.jitter_events += 1;
        let payload = Value::record([("duration", Value::Number(wait))]);
        let _ = bus.publish_event(LayerId::Link, ids::JITTER, payload, now);
    }

    fn serialization(&self, bytes: usize, dst: Option<NodeId>) -> f64 {
        let fec = dst.is_some_and(|d| self.fec_on(d));
        let factor = if fec {
            1.0 + self.cfg.fec_overhead
        } else {
            1.0
        };
        bytes as f64 * 8.0 / self.cfg.bitrate * factor
    }

    /// Queues a frame. Publishes the jitter event when the expected wait
    /// exceeds the threshold and the saturation event when the queue is
    /// full (the frame is then dropped). Returns whether it was accepted.
    pub fn enqueue(&mut self, bus: &mut Bus, frame: QueuedFrame, now: Time) -> bool {
        if self.queue.len() >= self.cfg.queue_capacity {
            self.counters.queue_drops += 1;
            if now >= self.saturation_quiet_until {
                let drain: f64 = self
                    .queue
                    .iter()
                    .map(|f| self.serialization(f.bytes.len(), f.dst))
                    .sum();
                let wait = (self.tx_free_at.max(self.hold_until) - now).max(0.0) + drain;
                self.saturation_quiet_until = now + wait;
                self.counters.retransmission_avoidance_events += 1;
                let payload = Value::record([("duration", Value::Number(wait))]);
                let _ =
                    bus.publish_event(LayerId::Link, ids::RETRANSMISSION_AVOIDANCE, payload, now);
            }
            return false;
        }
        let wait = (self.tx_free_at.max(self.hold_until) - now).max(0.0);
        if wait > self.cfg.jitter_threshold && now >= self.jitter_quiet_until {
            self.announce_jitter(bus, wait, now);
        }
        self.queue.push_back(frame);
        true
    }

    /// Starts transmitting the head of the queue if idle. Returns the time
    /// the transmission completes.
    pub fn try_start(&mut self, bus: &mut Bus, now: Time) -> Option<Time> {
        if self.in_tx.is_some() {
            return None;
        }
        while let Some(f) = self.queue.pop_front() {
            let cost = (f.bytes.len() as f64 * self.cfg.tx_cost_per_byte * NJ_PER_J).round() as u64;
            match self.energy.debit(cost, true) {
                Ok(crossed) => self.announce_energy(bus, crossed, now),
                Err(ZeroEnergy) => {
                    self.counters.zero_energy_drops += 1;
                    continue;
                }
            }
            let start = now.max(self.hold_until);
            let end = quantize(start + self.serialization(f.bytes.len(), f.dst));
            self.tx_free_at = end;
            self.in_tx = Some(f);
            return Some(end);
        }
        None
    }

    /// Completes the current transmission and returns the frame sent.
    pub fn finish_tx(&mut self) -> Option<QueuedFrame> {
        let f = self.in_tx.take()?;
        self.counters.frames_sent += 1;
        self.counters.bytes_sent += f.bytes.len() as u64;
        if f.dst.is_some() {
            self.awaiting_ack.insert(f.id, f.clone());
        }
        Some(f)
    }

    fn announce_energy(&mut self, bus: &mut Bus, crossed: Vec<f64>, now: Time) {
        for t in crossed {
            self.counters.energy_decrease_events += 1;
            let payload = Value::record([
                ("threshold", Value::Number(t)),
                ("level", Value::Number(self.energy.level())),
            ]);
            let _ = bus.publish_event(
                LayerId::Physical,
                ids::SIGNIFICANT_ENERGY_DECREASE,
                payload,
                now,
            );
        }
    }

    /// Receives raw frame bytes: debits reception energy and checks the
    /// link CRC. Frames for other unicast destinations are discarded.
    pub fn receive(&mut self, bus: &mut Bus, bytes: &[u8], now: Time) -> Option<Frame> {
        let cost = (bytes.len() as f64 * self.cfg.rx_cost_per_byte * NJ_PER_J).round() as u64;
        match self.energy.debit(cost, false) {
            Ok(crossed) => self.announce_energy(bus, crossed, now),
            Err(ZeroEnergy) => {
                self.counters.zero_energy_drops += 1;
                return None;
            }
        }
        match Frame::decode(bytes) {
            Ok(f) if f.dst.is_none() || f.dst == Some(self.node) => {
                self.counters.frames_received += 1;
                Some(f)
            }
            Ok(_) => None,
            Err(_) => {
                self.counters.crc_drops += 1;
                None
            }
        }
    }

    /// Announces that an inbound transport segment passed the link CRC.
    pub fn notify_checked(&mut self, bus: &mut Bus, frame_id: u64, now: Time) {
        self.counters.common_checksum_events += 1;
        let payload = Value::record([("frame", Value::Number(frame_id as f64))]);
        let _ = bus.publish_event(LayerId::Link, ids::COMMON_CHECKSUM, payload, now);
    }

    fn record_outcome(&mut self, peer: NodeId, ok: bool) {
        let w = self.outcomes.entry(peer).or_default();
        w.push_back(ok);
        while w.len() > self.cfg.loss_window {
            w.pop_front();
        }
    }

    pub fn loss_ratio(&self, peer: NodeId) -> Option<f64> {
        let w = self.outcomes.get(&peer).filter(|w| !w.is_empty())?;
        Some(w.iter().filter(|ok| !**ok).count() as f64 / w.len() as f64)
    }

    /// Link acknowledgement for `frame_id` reached this (sending) node:
    /// the physical layer emits the first stage of the acknowledgement
    /// chain.
    pub fn on_ack(&mut self, bus: &mut Bus, frame_id: u64, now: Time) {
        let Some(f) = self.awaiting_ack.remove(&frame_id) else {
            return;
        };
        let dst = f.dst.expect("unicast frames only await acks");
        self.counters.acks_received += 1;
        self.record_outcome(dst, true);
        let payload = Value::record([
            ("dst", Value::Node(dst)),
            ("frame", Value::Number(frame_id as f64)),
        ]);
        let _ = bus.publish_event(LayerId::Physical, ids::ACKNOWLEDGEMENT, payload, now);
    }

    /// No acknowledgement arrived in time. With ARQ towards the peer the
    /// frame goes back to the head of the queue; returns true in that case.
    pub fn on_ack_timeout(&mut self, frame_id: u64) -> bool {
        let Some(mut f) = self.awaiting_ack.remove(&frame_id) else {
            return false;
        };
        let dst = f.dst.expect("unicast");
        self.record_outcome(dst, false);
        if self.arq_on(dst) && f.retries < self.cfg.arq_max_retries {
            f.retries += 1;
            self.counters.link_retx += 1;
            self.queue.push_front(f);
            true
        } else {
            if self.arq_on(dst) {
                self.counters.arq_failures += 1;
            }
            self.counters.frames_lost += 1;
            false
        }
    }

    pub fn on_claa(&mut self, bus: &mut Bus, ev: &EventRecord, now: Time) {
        if ev.claa_id == ids::ACKNOWLEDGEMENT && ev.stage == Some(1) {
            let _ = bus.publish_event(LayerId::Link, ids::ACKNOWLEDGEMENT, ev.payload.clone(), now);
        }
    }

    /// Periodic physical and link exports for each neighbour.
    pub fn export(&self, bus: &mut Bus, channels: &[(NodeId, ChannelState)], now: Time) {
        for (peer, ch) in channels {
            let ber = ch.effective_ber(&self.cfg, self.fec_on(*peer));
            let snr = if ch.up { ch.snr_db } else { f64::NEG_INFINITY };
            let rss = if ch.up { ch.rss } else { 0.0 };
            let _ = bus.export_peer_state(
                LayerId::Physical,
                ids::SNR,
                *peer,
                Value::Number(snr),
                None,
                now,
            );
            let _ = bus.export_peer_state(
                LayerId::Physical,
                ids::RSS,
                *peer,
                Value::Number(rss),
                None,
                now,
            );
            let _ = bus.export_peer_state(
                LayerId::Physical,
                ids::BER,
                *peer,
                Value::Number(ber),
                None,
                now,
            );
            if let Some(r) = self.loss_ratio(*peer) {
                let _ = bus.export_peer_state(
                    LayerId::Link,
                    ids::PACKET_LOSS_RATIO,
                    *peer,
                    Value::Number(r),
                    None,
                    now,
                );
            }
        }
        let _ = bus.export_state(
            LayerId::Physical,
            ids::ENERGY_LEVEL,
            Value::Number(self.energy.level()),
            None,
            now,
        );
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::bus::StateRead;
    use crate::registry::load_builtin_matrix;

    const A: NodeId = NodeId(1);
    const B: NodeId = NodeId(2);

    fn bus(n: NodeId) -> Bus {
        Bus::new(n, Arc::new(load_builtin_matrix()))
    }

    fn frame(id: u64, dst: Option<NodeId>, len: usize) -> QueuedFrame {
        let f = Frame {
            src: A,
            dst,
            datagram: vec![0xAB; len],
        };
        QueuedFrame {
            id,
            dst,
            bytes: f.encode(),
            retries: 0,
            enqueued: 0.0,
        }
    }

    #[test]
    fn ber_curve_monotone_and_fec_never_worse() {
        let cfg = LinkConfig::default();
        let mut prev = f64::INFINITY;
        for snr in -10..40 {
            let b = ber_from_snr(snr as f64, cfg.ber_max, cfg.snr_mid);
            assert!(b <= prev && (0.0..=cfg.ber_max).contains(&b));
            assert!(fec_ber(b, 2) <= b);
            prev = b;
        }
        assert!((fec_ber(1e-3, 2) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn extreme_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bytes = vec![0u8; 100];
        for _ in 0..100 {
            assert_eq!(realize(&mut rng, &bytes, 0.0, 0.0), Delivery::Clean);
            assert!(matches!(
                realize(&mut rng, &bytes, 1.0, 0.0),
                Delivery::Corrupted(_)
            ));
            assert_eq!(realize(&mut rng, &bytes, 0.0, 1.0), Delivery::Lost);
        }
    }

    #[test]
    fn frame_crc_gate() {
        let f = Frame {
            src: A,
            dst: Some(B),
            datagram: vec![1, 2, 3, 4],
        };
        let mut bytes = f.encode();
        assert_eq!(Frame::decode(&bytes), Ok(f));
        bytes[9] ^= 0x10;
        assert_eq!(Frame::decode(&bytes), Err(FrameError::BadCrc));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean = Frame {
            src: A,
            dst: None,
            datagram: vec![7; 120],
        }
        .encode();
        for _ in 0..1000 {
            if let Delivery::Corrupted(c) = realize(&mut rng, &clean, 1.0, 0.0) {
                assert_eq!(Frame::decode(&c), Err(FrameError::BadCrc));
            }
        }
    }

    #[test]
    fn energy_single_crossing_and_conservation() {
        let mut e = Energy::new(1.0, &[0.5, 0.25]);
        assert_eq!(e.debit(490_000_000, true).unwrap(), Vec::<f64>::new());
        assert!((e.level() - 0.51).abs() < 1e-12);
        assert_eq!(e.debit(20_000_000, false).unwrap(), vec![0.5]);
        assert_eq!(e.debit(1, false).unwrap(), Vec::<f64>::new());
        assert!(e.accounted());
        assert_eq!(e.debit(u64::MAX, true), Err(ZeroEnergy));
        assert!(e.accounted());
    }

    #[test]
    fn loss_ratio_window() {
        let mut l = LinkLayer::new(A, LinkConfig::default(), 1, [B].into());
        assert_eq!(l.loss_ratio(B), None);
        for i in 0..12 {
            l.record_outcome(B, !(i == 3 || i == 7));
        }
        assert_eq!(l.loss_ratio(B), Some(0.2));
    }

    #[test]
    fn arq_requeues_once_then_gives_up() {
        let mut b = bus(A);
        let mut l = LinkLayer::new(A, LinkConfig::default(), 1, [B].into());
        l.register_services(&mut b).unwrap();
        b.invoke_service(
            LayerId::Sctp,
            ids::ARQ,
            &Value::record([("peer", Value::Node(B)), ("enable", Value::Bool(true))]),
            0.0,
        )
        .unwrap();
        assert!(l.arq_on(B));
        assert!(l.enqueue(&mut b, frame(1, Some(B), 50), 0.0));
        l.try_start(&mut b, 0.0).unwrap();
        l.finish_tx().unwrap();
        assert!(l.on_ack_timeout(1));
        assert_eq!(l.counters.link_retx, 1);
        l.try_start(&mut b, 0.1).unwrap();
        l.finish_tx().unwrap();
        l.on_ack(&mut b, 1, 0.1);
        assert_eq!(l.counters.link_retx, 1);
        assert_eq!(l.counters.frames_lost, 0);
    }

    #[test]
    fn no_arq_loss_is_final() {
        let mut b = bus(A);
        let mut l = LinkLayer::new(A, LinkConfig::default(), 1, [B].into());
        l.enqueue(&mut b, frame(1, Some(B), 50), 0.0);
        l.try_start(&mut b, 0.0);
        l.finish_tx();
        assert!(!l.on_ack_timeout(1));
        assert_eq!(l.counters.frames_lost, 1);
    }

    #[test]
    fn service_for_unknown_peer_fails() {
        let mut b = bus(A);
        let l = LinkLayer::new(A, LinkConfig::default(), 1, [B].into());
        l.register_services(&mut b).unwrap();
        let r = b.invoke_service(
            LayerId::Sctp,
            ids::FEC,
            &Value::record([("peer", Value::Node(NodeId(9)))]),
            0.0,
        );
        assert!(matches!(r, Err(BusError::ServiceFailed { .. })));
    }

    #[test]
    fn jitter_event_when_queue_stalls() {
        let mut b = bus(A);
        b.subscribe_mailbox(LayerId::Sctp, ids::JITTER).unwrap();
        let mut l = LinkLayer::new(A, LinkConfig::default(), 1, [B].into());
        l.enqueue(&mut b, frame(1, Some(B), 50), 0.0);
        assert!(b.take_mail().is_none());
        l.inject_jitter(&mut b, 1.0, 3.0);
        let (_, ev) = b.take_mail().unwrap();
        assert_eq!(ev.payload.field_f64("duration"), Some(3.0));
        l.enqueue(&mut b, frame(2, Some(B), 50), 1.0);
        l.enqueue(&mut b, frame(3, Some(B), 50), 1.5);
        assert!(b.take_mail().is_none(), "one event per stall");
        assert_eq!(l.try_start(&mut b, 1.0).map(|t| t >= 4.0), Some(true));
    }

    #[test]
    fn saturation_drops_and_notifies() {
        let mut b = bus(A);
        b.subscribe_mailbox(LayerId::Olsr, ids::RETRANSMISSION_AVOIDANCE)
            .unwrap();
        let cfg = LinkConfig {
            queue_capacity: 2,
            ..Default::default()
        };
        let mut l = LinkLayer::new(A, cfg, 1, [B].into());
        assert!(l.enqueue(&mut b, frame(1, None, 10), 0.0));
        assert!(l.enqueue(&mut b, frame(2, None, 10), 0.0));
        assert!(!l.enqueue(&mut b, frame(3, None, 10), 0.0));
        assert_eq!(l.counters.queue_drops, 1);
        assert!(b.take_mail().is_some());
    }

    #[test]
    fn exports_and_absent_loss_ratio() {
        let mut b = bus(A);
        let l = LinkLayer::new(A, LinkConfig::default(), 1, [B].into());
        l.export(&mut b, &[(B, ChannelState::default())], 1.0);
        let snr = b.read_peer_state(LayerId::Sctp, ids::SNR, B, 1.0).unwrap();
        assert_eq!(snr.fresh().unwrap().value.as_f64(), Some(30.0));
        let plr = b
            .read_peer_state(LayerId::Sctp, ids::PACKET_LOSS_RATIO, B, 1.0)
            .unwrap();
        assert_eq!(plr, StateRead::Absent);
        let e = b.read_state(LayerId::Sctp, ids::ENERGY_LEVEL, 1.0).unwrap();
        assert_eq!(e.fresh().unwrap().value.as_f64(), Some(1.0));
    }
}
