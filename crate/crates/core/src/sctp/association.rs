use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::bus::{Bus, EventRecord, StateRead, Value};
use crate::registry::{ids, ClaaFlags, LayerId};
use crate::types::{due, quantize, to_ticks, NodeId, Time, TIME_QUANTUM};

use super::packet::{Chunk, SackChunk, SctpPacket};
use super::{
    Delivered, OutKind, Outbound, SctpConfig, SctpCounters, SctpError, SctpTraceRecord, TraceEvent,
};

const PORT: u16 = 5000;
const INITIAL_TSN: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathStatus {
    Active,
    Inactive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub address: NodeId,
    pub state: PathStatus,
    pub error_count: u32,
    pub hb_unacked_count: u32,
    pub rto: f64,
    pub srtt: Option<f64>,
    pub rttvar: f64,
    pub next_hb_time: Time,
    pub hb_suppressed_until: Time,
    pub t3: Option<Time>,
    /// Rate adaptation multiplier applied to rto and heartbeat interval.
    pub adapt: f64,
}

#[derive(Debug, Clone)]
struct Outstanding {
    stream: u16,
    ssn: u16,
    payload: Vec<u8>,
    path: usize,
    sent_time: Option<Time>,
    tx_count: u32,
    miss_reports: u32,
    needs_retx: bool,
    released: bool,
    deferred_counted: bool,
}

impl Outstanding {
    fn in_flight(&self) -> bool {
        self.sent_time.is_some() && !self.needs_retx
    }
}

#[derive(Debug, Default)]
struct Receiver {
    cum_tsn: u32,
    above: BTreeSet<u32>,
    next_ssn: BTreeMap<u16, u16>,
    reorder: BTreeMap<u16, BTreeMap<u16, Vec<u8>>>,
}

/// One SCTP association with a (possibly multi-homed) peer.
pub struct Association {
    local: NodeId,
    paths: Vec<PathState>,
    primary: usize,
    cfg: SctpConfig,
    flags: ClaaFlags,
    vtag: u32,

    next_tsn: u32,
    next_ssn: BTreeMap<u16, u16>,
    outstanding: BTreeMap<u32, Outstanding>,
    cwnd: usize,
    ssthresh: usize,
    partial_bytes_acked: usize,

    freeze_until: Time,
    resume_at: Option<Time>,
    low_energy: bool,
    fec_peers: BTreeSet<NodeId>,
    arq_peers: BTreeSet<NodeId>,
    unavailable_reported: bool,

    rx: Receiver,
    delivered: VecDeque<Delivered>,
    counters: SctpCounters,
    detections: Vec<Time>,
    trace: Option<Vec<SctpTraceRecord>>,
}

impl Association {
    pub fn new(
        local: NodeId,
        remote: &[NodeId],
        cfg: SctpConfig,
        flags: ClaaFlags,
        now: Time,
    ) -> Self {
        assert!(!remote.is_empty(), "an association needs at least one path");
        let paths = remote
            .iter()
            .map(|&address| PathState {
                address,
                state: PathStatus::Active,
                error_count: 0,
                hb_unacked_count: 0,
                rto: cfg.rto_initial,
                srtt: None,
                rttvar: 0.0,
                next_hb_time: quantize(now + cfg.rto_initial + cfg.hb_delay),
                hb_suppressed_until: now,
                t3: None,
                adapt: 1.0,
            })
            .collect();
        let (a, b) = (local.0.min(remote[0].0), local.0.max(remote[0].0));
        Association {
            local,
            paths,
            primary: 0,
            vtag: a.wrapping_mul(0x9E37_79B9) ^ b.rotate_left(16),
            next_tsn: INITIAL_TSN,
            next_ssn: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            cwnd: cfg.initial_cwnd_mtus * cfg.mtu,
            ssthresh: 64 * cfg.mtu,
            partial_bytes_acked: 0,
            freeze_until: f64::NEG_INFINITY,
            resume_at: None,
            low_energy: false,
            fec_peers: BTreeSet::new(),
            arq_peers: BTreeSet::new(),
            unavailable_reported: false,
            rx: Receiver {
                cum_tsn: INITIAL_TSN - 1,
                ..Default::default()
            },
            delivered: VecDeque::new(),
            counters: SctpCounters::default(),
            detections: Vec::new(),
            trace: cfg.trace.then(Vec::new),
            cfg,
            flags,
        }
    }

    pub fn paths(&self) -> &[PathState] {
        &self.paths
    }

    pub fn path(&self, addr: NodeId) -> Option<&PathState> {
        self.paths.iter().find(|p| p.address == addr)
    }

    pub fn primary_address(&self) -> NodeId {
        self.paths[self.primary].address
    }

    pub fn addresses(&self) -> Vec<NodeId> {
        self.paths.iter().map(|p| p.address).collect()
    }

    pub fn has_address(&self, addr: NodeId) -> bool {
        self.paths.iter().any(|p| p.address == addr)
    }

    pub fn cwnd(&self) -> usize {
        self.cwnd
    }

    pub fn ssthresh(&self) -> usize {
        self.ssthresh
    }

    pub fn set_cwnd(&mut self, cwnd: usize) {
        self.cwnd = cwnd;
    }

    pub fn outstanding_count(&self) -> usize {
        self.outstanding.len()
    }

    pub fn has_pending(&self) -> bool {
        !self.outstanding.is_empty()
    }

    pub fn miss_reports(&self, tsn: u32) -> Option<u32> {
        self.outstanding.get(&tsn).map(|o| o.miss_reports)
    }

    pub fn freeze_until(&self) -> Time {
        self.freeze_until
    }

    pub fn is_frozen(&self, now: Time) -> bool {
        self.freeze_until.is_finite() && to_ticks(now) <= to_ticks(self.freeze_until)
    }

    pub fn low_energy(&self) -> bool {
        self.low_energy
    }

    pub fn counters(&self) -> &SctpCounters {
        &self.counters
    }

    pub fn detections(&self) -> &[Time] {
        &self.detections
    }

    pub fn trace(&self) -> &[SctpTraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_delivered(&mut self) -> Vec<Delivered> {
        self.delivered.drain(..).collect()
    }

    fn log(&mut self, time: Time, peer: NodeId, event: TraceEvent) {
        if let Some(t) = &mut self.trace {
            t.push(SctpTraceRecord { time, peer, event });
        }
    }

    fn on(&self, id: &str) -> bool {
        self.flags.is_on(id)
    }

    fn path_index(&self, addr: NodeId) -> Option<usize> {
        self.paths.iter().position(|p| p.address == addr)
    }

    fn effective_rto(&self, i: usize) -> f64 {
        (self.paths[i].rto * self.paths[i].adapt).min(self.cfg.rto_max)
    }

    fn effective_cwnd(&self) -> usize {
        if self.low_energy {
            self.cfg.mtu
        } else {
            self.cwnd
        }
    }

    fn flight_size(&self) -> usize {
        self.outstanding
            .values()
            .filter(|o| o.in_flight() && !o.released)
            .map(|o| o.payload.len())
            .sum()
    }

    fn packet(&self, chunk: Chunk) -> Vec<u8> {
        SctpPacket {
            src_port: PORT,
            dst_port: PORT,
            vtag: self.vtag,
            chunk,
        }
        .encode()
    }

    // ---- environment reads -------------------------------------------------

    fn snapshot<'b>(&self, bus: &'b Bus, now: Time) -> StateRead<'b> {
        bus.read_state(LayerId::Sctp, ids::SUPERSTRUCTURES, now)
            .unwrap_or(StateRead::Absent)
    }

    fn route(&self, bus: &Bus, dest: NodeId, now: Time) -> Option<(NodeId, u32)> {
        let entry = self.snapshot(bus, now).fresh()?;
        route_in(&entry.value, dest)
    }

    /// Next hop towards `dest` as seen through the routing snapshot.
    fn next_hop(&self, bus: &Bus, dest: NodeId, now: Time) -> NodeId {
        if self.on(ids::SUPERSTRUCTURES) {
            if let Some((hop, _)) = self.route(bus, dest, now) {
                return hop;
            }
        }
        dest
    }

    /// Symmetric one-hop neighbour with a strong signal.
    fn directly_accessible(&self, bus: &Bus, dest: NodeId, now: Time) -> bool {
        let one_hop = self
            .snapshot(bus, now)
            .fresh()
            .is_some_and(|e| symmetric_in(&e.value, dest));
        let rss = bus
            .read_peer_state(LayerId::Sctp, ids::RSS, dest, now)
            .ok()
            .and_then(StateRead::fresh)
            .and_then(|e| e.value.as_f64());
        one_hop && rss.is_some_and(|r| r >= self.cfg.rss_direct_threshold)
    }

    /// Checks the enabled routing CLAAs before putting anything on the wire.
    fn consult(&self, bus: &Bus, dest: NodeId, now: Time) -> bool {
        if self.on(ids::SUPERSTRUCTURES) && self.route(bus, dest, now).is_none() {
            return false;
        }
        let hop = self.next_hop(bus, dest, now);
        if self.on(ids::WIRELESS_LINK_STATUS) {
            let q = bus
                .read_peer_state(LayerId::Sctp, ids::WIRELESS_LINK_STATUS, hop, now)
                .ok()
                .and_then(StateRead::fresh)
                .and_then(|e| e.value.field_f64("quality"));
            if q.is_some_and(|q| q < self.cfg.send_quality_threshold) {
                return false;
            }
        }
        if self.on(ids::COMMON_SIGNALIZATION) {
            let r = bus.read_peer_state(LayerId::Sctp, ids::COMMON_SIGNALIZATION, hop, now);
            if matches!(r, Ok(StateRead::Expired)) {
                return false;
            }
        }
        true
    }

    fn common_signalization_fresh(&self, bus: &Bus, dest: NodeId, now: Time) -> bool {
        self.on(ids::COMMON_SIGNALIZATION)
            && matches!(
                bus.read_peer_state(LayerId::Sctp, ids::COMMON_SIGNALIZATION, dest, now),
                Ok(StateRead::Fresh(_))
            )
    }

    fn read_peer_number(&self, bus: &Bus, id: &str, peer: NodeId, now: Time) -> Option<f64> {
        if !self.on(id) {
            return None;
        }
        bus.read_peer_state(LayerId::Sctp, id, peer, now)
            .ok()
            .and_then(StateRead::fresh)
            .and_then(|e| e.value.as_f64())
    }

    /// Updates per-path rate adaptation and the low-energy mode from the
    /// exported states.
    fn refresh_adaptation(&mut self, bus: &Bus, now: Time) {
        if self.on(ids::ENERGY_LEVEL) {
            let level = bus
                .read_state(LayerId::Sctp, ids::ENERGY_LEVEL, now)
                .ok()
                .and_then(StateRead::fresh)
                .and_then(|e| e.value.as_f64());
            if level.is_some_and(|l| l < self.cfg.energy_low) {
                self.low_energy = true;
            }
        }
        for i in 0..self.paths.len() {
            let hop = self.next_hop(bus, self.paths[i].address, now);
            let loss = self.read_peer_number(bus, ids::PACKET_LOSS_RATIO, hop, now);
            let snr = self.read_peer_number(bus, ids::SNR, hop, now);
            let ber = self.read_peer_number(bus, ids::BER, hop, now);
            let bad = loss.is_some_and(|v| v >= self.cfg.loss_bad)
                || snr.is_some_and(|v| v <= self.cfg.snr_bad)
                || ber.is_some_and(|v| v >= self.cfg.ber_bad);
            let good = loss.is_none_or(|v| v <= self.cfg.loss_good)
                && snr.is_none_or(|v| v >= self.cfg.snr_good)
                && ber.is_none_or(|v| v <= self.cfg.ber_good);
            if bad {
                self.paths[i].adapt = self.cfg.adaptation_factor;
            } else if good {
                self.paths[i].adapt = 1.0;
            }
        }
    }

    /// Asks the link layer for FEC and ARQ towards directly accessible peers.
    fn invoke_link_services(&mut self, bus: &mut Bus, dest: NodeId, now: Time) {
        let want_fec = self.on(ids::FEC) && !self.fec_peers.contains(&dest);
        let want_arq = self.on(ids::ARQ) && !self.arq_peers.contains(&dest);
        if !(want_fec || want_arq) || !self.directly_accessible(bus, dest, now) {
            return;
        }
        let params = Value::record([("peer", Value::Node(dest)), ("enable", Value::Bool(true))]);
        if want_fec
            && bus
                .invoke_service(LayerId::Sctp, ids::FEC, &params, now)
                .is_ok()
        {
            self.fec_peers.insert(dest);
        }
        if want_arq
            && bus
                .invoke_service(LayerId::Sctp, ids::ARQ, &params, now)
                .is_ok()
        {
            self.arq_peers.insert(dest);
        }
    }

    // ---- sending -----------------------------------------------------------

    pub fn send_message(
        &mut self,
        bus: &mut Bus,
        stream: u16,
        payload: Vec<u8>,
        now: Time,
    ) -> Result<Vec<Outbound>, SctpError> {
        if self.paths.iter().all(|p| p.state == PathStatus::Inactive) {
            return Err(SctpError::NoActivePath(self.primary_address()));
        }
        let ssn = self.next_ssn.entry(stream).or_insert(0);
        let this_ssn = *ssn;
        *ssn = ssn.wrapping_add(1);
        let tsn = self.next_tsn;
        self.next_tsn += 1;
        self.outstanding.insert(
            tsn,
            Outstanding {
                stream,
                ssn: this_ssn,
                payload,
                path: self.primary,
                sent_time: None,
                tx_count: 0,
                miss_reports: 0,
                needs_retx: false,
                released: false,
                deferred_counted: false,
            },
        );
        Ok(self.flush(bus, now))
    }

    /// Emits retransmissions first, then new data, within the window.
    fn flush(&mut self, bus: &mut Bus, now: Time) -> Vec<Outbound> {
        let mut out = Vec::new();
        if self.is_frozen(now) {
            self.resume_at = Some(quantize(self.freeze_until + TIME_QUANTUM));
            return out;
        }
        if self.outstanding.is_empty() {
            return out;
        }
        self.refresh_adaptation(bus, now);
        let Some(p) = self.active_path() else {
            return out;
        };
        self.primary = p;
        let dest = self.paths[p].address;
        self.invoke_link_services(bus, dest, now);

        let mut order: Vec<u32> = self
            .outstanding
            .iter()
            .filter(|(_, o)| o.needs_retx)
            .map(|(t, _)| *t)
            .collect();
        order.extend(
            self.outstanding
                .iter()
                .filter(|(_, o)| o.sent_time.is_none())
                .map(|(t, _)| *t),
        );
        for tsn in order {
            let len = self.outstanding[&tsn].payload.len();
            let flight = self.flight_size();
            if flight > 0 && flight + len > self.effective_cwnd() {
                break;
            }
            if !self.consult(bus, dest, now) {
                let o = self.outstanding.get_mut(&tsn).expect("tsn in order");
                if !o.deferred_counted {
                    o.deferred_counted = true;
                    self.counters.deferred += 1;
                }
                if self.paths[p].t3.is_none() {
                    self.paths[p].t3 = Some(quantize(now + self.effective_rto(p)));
                }
                break;
            }
            let o = self.outstanding.get_mut(&tsn).expect("tsn in order");
            let kind = if o.tx_count > 0 {
                OutKind::Retransmission
            } else {
                OutKind::Data
            };
            o.path = p;
            o.sent_time = Some(now);
            o.tx_count += 1;
            o.needs_retx = false;
            o.released = false;
            o.miss_reports = 0;
            let chunk = Chunk::Data {
                tsn,
                stream: o.stream,
                ssn: o.ssn,
                payload: o.payload.clone(),
            };
            match kind {
                OutKind::Data => self.counters.data_sent += 1,
                _ => self.counters.retransmissions += 1,
            }
            out.push(Outbound {
                dst: dest,
                kind,
                bytes: self.packet(chunk),
            });
            self.log(now, dest, TraceEvent::Emit(kind));
            if self.paths[p].t3.is_none() {
                self.paths[p].t3 = Some(quantize(now + self.effective_rto(p)));
            }
        }
        out
    }

    /// Primary if active, else any active path, else the (inactive) primary.
    fn active_path(&self) -> Option<usize> {
        if self.paths[self.primary].state == PathStatus::Active {
            return Some(self.primary);
        }
        self.paths
            .iter()
            .position(|p| p.state == PathStatus::Active)
            .or(Some(self.primary))
    }

    // ---- acknowledgements ---------------------------------------------------

    fn rtt_sample(&mut self, i: usize, r: f64) {
        let p = &mut self.paths[i];
        match p.srtt {
            None => {
                p.srtt = Some(r);
                p.rttvar = r / 2.0;
            }
            Some(s) => {
                p.rttvar = 0.75 * p.rttvar + 0.25 * (s - r).abs();
                p.srtt = Some(0.875 * s + 0.125 * r);
            }
        }
        let rto = p.srtt.unwrap_or(r) + 4.0 * p.rttvar;
        p.rto = rto.clamp(self.cfg.rto_min, self.cfg.rto_max);
    }

    fn set_error_count(&mut self, i: usize, v: u32, now: Time) {
        if self.paths[i].error_count != v {
            self.paths[i].error_count = v;
            let a = self.paths[i].address;
            self.log(now, a, TraceEvent::ErrorCount(v));
        }
    }

    fn set_hb_unacked(&mut self, i: usize, v: u32, now: Time) {
        if self.paths[i].hb_unacked_count != v {
            self.paths[i].hb_unacked_count = v;
            let a = self.paths[i].address;
            self.log(now, a, TraceEvent::HbUnacked(v));
        }
    }

    fn reactivate(&mut self, bus: &mut Bus, i: usize, now: Time) {
        if self.paths[i].state == PathStatus::Inactive {
            self.paths[i].state = PathStatus::Active;
            let a = self.paths[i].address;
            self.log(now, a, TraceEvent::PathActive);
            self.unavailable_reported = false;
            if self.on(ids::NODE_UNAVAILABLE) {
                let _ = bus.update_reachability(LayerId::Sctp, a, true, now);
            }
            if self.paths[self.primary].state == PathStatus::Inactive {
                self.primary = i;
            }
        }
    }

    pub fn on_sack(
        &mut self,
        bus: &mut Bus,
        _from: NodeId,
        sack: &SackChunk,
        now: Time,
    ) -> Vec<Outbound> {
        if !sack.is_well_formed() || sack.highest_reported() >= self.next_tsn {
            self.counters.malformed_sacks += 1;
            return Vec::new();
        }
        let acked: Vec<u32> = self
            .outstanding
            .iter()
            .filter(|(t, o)| o.sent_time.is_some() && sack.acks(**t))
            .map(|(t, _)| *t)
            .collect();
        let mut bytes_acked = 0;
        let mut sampled = false;
        let mut acked_paths = BTreeSet::new();
        for tsn in &acked {
            let o = self.outstanding.remove(tsn).expect("acked tsn present");
            bytes_acked += o.payload.len();
            acked_paths.insert(o.path);
            if o.tx_count == 1 && !sampled {
                if let Some(sent) = o.sent_time {
                    self.rtt_sample(o.path, now - sent);
                    sampled = true;
                }
            }
        }
        for &i in &acked_paths {
            self.set_error_count(i, 0, now);
            self.reactivate(bus, i, now);
        }
        if bytes_acked > 0 && !self.is_frozen(now) {
            if self.cwnd <= self.ssthresh {
                self.cwnd += bytes_acked.min(self.cfg.mtu);
            } else {
                self.partial_bytes_acked += bytes_acked;
                if self.partial_bytes_acked >= self.cwnd {
                    self.partial_bytes_acked -= self.cwnd;
                    self.cwnd += self.cfg.mtu;
                }
            }
        }

        let highest = sack.highest_reported();
        let fast_retx_allowed = |a: &Self, path: usize| -> bool {
            !(a.on(ids::ARQ) && a.arq_peers.contains(&a.paths[path].address))
        };
        let mut halved = false;
        let missing: Vec<u32> = self
            .outstanding
            .range(..highest)
            .filter(|(_, o)| o.in_flight())
            .map(|(t, _)| *t)
            .collect();
        for tsn in missing {
            let path = self.outstanding[&tsn].path;
            let allowed = fast_retx_allowed(self, path);
            let o = self.outstanding.get_mut(&tsn).expect("missing tsn present");
            o.miss_reports += 1;
            if o.miss_reports == 4 {
                o.miss_reports = 0;
                if allowed {
                    o.needs_retx = true;
                    self.counters.fast_retransmissions += 1;
                    if !halved {
                        halved = true;
                        self.cwnd = (self.cwnd / 2).max(self.cfg.mtu);
                        self.ssthresh = self.cwnd;
                        self.partial_bytes_acked = 0;
                    }
                }
            }
        }

        for i in 0..self.paths.len() {
            let inflight = self
                .outstanding
                .values()
                .any(|o| o.path == i && o.in_flight());
            if !inflight {
                if !self.outstanding.values().any(|o| o.path == i) {
                    self.paths[i].t3 = None;
                }
            } else if acked_paths.contains(&i) && !self.is_frozen(now) {
                self.paths[i].t3 = Some(quantize(now + self.effective_rto(i)));
            }
        }
        self.flush(bus, now)
    }

    // ---- timers ------------------------------------------------------------

    pub fn poll_timeout(&self) -> Option<Time> {
        let mut t: Option<Time> = self.resume_at;
        for p in &self.paths {
            for c in [p.t3, Some(p.next_hb_time)].into_iter().flatten() {
                t = Some(t.map_or(c, |x: f64| x.min(c)));
            }
        }
        t
    }

    pub fn handle_timeout(&mut self, bus: &mut Bus, now: Time) -> Vec<Outbound> {
        let mut out = Vec::new();
        if self.resume_at.is_some_and(|r| due(r, now)) {
            self.resume_at = None;
            out.extend(self.flush(bus, now));
        }
        for i in 0..self.paths.len() {
            if self.paths[i].t3.is_some_and(|t| due(t, now)) {
                out.extend(self.on_rto_expiry(bus, i, now));
            }
            if due(self.paths[i].next_hb_time, now) {
                out.extend(self.heartbeat_tick(bus, i, now));
            }
        }
        out
    }

    pub fn on_rto_expiry(&mut self, bus: &mut Bus, i: usize, now: Time) -> Vec<Outbound> {
        if self.is_frozen(now) {
            self.paths[i].t3 = Some(quantize(self.freeze_until + self.effective_rto(i)));
            return Vec::new();
        }
        self.paths[i].t3 = None;
        let inflight: Vec<u32> = self
            .outstanding
            .iter()
            .filter(|(_, o)| o.path == i && o.in_flight())
            .map(|(t, _)| *t)
            .collect();
        if inflight.is_empty() {
            // only deferred data on this path: try again without penalty
            return self.flush(bus, now);
        }
        self.refresh_adaptation(bus, now);
        self.counters.timeouts += 1;
        self.paths[i].rto = (self.paths[i].rto * 2.0).min(self.cfg.rto_max);
        let errors = (self.paths[i].error_count + 1).min(self.cfg.path_max_retrans + 1);
        self.set_error_count(i, errors, now);
        self.ssthresh = (self.cwnd / 2).max(2 * self.cfg.mtu);
        self.cwnd = self.cfg.mtu;
        self.partial_bytes_acked = 0;
        for tsn in inflight {
            let o = self.outstanding.get_mut(&tsn).expect("in-flight tsn");
            o.needs_retx = true;
            o.miss_reports = 0;
        }
        if errors > self.cfg.path_max_retrans {
            self.mark_path_inactive(bus, i, now);
        }
        self.flush(bus, now)
    }

    pub fn heartbeat_tick(&mut self, bus: &mut Bus, i: usize, now: Time) -> Vec<Outbound> {
        self.refresh_adaptation(bus, now);
        self.counters.heartbeat_ticks += 1;
        let interval = self.effective_rto(i) + self.cfg.hb_delay * self.paths[i].adapt;
        self.paths[i].next_hb_time = quantize(now + interval);
        let dest = self.paths[i].address;
        let energy_off = self.low_energy
            && (self.on(ids::ENERGY_LEVEL) || self.on(ids::SIGNIFICANT_ENERGY_DECREASE));
        let suppressed = self.is_frozen(now)
            || energy_off
            || (self.paths[i].state == PathStatus::Active
                && self.common_signalization_fresh(bus, dest, now))
            || !self.consult(bus, dest, now);
        if suppressed {
            self.counters.heartbeats_suppressed += 1;
            self.paths[i].hb_suppressed_until = self.paths[i].next_hb_time;
            return Vec::new();
        }
        if self.paths[i].hb_unacked_count >= self.cfg.hb_max_unacked
            && self.paths[i].state == PathStatus::Active
        {
            self.mark_path_inactive(bus, i, now);
        }
        let unacked = (self.paths[i].hb_unacked_count + 1).min(self.cfg.hb_max_unacked);
        self.set_hb_unacked(i, unacked, now);
        let bytes = self.packet(Chunk::Heartbeat {
            address: dest,
            sent_time: now,
        });
        self.counters.heartbeats_sent += 1;
        self.counters.heartbeat_bytes += bytes.len() as u64;
        self.log(now, dest, TraceEvent::Emit(OutKind::Heartbeat));
        vec![Outbound {
            dst: dest,
            kind: OutKind::Heartbeat,
            bytes,
        }]
    }

    fn on_heartbeat_ack(
        &mut self,
        bus: &mut Bus,
        from: NodeId,
        sent_time: Time,
        now: Time,
    ) -> Vec<Outbound> {
        let Some(i) = self.path_index(from) else {
            return Vec::new();
        };
        self.counters.heartbeat_acks_received += 1;
        if sent_time <= now {
            self.rtt_sample(i, now - sent_time);
        }
        self.set_hb_unacked(i, 0, now);
        self.set_error_count(i, 0, now);
        self.reactivate(bus, i, now);
        self.flush(bus, now)
    }

    pub fn mark_path_inactive(&mut self, bus: &mut Bus, i: usize, now: Time) {
        if self.paths[i].state == PathStatus::Inactive {
            return;
        }
        self.paths[i].state = PathStatus::Inactive;
        let addr = self.paths[i].address;
        self.log(now, addr, TraceEvent::PathInactive);
        if let Some(alt) = self
            .paths
            .iter()
            .position(|p| p.state == PathStatus::Active)
        {
            self.paths[i].t3 = None;
            self.primary = alt;
            self.counters.path_failovers += 1;
            for o in self.outstanding.values_mut().filter(|o| o.path == i) {
                o.path = alt;
                if o.sent_time.is_some() {
                    o.needs_retx = true;
                }
            }
            return;
        }
        if self.unavailable_reported {
            return;
        }
        self.unavailable_reported = true;
        self.counters.node_unavailable_events += 1;
        self.detections.push(now);
        if self.on(ids::NODE_UNAVAILABLE) {
            let payload = Value::record([("peer", Value::Node(addr))]);
            let _ = bus.publish_event(LayerId::Sctp, ids::NODE_UNAVAILABLE, payload, now);
            let _ = bus.update_reachability(LayerId::Sctp, addr, false, now);
        }
    }

    /// Stops emissions and counter increments until `now + duration`.
    pub fn freeze(&mut self, now: Time, duration: f64) {
        let until = quantize(self.freeze_until.max(now + duration));
        self.freeze_until = until;
        self.counters.freeze_windows += 1;
        let peer = self.primary_address();
        self.log(now, peer, TraceEvent::Freeze { until });
        for i in 0..self.paths.len() {
            if self.paths[i].t3.is_some() {
                self.paths[i].t3 = Some(quantize(until + self.effective_rto(i)));
            }
        }
        self.resume_at = Some(until + TIME_QUANTUM);
    }

    // ---- CLAA reactions ----------------------------------------------------

    pub fn on_claa(&mut self, bus: &mut Bus, ev: &EventRecord, now: Time) -> Vec<Outbound> {
        let duration = ev
            .payload
            .field_f64("duration")
            .filter(|d| *d > 0.0)
            .unwrap_or_else(|| self.effective_rto(self.primary));
        match ev.claa_id.as_str() {
            ids::JITTER | ids::RETRANSMISSION_AVOIDANCE => {
                self.freeze(now, duration);
                Vec::new()
            }
            ids::UNAVAILABLE_LINK => {
                self.freeze(now, duration);
                let dest = ev.payload.field_node("destination");
                if let Some(i) = dest.and_then(|d| self.path_index(d)) {
                    self.mark_path_inactive(bus, i, now);
                    self.paths[i].next_hb_time = quantize(self.freeze_until + TIME_QUANTUM);
                }
                Vec::new()
            }
            ids::EXPLICIT_CONGESTION => {
                self.cwnd = (self.cwnd / 2).max(self.cfg.mtu);
                self.ssthresh = self.cwnd;
                self.partial_bytes_acked = 0;
                self.counters.ecn_reductions += 1;
                Vec::new()
            }
            ids::ACKNOWLEDGEMENT => {
                let Some(dst) = ev.payload.field_node("dst") else {
                    return Vec::new();
                };
                let one_hop = ev.payload.field_bool("one_hop").unwrap_or(false);
                let rss_ok = self
                    .read_peer_number(bus, ids::RSS, dst, now)
                    .is_some_and(|r| r >= self.cfg.rss_direct_threshold)
                    || !self.on(ids::RSS);
                if ev.stage != Some(3) || !one_hop || !rss_ok {
                    return Vec::new();
                }
                let Some(i) = self.path_index(dst) else {
                    return Vec::new();
                };
                let newest = self
                    .outstanding
                    .iter_mut()
                    .rev()
                    .find(|(_, o)| o.path == i && o.in_flight() && !o.released);
                if let Some((_, o)) = newest {
                    o.released = true;
                    self.counters.early_releases += 1;
                    return self.flush(bus, now);
                }
                Vec::new()
            }
            ids::SIGNIFICANT_ENERGY_DECREASE => {
                self.low_energy = true;
                Vec::new()
            }
            ids::EXPLICIT_LOST => {
                // loss without congestion: resend at once, no backoff
                let dest = ev.payload.field_node("peer");
                let Some(i) = dest.and_then(|d| self.path_index(d)) else {
                    return Vec::new();
                };
                for o in self
                    .outstanding
                    .values_mut()
                    .filter(|o| o.path == i && o.in_flight())
                {
                    o.needs_retx = true;
                }
                self.paths[i].t3 = None;
                self.flush(bus, now)
            }
            _ => {
                self.counters.ignored_claa += 1;
                Vec::new()
            }
        }
    }

    // ---- receiving ---------------------------------------------------------

    pub fn receive(
        &mut self,
        bus: &mut Bus,
        from: NodeId,
        bytes: &[u8],
        link_verified: bool,
        now: Time,
    ) -> Vec<Outbound> {
        let skip = link_verified || (self.on(ids::FEC) && self.fec_peers.contains(&from));
        if skip {
            self.counters.checksum_verifications_skipped += 1;
        } else {
            self.counters.checksum_verifications += 1;
        }
        let pkt = match SctpPacket::decode(bytes, !skip) {
            Ok(p) => p,
            Err(super::packet::DecodeError::BadChecksum) => {
                self.counters.checksum_drops += 1;
                return Vec::new();
            }
            Err(_) => {
                self.counters.decode_errors += 1;
                return Vec::new();
            }
        };
        match pkt.chunk {
            Chunk::Data {
                tsn,
                stream,
                ssn,
                payload,
            } => self.on_data(from, tsn, stream, ssn, payload, now),
            Chunk::Sack(s) => self.on_sack(bus, from, &s, now),
            Chunk::Heartbeat { address, sent_time } => {
                let bytes = self.packet(Chunk::HeartbeatAck { address, sent_time });
                vec![Outbound {
                    dst: from,
                    kind: OutKind::HeartbeatAck,
                    bytes,
                }]
            }
            Chunk::HeartbeatAck { sent_time, .. } => {
                self.on_heartbeat_ack(bus, from, sent_time, now)
            }
        }
    }

    fn on_data(
        &mut self,
        from: NodeId,
        tsn: u32,
        stream: u16,
        ssn: u16,
        payload: Vec<u8>,
        now: Time,
    ) -> Vec<Outbound> {
        let rx = &mut self.rx;
        if tsn <= rx.cum_tsn || rx.above.contains(&tsn) {
            self.counters.spurious_retransmissions += 1;
        } else {
            rx.above.insert(tsn);
            while rx.above.remove(&(rx.cum_tsn + 1)) {
                rx.cum_tsn += 1;
            }
            rx.reorder.entry(stream).or_default().insert(ssn, payload);
            let next = rx.next_ssn.entry(stream).or_insert(0);
            let buf = rx.reorder.get_mut(&stream).expect("stream buffer");
            while let Some(p) = buf.remove(next) {
                *next = next.wrapping_add(1);
                self.counters.messages_delivered += 1;
                self.counters.bytes_delivered += p.len() as u64;
                self.delivered.push_back(Delivered {
                    from,
                    stream,
                    payload: p,
                });
            }
        }
        let _ = now;
        let sack = SackChunk {
            cumulative_tsn: self.rx.cum_tsn,
            gap_reports: gap_ranges(self.rx.cum_tsn, &self.rx.above),
        };
        self.counters.sacks_sent += 1;
        vec![Outbound {
            dst: from,
            kind: OutKind::Sack,
            bytes: self.packet(Chunk::Sack(sack)),
        }]
    }

    pub fn local(&self) -> NodeId {
        self.local
    }
}

fn gap_ranges(cum: u32, above: &BTreeSet<u32>) -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = Vec::new();
    for &t in above.range(cum + 1..) {
        match out.last_mut() {
            Some((_, e)) if *e + 1 == t => *e = t,
            _ => out.push((t, t)),
        }
    }
    out
}

/// Looks up `dest` in a routing snapshot `{routes: [{dest, next_hop, hops}]}`.
pub(crate) fn route_in(snapshot: &Value, dest: NodeId) -> Option<(NodeId, u32)> {
    snapshot
        .get("routes")?
        .as_list()?
        .iter()
        .find(|r| r.field_node("dest") == Some(dest))
        .and_then(|r| Some((r.field_node("next_hop")?, r.field_f64("hops")? as u32)))
}

pub(crate) fn symmetric_in(snapshot: &Value, peer: NodeId) -> bool {
    snapshot
        .get("symmetric")
        .and_then(Value::as_list)
        .is_some_and(|l| l.iter().any(|v| v.as_node() == Some(peer)))
}
