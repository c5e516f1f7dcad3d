//! Simplified OLSR: HELLO-based link sensing with the hysteresis link-quality
//! estimator, neighbour and 2-hop detection, MPR selection and signalling,
//! minimal TC flooding, shortest-hop routing, and the four OLSR CLAA sources.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{Bus, EventRecord, Value};
use crate::registry::{ids, ClaaFlags, LayerId};
use crate::types::{due, quantize, NodeId, Time};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OlsrConfig {
    pub hello_interval: f64,
    pub refresh_interval: f64,
    pub vtime: f64,
    pub tc_interval: f64,
    pub tc_vtime: f64,
    pub hyst_scaling: f64,
    pub hyst_high: f64,
    pub hyst_low: f64,
    pub silence_factor: f64,
    pub jitter: f64,
    pub neighb_hold_margin: f64,
    /// Period of the expiry / silence check.
    pub tick: f64,
}

impl Default for OlsrConfig {
    fn default() -> Self {
        OlsrConfig {
            hello_interval: 2.0,
            refresh_interval: 2.0,
            vtime: 6.0,
            tc_interval: 5.0,
            tc_vtime: 15.0,
            hyst_scaling: 0.5,
            hyst_high: 0.8,
            hyst_low: 0.3,
            silence_factor: 1.5,
            jitter: 0.25,
            neighb_hold_margin: 0.0,
            tick: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkCode {
    Sym,
    Asym,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighCode {
    Sym,
    Mpr,
    Not,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HelloMessage {
    pub originator: NodeId,
    pub htime: f64,
    pub vtime: f64,
    pub entries: Vec<(NodeId, LinkCode, NeighCode)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcMessage {
    pub originator: NodeId,
    pub msg_seq: u16,
    pub ttl: u8,
    pub ansn: u16,
    pub vtime: f64,
    pub advertised: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(HelloMessage),
    Tc(TcMessage),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsrPacket {
    pub packet_seq: u16,
    pub message: Message,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OlsrDecodeError {
    #[error("OLSR packet truncated")]
    Truncated,
    #[error("unknown OLSR message type {0}")]
    UnknownType(u8),
    #[error("invalid code {0}")]
    BadCode(u8),
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], OlsrDecodeError> {
        let s = self
            .b
            .get(self.at..self.at + N)
            .ok_or(OlsrDecodeError::Truncated)?;
        self.at += N;
        Ok(s.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, OlsrDecodeError> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, OlsrDecodeError> {
        Ok(u16::from_be_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32, OlsrDecodeError> {
        Ok(u32::from_be_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f64, OlsrDecodeError> {
        Ok(f32::from_be_bytes(self.take()?) as f64)
    }
}

impl OlsrPacket {
    pub fn encode(&self) -> Vec<u8> {
        let mut o = Vec::with_capacity(32);
        o.extend_from_slice(&self.packet_seq.to_be_bytes());
        match &self.message {
            Message::Hello(h) => {
                o.push(1);
                o.extend_from_slice(&h.originator.0.to_be_bytes());
                o.extend_from_slice(&(h.htime as f32).to_be_bytes());
                o.extend_from_slice(&(h.vtime as f32).to_be_bytes());
                o.extend_from_slice(&(h.entries.len() as u16).to_be_bytes());
                for (a, l, n) in &h.entries {
                    o.extend_from_slice(&a.0.to_be_bytes());
                    o.push(*l as u8);
                    o.push(*n as u8);
                }
            }
            Message::Tc(t) => {
                o.push(2);
                o.extend_from_slice(&t.originator.0.to_be_bytes());
                o.extend_from_slice(&t.msg_seq.to_be_bytes());
                o.push(t.ttl);
                o.extend_from_slice(&t.ansn.to_be_bytes());
                o.extend_from_slice(&(t.vtime as f32).to_be_bytes());
                o.extend_from_slice(&(t.advertised.len() as u16).to_be_bytes());
                for a in &t.advertised {
                    o.extend_from_slice(&a.0.to_be_bytes());
                }
            }
        }
        o
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, OlsrDecodeError> {
        let mut r = Reader { b: bytes, at: 0 };
        let packet_seq = r.u16()?;
        let message = match r.u8()? {
            1 => {
                let originator = NodeId(r.u32()?);
                let htime = r.f32()?;
                let vtime = r.f32()?;
                let n = r.u16()?;
                let mut entries = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let a = NodeId(r.u32()?);
                    let l = match r.u8()? {
                        0 => LinkCode::Sym,
                        1 => LinkCode::Asym,
                        2 => LinkCode::Lost,
                        c => return Err(OlsrDecodeError::BadCode(c)),
                    };
                    let nc = match r.u8()? {
                        0 => NeighCode::Sym,
                        1 => NeighCode::Mpr,
                        2 => NeighCode::Not,
                        c => return Err(OlsrDecodeError::BadCode(c)),
                    };
                    entries.push((a, l, nc));
                }
                Message::Hello(HelloMessage {
                    originator,
                    htime,
                    vtime,
                    entries,
                })
            }
            2 => {
                let originator = NodeId(r.u32()?);
                let msg_seq = r.u16()?;
                let ttl = r.u8()?;
                let ansn = r.u16()?;
                let vtime = r.f32()?;
                let n = r.u16()?;
                let advertised = (0..n)
                    .map(|_| r.u32().map(NodeId))
                    .collect::<Result<_, _>>()?;
                Message::Tc(TcMessage {
                    originator,
                    msg_seq,
                    ttl,
                    ansn,
                    vtime,
                    advertised,
                })
            }
            t => return Err(OlsrDecodeError::UnknownType(t)),
        };
        if r.at != bytes.len() {
            return Err(OlsrDecodeError::Truncated);
        }
        Ok(OlsrPacket {
            packet_seq,
            message,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Received,
    Lost,
}

/// Exponentially smoothed success rate with two usability thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hysteresis {
    pub scaling: f64,
    pub high: f64,
    pub low: f64,
}

impl Hysteresis {
    /// Returns the new quality and pending flag.
    pub fn update(&self, q: f64, pending: bool, outcome: Outcome) -> (f64, bool) {
        let a = self.scaling;
        let q = match outcome {
            Outcome::Received => (1.0 - a) * q + a,
            Outcome::Lost => (1.0 - a) * q,
        }
        .clamp(0.0, 1.0);
        let pending = if q >= self.high {
            false
        } else if q <= self.low {
            true
        } else {
            pending
        };
        (q, pending)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkTuple {
    pub local_iface_addr: NodeId,
    pub neighbor_iface_addr: NodeId,
    pub sym_time: Time,
    pub asym_time: Time,
    pub time: Time,
    pub link_quality: f64,
    pub pending: bool,
    #[serde(skip)]
    last_seq: Option<u16>,
    #[serde(skip)]
    last_rx: Time,
    #[serde(skip)]
    htime: f64,
    #[serde(skip)]
    silence_losses: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkState {
    Symmetric,
    Asymmetric,
    Lost,
}

impl LinkTuple {
    pub fn state(&self, now: Time) -> LinkState {
        if self.sym_time >= now {
            LinkState::Symmetric
        } else if self.asym_time >= now {
            LinkState::Asymmetric
        } else {
            LinkState::Lost
        }
    }

    /// Symmetric and accepted by the hysteresis.
    pub fn usable(&self, now: Time) -> bool {
        self.state(now) == LinkState::Symmetric && !self.pending
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Route {
    pub next_hop: NodeId,
    pub hops: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OlsrCounters {
    pub hellos_sent: u64,
    pub hellos_received: u64,
    pub tc_sent: u64,
    pub tc_received: u64,
    pub tc_forwarded: u64,
    pub malformed: u64,
    pub losses_detected: u64,
    pub unavailable_link_events: u64,
    pub route_changes: u64,
    pub deferred_emissions: u64,
}

/// Greedy MPR selection. `two_hop` pairs are (neighbour, 2-hop node); only
/// pairs through symmetric neighbours towards strict 2-hop nodes count.
pub fn select_mprs(
    me: NodeId,
    neighbors: &BTreeSet<NodeId>,
    two_hop: &BTreeSet<(NodeId, NodeId)>,
) -> BTreeSet<NodeId> {
    let mut cover: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
    for &(n, t) in two_hop {
        if neighbors.contains(&n) && t != me && !neighbors.contains(&t) {
            cover.entry(n).or_default().insert(t);
        }
    }
    let mut uncovered: BTreeSet<NodeId> = cover.values().flatten().copied().collect();
    let mut mprs = BTreeSet::new();
    for &t in &uncovered.clone() {
        let via: Vec<NodeId> = cover
            .iter()
            .filter(|(_, s)| s.contains(&t))
            .map(|(n, _)| *n)
            .collect();
        if via.len() == 1 {
            mprs.insert(via[0]);
        }
    }
    for m in &mprs {
        for t in &cover[m] {
            uncovered.remove(t);
        }
    }
    while !uncovered.is_empty() {
        // max_by_key keeps the last maximum, so iterate addresses descending
        let best = cover
            .iter()
            .rev()
            .filter(|(n, _)| !mprs.contains(*n))
            .max_by_key(|(_, s)| s.intersection(&uncovered).count())
            .map(|(n, _)| *n)
            .expect("uncovered nodes have a covering neighbour");
        for t in &cover[&best] {
            uncovered.remove(t);
        }
        mprs.insert(best);
    }
    mprs
}

/// Shortest-hop routes over symmetric neighbours, 2-hop pairs and topology
/// pairs `(dest, last_hop)`. Equal-length alternatives resolve to the lowest
/// next hop.
pub fn compute_routes(
    me: NodeId,
    neighbors: &BTreeSet<NodeId>,
    two_hop: &BTreeSet<(NodeId, NodeId)>,
    topology: &BTreeSet<(NodeId, NodeId)>,
) -> BTreeMap<NodeId, Route> {
    let mut adj: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
    for &(n, t) in two_hop {
        adj.entry(n).or_default().insert(t);
    }
    for &(dest, last) in topology {
        adj.entry(last).or_default().insert(dest);
    }
    let mut routes: BTreeMap<NodeId, Route> = BTreeMap::new();
    let mut frontier: Vec<NodeId> = Vec::new();
    for &n in neighbors {
        if n != me {
            routes.insert(
                n,
                Route {
                    next_hop: n,
                    hops: 1,
                },
            );
            frontier.push(n);
        }
    }
    let mut hops = 1;
    while !frontier.is_empty() {
        hops += 1;
        let mut next: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for u in &frontier {
            let via = routes[u].next_hop;
            for &v in adj.get(u).into_iter().flatten() {
                if v == me || routes.contains_key(&v) {
                    continue;
                }
                next.entry(v)
                    .and_modify(|h| *h = (*h).min(via))
                    .or_insert(via);
            }
        }
        frontier = next.keys().copied().collect();
        for (v, via) in next {
            routes.insert(
                v,
                Route {
                    next_hop: via,
                    hops,
                },
            );
        }
    }
    routes
}

/// One OLSR instance (single interface per node).
pub struct Olsr {
    me: NodeId,
    cfg: OlsrConfig,
    flags: ClaaFlags,
    hyst: Hysteresis,
    rng: ChaCha8Rng,

    links: BTreeMap<NodeId, LinkTuple>,
    two_hop: BTreeMap<(NodeId, NodeId), Time>,
    mpr_selectors: BTreeMap<NodeId, Time>,
    topology: BTreeMap<(NodeId, NodeId), (Time, u16)>,
    duplicates: BTreeMap<(NodeId, u16), Time>,
    mprs: BTreeSet<NodeId>,
    routes: BTreeMap<NodeId, Route>,

    packet_seq: u16,
    msg_seq: u16,
    ansn: u16,
    last_advertised: BTreeSet<NodeId>,
    next_hello: Time,
    next_tc: Time,
    next_tick: Time,
    pending: BTreeSet<NodeId>,
    forward_queue: VecDeque<TcMessage>,

    counters: OlsrCounters,
    mpr_series: Vec<(Time, usize)>,
}

impl Olsr {
    pub fn new(me: NodeId, cfg: OlsrConfig, flags: ClaaFlags, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next_hello = quantize(rng.random_range(0.0..cfg.jitter.max(1e-6)));
        let next_tc = quantize(cfg.tc_interval + rng.random_range(0.0..cfg.jitter.max(1e-6)));
        Olsr {
            me,
            hyst: Hysteresis {
                scaling: cfg.hyst_scaling,
                high: cfg.hyst_high,
                low: cfg.hyst_low,
            },
            next_tick: cfg.tick,
            cfg,
            flags,
            rng,
            links: BTreeMap::new(),
            two_hop: BTreeMap::new(),
            mpr_selectors: BTreeMap::new(),
            topology: BTreeMap::new(),
            duplicates: BTreeMap::new(),
            mprs: BTreeSet::new(),
            routes: BTreeMap::new(),
            packet_seq: 0,
            msg_seq: 0,
            ansn: 0,
            last_advertised: BTreeSet::new(),
            next_hello,
            next_tc,
            pending: BTreeSet::new(),
            forward_queue: VecDeque::new(),
            counters: OlsrCounters::default(),
            mpr_series: vec![(0.0, 0)],
        }
    }

    pub fn subscribe(bus: &mut Bus) -> Result<(), crate::bus::BusError> {
        for id in [ids::RETRANSMISSION_AVOIDANCE, ids::ACKNOWLEDGEMENT] {
            if bus.matrix().contains(id) {
                bus.subscribe_mailbox(LayerId::Olsr, id)?;
            }
        }
        Ok(())
    }

    pub fn counters(&self) -> &OlsrCounters {
        &self.counters
    }

    pub fn mpr_series(&self) -> &[(Time, usize)] {
        &self.mpr_series
    }

    pub fn links(&self) -> &BTreeMap<NodeId, LinkTuple> {
        &self.links
    }

    pub fn link(&self, n: NodeId) -> Option<&LinkTuple> {
        self.links.get(&n)
    }

    pub fn mprs(&self) -> &BTreeSet<NodeId> {
        &self.mprs
    }

    pub fn mpr_selectors(&self) -> BTreeSet<NodeId> {
        self.mpr_selectors.keys().copied().collect()
    }

    pub fn routes(&self) -> &BTreeMap<NodeId, Route> {
        &self.routes
    }

    pub fn next_hop(&self, dest: NodeId) -> Option<NodeId> {
        self.routes.get(&dest).map(|r| r.next_hop)
    }

    pub fn two_hop_pairs(&self) -> BTreeSet<(NodeId, NodeId)> {
        self.two_hop.keys().copied().collect()
    }

    pub fn topology_pairs(&self) -> BTreeSet<(NodeId, NodeId)> {
        self.topology.keys().copied().collect()
    }

    /// Destinations with traffic waiting at the transport layer.
    pub fn set_pending_destinations(&mut self, pending: BTreeSet<NodeId>) {
        self.pending = pending;
    }

    pub fn symmetric_neighbors(&self, now: Time) -> BTreeSet<NodeId> {
        self.links
            .values()
            .filter(|l| l.usable(now))
            .map(|l| l.neighbor_iface_addr)
            .collect()
    }

    fn next_seq(&mut self) -> u16 {
        let s = self.packet_seq;
        self.packet_seq = self.packet_seq.wrapping_add(1);
        s
    }

    fn jittered(&mut self, interval: f64) -> f64 {
        let j = self.cfg.jitter;
        if j > 0.0 {
            interval + self.rng.random_range(-j..j)
        } else {
            interval
        }
    }

    pub fn build_hello(&mut self, now: Time) -> OlsrPacket {
        let mut entries = Vec::new();
        for l in self.links.values().filter(|l| l.time >= now) {
            let link = if l.pending {
                LinkCode::Lost
            } else {
                match l.state(now) {
                    LinkState::Symmetric => LinkCode::Sym,
                    LinkState::Asymmetric => LinkCode::Asym,
                    LinkState::Lost => LinkCode::Lost,
                }
            };
            let n = l.neighbor_iface_addr;
            let neigh = if self.mprs.contains(&n) {
                NeighCode::Mpr
            } else if l.usable(now) {
                NeighCode::Sym
            } else {
                NeighCode::Not
            };
            entries.push((n, link, neigh));
        }
        OlsrPacket {
            packet_seq: self.next_seq(),
            message: Message::Hello(HelloMessage {
                originator: self.me,
                htime: self.cfg.hello_interval,
                vtime: self.cfg.vtime,
                entries,
            }),
        }
    }

    fn build_tc(&mut self, now: Time) -> Option<OlsrPacket> {
        if self.mpr_selectors.is_empty() {
            return None;
        }
        let advertised = self.symmetric_neighbors(now);
        if advertised != self.last_advertised {
            self.ansn = self.ansn.wrapping_add(1);
            self.last_advertised = advertised.clone();
        }
        let msg_seq = self.msg_seq;
        self.msg_seq = self.msg_seq.wrapping_add(1);
        Some(OlsrPacket {
            packet_seq: self.next_seq(),
            message: Message::Tc(TcMessage {
                originator: self.me,
                msg_seq,
                ttl: 255,
                ansn: self.ansn,
                vtime: self.cfg.tc_vtime,
                advertised: advertised.into_iter().collect(),
            }),
        })
    }

    pub fn poll_timeout(&self) -> Time {
        let mut t = self.next_hello.min(self.next_tc).min(self.next_tick);
        if !self.forward_queue.is_empty() {
            t = f64::NEG_INFINITY;
        }
        t
    }

    /// Runs due emissions and the periodic expiry pass. Returns the encoded
    /// packets to broadcast.
    pub fn handle_timeout(&mut self, bus: &mut Bus, now: Time) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        while let Some(mut tc) = self.forward_queue.pop_front() {
            tc.ttl -= 1;
            self.counters.tc_forwarded += 1;
            let p = OlsrPacket {
                packet_seq: self.next_seq(),
                message: Message::Tc(tc),
            };
            out.push(p.encode());
        }
        if due(self.next_tick, now) {
            self.next_tick = quantize(now + self.cfg.tick);
            self.detect_silence(now);
            self.refresh(bus, now);
        }
        if due(self.next_hello, now) {
            let next = self.jittered(self.cfg.hello_interval);
            self.next_hello = quantize(now + next);
            self.expire(now);
            out.push(self.build_hello(now).encode());
            self.counters.hellos_sent += 1;
        }
        if due(self.next_tc, now) {
            let next = self.jittered(self.cfg.tc_interval);
            self.next_tc = quantize(now + next);
            self.expire(now);
            if let Some(p) = self.build_tc(now) {
                out.push(p.encode());
                self.counters.tc_sent += 1;
            }
        }
        out
    }

    fn hysteresis(&mut self, n: NodeId, outcome: Outcome) {
        if let Some(l) = self.links.get_mut(&n) {
            let (q, p) = self.hyst.update(l.link_quality, l.pending, outcome);
            l.link_quality = q;
            l.pending = p;
        }
    }

    /// Lost outcomes for neighbours silent longer than `silence_factor`
    /// HELLO intervals: one per elapsed interval.
    pub fn detect_silence(&mut self, now: Time) -> usize {
        let mut lost = Vec::new();
        for l in self.links.values_mut() {
            if l.htime <= 0.0 {
                continue;
            }
            let elapsed = now - l.last_rx;
            if elapsed > self.cfg.silence_factor * l.htime {
                let expected = (elapsed / l.htime + 1e-9).floor() as u32;
                if expected > l.silence_losses {
                    lost.push((l.neighbor_iface_addr, expected - l.silence_losses));
                    l.silence_losses = expected;
                }
            }
        }
        let mut total = 0;
        for (n, k) in lost {
            for _ in 0..k {
                self.hysteresis(n, Outcome::Lost);
            }
            total += k as usize;
        }
        self.counters.losses_detected += total as u64;
        total
    }

    /// Updates sequence tracking for a packet from `sender` and returns the
    /// number of Lost outcomes the gap implies.
    fn sequence_losses(&mut self, sender: NodeId, seq: u16, now: Time) -> u32 {
        let l = self.links.get_mut(&sender).expect("link tuple exists");
        let gap = match l.last_seq {
            Some(prev) => seq.wrapping_sub(prev).wrapping_sub(1) as u32,
            None => 0,
        };
        // ignore reordering / restarts
        let gap = if gap > u16::MAX as u32 / 2 { 0 } else { gap };
        let lost = gap.saturating_sub(l.silence_losses);
        l.last_seq = Some(seq);
        l.last_rx = now;
        l.silence_losses = 0;
        lost
    }

    fn ensure_link(&mut self, n: NodeId, now: Time) {
        let me = self.me;
        self.links.entry(n).or_insert_with(|| LinkTuple {
            local_iface_addr: me,
            neighbor_iface_addr: n,
            sym_time: now - 1.0,
            asym_time: now - 1.0,
            time: now,
            link_quality: 0.0,
            pending: true,
            last_seq: None,
            last_rx: now,
            htime: 0.0,
            silence_losses: 0,
        });
    }

    /// Processes an OLSR packet received from neighbour `sender`.
    pub fn receive(&mut self, bus: &mut Bus, sender: NodeId, bytes: &[u8], now: Time) {
        let pkt = match OlsrPacket::decode(bytes) {
            Ok(p) => p,
            Err(_) => {
                self.counters.malformed += 1;
                return;
            }
        };
        if sender == self.me {
            return;
        }
        self.ensure_link(sender, now);
        let lost = self.sequence_losses(sender, pkt.packet_seq, now);
        self.counters.losses_detected += lost as u64;
        for _ in 0..lost {
            self.hysteresis(sender, Outcome::Lost);
        }
        match pkt.message {
            Message::Hello(h) => self.on_hello(bus, sender, &h, now),
            Message::Tc(tc) => self.on_tc(bus, sender, tc, now),
        }
    }

    pub fn on_hello(&mut self, bus: &mut Bus, sender: NodeId, h: &HelloMessage, now: Time) {
        self.counters.hellos_received += 1;
        self.ensure_link(sender, now);
        let me = self.me;
        let listed = h.entries.iter().find(|(a, _, _)| *a == me);
        {
            let margin = self.cfg.neighb_hold_margin;
            let l = self.links.get_mut(&sender).expect("ensured");
            l.asym_time = now + h.vtime;
            match listed {
                Some((_, LinkCode::Lost, _)) => l.sym_time = now - 1.0,
                Some(_) => l.sym_time = now + h.vtime,
                None => {}
            }
            l.time = l.time.max(l.asym_time + margin).max(l.sym_time);
            l.htime = h.htime;
            l.last_rx = now;
        }
        self.hysteresis(sender, Outcome::Received);

        let sym = self.links[&sender].state(now) == LinkState::Symmetric;
        if sym {
            self.two_hop.retain(|(n, _), _| *n != sender);
            for (a, _, nc) in &h.entries {
                if *a != me && matches!(nc, NeighCode::Sym | NeighCode::Mpr) {
                    self.two_hop.insert((sender, *a), now + h.vtime);
                }
            }
            if matches!(listed, Some((_, _, NeighCode::Mpr))) {
                self.mpr_selectors.insert(sender, now + h.vtime);
            } else {
                self.mpr_selectors.remove(&sender);
            }
        }
        let record = Value::record([
            ("last_rx", Value::Number(now)),
            ("htime", Value::Number(h.htime)),
            ("vtime", Value::Number(h.vtime)),
        ]);
        let _ = bus.export_peer_state(
            LayerId::Olsr,
            ids::COMMON_SIGNALIZATION,
            sender,
            record,
            Some(h.vtime),
            now,
        );
        self.refresh(bus, now);
    }

    fn on_tc(&mut self, bus: &mut Bus, sender: NodeId, tc: TcMessage, now: Time) {
        if !self.links.get(&sender).is_some_and(|l| l.usable(now)) || tc.originator == self.me {
            return;
        }
        let key = (tc.originator, tc.msg_seq);
        if self.duplicates.get(&key).is_some_and(|t| *t >= now) {
            return;
        }
        self.duplicates.insert(key, now + self.cfg.tc_vtime);
        self.counters.tc_received += 1;
        let newer_known = self
            .topology
            .iter()
            .any(|((_, last), (_, ansn))| *last == tc.originator && seq_newer(*ansn, tc.ansn));
        if !newer_known {
            self.topology.retain(|(_, last), (_, ansn)| {
                *last != tc.originator || !seq_newer(tc.ansn, *ansn)
            });
            for d in &tc.advertised {
                self.topology
                    .insert((*d, tc.originator), (now + tc.vtime, tc.ansn));
            }
        }
        if self.mpr_selectors.contains_key(&sender) && tc.ttl > 1 {
            self.forward_queue.push_back(tc);
        }
        self.refresh(bus, now);
    }

    /// Removes tuples past their expiry time.
    pub fn expire(&mut self, now: Time) -> usize {
        let before =
            self.links.len() + self.two_hop.len() + self.mpr_selectors.len() + self.topology.len();
        self.links.retain(|_, l| l.time >= now);
        let links = &self.links;
        self.two_hop
            .retain(|(n, _), t| *t >= now && links.get(n).is_some_and(|l| l.usable(now)));
        self.mpr_selectors.retain(|_, t| *t >= now);
        self.topology.retain(|_, (t, _)| *t >= now);
        self.duplicates.retain(|_, t| *t >= now);
        before
            - (self.links.len()
                + self.two_hop.len()
                + self.mpr_selectors.len()
                + self.topology.len())
    }

    /// Expiry pass, MPR and route recomputation, CLAA exports and the
    /// unavailable-link notification.
    pub fn refresh(&mut self, bus: &mut Bus, now: Time) {
        self.expire(now);
        let neighbors = self.symmetric_neighbors(now);
        let two_hop = self.two_hop_pairs();
        let mprs = select_mprs(self.me, &neighbors, &two_hop);
        if mprs != self.mprs {
            self.mprs = mprs;
            self.mpr_series.push((now, self.mprs.len()));
        }
        let routes = compute_routes(self.me, &neighbors, &two_hop, &self.topology_pairs());
        if routes != self.routes {
            self.counters.route_changes += 1;
            let lost: Vec<NodeId> = self
                .routes
                .keys()
                .filter(|d| !routes.contains_key(d) && self.pending.contains(d))
                .copied()
                .collect();
            self.routes = routes;
            for d in lost {
                self.counters.unavailable_link_events += 1;
                let payload = Value::record([("destination", Value::Node(d))]);
                let _ = bus.publish_event(LayerId::Olsr, ids::UNAVAILABLE_LINK, payload, now);
            }
        }
        self.export(bus, now);
    }

    fn export(&self, bus: &mut Bus, now: Time) {
        let routes = self
            .routes
            .iter()
            .map(|(d, r)| {
                Value::record([
                    ("dest", Value::Node(*d)),
                    ("next_hop", Value::Node(r.next_hop)),
                    ("hops", Value::Number(r.hops as f64)),
                ])
            })
            .collect();
        let symmetric = self
            .symmetric_neighbors(now)
            .into_iter()
            .map(Value::Node)
            .collect();
        let snapshot = Value::record([
            ("routes", Value::List(routes)),
            ("symmetric", Value::List(symmetric)),
        ]);
        let _ = bus.export_state(LayerId::Olsr, ids::SUPERSTRUCTURES, snapshot, None, now);
        for l in self.links.values() {
            let v = Value::record([
                ("quality", Value::Number(l.link_quality)),
                ("pending", Value::Bool(l.pending)),
            ]);
            let _ = bus.export_peer_state(
                LayerId::Olsr,
                ids::WIRELESS_LINK_STATUS,
                l.neighbor_iface_addr,
                v,
                None,
                now,
            );
        }
    }

    /// Reacts to a bus delivery addressed to OLSR.
    pub fn on_claa(&mut self, bus: &mut Bus, ev: &EventRecord, now: Time) {
        match ev.claa_id.as_str() {
            ids::RETRANSMISSION_AVOIDANCE if self.flags.is_on(ids::RETRANSMISSION_AVOIDANCE) => {
                self.next_hello = quantize(self.next_hello + self.cfg.hello_interval);
                self.next_tc = quantize(self.next_tc + self.cfg.tc_interval);
                self.counters.deferred_emissions += 1;
            }
            ids::ACKNOWLEDGEMENT if ev.stage == Some(2) => {
                let one_hop = ev
                    .payload
                    .field_node("dst")
                    .is_some_and(|d| self.links.get(&d).is_some_and(|l| l.usable(now)));
                let mut payload = ev.payload.clone();
                if let Value::Record(m) = &mut payload {
                    m.insert("one_hop".into(), Value::Bool(one_hop));
                }
                let _ = bus.publish_event(LayerId::Olsr, ids::ACKNOWLEDGEMENT, payload, now);
            }
            _ => {}
        }
    }

    /// Table snapshot for inspection.
    pub fn tables_json(&self, now: Time) -> serde_json::Value {
        serde_json::json!({
            "node": self.me,
            "time": now,
            "links": self.links.values().map(|l| serde_json::json!({
                "neighbor": l.neighbor_iface_addr,
                "state": l.state(now),
                "sym_time": l.sym_time,
                "asym_time": l.asym_time,
                "time": l.time,
                "quality": l.link_quality,
                "pending": l.pending,
            })).collect::<Vec<_>>(),
            "two_hop": self.two_hop.iter().map(|((n, t), exp)| serde_json::json!({
                "neighbor": n, "two_hop": t, "expires": exp,
            })).collect::<Vec<_>>(),
            "mprs": self.mprs,
            "mpr_selectors": self.mpr_selectors.iter().map(|(s, t)| serde_json::json!({
                "selector": s, "ms_time": t,
            })).collect::<Vec<_>>(),
            "topology": self.topology.iter().map(|((d, l), (t, ansn))| serde_json::json!({
                "dest": d, "last_hop": l, "t_time": t, "ansn": ansn,
            })).collect::<Vec<_>>(),
            "routes": self.routes.iter().map(|(d, r)| serde_json::json!({
                "dest": d, "next_hop": r.next_hop, "hops": r.hops,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Wrap-around comparison of 16-bit sequence numbers.
fn seq_newer(a: u16, b: u16) -> bool {
    a != b && a.wrapping_sub(b) < 0x8000
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::bus::StateRead;
    use crate::registry::load_builtin_matrix;

    const A: NodeId = NodeId(1);
    const B: NodeId = NodeId(2);
    const C: NodeId = NodeId(3);

    fn bus(n: NodeId) -> Bus {
        Bus::new(n, Arc::new(load_builtin_matrix()))
    }

    fn olsr(n: NodeId) -> Olsr {
        Olsr::new(n, OlsrConfig::default(), ClaaFlags::all_off(), 7)
    }

    fn hello(from: NodeId, entries: Vec<(NodeId, LinkCode, NeighCode)>) -> HelloMessage {
        HelloMessage {
            originator: from,
            htime: 2.0,
            vtime: 6.0,
            entries,
        }
    }

    #[test]
    fn hysteresis_steps() {
        let h = Hysteresis {
            scaling: 0.5,
            high: 0.8,
            low: 0.3,
        };
        assert_eq!(h.update(0.0, true, Outcome::Received), (0.5, true));
        assert_eq!(h.update(0.5, true, Outcome::Lost), (0.25, true));
        assert_eq!(h.update(0.5, false, Outcome::Lost), (0.25, true));
        assert_eq!(h.update(0.5, false, Outcome::Received), (0.75, false));
    }

    #[test]
    fn isolated_hello_is_empty_and_seq_increments() {
        let mut o = olsr(A);
        let h1 = o.build_hello(0.0);
        let h2 = o.build_hello(2.0);
        match &h1.message {
            Message::Hello(h) => assert!(h.entries.is_empty()),
            _ => panic!(),
        }
        assert_eq!(h2.packet_seq, h1.packet_seq + 1);
    }

    #[test]
    fn packet_round_trip() {
        let p = OlsrPacket {
            packet_seq: 9,
            message: Message::Hello(hello(B, vec![(A, LinkCode::Sym, NeighCode::Mpr)])),
        };
        assert_eq!(OlsrPacket::decode(&p.encode()).unwrap(), p);
        let t = OlsrPacket {
            packet_seq: 10,
            message: Message::Tc(TcMessage {
                originator: B,
                msg_seq: 3,
                ttl: 255,
                ansn: 4,
                vtime: 15.0,
                advertised: vec![A, C],
            }),
        };
        assert_eq!(OlsrPacket::decode(&t.encode()).unwrap(), t);
        assert!(OlsrPacket::decode(&[0, 1, 9]).is_err());
    }

    #[test]
    fn link_sensing_asym_then_sym() {
        let mut b = bus(A);
        let mut o = olsr(A);
        o.on_hello(&mut b, B, &hello(B, vec![]), 1.0);
        assert_eq!(o.link(B).unwrap().state(1.0), LinkState::Asymmetric);
        o.on_hello(
            &mut b,
            B,
            &hello(B, vec![(A, LinkCode::Asym, NeighCode::Not)]),
            3.0,
        );
        let l = o.link(B).unwrap();
        assert_eq!(l.state(3.0), LinkState::Symmetric);
        assert_eq!(l.sym_time, 9.0);
        assert!(l.time >= l.sym_time.max(l.asym_time));
        // nothing more heard: lost once both timers lapse
        assert_eq!(l.state(9.5), LinkState::Lost);
    }

    #[test]
    fn two_hop_and_mpr_selection() {
        let mut b = bus(A);
        let mut o = olsr(A);
        for t in [1.0, 3.0, 5.0, 7.0] {
            o.on_hello(
                &mut b,
                B,
                &hello(
                    B,
                    vec![
                        (A, LinkCode::Sym, NeighCode::Sym),
                        (C, LinkCode::Sym, NeighCode::Sym),
                    ],
                ),
                t,
            );
        }
        assert_eq!(o.two_hop.get(&(B, C)), Some(&13.0));
        assert_eq!(o.mprs(), &BTreeSet::from([B]));
        assert_eq!(
            o.routes()[&C],
            Route {
                next_hop: B,
                hops: 2
            }
        );
        let h = o.build_hello(7.5);
        match h.message {
            Message::Hello(h) => assert_eq!(h.entries, vec![(B, LinkCode::Sym, NeighCode::Mpr)]),
            _ => panic!(),
        }
    }

    #[test]
    fn sequence_gap_losses() {
        let mut b = bus(A);
        let mut o = olsr(A);
        let pkt = |seq| {
            OlsrPacket {
                packet_seq: seq,
                message: Message::Hello(hello(B, vec![])),
            }
            .encode()
        };
        o.receive(&mut b, B, &pkt(7), 1.0);
        assert_eq!(o.counters.losses_detected, 0);
        o.receive(&mut b, B, &pkt(8), 3.0);
        assert_eq!(o.counters.losses_detected, 0);
        o.receive(&mut b, B, &pkt(11), 5.0);
        assert_eq!(o.counters.losses_detected, 2);
    }

    #[test]
    fn silence_counts_elapsed_intervals() {
        let mut b = bus(A);
        let mut o = olsr(A);
        o.on_hello(&mut b, B, &hello(B, vec![]), 10.0);
        assert_eq!(o.detect_silence(12.9), 0);
        assert_eq!(o.detect_silence(15.0), 2);
        assert_eq!(o.detect_silence(15.5), 0);
        assert_eq!(o.detect_silence(16.0), 1);
    }

    #[test]
    fn silence_losses_not_double_counted_by_gap() {
        let mut b = bus(A);
        let mut o = olsr(A);
        let pkt = |seq| {
            OlsrPacket {
                packet_seq: seq,
                message: Message::Hello(hello(B, vec![])),
            }
            .encode()
        };
        o.receive(&mut b, B, &pkt(1), 0.0);
        o.detect_silence(5.0);
        assert_eq!(o.counters.losses_detected, 2);
        o.receive(&mut b, B, &pkt(4), 6.0);
        assert_eq!(o.counters.losses_detected, 2);
    }

    #[test]
    fn common_signalization_export_window() {
        let mut b = bus(A);
        let mut o = olsr(A);
        o.on_hello(&mut b, B, &hello(B, vec![]), 10.0);
        let r = b.read_peer_state(LayerId::Sctp, ids::COMMON_SIGNALIZATION, B, 16.0);
        assert!(matches!(r, Ok(StateRead::Fresh(_))));
        let r = b.read_peer_state(LayerId::Sctp, ids::COMMON_SIGNALIZATION, B, 16.01);
        assert!(matches!(r, Ok(StateRead::Expired)));
    }

    #[test]
    fn route_loss_with_pending_traffic_notifies() {
        let mut b = bus(A);
        b.subscribe_mailbox(LayerId::Sctp, ids::UNAVAILABLE_LINK)
            .unwrap();
        let mut o = olsr(A);
        let hb = hello(
            B,
            vec![
                (A, LinkCode::Sym, NeighCode::Sym),
                (C, LinkCode::Sym, NeighCode::Sym),
            ],
        );
        for t in [1.0, 3.0, 5.0] {
            o.on_hello(&mut b, B, &hb, t);
        }
        assert!(o.routes().contains_key(&C));
        o.set_pending_destinations(BTreeSet::from([C]));
        o.on_hello(
            &mut b,
            B,
            &hello(B, vec![(A, LinkCode::Sym, NeighCode::Sym)]),
            7.0,
        );
        assert!(!o.routes().contains_key(&C));
        let (_, ev) = b.take_mail().unwrap();
        assert_eq!(ev.payload.field_node("destination"), Some(C));
        assert_eq!(o.counters.unavailable_link_events, 1);
    }

    #[test]
    fn route_loss_without_pending_is_silent() {
        let mut b = bus(A);
        b.subscribe_mailbox(LayerId::Sctp, ids::UNAVAILABLE_LINK)
            .unwrap();
        let mut o = olsr(A);
        let hb = hello(
            B,
            vec![
                (A, LinkCode::Sym, NeighCode::Sym),
                (C, LinkCode::Sym, NeighCode::Sym),
            ],
        );
        for t in [1.0, 3.0, 5.0] {
            o.on_hello(&mut b, B, &hb, t);
        }
        o.refresh(&mut b, 20.0);
        assert!(o.routes().is_empty());
        assert!(b.take_mail().is_none());
        assert_eq!(o.expire(20.0), 0);
    }

    #[test]
    fn tc_replaces_older_ansn() {
        let mut b = bus(A);
        let mut o = olsr(A);
        let hb = hello(B, vec![(A, LinkCode::Sym, NeighCode::Sym)]);
        for t in [1.0, 3.0, 5.0] {
            o.on_hello(&mut b, B, &hb, t);
        }
        let tc = |seq, ansn, adv: Vec<NodeId>| TcMessage {
            originator: B,
            msg_seq: seq,
            ttl: 255,
            ansn,
            vtime: 15.0,
            advertised: adv,
        };
        o.on_tc(&mut b, B, tc(0, 1, vec![A, C]), 5.5);
        assert_eq!(o.routes()[&C].hops, 2);
        o.on_tc(&mut b, B, tc(1, 0, vec![]), 5.6);
        assert!(o.routes().contains_key(&C), "stale ANSN ignored");
        o.on_tc(&mut b, B, tc(2, 2, vec![A]), 5.7);
        assert!(!o.routes().contains_key(&C));
    }

    #[test]
    fn mpr_examples() {
        let n: BTreeSet<_> = [B].into();
        let two: BTreeSet<_> = [(B, C)].into();
        assert_eq!(select_mprs(A, &n, &two), BTreeSet::from([B]));
        assert!(select_mprs(A, &n, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn route_examples() {
        let n: BTreeSet<_> = [B].into();
        let two: BTreeSet<_> = [(B, C)].into();
        let r = compute_routes(A, &n, &two, &BTreeSet::new());
        assert_eq!(
            r[&C],
            Route {
                next_hop: B,
                hops: 2
            }
        );
        assert!(!r.contains_key(&NodeId(4)));
    }

    #[test]
    fn ack_stage_two_is_enriched() {
        let mut b = bus(A);
        b.subscribe_mailbox(LayerId::Sctp, ids::ACKNOWLEDGEMENT)
            .unwrap();
        let mut o = olsr(A);
        let hb = hello(B, vec![(A, LinkCode::Sym, NeighCode::Sym)]);
        for t in [1.0, 3.0, 5.0] {
            o.on_hello(&mut b, B, &hb, t);
        }
        let p = Value::record([("dst", Value::Node(B))]);
        b.publish_event(LayerId::Physical, ids::ACKNOWLEDGEMENT, p.clone(), 5.0)
            .unwrap();
        b.publish_event(LayerId::Link, ids::ACKNOWLEDGEMENT, p, 5.0)
            .unwrap();
        let ev = EventRecord {
            claa_id: ids::ACKNOWLEDGEMENT.into(),
            payload: Value::record([("dst", Value::Node(B))]),
            emitter: LayerId::Link,
            emit_time: 5.0,
            stage: Some(2),
        };
        o.on_claa(&mut b, &ev, 5.0);
        let (_, got) = b.take_mail().unwrap();
        assert_eq!(got.stage, Some(3));
        assert_eq!(got.payload.field_bool("one_hop"), Some(true));
    }
}
