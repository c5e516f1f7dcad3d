//! Discrete-event engine: builds one protocol stack per node around its own
//! environment bus, executes a scenario in (µs tick, insertion) order and
//! collects the metrics report.

mod metrics;
mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;

use crate::bus::{Bus, EventRecord, TraceRecord, Value};
use crate::ip::{Datagram, IpCounters, Proto, BROADCAST};
use crate::link::{ChannelState, Delivery, Frame, LinkLayer, QueuedFrame};
use crate::olsr::Olsr;
use crate::registry::{ids, validate, ClaaFlags, InteractionMatrix, LayerId};
use crate::sctp::{Endpoint, OutKind, Outbound, SctpTraceRecord};
use crate::types::{due, quantize, to_ticks, NodeId, Time, TIME_QUANTUM};

pub use metrics::{Comparison, MetricsReport, CSV_HEADER_COMMENT, GLOBAL};
pub use scenario::{
    link_key, Action, Flow, LinkSpec, Params, Scenario, ScenarioError, ScheduledAction,
    APP_HEADER_LEN,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("interaction matrix has {0} violation(s)")]
    InvalidMatrix(usize),
    #[error("compare needs at least two flag sets")]
    TooFewLegs,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Record every bus export/publish/invoke.
    pub trace_claa: bool,
    /// Record SCTP emissions and path counter changes.
    pub trace_sctp: bool,
    /// Drop every bus interaction, as if the call sites were removed.
    pub mute_bus: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub claa_trace: Vec<TraceRecord>,
    pub sctp_trace: Vec<(NodeId, SctpTraceRecord)>,
    /// (node, peer, time) of every Node-unavailable detection.
    pub detections: Vec<(NodeId, NodeId, Time)>,
    /// Times of scripted failures (link or node kills).
    pub failures: Vec<Time>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AppCounters {
    pub messages_sent: u64,
    pub send_failures: u64,
    pub messages_received: u64,
    pub bytes_received: u64,
    pub corrupted_deliveries: u64,
    pub node_unavailable_notices: u64,
    pub unavailable_link_notices: u64,
    pub energy_notices: u64,
}

#[derive(Debug, Clone)]
enum Event {
    Wake(usize),
    PhyExport(usize),
    TxDone(usize),
    Arrival {
        node: usize,
        from: NodeId,
        bytes: Vec<u8>,
        frame: u64,
    },
    LinkAck {
        node: usize,
        peer: NodeId,
        frame: u64,
    },
    AckTimeout {
        node: usize,
        frame: u64,
    },
    EcnEcho {
        node: usize,
        peer: NodeId,
    },
    Traffic(usize),
    Action(Action),
}

/// The stack of one simulated node.
pub struct NodeStack {
    pub id: NodeId,
    pub bus: Bus,
    pub sctp: Endpoint,
    pub olsr: Olsr,
    pub link: LinkLayer,
    pub ip: IpCounters,
    pub app: AppCounters,
    pub alive: bool,
    wake: Option<i64>,
    flags: ClaaFlags,
}

pub struct Simulation {
    scenario: Scenario,
    nodes: Vec<NodeStack>,
    index: BTreeMap<NodeId, usize>,
    channels: BTreeMap<(NodeId, NodeId), ChannelState>,
    queue: BTreeMap<(i64, u64), Event>,
    seq: u64,
    now: Time,
    next_frame: u64,
    flow_seq: Vec<u32>,
    failures: Vec<Time>,
}

fn sub_seed(seed: u64, salt: u64, node: NodeId) -> u64 {
    seed ^ salt
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((node.0 as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Deterministic application payload for message `seq` of flow `flow`.
pub fn app_payload(flow: usize, seq: u32, size: usize) -> Vec<u8> {
    let mut p = Vec::with_capacity(size);
    p.extend_from_slice(&(flow as u32).to_be_bytes());
    p.extend_from_slice(&seq.to_be_bytes());
    for i in APP_HEADER_LEN..size {
        p.push(
            (flow as u32)
                .wrapping_mul(31)
                .wrapping_add(seq.wrapping_mul(7))
                .wrapping_add(i as u32) as u8,
        );
    }
    p
}

fn app_payload_intact(p: &[u8]) -> bool {
    if p.len() < APP_HEADER_LEN {
        return false;
    }
    let flow = u32::from_be_bytes(p[0..4].try_into().unwrap()) as usize;
    let seq = u32::from_be_bytes(p[4..8].try_into().unwrap());
    app_payload(flow, seq, p.len()) == p
}

impl Simulation {
    pub fn new(
        scenario: Scenario,
        matrix: Arc<InteractionMatrix>,
        opts: RunOptions,
    ) -> Result<Self, SimError> {
        let violations = validate(&matrix);
        if !violations.is_empty() {
            return Err(SimError::InvalidMatrix(violations.len()));
        }
        let flags = scenario.validate(&matrix)?;
        let params = &scenario.params;
        let mut channels = BTreeMap::new();
        let mut neighbors: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for l in &scenario.links {
            channels.insert(link_key(l.a, l.b), l.channel.clone());
            neighbors.entry(l.a).or_default().insert(l.b);
            neighbors.entry(l.b).or_default().insert(l.a);
        }
        let mut nodes = Vec::new();
        let mut index = BTreeMap::new();
        for &id in &scenario.nodes {
            let mut bus = Bus::new(id, Arc::clone(&matrix));
            if opts.trace_claa {
                bus.enable_trace();
            }
            bus.set_muted(opts.mute_bus);
            let mut sctp_cfg = params.sctp.clone();
            sctp_cfg.trace |= opts.trace_sctp;
            let sctp = Endpoint::new(id, sctp_cfg, flags.clone());
            let olsr = Olsr::new(
                id,
                params.olsr.clone(),
                flags.clone(),
                sub_seed(scenario.seed, 1, id),
            );
            let link = LinkLayer::new(
                id,
                params.link.clone(),
                sub_seed(scenario.seed, 2, id),
                neighbors.get(&id).cloned().unwrap_or_default(),
            );
            Endpoint::subscribe(&mut bus).expect("matrix authorizes SCTP subscriptions");
            Olsr::subscribe(&mut bus).expect("matrix authorizes OLSR subscriptions");
            LinkLayer::subscribe(&mut bus).expect("matrix authorizes link subscriptions");
            for id in APP_EVENTS {
                if bus.matrix().contains(id) {
                    bus.subscribe_mailbox(LayerId::Application, id)
                        .expect("matrix authorizes application subscriptions");
                }
            }
            link.register_services(&mut bus)
                .expect("matrix authorizes link services");
            index.insert(id, nodes.len());
            nodes.push(NodeStack {
                id,
                bus,
                sctp,
                olsr,
                link,
                ip: IpCounters::default(),
                app: AppCounters::default(),
                alive: true,
                wake: None,
                flags: flags.clone(),
            });
        }
        let mut sim = Simulation {
            flow_seq: vec![0; scenario.traffic.len()],
            scenario,
            nodes,
            index,
            channels,
            queue: BTreeMap::new(),
            seq: 0,
            now: 0.0,
            next_frame: 0,
            failures: Vec::new(),
        };
        sim.bootstrap();
        Ok(sim)
    }

    fn bootstrap(&mut self) {
        for f in self.scenario.traffic.clone() {
            let (s, d) = (self.index[&f.src], self.index[&f.dst]);
            self.nodes[s].sctp.associate(&[f.dst], 0.0);
            self.nodes[d].sctp.associate(&[f.src], 0.0);
        }
        for i in 0..self.nodes.len() {
            self.schedule(0.0, Event::PhyExport(i));
            self.reschedule_wake(i);
        }
        let starts: Vec<Time> = self.scenario.traffic.iter().map(|f| f.start).collect();
        for (i, t) in starts.into_iter().enumerate() {
            self.queue_at(t, Event::Traffic(i));
        }
        for a in self.scenario.schedule.clone() {
            self.queue_at(a.time, Event::Action(a.action));
        }
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeStack> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeStack> {
        self.index.get(&id).map(|&i| &mut self.nodes[i])
    }

    pub fn nodes(&self) -> &[NodeStack] {
        &self.nodes
    }

    fn queue_at(&mut self, t: Time, ev: Event) {
        let key = (to_ticks(t), self.seq);
        self.seq += 1;
        self.queue.insert(key, ev);
    }

    /// Schedules no earlier than the current time.
    fn schedule(&mut self, t: Time, ev: Event) {
        let t = t.max(self.now);
        self.queue_at(t, ev);
    }

    fn channel(&self, a: NodeId, b: NodeId) -> Option<&ChannelState> {
        self.channels.get(&link_key(a, b))
    }

    fn neighbor_channels(&self, n: NodeId) -> Vec<(NodeId, ChannelState)> {
        self.channels
            .iter()
            .filter_map(|(&(a, b), c)| {
                if a == n {
                    Some((b, c.clone()))
                } else if b == n {
                    Some((a, c.clone()))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Runs events up to and including time `until`.
    pub fn run_until(&mut self, until: Time) {
        let limit = to_ticks(until.min(self.scenario.duration));
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > limit {
                break;
            }
            let ((tick, _), ev) = entry.remove_entry();
            let t = tick as f64 * TIME_QUANTUM;
            debug_assert!(t >= self.now, "event causality");
            self.now = t;
            self.dispatch(ev);
        }
        self.now = self.now.max(until.min(self.scenario.duration));
    }

    pub fn run(mut self) -> RunOutput {
        self.run_until(self.scenario.duration);
        self.finish()
    }

    fn dispatch(&mut self, ev: Event) {
        let now = self.now;
        match ev {
            Event::Action(a) => self.apply(a),
            Event::Traffic(f) => self.traffic(f),
            Event::EcnEcho { node, peer } => {
                if self.nodes[node].alive {
                    let n = &mut self.nodes[node];
                    n.ip.ecn_notices += 1;
                    let payload = Value::record([("peer", Value::Node(peer))]);
                    let _ =
                        n.bus
                            .publish_event(LayerId::Ip, ids::EXPLICIT_CONGESTION, payload, now);
                    self.settle(node);
                }
            }
            Event::Wake(i) => self.wake(i),
            Event::PhyExport(i) => {
                if self.nodes[i].alive {
                    let chans = self.neighbor_channels(self.nodes[i].id);
                    let n = &mut self.nodes[i];
                    n.link.export(&mut n.bus, &chans, now);
                    let next = now + n.link.config().export_interval;
                    self.schedule(next, Event::PhyExport(i));
                    self.settle(i);
                }
            }
            Event::TxDone(i) => self.tx_done(i),
            Event::Arrival {
                node,
                from,
                bytes,
                frame,
            } => self.arrival(node, from, bytes, frame),
            Event::LinkAck { node, peer, frame } => {
                let up = self
                    .channel(self.nodes[node].id, peer)
                    .is_some_and(|c| c.up);
                if self.nodes[node].alive && up {
                    let n = &mut self.nodes[node];
                    n.link.on_ack(&mut n.bus, frame, now);
                    self.settle(node);
                }
            }
            Event::AckTimeout { node, frame } => {
                if self.nodes[node].alive && self.nodes[node].link.on_ack_timeout(frame) {
                    self.start_tx(node);
                }
            }
        }
    }

    fn apply(&mut self, a: Action) {
        let now = self.now;
        if a.is_failure() {
            self.failures.push(now);
        }
        match a {
            Action::KillLink { a, b } => self.set_channel(a, b, |c| c.up = false),
            Action::RestoreLink { a, b } => self.set_channel(a, b, |c| c.up = true),
            Action::SetSnr { a, b, snr_db } => self.set_channel(a, b, |c| c.snr_db = snr_db),
            Action::SetLoss { a, b, loss_prob } => {
                self.set_channel(a, b, |c| c.loss_prob = loss_prob)
            }
            Action::KillNode { node } => {
                let i = self.index[&node];
                self.nodes[i].alive = false;
            }
            Action::InjectJitter { node, duration } => {
                let i = self.index[&node];
                if self.nodes[i].alive {
                    let n = &mut self.nodes[i];
                    n.link.inject_jitter(&mut n.bus, now, duration);
                    self.settle(i);
                }
            }
        }
    }

    fn set_channel(&mut self, a: NodeId, b: NodeId, f: impl FnOnce(&mut ChannelState)) {
        if let Some(c) = self.channels.get_mut(&link_key(a, b)) {
            f(c);
        }
    }

    fn traffic(&mut self, f: usize) {
        let now = self.now;
        let flow = self.scenario.traffic[f].clone();
        let i = self.index[&flow.src];
        if !self.nodes[i].alive {
            return;
        }
        let seq = self.flow_seq[f];
        self.flow_seq[f] += 1;
        let payload = app_payload(f, seq, flow.size);
        let n = &mut self.nodes[i];
        n.app.messages_sent += 1;
        match n.sctp.send(&mut n.bus, flow.dst, 0, payload, now) {
            Ok(out) => self.emit(i, out),
            Err(_) => self.nodes[i].app.send_failures += 1,
        }
        let next = quantize(now + 1.0 / flow.rate);
        if flow.stop.is_none_or(|s| next < s) {
            self.schedule(next, Event::Traffic(f));
        }
        self.settle(i);
    }

    fn wake(&mut self, i: usize) {
        let now = self.now;
        let tick = to_ticks(now);
        if !self.nodes[i].alive || self.nodes[i].wake != Some(tick) {
            return;
        }
        self.nodes[i].wake = None;
        let n = &mut self.nodes[i];
        n.olsr
            .set_pending_destinations(n.sctp.pending_destinations());
        let hellos = if due(n.olsr.poll_timeout(), now) {
            n.olsr.handle_timeout(&mut n.bus, now)
        } else {
            Vec::new()
        };
        for p in hellos {
            self.ip_send(i, BROADCAST, Proto::Olsr, p);
        }
        let n = &mut self.nodes[i];
        if n.sctp.poll_timeout().is_some_and(|t| due(t, now)) {
            let out = n.sctp.handle_timeout(&mut n.bus, now);
            self.emit(i, out);
        }
        self.settle(i);
    }

    /// Drains the node's bus mailbox, routes each delivery to its layer and
    /// re-arms the node's wake-up.
    fn settle(&mut self, i: usize) {
        let now = self.now;
        loop {
            let n = &mut self.nodes[i];
            let Some((layer, ev)) = n.bus.take_mail() else {
                break;
            };
            match layer {
                LayerId::Sctp => {
                    let out = n.sctp.on_claa(&mut n.bus, &ev, now);
                    self.emit(i, out);
                }
                LayerId::Olsr => n.olsr.on_claa(&mut n.bus, &ev, now),
                LayerId::Link => n.link.on_claa(&mut n.bus, &ev, now),
                LayerId::Application => n.app_event(&ev),
                LayerId::Ip | LayerId::Physical => {}
            }
        }
        let n = &mut self.nodes[i];
        n.olsr
            .set_pending_destinations(n.sctp.pending_destinations());
        self.reschedule_wake(i);
    }

    fn reschedule_wake(&mut self, i: usize) {
        let n = &self.nodes[i];
        if !n.alive {
            return;
        }
        let mut t = n.olsr.poll_timeout();
        if let Some(s) = n.sctp.poll_timeout() {
            t = t.min(s);
        }
        let tick = to_ticks(t.max(self.now));
        if n.wake.is_some_and(|w| w <= tick) {
            return;
        }
        self.nodes[i].wake = Some(tick);
        self.queue_at(tick as f64 * TIME_QUANTUM, Event::Wake(i));
    }

    fn emit(&mut self, i: usize, out: Vec<Outbound>) {
        for o in out {
            self.ip_send(i, o.dst, Proto::Sctp, o.bytes);
        }
    }

    fn ip_send(&mut self, i: usize, dst: NodeId, proto: Proto, payload: Vec<u8>) {
        let src = self.nodes[i].id;
        let dg = Datagram::new(src, dst, proto, payload);
        self.ip_output(i, dg);
    }

    /// Routes a datagram out of node `i`.
    fn ip_output(&mut self, i: usize, dg: Datagram) {
        let now = self.now;
        let n = &mut self.nodes[i];
        let next_hop = if dg.dst == BROADCAST {
            None
        } else {
            match n.olsr.next_hop(dg.dst) {
                Some(h) => Some(h),
                None => {
                    n.ip.no_route_drops += 1;
                    return;
                }
            }
        };
        let id = self.next_frame;
        self.next_frame += 1;
        let bytes = Frame {
            src: n.id,
            dst: next_hop,
            datagram: dg.encode(),
        }
        .encode();
        let qf = QueuedFrame {
            id,
            dst: next_hop,
            bytes,
            retries: 0,
            enqueued: now,
        };
        n.link.enqueue(&mut n.bus, qf, now);
        self.start_tx(i);
    }

    fn start_tx(&mut self, i: usize) {
        let now = self.now;
        let n = &mut self.nodes[i];
        if let Some(end) = n.link.try_start(&mut n.bus, now) {
            self.queue_at(end, Event::TxDone(i));
        }
    }

    fn tx_done(&mut self, i: usize) {
        let now = self.now;
        if !self.nodes[i].alive {
            return;
        }
        let Some(f) = self.nodes[i].link.finish_tx() else {
            return;
        };
        let me = self.nodes[i].id;
        let receivers: Vec<NodeId> = match f.dst {
            Some(d) => vec![d],
            None => self
                .neighbor_channels(me)
                .into_iter()
                .map(|(n, _)| n)
                .collect(),
        };
        let sifs = self.nodes[i].link.config().sifs;
        let ack_wait = self.nodes[i].link.config().ack_timeout;
        let mut max_delay = 0.0_f64;
        for r in receivers {
            let Some(ch) = self.channel(me, r).cloned() else {
                continue;
            };
            max_delay = max_delay.max(ch.delay);
            if !ch.up {
                continue;
            }
            let link = &mut self.nodes[i].link;
            let ber = ch.effective_ber(link.config(), link.fec_on(r));
            let bytes = match crate::link::realize(link.rng(), &f.bytes, ber, ch.loss_prob) {
                Delivery::Lost => continue,
                Delivery::Corrupted(c) => c,
                Delivery::Clean => f.bytes.clone(),
            };
            if let Some(&node) = self.index.get(&r) {
                self.queue_at(
                    now + ch.delay,
                    Event::Arrival {
                        node,
                        from: me,
                        bytes,
                        frame: f.id,
                    },
                );
            }
        }
        if f.dst.is_some() {
            self.queue_at(
                now + max_delay + sifs + ack_wait,
                Event::AckTimeout {
                    node: i,
                    frame: f.id,
                },
            );
        }
        self.start_tx(i);
        self.settle(i);
    }

    fn arrival(&mut self, i: usize, from: NodeId, bytes: Vec<u8>, frame_id: u64) {
        let now = self.now;
        let me = self.nodes[i].id;
        if !self.nodes[i].alive || !self.channel(me, from).is_some_and(|c| c.up) {
            return;
        }
        let n = &mut self.nodes[i];
        let Some(frame) = n.link.receive(&mut n.bus, &bytes, now) else {
            self.settle(i);
            return;
        };
        if frame.dst == Some(me) {
            let sifs = n.link.config().sifs;
            if let Some(&s) = self.index.get(&from) {
                self.queue_at(
                    now + sifs,
                    Event::LinkAck {
                        node: s,
                        peer: me,
                        frame: frame_id,
                    },
                );
            }
        }
        let n = &mut self.nodes[i];
        let dg = match Datagram::decode(&frame.datagram) {
            Ok(d) => d,
            Err(_) => {
                n.ip.malformed += 1;
                self.settle(i);
                return;
            }
        };
        match dg.proto {
            Proto::Olsr => n.olsr.receive(&mut n.bus, from, &dg.payload, now),
            Proto::Sctp if dg.dst == me => {
                if dg.ce {
                    n.ip.ecn_notices += 1;
                    let payload = Value::record([("peer", Value::Node(dg.src))]);
                    let _ =
                        n.bus
                            .publish_event(LayerId::Ip, ids::EXPLICIT_CONGESTION, payload, now);
                    if let Some(&s) = self.index.get(&dg.src) {
                        let delay = self.nodes[i].link.config().ecn_notice_delay;
                        self.queue_at(now + delay, Event::EcnEcho { node: s, peer: me });
                    }
                }
                let n = &mut self.nodes[i];
                n.link.notify_checked(&mut n.bus, frame_id, now);
                self.settle(i);
                let n = &mut self.nodes[i];
                let out = n
                    .sctp
                    .receive(&mut n.bus, dg.src, &dg.payload, Some(frame_id), now);
                for d in n.sctp.take_delivered() {
                    n.app.messages_received += 1;
                    n.app.bytes_received += d.payload.len() as u64;
                    if !app_payload_intact(&d.payload) {
                        n.app.corrupted_deliveries += 1;
                    }
                }
                self.emit(i, out);
            }
            Proto::Sctp => {
                let mut dg = dg;
                dg.ttl = dg.ttl.saturating_sub(1);
                if dg.ttl == 0 {
                    n.ip.ttl_drops += 1;
                } else {
                    if n.link.queue_len() >= n.link.config().ecn_threshold && !dg.ce {
                        dg.ce = true;
                        n.link.counters_mut().ecn_marks += 1;
                    }
                    n.ip.forwarded += 1;
                    self.ip_output(i, dg);
                }
            }
        }
        self.settle(i);
    }

    /// Builds the report and hands back the traces.
    pub fn finish(mut self) -> RunOutput {
        let mut report = MetricsReport::default();
        let mut detections = Vec::new();
        let mut sctp_trace = Vec::new();
        let mut claa_trace = Vec::new();
        for n in &mut self.nodes {
            let scope = MetricsReport::node_scope(n.id);
            let c = n.sctp.counters();
            report.add_counters(&scope, "sctp", &c);
            report.add_counters(&scope, "olsr", n.olsr.counters());
            report.add_counters(&scope, "link", n.link.counters());
            report.add_counters(&scope, "ip", &n.ip);
            report.add_counters(&scope, "app", &n.app);
            let e = n.link.energy();
            report.set(&scope, "energy_remaining", e.remaining_j());
            report.set(&scope, "energy_consumed", e.consumed_j());
            report.set(&scope, "olsr.mpr_count", n.olsr.mprs().len() as f64);
            report.set(&scope, "olsr.routes", n.olsr.routes().len() as f64);
            for (peer, t) in n.sctp.unavailability_detections() {
                detections.push((n.id, peer, t));
            }
            sctp_trace.extend(n.sctp.trace().into_iter().map(|r| (n.id, r)));
            claa_trace.extend(n.bus.take_trace());
        }
        report.aggregate_nodes();
        detections.sort_by(|a, b| a.2.total_cmp(&b.2));
        sctp_trace.sort_by(|a, b| a.1.time.total_cmp(&b.1.time));
        claa_trace.sort_by(|a, b| a.time.total_cmp(&b.time));

        let g = |m: &str| report.global(m);
        let derived = [
            ("heartbeat_overhead_packets", g("sctp.heartbeats_sent")),
            ("heartbeat_overhead_bytes", g("sctp.heartbeat_bytes")),
            (
                "spurious_retransmission_count",
                g("sctp.spurious_retransmissions"),
            ),
            (
                "application_goodput",
                g("app.messages_received") - g("app.corrupted_deliveries"),
            ),
            ("application_goodput_bytes", g("app.bytes_received")),
            ("corrupted_deliveries", g("app.corrupted_deliveries")),
            (
                "checksum_operations_at_transport",
                g("sctp.checksum_verifications"),
            ),
            ("duration", self.scenario.duration),
        ];
        for (k, v) in derived {
            report.set(GLOBAL, k, v);
        }
        let mut failures = self.failures.clone();
        failures.sort_by(f64::total_cmp);
        let mut latencies = Vec::new();
        for (k, &f) in failures.iter().enumerate() {
            let end = failures.get(k + 1).copied().unwrap_or(f64::INFINITY);
            if let Some(d) = detections.iter().find(|d| d.2 >= f && d.2 < end) {
                let l = d.2 - f;
                report.set(GLOBAL, &format!("unavailability_detection_latency.{k}"), l);
                latencies.push(l);
            }
        }
        report.set(GLOBAL, "failures", failures.len() as f64);
        report.set(
            GLOBAL,
            "undetected_failures",
            (failures.len() - latencies.len()) as f64,
        );
        if !latencies.is_empty() {
            let mean = latencies.iter().sum::<f64>() / latencies.len() as f64;
            report.set(GLOBAL, "unavailability_detection_latency", mean);
        }
        RunOutput {
            report,
            claa_trace,
            sctp_trace,
            detections,
            failures,
        }
    }
}

/// Notified events the application layer listens to.
const APP_EVENTS: [&str; 3] = [
    ids::NODE_UNAVAILABLE,
    ids::UNAVAILABLE_LINK,
    ids::SIGNIFICANT_ENERGY_DECREASE,
];

impl NodeStack {
    fn app_event(&mut self, ev: &EventRecord) {
        if !self.flags.is_on(&ev.claa_id) {
            return;
        }
        match ev.claa_id.as_str() {
            ids::NODE_UNAVAILABLE => self.app.node_unavailable_notices += 1,
            ids::UNAVAILABLE_LINK => self.app.unavailable_link_notices += 1,
            ids::SIGNIFICANT_ENERGY_DECREASE => self.app.energy_notices += 1,
            _ => {}
        }
    }

    pub fn flags(&self) -> &ClaaFlags {
        &self.flags
    }
}

/// Validates the scenario and runs it to completion.
pub fn run(
    scenario: &Scenario,
    matrix: Arc<InteractionMatrix>,
    opts: &RunOptions,
) -> Result<RunOutput, SimError> {
    Ok(Simulation::new(scenario.clone(), matrix, opts.clone())?.run())
}

/// Runs the scenario once per named flag set, legs in parallel.
pub fn compare(
    scenario: &Scenario,
    flag_sets: &[(String, BTreeMap<String, bool>)],
    matrix: Arc<InteractionMatrix>,
) -> Result<Comparison, SimError> {
    if flag_sets.len() < 2 {
        return Err(SimError::TooFewLegs);
    }
    let sims = flag_sets
        .iter()
        .map(|(name, flags)| {
            let mut s = scenario.clone();
            s.claa_flags = flags.clone();
            Simulation::new(s.clone(), Arc::clone(&matrix), RunOptions::default())?;
            Ok((name.clone(), s))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let legs = std::thread::scope(|sc| {
        let handles: Vec<_> = sims
            .into_iter()
            .map(|(name, s)| {
                let m = Arc::clone(&matrix);
                sc.spawn(move || {
                    let out = run(&s, m, &RunOptions::default()).expect("validated above");
                    (name, out.report)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread"))
            .collect()
    });
    Ok(Comparison { legs })
}

/// Whether an SCTP trace record is a data or heartbeat emission.
pub fn is_payload_emission(r: &SctpTraceRecord) -> bool {
    matches!(
        r.event,
        crate::sctp::TraceEvent::Emit(OutKind::Data | OutKind::Retransmission | OutKind::Heartbeat)
    )
}
