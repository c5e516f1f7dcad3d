//! Per-node environment subsystem.
//!
//! Every cross-layer interaction on a node goes through one [`Bus`]: exported
//! states land in a store, notified events are pushed to subscribers, and
//! activable services are dispatched to their provider. Each call is checked
//! against the interaction matrix before it has any effect.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::registry::{ClaaKind, InteractionMatrix, LayerId, RegistryError, Role};
use crate::types::{NodeId, Time};

/// Payload carried by states, events and service calls.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Number(f64),
    Node(NodeId),
    List(Vec<Value>),
    Record(BTreeMap<String, Value>),
}

impl Value {
    pub fn record<const N: usize>(fields: [(&str, Value); N]) -> Value {
        Value::Record(
            fields
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        )
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        match self {
            Value::Record(m) => m.get(key),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_node(&self) -> Option<NodeId> {
        match self {
            Value::Node(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn field_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(Value::as_f64)
    }

    pub fn field_node(&self, key: &str) -> Option<NodeId> {
        self.get(key).and_then(Value::as_node)
    }

    pub fn field_bool(&self, key: &str) -> Option<bool> {
        self.get(key).and_then(Value::as_bool)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Number(x) => write!(f, "{x}"),
            Value::Node(n) => write!(f, "node:{n}"),
            Value::List(l) => {
                f.write_str("[")?;
                for (i, v) in l.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str("]")
            }
            Value::Record(m) => {
                f.write_str("{")?;
                for (i, (k, v)) in m.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{k}:{v}")?;
                }
                f.write_str("}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEntry {
    pub claa_id: String,
    /// Per-peer states (link quality, HELLO fields, SNR, ...) carry the peer
    /// they describe; node-wide states have none.
    pub subject: Option<NodeId>,
    pub value: Value,
    pub exporter: LayerId,
    pub export_time: Time,
    pub validity: Option<f64>,
}

impl StateEntry {
    pub fn is_fresh(&self, now: Time) -> bool {
        match self.validity {
            None => true,
            Some(v) => self.export_time + v >= now,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateRead<'a> {
    Fresh(&'a StateEntry),
    Expired,
    Absent,
}

impl<'a> StateRead<'a> {
    pub fn fresh(self) -> Option<&'a StateEntry> {
        match self {
            StateRead::Fresh(e) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub claa_id: String,
    pub payload: Value,
    pub emitter: LayerId,
    pub emit_time: Time,
    pub stage: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceHandle {
    pub claa_id: String,
    pub provider: LayerId,
    pub schema: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubscriptionId(u64);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("routing violation: {layer} may not {action} {claa_id}")]
    RoutingViolation {
        claa_id: String,
        layer: LayerId,
        action: &'static str,
    },
    #[error("{claa_id} is not a {expected:?}")]
    KindMismatch { claa_id: String, expected: ClaaKind },
    #[error("chain order violation on {claa_id}: stage {stage} after stage {last}")]
    ChainOrderViolation {
        claa_id: String,
        stage: u8,
        last: u8,
    },
    #[error("no provider registered for {0}")]
    NoProvider(String),
    #[error("provider already registered for {0}")]
    DuplicateProvider(String),
    #[error("validity must be > 0, got {0}")]
    InvalidValidity(f64),
    #[error("export of {0} goes back in time")]
    NonMonotonicExport(String),
    #[error("unknown CLAA: {0}")]
    UnknownClaa(String),
    #[error("service {claa_id} failed: {reason}")]
    ServiceFailed { claa_id: String, reason: String },
}

impl From<RegistryError> for BusError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::UnknownClaa(id) => BusError::UnknownClaa(id),
            other => BusError::UnknownClaa(other.to_string()),
        }
    }
}

pub type EventHandler = Box<dyn FnMut(&EventRecord)>;
pub type ServiceFn = Box<dyn FnMut(&Value) -> Result<Value, String>>;

enum Sink {
    Handler(EventHandler),
    Mailbox,
}

struct Subscription {
    id: SubscriptionId,
    layer: LayerId,
    claa_id: String,
    sink: Sink,
}

struct Provider {
    handle: ServiceHandle,
    call: ServiceFn,
}

/// One line of the optional CLAA trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time: Time,
    pub node: NodeId,
    pub layer: LayerId,
    pub claa_id: String,
    pub verdict: String,
}

impl TraceRecord {
    pub fn to_tsv(&self) -> String {
        format!(
            "{:.6}\t{}\t{}\t{}\t{}",
            self.time, self.node, self.layer, self.claa_id, self.verdict
        )
    }
}

type StateKey = (String, Option<NodeId>, LayerId);

pub struct Bus {
    node: NodeId,
    matrix: Arc<InteractionMatrix>,
    store: BTreeMap<StateKey, StateEntry>,
    subs: Vec<Subscription>,
    next_sub: u64,
    mailbox: VecDeque<(LayerId, EventRecord)>,
    providers: BTreeMap<String, Provider>,
    chains: BTreeMap<String, u8>,
    reachability: BTreeMap<NodeId, (bool, Time)>,
    trace: Option<Vec<TraceRecord>>,
    muted: bool,
}

impl fmt::Debug for Bus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bus")
            .field("node", &self.node)
            .field("states", &self.store.len())
            .field("subscriptions", &self.subs.len())
            .field("muted", &self.muted)
            .finish()
    }
}

impl Bus {
    pub fn new(node: NodeId, matrix: Arc<InteractionMatrix>) -> Self {
        Bus {
            node,
            matrix,
            store: BTreeMap::new(),
            subs: Vec::new(),
            next_sub: 0,
            mailbox: VecDeque::new(),
            providers: BTreeMap::new(),
            chains: BTreeMap::new(),
            reachability: BTreeMap::new(),
            trace: None,
            muted: false,
        }
    }

    pub fn matrix(&self) -> &InteractionMatrix {
        &self.matrix
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// A muted bus drops every export, publish and invocation, as if the
    /// call sites did not exist.
    pub fn set_muted(&mut self, muted: bool) {
        self.muted = muted;
    }

    fn record(&mut self, now: Time, layer: LayerId, claa_id: &str, verdict: String) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                time: now,
                node: self.node,
                layer,
                claa_id: claa_id.to_string(),
                verdict,
            });
        }
    }

    fn check(
        &self,
        claa_id: &str,
        layer: LayerId,
        kind: ClaaKind,
        emit: bool,
    ) -> Result<(), BusError> {
        let d = self.matrix.descriptor(claa_id)?;
        let allowed = if emit {
            self.matrix.may_emit(claa_id, layer)?
        } else {
            self.matrix.may_consume(claa_id, layer)?
        };
        if !allowed {
            return Err(BusError::RoutingViolation {
                claa_id: claa_id.to_string(),
                layer,
                action: match (emit, kind) {
                    (true, ClaaKind::ExportedState) => "export",
                    (true, ClaaKind::NotifiedEvent) => "publish",
                    (true, ClaaKind::ActivableService) => "provide",
                    (false, ClaaKind::ExportedState) => "read",
                    (false, ClaaKind::NotifiedEvent) => "subscribe to",
                    (false, ClaaKind::ActivableService) => "invoke",
                },
            });
        }
        if d.kind != kind {
            return Err(BusError::KindMismatch {
                claa_id: claa_id.to_string(),
                expected: kind,
            });
        }
        Ok(())
    }

    pub fn export_state(
        &mut self,
        layer: LayerId,
        claa_id: &str,
        value: Value,
        validity: Option<f64>,
        now: Time,
    ) -> Result<(), BusError> {
        self.export_inner(layer, claa_id, None, value, validity, now)
    }

    pub fn export_peer_state(
        &mut self,
        layer: LayerId,
        claa_id: &str,
        peer: NodeId,
        value: Value,
        validity: Option<f64>,
        now: Time,
    ) -> Result<(), BusError> {
        self.export_inner(layer, claa_id, Some(peer), value, validity, now)
    }

    fn export_inner(
        &mut self,
        layer: LayerId,
        claa_id: &str,
        subject: Option<NodeId>,
        value: Value,
        validity: Option<f64>,
        now: Time,
    ) -> Result<(), BusError> {
        if let Err(e) = self.check(claa_id, layer, ClaaKind::ExportedState, true) {
            self.record(now, layer, claa_id, "export:rejected".into());
            return Err(e);
        }
        if let Some(v) = validity {
            if v.is_nan() || v <= 0.0 {
                return Err(BusError::InvalidValidity(v));
            }
        }
        if self.muted {
            return Ok(());
        }
        let key = (claa_id.to_string(), subject, layer);
        if let Some(prev) = self.store.get(&key) {
            if now < prev.export_time {
                return Err(BusError::NonMonotonicExport(claa_id.to_string()));
            }
        }
        self.store.insert(
            key,
            StateEntry {
                claa_id: claa_id.to_string(),
                subject,
                value,
                exporter: layer,
                export_time: now,
                validity,
            },
        );
        self.record(now, layer, claa_id, "export:ok".into());
        Ok(())
    }

    pub fn read_state(
        &self,
        layer: LayerId,
        claa_id: &str,
        now: Time,
    ) -> Result<StateRead<'_>, BusError> {
        self.read_inner(layer, claa_id, None, now)
    }

    pub fn read_peer_state(
        &self,
        layer: LayerId,
        claa_id: &str,
        peer: NodeId,
        now: Time,
    ) -> Result<StateRead<'_>, BusError> {
        self.read_inner(layer, claa_id, Some(peer), now)
    }

    fn read_inner(
        &self,
        layer: LayerId,
        claa_id: &str,
        subject: Option<NodeId>,
        now: Time,
    ) -> Result<StateRead<'_>, BusError> {
        self.check(claa_id, layer, ClaaKind::ExportedState, false)?;
        let latest = LayerId::ALL
            .iter()
            .filter_map(|l| self.store.get(&(claa_id.to_string(), subject, *l)))
            .max_by(|a, b| a.export_time.total_cmp(&b.export_time));
        Ok(match latest {
            None => StateRead::Absent,
            Some(e) if e.is_fresh(now) => StateRead::Fresh(e),
            Some(_) => StateRead::Expired,
        })
    }

    pub fn subscribe(
        &mut self,
        layer: LayerId,
        claa_id: &str,
        handler: EventHandler,
    ) -> Result<SubscriptionId, BusError> {
        self.subscribe_inner(layer, claa_id, Sink::Handler(handler))
    }

    /// Subscribes `layer` with deliveries queued on the bus instead of run
    /// through a closure; drain them with [`Bus::take_mail`].
    pub fn subscribe_mailbox(
        &mut self,
        layer: LayerId,
        claa_id: &str,
    ) -> Result<SubscriptionId, BusError> {
        self.subscribe_inner(layer, claa_id, Sink::Mailbox)
    }

    fn subscribe_inner(
        &mut self,
        layer: LayerId,
        claa_id: &str,
        sink: Sink,
    ) -> Result<SubscriptionId, BusError> {
        self.check(claa_id, layer, ClaaKind::NotifiedEvent, false)?;
        let id = SubscriptionId(self.next_sub);
        self.next_sub += 1;
        self.subs.push(Subscription {
            id,
            layer,
            claa_id: claa_id.to_string(),
            sink,
        });
        Ok(id)
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) {
        self.subs.retain(|s| s.id != id);
    }

    pub fn take_mail(&mut self) -> Option<(LayerId, EventRecord)> {
        self.mailbox.pop_front()
    }

    /// Delivers an event to every subscribed consumer and returns the number
    /// of deliveries. For chained descriptors the emitter's stage is derived
    /// from its source role and only consumers of that stage receive it.
    pub fn publish_event(
        &mut self,
        layer: LayerId,
        claa_id: &str,
        payload: Value,
        now: Time,
    ) -> Result<usize, BusError> {
        if let Err(e) = self.check(claa_id, layer, ClaaKind::NotifiedEvent, true) {
            self.record(now, layer, claa_id, "publish:rejected".into());
            return Err(e);
        }
        if self.muted {
            return Ok(0);
        }
        let d = self.matrix.descriptor(claa_id)?;
        let stage = d.source_stage(layer);
        let chain_len = d.chain_len();
        let targets: Vec<LayerId> = d
            .consumers()
            .filter(|r| stage.is_none() || r.stage == stage)
            .map(|r| r.layer)
            .collect();

        if let Some(k) = stage {
            let last = self.chains.get(claa_id).copied().unwrap_or(0);
            if k > 1 && last != k - 1 {
                self.record(now, layer, claa_id, "publish:chain_order".into());
                return Err(BusError::ChainOrderViolation {
                    claa_id: claa_id.to_string(),
                    stage: k,
                    last,
                });
            }
            if k >= chain_len {
                self.chains.remove(claa_id);
            } else {
                self.chains.insert(claa_id.to_string(), k);
            }
        }

        let ev = EventRecord {
            claa_id: claa_id.to_string(),
            payload,
            emitter: layer,
            emit_time: now,
            stage,
        };
        let mut delivered = 0;
        for sub in self
            .subs
            .iter_mut()
            .filter(|s| s.claa_id == claa_id && targets.contains(&s.layer))
        {
            match &mut sub.sink {
                Sink::Handler(h) => h(&ev),
                Sink::Mailbox => self.mailbox.push_back((sub.layer, ev.clone())),
            }
            delivered += 1;
        }
        self.record(now, layer, claa_id, format!("publish:{delivered}"));
        Ok(delivered)
    }

    pub fn register_provider(
        &mut self,
        layer: LayerId,
        claa_id: &str,
        schema: &str,
        call: ServiceFn,
    ) -> Result<ServiceHandle, BusError> {
        self.check(claa_id, layer, ClaaKind::ActivableService, true)?;
        if self.providers.contains_key(claa_id) {
            return Err(BusError::DuplicateProvider(claa_id.to_string()));
        }
        let handle = ServiceHandle {
            claa_id: claa_id.to_string(),
            provider: layer,
            schema: schema.to_string(),
        };
        self.providers.insert(
            claa_id.to_string(),
            Provider {
                handle: handle.clone(),
                call,
            },
        );
        Ok(handle)
    }

    pub fn invoke_service(
        &mut self,
        layer: LayerId,
        claa_id: &str,
        params: &Value,
        now: Time,
    ) -> Result<Value, BusError> {
        if let Err(e) = self.check(claa_id, layer, ClaaKind::ActivableService, false) {
            self.record(now, layer, claa_id, "invoke:rejected".into());
            return Err(e);
        }
        if self.muted {
            return Ok(Value::Null);
        }
        let Some(p) = self.providers.get_mut(claa_id) else {
            self.record(now, layer, claa_id, "invoke:no_provider".into());
            return Err(BusError::NoProvider(claa_id.to_string()));
        };
        let provider = p.handle.provider;
        let result = (p.call)(params).map_err(|reason| BusError::ServiceFailed {
            claa_id: claa_id.to_string(),
            reason,
        });
        let verdict = if result.is_ok() {
            format!("invoke:ok:{provider}")
        } else {
            "invoke:failed".to_string()
        };
        self.record(now, layer, claa_id, verdict);
        result
    }

    /// Records reachability of a peer in the environment store. Only the
    /// source layer of the node-unavailable event may write it.
    pub fn update_reachability(
        &mut self,
        layer: LayerId,
        peer: NodeId,
        reachable: bool,
        now: Time,
    ) -> Result<(), BusError> {
        let id = crate::registry::ids::NODE_UNAVAILABLE;
        if !self.matrix.contains(id) || !self.matrix.may_emit(id, layer)? {
            return Err(BusError::RoutingViolation {
                claa_id: id.to_string(),
                layer,
                action: "update reachability via",
            });
        }
        if !self.muted {
            self.reachability.insert(peer, (reachable, now));
        }
        Ok(())
    }

    pub fn reachability(&self, peer: NodeId) -> Option<(bool, Time)> {
        self.reachability.get(&peer).copied()
    }

    /// Layers holding any consumer role for `claa_id`.
    pub fn consumers_of(&self, claa_id: &str) -> Vec<LayerId> {
        self.matrix
            .descriptor(claa_id)
            .map(|d| {
                d.roles
                    .iter()
                    .filter(|r| matches!(r.role, Role::Destination | Role::User))
                    .map(|r| r.layer)
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;
    use std::rc::Rc;

    use super::*;
    use crate::registry::{ids, load_builtin_matrix};

    fn bus() -> Bus {
        Bus::new(NodeId(1), Arc::new(load_builtin_matrix()))
    }

    #[test]
    fn export_and_read() {
        let mut b = bus();
        let v = Value::record([
            ("neighbor", Value::Node(NodeId(2))),
            ("quality", Value::Number(0.7)),
        ]);
        b.export_peer_state(
            LayerId::Olsr,
            ids::WIRELESS_LINK_STATUS,
            NodeId(2),
            v.clone(),
            None,
            1.0,
        )
        .unwrap();
        let got = b
            .read_peer_state(LayerId::Sctp, ids::WIRELESS_LINK_STATUS, NodeId(2), 5.0)
            .unwrap()
            .fresh()
            .unwrap();
        assert_eq!(got.value, v);
        assert_eq!(got.exporter, LayerId::Olsr);
    }

    #[test]
    fn export_routing_violation() {
        let mut b = bus();
        let err = b
            .export_state(LayerId::Link, ids::SUPERSTRUCTURES, Value::Null, None, 0.0)
            .unwrap_err();
        assert!(matches!(err, BusError::RoutingViolation { .. }));
    }

    #[test]
    fn export_kind_mismatch() {
        let mut b = bus();
        let err = b
            .export_state(LayerId::Link, ids::JITTER, Value::Null, None, 0.0)
            .unwrap_err();
        assert!(matches!(err, BusError::KindMismatch { .. }));
    }

    #[test]
    fn last_writer_wins() {
        let mut b = bus();
        b.export_state(
            LayerId::Olsr,
            ids::SUPERSTRUCTURES,
            Value::Number(1.0),
            None,
            1.0,
        )
        .unwrap();
        b.export_state(
            LayerId::Olsr,
            ids::SUPERSTRUCTURES,
            Value::Number(2.0),
            None,
            2.0,
        )
        .unwrap();
        let e = b
            .read_state(LayerId::Sctp, ids::SUPERSTRUCTURES, 3.0)
            .unwrap()
            .fresh()
            .unwrap();
        assert_eq!(e.value, Value::Number(2.0));
        assert_eq!(e.export_time, 2.0);
    }

    #[test]
    fn export_time_is_monotone() {
        let mut b = bus();
        b.export_state(LayerId::Olsr, ids::SUPERSTRUCTURES, Value::Null, None, 5.0)
            .unwrap();
        assert!(matches!(
            b.export_state(LayerId::Olsr, ids::SUPERSTRUCTURES, Value::Null, None, 4.0),
            Err(BusError::NonMonotonicExport(_))
        ));
    }

    #[test]
    fn validity_window() {
        let mut b = bus();
        b.export_peer_state(
            LayerId::Olsr,
            ids::COMMON_SIGNALIZATION,
            NodeId(2),
            Value::Null,
            Some(6.0),
            10.0,
        )
        .unwrap();
        let at = |t| {
            b.read_peer_state(LayerId::Sctp, ids::COMMON_SIGNALIZATION, NodeId(2), t)
                .unwrap()
        };
        assert!(matches!(at(15.0), StateRead::Fresh(_)));
        assert!(matches!(at(16.0), StateRead::Fresh(_)));
        assert_eq!(at(16.5), StateRead::Expired);
        assert_eq!(
            b.read_peer_state(LayerId::Sctp, ids::COMMON_SIGNALIZATION, NodeId(3), 1.0)
                .unwrap(),
            StateRead::Absent
        );
    }

    #[test]
    fn read_by_non_user_is_rejected() {
        let b = bus();
        assert!(matches!(
            b.read_state(LayerId::Ip, ids::COMMON_SIGNALIZATION, 0.0),
            Err(BusError::RoutingViolation { .. })
        ));
    }

    #[test]
    fn zero_validity_rejected() {
        let mut b = bus();
        assert_eq!(
            b.export_state(
                LayerId::Olsr,
                ids::SUPERSTRUCTURES,
                Value::Null,
                Some(0.0),
                0.0
            ),
            Err(BusError::InvalidValidity(0.0))
        );
    }

    #[test]
    fn publish_reaches_subscribers_in_order() {
        let mut b = bus();
        let log = Rc::new(RefCell::new(Vec::new()));
        for tag in ["first", "second"] {
            let log = log.clone();
            b.subscribe(
                LayerId::Application,
                ids::UNAVAILABLE_LINK,
                Box::new(move |ev| log.borrow_mut().push((tag, ev.emit_time))),
            )
            .unwrap();
        }
        let n = b
            .publish_event(LayerId::Olsr, ids::UNAVAILABLE_LINK, Value::Null, 2.5)
            .unwrap();
        assert_eq!(n, 2);
        assert_eq!(*log.borrow(), vec![("first", 2.5), ("second", 2.5)]);
    }

    #[test]
    fn node_unavailable_single_delivery() {
        let mut b = bus();
        b.subscribe_mailbox(LayerId::Application, ids::NODE_UNAVAILABLE)
            .unwrap();
        let n = b
            .publish_event(
                LayerId::Sctp,
                ids::NODE_UNAVAILABLE,
                Value::record([("peer", Value::Node(NodeId(3)))]),
                1.0,
            )
            .unwrap();
        assert_eq!(n, 1);
        let (layer, ev) = b.take_mail().unwrap();
        assert_eq!(layer, LayerId::Application);
        assert_eq!(ev.payload.field_node("peer"), Some(NodeId(3)));
        assert!(b.take_mail().is_none());
    }

    #[test]
    fn unsubscribe_is_idempotent() {
        let mut b = bus();
        let count = Rc::new(RefCell::new(0));
        let c = count.clone();
        let id = b
            .subscribe(
                LayerId::Application,
                ids::UNAVAILABLE_LINK,
                Box::new(move |_| *c.borrow_mut() += 1),
            )
            .unwrap();
        b.publish_event(LayerId::Olsr, ids::UNAVAILABLE_LINK, Value::Null, 0.0)
            .unwrap();
        b.unsubscribe(id);
        b.unsubscribe(id);
        b.publish_event(LayerId::Olsr, ids::UNAVAILABLE_LINK, Value::Null, 1.0)
            .unwrap();
        assert_eq!(*count.borrow(), 1);
    }

    #[test]
    fn subscribe_requires_consumer_role() {
        let mut b = bus();
        assert!(matches!(
            b.subscribe_mailbox(LayerId::Ip, ids::JITTER),
            Err(BusError::RoutingViolation { .. })
        ));
    }

    #[test]
    fn acknowledgement_chain() {
        let mut b = bus();
        b.subscribe_mailbox(LayerId::Link, ids::ACKNOWLEDGEMENT)
            .unwrap();
        b.subscribe_mailbox(LayerId::Olsr, ids::ACKNOWLEDGEMENT)
            .unwrap();
        b.subscribe_mailbox(LayerId::Sctp, ids::ACKNOWLEDGEMENT)
            .unwrap();

        assert_eq!(
            b.publish_event(LayerId::Physical, ids::ACKNOWLEDGEMENT, Value::Null, 1.0)
                .unwrap(),
            1
        );
        let (l, ev) = b.take_mail().unwrap();
        assert_eq!((l, ev.stage), (LayerId::Link, Some(1)));
        b.publish_event(LayerId::Link, ids::ACKNOWLEDGEMENT, Value::Null, 1.0)
            .unwrap();
        let (l, ev) = b.take_mail().unwrap();
        assert_eq!((l, ev.stage), (LayerId::Olsr, Some(2)));
        b.publish_event(LayerId::Olsr, ids::ACKNOWLEDGEMENT, Value::Null, 1.0)
            .unwrap();
        let (l, ev) = b.take_mail().unwrap();
        assert_eq!((l, ev.stage), (LayerId::Sctp, Some(3)));
        assert!(b.take_mail().is_none());
    }

    #[test]
    fn chain_stage_cannot_be_skipped() {
        let mut b = bus();
        let err = b
            .publish_event(LayerId::Olsr, ids::ACKNOWLEDGEMENT, Value::Null, 0.0)
            .unwrap_err();
        assert_eq!(
            err,
            BusError::ChainOrderViolation {
                claa_id: ids::ACKNOWLEDGEMENT.into(),
                stage: 3,
                last: 0
            }
        );
        b.publish_event(LayerId::Physical, ids::ACKNOWLEDGEMENT, Value::Null, 0.0)
            .unwrap();
        assert!(b
            .publish_event(LayerId::Olsr, ids::ACKNOWLEDGEMENT, Value::Null, 0.0)
            .is_err());
    }

    #[test]
    fn services() {
        let mut b = bus();
        assert_eq!(
            b.invoke_service(LayerId::Sctp, ids::ARQ, &Value::Null, 0.0),
            Err(BusError::NoProvider(ids::ARQ.into()))
        );
        let enabled = Rc::new(RefCell::new(Vec::new()));
        let e = enabled.clone();
        let handle = b
            .register_provider(
                LayerId::Link,
                ids::ARQ,
                "peer+enable",
                Box::new(move |p| {
                    let peer = p.field_node("peer").ok_or("missing peer")?;
                    e.borrow_mut().push(peer);
                    Ok(Value::Bool(true))
                }),
            )
            .unwrap();
        assert_eq!(handle.provider, LayerId::Link);
        let params = Value::record([
            ("peer", Value::Node(NodeId(2))),
            ("enable", Value::Bool(true)),
        ]);
        assert_eq!(
            b.invoke_service(LayerId::Sctp, ids::ARQ, &params, 0.0),
            Ok(Value::Bool(true))
        );
        assert_eq!(*enabled.borrow(), vec![NodeId(2)]);
        assert!(matches!(
            b.invoke_service(LayerId::Olsr, ids::FEC, &params, 0.0),
            Err(BusError::RoutingViolation { .. })
        ));
        assert!(matches!(
            b.register_provider(LayerId::Link, ids::ARQ, "", Box::new(|_| Ok(Value::Null))),
            Err(BusError::DuplicateProvider(_))
        ));
    }

    #[test]
    fn muted_bus_drops_everything() {
        let mut b = bus();
        b.subscribe_mailbox(LayerId::Sctp, ids::JITTER).unwrap();
        b.set_muted(true);
        b.export_state(LayerId::Olsr, ids::SUPERSTRUCTURES, Value::Null, None, 0.0)
            .unwrap();
        assert_eq!(
            b.publish_event(LayerId::Link, ids::JITTER, Value::Null, 0.0)
                .unwrap(),
            0
        );
        assert_eq!(
            b.read_state(LayerId::Sctp, ids::SUPERSTRUCTURES, 0.0)
                .unwrap(),
            StateRead::Absent
        );
    }

    #[test]
    fn trace_lines() {
        let mut b = bus();
        b.enable_trace();
        b.export_state(LayerId::Olsr, ids::SUPERSTRUCTURES, Value::Null, None, 1.5)
            .unwrap();
        let _ = b.export_state(LayerId::Ip, ids::SUPERSTRUCTURES, Value::Null, None, 2.0);
        let t = b.take_trace();
        assert_eq!(t.len(), 2);
        assert_eq!(
            t[0].to_tsv(),
            "1.500000\t1\tolsr\tSuperstructures ES\texport:ok"
        );
        assert_eq!(t[1].verdict, "export:rejected");
    }
}
