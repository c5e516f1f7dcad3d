//! Cross-layer atomic action (CLAA) registry.
//!
//! The registry holds the interaction matrix of the SCTP / OLSR / 802.11
//! stack as plain data: which layer sources each CLAA, which layers consume
//! it, which SCTP functions it binds to and how SCTP exploits it. The
//! environment bus consults it on every export, publish and invocation.
//!
//! Matrices can be loaded from and written to a JSON file holding one object
//! per descriptor:
//!
//! ```json
//! [
//!   {
//!     "id": "Jitter NE",
//!     "kind": "notified_event",
//!     "roles": [
//!       { "layer": "link", "role": "source" },
//!       { "layer": "sctp", "role": "destination" }
//!     ],
//!     "sctp_functions": ["transferred_data_control"],
//!     "directive": "freeze_timers",
//!     "enabled_by_default": true
//!   }
//! ]
//! ```
//!
//! `stage` (chain position, 1-based) and `remote` may be added to a role;
//! `sctp_functions`, `directive` and `enabled_by_default` are optional.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Symbolic ids of the builtin descriptors.
pub mod ids {
    pub const NODE_UNAVAILABLE: &str = "Node unavailable NE";
    pub const JITTER: &str = "Jitter NE";
    pub const RETRANSMISSION_AVOIDANCE: &str = "Retransmission avoidance NE";
    pub const ACKNOWLEDGEMENT: &str = "Acknowledgement NE";
    pub const EXPLICIT_CONGESTION: &str = "Explicit Congestion NE";
    pub const SIGNIFICANT_ENERGY_DECREASE: &str = "Significant energy decrease NE";
    pub const UNAVAILABLE_LINK: &str = "Unavailable link NE";
    pub const SUPERSTRUCTURES: &str = "Superstructures ES";
    pub const WIRELESS_LINK_STATUS: &str = "Wireless link status ES";
    pub const COMMON_SIGNALIZATION: &str = "Common Signalization ES";
    pub const PACKET_LOSS_RATIO: &str = "Packet loss ratio ES";
    pub const SNR: &str = "SNR ES";
    pub const RSS: &str = "RSS ES";
    pub const BER: &str = "BER ES";
    pub const ENERGY_LEVEL: &str = "Energy level ES";
    pub const FEC: &str = "FEC AS";
    pub const COMMON_CHECKSUM: &str = "Common Checksum Calculus NE";
    pub const ARQ: &str = "ARQ AS";
    pub const EXPLICIT_LOST: &str = "Explicit Lost Notification NE";

    /// The rows of the protocol interaction array, in table order.
    pub const CANONICAL: [&str; 18] = [
        NODE_UNAVAILABLE,
        JITTER,
        RETRANSMISSION_AVOIDANCE,
        ACKNOWLEDGEMENT,
        EXPLICIT_CONGESTION,
        SIGNIFICANT_ENERGY_DECREASE,
        UNAVAILABLE_LINK,
        SUPERSTRUCTURES,
        WIRELESS_LINK_STATUS,
        COMMON_SIGNALIZATION,
        PACKET_LOSS_RATIO,
        SNR,
        RSS,
        BER,
        ENERGY_LEVEL,
        FEC,
        COMMON_CHECKSUM,
        ARQ,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerId {
    Application,
    Sctp,
    Olsr,
    Ip,
    Link,
    Physical,
}

impl LayerId {
    pub const ALL: [LayerId; 6] = [
        LayerId::Application,
        LayerId::Sctp,
        LayerId::Olsr,
        LayerId::Ip,
        LayerId::Link,
        LayerId::Physical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerId::Application => "application",
            LayerId::Sctp => "sctp",
            LayerId::Olsr => "olsr",
            LayerId::Ip => "ip",
            LayerId::Link => "link",
            LayerId::Physical => "physical",
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaaKind {
    ActivableService,
    ExportedState,
    NotifiedEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Destination,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoleEntry {
    pub layer: LayerId,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<u8>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub remote: bool,
}

impl RoleEntry {
    pub fn source(layer: LayerId) -> Self {
        RoleEntry {
            layer,
            role: Role::Source,
            stage: None,
            remote: false,
        }
    }

    pub fn destination(layer: LayerId) -> Self {
        RoleEntry {
            role: Role::Destination,
            ..Self::source(layer)
        }
    }

    pub fn user(layer: LayerId) -> Self {
        RoleEntry {
            role: Role::User,
            ..Self::source(layer)
        }
    }

    pub fn at_stage(mut self, stage: u8) -> Self {
        self.stage = Some(stage);
        self
    }

    pub fn remote(mut self) -> Self {
        self.remote = true;
        self
    }

    fn is_consumer(&self) -> bool {
        matches!(self.role, Role::Destination | Role::User)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaaDescriptor {
    pub id: String,
    pub kind: ClaaKind,
    pub roles: Vec<RoleEntry>,
    pub enabled_by_default: bool,
}

impl ClaaDescriptor {
    pub fn new(id: &str, kind: ClaaKind, roles: Vec<RoleEntry>) -> Self {
        ClaaDescriptor {
            id: id.to_string(),
            kind,
            roles,
            enabled_by_default: true,
        }
    }

    pub fn is_chained(&self) -> bool {
        self.roles.iter().any(|r| r.stage.is_some())
    }

    /// Number of stages in a chained descriptor, 0 otherwise.
    pub fn chain_len(&self) -> u8 {
        self.roles.iter().filter_map(|r| r.stage).max().unwrap_or(0)
    }

    pub fn sources(&self) -> impl Iterator<Item = &RoleEntry> {
        self.roles.iter().filter(|r| r.role == Role::Source)
    }

    pub fn consumers(&self) -> impl Iterator<Item = &RoleEntry> {
        self.roles.iter().filter(|r| r.is_consumer())
    }

    /// Stage at which `layer` emits, for chained descriptors.
    pub fn source_stage(&self, layer: LayerId) -> Option<u8> {
        self.sources()
            .find(|r| r.layer == layer)
            .and_then(|r| r.stage)
    }

    pub fn has_role(&self, layer: LayerId) -> bool {
        self.roles.iter().any(|r| r.layer == layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SctpFunction {
    TransferredDataControl,
    ErrorCorrection,
    CongestionControl,
    PathManagement,
}

/// How SCTP exploits a CLAA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    FreezeTimers,
    ResetSackTimerNoBackoff,
    UpdateReachability,
    AnticipateSend,
    InvokeCongestionControl,
    ConsultBeforeSend,
    AdaptRates,
    DisableHeartbeats,
    SkipChecksum,
    SkipErrorCorrection,
    UseLinkAck,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown CLAA: {0}")]
    UnknownClaa(String),
    #[error("matrix file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationRule {
    MissingSource,
    MissingConsumer,
    ConsumerRoleMismatch,
    DuplicateId,
    MalformedChain,
    UnboundSctpConsumer,
    UnboundSctpSource,
    MissingDirective,
    UnknownBinding,
}

impl fmt::Display for ViolationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationRule::MissingSource => "missing source",
            ViolationRule::MissingConsumer => "missing consumer",
            ViolationRule::ConsumerRoleMismatch => "consumer role does not match kind",
            ViolationRule::DuplicateId => "duplicate id",
            ViolationRule::MalformedChain => "malformed chain stages",
            ViolationRule::UnboundSctpConsumer => "unbound SCTP consumer",
            ViolationRule::UnboundSctpSource => "unbound SCTP source",
            ViolationRule::MissingDirective => "missing exploitation directive",
            ViolationRule::UnknownBinding => "binding for unknown CLAA",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub claa_id: String,
    pub rule: ViolationRule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.claa_id, self.rule)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InteractionMatrix {
    pub descriptors: Vec<ClaaDescriptor>,
    pub function_bindings: BTreeMap<String, BTreeSet<SctpFunction>>,
    pub exploitation_directives: BTreeMap<String, Directive>,
}

impl InteractionMatrix {
    pub fn descriptor(&self, id: &str) -> Result<&ClaaDescriptor, RegistryError> {
        self.descriptors
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| RegistryError::UnknownClaa(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.descriptors.iter().any(|d| d.id == id)
    }

    pub fn may_emit(&self, id: &str, layer: LayerId) -> Result<bool, RegistryError> {
        Ok(self.descriptor(id)?.sources().any(|r| r.layer == layer))
    }

    pub fn may_consume(&self, id: &str, layer: LayerId) -> Result<bool, RegistryError> {
        Ok(self.descriptor(id)?.consumers().any(|r| r.layer == layer))
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }

    pub fn to_json(&self) -> String {
        let records: Vec<DescriptorRecord> = self
            .descriptors
            .iter()
            .map(|d| DescriptorRecord {
                id: d.id.clone(),
                kind: d.kind,
                roles: d.roles.clone(),
                sctp_functions: self
                    .function_bindings
                    .get(&d.id)
                    .map(|s| s.iter().copied().collect())
                    .unwrap_or_default(),
                directive: self.exploitation_directives.get(&d.id).copied(),
                enabled_by_default: d.enabled_by_default,
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("matrix serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        let records: Vec<DescriptorRecord> = serde_json::from_str(text)?;
        let mut matrix = InteractionMatrix::default();
        for rec in records {
            if !rec.sctp_functions.is_empty() {
                matrix
                    .function_bindings
                    .insert(rec.id.clone(), rec.sctp_functions.into_iter().collect());
            }
            if let Some(d) = rec.directive {
                matrix.exploitation_directives.insert(rec.id.clone(), d);
            }
            matrix.descriptors.push(ClaaDescriptor {
                id: rec.id,
                kind: rec.kind,
                roles: rec.roles,
                enabled_by_default: rec.enabled_by_default,
            });
        }
        Ok(matrix)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorRecord {
    id: String,
    kind: ClaaKind,
    roles: Vec<RoleEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    sctp_functions: Vec<SctpFunction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    directive: Option<Directive>,
    #[serde(default = "default_true")]
    enabled_by_default: bool,
}

/// Checks every descriptor and matrix invariant; an empty result means the
/// matrix is usable by the bus.
pub fn validate(matrix: &InteractionMatrix) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |id: &str, rule| {
        out.push(Violation {
            claa_id: id.to_string(),
            rule,
        })
    };

    let mut seen = BTreeSet::new();
    for d in &matrix.descriptors {
        if !seen.insert(d.id.as_str()) {
            push(&d.id, ViolationRule::DuplicateId);
        }
        if d.sources().next().is_none() {
            push(&d.id, ViolationRule::MissingSource);
        }
        if d.consumers().next().is_none() {
            push(&d.id, ViolationRule::MissingConsumer);
        }
        let wanted = match d.kind {
            ClaaKind::NotifiedEvent => Role::Destination,
            ClaaKind::ExportedState | ClaaKind::ActivableService => Role::User,
        };
        if d.consumers().any(|r| r.role != wanted) {
            push(&d.id, ViolationRule::ConsumerRoleMismatch);
        }
        if d.is_chained() && !chain_well_formed(d) {
            push(&d.id, ViolationRule::MalformedChain);
        }

        let sctp_consumes = d.consumers().any(|r| r.layer == LayerId::Sctp);
        let sctp_sources = d.sources().any(|r| r.layer == LayerId::Sctp);
        let bound = matrix
            .function_bindings
            .get(&d.id)
            .is_some_and(|s| !s.is_empty());
        if sctp_consumes && !bound {
            push(&d.id, ViolationRule::UnboundSctpConsumer);
        } else if sctp_sources && !bound {
            push(&d.id, ViolationRule::UnboundSctpSource);
        }
        if sctp_consumes && !matrix.exploitation_directives.contains_key(&d.id) {
            push(&d.id, ViolationRule::MissingDirective);
        }
    }

    for id in matrix
        .function_bindings
        .keys()
        .chain(matrix.exploitation_directives.keys())
    {
        if !seen.contains(id.as_str()) {
            push(id, ViolationRule::UnknownBinding);
        }
    }
    out
}

// Stages 1..=n: exactly one source per stage, at least one destination per
// stage, every role staged, no users.
fn chain_well_formed(d: &ClaaDescriptor) -> bool {
    if d.kind != ClaaKind::NotifiedEvent || d.roles.iter().any(|r| r.stage.is_none()) {
        return false;
    }
    let n = d.chain_len();
    if n == 0
        || d.roles
            .iter()
            .any(|r| r.role == Role::User || r.stage == Some(0))
    {
        return false;
    }
    (1..=n).all(|k| {
        let sources = d.sources().filter(|r| r.stage == Some(k)).count();
        let dests = d
            .roles
            .iter()
            .filter(|r| r.role == Role::Destination && r.stage == Some(k))
            .count();
        sources == 1 && dests >= 1
    })
}

/// The builtin matrix of the SCTP / OLSR / IP / 802.11 stack: the eighteen
/// rows of the protocol interaction array, their SCTP function bindings and
/// exploitation directives, plus the optional Explicit Lost Notification
/// descriptor (disabled by default).
pub fn load_builtin_matrix() -> InteractionMatrix {
    use ids::*;
    use ClaaKind::*;
    use Directive::*;
    use LayerId::*;
    use SctpFunction::*;

    let s = RoleEntry::source;
    let d = RoleEntry::destination;
    let u = RoleEntry::user;

    let mut descriptors = vec![
        ClaaDescriptor::new(
            NODE_UNAVAILABLE,
            NotifiedEvent,
            vec![d(Application), s(Sctp)],
        ),
        ClaaDescriptor::new(JITTER, NotifiedEvent, vec![d(Sctp), s(Link)]),
        ClaaDescriptor::new(
            RETRANSMISSION_AVOIDANCE,
            NotifiedEvent,
            vec![d(Sctp), d(Olsr), s(Link)],
        ),
        ClaaDescriptor::new(
            ACKNOWLEDGEMENT,
            NotifiedEvent,
            vec![
                d(Sctp).at_stage(3),
                d(Olsr).at_stage(2),
                s(Olsr).at_stage(3),
                d(Link).at_stage(1),
                s(Link).at_stage(2),
                s(Physical).at_stage(1),
            ],
        ),
        ClaaDescriptor::new(
            EXPLICIT_CONGESTION,
            NotifiedEvent,
            vec![d(Sctp), s(Ip).remote()],
        ),
        ClaaDescriptor::new(
            SIGNIFICANT_ENERGY_DECREASE,
            NotifiedEvent,
            vec![
                d(Application),
                d(Sctp),
                d(Olsr),
                d(Ip),
                d(Link),
                s(Physical),
            ],
        ),
        ClaaDescriptor::new(
            UNAVAILABLE_LINK,
            NotifiedEvent,
            vec![d(Application), d(Sctp), s(Olsr)],
        ),
        ClaaDescriptor::new(
            SUPERSTRUCTURES,
            ExportedState,
            vec![u(Application), u(Sctp), s(Olsr)],
        ),
        ClaaDescriptor::new(
            WIRELESS_LINK_STATUS,
            ExportedState,
            vec![u(Application), u(Sctp), s(Olsr)],
        ),
        ClaaDescriptor::new(
            COMMON_SIGNALIZATION,
            ExportedState,
            vec![u(Application), u(Sctp), s(Olsr)],
        ),
        ClaaDescriptor::new(
            PACKET_LOSS_RATIO,
            ExportedState,
            vec![u(Application), u(Sctp), s(Link)],
        ),
        ClaaDescriptor::new(
            SNR,
            ExportedState,
            vec![u(Application), u(Sctp), u(Link), s(Physical)],
        ),
        ClaaDescriptor::new(
            RSS,
            ExportedState,
            vec![u(Application), u(Sctp), u(Link), s(Physical)],
        ),
        ClaaDescriptor::new(
            BER,
            ExportedState,
            vec![u(Application), u(Sctp), u(Link), s(Physical)],
        ),
        ClaaDescriptor::new(
            ENERGY_LEVEL,
            ExportedState,
            vec![
                u(Application),
                u(Sctp),
                u(Olsr),
                u(Ip),
                u(Link),
                u(Physical),
                s(Physical),
            ],
        ),
        ClaaDescriptor::new(FEC, ActivableService, vec![u(Sctp), s(Link)]),
        ClaaDescriptor::new(COMMON_CHECKSUM, NotifiedEvent, vec![d(Sctp), s(Link)]),
        ClaaDescriptor::new(ARQ, ActivableService, vec![u(Sctp), s(Link)]),
    ];
    let mut eln = ClaaDescriptor::new(EXPLICIT_LOST, NotifiedEvent, vec![d(Sctp), s(Link)]);
    eln.enabled_by_default = false;
    descriptors.push(eln);

    let bindings: [(&str, &[SctpFunction]); 19] = [
        (NODE_UNAVAILABLE, &[PathManagement]),
        (JITTER, &[TransferredDataControl]),
        (
            RETRANSMISSION_AVOIDANCE,
            &[TransferredDataControl, PathManagement],
        ),
        (ACKNOWLEDGEMENT, &[TransferredDataControl]),
        (EXPLICIT_CONGESTION, &[CongestionControl]),
        (SIGNIFICANT_ENERGY_DECREASE, &[TransferredDataControl]),
        (UNAVAILABLE_LINK, &[TransferredDataControl, PathManagement]),
        (SUPERSTRUCTURES, &[TransferredDataControl, PathManagement]),
        (
            WIRELESS_LINK_STATUS,
            &[TransferredDataControl, PathManagement],
        ),
        (COMMON_SIGNALIZATION, &[PathManagement]),
        (PACKET_LOSS_RATIO, &[TransferredDataControl]),
        (SNR, &[TransferredDataControl]),
        (RSS, &[TransferredDataControl]),
        (BER, &[TransferredDataControl]),
        (ENERGY_LEVEL, &[TransferredDataControl, PathManagement]),
        (FEC, &[TransferredDataControl]),
        (COMMON_CHECKSUM, &[ErrorCorrection]),
        (ARQ, &[ErrorCorrection]),
        (EXPLICIT_LOST, &[ErrorCorrection]),
    ];
    let directives = [
        (NODE_UNAVAILABLE, UpdateReachability),
        (JITTER, FreezeTimers),
        (RETRANSMISSION_AVOIDANCE, FreezeTimers),
        (ACKNOWLEDGEMENT, AnticipateSend),
        (EXPLICIT_CONGESTION, InvokeCongestionControl),
        (SIGNIFICANT_ENERGY_DECREASE, DisableHeartbeats),
        (UNAVAILABLE_LINK, FreezeTimers),
        (SUPERSTRUCTURES, ConsultBeforeSend),
        (WIRELESS_LINK_STATUS, ConsultBeforeSend),
        (COMMON_SIGNALIZATION, ConsultBeforeSend),
        (PACKET_LOSS_RATIO, AdaptRates),
        (SNR, AdaptRates),
        (RSS, UseLinkAck),
        (BER, AdaptRates),
        (ENERGY_LEVEL, AdaptRates),
        (FEC, SkipChecksum),
        (COMMON_CHECKSUM, SkipChecksum),
        (ARQ, SkipErrorCorrection),
        (EXPLICIT_LOST, ResetSackTimerNoBackoff),
    ];

    InteractionMatrix {
        descriptors,
        function_bindings: bindings
            .iter()
            .map(|(id, f)| (id.to_string(), f.iter().copied().collect()))
            .collect(),
        exploitation_directives: directives
            .iter()
            .map(|(id, d)| (id.to_string(), *d))
            .collect(),
    }
}

/// Which CLAAs a scenario leg enables. Consumers act on a CLAA only when it
/// is on; producers populate the environment regardless.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClaaFlags {
    enabled: BTreeSet<String>,
}

impl ClaaFlags {
    pub fn all_off() -> Self {
        Self::default()
    }

    pub fn all_on(matrix: &InteractionMatrix) -> Self {
        ClaaFlags {
            enabled: matrix.descriptors.iter().map(|d| d.id.clone()).collect(),
        }
    }

    pub fn defaults(matrix: &InteractionMatrix) -> Self {
        ClaaFlags {
            enabled: matrix
                .descriptors
                .iter()
                .filter(|d| d.enabled_by_default)
                .map(|d| d.id.clone())
                .collect(),
        }
    }

    /// Builds flags from an id → on/off map. The key `"*"` sets every
    /// descriptor of the matrix first; explicit ids then override it.
    /// Without `"*"`, unlisted descriptors take their default.
    pub fn from_map(
        matrix: &InteractionMatrix,
        map: &BTreeMap<String, bool>,
    ) -> Result<Self, RegistryError> {
        let mut flags = match map.get("*") {
            Some(true) => Self::all_on(matrix),
            Some(false) => Self::all_off(),
            None => Self::defaults(matrix),
        };
        for (id, on) in map.iter().filter(|(k, _)| k.as_str() != "*") {
            if !matrix.contains(id) {
                return Err(RegistryError::UnknownClaa(id.clone()));
            }
            flags.set(id, *on);
        }
        Ok(flags)
    }

    pub fn with(mut self, id: &str, on: bool) -> Self {
        self.set(id, on);
        self
    }

    pub fn set(&mut self, id: &str, on: bool) {
        if on {
            self.enabled.insert(id.to_string());
        } else {
            self.enabled.remove(id);
        }
    }

    pub fn is_on(&self, id: &str) -> bool {
        self.enabled.contains(id)
    }

    pub fn is_all_off(&self) -> bool {
        self.enabled.is_empty()
    }

    pub fn enabled(&self) -> impl Iterator<Item = &str> {
        self.enabled.iter().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_is_valid() {
        let m = load_builtin_matrix();
        assert_eq!(validate(&m), vec![]);
        assert_eq!(m.descriptors.len(), 19);
        assert_eq!(
            m.descriptors
                .iter()
                .filter(|d| d.enabled_by_default)
                .count(),
            18
        );
    }

    #[test]
    fn missing_source_is_reported() {
        let mut m = load_builtin_matrix();
        m.descriptors[1].roles.retain(|r| r.role != Role::Source);
        let v = validate(&m);
        assert_eq!(
            v,
            vec![Violation {
                claa_id: ids::JITTER.into(),
                rule: ViolationRule::MissingSource
            }]
        );
        assert_eq!(v[0].to_string(), "Jitter NE: missing source");
    }

    #[test]
    fn unbound_fec_is_reported() {
        let mut m = load_builtin_matrix();
        m.function_bindings.remove(ids::FEC);
        let v = validate(&m);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::UnboundSctpConsumer);
        assert_eq!(v[0].claa_id, ids::FEC);
    }

    #[test]
    fn empty_binding_counts_as_unbound() {
        let mut m = load_builtin_matrix();
        m.function_bindings.insert(ids::ARQ.into(), BTreeSet::new());
        assert_eq!(validate(&m)[0].rule, ViolationRule::UnboundSctpConsumer);
    }

    #[test]
    fn duplicate_and_kind_mismatch() {
        let mut m = load_builtin_matrix();
        let dup = m.descriptors[0].clone();
        m.descriptors.push(dup);
        m.descriptors[7].kind = ClaaKind::NotifiedEvent;
        let rules: Vec<_> = validate(&m).into_iter().map(|v| v.rule).collect();
        assert!(rules.contains(&ViolationRule::DuplicateId));
        assert!(rules.contains(&ViolationRule::ConsumerRoleMismatch));
    }

    #[test]
    fn broken_chain_is_reported() {
        let mut m = load_builtin_matrix();
        let ack = m
            .descriptors
            .iter_mut()
            .find(|d| d.id == ids::ACKNOWLEDGEMENT)
            .unwrap();
        ack.roles
            .retain(|r| !(r.layer == LayerId::Link && r.role == Role::Source));
        let v = validate(&m);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::MalformedChain);
    }

    #[test]
    fn queries() {
        let m = load_builtin_matrix();
        assert!(m
            .may_emit(ids::COMMON_SIGNALIZATION, LayerId::Olsr)
            .unwrap());
        assert!(!m
            .may_emit(ids::COMMON_SIGNALIZATION, LayerId::Link)
            .unwrap());
        assert!(m.may_consume(ids::SNR, LayerId::Link).unwrap());
        assert!(m.may_emit(ids::ENERGY_LEVEL, LayerId::Physical).unwrap());
        assert!(m.may_consume(ids::ENERGY_LEVEL, LayerId::Physical).unwrap());
        assert!(matches!(
            m.may_emit("Bogus", LayerId::Ip),
            Err(RegistryError::UnknownClaa(_))
        ));
    }

    #[test]
    fn explicit_congestion_source_is_remote_ip() {
        let m = load_builtin_matrix();
        let d = m.descriptor(ids::EXPLICIT_CONGESTION).unwrap();
        let src: Vec<_> = d.sources().collect();
        assert_eq!(src.len(), 1);
        assert_eq!(src[0].layer, LayerId::Ip);
        assert!(src[0].remote);
        let dst: Vec<_> = d.consumers().map(|r| r.layer).collect();
        assert_eq!(dst, vec![LayerId::Sctp]);
    }

    #[test]
    fn acknowledgement_stages() {
        let m = load_builtin_matrix();
        let d = m.descriptor(ids::ACKNOWLEDGEMENT).unwrap();
        assert_eq!(d.chain_len(), 3);
        assert_eq!(d.source_stage(LayerId::Physical), Some(1));
        assert_eq!(d.source_stage(LayerId::Link), Some(2));
        assert_eq!(d.source_stage(LayerId::Olsr), Some(3));
        assert!(d
            .roles
            .contains(&RoleEntry::destination(LayerId::Sctp).at_stage(3)));
    }

    #[test]
    fn json_round_trip() {
        let m = load_builtin_matrix();
        let text = m.to_json();
        let back = InteractionMatrix::from_json(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn flags_from_map() {
        let m = load_builtin_matrix();
        let mut map = BTreeMap::new();
        assert!(ClaaFlags::from_map(&m, &map).unwrap().is_on(ids::JITTER));
        assert!(!ClaaFlags::from_map(&m, &map)
            .unwrap()
            .is_on(ids::EXPLICIT_LOST));
        map.insert("*".to_string(), false);
        map.insert(ids::SNR.to_string(), true);
        let f = ClaaFlags::from_map(&m, &map).unwrap();
        assert_eq!(f.enabled().collect::<Vec<_>>(), vec![ids::SNR]);
        map.insert("nope".to_string(), true);
        assert!(ClaaFlags::from_map(&m, &map).is_err());
    }

    #[test]
    fn json_rejects_unknown_layer() {
        let text =
            r#"[{"id":"x","kind":"notified_event","roles":[{"layer":"mac","role":"source"}]}]"#;
        assert!(InteractionMatrix::from_json(text).is_err());
    }
}
