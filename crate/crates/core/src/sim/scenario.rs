use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::{ChannelState, LinkConfig};
use crate::olsr::OlsrConfig;
use crate::registry::{ClaaFlags, InteractionMatrix, RegistryError};
use crate::sctp::SctpConfig;
use crate::types::{NodeId, Time};

/// Bytes every application message starts with: flow index and sequence.
pub const APP_HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    pub nodes: Vec<NodeId>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub schedule: Vec<ScheduledAction>,
    #[serde(default)]
    pub traffic: Vec<Flow>,
    /// Descriptor id → on/off. `"*"` addresses every descriptor.
    #[serde(default)]
    pub claa_flags: BTreeMap<String, bool>,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    #[serde(flatten)]
    pub channel: ChannelState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledAction {
    pub time: Time,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    KillLink {
        a: NodeId,
        b: NodeId,
    },
    RestoreLink {
        a: NodeId,
        b: NodeId,
    },
    KillNode {
        node: NodeId,
    },
    SetSnr {
        a: NodeId,
        b: NodeId,
        snr_db: f64,
    },
    SetLoss {
        a: NodeId,
        b: NodeId,
        loss_prob: f64,
    },
    InjectJitter {
        node: NodeId,
        duration: f64,
    },
}

impl Action {
    pub fn is_failure(&self) -> bool {
        matches!(self, Action::KillLink { .. } | Action::KillNode { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flow {
    pub src: NodeId,
    pub dst: NodeId,
    /// Message size in bytes.
    pub size: usize,
    /// Messages per second.
    pub rate: f64,
    #[serde(default)]
    pub start: Time,
    pub stop: Option<Time>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub sctp: SctpConfig,
    pub olsr: OlsrConfig,
    pub link: LinkConfig,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duration must be positive and finite, got {0}")]
    BadDuration(f64),
    #[error("no nodes")]
    NoNodes,
    #[error("node {0} listed twice")]
    DuplicateNode(NodeId),
    #[error("{context} references unknown node {node}")]
    UnknownNode { context: String, node: NodeId },
    #[error("link {0}-{0} connects a node to itself")]
    SelfLink(NodeId),
    #[error("link {0}-{1} listed twice")]
    DuplicateLink(NodeId, NodeId),
    #[error("{0}")]
    BadValue(String),
    #[error(transparent)]
    Claa(#[from] RegistryError),
}

pub fn link_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    (a.min(b), a.max(b))
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Checks references and ranges; returns the CLAA flags the scenario
    /// selects.
    pub fn validate(&self, matrix: &InteractionMatrix) -> Result<ClaaFlags, ScenarioError> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(ScenarioError::BadDuration(self.duration));
        }
        if self.nodes.is_empty() {
            return Err(ScenarioError::NoNodes);
        }
        let mut nodes = BTreeSet::new();
        for n in &self.nodes {
            if !nodes.insert(*n) {
                return Err(ScenarioError::DuplicateNode(*n));
            }
        }
        let known = |context: &str, n: NodeId| {
            if nodes.contains(&n) {
                Ok(())
            } else {
                Err(ScenarioError::UnknownNode {
                    context: context.to_string(),
                    node: n,
                })
            }
        };
        let bad = |msg: String| Err(ScenarioError::BadValue(msg));
        let mut links = BTreeSet::new();
        for l in &self.links {
            known("link", l.a)?;
            known("link", l.b)?;
            if l.a == l.b {
                return Err(ScenarioError::SelfLink(l.a));
            }
            if !links.insert(link_key(l.a, l.b)) {
                return Err(ScenarioError::DuplicateLink(l.a, l.b));
            }
            let c = &l.channel;
            if !(0.0..=1.0).contains(&c.loss_prob) || !(0.0..=1.0).contains(&c.rss) {
                return bad(format!(
                    "link {}-{}: probabilities must lie in [0, 1]",
                    l.a, l.b
                ));
            }
            if c.ber.is_some_and(|b| !(0.0..=1.0).contains(&b)) {
                return bad(format!("link {}-{}: ber must lie in [0, 1]", l.a, l.b));
            }
            if !(c.delay.is_finite() && c.delay >= 0.0) {
                return bad(format!("link {}-{}: negative delay", l.a, l.b));
            }
        }
        for s in &self.schedule {
            if !(s.time.is_finite() && s.time >= 0.0) {
                return bad(format!("schedule time {} is negative", s.time));
            }
            match &s.action {
                Action::KillLink { a, b }
                | Action::RestoreLink { a, b }
                | Action::SetSnr { a, b, .. }
                | Action::SetLoss { a, b, .. } => {
                    if !links.contains(&link_key(*a, *b)) {
                        return bad(format!("schedule references unknown link {a}-{b}"));
                    }
                }
                Action::KillNode { node } => known("kill_node", *node)?,
                Action::InjectJitter { node, duration } => {
                    known("inject_jitter", *node)?;
                    if !(duration.is_finite() && *duration >= 0.0) {
                        return bad("inject_jitter duration must be non-negative".into());
                    }
                }
            }
            if let Action::SetLoss { loss_prob, .. } = s.action {
                if !(0.0..=1.0).contains(&loss_prob) {
                    return bad("set_loss probability must lie in [0, 1]".into());
                }
            }
        }
        for (i, f) in self.traffic.iter().enumerate() {
            known("traffic", f.src)?;
            known("traffic", f.dst)?;
            if f.src == f.dst {
                return bad(format!("flow {i} sends to itself"));
            }
            if f.size < APP_HEADER_LEN || f.size > self.params.sctp.mtu {
                return bad(format!(
                    "flow {i}: size must lie in [{APP_HEADER_LEN}, {}]",
                    self.params.sctp.mtu
                ));
            }
            if !(f.rate.is_finite() && f.rate > 0.0) {
                return bad(format!("flow {i}: rate must be positive"));
            }
            if f.start < 0.0 || f.stop.is_some_and(|s| s < f.start) {
                return bad(format!("flow {i}: bad start/stop"));
            }
        }
        Ok(ClaaFlags::from_map(matrix, &self.claa_flags)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::load_builtin_matrix;

    fn base() -> Scenario {
        Scenario::from_json(
            r#"{"seed": 1, "duration": 10, "nodes": [1, 2],
                "links": [{"a": 1, "b": 2, "snr_db": 25}],
                "traffic": [{"src": 1, "dst": 2, "size": 100, "rate": 1}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn parses_with_defaults() {
        let s = base();
        assert_eq!(s.links[0].channel.snr_db, 25.0);
        assert_eq!(s.links[0].channel.rss, 0.9);
        assert_eq!(s.params.olsr.hello_interval, 2.0);
        assert!(s.validate(&load_builtin_matrix()).is_ok());
    }

    #[test]
    fn actions_parse() {
        let a: ScheduledAction =
            serde_json::from_str(r#"{"time": 5, "action": "kill_link", "a": 1, "b": 2}"#).unwrap();
        assert_eq!(
            a.action,
            Action::KillLink {
                a: NodeId(1),
                b: NodeId(2)
            }
        );
        assert!(
            serde_json::from_str::<ScheduledAction>(r#"{"time": 5, "action": "explode"}"#).is_err()
        );
    }

    #[test]
    fn rejections() {
        let m = load_builtin_matrix();
        let mut s = base();
        s.traffic[0].dst = NodeId(7);
        assert!(matches!(
            s.validate(&m),
            Err(ScenarioError::UnknownNode { .. })
        ));
        let mut s = base();
        s.duration = 0.0;
        assert!(matches!(s.validate(&m), Err(ScenarioError::BadDuration(_))));
        let mut s = base();
        s.claa_flags.insert("Teleport NE".into(), true);
        assert!(matches!(s.validate(&m), Err(ScenarioError::Claa(_))));
        let mut s = base();
        s.nodes.push(NodeId(1));
        assert!(matches!(
            s.validate(&m),
            Err(ScenarioError::DuplicateNode(_))
        ));
        assert!(Scenario::from_json(r#"{"duration": 1, "nodes": [1], "bogus": 1}"#).is_err());
    }
}
