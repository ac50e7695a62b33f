//! The collective crosstalk channel: typed messages carrying one of the four
//! interaction kinds, routed over an explicit relationship graph with
//! per-kind legality checks, delivered with a fixed one-tick latency.
//!
//! The bus is owned and mutated by the engine only, between block
//! evaluations; blocks see immutable inbox snapshots.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slash-delimited node identity within the decomposition tree,
/// e.g. `power/generation/solar_drive/breaker`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodePath(pub String);

impl NodePath {
    pub fn new(s: impl Into<String>) -> Self {
        NodePath(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Path of the parent node, if any.
    pub fn parent(&self) -> Option<NodePath> {
        self.0.rsplit_once('/').map(|(p, _)| NodePath::new(p))
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodePath {
    fn from(s: &str) -> Self {
        NodePath::new(s)
    }
}

/// The four interaction kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    /// Information sharing with no knowledge of receivers: topic pub-sub.
    Cooperation,
    /// Joint plans, individual execution.
    Coordination,
    /// Joint plans, joint execution.
    Collaboration,
    /// A superior directing a subordinate.
    Command,
}

impl InteractionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InteractionKind::Cooperation => "cooperation",
            InteractionKind::Coordination => "coordination",
            InteractionKind::Collaboration => "collaboration",
            InteractionKind::Command => "command",
        }
    }
}

/// The command vocabulary shared by the autonomy input channel and
/// command-kind crosstalk messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandVerb {
    SetMode {
        mode: String,
    },
    SetParam {
        name: String,
        value: f64,
        #[serde(default)]
        unit: Option<String>,
    },
    /// Temporarily suppress the addressee's own state-machine transitions.
    /// Expiry is an absolute tick, exclusive.
    Override {
        directive: OverrideDirective,
        expiry_tick: u64,
    },
    ReleaseOverride,
    /// A named event made visible to the addressee's transition guards
    /// (e.g. `reset`, `demand_start`).
    Directive {
        name: String,
    },
}

impl CommandVerb {
    pub fn kind_name(&self) -> &'static str {
        match self {
            CommandVerb::SetMode { .. } => "set_mode",
            CommandVerb::SetParam { .. } => "set_param",
            CommandVerb::Override { .. } => "override",
            CommandVerb::ReleaseOverride => "release_override",
            CommandVerb::Directive { .. } => "directive",
        }
    }

    /// Compact single-token rendering for trace rows.
    pub fn describe(&self) -> String {
        match self {
            CommandVerb::SetMode { mode } => format!("set_mode:{mode}"),
            CommandVerb::SetParam { name, value, .. } => format!("set_param:{name}={value}"),
            CommandVerb::Override { directive, expiry_tick } => {
                format!("override:{}@{expiry_tick}", directive.describe())
            }
            CommandVerb::ReleaseOverride => "release_override".into(),
            CommandVerb::Directive { name } => format!("directive:{name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideDirective {
    HoldCurrent,
    HoldState { state: String },
}

impl OverrideDirective {
    pub fn describe(&self) -> String {
        match self {
            OverrideDirective::HoldCurrent => "hold_current".into(),
            OverrideDirective::HoldState { state } => format!("hold:{state}"),
        }
    }
}

/// Typed message payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    FaultReport {
        code: String,
        value: f64,
    },
    Status {
        name: String,
        value: f64,
    },
    /// Virtual-sensor forecast of an illumination transition. `exit_azimuth`
    /// is the sun azimuth at the next eclipse exit, the natural pointing
    /// target while caged.
    EclipseForecast {
        start: bool,
        event_tick: u64,
        exit_azimuth: f64,
    },
    FlareAlert {
        active: bool,
        factor: f64,
    },
    ParamUpdate {
        name: String,
        value: f64,
    },
    Command {
        verb: CommandVerb,
    },
    /// Coordination/Collaboration payload; the session id is the joint-plan
    /// bookkeeping handle.
    Joint {
        session: String,
        note: String,
    },
}

impl Payload {
    /// Event name transition guards can match on.
    pub fn event_name(&self) -> String {
        match self {
            Payload::FaultReport { .. } => "fault_report".into(),
            Payload::Status { name, .. } => format!("status:{name}"),
            Payload::EclipseForecast { start: true, .. } => "eclipse_start".into(),
            Payload::EclipseForecast { start: false, .. } => "eclipse_end".into(),
            Payload::FlareAlert { active: true, .. } => "flare_start".into(),
            Payload::FlareAlert { active: false, .. } => "flare_clear".into(),
            Payload::ParamUpdate { .. } => "param_update".into(),
            Payload::Command { .. } => "command".into(),
            Payload::Joint { session, .. } => format!("joint:{session}"),
        }
    }

    /// Numeric fields, exposed to action operands when a guard matched this
    /// message.
    pub fn numeric_fields(&self) -> Vec<(&'static str, f64)> {
        match self {
            Payload::FaultReport { value, .. } => vec![("value", *value)],
            Payload::Status { value, .. } => vec![("value", *value)],
            Payload::EclipseForecast {
                event_tick,
                exit_azimuth,
                ..
            } => vec![
                ("event_tick", *event_tick as f64),
                ("exit_azimuth", *exit_azimuth),
            ],
            Payload::FlareAlert { factor, .. } => vec![("factor", *factor)],
            Payload::ParamUpdate { value, .. } => vec![("value", *value)],
            Payload::Command { .. } | Payload::Joint { .. } => vec![],
        }
    }

    /// Short type tag for trace rows.
    pub fn type_name(&self) -> &'static str {
        match self {
            Payload::FaultReport { .. } => "fault_report",
            Payload::Status { .. } => "status",
            Payload::EclipseForecast { .. } => "eclipse_forecast",
            Payload::FlareAlert { .. } => "flare_alert",
            Payload::ParamUpdate { .. } => "param_update",
            Payload::Command { .. } => "command",
            Payload::Joint { .. } => "joint",
        }
    }

    /// Compact single-token rendering for trace rows.
    pub fn describe(&self) -> String {
        match self {
            Payload::FaultReport { code, value } => format!("{code}={value:.3}"),
            Payload::Status { name, value } => format!("{name}={value:.3}"),
            Payload::EclipseForecast {
                start, event_tick, ..
            } => format!("{}@{event_tick}", if *start { "start" } else { "end" }),
            Payload::FlareAlert { active, factor } => {
                format!("{}:{factor}", if *active { "active" } else { "clear" })
            }
            Payload::ParamUpdate { name, value } => format!("{name}={value:.4}"),
            Payload::Command { verb } => verb.describe(),
            Payload::Joint { session, note } => format!("{session}:{note}"),
        }
    }
}

/// Where a message was addressed.
#[derive(Debug, Clone, PartialEq)]
pub enum Address {
    Topic(String),
    Node(NodePath),
}

impl Address {
    pub fn describe(&self) -> String {
        match self {
            Address::Topic(t) => format!("topic:{t}"),
            Address::Node(n) => n.0.clone(),
        }
    }
}

/// One crosstalk unit. Delivery always happens exactly one tick after send.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: InteractionKind,
    pub sender: NodePath,
    pub address: Address,
    pub payload: Payload,
    pub sent_tick: u64,
    pub deliver_tick: u64,
    pub seq: u64,
}

// ---------------------------------------------------------------------------
// Relationship graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    SuperiorSubordinate,
    PeerToPeer,
}

/// Undirected edge set with direction recorded for superior-subordinate
/// edges. No self-edges; at most one edge per unordered node pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelationshipGraph {
    nodes: BTreeSet<NodePath>,
    edges: BTreeMap<(NodePath, NodePath), RelationKind>,
    /// subordinate -> its direct superior.
    superior_of: BTreeMap<NodePath, NodePath>,
}

impl RelationshipGraph {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(a: &NodePath, b: &NodePath) -> (NodePath, NodePath) {
        if a <= b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        }
    }

    pub fn add_node(&mut self, node: NodePath) {
        self.nodes.insert(node);
    }

    pub fn contains(&self, node: &NodePath) -> bool {
        self.nodes.contains(node)
    }

    fn insert_edge(&mut self, a: &NodePath, b: &NodePath, kind: RelationKind) -> Result<()> {
        if a == b {
            return Err(Error::Config(format!("self-edge on {a}")));
        }
        if !self.nodes.contains(a) || !self.nodes.contains(b) {
            return Err(Error::Config(format!("edge references unknown node: {a} or {b}")));
        }
        let key = Self::key(a, b);
        if self.edges.contains_key(&key) {
            return Err(Error::Config(format!("duplicate edge between {a} and {b}")));
        }
        self.edges.insert(key, kind);
        Ok(())
    }

    pub fn add_superior(&mut self, superior: &NodePath, subordinate: &NodePath) -> Result<()> {
        self.insert_edge(superior, subordinate, RelationKind::SuperiorSubordinate)?;
        self.superior_of.insert(subordinate.clone(), superior.clone());
        Ok(())
    }

    pub fn add_peer(&mut self, a: &NodePath, b: &NodePath) -> Result<()> {
        self.insert_edge(a, b, RelationKind::PeerToPeer)
    }

    pub fn edge_between(&self, a: &NodePath, b: &NodePath) -> Option<RelationKind> {
        self.edges.get(&Self::key(a, b)).copied()
    }

    /// Direct superior, if any.
    pub fn superior(&self, node: &NodePath) -> Option<&NodePath> {
        self.superior_of.get(node)
    }

    /// True when `sup` sits above `sub` on a chain of superior-subordinate
    /// edges. Command authority runs along the whole chain, so a subsystem
    /// can direct its grand-subordinate components.
    pub fn is_superior_of(&self, sup: &NodePath, sub: &NodePath) -> bool {
        let mut cur = sub;
        while let Some(parent) = self.superior_of.get(cur) {
            if parent == sup {
                return true;
            }
            cur = parent;
        }
        false
    }

    /// All transitive superiors of a node, nearest first.
    pub fn superiors_of(&self, node: &NodePath) -> Vec<NodePath> {
        let mut out = Vec::new();
        let mut cur = node;
        while let Some(parent) = self.superior_of.get(cur) {
            out.push(parent.clone());
            cur = parent;
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// Per-kind routing legality. Command is allowed only down a
/// superior-subordinate chain; the other three kinds need a direct edge of
/// either kind. With no edge at all, only topic cooperation remains.
pub fn validate_edge(
    graph: &RelationshipGraph,
    kind: InteractionKind,
    sender: &NodePath,
    addressee: &NodePath,
) -> bool {
    match kind {
        InteractionKind::Command => graph.is_superior_of(sender, addressee),
        InteractionKind::Cooperation
        | InteractionKind::Coordination
        | InteractionKind::Collaboration => graph.edge_between(sender, addressee).is_some(),
    }
}

// ---------------------------------------------------------------------------
// The bus
// ---------------------------------------------------------------------------

/// Outcome of a send attempt. Violations are surfaced as events, not errors.
#[derive(Debug, Clone, PartialEq)]
pub enum SendOutcome {
    Queued { deliveries: usize },
    /// Illegal (kind, relationship) pairing; the whole message was dropped.
    Violation { addressee: NodePath, reason: String },
    /// The bus is disabled for this run; nothing was queued.
    Disabled,
}

#[derive(Debug, Clone)]
pub struct CrosstalkBus {
    graph: RelationshipGraph,
    /// topic -> subscribers. Every key is a declared topic.
    topics: BTreeMap<String, BTreeSet<NodePath>>,
    queue: VecDeque<(NodePath, Message)>,
    next_seq: u64,
    pub enabled: bool,
}

impl CrosstalkBus {
    pub fn new(graph: RelationshipGraph, declared_topics: impl IntoIterator<Item = String>) -> Self {
        let topics = declared_topics
            .into_iter()
            .map(|t| (t, BTreeSet::new()))
            .collect();
        CrosstalkBus {
            graph,
            topics,
            queue: VecDeque::new(),
            next_seq: 0,
            enabled: true,
        }
    }

    pub fn graph(&self) -> &RelationshipGraph {
        &self.graph
    }

    pub fn subscribe(&mut self, node: &NodePath, topic: &str) -> Result<()> {
        match self.topics.get_mut(topic) {
            Some(subs) => {
                subs.insert(node.clone());
                Ok(())
            }
            None => Err(Error::Config(format!("undeclared topic: {topic}"))),
        }
    }

    pub fn subscribers(&self, topic: &str) -> Option<&BTreeSet<NodePath>> {
        self.topics.get(topic)
    }

    /// Cooperation: queue the payload for every current subscriber at
    /// tick + 1. Zero subscribers is silently fine. Returns the fan-out.
    pub fn publish(
        &mut self,
        sender: &NodePath,
        topic: &str,
        payload: Payload,
        tick: u64,
    ) -> Result<usize> {
        let subs = self
            .topics
            .get(topic)
            .ok_or_else(|| Error::Config(format!("undeclared topic: {topic}")))?
            .clone();
        if !self.enabled {
            return Ok(0);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        for recipient in &subs {
            let msg = Message {
                kind: InteractionKind::Cooperation,
                sender: sender.clone(),
                address: Address::Topic(topic.to_string()),
                payload: payload.clone(),
                sent_tick: tick,
                deliver_tick: tick + 1,
                seq,
            };
            self.queue.push_back((recipient.clone(), msg));
        }
        Ok(subs.len())
    }

    /// Addressed send for the non-cooperation kinds. The message is queued
    /// for tick + 1 only if the routing is legal for every addressee;
    /// otherwise it is dropped whole and a violation is reported.
    pub fn send(
        &mut self,
        kind: InteractionKind,
        sender: &NodePath,
        addressees: &[NodePath],
        payload: Payload,
        tick: u64,
    ) -> Result<SendOutcome> {
        if kind == InteractionKind::Cooperation {
            return Err(Error::Usage(
                "cooperation goes through publish(), not send()".into(),
            ));
        }
        if addressees.is_empty() {
            return Err(Error::Usage("send needs at least one addressee".into()));
        }
        if kind == InteractionKind::Command && addressees.len() != 1 {
            return Err(Error::Usage(
                "command messages have exactly one addressee".into(),
            ));
        }
        if matches!(kind, InteractionKind::Coordination | InteractionKind::Collaboration)
            && !matches!(payload, Payload::Joint { .. })
        {
            return Err(Error::Usage(
                "coordination/collaboration payloads must carry a session id".into(),
            ));
        }
        if !self.graph.contains(sender) {
            return Err(Error::Config(format!("unknown sender node: {sender}")));
        }
        for a in addressees {
            if !self.graph.contains(a) {
                return Err(Error::Config(format!("unknown addressee node: {a}")));
            }
        }

        for a in addressees {
            if !validate_edge(&self.graph, kind, sender, a) {
                return Ok(SendOutcome::Violation {
                    addressee: a.clone(),
                    reason: format!("{} from {sender} to {a} has no legal relationship", kind.as_str()),
                });
            }
        }

        if !self.enabled {
            return Ok(SendOutcome::Disabled);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        for a in addressees {
            let msg = Message {
                kind,
                sender: sender.clone(),
                address: Address::Node(a.clone()),
                payload: payload.clone(),
                sent_tick: tick,
                deliver_tick: tick + 1,
                seq,
            };
            self.queue.push_back((a.clone(), msg));
        }
        Ok(SendOutcome::Queued {
            deliveries: addressees.len(),
        })
    }

    /// Drain and return exactly the messages due this tick, as per-node
    /// inboxes ordered by (sent_tick, sender path, sequence number).
    pub fn deliver(&mut self, tick: u64) -> BTreeMap<NodePath, Vec<Message>> {
        let mut inboxes: BTreeMap<NodePath, Vec<Message>> = BTreeMap::new();
        let mut keep = VecDeque::with_capacity(self.queue.len());
        for (recipient, msg) in self.queue.drain(..) {
            debug_assert!(msg.deliver_tick >= tick, "undelivered stale message");
            if msg.deliver_tick == tick {
                inboxes.entry(recipient).or_default().push(msg);
            } else {
                keep.push_back((recipient, msg));
            }
        }
        self.queue = keep;
        for inbox in inboxes.values_mut() {
            inbox.sort_by(|a, b| {
                (a.sent_tick, &a.sender, a.seq).cmp(&(b.sent_tick, &b.sender, b.seq))
            });
        }
        inboxes
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_graph() -> RelationshipGraph {
        let mut g = RelationshipGraph::new();
        for n in ["power", "power/generation", "power/storage", "power/generation/drive"] {
            g.add_node(NodePath::new(n));
        }
        g.add_superior(&"power".into(), &"power/generation".into()).unwrap();
        g.add_superior(&"power".into(), &"power/storage".into()).unwrap();
        g.add_superior(&"power/generation".into(), &"power/generation/drive".into())
            .unwrap();
        g.add_peer(&"power/generation".into(), &"power/storage".into()).unwrap();
        g
    }

    fn bus() -> CrosstalkBus {
        CrosstalkBus::new(demo_graph(), ["faults".to_string(), "status".to_string()])
    }

    fn status(v: f64) -> Payload {
        Payload::Status {
            name: "x".into(),
            value: v,
        }
    }

    #[test]
    fn publish_with_no_subscribers_is_fine() {
        let mut b = bus();
        let n = b.publish(&"power".into(), "faults", status(1.0), 0).unwrap();
        assert_eq!(n, 0);
        assert!(b.deliver(1).is_empty());
    }

    #[test]
    fn publish_fans_out_to_all_subscribers() {
        let mut b = bus();
        b.subscribe(&"power/generation".into(), "faults").unwrap();
        b.subscribe(&"power/storage".into(), "faults").unwrap();
        b.publish(&"power/generation/drive".into(), "faults", status(2.0), 5)
            .unwrap();
        let inboxes = b.deliver(6);
        assert_eq!(inboxes.len(), 2);
        let a = &inboxes[&NodePath::new("power/generation")][0];
        let c = &inboxes[&NodePath::new("power/storage")][0];
        assert_eq!(a.payload, c.payload);
    }

    #[test]
    fn undeclared_topic_is_config_error() {
        let mut b = bus();
        assert!(matches!(
            b.publish(&"power".into(), "nope", status(0.0), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn command_down_the_chain_is_delivered() {
        let mut b = bus();
        let out = b
            .send(
                InteractionKind::Command,
                &"power".into(),
                &["power/generation/drive".into()],
                Payload::Command {
                    verb: CommandVerb::Directive { name: "reset".into() },
                },
                3,
            )
            .unwrap();
        assert_eq!(out, SendOutcome::Queued { deliveries: 1 });
        let inboxes = b.deliver(4);
        assert_eq!(inboxes[&NodePath::new("power/generation/drive")].len(), 1);
    }

    #[test]
    fn command_between_peers_is_a_violation() {
        let mut b = bus();
        let out = b
            .send(
                InteractionKind::Command,
                &"power/generation".into(),
                &["power/storage".into()],
                Payload::Command {
                    verb: CommandVerb::ReleaseOverride,
                },
                1,
            )
            .unwrap();
        assert!(matches!(out, SendOutcome::Violation { .. }));
        assert!(b.deliver(2).is_empty());
    }

    #[test]
    fn command_up_the_chain_is_a_violation() {
        let g = demo_graph();
        assert!(!validate_edge(
            &g,
            InteractionKind::Command,
            &"power/generation/drive".into(),
            &"power".into()
        ));
    }

    #[test]
    fn coordination_between_peers_is_delivered() {
        let mut b = bus();
        let out = b
            .send(
                InteractionKind::Coordination,
                &"power/generation".into(),
                &["power/storage".into()],
                Payload::Joint {
                    session: "sched".into(),
                    note: "share".into(),
                },
                1,
            )
            .unwrap();
        assert_eq!(out, SendOutcome::Queued { deliveries: 1 });
    }

    #[test]
    fn collaboration_needs_an_edge() {
        let mut b = bus();
        // storage and drive share no edge.
        let out = b
            .send(
                InteractionKind::Collaboration,
                &"power/storage".into(),
                &["power/generation/drive".into()],
                Payload::Joint {
                    session: "s".into(),
                    note: "n".into(),
                },
                1,
            )
            .unwrap();
        assert!(matches!(out, SendOutcome::Violation { .. }));
    }

    #[test]
    fn coordination_without_session_payload_is_usage_error() {
        let mut b = bus();
        assert!(matches!(
            b.send(
                InteractionKind::Coordination,
                &"power/generation".into(),
                &["power/storage".into()],
                status(0.0),
                1,
            ),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn command_needs_exactly_one_addressee() {
        let mut b = bus();
        assert!(matches!(
            b.send(
                InteractionKind::Command,
                &"power".into(),
                &["power/generation".into(), "power/storage".into()],
                Payload::Command {
                    verb: CommandVerb::ReleaseOverride
                },
                0,
            ),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn latency_law_never_same_tick() {
        let mut b = bus();
        b.subscribe(&"power".into(), "status").unwrap();
        b.publish(&"power/storage".into(), "status", status(1.0), 7).unwrap();
        assert!(b.deliver(7).is_empty());
        let inboxes = b.deliver(8);
        assert_eq!(inboxes[&NodePath::new("power")].len(), 1);
        assert_eq!(b.pending(), 0);
    }

    #[test]
    fn inbox_ordered_by_sender_path_then_seq() {
        let mut b = bus();
        b.subscribe(&"power".into(), "status").unwrap();
        // Two same-tick publishes from different senders, issued in reverse
        // path order.
        b.publish(&"power/storage".into(), "status", status(1.0), 2).unwrap();
        b.publish(&"power/generation".into(), "status", status(2.0), 2).unwrap();
        let inboxes = b.deliver(3);
        let inbox = &inboxes[&NodePath::new("power")];
        assert_eq!(inbox[0].sender, NodePath::new("power/generation"));
        assert_eq!(inbox[1].sender, NodePath::new("power/storage"));
    }

    #[test]
    fn disabled_bus_swallows_traffic() {
        let mut b = bus();
        b.enabled = false;
        b.subscribe(&"power".into(), "status").unwrap();
        assert_eq!(b.publish(&"power/storage".into(), "status", status(1.0), 0).unwrap(), 0);
        let out = b
            .send(
                InteractionKind::Command,
                &"power".into(),
                &["power/storage".into()],
                Payload::Command {
                    verb: CommandVerb::ReleaseOverride,
                },
                0,
            )
            .unwrap();
        assert_eq!(out, SendOutcome::Disabled);
        assert!(b.deliver(1).is_empty());
    }

    #[test]
    fn graph_rejects_self_and_duplicate_edges() {
        let mut g = RelationshipGraph::new();
        g.add_node("a".into());
        g.add_node("a/b".into());
        assert!(g.add_peer(&"a".into(), &"a".into()).is_err());
        g.add_superior(&"a".into(), &"a/b".into()).unwrap();
        assert!(g.add_peer(&"a".into(), &"a/b".into()).is_err());
    }

    #[test]
    fn transitive_superiority() {
        let g = demo_graph();
        assert!(g.is_superior_of(&"power".into(), &"power/generation/drive".into()));
        assert!(!g.is_superior_of(&"power/storage".into(), &"power/generation/drive".into()));
        assert_eq!(
            g.superiors_of(&"power/generation/drive".into()),
            vec![NodePath::new("power/generation"), NodePath::new("power")]
        );
    }

    #[test]
    fn conservation_every_legal_send_delivered_once() {
        let mut b = bus();
        b.subscribe(&"power".into(), "status").unwrap();
        let mut sent = 0;
        for tick in 0..20u64 {
            b.publish(&"power/storage".into(), "status", status(tick as f64), tick)
                .unwrap();
            sent += 1;
            b.send(
                InteractionKind::Command,
                &"power".into(),
                &["power/generation".into()],
                Payload::Command {
                    verb: CommandVerb::ReleaseOverride,
                },
                tick,
            )
            .unwrap();
            sent += 1;
        }
        let mut delivered = 0;
        for tick in 0..=21u64 {
            delivered += b.deliver(tick).values().map(|v| v.len()).sum::<usize>();
        }
        assert_eq!(delivered, sent);
        assert_eq!(b.pending(), 0);
    }
}
