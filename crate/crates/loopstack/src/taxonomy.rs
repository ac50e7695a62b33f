//! The system decomposition tree: levels, factors, and measures. The tree is
//! the registry loop pairs attach to, the source of relationship edges
//! (parent-child edges are the superior-subordinate relationships; peer edges
//! come only from the declared interfaces factor), and the target of the
//! autonomy-coverage lint.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autonomy::{sscc_coverage, Param, StateMachine};
use crate::bus::{NodePath, RelationKind, RelationshipGraph};
use crate::control::{ControllerDef, FilterDef, PlantDef};
use crate::error::{Error, Result};

/// Decomposition levels, top to bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelKind {
    Mission,
    Element,
    Segment,
    System,
    Subsystem,
    Assembly,
    Subassembly,
    Component,
}

impl LevelKind {
    pub const ALL: [LevelKind; 8] = [
        LevelKind::Mission,
        LevelKind::Element,
        LevelKind::Segment,
        LevelKind::System,
        LevelKind::Subsystem,
        LevelKind::Assembly,
        LevelKind::Subassembly,
        LevelKind::Component,
    ];

    /// Depth index, 0 at the top.
    pub fn depth(self) -> usize {
        Self::ALL.iter().position(|l| *l == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LevelKind::Mission => "mission",
            LevelKind::Element => "element",
            LevelKind::Segment => "segment",
            LevelKind::System => "system",
            LevelKind::Subsystem => "subsystem",
            LevelKind::Assembly => "assembly",
            LevelKind::Subassembly => "subassembly",
            LevelKind::Component => "component",
        }
    }
}

/// Measure families attached to the upper levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    /// Measures of Objective — Mission level.
    Moo,
    /// Measures of Effectiveness — Element level.
    Moe,
    /// Measures of Capability — Segment level.
    Moc,
    /// Measures of Performance — System level.
    Mop,
    /// Technical Performance Measures — Subsystem level.
    Tpm,
}

impl MeasureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MeasureKind::Moo => "MOO",
            MeasureKind::Moe => "MOE",
            MeasureKind::Moc => "MOC",
            MeasureKind::Mop => "MOP",
            MeasureKind::Tpm => "TPM",
        }
    }
}

/// The fixed level-to-measure mapping. Levels below Subsystem carry none.
pub fn measure_kind(level: LevelKind) -> Option<MeasureKind> {
    match level {
        LevelKind::Mission => Some(MeasureKind::Moo),
        LevelKind::Element => Some(MeasureKind::Moe),
        LevelKind::Segment => Some(MeasureKind::Moc),
        LevelKind::System => Some(MeasureKind::Mop),
        LevelKind::Subsystem => Some(MeasureKind::Tpm),
        LevelKind::Assembly | LevelKind::Subassembly | LevelKind::Component => None,
    }
}

/// The factor columns of one node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Factors {
    pub wbs_pbs: String,
    pub functional: String,
    /// Derived from the level; stored for display.
    pub measure: Option<MeasureKind>,
    /// Optional label naming the metric expression the measure attaches to.
    pub measure_label: Option<String>,
    pub interfaces: Vec<NodePath>,
    pub configurational: Vec<String>,
    /// Stored, not executed.
    pub procedural: Vec<String>,
}

/// Inner-loop block configuration for a node.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    pub controller: ControllerDef,
    pub plant: PlantDef,
    pub filter: FilterDef,
    /// Bound used when computing settle metrics for this loop.
    pub settled_bound: f64,
}

/// Per-channel environment sensing configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvChannelCfg {
    pub name: String,
    /// Smoothing weight of this channel's feedback filter.
    pub alpha: f64,
}

/// Wiring for the slow-degradation estimator a supervisory block may run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorCfg {
    pub window: f64,
    pub rho: f64,
    pub nominal_a: f64,
    pub sample_channel: String,
    pub publish_topic: String,
    pub command_target: NodePath,
    pub command_param: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutonomyConfig {
    pub machine: StateMachine,
    pub params: BTreeMap<String, Param>,
    pub env_channels: Vec<EnvChannelCfg>,
    pub publishes: Vec<String>,
    pub subscribes: Vec<String>,
    pub accepts: Vec<String>,
    pub ack_topic: Option<String>,
    pub estimator: Option<EstimatorCfg>,
}

/// A node's attached loop pair. The control side is always present; a
/// control loop without a supervisory block is legal but flagged by lint.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopAttachment {
    pub control: ControlConfig,
    pub autonomy: Option<AutonomyConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaxonomyNode {
    pub path: NodePath,
    pub level: LevelKind,
    pub factors: Factors,
    pub attachment: Option<LoopAttachment>,
}

/// A validated decomposition tree plus the relationship graph derived from
/// it. Immutable after load.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub nodes: BTreeMap<NodePath, TaxonomyNode>,
    pub graph: RelationshipGraph,
    pub topics: Vec<String>,
    pub allow_level_skips: bool,
}

impl Model {
    pub fn node(&self, path: &NodePath) -> Option<&TaxonomyNode> {
        self.nodes.get(path)
    }

    /// Nodes ordered top-down: by level depth, then path. This is the
    /// supervisory stepping order.
    pub fn nodes_top_down(&self) -> Vec<&TaxonomyNode> {
        let mut v: Vec<&TaxonomyNode> = self.nodes.values().collect();
        v.sort_by_key(|n| (n.level.depth(), n.path.clone()));
        v
    }
}

/// Validate a parsed node list and derive the relationship graph.
/// Parent-child edges become superior-subordinate; declared interface pairs
/// become peer-to-peer.
pub fn build_tree(
    name: String,
    nodes: Vec<TaxonomyNode>,
    topics: Vec<String>,
    allow_level_skips: bool,
) -> Result<Model> {
    let merr = |path: &NodePath, d: String| Error::Model {
        path: path.0.clone(),
        detail: d,
    };

    if nodes.is_empty() {
        return Err(Error::model("<model>", "no nodes declared"));
    }

    let mut map: BTreeMap<NodePath, TaxonomyNode> = BTreeMap::new();
    for node in nodes {
        if node.path.0.is_empty() || node.path.0.split('/').any(|seg| seg.is_empty()) {
            return Err(merr(&node.path, "empty path segment".into()));
        }
        if node.path.0.chars().any(|c| c.is_whitespace() || c == '=') {
            return Err(merr(&node.path, "path contains whitespace or '='".into()));
        }
        if map.insert(node.path.clone(), node.clone()).is_some() {
            return Err(merr(&node.path, "duplicate path".into()));
        }
    }

    let mut graph = RelationshipGraph::new();
    for path in map.keys() {
        graph.add_node(path.clone());
    }

    // Parent-child structure and level steps.
    for node in map.values() {
        if let Some(parent_path) = node.path.parent() {
            let parent = map.get(&parent_path).ok_or_else(|| {
                merr(&node.path, format!("parent {parent_path} not declared"))
            })?;
            let pd = parent.level.depth();
            let cd = node.level.depth();
            let legal = if allow_level_skips { cd > pd } else { cd == pd + 1 };
            if !legal {
                return Err(merr(
                    &node.path,
                    format!(
                        "level {} cannot sit directly under {} (levels step one at a time)",
                        node.level.as_str(),
                        parent.level.as_str()
                    ),
                ));
            }
            graph.add_superior(&parent_path, &node.path)?;
        }
    }

    // Measure-kind consistency.
    let mut map2 = map.clone();
    for node in map2.values_mut() {
        let expected = measure_kind(node.level);
        match (node.factors.measure, expected) {
            (Some(m), Some(e)) if m != e => {
                return Err(merr(
                    &node.path,
                    format!(
                        "measure {} does not match level {} (expected {})",
                        m.as_str(),
                        node.level.as_str(),
                        e.as_str()
                    ),
                ));
            }
            (Some(m), None) => {
                return Err(merr(
                    &node.path,
                    format!("level {} carries no measure kind, got {}", node.level.as_str(), m.as_str()),
                ));
            }
            _ => node.factors.measure = expected,
        }
    }

    // Interface pairs become peer edges; symmetric declarations are fine.
    for node in map2.values() {
        for peer in &node.factors.interfaces {
            if !map2.contains_key(peer) {
                return Err(merr(
                    &node.path,
                    format!("interface references unknown node {peer}"),
                ));
            }
            match graph.edge_between(&node.path, peer) {
                None => graph.add_peer(&node.path, peer)?,
                Some(RelationKind::PeerToPeer) => {} // declared from both sides
                Some(RelationKind::SuperiorSubordinate) => {
                    return Err(merr(
                        &node.path,
                        format!("interface to {peer} duplicates a parent-child edge"),
                    ));
                }
            }
        }
    }

    // Supervisory config referential checks.
    let topic_set: std::collections::BTreeSet<&String> = topics.iter().collect();
    for node in map2.values() {
        if let Some(att) = &node.attachment {
            att.control.controller.validate()?;
            att.control.plant.validate()?;
            att.control.filter.validate()?;
            if let Some(a) = &att.autonomy {
                a.machine.validate()?;
                for t in a.publishes.iter().chain(&a.subscribes) {
                    if !topic_set.contains(t) {
                        return Err(merr(&node.path, format!("undeclared topic {t}")));
                    }
                }
                if let Some(t) = &a.ack_topic {
                    if !topic_set.contains(t) {
                        return Err(merr(&node.path, format!("undeclared ack topic {t}")));
                    }
                }
                for ch in &a.env_channels {
                    if !(ch.alpha > 0.0 && ch.alpha <= 1.0) {
                        return Err(merr(
                            &node.path,
                            format!("channel {} alpha out of range", ch.name),
                        ));
                    }
                }
                if let Some(est) = &a.estimator {
                    if !map2.contains_key(&est.command_target) {
                        return Err(merr(
                            &node.path,
                            format!("estimator targets unknown node {}", est.command_target),
                        ));
                    }
                    if !topic_set.contains(&est.publish_topic) {
                        return Err(merr(
                            &node.path,
                            format!("estimator publishes undeclared topic {}", est.publish_topic),
                        ));
                    }
                }
            }
        }
    }

    Ok(Model {
        name,
        nodes: map2,
        graph,
        topics,
        allow_level_skips,
    })
}

// ---------------------------------------------------------------------------
// Lint
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LintKind {
    /// (a) A control loop with no supervisory block around it.
    MissingAutonomy,
    /// (b) The block's machine leaves one or more SSCC functions uncovered.
    SsccGap,
    /// (c) The block declares no crosstalk topics and no peer interfaces.
    NoCrosstalk,
    /// (d) The block declares no accepted command vocabulary.
    NoCommandVocabulary,
}

impl LintKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LintKind::MissingAutonomy => "missing_autonomy",
            LintKind::SsccGap => "sscc_gap",
            LintKind::NoCrosstalk => "no_crosstalk",
            LintKind::NoCommandVocabulary => "no_command_vocabulary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LintFinding {
    pub kind: LintKind,
    pub node: NodePath,
    pub detail: String,
}

/// One finding per violation, in path order. Linting is a pure function of
/// the model: running it twice yields identical findings.
pub fn lint_autonomy_coverage(model: &Model) -> Vec<LintFinding> {
    let mut findings = Vec::new();
    for node in model.nodes.values() {
        let Some(att) = &node.attachment else { continue };
        match &att.autonomy {
            None => findings.push(LintFinding {
                kind: LintKind::MissingAutonomy,
                node: node.path.clone(),
                detail: "control loop has no autonomy block around it".into(),
            }),
            Some(a) => {
                let cov = sscc_coverage(&a.machine);
                if !cov.complete() {
                    let missing: Vec<&str> = cov.missing().iter().map(|t| t.as_str()).collect();
                    findings.push(LintFinding {
                        kind: LintKind::SsccGap,
                        node: node.path.clone(),
                        detail: format!("machine {} covers no {}", a.machine.name, missing.join(", ")),
                    });
                }
                if a.publishes.is_empty()
                    && a.subscribes.is_empty()
                    && node.factors.interfaces.is_empty()
                {
                    findings.push(LintFinding {
                        kind: LintKind::NoCrosstalk,
                        node: node.path.clone(),
                        detail: "no crosstalk topics or interface edges declared".into(),
                    });
                }
                if a.accepts.is_empty() {
                    findings.push(LintFinding {
                        kind: LintKind::NoCommandVocabulary,
                        node: node.path.clone(),
                        detail: "no autonomy input vocabulary declared".into(),
                    });
                }
            }
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autonomy::{ModeSpec, StateDef, ValueSpec};

    fn bare_node(path: &str, level: LevelKind) -> TaxonomyNode {
        TaxonomyNode {
            path: NodePath::new(path),
            level,
            factors: Factors::default(),
            attachment: None,
        }
    }

    fn holder_control() -> ControlConfig {
        ControlConfig {
            controller: ControllerDef::Pi {
                kp: 0.0,
                ki: 0.0,
                integral_min: -1.0,
                integral_max: 1.0,
            },
            plant: PlantDef::Holder { gain: 1.0 },
            filter: FilterDef { alpha: 1.0 },
            settled_bound: 0.1,
        }
    }

    fn one_state_machine(name: &str) -> StateMachine {
        StateMachine {
            name: name.into(),
            states: vec![StateDef {
                id: "S".into(),
                reference: ValueSpec::Value(0.0),
                mode: ModeSpec::Regulate,
                entry: vec![],
            }],
            transitions: vec![],
            initial: "S".into(),
            safe_state: None,
            modes: vec!["NORMAL".into()],
        }
    }

    #[test]
    fn measure_mapping() {
        assert_eq!(measure_kind(LevelKind::System), Some(MeasureKind::Mop));
        assert_eq!(measure_kind(LevelKind::Subsystem), Some(MeasureKind::Tpm));
        assert_eq!(measure_kind(LevelKind::Component), None);
        assert_eq!(measure_kind(LevelKind::Mission), Some(MeasureKind::Moo));
    }

    #[test]
    fn single_root_is_a_valid_tree() {
        let m = build_tree(
            "t".into(),
            vec![bare_node("power", LevelKind::Subsystem)],
            vec![],
            false,
        )
        .unwrap();
        assert_eq!(m.nodes.len(), 1);
        assert_eq!(m.graph.edge_count(), 0);
    }

    #[test]
    fn level_skip_is_a_load_error() {
        let err = build_tree(
            "t".into(),
            vec![
                bare_node("sat", LevelKind::System),
                bare_node("sat/gen", LevelKind::Assembly),
            ],
            vec![],
            false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Model { .. }));
    }

    #[test]
    fn level_skip_allowed_when_configured() {
        assert!(build_tree(
            "t".into(),
            vec![
                bare_node("sat", LevelKind::System),
                bare_node("sat/gen", LevelKind::Assembly),
            ],
            vec![],
            true,
        )
        .is_ok());
    }

    #[test]
    fn duplicate_path_rejected() {
        let err = build_tree(
            "t".into(),
            vec![
                bare_node("power", LevelKind::Subsystem),
                bare_node("power", LevelKind::Subsystem),
            ],
            vec![],
            false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Model { .. }));
    }

    #[test]
    fn dangling_interface_rejected() {
        let mut n = bare_node("power", LevelKind::Subsystem);
        n.factors.interfaces.push(NodePath::new("thermal"));
        let err = build_tree("t".into(), vec![n], vec![], false).unwrap_err();
        assert!(matches!(err, Error::Model { .. }));
    }

    #[test]
    fn parent_edges_superior_interface_edges_peer() {
        let mut gen = bare_node("power/generation", LevelKind::Assembly);
        gen.factors.interfaces.push(NodePath::new("power/storage"));
        let m = build_tree(
            "t".into(),
            vec![
                bare_node("power", LevelKind::Subsystem),
                gen,
                bare_node("power/storage", LevelKind::Assembly),
            ],
            vec![],
            false,
        )
        .unwrap();
        assert_eq!(
            m.graph
                .edge_between(&"power".into(), &"power/generation".into()),
            Some(RelationKind::SuperiorSubordinate)
        );
        assert_eq!(
            m.graph
                .edge_between(&"power/generation".into(), &"power/storage".into()),
            Some(RelationKind::PeerToPeer)
        );
    }

    #[test]
    fn rebuild_yields_identical_graph() {
        let nodes = || {
            vec![
                bare_node("power", LevelKind::Subsystem),
                bare_node("power/generation", LevelKind::Assembly),
            ]
        };
        let a = build_tree("t".into(), nodes(), vec![], false).unwrap();
        let b = build_tree("t".into(), nodes(), vec![], false).unwrap();
        assert_eq!(a.graph, b.graph);
    }

    #[test]
    fn lint_flags_control_without_autonomy() {
        let mut n = bare_node("power", LevelKind::Subsystem);
        n.attachment = Some(LoopAttachment {
            control: holder_control(),
            autonomy: None,
        });
        let m = build_tree("t".into(), vec![n], vec![], false).unwrap();
        let findings = lint_autonomy_coverage(&m);
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].kind, LintKind::MissingAutonomy);
    }

    #[test]
    fn lint_flags_sscc_gap_no_crosstalk_and_no_vocabulary() {
        let mut n = bare_node("power", LevelKind::Subsystem);
        n.attachment = Some(LoopAttachment {
            control: holder_control(),
            autonomy: Some(AutonomyConfig {
                machine: one_state_machine("m"),
                params: BTreeMap::new(),
                env_channels: vec![],
                publishes: vec![],
                subscribes: vec![],
                accepts: vec![],
                ack_topic: None,
                estimator: None,
            }),
        });
        let m = build_tree("t".into(), vec![n], vec![], false).unwrap();
        let findings = lint_autonomy_coverage(&m);
        let kinds: Vec<LintKind> = findings.iter().map(|f| f.kind).collect();
        assert_eq!(
            kinds,
            vec![LintKind::SsccGap, LintKind::NoCrosstalk, LintKind::NoCommandVocabulary]
        );
    }

    #[test]
    fn lint_is_idempotent() {
        let m = build_tree(
            "t".into(),
            vec![bare_node("power", LevelKind::Subsystem)],
            vec![],
            false,
        )
        .unwrap();
        assert_eq!(lint_autonomy_coverage(&m), lint_autonomy_coverage(&m));
    }
}
