//! Model file format: a TOML document declaring the decomposition tree
//! (paths, levels, factors) and, per node, an optional loop pair — the
//! inner-loop block configuration plus a supervisory block referencing a
//! built-in machine by name or defining one inline. See docs/formats.md for
//! the schema.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::autonomy::{
    Action, Cmp, CommandVerbSpec, Guard, ModeSpec, Param, PayloadSpec, Sscc, StateDef,
    StateMachine, TaggedAction, Transition, ValueSpec,
};
use crate::bus::{InteractionKind, NodePath, OverrideDirective};
use crate::control::{ControllerDef, FilterDef, PlantDef};
use crate::error::{Error, Result};
use crate::mission;
use crate::taxonomy::{
    build_tree, AutonomyConfig, ControlConfig, EnvChannelCfg, EstimatorCfg, Factors,
    LoopAttachment, Model, TaxonomyNode,
};
use crate::taxonomy::LevelKind;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    name: String,
    #[serde(default)]
    allow_level_skips: bool,
    #[serde(default)]
    topics: Vec<String>,
    nodes: Vec<NodeCfg>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeCfg {
    path: String,
    level: LevelKind,
    #[serde(default)]
    wbs: String,
    #[serde(default)]
    functional: String,
    #[serde(default)]
    measure_label: Option<String>,
    #[serde(default)]
    interfaces: Vec<String>,
    #[serde(default)]
    configurations: Vec<String>,
    #[serde(default)]
    procedures: Vec<String>,
    #[serde(default)]
    control: Option<ControlCfg>,
    #[serde(default)]
    autonomy: Option<AutonomyCfg>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlCfg {
    controller: ControllerDef,
    plant: PlantDef,
    filter: FilterDef,
    #[serde(default = "default_settled_bound")]
    settled_bound: f64,
}

fn default_settled_bound() -> f64 {
    0.05
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AutonomyCfg {
    #[serde(default)]
    machine: Option<String>,
    #[serde(default)]
    machine_def: Option<MachineDefCfg>,
    /// Value overrides applied onto the machine's parameter table.
    #[serde(default)]
    params: BTreeMap<String, f64>,
    #[serde(default)]
    env: Vec<EnvChannelRaw>,
    #[serde(default)]
    publishes: Vec<String>,
    #[serde(default)]
    subscribes: Vec<String>,
    #[serde(default)]
    accepts: Vec<String>,
    #[serde(default)]
    ack_topic: Option<String>,
    #[serde(default)]
    estimator: Option<EstimatorRaw>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvChannelRaw {
    name: String,
    #[serde(default = "default_alpha")]
    alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatorRaw {
    window: f64,
    #[serde(default = "default_rho")]
    rho: f64,
    nominal_a: f64,
    sample_channel: String,
    publish_topic: String,
    command_target: String,
    command_param: String,
}

fn default_rho() -> f64 {
    0.9
}

// ---------------------------------------------------------------------------
// Inline machine definitions
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MachineDefCfg {
    name: String,
    initial: String,
    #[serde(default)]
    safe_state: Option<String>,
    #[serde(default = "default_modes")]
    modes: Vec<String>,
    #[serde(default)]
    params: BTreeMap<String, ParamCfg>,
    states: Vec<StateCfg>,
    #[serde(default)]
    transitions: Vec<TransitionCfg>,
}

fn default_modes() -> Vec<String> {
    vec!["NORMAL".into(), "SAFE".into()]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamCfg {
    value: f64,
    #[serde(default)]
    unit: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateCfg {
    id: String,
    #[serde(default)]
    reference: Option<ValueCfg>,
    #[serde(default)]
    mode: Option<ModeCfg>,
    #[serde(default)]
    entry: Vec<TaggedActionCfg>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModeCfg {
    Regulate,
    Track,
    Hold { target: ValueCfg },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValueCfg {
    #[serde(default)]
    value: Option<f64>,
    #[serde(default)]
    param: Option<String>,
    #[serde(default)]
    channel: Option<String>,
    #[serde(default)]
    from_message: Option<String>,
}

impl ValueCfg {
    fn compile(&self, ctx: &str) -> Result<ValueSpec> {
        let picks = [
            self.value.map(ValueSpec::Value),
            self.param.clone().map(ValueSpec::Param),
            self.channel.clone().map(ValueSpec::Channel),
            self.from_message.clone().map(ValueSpec::MessageField),
        ];
        let mut set: Vec<ValueSpec> = picks.into_iter().flatten().collect();
        match set.len() {
            1 => Ok(set.remove(0)),
            0 => Err(Error::Parse(format!(
                "{ctx}: value needs one of value/param/channel/from_message"
            ))),
            _ => Err(Error::Parse(format!("{ctx}: value sets more than one source"))),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransitionCfg {
    from: String,
    to: String,
    sscc: Sscc,
    guard: GuardCfg,
    #[serde(default)]
    actions: Vec<ActionCfg>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GuardCfg {
    #[serde(default)]
    signal: Option<SignalCfg>,
    #[serde(default)]
    message: Option<String>,
    #[serde(default)]
    directive: Option<String>,
    #[serde(default)]
    param: Option<ParamCmpCfg>,
    #[serde(default)]
    mode_is: Option<String>,
    #[serde(default)]
    all: Option<Vec<GuardCfg>>,
    #[serde(default)]
    any: Option<Vec<GuardCfg>>,
    #[serde(default)]
    not: Option<Box<GuardCfg>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SignalCfg {
    channel: String,
    op: Cmp,
    #[serde(default)]
    value: Option<f64>,
    #[serde(default)]
    param: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamCmpCfg {
    name: String,
    op: Cmp,
    #[serde(default)]
    value: Option<f64>,
    #[serde(default)]
    param: Option<String>,
}

fn rhs_of(value: Option<f64>, param: Option<String>, ctx: &str) -> Result<ValueSpec> {
    match (value, param) {
        (Some(v), None) => Ok(ValueSpec::Value(v)),
        (None, Some(p)) => Ok(ValueSpec::Param(p)),
        _ => Err(Error::Parse(format!(
            "{ctx}: comparison needs exactly one of value/param"
        ))),
    }
}

impl GuardCfg {
    fn compile(&self, ctx: &str) -> Result<Guard> {
        let mut out: Vec<Guard> = Vec::new();
        if let Some(s) = &self.signal {
            out.push(Guard::Signal {
                channel: s.channel.clone(),
                op: s.op,
                rhs: rhs_of(s.value, s.param.clone(), ctx)?,
            });
        }
        if let Some(event) = &self.message {
            out.push(Guard::OnMessage { event: event.clone() });
        }
        if let Some(name) = &self.directive {
            out.push(Guard::OnDirective { name: name.clone() });
        }
        if let Some(p) = &self.param {
            out.push(Guard::ParamCmp {
                name: p.name.clone(),
                op: p.op,
                rhs: rhs_of(p.value, p.param.clone(), ctx)?,
            });
        }
        if let Some(mode) = &self.mode_is {
            out.push(Guard::ModeIs { mode: mode.clone() });
        }
        if let Some(gs) = &self.all {
            out.push(Guard::All(
                gs.iter().map(|g| g.compile(ctx)).collect::<Result<_>>()?,
            ));
        }
        if let Some(gs) = &self.any {
            out.push(Guard::Any(
                gs.iter().map(|g| g.compile(ctx)).collect::<Result<_>>()?,
            ));
        }
        if let Some(g) = &self.not {
            out.push(Guard::Not(Box::new(g.compile(ctx)?)));
        }
        match out.len() {
            1 => Ok(out.remove(0)),
            0 => Err(Error::Parse(format!("{ctx}: empty guard"))),
            _ => Err(Error::Parse(format!(
                "{ctx}: guard sets more than one form (wrap in all/any)"
            ))),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaggedActionCfg {
    #[serde(flatten)]
    action: ActionCfg,
    sscc: Sscc,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionCfg {
    #[serde(default)]
    publish: Option<PublishCfg>,
    #[serde(default)]
    command: Option<CommandCfg>,
    #[serde(default)]
    joint: Option<JointCfg>,
    #[serde(default)]
    set_param: Option<SetOwnParamCfg>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PublishCfg {
    topic: String,
    #[serde(default)]
    fault: Option<FaultCfg>,
    #[serde(default)]
    status: Option<NamedValueCfg>,
    #[serde(default)]
    param_update: Option<NamedValueCfg>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaultCfg {
    code: String,
    value: ValueCfg,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedValueCfg {
    name: String,
    value: ValueCfg,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommandCfg {
    to: String,
    #[serde(default)]
    set_param: Option<SetParamCfg>,
    #[serde(default)]
    set_mode: Option<String>,
    #[serde(default)]
    directive: Option<String>,
    #[serde(default, rename = "override")]
    override_: Option<OverrideCfg>,
    #[serde(default)]
    release_override: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetParamCfg {
    name: String,
    value: ValueCfg,
    #[serde(default)]
    unit: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OverrideCfg {
    #[serde(default)]
    hold: Option<String>,
    expiry_tick: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointCfg {
    kind: InteractionKind,
    to: String,
    session: String,
    #[serde(default)]
    note: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetOwnParamCfg {
    name: String,
    value: ValueCfg,
}

impl ActionCfg {
    fn compile(&self, ctx: &str) -> Result<Action> {
        let mut out: Vec<Action> = Vec::new();
        if let Some(p) = &self.publish {
            let payload = match (&p.fault, &p.status, &p.param_update) {
                (Some(f), None, None) => PayloadSpec::FaultReport {
                    code: f.code.clone(),
                    value: f.value.compile(ctx)?,
                },
                (None, Some(s), None) => PayloadSpec::Status {
                    name: s.name.clone(),
                    value: s.value.compile(ctx)?,
                },
                (None, None, Some(u)) => PayloadSpec::ParamUpdate {
                    name: u.name.clone(),
                    value: u.value.compile(ctx)?,
                },
                _ => {
                    return Err(Error::Parse(format!(
                        "{ctx}: publish needs exactly one of fault/status/param_update"
                    )))
                }
            };
            out.push(Action::Publish {
                topic: p.topic.clone(),
                payload,
            });
        }
        if let Some(c) = &self.command {
            let forms = usize::from(c.set_param.is_some())
                + usize::from(c.set_mode.is_some())
                + usize::from(c.directive.is_some())
                + usize::from(c.override_.is_some())
                + usize::from(c.release_override.is_some());
            if forms != 1 {
                return Err(Error::Parse(format!("{ctx}: command needs exactly one verb")));
            }
            let verb = if let Some(sp) = &c.set_param {
                CommandVerbSpec::SetParam {
                    name: sp.name.clone(),
                    value: sp.value.compile(ctx)?,
                    unit: sp.unit.clone(),
                }
            } else if let Some(mode) = &c.set_mode {
                CommandVerbSpec::SetMode { mode: mode.clone() }
            } else if let Some(name) = &c.directive {
                CommandVerbSpec::Directive { name: name.clone() }
            } else if let Some(o) = &c.override_ {
                CommandVerbSpec::Override {
                    directive: match &o.hold {
                        Some(state) => OverrideDirective::HoldState { state: state.clone() },
                        None => OverrideDirective::HoldCurrent,
                    },
                    expiry_tick: o.expiry_tick,
                }
            } else {
                CommandVerbSpec::ReleaseOverride
            };
            out.push(Action::SendCommand {
                to: NodePath::new(&c.to),
                verb,
            });
        }
        if let Some(j) = &self.joint {
            if !matches!(
                j.kind,
                InteractionKind::Coordination | InteractionKind::Collaboration
            ) {
                return Err(Error::Parse(format!(
                    "{ctx}: joint kind must be coordination or collaboration"
                )));
            }
            out.push(Action::SendJoint {
                kind: j.kind,
                to: NodePath::new(&j.to),
                session: j.session.clone(),
                note: j.note.clone(),
            });
        }
        if let Some(s) = &self.set_param {
            out.push(Action::SetOwnParam {
                name: s.name.clone(),
                value: s.value.compile(ctx)?,
            });
        }
        match out.len() {
            1 => Ok(out.remove(0)),
            0 => Err(Error::Parse(format!("{ctx}: empty action"))),
            _ => Err(Error::Parse(format!("{ctx}: action sets more than one form"))),
        }
    }
}

impl MachineDefCfg {
    fn compile(&self) -> Result<(StateMachine, BTreeMap<String, Param>)> {
        let ctx = format!("machine {}", self.name);
        let states = self
            .states
            .iter()
            .map(|s| {
                Ok(StateDef {
                    id: s.id.clone(),
                    reference: match &s.reference {
                        Some(v) => v.compile(&ctx)?,
                        None => ValueSpec::Value(0.0),
                    },
                    mode: match &s.mode {
                        None | Some(ModeCfg::Regulate) => ModeSpec::Regulate,
                        Some(ModeCfg::Track) => ModeSpec::Track,
                        Some(ModeCfg::Hold { target }) => ModeSpec::Hold {
                            target: target.compile(&ctx)?,
                        },
                    },
                    entry: s
                        .entry
                        .iter()
                        .map(|ta| {
                            Ok(TaggedAction {
                                action: ta.action.compile(&ctx)?,
                                sscc: ta.sscc,
                            })
                        })
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let transitions = self
            .transitions
            .iter()
            .map(|t| {
                Ok(Transition {
                    from: t.from.clone(),
                    to: t.to.clone(),
                    guard: t.guard.compile(&ctx)?,
                    actions: t
                        .actions
                        .iter()
                        .map(|a| a.compile(&ctx))
                        .collect::<Result<_>>()?,
                    sscc: t.sscc,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let machine = StateMachine {
            name: self.name.clone(),
            states,
            transitions,
            initial: self.initial.clone(),
            safe_state: self.safe_state.clone(),
            modes: self.modes.clone(),
        };
        machine.validate()?;
        let params = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), Param::new(p.value, &p.unit)))
            .collect();
        Ok((machine, params))
    }
}

// ---------------------------------------------------------------------------
// Top-level compile
// ---------------------------------------------------------------------------

fn compile_autonomy(path: &str, cfg: &AutonomyCfg) -> Result<AutonomyConfig> {
    let (machine, mut params) = match (&cfg.machine, &cfg.machine_def) {
        (Some(name), None) => mission::builtin_machine(name)?.ok_or_else(|| {
            Error::model(path, format!("unknown built-in machine {name}"))
        })?,
        (None, Some(def)) => def.compile()?,
        _ => {
            return Err(Error::model(
                path,
                "autonomy needs exactly one of machine / machine_def",
            ))
        }
    };
    for (name, value) in &cfg.params {
        match params.get_mut(name) {
            Some(p) => p.value = *value,
            None => {
                return Err(Error::model(
                    path,
                    format!("param override {name} not in machine table"),
                ))
            }
        }
    }
    mission::validate_machine_params(&machine.name, &params)?;
    Ok(AutonomyConfig {
        machine,
        params,
        env_channels: cfg
            .env
            .iter()
            .map(|e| EnvChannelCfg {
                name: e.name.clone(),
                alpha: e.alpha,
            })
            .collect(),
        publishes: cfg.publishes.clone(),
        subscribes: cfg.subscribes.clone(),
        accepts: cfg.accepts.clone(),
        ack_topic: cfg.ack_topic.clone(),
        estimator: cfg.estimator.as_ref().map(|e| EstimatorCfg {
            window: e.window,
            rho: e.rho,
            nominal_a: e.nominal_a,
            sample_channel: e.sample_channel.clone(),
            publish_topic: e.publish_topic.clone(),
            command_target: NodePath::new(&e.command_target),
            command_param: e.command_param.clone(),
        }),
    })
}

/// Parse and validate a model document.
pub fn parse_model(toml_str: &str) -> Result<Model> {
    let file: ModelFile =
        toml::from_str(toml_str).map_err(|e| Error::Parse(format!("model: {e}")))?;

    let mut nodes = Vec::with_capacity(file.nodes.len());
    for n in &file.nodes {
        let attachment = match (&n.control, &n.autonomy) {
            (None, None) => None,
            (Some(c), aut) => Some(LoopAttachment {
                control: ControlConfig {
                    controller: c.controller.clone(),
                    plant: c.plant.clone(),
                    filter: c.filter,
                    settled_bound: c.settled_bound,
                },
                autonomy: match aut {
                    Some(a) => Some(compile_autonomy(&n.path, a)?),
                    None => None,
                },
            }),
            (None, Some(_)) => {
                return Err(Error::model(
                    &n.path,
                    "autonomy declared without a control template",
                ))
            }
        };
        nodes.push(TaxonomyNode {
            path: NodePath::new(&n.path),
            level: n.level,
            factors: Factors {
                wbs_pbs: n.wbs.clone(),
                functional: n.functional.clone(),
                measure: None,
                measure_label: n.measure_label.clone(),
                interfaces: n.interfaces.iter().map(NodePath::new).collect(),
                configurational: n.configurations.clone(),
                procedural: n.procedures.clone(),
            },
            attachment,
        });
    }

    build_tree(file.name, nodes, file.topics, file.allow_level_skips)
}

/// Load a model by built-in name or filesystem path.
pub fn load_model(spec: &str, base_dir: Option<&Path>) -> Result<Model> {
    if let Some(text) = mission::builtin_model(spec) {
        return parse_model(text);
    }
    let path = match base_dir {
        Some(dir) => dir.join(spec),
        None => Path::new(spec).to_path_buf(),
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::model(spec, format!("cannot read {}: {e}", path.display())))?;
    parse_model(&text)
}
