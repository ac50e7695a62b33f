//! The outer supervisory loop: a guarded finite state machine that consumes
//! goal commands, crosstalk, and environment feedback, and emits reference
//! inputs to its inner control loop plus outgoing messages.
//!
//! Transition rules: at most one transition fires per tick, chosen by
//! declaration order (survival transitions are declared first in the shipped
//! machines). While an override is in force no transition changes the state;
//! an enabled transition is latched instead and fires within one step of the
//! override expiring or being released. Every transition and tagged entry
//! action carries exactly one SSCC tag.

use std::collections::{BTreeMap, BTreeSet};

use crate::bus::{
    CommandVerb, InteractionKind, Message, NodePath, OverrideDirective, Payload,
};
use crate::control::{LoopCommand, LoopMode};
use crate::error::{Error, Result};

/// The four autonomy functions, used as mandatory transition tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sscc {
    Survival,
    Success,
    Collective,
    ContextualizingSituations,
}

impl Sscc {
    pub const ALL: [Sscc; 4] = [
        Sscc::Survival,
        Sscc::Success,
        Sscc::Collective,
        Sscc::ContextualizingSituations,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Sscc::Survival => "survival",
            Sscc::Success => "success",
            Sscc::Collective => "collective",
            Sscc::ContextualizingSituations => "contextualizing_situations",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cmp {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
}

impl Cmp {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Cmp::Gt => lhs > rhs,
            Cmp::Ge => lhs >= rhs,
            Cmp::Lt => lhs < rhs,
            Cmp::Le => lhs <= rhs,
            Cmp::Eq => lhs == rhs,
        }
    }
}

/// A value source resolvable at step time.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueSpec {
    Value(f64),
    /// Own parameter-table entry.
    Param(String),
    /// Current environment feedback channel.
    Channel(String),
    /// Numeric field of the message that matched this transition's guard.
    /// Only meaningful inside transition actions.
    MessageField(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Guard {
    /// Compare an environment feedback channel (or `f_p`, the plant
    /// feedback) against a parameter or literal.
    Signal {
        channel: String,
        op: Cmp,
        rhs: ValueSpec,
    },
    /// An inbox message with this event name arrived this tick.
    OnMessage { event: String },
    /// A named directive arrived this tick, via the goal channel or a legal
    /// command message.
    OnDirective { name: String },
    ParamCmp {
        name: String,
        op: Cmp,
        rhs: ValueSpec,
    },
    ModeIs { mode: String },
    All(Vec<Guard>),
    Any(Vec<Guard>),
    Not(Box<Guard>),
}

pub type Bindings = BTreeMap<String, f64>;

/// Inputs a guard evaluates over.
pub struct GuardCtx<'a> {
    pub f_e: &'a EnvFeedback,
    pub f_p: Option<f64>,
    pub inbox: &'a [Message],
    pub directives: &'a BTreeSet<String>,
    pub mode: &'a str,
    pub params: &'a BTreeMap<String, Param>,
}

impl Guard {
    /// Returns captured message-field bindings when the guard holds.
    fn eval(&self, ctx: &GuardCtx) -> Result<Option<Bindings>> {
        match self {
            Guard::Signal { channel, op, rhs } => {
                let lhs = if channel == "f_p" {
                    ctx.f_p.ok_or_else(|| {
                        Error::Config("guard reads f_p but the node has no plant feedback".into())
                    })?
                } else {
                    ctx.f_e.value(channel).ok_or_else(|| {
                        Error::Config(format!("guard reads undeclared channel: {channel}"))
                    })?
                };
                let rhs = resolve_operand(rhs, ctx.params, ctx.f_e)?;
                Ok(op.holds(lhs, rhs).then(Bindings::new))
            }
            Guard::OnMessage { event } => {
                for msg in ctx.inbox {
                    if msg.payload.event_name() == *event {
                        let bindings = msg
                            .payload
                            .numeric_fields()
                            .into_iter()
                            .map(|(k, v)| (k.to_string(), v))
                            .collect();
                        return Ok(Some(bindings));
                    }
                }
                Ok(None)
            }
            Guard::OnDirective { name } => Ok(ctx.directives.contains(name).then(Bindings::new)),
            Guard::ParamCmp { name, op, rhs } => {
                let lhs = ctx
                    .params
                    .get(name)
                    .ok_or_else(|| Error::Config(format!("guard reads unknown param: {name}")))?
                    .value;
                let rhs = resolve_operand(rhs, ctx.params, ctx.f_e)?;
                Ok(op.holds(lhs, rhs).then(Bindings::new))
            }
            Guard::ModeIs { mode } => Ok((ctx.mode == mode).then(Bindings::new)),
            Guard::All(gs) => {
                let mut merged = Bindings::new();
                for g in gs {
                    match g.eval(ctx)? {
                        Some(b) => {
                            for (k, v) in b {
                                merged.entry(k).or_insert(v);
                            }
                        }
                        None => return Ok(None),
                    }
                }
                Ok(Some(merged))
            }
            Guard::Any(gs) => {
                for g in gs {
                    if let Some(b) = g.eval(ctx)? {
                        return Ok(Some(b));
                    }
                }
                Ok(None)
            }
            Guard::Not(g) => Ok(match g.eval(ctx)? {
                Some(_) => None,
                None => Some(Bindings::new()),
            }),
        }
    }
}

fn resolve_operand(
    spec: &ValueSpec,
    params: &BTreeMap<String, Param>,
    f_e: &EnvFeedback,
) -> Result<f64> {
    match spec {
        ValueSpec::Value(v) => Ok(*v),
        ValueSpec::Param(name) => params
            .get(name)
            .map(|p| p.value)
            .ok_or_else(|| Error::Config(format!("unknown param: {name}"))),
        ValueSpec::Channel(name) => f_e
            .value(name)
            .ok_or_else(|| Error::Config(format!("undeclared channel: {name}"))),
        ValueSpec::MessageField(field) => Err(Error::Config(format!(
            "message field {field} referenced outside a message-guarded transition"
        ))),
    }
}

fn resolve_value(
    spec: &ValueSpec,
    params: &BTreeMap<String, Param>,
    f_e: &EnvFeedback,
    bindings: &Bindings,
) -> Result<f64> {
    match spec {
        ValueSpec::MessageField(field) => bindings.get(field).copied().ok_or_else(|| {
            Error::Config(format!("matched message carries no field named {field}"))
        }),
        other => resolve_operand(other, params, f_e),
    }
}

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Publish {
        topic: String,
        payload: PayloadSpec,
    },
    SendCommand {
        to: NodePath,
        verb: CommandVerbSpec,
    },
    SendJoint {
        kind: InteractionKind,
        to: NodePath,
        session: String,
        note: String,
    },
    SetOwnParam {
        name: String,
        value: ValueSpec,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PayloadSpec {
    FaultReport { code: String, value: ValueSpec },
    Status { name: String, value: ValueSpec },
    ParamUpdate { name: String, value: ValueSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandVerbSpec {
    SetMode { mode: String },
    SetParam { name: String, value: ValueSpec, unit: Option<String> },
    Directive { name: String },
    Override { directive: OverrideDirective, expiry_tick: u64 },
    ReleaseOverride,
}

/// An entry action with its SSCC tag (tags on entry actions count toward
/// coverage alongside transition tags).
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedAction {
    pub action: Action,
    pub sscc: Sscc,
}

// ---------------------------------------------------------------------------
// State machine
// ---------------------------------------------------------------------------

/// How a state runs its inner loop.
#[derive(Debug, Clone, PartialEq)]
pub enum ModeSpec {
    Regulate,
    Track,
    Hold { target: ValueSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDef {
    pub id: String,
    /// Standing reference emitted while in this state.
    pub reference: ValueSpec,
    pub mode: ModeSpec,
    pub entry: Vec<TaggedAction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub from: String,
    pub to: String,
    pub guard: Guard,
    pub actions: Vec<Action>,
    pub sscc: Sscc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateMachine {
    pub name: String,
    pub states: Vec<StateDef>,
    /// Declaration order is firing priority.
    pub transitions: Vec<Transition>,
    pub initial: String,
    pub safe_state: Option<String>,
    pub modes: Vec<String>,
}

impl StateMachine {
    pub fn state(&self, id: &str) -> Option<&StateDef> {
        self.states.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |d: String| Error::Config(format!("machine {}: {d}", self.name));
        if self.states.is_empty() {
            return Err(err("no states declared".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &self.states {
            if !ids.insert(s.id.clone()) {
                return Err(err(format!("duplicate state id {}", s.id)));
            }
            if matches!(s.reference, ValueSpec::MessageField(_)) {
                return Err(err(format!(
                    "state {} standing reference cannot read a message field",
                    s.id
                )));
            }
        }
        if !ids.contains(&self.initial) {
            return Err(err(format!("initial state {} not declared", self.initial)));
        }
        if let Some(safe) = &self.safe_state {
            if !ids.contains(safe) {
                return Err(err(format!("safe state {safe} not declared")));
            }
        }
        for t in &self.transitions {
            if !ids.contains(&t.from) || !ids.contains(&t.to) {
                return Err(err(format!(
                    "transition {} -> {} references an undeclared state",
                    t.from, t.to
                )));
            }
        }
        if self.modes.is_empty() {
            return Err(err("no operating modes declared".into()));
        }
        Ok(())
    }
}

/// Per-tag counts of transitions and tagged entry actions.
#[derive(Debug, Clone, PartialEq)]
pub struct SsccCoverage {
    pub counts: BTreeMap<Sscc, usize>,
}

impl SsccCoverage {
    /// Tags with zero occurrences.
    pub fn missing(&self) -> Vec<Sscc> {
        Sscc::ALL
            .iter()
            .copied()
            .filter(|t| self.counts.get(t).copied().unwrap_or(0) == 0)
            .collect()
    }

    pub fn complete(&self) -> bool {
        self.missing().is_empty()
    }
}

pub fn sscc_coverage(machine: &StateMachine) -> SsccCoverage {
    let mut counts: BTreeMap<Sscc, usize> = Sscc::ALL.iter().map(|t| (*t, 0)).collect();
    for t in &machine.transitions {
        *counts.entry(t.sscc).or_default() += 1;
    }
    for s in &machine.states {
        for a in &s.entry {
            *counts.entry(a.sscc).or_default() += 1;
        }
    }
    SsccCoverage { counts }
}

// ---------------------------------------------------------------------------
// The autonomy block
// ---------------------------------------------------------------------------

/// Named parameter with units.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: f64,
    pub unit: String,
}

impl Param {
    pub fn new(value: f64, unit: &str) -> Self {
        Param {
            value,
            unit: unit.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverrideRecord {
    pub directive: OverrideDirective,
    pub issuer: Issuer,
    /// Absolute tick, exclusive: the override is in force while
    /// tick < expiry_tick.
    pub expiry_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Issuer {
    /// Scheduled scenario commands; the node's commanding authority.
    Ground,
    Node(NodePath),
}

impl Issuer {
    pub fn describe(&self) -> String {
        match self {
            Issuer::Ground => "ground".into(),
            Issuer::Node(n) => n.0.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IssuedCommand {
    pub verb: CommandVerb,
    pub issuer: Issuer,
}

/// Environment feedback as the block sees it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnvFeedback {
    pub channels: BTreeMap<String, ChannelSample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSample {
    pub value: f64,
    /// Ticks since the channel was last actually sampled (grows under
    /// sensor dropout).
    pub staleness: u64,
}

impl EnvFeedback {
    pub fn value(&self, channel: &str) -> Option<f64> {
        self.channels.get(channel).map(|c| c.value)
    }

    pub fn set(&mut self, channel: &str, value: f64, staleness: u64) {
        self.channels
            .insert(channel.to_string(), ChannelSample { value, staleness });
    }
}

/// Transition latched while an override was in force.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingTransition {
    pub index: usize,
    pub bindings: Bindings,
}

/// The supervisory block: machine plus mode, override, and parameter
/// registers.
#[derive(Debug, Clone, PartialEq)]
pub struct AutonomyBlock {
    pub node: NodePath,
    pub machine: StateMachine,
    pub current_state: String,
    pub mode: String,
    pub override_: Option<OverrideRecord>,
    pub params: BTreeMap<String, Param>,
    /// Transitive superiors; command authority is checked against this set.
    pub superiors: BTreeSet<NodePath>,
    /// Declared command vocabulary this block accepts.
    pub accepts: BTreeSet<String>,
    /// Topic command acknowledgments are published on, if any.
    pub ack_topic: Option<String>,
    pub pending: Option<PendingTransition>,
}

impl AutonomyBlock {
    pub fn new(node: NodePath, machine: StateMachine) -> Result<Self> {
        machine.validate()?;
        let current_state = machine.initial.clone();
        Ok(AutonomyBlock {
            node,
            machine,
            current_state,
            mode: "NORMAL".into(),
            override_: None,
            params: BTreeMap::new(),
            superiors: BTreeSet::new(),
            accepts: ["set_mode", "set_param", "override", "release_override", "directive"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ack_topic: None,
            pending: None,
        })
    }

    pub fn with_params(mut self, params: BTreeMap<String, Param>) -> Self {
        self.params = params;
        self
    }
}

/// True iff an override record exists and tick < expiry.
pub fn override_in_force(block: &AutonomyBlock, tick: u64) -> bool {
    block
        .override_
        .as_ref()
        .map(|o| tick < o.expiry_tick)
        .unwrap_or(false)
}

/// Events the engine turns into trace rows.
#[derive(Debug, Clone, PartialEq)]
pub enum AutonomyEvent {
    TransitionFired {
        from: String,
        to: String,
        sscc: Sscc,
        from_pending: bool,
    },
    StateForced {
        to: String,
        cause: String,
    },
    CommandApplied {
        kind: &'static str,
        detail: String,
        issuer: Issuer,
    },
    AuthorityViolation {
        sender: NodePath,
        detail: String,
    },
    OverrideExpired,
    ParamChanged {
        name: String,
        value: f64,
    },
}

/// Outgoing traffic produced by one step; the engine hands it to the bus.
#[derive(Debug, Clone, PartialEq)]
pub enum MessageDraft {
    Publish {
        topic: String,
        payload: Payload,
    },
    Send {
        kind: InteractionKind,
        to: Vec<NodePath>,
        payload: Payload,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutonomyInputs<'a> {
    pub tick: u64,
    /// Goal commands scheduled for this node this tick.
    pub a: &'a [IssuedCommand],
    /// Crosstalk delivered this tick, already addressed to this node.
    pub inbox: &'a [Message],
    pub f_e: &'a EnvFeedback,
    /// Previous tick's filtered plant feedback, when the node has one.
    pub f_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutonomyStep {
    pub block: AutonomyBlock,
    pub loop_cmd: LoopCommand,
    pub outbox: Vec<MessageDraft>,
    pub events: Vec<AutonomyEvent>,
}

/// Return the first enabled transition out of `current` in declaration
/// order, or none. Guards are pure predicates over the context.
pub fn evaluate_transitions(
    machine: &StateMachine,
    current: &str,
    ctx: &GuardCtx,
) -> Result<Option<(usize, Bindings)>> {
    for (i, t) in machine.transitions.iter().enumerate() {
        if t.from != current {
            continue;
        }
        if let Some(bindings) = t.guard.eval(ctx)? {
            return Ok(Some((i, bindings)));
        }
    }
    Ok(None)
}

/// Apply one block-register command: set-mode, set-param, override, or
/// release-override. Directives have no register effect (they surface as
/// guard-visible events during the step). Pure: returns the updated block.
pub fn apply_mode_command(block: &AutonomyBlock, verb: &CommandVerb) -> Result<AutonomyBlock> {
    let mut next = block.clone();
    let mut events = Vec::new();
    let mut outbox = Vec::new();
    let mut directives = BTreeSet::new();
    apply_command_mut(
        &mut next,
        verb,
        &Issuer::Ground,
        &mut events,
        &mut outbox,
        &mut directives,
    )?;
    Ok(next)
}

fn apply_command_mut(
    block: &mut AutonomyBlock,
    verb: &CommandVerb,
    issuer: &Issuer,
    events: &mut Vec<AutonomyEvent>,
    outbox: &mut Vec<MessageDraft>,
    directives: &mut BTreeSet<String>,
) -> Result<()> {
    if !block.accepts.contains(verb.kind_name()) {
        return Err(Error::Config(format!(
            "node {} does not accept {} commands",
            block.node,
            verb.kind_name()
        )));
    }
    match verb {
        CommandVerb::SetMode { mode } => {
            if !block.machine.modes.iter().any(|m| m == mode) {
                return Err(Error::Config(format!(
                    "node {}: unknown mode {mode}",
                    block.node
                )));
            }
            block.mode = mode.clone();
            if mode == "SAFE" {
                if let Some(safe) = block.machine.safe_state.clone() {
                    if block.current_state != safe {
                        force_state(block, &safe, "safe mode", events, outbox);
                    }
                }
            }
        }
        CommandVerb::SetParam { name, value, unit } => {
            let param = block.params.get_mut(name).ok_or_else(|| {
                Error::Config(format!("node {}: unknown param {name}", block.node))
            })?;
            if let Some(u) = unit {
                if u != &param.unit {
                    return Err(Error::Config(format!(
                        "node {}: param {name} carries unit {}, command says {u}",
                        block.node, param.unit
                    )));
                }
            }
            if !value.is_finite() {
                return Err(Error::Config(format!(
                    "node {}: non-finite value for param {name}",
                    block.node
                )));
            }
            param.value = *value;
            events.push(AutonomyEvent::ParamChanged {
                name: name.clone(),
                value: *value,
            });
        }
        CommandVerb::Override {
            directive,
            expiry_tick,
        } => {
            if let OverrideDirective::HoldState { state } = directive {
                if block.machine.state(state).is_none() {
                    return Err(Error::Config(format!(
                        "node {}: override holds unknown state {state}",
                        block.node
                    )));
                }
                if &block.current_state != state {
                    let state = state.clone();
                    force_state(block, &state, "override hold", events, outbox);
                }
            }
            block.override_ = Some(OverrideRecord {
                directive: directive.clone(),
                issuer: issuer.clone(),
                expiry_tick: *expiry_tick,
            });
        }
        CommandVerb::ReleaseOverride => {
            block.override_ = None;
        }
        CommandVerb::Directive { name } => {
            directives.insert(name.clone());
        }
    }
    events.push(AutonomyEvent::CommandApplied {
        kind: verb.kind_name(),
        detail: verb.describe(),
        issuer: issuer.clone(),
    });
    Ok(())
}

fn force_state(
    block: &mut AutonomyBlock,
    to: &str,
    cause: &str,
    events: &mut Vec<AutonomyEvent>,
    outbox: &mut Vec<MessageDraft>,
) {
    block.current_state = to.to_string();
    events.push(AutonomyEvent::StateForced {
        to: to.to_string(),
        cause: cause.to_string(),
    });
    // Entry actions fire on a forced entry too; resolution errors here are
    // swallowed into no-ops only for message fields, which forced entries
    // never carry (validated at build).
    if let Some(state) = block.machine.state(to).cloned() {
        let empty = Bindings::new();
        let f_e = EnvFeedback::default();
        for ta in &state.entry {
            // Entry actions that need live feedback resolve against params
            // only here; channel reads fall back silently at force time.
            if let Ok(msgs) = run_action(&ta.action, block, &f_e, &empty, events) {
                outbox.extend(msgs);
            }
        }
    }
}

fn run_action(
    action: &Action,
    block: &mut AutonomyBlock,
    f_e: &EnvFeedback,
    bindings: &Bindings,
    events: &mut Vec<AutonomyEvent>,
) -> Result<Vec<MessageDraft>> {
    let mut out = Vec::new();
    match action {
        Action::Publish { topic, payload } => {
            let payload = match payload {
                PayloadSpec::FaultReport { code, value } => Payload::FaultReport {
                    code: code.clone(),
                    value: resolve_value(value, &block.params, f_e, bindings)?,
                },
                PayloadSpec::Status { name, value } => Payload::Status {
                    name: name.clone(),
                    value: resolve_value(value, &block.params, f_e, bindings)?,
                },
                PayloadSpec::ParamUpdate { name, value } => Payload::ParamUpdate {
                    name: name.clone(),
                    value: resolve_value(value, &block.params, f_e, bindings)?,
                },
            };
            out.push(MessageDraft::Publish {
                topic: topic.clone(),
                payload,
            });
        }
        Action::SendCommand { to, verb } => {
            let verb = match verb {
                CommandVerbSpec::SetMode { mode } => CommandVerb::SetMode { mode: mode.clone() },
                CommandVerbSpec::SetParam { name, value, unit } => CommandVerb::SetParam {
                    name: name.clone(),
                    value: resolve_value(value, &block.params, f_e, bindings)?,
                    unit: unit.clone(),
                },
                CommandVerbSpec::Directive { name } => CommandVerb::Directive { name: name.clone() },
                CommandVerbSpec::Override {
                    directive,
                    expiry_tick,
                } => CommandVerb::Override {
                    directive: directive.clone(),
                    expiry_tick: *expiry_tick,
                },
                CommandVerbSpec::ReleaseOverride => CommandVerb::ReleaseOverride,
            };
            out.push(MessageDraft::Send {
                kind: InteractionKind::Command,
                to: vec![to.clone()],
                payload: Payload::Command { verb },
            });
        }
        Action::SendJoint {
            kind,
            to,
            session,
            note,
        } => {
            out.push(MessageDraft::Send {
                kind: *kind,
                to: vec![to.clone()],
                payload: Payload::Joint {
                    session: session.clone(),
                    note: note.clone(),
                },
            });
        }
        Action::SetOwnParam { name, value } => {
            let v = resolve_value(value, &block.params, f_e, bindings)?;
            let param = block
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("action sets unknown param {name}")))?;
            param.value = v;
            events.push(AutonomyEvent::ParamChanged {
                name: name.clone(),
                value: v,
            });
        }
    }
    Ok(out)
}

fn fire_transition(
    block: &mut AutonomyBlock,
    index: usize,
    bindings: &Bindings,
    from_pending: bool,
    f_e: &EnvFeedback,
    events: &mut Vec<AutonomyEvent>,
    outbox: &mut Vec<MessageDraft>,
) -> Result<()> {
    let t = block.machine.transitions[index].clone();
    events.push(AutonomyEvent::TransitionFired {
        from: t.from.clone(),
        to: t.to.clone(),
        sscc: t.sscc,
        from_pending,
    });
    for action in &t.actions {
        outbox.extend(run_action(action, block, f_e, bindings, events)?);
    }
    if t.from != t.to {
        block.current_state = t.to.clone();
        let entry = block.machine.state(&t.to).cloned().map(|s| s.entry).unwrap_or_default();
        for ta in &entry {
            outbox.extend(run_action(&ta.action, block, f_e, bindings, events)?);
        }
    }
    Ok(())
}

/// One supervisory step: apply goal and command-message registers first,
/// then evaluate at most one transition (declaration-order tie-break,
/// override latching), then emit the resulting state's reference and mode.
/// Deterministic and pure.
pub fn step_autonomy_loop(block: &AutonomyBlock, inputs: &AutonomyInputs) -> Result<AutonomyStep> {
    let mut next = block.clone();
    let mut events = Vec::new();
    let mut outbox = Vec::new();
    let mut directives = BTreeSet::new();

    // Goal-channel commands come from the node's commanding authority.
    for cmd in inputs.a {
        apply_command_mut(
            &mut next,
            &cmd.verb,
            &cmd.issuer,
            &mut events,
            &mut outbox,
            &mut directives,
        )?;
    }

    // Command-kind crosstalk: authority is re-checked here even though the
    // bus already refuses illegal routes.
    for msg in inputs.inbox {
        if msg.kind != InteractionKind::Command {
            continue;
        }
        let Payload::Command { verb } = &msg.payload else {
            continue;
        };
        if !next.superiors.contains(&msg.sender) {
            events.push(AutonomyEvent::AuthorityViolation {
                sender: msg.sender.clone(),
                detail: format!("command {} from non-superior", verb.describe()),
            });
            continue;
        }
        apply_command_mut(
            &mut next,
            verb,
            &Issuer::Node(msg.sender.clone()),
            &mut events,
            &mut outbox,
            &mut directives,
        )?;
        if let Some(topic) = next.ack_topic.clone() {
            outbox.push(MessageDraft::Publish {
                topic,
                payload: Payload::Status {
                    name: format!("ack:{}", verb.kind_name()),
                    value: 1.0,
                },
            });
        }
    }

    // Expired overrides clear before transition evaluation.
    if let Some(o) = &next.override_ {
        if inputs.tick >= o.expiry_tick {
            next.override_ = None;
            events.push(AutonomyEvent::OverrideExpired);
        }
    }

    let ctx = GuardCtx {
        f_e: inputs.f_e,
        f_p: inputs.f_p,
        inbox: inputs.inbox,
        directives: &directives,
        mode: &next.mode,
        params: &next.params,
    };
    let fresh = evaluate_transitions(&next.machine, &next.current_state, &ctx)?;

    if override_in_force(&next, inputs.tick) {
        // Frozen: remember the enabled transition (with its message-field
        // bindings) so it can fire when the override lifts.
        if let Some((index, bindings)) = fresh {
            next.pending = Some(PendingTransition { index, bindings });
        }
    } else {
        let pending = next.pending.take();
        match fresh {
            Some((index, bindings)) => {
                fire_transition(&mut next, index, &bindings, false, inputs.f_e, &mut events, &mut outbox)?;
            }
            None => {
                if let Some(p) = pending {
                    if next.machine.transitions[p.index].from == next.current_state {
                        fire_transition(
                            &mut next, p.index, &p.bindings, true, inputs.f_e, &mut events,
                            &mut outbox,
                        )?;
                    }
                }
            }
        }
    }

    let state = next
        .machine
        .state(&next.current_state)
        .cloned()
        .ok_or_else(|| Error::Config(format!("current state {} vanished", next.current_state)))?;
    let r = resolve_operand(&state.reference, &next.params, inputs.f_e)?;
    let mode = match &state.mode {
        ModeSpec::Regulate => LoopMode::Regulate,
        ModeSpec::Track => LoopMode::Track,
        ModeSpec::Hold { target } => LoopMode::Hold {
            target: resolve_operand(target, &next.params, inputs.f_e)?,
        },
    };

    Ok(AutonomyStep {
        block: next,
        loop_cmd: LoopCommand { r, mode },
        outbox,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-state machine: IDLE -> GO on a directive or message, with a
    /// survival self-trip declared first.
    fn toy_machine() -> StateMachine {
        StateMachine {
            name: "toy".into(),
            states: vec![
                StateDef {
                    id: "IDLE".into(),
                    reference: ValueSpec::Value(0.0),
                    mode: ModeSpec::Regulate,
                    entry: vec![],
                },
                StateDef {
                    id: "GO".into(),
                    reference: ValueSpec::Param("go_ref".into()),
                    mode: ModeSpec::Regulate,
                    entry: vec![TaggedAction {
                        action: Action::Publish {
                            topic: "status".into(),
                            payload: PayloadSpec::Status {
                                name: "went".into(),
                                value: ValueSpec::Value(1.0),
                            },
                        },
                        sscc: Sscc::Collective,
                    }],
                },
                StateDef {
                    id: "TRIPPED".into(),
                    reference: ValueSpec::Value(-1.0),
                    mode: ModeSpec::Regulate,
                    entry: vec![],
                },
            ],
            transitions: vec![
                Transition {
                    from: "IDLE".into(),
                    to: "TRIPPED".into(),
                    guard: Guard::Signal {
                        channel: "load".into(),
                        op: Cmp::Gt,
                        rhs: ValueSpec::Param("limit".into()),
                    },
                    actions: vec![],
                    sscc: Sscc::Survival,
                },
                Transition {
                    from: "IDLE".into(),
                    to: "GO".into(),
                    guard: Guard::Any(vec![
                        Guard::OnDirective { name: "go".into() },
                        Guard::OnMessage { event: "eclipse_start".into() },
                    ]),
                    actions: vec![],
                    sscc: Sscc::Success,
                },
                Transition {
                    from: "GO".into(),
                    to: "IDLE".into(),
                    guard: Guard::OnDirective { name: "stop".into() },
                    actions: vec![],
                    sscc: Sscc::ContextualizingSituations,
                },
            ],
            initial: "IDLE".into(),
            safe_state: Some("IDLE".into()),
            modes: vec!["NORMAL".into(), "SAFE".into()],
        }
    }

    fn toy_block() -> AutonomyBlock {
        let mut params = BTreeMap::new();
        params.insert("limit".into(), Param::new(4.0, "A"));
        params.insert("go_ref".into(), Param::new(2.5, "A"));
        AutonomyBlock::new(NodePath::new("sys/node"), toy_machine())
            .unwrap()
            .with_params(params)
    }

    fn feedback(load: f64) -> EnvFeedback {
        let mut f = EnvFeedback::default();
        f.set("load", load, 0);
        f
    }

    fn step(
        block: &AutonomyBlock,
        tick: u64,
        a: &[IssuedCommand],
        inbox: &[Message],
        f_e: &EnvFeedback,
    ) -> AutonomyStep {
        step_autonomy_loop(
            block,
            &AutonomyInputs {
                tick,
                a,
                inbox,
                f_e,
                f_p: None,
            },
        )
        .unwrap()
    }

    fn eclipse_msg(sender: &str, tick: u64) -> Message {
        Message {
            kind: InteractionKind::Cooperation,
            sender: NodePath::new(sender),
            address: crate::bus::Address::Topic("env".into()),
            payload: Payload::EclipseForecast {
                start: true,
                event_tick: tick + 9,
                exit_azimuth: 1.25,
            },
            sent_tick: tick - 1,
            deliver_tick: tick,
            seq: 0,
        }
    }

    #[test]
    fn quiescence_leaves_block_unchanged() {
        let block = toy_block();
        let out = step(&block, 0, &[], &[], &feedback(1.0));
        assert_eq!(out.block, block);
        assert_eq!(out.loop_cmd.r, 0.0);
        assert!(out.outbox.is_empty());
    }

    #[test]
    fn survival_declared_first_wins_when_both_enabled() {
        let block = toy_block();
        let mut f = feedback(5.0); // trips
        f.set("load", 5.0, 0);
        let dir = IssuedCommand {
            verb: CommandVerb::Directive { name: "go".into() },
            issuer: Issuer::Ground,
        };
        let out = step(&block, 0, &[dir], &[], &f);
        assert_eq!(out.block.current_state, "TRIPPED");
    }

    #[test]
    fn evaluate_returns_none_when_no_guard_true() {
        let block = toy_block();
        let ctx = GuardCtx {
            f_e: &feedback(1.0),
            f_p: None,
            inbox: &[],
            directives: &BTreeSet::new(),
            mode: "NORMAL",
            params: &block.params,
        };
        assert_eq!(
            evaluate_transitions(&block.machine, "IDLE", &ctx).unwrap(),
            None
        );
    }

    #[test]
    fn missing_channel_is_config_error() {
        let block = toy_block();
        let empty = EnvFeedback::default();
        let ctx = GuardCtx {
            f_e: &empty,
            f_p: None,
            inbox: &[],
            directives: &BTreeSet::new(),
            mode: "NORMAL",
            params: &block.params,
        };
        assert!(matches!(
            evaluate_transitions(&block.machine, "IDLE", &ctx),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn message_guard_fires_and_binds_fields() {
        let block = toy_block();
        let msg = eclipse_msg("env", 10);
        let out = step(&block, 10, &[], &[msg], &feedback(1.0));
        assert_eq!(out.block.current_state, "GO");
        assert_eq!(out.loop_cmd.r, 2.5); // param-backed standing reference
        assert_eq!(out.outbox.len(), 1); // entry publish
    }

    #[test]
    fn set_mode_safe_forces_declared_safe_state() {
        let mut block = toy_block();
        block.current_state = "GO".into();
        let cmd = IssuedCommand {
            verb: CommandVerb::SetMode { mode: "SAFE".into() },
            issuer: Issuer::Ground,
        };
        let out = step(&block, 0, &[cmd], &[], &feedback(1.0));
        assert_eq!(out.block.mode, "SAFE");
        assert_eq!(out.block.current_state, "IDLE");
    }

    #[test]
    fn set_param_changes_only_the_table() {
        let block = toy_block();
        let updated = apply_mode_command(
            &block,
            &CommandVerb::SetParam {
                name: "limit".into(),
                value: 5.0,
                unit: Some("A".into()),
            },
        )
        .unwrap();
        assert_eq!(updated.params["limit"].value, 5.0);
        assert_eq!(updated.current_state, block.current_state);
        assert_eq!(updated.mode, block.mode);
    }

    #[test]
    fn set_param_unknown_name_or_wrong_unit_rejected() {
        let block = toy_block();
        assert!(apply_mode_command(
            &block,
            &CommandVerb::SetParam {
                name: "nope".into(),
                value: 1.0,
                unit: None
            }
        )
        .is_err());
        assert!(apply_mode_command(
            &block,
            &CommandVerb::SetParam {
                name: "limit".into(),
                value: 1.0,
                unit: Some("V".into())
            }
        )
        .is_err());
    }

    #[test]
    fn override_boundary_is_exclusive() {
        let mut block = toy_block();
        assert!(!override_in_force(&block, 10));
        block.override_ = Some(OverrideRecord {
            directive: OverrideDirective::HoldCurrent,
            issuer: Issuer::Ground,
            expiry_tick: 60,
        });
        assert!(override_in_force(&block, 59));
        assert!(!override_in_force(&block, 60));
    }

    #[test]
    fn override_latches_pending_transition_until_expiry() {
        let mut block = toy_block();
        block.override_ = Some(OverrideRecord {
            directive: OverrideDirective::HoldCurrent,
            issuer: Issuer::Ground,
            expiry_tick: 60,
        });

        // Eclipse message arrives at t=55 while frozen.
        let msg = eclipse_msg("env", 55);
        let out = step(&block, 55, &[], &[msg], &feedback(1.0));
        assert_eq!(out.block.current_state, "IDLE");
        assert!(out.block.pending.is_some());

        // Quiescent ticks keep the latch.
        let out = step(&out.block, 56, &[], &[], &feedback(1.0));
        assert!(out.block.pending.is_some());

        // At the expiry tick the pending transition fires.
        let out = step(&out.block, 60, &[], &[], &feedback(1.0));
        assert_eq!(out.block.current_state, "GO");
        assert!(out.block.pending.is_none());
        assert!(out
            .events
            .iter()
            .any(|e| matches!(e, AutonomyEvent::TransitionFired { from_pending: true, .. })));
    }

    #[test]
    fn release_override_resumes_next_step() {
        let mut block = toy_block();
        block.override_ = Some(OverrideRecord {
            directive: OverrideDirective::HoldCurrent,
            issuer: Issuer::Ground,
            expiry_tick: 1000,
        });
        let msg = eclipse_msg("env", 5);
        let out = step(&block, 5, &[], &[msg], &feedback(1.0));
        assert_eq!(out.block.current_state, "IDLE");

        let release = IssuedCommand {
            verb: CommandVerb::ReleaseOverride,
            issuer: Issuer::Ground,
        };
        let out = step(&out.block, 6, &[release], &[], &feedback(1.0));
        assert_eq!(out.block.current_state, "GO");
    }

    #[test]
    fn command_from_non_superior_is_violation_and_ignored() {
        let mut block = toy_block();
        block.superiors.insert(NodePath::new("sys"));
        let rogue = Message {
            kind: InteractionKind::Command,
            sender: NodePath::new("sys/peer"),
            address: crate::bus::Address::Node(block.node.clone()),
            payload: Payload::Command {
                verb: CommandVerb::SetParam {
                    name: "limit".into(),
                    value: 99.0,
                    unit: None,
                },
            },
            sent_tick: 0,
            deliver_tick: 1,
            seq: 0,
        };
        let out = step(&block, 1, &[], &[rogue], &feedback(1.0));
        assert_eq!(out.block.params["limit"].value, 4.0);
        assert!(out
            .events
            .iter()
            .any(|e| matches!(e, AutonomyEvent::AuthorityViolation { .. })));
    }

    #[test]
    fn superior_command_is_applied_and_acked_as_cooperation() {
        let mut block = toy_block();
        block.superiors.insert(NodePath::new("sys"));
        block.ack_topic = Some("status".into());
        let cmd = Message {
            kind: InteractionKind::Command,
            sender: NodePath::new("sys"),
            address: crate::bus::Address::Node(block.node.clone()),
            payload: Payload::Command {
                verb: CommandVerb::SetParam {
                    name: "limit".into(),
                    value: 6.0,
                    unit: None,
                },
            },
            sent_tick: 0,
            deliver_tick: 1,
            seq: 0,
        };
        let out = step(&block, 1, &[], &[cmd], &feedback(1.0));
        assert_eq!(out.block.params["limit"].value, 6.0);
        assert!(matches!(
            &out.outbox[0],
            MessageDraft::Publish { topic, payload: Payload::Status { name, .. } }
                if topic == "status" && name == "ack:set_param"
        ));
    }

    #[test]
    fn step_is_deterministic() {
        let block = toy_block();
        let msg = eclipse_msg("env", 3);
        let f = feedback(2.0);
        let a = step(&block, 3, &[], std::slice::from_ref(&msg), &f);
        let b = step(&block, 3, &[], std::slice::from_ref(&msg), &f);
        assert_eq!(a, b);
    }

    #[test]
    fn coverage_counts_transitions_and_entry_actions() {
        let cov = sscc_coverage(&toy_machine());
        assert!(cov.complete());
        assert_eq!(cov.counts[&Sscc::Survival], 1);
        assert_eq!(cov.counts[&Sscc::Collective], 1);
    }

    #[test]
    fn coverage_flags_missing_tags() {
        let mut m = toy_machine();
        m.transitions.retain(|t| t.sscc != Sscc::Survival);
        let cov = sscc_coverage(&m);
        assert_eq!(cov.missing(), vec![Sscc::Survival]);
    }

    #[test]
    fn empty_machine_flags_all_four() {
        let m = StateMachine {
            name: "empty".into(),
            states: vec![StateDef {
                id: "ONLY".into(),
                reference: ValueSpec::Value(0.0),
                mode: ModeSpec::Regulate,
                entry: vec![],
            }],
            transitions: vec![],
            initial: "ONLY".into(),
            safe_state: None,
            modes: vec!["NORMAL".into()],
        };
        assert_eq!(sscc_coverage(&m).missing().len(), 4);
    }

    #[test]
    fn validate_catches_structural_errors() {
        let mut m = toy_machine();
        m.initial = "NOPE".into();
        assert!(m.validate().is_err());

        let mut m = toy_machine();
        m.transitions[0].to = "NOPE".into();
        assert!(m.validate().is_err());
    }
}
