//! Deterministic fixed-step scheduler. Each tick runs a fixed phase order:
//! (1) environment and world update plus fault injection, (2) bus delivery,
//! (3) scheduled goal commands, (4) supervisory blocks top-down, (5) control
//! loops, (6) environment sensing and filtering; trace rows are appended as
//! the phases run. No value computed in a tick depends on a later phase of
//! the same tick: feedback and messages carry a one-tick delay, and circuit
//! quantities are derived from the previous tick's plant outputs.

use std::collections::BTreeMap;
use std::io::Write;

use crate::autonomy::{
    step_autonomy_loop, AutonomyBlock, AutonomyEvent, AutonomyInputs, EnvFeedback, IssuedCommand,
    Issuer, MessageDraft,
};
use crate::bus::{CommandVerb, CrosstalkBus, InteractionKind, Message, NodePath, Payload, SendOutcome};
use crate::control::{
    step_control_loop, ControlLoopDef, ControlLoopState, LoopCommand, LoopMode, PlantEnv,
    SensorHealth,
};
use crate::error::{Error, Result};
use crate::mission::{degradation_estimator_step, DegradationEstimator, PowerWorld};
use crate::model::load_model;
use crate::rng::RngStreams;
use crate::scenario::{FaultKind, FaultSpec, Scenario};
use crate::taxonomy::{lint_autonomy_coverage, EstimatorCfg, Model};
use crate::trace::{fmt_f64, RowKind, TraceWriter};

/// Alignment gate for peak-capability estimation: the panel counts as
/// sun-pointed within this error.
pub const ALIGNED_TOL_RAD: f64 = 0.03;

/// Reserved sender path for virtual sensors published by the engine.
pub const ENVIRONMENT_SENDER: &str = "environment";

// ---------------------------------------------------------------------------
// World interface
// ---------------------------------------------------------------------------

/// Previous-tick plant output exposed to the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantSnapshot {
    pub y: f64,
    pub theta: Option<f64>,
}

pub struct WorldTick<'a> {
    pub tick: u64,
    pub dt: f64,
    pub illumination: f64,
    pub sun_azimuth: f64,
    pub flare_active: bool,
    pub plants: &'a BTreeMap<NodePath, PlantSnapshot>,
    /// Supervisory parameter tables as of the end of the previous tick.
    pub params: &'a BTreeMap<NodePath, BTreeMap<String, f64>>,
    pub autonomy_states: &'a BTreeMap<NodePath, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldEvent {
    pub node: NodePath,
    pub name: String,
    pub fields: Vec<(&'static str, f64)>,
}

/// The mission-specific environment the plants operate in. Owned and stepped
/// by the engine in phase 1 of every tick.
pub trait World {
    fn begin_tick(&mut self, ctx: &WorldTick) -> Vec<WorldEvent>;
    /// Environment channel value visible to a node's sensors.
    fn channel(&self, node: &NodePath, name: &str) -> Option<f64>;
    /// Fill mission-specific plant environment fields.
    fn plant_env(&self, node: &NodePath, base: PlantEnv) -> PlantEnv;
    /// Load-time validation of a fault event this world will receive.
    fn check_fault(&self, kind: &FaultKind) -> Result<()>;
    fn apply_fault(&mut self, tick: u64, kind: &FaultKind) -> Result<Vec<WorldEvent>>;
    /// Fields appended to the per-tick environment trace row.
    fn env_fields(&self) -> Vec<(&'static str, f64)>;
    fn summary(&self) -> Vec<(String, f64)>;
}

// ---------------------------------------------------------------------------
// Orbital environment
// ---------------------------------------------------------------------------

/// Square-wave illumination: dark during the eclipse fraction at the end of
/// each orbit, else full sun. Negative times extend periodically.
pub fn illumination(t_seconds: f64, orbit_period_s: f64, eclipse_fraction: f64) -> f64 {
    if eclipse_fraction <= 0.0 {
        return 1.0;
    }
    let phase = t_seconds.rem_euclid(orbit_period_s);
    if phase >= (1.0 - eclipse_fraction) * orbit_period_s {
        0.0
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct OrbitalEnv {
    pub period_s: f64,
    pub eclipse_fraction: f64,
    pub ramp_width_s: f64,
    pub sun_initial_rad: f64,
    pub sun_rate_rad_per_s: f64,
    pub forecast_lead_ticks: u64,
    pub dt: f64,
}

impl OrbitalEnv {
    pub fn sun_azimuth_at(&self, t: f64) -> f64 {
        self.sun_initial_rad + self.sun_rate_rad_per_s * t
    }

    /// Illumination with optional linear ramps at the eclipse edges.
    pub fn illumination_at(&self, t: f64) -> f64 {
        if self.eclipse_fraction <= 0.0 {
            return 1.0;
        }
        let phase = t.rem_euclid(self.period_s);
        let sunset = (1.0 - self.eclipse_fraction) * self.period_s;
        let w = self.ramp_width_s;
        if phase >= sunset {
            0.0
        } else if w > 0.0 && phase >= sunset - w {
            (sunset - phase) / w
        } else if w > 0.0 && phase < w {
            phase / w
        } else {
            1.0
        }
    }

    fn dark_tick(&self, tick: u64) -> bool {
        illumination(tick as f64 * self.dt, self.period_s, self.eclipse_fraction) == 0.0
    }

    /// Forecast due for publication this tick: exactly `lead` ticks before an
    /// illumination transition of the underlying square wave.
    pub fn forecast_due(&self, tick: u64) -> Option<Payload> {
        if self.eclipse_fraction <= 0.0 {
            return None;
        }
        let target = tick + self.forecast_lead_ticks;
        if target == 0 {
            return None;
        }
        let dark_now = self.dark_tick(target);
        let dark_prev = self.dark_tick(target - 1);
        if dark_now && !dark_prev {
            // Eclipse entry: the useful pointing target is the sun azimuth at
            // the coming exit.
            let orbit = (target as f64 * self.dt / self.period_s).floor();
            let exit_t = (orbit + 1.0) * self.period_s;
            Some(Payload::EclipseForecast {
                start: true,
                event_tick: target,
                exit_azimuth: self.sun_azimuth_at(exit_t),
            })
        } else if !dark_now && dark_prev {
            Some(Payload::EclipseForecast {
                start: false,
                event_tick: target,
                exit_azimuth: self.sun_azimuth_at(target as f64 * self.dt),
            })
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Node runtime
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct EnvChanRt {
    name: String,
    alpha: f64,
    sigma: f64,
    filt: f64,
    initialized: bool,
    last_sample_tick: Option<u64>,
    bias: f64,
    dropout_until: u64,
}

#[derive(Debug, Clone)]
struct ControlRt {
    def: ControlLoopDef,
    state: ControlLoopState,
    cmd: LoopCommand,
    noise_sigma: f64,
    disturbance_amp: f64,
    bias: f64,
    dropout_until: u64,
    settled_bound: f64,
}

#[derive(Debug, Clone)]
struct EstimatorRt {
    cfg: EstimatorCfg,
    state: DegradationEstimator,
}

#[derive(Debug, Clone)]
struct AutonomyRt {
    block: AutonomyBlock,
    channels: Vec<EnvChanRt>,
    feedback: EnvFeedback,
    estimator: Option<EstimatorRt>,
}

#[derive(Debug, Clone)]
struct NodeRt {
    path: NodePath,
    control: Option<ControlRt>,
    autonomy: Option<AutonomyRt>,
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct EngineOptions {
    pub disable_bus: bool,
    pub allow_lint_failures: bool,
    pub ticks_override: Option<u64>,
    pub seed_override: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub ticks: u64,
    pub messages_delivered: u64,
    pub routing_violations: u64,
    pub authority_violations: u64,
    pub transitions: u64,
    pub commands_applied: u64,
    pub faults_applied: u64,
    pub world: Vec<(String, f64)>,
}

pub struct Engine<W: World> {
    dt: f64,
    ticks: u64,
    seed: u64,
    scenario_name: String,
    scenario_hash: u64,
    model_name: String,
    capacity_as: f64,
    soc_initial: f64,
    env: OrbitalEnv,
    eclipse_topic: String,
    flare_topic: String,
    world: W,
    bus: CrosstalkBus,
    nodes: Vec<NodeRt>,
    commands: BTreeMap<u64, Vec<(NodePath, CommandVerb)>>,
    faults: Vec<FaultSpec>,
    flares: Vec<(u64, u64)>,
    rng: RngStreams,
}

impl<W: World> Engine<W> {
    pub fn new(model: Model, scenario: Scenario, world: W, opts: &EngineOptions) -> Result<Self> {
        let findings = lint_autonomy_coverage(&model);
        if !findings.is_empty() && !opts.allow_lint_failures {
            for f in &findings {
                log::warn!("lint: {} at {}: {}", f.kind.as_str(), f.node, f.detail);
            }
            return Err(Error::Lint(findings.len()));
        }

        let ticks = opts.ticks_override.unwrap_or(scenario.ticks);
        let seed = opts.seed_override.unwrap_or(scenario.seed);
        let dt = scenario.dt;

        let mut bus = CrosstalkBus::new(model.graph.clone(), model.topics.clone());
        bus.enabled = !opts.disable_bus;

        let mut nodes = Vec::new();
        for tn in model.nodes_top_down() {
            let mut rt = NodeRt {
                path: tn.path.clone(),

                control: None,
                autonomy: None,
            };
            if let Some(att) = &tn.attachment {
                let def = ControlLoopDef {
                    controller: att.control.controller.clone(),
                    plant: att.control.plant.clone(),
                    filter: att.control.filter,
                    dt,
                };
                def.validate()?;
                let state = def.initial_state();
                rt.control = Some(ControlRt {
                    def,
                    state,
                    cmd: LoopCommand::regulate(0.0),
                    noise_sigma: scenario.noise.plant_sigma(&tn.path),
                    disturbance_amp: scenario
                        .disturbance
                        .get(tn.path.as_str())
                        .copied()
                        .unwrap_or(0.0),
                    bias: 0.0,
                    dropout_until: 0,
                    settled_bound: att.control.settled_bound,
                });
                if let Some(aut) = &att.autonomy {
                    let mut block = AutonomyBlock::new(tn.path.clone(), aut.machine.clone())?
                        .with_params(aut.params.clone());
                    block.superiors = model.graph.superiors_of(&tn.path).into_iter().collect();
                    block.accepts = aut.accepts.iter().cloned().collect();
                    block.ack_topic = aut.ack_topic.clone();
                    for topic in &aut.subscribes {
                        bus.subscribe(&tn.path, topic)?;
                    }
                    let channels = aut
                        .env_channels
                        .iter()
                        .map(|c| EnvChanRt {
                            name: c.name.clone(),
                            alpha: c.alpha,
                            sigma: scenario.noise.env_sigma(&tn.path, &c.name),
                            filt: 0.0,
                            initialized: false,
                            last_sample_tick: None,
                            bias: 0.0,
                            dropout_until: 0,
                        })
                        .collect();
                    rt.autonomy = Some(AutonomyRt {
                        block,
                        channels,
                        feedback: EnvFeedback::default(),
                        estimator: aut.estimator.as_ref().map(|cfg| EstimatorRt {
                            cfg: cfg.clone(),
                            state: DegradationEstimator::new(cfg.window, cfg.rho, cfg.nominal_a),
                        }),
                    });
                }
            }
            nodes.push(rt);
        }

        // Schedule validation: every command targets a supervisory block.
        let mut commands: BTreeMap<u64, Vec<(NodePath, CommandVerb)>> = BTreeMap::new();
        for c in &scenario.commands {
            let target = NodePath::new(&c.target);
            let has_autonomy = nodes
                .iter()
                .any(|n| n.path == target && n.autonomy.is_some());
            if !has_autonomy {
                return Err(Error::Config(format!(
                    "command at tick {} targets {} which has no autonomy block",
                    c.tick, c.target
                )));
            }
            commands.entry(c.tick).or_default().push((target, c.verb()?));
        }

        // Fault validation: target paths must exist, sensor channels must be
        // declared, world kinds must make sense to the world.
        let mut flares = Vec::new();
        for f in &scenario.faults {
            let target = NodePath::new(f.kind.target());
            if !model.nodes.contains_key(&target) {
                return Err(Error::model(
                    f.kind.target(),
                    format!("fault at tick {} targets an unknown node", f.tick),
                ));
            }
            match &f.kind {
                FaultKind::SensorBias { channel, .. } | FaultKind::SensorDropout { channel, .. } => {
                    let rt = nodes.iter().find(|n| n.path == target).unwrap();
                    let ok = if channel == "s_p" {
                        rt.control.is_some()
                    } else {
                        rt.autonomy
                            .as_ref()
                            .map(|a| a.channels.iter().any(|c| &c.name == channel))
                            .unwrap_or(false)
                    };
                    if !ok {
                        return Err(Error::model(
                            f.kind.target(),
                            format!("sensor fault references undeclared channel {channel}"),
                        ));
                    }
                }
                FaultKind::SolarFlare { duration, .. } => {
                    world.check_fault(&f.kind)?;
                    flares.push((f.tick, f.tick + duration));
                }
                other => world.check_fault(other)?,
            }
        }

        let env = OrbitalEnv {
            period_s: scenario.environment.orbit_period_s,
            eclipse_fraction: scenario.environment.eclipse_fraction,
            ramp_width_s: scenario.environment.ramp_width_s,
            sun_initial_rad: scenario.environment.sun_initial_rad,
            sun_rate_rad_per_s: scenario.environment.sun_rate(),
            forecast_lead_ticks: scenario.environment.forecast_lead_ticks,
            dt,
        };

        Ok(Engine {
            dt,
            ticks,
            seed,
            scenario_name: scenario.name.clone(),
            scenario_hash: scenario.source_hash,
            model_name: model.name.clone(),
            capacity_as: scenario.power.battery_capacity_as,
            soc_initial: scenario.power.soc_initial,
            env,
            eclipse_topic: scenario.environment.eclipse_topic.clone(),
            flare_topic: scenario.environment.flare_topic.clone(),
            world,
            bus,
            nodes,
            commands,
            faults: scenario.faults.clone(),
            flares,
            rng: RngStreams::new(seed),
        })
    }

    fn flare_active(&self, tick: u64) -> bool {
        self.flares.iter().any(|(s, e)| (*s..*e).contains(&tick))
    }

    /// Run the scenario, streaming trace rows into `sink`. Deterministic for
    /// a fixed (scenario, seed): byte-identical output across runs.
    pub fn run<S: Write>(&mut self, sink: S) -> Result<RunSummary> {
        let mut w = TraceWriter::new(sink)?;
        w.meta(&[
            ("scenario", self.scenario_name.clone()),
            ("model", self.model_name.clone()),
            ("seed", self.seed.to_string()),
            ("dt", fmt_f64(self.dt)),
            ("ticks", self.ticks.to_string()),
            ("scenario_hash", format!("{:016x}", self.scenario_hash)),
            ("capacity_as", fmt_f64(self.capacity_as)),
            ("soc_initial", fmt_f64(self.soc_initial)),
            ("bus_enabled", u8::from(self.bus.enabled).to_string()),
        ])?;
        let bound_meta: Vec<(String, String)> = self
            .nodes
            .iter()
            .filter_map(|n| {
                n.control.as_ref().map(|c| {
                    (
                        format!("settled_bound:{}", n.path),
                        fmt_f64(c.settled_bound),
                    )
                })
            })
            .collect();
        if !bound_meta.is_empty() {
            let pairs: Vec<(&str, String)> = bound_meta
                .iter()
                .map(|(k, v)| (k.as_str(), v.clone()))
                .collect();
            w.meta(&pairs)?;
        }

        let mut summary = RunSummary {
            scenario: self.scenario_name.clone(),
            seed: self.seed,
            ticks: self.ticks,
            ..RunSummary::default()
        };

        for tick in 0..self.ticks {
            self.step_tick(tick, &mut w, &mut summary)?;
        }

        summary.world = self.world.summary();
        Ok(summary)
    }

    fn step_tick<S: Write>(
        &mut self,
        tick: u64,
        w: &mut TraceWriter<S>,
        summary: &mut RunSummary,
    ) -> Result<()> {
        let t = tick as f64 * self.dt;
        let illum = self.env.illumination_at(t);
        let sun = self.env.sun_azimuth_at(t);
        let flare = self.flare_active(tick);

        // --- Phase 1: environment, faults, world. -------------------------
        for i in 0..self.faults.len() {
            let f = self.faults[i].clone();
            if f.tick != tick {
                continue;
            }
            summary.faults_applied += 1;
            w.row(
                tick,
                1,
                RowKind::Event,
                f.kind.target(),
                "fault",
                &[("fault_kind", f.kind.kind_name().to_string())],
            )?;
            match &f.kind {
                FaultKind::SensorBias { target, channel, bias } => {
                    self.apply_sensor_bias(target, channel, *bias)?;
                }
                FaultKind::SensorDropout { target, channel, duration } => {
                    self.apply_sensor_dropout(target, channel, tick + duration)?;
                }
                kind => {
                    for ev in self.world.apply_fault(tick, kind)? {
                        w.row(
                            tick,
                            1,
                            RowKind::Event,
                            ev.node.as_str(),
                            &ev.name,
                            &fields_f64(&ev.fields),
                        )?;
                    }
                    if let FaultKind::SolarFlare { factor, .. } = kind {
                        self.bus.publish(
                            &NodePath::new(ENVIRONMENT_SENDER),
                            &self.flare_topic,
                            Payload::FlareAlert {
                                active: true,
                                factor: *factor,
                            },
                            tick,
                        )?;
                    }
                }
            }
        }
        // Flare all-clear messages when windows end.
        for (start, end) in self.flares.clone() {
            if end == tick {
                let _ = start;
                self.bus.publish(
                    &NodePath::new(ENVIRONMENT_SENDER),
                    &self.flare_topic,
                    Payload::FlareAlert {
                        active: false,
                        factor: 1.0,
                    },
                    tick,
                )?;
            }
        }

        if let Some(payload) = self.env.forecast_due(tick) {
            self.bus.publish(
                &NodePath::new(ENVIRONMENT_SENDER),
                &self.eclipse_topic,
                payload,
                tick,
            )?;
        }

        let mut plants = BTreeMap::new();
        let mut params: BTreeMap<NodePath, BTreeMap<String, f64>> = BTreeMap::new();
        let mut states = BTreeMap::new();
        for n in &self.nodes {
            if let Some(c) = &n.control {
                plants.insert(
                    n.path.clone(),
                    PlantSnapshot {
                        y: c.state.y,
                        theta: c.state.blocks.plant.aux_theta(),
                    },
                );
            }
            if let Some(a) = &n.autonomy {
                params.insert(
                    n.path.clone(),
                    a.block
                        .params
                        .iter()
                        .map(|(k, p)| (k.clone(), p.value))
                        .collect(),
                );
                states.insert(n.path.clone(), a.block.current_state.clone());
            }
        }
        let ctx = WorldTick {
            tick,
            dt: self.dt,
            illumination: illum,
            sun_azimuth: sun,
            flare_active: flare,
            plants: &plants,
            params: &params,
            autonomy_states: &states,
        };
        for ev in self.world.begin_tick(&ctx) {
            w.row(
                tick,
                1,
                RowKind::Event,
                ev.node.as_str(),
                &ev.name,
                &fields_f64(&ev.fields),
            )?;
        }

        let mut env_fields: Vec<(&'static str, String)> = vec![
            ("illumination", fmt_f64(illum)),
            ("sun_azimuth", fmt_f64(sun)),
            ("flare", u8::from(flare).to_string()),
        ];
        for (k, v) in self.world.env_fields() {
            env_fields.push((k, fmt_f64(v)));
        }
        w.row(tick, 1, RowKind::Signal, ENVIRONMENT_SENDER, "env", &env_fields)?;

        // --- Phase 2: bus delivery. ---------------------------------------
        let inboxes = self.bus.deliver(tick);
        for (node, inbox) in &inboxes {
            for msg in inbox {
                summary.messages_delivered += 1;
                w.row(
                    tick,
                    2,
                    RowKind::Message,
                    node.as_str(),
                    msg.kind.as_str(),
                    &[
                        ("from", msg.sender.0.clone()),
                        ("address", msg.address.describe()),
                        ("payload_type", msg.payload.type_name().to_string()),
                        ("payload", msg.payload.describe()),
                        ("sent", msg.sent_tick.to_string()),
                        ("verdict", "delivered".to_string()),
                    ],
                )?;
            }
        }

        // --- Phase 3: scheduled goal commands. -----------------------------
        let due: Vec<(NodePath, CommandVerb)> =
            self.commands.get(&tick).cloned().unwrap_or_default();
        for (target, verb) in &due {
            w.row(
                tick,
                3,
                RowKind::Event,
                target.as_str(),
                "command",
                &[("verb", verb.describe()), ("issuer", "ground".to_string())],
            )?;
        }

        // --- Phase 4: supervisory blocks, top-down. -------------------------
        let empty_inbox: Vec<Message> = Vec::new();
        for i in 0..self.nodes.len() {
            let path = self.nodes[i].path.clone();
            if self.nodes[i].autonomy.is_none() {
                continue;
            }
            let a: Vec<IssuedCommand> = due
                .iter()
                .filter(|(t, _)| t == &path)
                .map(|(_, verb)| IssuedCommand {
                    verb: verb.clone(),
                    issuer: Issuer::Ground,
                })
                .collect();
            let inbox = inboxes.get(&path).unwrap_or(&empty_inbox);
            let f_p = self.nodes[i]
                .control
                .as_ref()
                .map(|c| c.state.f_p);

            let art = self.nodes[i].autonomy.as_mut().unwrap();
            let inputs = AutonomyInputs {
                tick,
                a: &a,
                inbox,
                f_e: &art.feedback,
                f_p,
            };
            let step = step_autonomy_loop(&art.block, &inputs)
                .map_err(|e| e.into_fault(tick, path.as_str()))?;
            art.block = step.block;
            if let Some(c) = self.nodes[i].control.as_mut() {
                c.cmd = step.loop_cmd;
            }

            for ev in &step.events {
                emit_autonomy_event(w, tick, &path, ev, summary)?;
            }
            for draft in &step.outbox {
                self.dispatch_draft(tick, &path, draft, w, summary)?;
            }

            // Peak-capability estimation attached to this block.
            let art = self.nodes[i].autonomy.as_mut().unwrap();
            if let Some(est) = &mut art.estimator {
                if let Some(sample) = art.feedback.value(&est.cfg.sample_channel) {
                    let alignment = self
                        .world
                        .channel(&path, "alignment_err")
                        .unwrap_or(std::f64::consts::PI);
                    let gated = illum >= 0.999 && alignment <= ALIGNED_TOL_RAD;
                    let (next, fired) = degradation_estimator_step(&est.state, sample, gated);
                    est.state = next;
                    if let Some(estimate) = fired {
                        let cfg = est.cfg.clone();
                        w.row(
                            tick,
                            4,
                            RowKind::Event,
                            path.as_str(),
                            "degradation_detected",
                            &[("estimate", fmt_f64(estimate))],
                        )?;
                        let drafts = [
                            MessageDraft::Publish {
                                topic: cfg.publish_topic.clone(),
                                payload: Payload::ParamUpdate {
                                    name: cfg.command_param.clone(),
                                    value: estimate,
                                },
                            },
                            MessageDraft::Send {
                                kind: InteractionKind::Command,
                                to: vec![cfg.command_target.clone()],
                                payload: Payload::Command {
                                    verb: CommandVerb::SetParam {
                                        name: cfg.command_param.clone(),
                                        value: estimate,
                                        unit: None,
                                    },
                                },
                            },
                        ];
                        for draft in &drafts {
                            self.dispatch_draft(tick, &path, draft, w, summary)?;
                        }
                    }
                }
            }
        }

        // --- Phase 5: control loops. ----------------------------------------
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by(|&a, &b| self.nodes[a].path.cmp(&self.nodes[b].path));
        for i in order {
            let path = self.nodes[i].path.clone();
            let Some(c) = self.nodes[i].control.as_mut() else {
                continue;
            };
            let d_p = self
                .rng
                .uniform(&format!("{path}:d_p"), c.disturbance_amp);
            let noise = self.rng.normal(&format!("{path}:s_p"), c.noise_sigma) + c.bias;
            let sensor = if c.dropout_until > tick {
                SensorHealth::Dropout
            } else {
                SensorHealth::Ok
            };
            let base = PlantEnv {
                illumination: illum,
                sun_azimuth: sun,
                panel_peak_a: 0.0,
                overdrive: 1.0,
            };
            let env = self.world.plant_env(&path, base);
            let next = step_control_loop(&c.def, &c.state, c.cmd, d_p, noise, &env, sensor)
                .map_err(|e| e.into_fault(tick, path.as_str()))?;
            c.state = next;
            let mode = match c.cmd.mode {
                LoopMode::Regulate => "regulate".to_string(),
                LoopMode::Track => "track".to_string(),
                LoopMode::Hold { target } => format!("hold:{target:.4}"),
            };
            w.row(
                tick,
                5,
                RowKind::Signal,
                path.as_str(),
                "loop",
                &[
                    ("r", fmt_f64(c.state.r)),
                    ("e_r", fmt_f64(c.state.e_r)),
                    ("u", fmt_f64(c.state.u)),
                    ("y", fmt_f64(c.state.y)),
                    ("d_p", fmt_f64(c.state.d_p)),
                    ("s_p", fmt_f64(c.state.s_p)),
                    ("f_p", fmt_f64(c.state.f_p)),
                    ("mode", mode),
                ],
            )?;
        }

        // --- Phase 6: environment sensing and filtering. ---------------------
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by(|&a, &b| self.nodes[a].path.cmp(&self.nodes[b].path));
        for i in order {
            let path = self.nodes[i].path.clone();
            let world = &self.world;
            let Some(art) = self.nodes[i].autonomy.as_mut() else {
                continue;
            };
            if art.channels.is_empty() {
                continue;
            }
            let mut fields: Vec<(&str, String)> = Vec::with_capacity(art.channels.len());
            for ch in &mut art.channels {
                let raw = match ch.name.as_str() {
                    "illumination" => illum,
                    "sun_azimuth" => sun,
                    name => world.channel(&path, name).ok_or_else(|| {
                        Error::Config(format!("node {path} senses unavailable channel {name}"))
                    })?,
                };
                if ch.dropout_until > tick && ch.initialized {
                    // Hold the last estimate; staleness grows.
                } else {
                    let s_e = raw + ch.bias + self.rng.normal(&format!("{path}:env:{}", ch.name), ch.sigma);
                    if !s_e.is_finite() {
                        return Err(Error::Fault {
                            tick,
                            node: path.0.clone(),
                            detail: format!("non-finite sample on channel {}", ch.name),
                        });
                    }
                    ch.filt = if ch.initialized {
                        ch.alpha * s_e + (1.0 - ch.alpha) * ch.filt
                    } else {
                        ch.initialized = true;
                        s_e
                    };
                    ch.last_sample_tick = Some(tick);
                }
                let staleness = tick - ch.last_sample_tick.unwrap_or(tick);
                art.feedback.set(&ch.name, ch.filt, staleness);
                fields.push((ch.name.as_str(), fmt_f64(ch.filt)));
            }
            let fields: Vec<(&str, String)> = fields;
            w.row(tick, 6, RowKind::Signal, path.as_str(), "f_e", &fields)?;
        }

        Ok(())
    }

    fn dispatch_draft<S: Write>(
        &mut self,
        tick: u64,
        sender: &NodePath,
        draft: &MessageDraft,
        w: &mut TraceWriter<S>,
        summary: &mut RunSummary,
    ) -> Result<()> {
        match draft {
            MessageDraft::Publish { topic, payload } => {
                self.bus.publish(sender, topic, payload.clone(), tick)?;
            }
            MessageDraft::Send { kind, to, payload } => {
                match self.bus.send(*kind, sender, to, payload.clone(), tick)? {
                    SendOutcome::Queued { .. } | SendOutcome::Disabled => {}
                    SendOutcome::Violation { addressee, reason } => {
                        summary.routing_violations += 1;
                        w.row(
                            tick,
                            4,
                            RowKind::Event,
                            sender.as_str(),
                            "routing_violation",
                            &[
                                ("to", addressee.0.clone()),
                                ("msg_kind", kind.as_str().to_string()),
                                ("reason", reason.clone()),
                            ],
                        )?;
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_sensor_bias(&mut self, target: &str, channel: &str, bias: f64) -> Result<()> {
        let target = NodePath::new(target);
        let rt = self
            .nodes
            .iter_mut()
            .find(|n| n.path == target)
            .ok_or_else(|| Error::model(target.as_str(), "unknown fault target"))?;
        if channel == "s_p" {
            rt.control.as_mut().unwrap().bias = bias;
        } else {
            let art = rt.autonomy.as_mut().unwrap();
            let ch = art.channels.iter_mut().find(|c| c.name == channel).unwrap();
            ch.bias = bias;
        }
        Ok(())
    }

    fn apply_sensor_dropout(&mut self, target: &str, channel: &str, until: u64) -> Result<()> {
        let target = NodePath::new(target);
        let rt = self
            .nodes
            .iter_mut()
            .find(|n| n.path == target)
            .ok_or_else(|| Error::model(target.as_str(), "unknown fault target"))?;
        if channel == "s_p" {
            rt.control.as_mut().unwrap().dropout_until = until;
        } else {
            let art = rt.autonomy.as_mut().unwrap();
            let ch = art.channels.iter_mut().find(|c| c.name == channel).unwrap();
            ch.dropout_until = until;
        }
        Ok(())
    }
}

fn fields_f64(fields: &[(&'static str, f64)]) -> Vec<(&'static str, String)> {
    fields.iter().map(|(k, v)| (*k, fmt_f64(*v))).collect()
}

fn emit_autonomy_event<S: Write>(
    w: &mut TraceWriter<S>,
    tick: u64,
    node: &NodePath,
    ev: &AutonomyEvent,
    summary: &mut RunSummary,
) -> Result<()> {
    match ev {
        AutonomyEvent::TransitionFired {
            from,
            to,
            sscc,
            from_pending,
        } => {
            summary.transitions += 1;
            w.row(
                tick,
                4,
                RowKind::Transition,
                node.as_str(),
                &format!("{from}->{to}"),
                &[
                    ("sscc", sscc.as_str().to_string()),
                    ("pending", u8::from(*from_pending).to_string()),
                ],
            )
        }
        AutonomyEvent::StateForced { to, cause } => w.row(
            tick,
            4,
            RowKind::Transition,
            node.as_str(),
            &format!("forced->{to}"),
            &[("cause", cause.clone())],
        ),
        AutonomyEvent::CommandApplied { kind, detail, issuer } => {
            summary.commands_applied += 1;
            w.row(
                tick,
                4,
                RowKind::Event,
                node.as_str(),
                "command_applied",
                &[
                    ("verb_kind", kind.to_string()),
                    ("verb", detail.clone()),
                    ("issuer", issuer.describe()),
                ],
            )
        }
        AutonomyEvent::AuthorityViolation { sender, detail } => {
            summary.authority_violations += 1;
            w.row(
                tick,
                4,
                RowKind::Event,
                node.as_str(),
                "authority_violation",
                &[("from", sender.0.clone()), ("detail", detail.clone())],
            )
        }
        AutonomyEvent::OverrideExpired => w.row(
            tick,
            4,
            RowKind::Event,
            node.as_str(),
            "override_expired",
            &[],
        ),
        AutonomyEvent::ParamChanged { name, value } => w.row(
            tick,
            4,
            RowKind::Event,
            node.as_str(),
            "param_set",
            &[("param", name.clone()), ("value", fmt_f64(*value))],
        ),
    }
}

// ---------------------------------------------------------------------------
// Convenience entry point for the shipped mission
// ---------------------------------------------------------------------------

/// Load the scenario's model, build the power world, and run, streaming the
/// trace into `sink`.
pub fn run_power_scenario<S: Write>(
    scenario: &Scenario,
    base_dir: Option<&std::path::Path>,
    opts: &EngineOptions,
    sink: S,
) -> Result<RunSummary> {
    let model = load_model(&scenario.model, base_dir)?;
    let world = PowerWorld::new(&scenario.power);
    let mut engine = Engine::new(model, scenario.clone(), world, opts)?;
    engine.run(sink)
}

/// Resolve a scenario by built-in name or path and run it.
pub fn run_scenario_spec<S: Write>(
    spec: &str,
    opts: &EngineOptions,
    sink: S,
) -> Result<RunSummary> {
    let (scenario, dir) = Scenario::load(spec)?;
    run_power_scenario(&scenario, dir.as_deref(), opts, sink)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn illumination_square_wave() {
        // Eclipse occupies the final fraction of each orbit.
        assert_eq!(illumination(5000.0, 6000.0, 0.35), 0.0); // 5000 > 3900
        assert_eq!(illumination(3899.0, 6000.0, 0.35), 1.0);
        assert_eq!(illumination(3900.0, 6000.0, 0.35), 0.0);
        assert_eq!(illumination(123.0, 6000.0, 0.0), 1.0);
        // Negative time extends periodically: -100 s == 5900 s into the orbit.
        assert_eq!(illumination(-100.0, 6000.0, 0.35), 0.0);
    }

    fn env_600() -> OrbitalEnv {
        OrbitalEnv {
            period_s: 600.0,
            eclipse_fraction: 0.35,
            ramp_width_s: 0.0,
            sun_initial_rad: 0.0,
            sun_rate_rad_per_s: std::f64::consts::TAU / 600.0,
            forecast_lead_ticks: 10,
            dt: 1.0,
        }
    }

    #[test]
    fn forecast_published_lead_ticks_before_entry() {
        // Eclipse starts at tick 390 (0.65 * 600); with lead 10 the start
        // forecast is sent at 380 so subscribers see it at 381.
        let env = env_600();
        for tick in 370..380 {
            assert!(env.forecast_due(tick).is_none(), "tick {tick}");
        }
        match env.forecast_due(380) {
            Some(Payload::EclipseForecast {
                start: true,
                event_tick,
                exit_azimuth,
            }) => {
                assert_eq!(event_tick, 390);
                // Exit is at t=600; azimuth = rate * 600 = tau.
                assert!((exit_azimuth - std::f64::consts::TAU).abs() < 1e-9);
            }
            other => panic!("expected start forecast, got {other:?}"),
        }
        // End forecast: exit at tick 600, published at 590.
        match env.forecast_due(590) {
            Some(Payload::EclipseForecast { start: false, event_tick, .. }) => {
                assert_eq!(event_tick, 600)
            }
            other => panic!("expected end forecast, got {other:?}"),
        }
    }

    #[test]
    fn no_forecasts_without_eclipse() {
        let mut env = env_600();
        env.eclipse_fraction = 0.0;
        for tick in 0..1200 {
            assert!(env.forecast_due(tick).is_none());
        }
    }

    #[test]
    fn ramped_illumination_stays_in_unit_interval() {
        let mut env = env_600();
        env.ramp_width_s = 20.0;
        for k in 0..1200 {
            let v = env.illumination_at(k as f64 * 0.5);
            assert!((0.0..=1.0).contains(&v));
        }
        // Full sun away from the edges, dark inside the eclipse.
        assert_eq!(env.illumination_at(100.0), 1.0);
        assert_eq!(env.illumination_at(450.0), 0.0);
        let mid_ramp = env.illumination_at(390.0 - 10.0);
        assert!(mid_ramp > 0.0 && mid_ramp < 1.0);
    }
}
