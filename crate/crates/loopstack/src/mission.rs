//! The power-subsystem reference mission: circuit breaker, solar array drive,
//! generation/storage/distribution assemblies, battery dynamics, the
//! degradation estimator, and the electrical world the engine steps. The
//! shipped machines are available as built-ins by name (`breaker_v1`,
//! `drive_v1`, `generation_v1`, `power_v1`, `storage_v1`, `distribution_v1`).

use std::collections::BTreeMap;

use crate::autonomy::{
    Action, Cmp, CommandVerbSpec, Guard, ModeSpec, Param, PayloadSpec, Sscc, StateDef,
    StateMachine, TaggedAction, Transition, ValueSpec,
};
use crate::bus::{InteractionKind, NodePath};
use crate::engine::{World, WorldEvent, WorldTick};
use crate::error::{Error, Result};
use crate::scenario::{FaultKind, LoadWindow, PowerCfg, Scenario};

/// Tree paths of the shipped power-demo decomposition.
pub mod paths {
    pub const POWER: &str = "power";
    pub const GENERATION: &str = "power/generation";
    pub const STORAGE: &str = "power/storage";
    pub const DISTRIBUTION: &str = "power/distribution";
    pub const DRIVE: &str = "power/generation/solar_drive";
    pub const MOTOR: &str = "power/generation/solar_drive/motor";
    pub const SENSOR: &str = "power/generation/solar_drive/sensor";
    pub const BREAKER: &str = "power/generation/solar_drive/breaker";
}

/// Crosstalk topics of the shipped mission.
pub mod topics {
    pub const FAULTS: &str = "power/faults";
    pub const STATUS: &str = "power/status";
    pub const PARAM_UPDATES: &str = "power/param_updates";
    pub const ECLIPSE: &str = "env/eclipse";
    pub const FLARE: &str = "env/flare";
}

// ---------------------------------------------------------------------------
// Physics
// ---------------------------------------------------------------------------

/// Panel current for a pointing angle: i_peak * illumination * max(0, cos(err)).
pub fn solar_current(theta: f64, theta_sun: f64, illumination: f64, i_peak: f64) -> f64 {
    i_peak * illumination * (theta - theta_sun).cos().max(0.0)
}

/// Wrap an angle difference into [-pi, pi).
pub fn wrap_pi(x: f64) -> f64 {
    let y = x.rem_euclid(std::f64::consts::TAU);
    if y >= std::f64::consts::PI {
        y - std::f64::consts::TAU
    } else {
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbObserveState {
    pub direction: f64,
    pub prev_measurement: f64,
    /// Commanded angle integrated from this controller's own outputs.
    pub cmd_theta: f64,
}

/// Hill-climbing step: keep direction while the measured current increased
/// since last tick, otherwise reverse; emit +/- step.
pub fn perturb_observe_step(
    st: PerturbObserveState,
    i_measured: f64,
    step: f64,
) -> (f64, PerturbObserveState) {
    let direction = if i_measured > st.prev_measurement {
        st.direction
    } else {
        -st.direction
    };
    let u = direction * step;
    (
        u,
        PerturbObserveState {
            direction,
            prev_measurement: i_measured,
            cmd_theta: st.cmd_theta + u,
        },
    )
}

/// Battery charge state. SoC is clamped to [0, 1]; clamping is reported so
/// energy ledgers reconcile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState {
    /// State of charge, fraction of capacity.
    pub soc: f64,
    pub capacity_as: f64,
    pub i_charge: f64,
    pub i_load: f64,
}

/// soc' = clamp(soc + (i_charge - i_load)*dt/capacity, 0, 1). Returns the
/// new state and the residual discarded by the clamp (zero when unclamped).
pub fn battery_step(
    b: &BatteryState,
    i_charge: f64,
    i_load: f64,
    dt: f64,
) -> (BatteryState, f64) {
    let raw = b.soc + (i_charge - i_load) * dt / b.capacity_as;
    let soc = raw.clamp(0.0, 1.0);
    (
        BatteryState {
            soc,
            capacity_as: b.capacity_as,
            i_charge,
            i_load,
        },
        raw - soc,
    )
}

/// Aggregate drive view maintained by the world.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveState {
    pub theta: f64,
    pub theta_sun: f64,
    pub mode: String,
    pub i_panel: f64,
    /// Effective (degradable) peak-current capability.
    pub i_peak: f64,
}

// ---------------------------------------------------------------------------
// Degradation estimator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationEstimator {
    pub estimate: f64,
    pub window: f64,
    pub rho: f64,
    pub nominal: f64,
    /// Re-arms once the estimate recovers above rho * nominal.
    pub armed: bool,
}

impl DegradationEstimator {
    pub fn new(window: f64, rho: f64, nominal: f64) -> Self {
        DegradationEstimator {
            estimate: nominal,
            window,
            rho,
            nominal,
            armed: true,
        }
    }
}

/// Exponential-average tracker of achievable peak current. Only samples
/// taken when aligned-and-full-sun update the estimate; when the estimate
/// drops below rho * nominal a detection fires once, and the detector
/// re-arms after recovery.
pub fn degradation_estimator_step(
    est: &DegradationEstimator,
    sample: f64,
    gated: bool,
) -> (DegradationEstimator, Option<f64>) {
    let mut next = est.clone();
    if gated {
        next.estimate += (sample - next.estimate) / next.window;
    }
    let threshold = next.rho * next.nominal;
    let mut fired = None;
    if next.armed && next.estimate < threshold {
        next.armed = false;
        fired = Some(next.estimate);
    } else if !next.armed && next.estimate >= threshold {
        next.armed = true;
    }
    (next, fired)
}

// ---------------------------------------------------------------------------
// Shipped machines
// ---------------------------------------------------------------------------

fn sig(channel: &str, op: Cmp, rhs: ValueSpec) -> Guard {
    Guard::Signal {
        channel: channel.into(),
        op,
        rhs,
    }
}

fn pub_status(topic: &str, name: &str) -> Action {
    Action::Publish {
        topic: topic.into(),
        payload: PayloadSpec::Status {
            name: name.into(),
            value: ValueSpec::Value(1.0),
        },
    }
}

fn entry_status(topic: &str, name: &str) -> Vec<TaggedAction> {
    vec![TaggedAction {
        action: pub_status(topic, name),
        sscc: Sscc::Collective,
    }]
}

fn state(id: &str, reference: ValueSpec, mode: ModeSpec, entry: Vec<TaggedAction>) -> StateDef {
    StateDef {
        id: id.into(),
        reference,
        mode,
        entry,
    }
}

fn transition(from: &str, to: &str, guard: Guard, actions: Vec<Action>, sscc: Sscc) -> Transition {
    Transition {
        from: from.into(),
        to: to.into(),
        guard,
        actions,
        sscc,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BreakerParams {
    pub trip_current_a: f64,
    pub soc_full: f64,
    pub soc_low: f64,
}

impl Default for BreakerParams {
    fn default() -> Self {
        BreakerParams {
            trip_current_a: 4.0,
            soc_full: 0.95,
            soc_low: 0.80,
        }
    }
}

impl BreakerParams {
    pub fn table(&self) -> BTreeMap<String, Param> {
        [
            ("trip_current".to_string(), Param::new(self.trip_current_a, "A")),
            ("soc_full".to_string(), Param::new(self.soc_full, "frac")),
            ("soc_low".to_string(), Param::new(self.soc_low, "frac")),
        ]
        .into()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.trip_current_a > 0.0) {
            return Err(Error::Config("breaker trip current must be > 0".into()));
        }
        if !(self.soc_low < self.soc_full) {
            return Err(Error::Config(
                "breaker hysteresis needs soc_low < soc_full".into(),
            ));
        }
        Ok(())
    }
}

/// Commandable-switch supervisor. CLOSED means conducting/charging; the trip
/// uses a strict inequality; the charge cycle carries a hysteresis band; a
/// tripped breaker closes again only on a reset directive from a superior.
pub fn make_breaker_machine(p: &BreakerParams) -> Result<StateMachine> {
    p.validate()?;
    let m = StateMachine {
        name: "breaker_v1".into(),
        states: vec![
            state("CLOSED", ValueSpec::Value(1.0), ModeSpec::Regulate, vec![]),
            state("OPEN_FULL", ValueSpec::Value(0.0), ModeSpec::Regulate, vec![]),
            state(
                "OPEN_FAULT",
                ValueSpec::Value(0.0),
                ModeSpec::Regulate,
                vec![TaggedAction {
                    action: Action::Publish {
                        topic: topics::FAULTS.into(),
                        payload: PayloadSpec::FaultReport {
                            code: "breaker_trip".into(),
                            value: ValueSpec::Channel("i_circuit".into()),
                        },
                    },
                    sscc: Sscc::Collective,
                }],
            ),
        ],
        transitions: vec![
            // Survival first: the reflex trip outranks the charge cycle.
            transition(
                "CLOSED",
                "OPEN_FAULT",
                sig("i_circuit", Cmp::Gt, ValueSpec::Param("trip_current".into())),
                vec![],
                Sscc::Survival,
            ),
            transition(
                "CLOSED",
                "OPEN_FULL",
                sig("soc", Cmp::Ge, ValueSpec::Param("soc_full".into())),
                vec![],
                Sscc::Success,
            ),
            transition(
                "OPEN_FULL",
                "CLOSED",
                sig("soc", Cmp::Le, ValueSpec::Param("soc_low".into())),
                vec![],
                Sscc::Success,
            ),
            transition(
                "OPEN_FAULT",
                "CLOSED",
                Guard::OnDirective { name: "reset".into() },
                vec![pub_status(topics::STATUS, "breaker_reset")],
                Sscc::ContextualizingSituations,
            ),
        ],
        initial: "CLOSED".into(),
        safe_state: Some("OPEN_FAULT".into()),
        modes: vec!["NORMAL".into(), "SAFE".into()],
    };
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Clone, Copy)]
pub struct DriveParams {
    pub cage_angle_rad: f64,
    pub stow_angle_rad: f64,
    pub i_peak_nominal_a: f64,
}

impl Default for DriveParams {
    fn default() -> Self {
        DriveParams {
            cage_angle_rad: 0.0,
            stow_angle_rad: std::f64::consts::PI,
            i_peak_nominal_a: 3.0,
        }
    }
}

impl DriveParams {
    pub fn table(&self) -> BTreeMap<String, Param> {
        [
            ("cage_angle".to_string(), Param::new(self.cage_angle_rad, "rad")),
            ("stow_angle".to_string(), Param::new(self.stow_angle_rad, "rad")),
            (
                "i_peak_nominal".to_string(),
                Param::new(self.i_peak_nominal_a, "A"),
            ),
            ("overdrive".to_string(), Param::new(1.0, "x")),
        ]
        .into()
    }
}

/// Solar-array drive supervisor. Tracking is handed to the inner hill
/// climber; an eclipse-start forecast cages the array at the forecast exit
/// azimuth; flare alerts stow it (survival outranks the eclipse logic);
/// normal operations resume when sunlight is measured again. The parameter
/// values land in the block's table via [`DriveParams::table`]; the machine
/// itself references them by name.
pub fn make_drive_machine(_p: &DriveParams) -> Result<StateMachine> {
    let m = StateMachine {
        name: "drive_v1".into(),
        states: vec![
            state(
                "TRACK",
                ValueSpec::Param("i_peak_nominal".into()),
                ModeSpec::Track,
                entry_status(topics::STATUS, "drive_mode_track"),
            ),
            state(
                "CAGE",
                ValueSpec::Value(0.0),
                ModeSpec::Hold {
                    target: ValueSpec::Param("cage_angle".into()),
                },
                entry_status(topics::STATUS, "drive_mode_cage"),
            ),
            state(
                "STOWED",
                ValueSpec::Value(0.0),
                ModeSpec::Hold {
                    target: ValueSpec::Param("stow_angle".into()),
                },
                entry_status(topics::STATUS, "drive_mode_stowed"),
            ),
        ],
        transitions: vec![
            transition(
                "TRACK",
                "STOWED",
                Guard::OnMessage { event: "flare_start".into() },
                vec![],
                Sscc::Survival,
            ),
            transition(
                "CAGE",
                "STOWED",
                Guard::OnMessage { event: "flare_start".into() },
                vec![],
                Sscc::Survival,
            ),
            transition(
                "TRACK",
                "CAGE",
                Guard::OnMessage { event: "eclipse_start".into() },
                vec![Action::SetOwnParam {
                    name: "cage_angle".into(),
                    value: ValueSpec::MessageField("exit_azimuth".into()),
                }],
                Sscc::ContextualizingSituations,
            ),
            transition(
                "CAGE",
                "TRACK",
                sig("illumination", Cmp::Ge, ValueSpec::Value(0.999)),
                vec![],
                Sscc::Success,
            ),
            transition(
                "STOWED",
                "TRACK",
                Guard::OnMessage { event: "flare_clear".into() },
                vec![],
                Sscc::Success,
            ),
        ],
        initial: "TRACK".into(),
        safe_state: Some("STOWED".into()),
        modes: vec!["NORMAL".into(), "SAFE".into()],
    };
    m.validate()?;
    Ok(m)
}

fn generation_params() -> BTreeMap<String, Param> {
    [
        ("overdrive_boost".to_string(), Param::new(1.5, "x")),
        ("sacrifice_trip".to_string(), Param::new(8.0, "A")),
        ("normal_trip".to_string(), Param::new(4.0, "A")),
        ("sacrifice_authorized".to_string(), Param::new(0.0, "bool")),
    ]
    .into()
}

/// Generation-assembly supervisor. On a critical-demand directive it boosts
/// the panel section; when sacrifice is authorized it also raises the
/// breaker threshold past the safe rating, knowingly trading the section for
/// the window. Circuit faults stand the assembly down until the current dies.
pub fn make_generation_machine() -> Result<StateMachine> {
    let drive = NodePath::new(paths::DRIVE);
    let breaker = NodePath::new(paths::BREAKER);
    let storage = NodePath::new(paths::STORAGE);

    let set_overdrive = |v: ValueSpec| Action::SendCommand {
        to: drive.clone(),
        verb: CommandVerbSpec::SetParam {
            name: "overdrive".into(),
            value: v,
            unit: Some("x".into()),
        },
    };
    let set_trip = |v: ValueSpec| Action::SendCommand {
        to: breaker.clone(),
        verb: CommandVerbSpec::SetParam {
            name: "trip_current".into(),
            value: v,
            unit: Some("A".into()),
        },
    };
    let joint = |session: &str, note: &str| Action::SendJoint {
        kind: InteractionKind::Coordination,
        to: storage.clone(),
        session: session.into(),
        note: note.into(),
    };

    let m = StateMachine {
        name: "generation_v1".into(),
        states: vec![
            state("NORMAL", ValueSpec::Value(0.0), ModeSpec::Regulate, vec![]),
            state(
                "CRITICAL_SACRIFICE",
                ValueSpec::Value(0.0),
                ModeSpec::Regulate,
                entry_status(topics::STATUS, "gen_critical_sacrifice"),
            ),
            state(
                "CRITICAL_PLAIN",
                ValueSpec::Value(0.0),
                ModeSpec::Regulate,
                entry_status(topics::STATUS, "gen_critical_plain"),
            ),
            state(
                "FAULT_STANDDOWN",
                ValueSpec::Value(0.0),
                ModeSpec::Regulate,
                entry_status(topics::STATUS, "gen_fault_standdown"),
            ),
        ],
        transitions: vec![
            transition(
                "NORMAL",
                "FAULT_STANDDOWN",
                Guard::OnMessage { event: "fault_report".into() },
                vec![set_overdrive(ValueSpec::Value(1.0))],
                Sscc::Survival,
            ),
            // Sacrifice-authorized branch is declared before the plain one so
            // it wins when the authorization parameter is set.
            transition(
                "NORMAL",
                "CRITICAL_SACRIFICE",
                Guard::All(vec![
                    Guard::OnDirective { name: "demand_start".into() },
                    Guard::ParamCmp {
                        name: "sacrifice_authorized".into(),
                        op: Cmp::Ge,
                        rhs: ValueSpec::Value(1.0),
                    },
                ]),
                vec![
                    set_overdrive(ValueSpec::Param("overdrive_boost".into())),
                    set_trip(ValueSpec::Param("sacrifice_trip".into())),
                    joint("demand_support", "cover_load"),
                ],
                Sscc::Success,
            ),
            transition(
                "NORMAL",
                "CRITICAL_PLAIN",
                Guard::OnDirective { name: "demand_start".into() },
                vec![
                    set_overdrive(ValueSpec::Param("overdrive_boost".into())),
                    joint("demand_support", "cover_load"),
                ],
                Sscc::Success,
            ),
            transition(
                "CRITICAL_SACRIFICE",
                "NORMAL",
                Guard::OnDirective { name: "demand_end".into() },
                vec![
                    set_overdrive(ValueSpec::Value(1.0)),
                    set_trip(ValueSpec::Param("normal_trip".into())),
                    joint("demand_release", "released"),
                ],
                Sscc::Success,
            ),
            transition(
                "CRITICAL_PLAIN",
                "NORMAL",
                Guard::OnDirective { name: "demand_end".into() },
                vec![set_overdrive(ValueSpec::Value(1.0)), joint("demand_release", "released")],
                Sscc::Success,
            ),
            transition(
                "FAULT_STANDDOWN",
                "NORMAL",
                sig("i_circuit", Cmp::Le, ValueSpec::Value(0.1)),
                vec![],
                Sscc::ContextualizingSituations,
            ),
        ],
        initial: "NORMAL".into(),
        safe_state: Some("FAULT_STANDDOWN".into()),
        modes: vec!["NORMAL".into(), "SAFE".into()],
    };
    m.validate()?;
    Ok(m)
}

fn power_params() -> BTreeMap<String, Param> {
    [
        ("soc_saving".to_string(), Param::new(0.25, "frac")),
        ("soc_recover".to_string(), Param::new(0.35, "frac")),
    ]
    .into()
}

/// Subsystem supervisor: relays ground directives down the chain (breaker
/// resets, demand support) and drops into an energy-saving posture on low
/// charge.
pub fn make_power_machine() -> Result<StateMachine> {
    let breaker = NodePath::new(paths::BREAKER);
    let generation = NodePath::new(paths::GENERATION);
    let m = StateMachine {
        name: "power_v1".into(),
        states: vec![
            state("NOMINAL", ValueSpec::Value(0.0), ModeSpec::Regulate, vec![]),
            state(
                "ENERGY_SAVING",
                ValueSpec::Value(0.0),
                ModeSpec::Regulate,
                entry_status(topics::STATUS, "power_energy_saving"),
            ),
            state(
                "DEMAND_SUPPORT",
                ValueSpec::Value(0.0),
                ModeSpec::Regulate,
                entry_status(topics::STATUS, "power_demand_support"),
            ),
        ],
        transitions: vec![
            transition(
                "NOMINAL",
                "ENERGY_SAVING",
                sig("soc", Cmp::Le, ValueSpec::Param("soc_saving".into())),
                vec![],
                Sscc::Survival,
            ),
            transition(
                "NOMINAL",
                "NOMINAL",
                Guard::OnDirective { name: "breaker_reset".into() },
                vec![Action::SendCommand {
                    to: breaker,
                    verb: CommandVerbSpec::Directive { name: "reset".into() },
                }],
                Sscc::ContextualizingSituations,
            ),
            transition(
                "NOMINAL",
                "DEMAND_SUPPORT",
                Guard::OnDirective { name: "demand_support".into() },
                vec![Action::SendCommand {
                    to: generation.clone(),
                    verb: CommandVerbSpec::Directive { name: "demand_start".into() },
                }],
                Sscc::Success,
            ),
            transition(
                "DEMAND_SUPPORT",
                "NOMINAL",
                Guard::OnDirective { name: "demand_end".into() },
                vec![Action::SendCommand {
                    to: generation,
                    verb: CommandVerbSpec::Directive { name: "demand_end".into() },
                }],
                Sscc::Success,
            ),
            transition(
                "ENERGY_SAVING",
                "NOMINAL",
                sig("soc", Cmp::Ge, ValueSpec::Param("soc_recover".into())),
                vec![],
                Sscc::Success,
            ),
        ],
        initial: "NOMINAL".into(),
        safe_state: Some("ENERGY_SAVING".into()),
        modes: vec!["NORMAL".into(), "SAFE".into()],
    };
    m.validate()?;
    Ok(m)
}

fn storage_params() -> BTreeMap<String, Param> {
    [
        ("soc_low_reserve".to_string(), Param::new(0.25, "frac")),
        ("soc_ok".to_string(), Param::new(0.35, "frac")),
    ]
    .into()
}

/// Storage-assembly supervisor: guards its reserve and joins demand-support
/// coordination sessions from generation.
pub fn make_storage_machine() -> Result<StateMachine> {
    let m = StateMachine {
        name: "storage_v1".into(),
        states: vec![
            state("NOMINAL", ValueSpec::Value(0.0), ModeSpec::Regulate, vec![]),
            state(
                "LOW_RESERVE",
                ValueSpec::Value(0.0),
                ModeSpec::Regulate,
                entry_status(topics::STATUS, "storage_low_reserve"),
            ),
            state(
                "SUPPORT",
                ValueSpec::Value(0.0),
                ModeSpec::Regulate,
                entry_status(topics::STATUS, "storage_support"),
            ),
        ],
        transitions: vec![
            transition(
                "NOMINAL",
                "LOW_RESERVE",
                sig("soc", Cmp::Le, ValueSpec::Param("soc_low_reserve".into())),
                vec![],
                Sscc::Survival,
            ),
            transition(
                "SUPPORT",
                "LOW_RESERVE",
                sig("soc", Cmp::Le, ValueSpec::Param("soc_low_reserve".into())),
                vec![],
                Sscc::Survival,
            ),
            transition(
                "LOW_RESERVE",
                "NOMINAL",
                sig("soc", Cmp::Ge, ValueSpec::Param("soc_ok".into())),
                vec![],
                Sscc::Success,
            ),
            transition(
                "NOMINAL",
                "SUPPORT",
                Guard::OnMessage { event: "joint:demand_support".into() },
                vec![],
                Sscc::Collective,
            ),
            transition(
                "SUPPORT",
                "NOMINAL",
                Guard::OnMessage { event: "joint:demand_release".into() },
                vec![],
                Sscc::ContextualizingSituations,
            ),
        ],
        initial: "NOMINAL".into(),
        safe_state: Some("LOW_RESERVE".into()),
        modes: vec!["NORMAL".into(), "SAFE".into()],
    };
    m.validate()?;
    Ok(m)
}

fn distribution_params() -> BTreeMap<String, Param> {
    [
        ("soc_shed".to_string(), Param::new(0.10, "frac")),
        ("soc_restore".to_string(), Param::new(0.20, "frac")),
        ("serve_full".to_string(), Param::new(1.0, "frac")),
        ("serve_eco".to_string(), Param::new(0.9, "frac")),
        ("serve_shed".to_string(), Param::new(0.2, "frac")),
    ]
    .into()
}

/// Distribution-assembly supervisor: its standing reference is the served
/// load fraction. Eclipse forecasts trim noncritical load, and a deep
/// discharge sheds down to essentials.
pub fn make_distribution_machine() -> Result<StateMachine> {
    let m = StateMachine {
        name: "distribution_v1".into(),
        states: vec![
            state(
                "NORMAL",
                ValueSpec::Param("serve_full".into()),
                ModeSpec::Regulate,
                vec![],
            ),
            state(
                "ECO",
                ValueSpec::Param("serve_eco".into()),
                ModeSpec::Regulate,
                entry_status(topics::STATUS, "dist_eco"),
            ),
            state(
                "SHED",
                ValueSpec::Param("serve_shed".into()),
                ModeSpec::Regulate,
                entry_status(topics::STATUS, "dist_shed"),
            ),
        ],
        transitions: vec![
            transition(
                "NORMAL",
                "SHED",
                sig("soc", Cmp::Le, ValueSpec::Param("soc_shed".into())),
                vec![],
                Sscc::Survival,
            ),
            transition(
                "ECO",
                "SHED",
                sig("soc", Cmp::Le, ValueSpec::Param("soc_shed".into())),
                vec![],
                Sscc::Survival,
            ),
            transition(
                "SHED",
                "NORMAL",
                sig("soc", Cmp::Ge, ValueSpec::Param("soc_restore".into())),
                vec![],
                Sscc::Success,
            ),
            transition(
                "NORMAL",
                "ECO",
                Guard::OnMessage { event: "eclipse_start".into() },
                vec![],
                Sscc::ContextualizingSituations,
            ),
            transition(
                "ECO",
                "NORMAL",
                sig("illumination", Cmp::Ge, ValueSpec::Value(0.999)),
                vec![],
                Sscc::Success,
            ),
        ],
        initial: "NORMAL".into(),
        safe_state: Some("SHED".into()),
        modes: vec!["NORMAL".into(), "SAFE".into()],
    };
    m.validate()?;
    Ok(m)
}

/// Built-in machine registry: returns the machine and its default parameter
/// table.
pub fn builtin_machine(name: &str) -> Result<Option<(StateMachine, BTreeMap<String, Param>)>> {
    Ok(Some(match name {
        "breaker_v1" => {
            let p = BreakerParams::default();
            (make_breaker_machine(&p)?, p.table())
        }
        "drive_v1" => {
            let p = DriveParams::default();
            (make_drive_machine(&p)?, p.table())
        }
        "generation_v1" => (make_generation_machine()?, generation_params()),
        "power_v1" => (make_power_machine()?, power_params()),
        "storage_v1" => (make_storage_machine()?, storage_params()),
        "distribution_v1" => (make_distribution_machine()?, distribution_params()),
        _ => return Ok(None),
    }))
}

/// Value checks applied after model-file overrides land on a built-in
/// machine's parameter table.
pub fn validate_machine_params(machine: &str, table: &BTreeMap<String, Param>) -> Result<()> {
    let get = |k: &str| table.get(k).map(|p| p.value);
    let band = |lo: Option<f64>, hi: Option<f64>, what: &str| -> Result<()> {
        if let (Some(lo), Some(hi)) = (lo, hi) {
            if lo >= hi {
                return Err(Error::Config(format!("{machine}: {what} band is inverted")));
            }
        }
        Ok(())
    };
    match machine {
        "breaker_v1" => {
            if let Some(t) = get("trip_current") {
                if !(t > 0.0) {
                    return Err(Error::Config("breaker trip current must be > 0".into()));
                }
            }
            band(get("soc_low"), get("soc_full"), "charge hysteresis")
        }
        "power_v1" => band(get("soc_saving"), get("soc_recover"), "energy-saving"),
        "storage_v1" => band(get("soc_low_reserve"), get("soc_ok"), "reserve"),
        "distribution_v1" => band(get("soc_shed"), get("soc_restore"), "shed"),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// The electrical world
// ---------------------------------------------------------------------------

/// Circuit wiring, battery integration, and burnout tracking for the power
/// demo. Circuit quantities are computed from the previous tick's plant
/// outputs, keeping the tick's phase order acyclic.
#[derive(Debug, Clone)]
pub struct PowerWorld {
    drive_node: NodePath,
    breaker_node: NodePath,
    distribution_node: NodePath,
    base_load_a: f64,
    load_windows: Vec<LoadWindow>,
    safe_rating_a: f64,
    burnout_ticks: u64,
    burnout_factor: f64,

    pub battery: BatteryState,
    pub drive: DriveState,
    panel_peak_eff: f64,
    overdrive_now: f64,
    i_circuit: f64,
    i_load_request: f64,
    i_load_served: f64,
    serve_fraction: f64,
    pulses: Vec<(u64, f64)>,
    burnout_run: u64,
    pub soc_min: f64,
    pub soc_max: f64,
    clamp_residual_total: f64,
}

impl PowerWorld {
    pub fn new(cfg: &PowerCfg) -> Self {
        PowerWorld {
            drive_node: NodePath::new(&cfg.drive_node),
            breaker_node: NodePath::new(&cfg.breaker_node),
            distribution_node: NodePath::new(&cfg.distribution_node),
            base_load_a: cfg.base_load_a,
            load_windows: cfg.load_windows.clone(),
            safe_rating_a: cfg.safe_rating_a,
            burnout_ticks: cfg.burnout_ticks,
            burnout_factor: cfg.burnout_factor,
            battery: BatteryState {
                soc: cfg.soc_initial,
                capacity_as: cfg.battery_capacity_as,
                i_charge: 0.0,
                i_load: 0.0,
            },
            drive: DriveState {
                theta: 0.0,
                theta_sun: 0.0,
                mode: "TRACK".into(),
                i_panel: 0.0,
                i_peak: cfg.panel_peak_a,
            },
            panel_peak_eff: cfg.panel_peak_a,
            overdrive_now: 1.0,
            i_circuit: 0.0,
            i_load_request: cfg.base_load_a,
            i_load_served: 0.0,
            serve_fraction: 1.0,
            pulses: Vec::new(),
            burnout_run: 0,
            soc_min: cfg.soc_initial,
            soc_max: cfg.soc_initial,
            clamp_residual_total: 0.0,
        }
    }

    fn load_request(&self, tick: u64) -> f64 {
        let mut load = self.base_load_a;
        for w in &self.load_windows {
            if (w.start_tick..=w.end_tick).contains(&tick) {
                load = load.max(w.load_a);
            }
        }
        load
    }

    pub fn i_circuit(&self) -> f64 {
        self.i_circuit
    }

    pub fn panel_peak_eff(&self) -> f64 {
        self.panel_peak_eff
    }
}

impl World for PowerWorld {
    fn begin_tick(&mut self, ctx: &WorldTick) -> Vec<WorldEvent> {
        let mut events = Vec::new();

        self.overdrive_now = ctx
            .params
            .get(&self.drive_node)
            .and_then(|t| t.get("overdrive").copied())
            .unwrap_or(1.0);

        self.serve_fraction = ctx
            .plants
            .get(&self.distribution_node)
            .map(|s| s.y.clamp(0.0, 1.0))
            .unwrap_or(1.0);
        self.i_load_request = self.load_request(ctx.tick);
        self.i_load_served = self.serve_fraction * self.i_load_request;

        let drive_snap = ctx.plants.get(&self.drive_node);
        let i_panel = drive_snap.map(|s| s.y).unwrap_or(0.0);
        let theta = drive_snap.and_then(|s| s.theta).unwrap_or(0.0);

        let conducting = ctx
            .plants
            .get(&self.breaker_node)
            .map(|s| s.y >= 0.5)
            .unwrap_or(false);
        self.pulses.retain(|(until, _)| *until > ctx.tick);
        let pulse: f64 = self.pulses.iter().map(|(_, a)| a).sum();
        self.i_circuit = if conducting { i_panel + pulse } else { 0.0 };

        let (battery, residual) =
            battery_step(&self.battery, self.i_circuit, self.i_load_served, ctx.dt);
        self.battery = battery;
        if residual != 0.0 {
            self.clamp_residual_total += residual;
            events.push(WorldEvent {
                node: NodePath::new(paths::STORAGE),
                name: "soc_clamp".into(),
                fields: vec![("residual", residual), ("soc", self.battery.soc)],
            });
        }
        self.soc_min = self.soc_min.min(self.battery.soc);
        self.soc_max = self.soc_max.max(self.battery.soc);

        if self.i_circuit > self.safe_rating_a {
            self.burnout_run += 1;
            if self.burnout_run >= self.burnout_ticks {
                self.panel_peak_eff *= self.burnout_factor;
                self.burnout_run = 0;
                events.push(WorldEvent {
                    node: self.drive_node.clone(),
                    name: "panel_burnout".into(),
                    fields: vec![("i_peak_eff", self.panel_peak_eff)],
                });
            }
        } else {
            self.burnout_run = 0;
        }

        self.drive = DriveState {
            theta,
            theta_sun: ctx.sun_azimuth,
            mode: ctx
                .autonomy_states
                .get(&self.drive_node)
                .cloned()
                .unwrap_or_else(|| "TRACK".into()),
            i_panel,
            i_peak: self.panel_peak_eff,
        };

        events
    }

    fn channel(&self, _node: &NodePath, name: &str) -> Option<f64> {
        match name {
            "i_circuit" => Some(self.i_circuit),
            "soc" => Some(self.battery.soc),
            "i_panel" => Some(self.drive.i_panel),
            "i_load" => Some(self.i_load_served),
            "alignment_err" => Some(wrap_pi(self.drive.theta - self.drive.theta_sun).abs()),
            _ => None,
        }
    }

    fn plant_env(
        &self,
        node: &NodePath,
        mut base: crate::control::PlantEnv,
    ) -> crate::control::PlantEnv {
        if node == &self.drive_node {
            base.panel_peak_a = self.panel_peak_eff;
            base.overdrive = self.overdrive_now;
        }
        base
    }

    fn check_fault(&self, kind: &FaultKind) -> Result<()> {
        if let FaultKind::OvercurrentPulse { target, .. } = kind {
            if NodePath::new(target) != self.breaker_node {
                return Err(Error::model(
                    target.clone(),
                    "overcurrent pulse targets the breaker circuit",
                ));
            }
        }
        Ok(())
    }

    fn apply_fault(&mut self, tick: u64, kind: &FaultKind) -> Result<Vec<WorldEvent>> {
        let mut events = Vec::new();
        match kind {
            FaultKind::OvercurrentPulse { amps, duration, target } => {
                if NodePath::new(target) != self.breaker_node {
                    return Err(Error::model(
                        target.clone(),
                        "overcurrent pulse targets the breaker circuit",
                    ));
                }
                self.pulses.push((tick + duration, *amps));
            }
            FaultKind::SolarFlare { factor, .. } | FaultKind::PanelDegradation { factor, .. } => {
                self.panel_peak_eff *= factor;
                events.push(WorldEvent {
                    node: self.drive_node.clone(),
                    name: "panel_degraded".into(),
                    fields: vec![("i_peak_eff", self.panel_peak_eff)],
                });
            }
            FaultKind::SensorBias { .. } | FaultKind::SensorDropout { .. } => {
                // Sensor faults are engine-side.
            }
        }
        Ok(events)
    }

    fn env_fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("i_panel", self.drive.i_panel),
            ("i_circuit", self.i_circuit),
            ("soc", self.battery.soc),
            ("i_load", self.i_load_served),
            ("i_load_request", self.i_load_request),
            ("serve_fraction", self.serve_fraction),
            ("theta", self.drive.theta),
            ("i_peak_eff", self.panel_peak_eff),
            ("overdrive", self.overdrive_now),
        ]
    }

    fn summary(&self) -> Vec<(String, f64)> {
        vec![
            ("soc_min".into(), self.soc_min),
            ("soc_max".into(), self.soc_max),
            ("soc_end".into(), self.battery.soc),
            ("clamp_residual_total".into(), self.clamp_residual_total),
            ("i_peak_eff_end".into(), self.panel_peak_eff),
        ]
    }
}

// ---------------------------------------------------------------------------
// Shipped assets
// ---------------------------------------------------------------------------

pub const SHIPPED_SCENARIOS: [&str; 5] = [
    "nominal_orbit",
    "overcurrent",
    "override_window",
    "degradation",
    "sacrifice",
];

pub fn builtin_model(name: &str) -> Option<&'static str> {
    match name {
        "power_demo" => Some(include_str!("../assets/models/power_demo.toml")),
        _ => None,
    }
}

pub fn builtin_scenario(name: &str) -> Option<&'static str> {
    match name {
        "nominal_orbit" => Some(include_str!("../assets/scenarios/nominal_orbit.toml")),
        "overcurrent" => Some(include_str!("../assets/scenarios/overcurrent.toml")),
        "override_window" => Some(include_str!("../assets/scenarios/override_window.toml")),
        "degradation" => Some(include_str!("../assets/scenarios/degradation.toml")),
        "sacrifice" => Some(include_str!("../assets/scenarios/sacrifice.toml")),
        _ => None,
    }
}

/// The sacrifice scenario, with or without the authorization command that
/// lets generation raise the breaker threshold past the safe rating.
pub fn sacrifice_variant(authorized: bool) -> Result<Scenario> {
    let (mut s, _) = Scenario::load("sacrifice")?;
    if !authorized {
        s.commands.retain(|c| {
            !matches!(&c.set_param, Some(sp) if sp.name == "sacrifice_authorized")
        });
        s.name = "sacrifice_unauthorized".into();
    }
    Ok(s)
}
