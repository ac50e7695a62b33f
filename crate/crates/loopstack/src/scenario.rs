//! Scenario file format: model reference, time base, seed, environment
//! parameters, per-channel noise and disturbance amplitudes, the command
//! schedule, and the fault event list. See docs/formats.md for the schema.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::bus::{CommandVerb, NodePath, OverrideDirective};
use crate::error::{Error, Result};
use crate::mission;
use crate::rng::fnv1a64;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Built-in model name or path relative to the scenario file.
    pub model: String,
    /// Seconds per tick.
    pub dt: f64,
    pub ticks: u64,
    pub seed: u64,
    pub environment: EnvironmentCfg,
    #[serde(default)]
    pub power: PowerCfg,
    #[serde(default)]
    pub noise: NoiseCfg,
    /// Per-node uniform disturbance amplitude on d_p.
    #[serde(default)]
    pub disturbance: BTreeMap<String, f64>,
    #[serde(default)]
    pub commands: Vec<CommandSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    /// Hash of the scenario document bytes; recorded in the trace header.
    #[serde(skip)]
    pub source_hash: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentCfg {
    pub orbit_period_s: f64,
    pub eclipse_fraction: f64,
    /// Width of the linear illumination ramps at eclipse edges; 0 gives a
    /// pure square wave.
    #[serde(default)]
    pub ramp_width_s: f64,
    #[serde(default)]
    pub sun_initial_rad: f64,
    /// Sun azimuth drift rate. Defaults to one revolution per orbit.
    #[serde(default)]
    pub sun_rate_rad_per_s: Option<f64>,
    #[serde(default = "default_lead")]
    pub forecast_lead_ticks: u64,
    #[serde(default = "default_eclipse_topic")]
    pub eclipse_topic: String,
    #[serde(default = "default_flare_topic")]
    pub flare_topic: String,
}

fn default_lead() -> u64 {
    10
}
fn default_eclipse_topic() -> String {
    "env/eclipse".into()
}
fn default_flare_topic() -> String {
    "env/flare".into()
}

impl EnvironmentCfg {
    pub fn sun_rate(&self) -> f64 {
        self.sun_rate_rad_per_s
            .unwrap_or(std::f64::consts::TAU / self.orbit_period_s)
    }
}

/// Electrical world parameters for the shipped power mission.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerCfg {
    #[serde(default = "default_capacity")]
    pub battery_capacity_as: f64,
    #[serde(default = "default_soc")]
    pub soc_initial: f64,
    #[serde(default = "default_load")]
    pub base_load_a: f64,
    /// Sustained circuit current above this rating burns the panel section
    /// out after `burnout_ticks` consecutive ticks.
    #[serde(default = "default_safe_rating")]
    pub safe_rating_a: f64,
    #[serde(default = "default_burnout_ticks")]
    pub burnout_ticks: u64,
    #[serde(default = "default_burnout_factor")]
    pub burnout_factor: f64,
    /// Ground-truth panel peak current capability, amperes.
    #[serde(default = "default_panel_peak")]
    pub panel_peak_a: f64,
    #[serde(default = "default_drive_node")]
    pub drive_node: String,
    #[serde(default = "default_breaker_node")]
    pub breaker_node: String,
    #[serde(default = "default_distribution_node")]
    pub distribution_node: String,
    #[serde(default)]
    pub load_windows: Vec<LoadWindow>,
}

fn default_capacity() -> f64 {
    4000.0
}
fn default_soc() -> f64 {
    0.7
}
fn default_load() -> f64 {
    1.0
}
fn default_safe_rating() -> f64 {
    3.5
}
fn default_burnout_ticks() -> u64 {
    10
}
fn default_burnout_factor() -> f64 {
    0.5
}
fn default_panel_peak() -> f64 {
    3.0
}
fn default_drive_node() -> String {
    mission::paths::DRIVE.into()
}
fn default_breaker_node() -> String {
    mission::paths::BREAKER.into()
}
fn default_distribution_node() -> String {
    mission::paths::DISTRIBUTION.into()
}

impl Default for PowerCfg {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LoadWindow {
    pub start_tick: u64,
    pub end_tick: u64,
    pub load_a: f64,
}

/// Per-channel noise standard deviations.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseCfg {
    /// Plant-sensor sigma by node path.
    #[serde(default)]
    pub plant: BTreeMap<String, f64>,
    /// Environment-sensor sigma by "node_path:channel".
    #[serde(default)]
    pub env: BTreeMap<String, f64>,
}

impl NoiseCfg {
    pub fn plant_sigma(&self, node: &NodePath) -> f64 {
        self.plant.get(node.as_str()).copied().unwrap_or(0.0)
    }

    pub fn env_sigma(&self, node: &NodePath, channel: &str) -> f64 {
        self.env
            .get(&format!("{}:{channel}", node.as_str()))
            .copied()
            .unwrap_or(0.0)
    }
}

/// One scheduled goal command.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpec {
    pub tick: u64,
    pub target: String,
    #[serde(default)]
    pub set_mode: Option<String>,
    #[serde(default)]
    pub set_param: Option<SetParamSpec>,
    #[serde(default, rename = "override")]
    pub override_: Option<OverrideSpec>,
    #[serde(default)]
    pub release_override: Option<bool>,
    #[serde(default)]
    pub directive: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetParamSpec {
    pub name: String,
    pub value: f64,
    #[serde(default)]
    pub unit: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideSpec {
    #[serde(default)]
    pub hold: Option<String>,
    pub expiry_tick: u64,
}

impl CommandSpec {
    pub fn verb(&self) -> Result<CommandVerb> {
        let forms = usize::from(self.set_mode.is_some())
            + usize::from(self.set_param.is_some())
            + usize::from(self.override_.is_some())
            + usize::from(self.release_override.is_some())
            + usize::from(self.directive.is_some());
        if forms != 1 {
            return Err(Error::Config(format!(
                "command at tick {} needs exactly one verb",
                self.tick
            )));
        }
        Ok(if let Some(mode) = &self.set_mode {
            CommandVerb::SetMode { mode: mode.clone() }
        } else if let Some(sp) = &self.set_param {
            CommandVerb::SetParam {
                name: sp.name.clone(),
                value: sp.value,
                unit: sp.unit.clone(),
            }
        } else if let Some(o) = &self.override_ {
            CommandVerb::Override {
                directive: match &o.hold {
                    Some(state) => OverrideDirective::HoldState {
                        state: state.clone(),
                    },
                    None => OverrideDirective::HoldCurrent,
                },
                expiry_tick: o.expiry_tick,
            }
        } else if self.release_override.is_some() {
            CommandVerb::ReleaseOverride
        } else {
            CommandVerb::Directive {
                name: self.directive.clone().unwrap(),
            }
        })
    }
}

/// One scheduled fault event.
#[derive(Debug, Clone, Deserialize)]
pub struct FaultSpec {
    pub tick: u64,
    #[serde(flatten)]
    pub kind: FaultKind,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    /// Adds to the named circuit's current while it conducts.
    OvercurrentPulse {
        target: String,
        amps: f64,
        #[serde(default = "default_duration")]
        duration: u64,
    },
    /// Sets the flare flag for `duration` ticks and permanently degrades the
    /// panel peak current by `factor`.
    SolarFlare {
        target: String,
        factor: f64,
        duration: u64,
    },
    /// Permanent additive bias on one sensor channel ("s_p" is the plant
    /// sensor, anything else an environment channel).
    SensorBias {
        target: String,
        channel: String,
        bias: f64,
    },
    /// The sensor produces no samples for `duration` ticks; filters hold
    /// their last estimate.
    SensorDropout {
        target: String,
        channel: String,
        duration: u64,
    },
    /// Permanent step degradation of panel peak current by `factor`.
    PanelDegradation { target: String, factor: f64 },
}

fn default_duration() -> u64 {
    1
}

impl FaultKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            FaultKind::OvercurrentPulse { .. } => "overcurrent_pulse",
            FaultKind::SolarFlare { .. } => "solar_flare",
            FaultKind::SensorBias { .. } => "sensor_bias",
            FaultKind::SensorDropout { .. } => "sensor_dropout",
            FaultKind::PanelDegradation { .. } => "panel_degradation",
        }
    }

    pub fn target(&self) -> &str {
        match self {
            FaultKind::OvercurrentPulse { target, .. }
            | FaultKind::SolarFlare { target, .. }
            | FaultKind::SensorBias { target, .. }
            | FaultKind::SensorDropout { target, .. }
            | FaultKind::PanelDegradation { target, .. } => target,
        }
    }
}

impl Scenario {
    pub fn parse(toml_str: &str) -> Result<Scenario> {
        let mut s: Scenario =
            toml::from_str(toml_str).map_err(|e| Error::Parse(format!("scenario: {e}")))?;
        s.source_hash = fnv1a64(toml_str.as_bytes());
        s.validate()?;
        Ok(s)
    }

    /// Load by built-in name or filesystem path.
    pub fn load(spec: &str) -> Result<(Scenario, Option<std::path::PathBuf>)> {
        if let Some(text) = mission::builtin_scenario(spec) {
            return Ok((Scenario::parse(text)?, None));
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {spec}: {e}")))?;
        let dir = path.parent().map(|p| p.to_path_buf());
        Ok((Scenario::parse(&text)?, dir))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |d: String| Err(Error::Config(format!("scenario {}: {d}", self.name)));
        if !(self.dt > 0.0) {
            return cfg(format!("dt must be > 0, got {}", self.dt));
        }
        if self.ticks < 1 {
            return cfg("ticks must be >= 1".into());
        }
        if !(self.environment.orbit_period_s > 0.0) {
            return cfg("orbit period must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.environment.eclipse_fraction) {
            return cfg(format!(
                "eclipse fraction must be in [0, 1), got {}",
                self.environment.eclipse_fraction
            ));
        }
        if self.environment.forecast_lead_ticks < 1 {
            return cfg("forecast lead must be >= 1 tick".into());
        }
        if self.environment.ramp_width_s < 0.0 {
            return cfg("ramp width must be >= 0".into());
        }
        if !(self.power.battery_capacity_as > 0.0) {
            return cfg("battery capacity must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.power.soc_initial) {
            return cfg("initial SoC must be in [0, 1]".into());
        }
        for w in &self.power.load_windows {
            if w.start_tick > w.end_tick {
                return cfg(format!(
                    "load window [{}, {}] is reversed",
                    w.start_tick, w.end_tick
                ));
            }
        }
        for c in &self.commands {
            c.verb()?;
        }
        for f in &self.faults {
            match &f.kind {
                FaultKind::SolarFlare { factor, duration, .. } => {
                    if !(0.0..=1.0).contains(factor) {
                        return cfg("flare factor must be in [0, 1]".into());
                    }
                    if *duration < 1 {
                        return cfg("flare duration must be >= 1".into());
                    }
                }
                FaultKind::PanelDegradation { factor, .. } => {
                    if !(0.0..=1.0).contains(factor) {
                        return cfg("degradation factor must be in [0, 1]".into());
                    }
                }
                FaultKind::SensorDropout { duration, .. } => {
                    if *duration < 1 {
                        return cfg("dropout duration must be >= 1".into());
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = r#"
name = "mini"
model = "power_demo"
dt = 1.0
ticks = 100
seed = 7

[environment]
orbit_period_s = 600.0
eclipse_fraction = 0.35

[[commands]]
tick = 10
target = "power"
directive = "breaker_reset"

[[faults]]
tick = 5
kind = "overcurrent_pulse"
target = "power/generation/solar_drive/breaker"
amps = 6.0
duration = 3
"#;

    #[test]
    fn parses_and_hashes() {
        let s = Scenario::parse(MINI).unwrap();
        assert_eq!(s.ticks, 100);
        assert_ne!(s.source_hash, 0);
        assert_eq!(s.environment.sun_rate(), std::f64::consts::TAU / 600.0);
        assert_eq!(s.commands.len(), 1);
        assert!(matches!(
            s.faults[0].kind,
            FaultKind::OvercurrentPulse { amps, duration: 3, .. } if amps == 6.0
        ));
    }

    #[test]
    fn rejects_bad_dt_and_fraction() {
        assert!(Scenario::parse(&MINI.replace("dt = 1.0", "dt = 0.0")).is_err());
        assert!(Scenario::parse(&MINI.replace("eclipse_fraction = 0.35", "eclipse_fraction = 1.0")).is_err());
    }

    #[test]
    fn rejects_command_with_two_verbs() {
        let bad = MINI.replace(
            "directive = \"breaker_reset\"",
            "directive = \"x\"\nset_mode = \"SAFE\"",
        );
        assert!(Scenario::parse(&bad).is_err());
    }

    #[test]
    fn distinct_documents_hash_differently() {
        let a = Scenario::parse(MINI).unwrap();
        let b = Scenario::parse(&MINI.replace("seed = 7", "seed = 8")).unwrap();
        assert_ne!(a.source_hash, b.source_hash);
    }
}
