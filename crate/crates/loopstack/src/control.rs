//! The inner control loop: signal algebra, pluggable blocks, trace metrics.
//!
//! Within one tick the forward path evaluates in a fixed order: reference
//! error, controller, plant, sensor, filter. Feedback paths carry a one-tick
//! delay — the error is always formed against the previous tick's filter
//! output — which breaks the algebraic loop and makes evaluation order
//! deterministic. Step functions are pure: same state and inputs give a
//! bit-identical next state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mission;

/// One tick's worth of loop signals plus the internal block states.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLoopState {
    /// Reference input, in plant-output units.
    pub r: f64,
    /// Reference error: `r` minus the previous tick's filter output.
    pub e_r: f64,
    /// Plant command, in actuator units.
    pub u: f64,
    /// True plant output.
    pub y: f64,
    /// Plant disturbance, in actuator units.
    pub d_p: f64,
    /// Raw sensor sample: `y` plus injected noise.
    pub s_p: f64,
    /// Filtered feedback.
    pub f_p: f64,
    pub blocks: BlockStates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockStates {
    pub controller: ControllerState,
    pub plant: PlantState,
    pub filter: FilterState,
}

/// Loop definition: the block configuration a loop runs with. Immutable over
/// a run; all evolving quantities live in [`ControlLoopState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLoopDef {
    pub controller: ControllerDef,
    pub plant: PlantDef,
    pub filter: FilterDef,
    /// Seconds per tick.
    pub dt: f64,
}

impl ControlLoopDef {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        self.controller.validate()?;
        self.plant.validate()?;
        self.filter.validate()
    }

    /// Fresh all-zero state for this definition.
    pub fn initial_state(&self) -> ControlLoopState {
        ControlLoopState {
            r: 0.0,
            e_r: 0.0,
            u: 0.0,
            y: 0.0,
            d_p: 0.0,
            s_p: 0.0,
            f_p: 0.0,
            blocks: BlockStates {
                controller: self.controller.initial_state(),
                plant: self.plant.initial_state(),
                filter: self.filter.initial_state(),
            },
        }
    }
}

/// How the supervisor wants the loop run this tick. The reference stays a
/// plain number so the error law `e_r = r - f_p_prev` holds on every row;
/// mode selection travels on the side and is interpreted by the controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopCommand {
    pub r: f64,
    pub mode: LoopMode,
}

impl LoopCommand {
    pub fn regulate(r: f64) -> Self {
        LoopCommand {
            r,
            mode: LoopMode::Regulate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LoopMode {
    /// Follow the numeric reference through the configured controller.
    #[default]
    Regulate,
    /// Hill-climb on the measured feedback; the reference is the expected
    /// optimum, so the error reads as shortfall from it.
    Track,
    /// Slew the commanded angle to a fixed target and hold it, ignoring
    /// feedback. Used for cage and stow postures.
    Hold { target: f64 },
}

/// Environment values a plant may read while stepping. Pure plants ignore
/// this; the drive plant reads illumination, sun azimuth, and its effective
/// peak-current capability from it.
#[derive(Debug, Clone, Copy)]
pub struct PlantEnv {
    pub illumination: f64,
    pub sun_azimuth: f64,
    /// Effective (possibly degraded) panel peak current, amperes.
    pub panel_peak_a: f64,
    /// Commanded overdrive factor on the panel section.
    pub overdrive: f64,
}

impl Default for PlantEnv {
    fn default() -> Self {
        PlantEnv {
            illumination: 1.0,
            sun_azimuth: 0.0,
            panel_peak_a: 0.0,
            overdrive: 1.0,
        }
    }
}

/// Whether the plant sensor produced a sample this tick. On dropout the raw
/// sample and the filter hold their previous values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorHealth {
    Ok,
    Dropout,
}

// ---------------------------------------------------------------------------
// Controllers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerDef {
    /// Proportional-integral with anti-windup clamping on the integral term.
    Pi {
        kp: f64,
        ki: f64,
        #[serde(default = "default_integral_min")]
        integral_min: f64,
        #[serde(default = "default_integral_max")]
        integral_max: f64,
    },
    /// Hill-climbing tracker: steps its commanded angle by +/- `step` each
    /// tick and reverses direction whenever the measured feedback declines.
    /// In `Hold` mode it slews open-loop to the target at `slew` per tick.
    PerturbObserve { step: f64, slew: f64 },
}

fn default_integral_min() -> f64 {
    -1.0e6
}
fn default_integral_max() -> f64 {
    1.0e6
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerState {
    Pi {
        integral: f64,
    },
    PerturbObserve {
        direction: f64,
        prev_feedback: f64,
        /// Commanded angle, integrated from this controller's own outputs.
        cmd_theta: f64,
    },
}

impl ControllerDef {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ControllerDef::Pi {
                kp,
                ki,
                integral_min,
                integral_max,
            } => {
                if kp < 0.0 || ki < 0.0 {
                    return Err(Error::Config(format!(
                        "pi gains must be >= 0, got kp={kp} ki={ki}"
                    )));
                }
                if integral_min >= integral_max {
                    return Err(Error::Config(
                        "pi integral clamp bounds must satisfy min < max".into(),
                    ));
                }
                Ok(())
            }
            ControllerDef::PerturbObserve { step, slew } => {
                if !(step > 0.0) || !(slew > 0.0) {
                    return Err(Error::Config(format!(
                        "perturb_observe step and slew must be > 0, got step={step} slew={slew}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn initial_state(&self) -> ControllerState {
        match self {
            ControllerDef::Pi { .. } => ControllerState::Pi { integral: 0.0 },
            ControllerDef::PerturbObserve { .. } => ControllerState::PerturbObserve {
                direction: 1.0,
                prev_feedback: 0.0,
                cmd_theta: 0.0,
            },
        }
    }

    /// One controller step. `feedback` is the previous tick's filter output
    /// (the summing junction sits at the controller boundary, so both the
    /// error and the feedback estimate are available here).
    fn step(
        &self,
        state: &ControllerState,
        e_r: f64,
        feedback: f64,
        mode: LoopMode,
        dt: f64,
    ) -> Result<(f64, ControllerState)> {
        match (self, state) {
            (
                ControllerDef::Pi {
                    kp,
                    ki,
                    integral_min,
                    integral_max,
                },
                ControllerState::Pi { integral },
            ) => {
                let (u, integral) =
                    proportional_integral_controller(e_r, *integral, *kp, *ki, dt, *integral_min, *integral_max);
                Ok((u, ControllerState::Pi { integral }))
            }
            (
                ControllerDef::PerturbObserve { step, slew },
                ControllerState::PerturbObserve {
                    direction,
                    prev_feedback,
                    cmd_theta,
                },
            ) => match mode {
                LoopMode::Hold { target } => {
                    let u = (target - cmd_theta).clamp(-*slew, *slew);
                    Ok((
                        u,
                        ControllerState::PerturbObserve {
                            direction: *direction,
                            prev_feedback: feedback,
                            cmd_theta: cmd_theta + u,
                        },
                    ))
                }
                LoopMode::Track | LoopMode::Regulate => {
                    let (u, st) = mission::perturb_observe_step(
                        mission::PerturbObserveState {
                            direction: *direction,
                            prev_measurement: *prev_feedback,
                            cmd_theta: *cmd_theta,
                        },
                        feedback,
                        *step,
                    );
                    Ok((
                        u,
                        ControllerState::PerturbObserve {
                            direction: st.direction,
                            prev_feedback: st.prev_measurement,
                            cmd_theta: st.cmd_theta,
                        },
                    ))
                }
            },
            _ => Err(Error::Config(
                "controller state does not match controller definition".into(),
            )),
        }
    }
}

/// u = kp*e_r + ki*integral, with the integral accumulated first and clamped
/// to the given bounds (anti-windup). Returns the command and the new
/// integral.
pub fn proportional_integral_controller(
    e_r: f64,
    integral: f64,
    kp: f64,
    ki: f64,
    dt: f64,
    integral_min: f64,
    integral_max: f64,
) -> (f64, f64) {
    let integral = (integral + e_r * dt).clamp(integral_min, integral_max);
    (kp * e_r + ki * integral, integral)
}

// ---------------------------------------------------------------------------
// Plants
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantDef {
    /// y_k = pole*y_{k-1} + gain*(u + d_p), with 0 <= pole < 1.
    FirstOrder { pole: f64, gain: f64 },
    /// Integrating holder: y_k = y_{k-1} + gain*(u + d_p). Degenerate inner
    /// loop for supervisors that have nothing dynamical to regulate.
    Holder { gain: f64 },
    /// First-order lag saturated to [0, 1]: a commandable switch position.
    Switch { pole: f64, gain: f64 },
    /// Drive motor plus panel: u is a commanded angle increment (radians),
    /// d_p a pointing drift, and the output is the generated current for the
    /// resulting pointing under the given environment.
    SolarDrive { initial_theta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlantState {
    FirstOrder { y: f64 },
    Holder { y: f64 },
    Switch { y: f64 },
    SolarDrive { theta: f64 },
}

impl PlantState {
    /// Auxiliary internal quantities worth exporting to the environment
    /// model (the drive exposes its pointing angle).
    pub fn aux_theta(&self) -> Option<f64> {
        match self {
            PlantState::SolarDrive { theta } => Some(*theta),
            _ => None,
        }
    }
}

impl PlantDef {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PlantDef::FirstOrder { pole, .. } | PlantDef::Switch { pole, .. } => {
                if !(0.0..1.0).contains(&pole) {
                    return Err(Error::Config(format!(
                        "plant pole must satisfy 0 <= pole < 1, got {pole}"
                    )));
                }
                Ok(())
            }
            PlantDef::Holder { .. } | PlantDef::SolarDrive { .. } => Ok(()),
        }
    }

    pub fn initial_state(&self) -> PlantState {
        match *self {
            PlantDef::FirstOrder { .. } => PlantState::FirstOrder { y: 0.0 },
            PlantDef::Holder { .. } => PlantState::Holder { y: 0.0 },
            PlantDef::Switch { .. } => PlantState::Switch { y: 0.0 },
            PlantDef::SolarDrive { initial_theta } => PlantState::SolarDrive {
                theta: initial_theta,
            },
        }
    }

    fn step(&self, state: &PlantState, u: f64, d_p: f64, env: &PlantEnv) -> Result<(f64, PlantState)> {
        match (self, state) {
            (PlantDef::FirstOrder { pole, gain }, PlantState::FirstOrder { y }) => {
                let (y, st) = first_order_plant(u, d_p, *y, *pole, *gain);
                Ok((y, PlantState::FirstOrder { y: st }))
            }
            (PlantDef::Holder { gain }, PlantState::Holder { y }) => {
                let y = y + gain * (u + d_p);
                Ok((y, PlantState::Holder { y }))
            }
            (PlantDef::Switch { pole, gain }, PlantState::Switch { y }) => {
                let (y, _) = first_order_plant(u, d_p, *y, *pole, *gain);
                let y = y.clamp(0.0, 1.0);
                Ok((y, PlantState::Switch { y }))
            }
            (PlantDef::SolarDrive { .. }, PlantState::SolarDrive { theta }) => {
                let theta = theta + u + d_p;
                let current = env.overdrive
                    * mission::solar_current(theta, env.sun_azimuth, env.illumination, env.panel_peak_a);
                Ok((current, PlantState::SolarDrive { theta }))
            }
            _ => Err(Error::Config(
                "plant state does not match plant definition".into(),
            )),
        }
    }
}

/// y_k = pole*y_prev + gain*(u + d_p). Returns (output, new stored output).
pub fn first_order_plant(u: f64, d_p: f64, y_prev: f64, pole: f64, gain: f64) -> (f64, f64) {
    let y = pole * y_prev + gain * (u + d_p);
    (y, y)
}

// ---------------------------------------------------------------------------
// Filter
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDef {
    /// Exponential smoothing weight, 0 < alpha <= 1. alpha = 1 is a
    /// pass-through.
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub f: f64,
}

impl FilterDef {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "filter alpha must satisfy 0 < alpha <= 1, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> FilterState {
        FilterState { f: 0.0 }
    }
}

/// f_p = alpha*s_p + (1 - alpha)*f_p_prev.
pub fn lowpass_filter(s_p: f64, f_prev: f64, alpha: f64) -> f64 {
    alpha * s_p + (1.0 - alpha) * f_prev
}

// ---------------------------------------------------------------------------
// The loop step
// ---------------------------------------------------------------------------

fn ensure_finite(x: f64, block: &'static str, signal: &'static str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { block, signal })
    }
}

/// Advance the loop one tick. Applies, in order: e_r = r - previous f_p;
/// u = controller(e_r); y = plant(u, d_p); s_p = y + noise; f_p = filter(s_p).
/// Pure function of the definition, prior state, and inputs.
pub fn step_control_loop(
    def: &ControlLoopDef,
    state: &ControlLoopState,
    cmd: LoopCommand,
    d_p: f64,
    noise: f64,
    env: &PlantEnv,
    sensor: SensorHealth,
) -> Result<ControlLoopState> {
    ensure_finite(cmd.r, "input", "r")?;
    ensure_finite(d_p, "input", "d_p")?;
    ensure_finite(noise, "input", "noise")?;

    let e_r = ensure_finite(cmd.r - state.f_p, "summing junction", "e_r")?;

    let (u, controller) = def
        .controller
        .step(&state.blocks.controller, e_r, state.f_p, cmd.mode, def.dt)?;
    let u = ensure_finite(u, "controller", "u")?;

    let (y, plant) = def.plant.step(&state.blocks.plant, u, d_p, env)?;
    let y = ensure_finite(y, "plant", "y")?;

    let (s_p, f_p, filter) = match sensor {
        SensorHealth::Ok => {
            let s_p = ensure_finite(y + noise, "sensor", "s_p")?;
            let f = lowpass_filter(s_p, state.blocks.filter.f, def.filter.alpha);
            let f = ensure_finite(f, "filter", "f_p")?;
            (s_p, f, FilterState { f })
        }
        // Sensor dropout: hold the last sample and freeze the filter.
        SensorHealth::Dropout => (state.s_p, state.f_p, state.blocks.filter),
    };

    Ok(ControlLoopState {
        r: cmd.r,
        e_r,
        u,
        y,
        d_p,
        s_p,
        f_p,
        blocks: BlockStates {
            controller,
            plant,
            filter,
        },
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Trace-derived loop quality numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopMetrics {
    pub max_abs_error: f64,
    pub settled_bound: f64,
    /// First tick after which |e_r| stays within the bound, if any.
    pub settle_tick: Option<usize>,
    /// Steady |e_r| over the disturbance window divided by the disturbance
    /// amplitude, when a window was configured.
    pub disturbance_rejection_ratio: Option<f64>,
}

/// A window of ticks over which a known disturbance of the given amplitude
/// was applied; the rejection ratio is read at the window's final tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceWindow {
    pub start: usize,
    pub end: usize,
    pub amplitude: f64,
}

pub fn loop_metrics(
    errors: &[f64],
    settled_bound: f64,
    window: Option<DisturbanceWindow>,
) -> Result<LoopMetrics> {
    if errors.is_empty() {
        return Err(Error::Usage("loop_metrics needs a non-empty trace".into()));
    }
    if settled_bound < 0.0 {
        return Err(Error::Usage("settled_bound must be >= 0".into()));
    }

    let max_abs_error = errors.iter().fold(0.0_f64, |m, e| m.max(e.abs()));

    let last_outside = errors.iter().rposition(|e| e.abs() > settled_bound);
    let settle_tick = match last_outside {
        None => Some(0),
        Some(i) if i + 1 < errors.len() => Some(i + 1),
        Some(_) => None,
    };

    let disturbance_rejection_ratio = match window {
        None => None,
        Some(w) => {
            if w.end >= errors.len() || w.start > w.end {
                return Err(Error::Usage(format!(
                    "disturbance window [{}, {}] outside trace of length {}",
                    w.start,
                    w.end,
                    errors.len()
                )));
            }
            if w.amplitude == 0.0 {
                return Err(Error::Usage("disturbance amplitude must be non-zero".into()));
            }
            Some(errors[w.end].abs() / w.amplitude.abs())
        }
    };

    Ok(LoopMetrics {
        max_abs_error,
        settled_bound,
        settle_tick,
        disturbance_rejection_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pi(kp: f64, ki: f64) -> ControllerDef {
        ControllerDef::Pi {
            kp,
            ki,
            integral_min: -1.0e6,
            integral_max: 1.0e6,
        }
    }

    fn simple_def(kp: f64, pole: f64, gain: f64, alpha: f64) -> ControlLoopDef {
        ControlLoopDef {
            controller: pi(kp, 0.0),
            plant: PlantDef::FirstOrder { pole, gain },
            filter: FilterDef { alpha },
            dt: 1.0,
        }
    }

    fn run(def: &ControlLoopDef, r: f64, ticks: usize) -> Vec<ControlLoopState> {
        let mut state = def.initial_state();
        let mut out = Vec::with_capacity(ticks);
        for _ in 0..ticks {
            state = step_control_loop(
                def,
                &state,
                LoopCommand::regulate(r),
                0.0,
                0.0,
                &PlantEnv::default(),
                SensorHealth::Ok,
            )
            .unwrap();
            out.push(state.clone());
        }
        out
    }

    /// Independent oracle: iterate the closed-loop difference equation for a
    /// proportional controller on a first-order plant with a pass-through
    /// filter, without going through the block machinery.
    fn difference_equation_oracle(kp: f64, pole: f64, gain: f64, r: f64, d_p: f64, ticks: usize) -> Vec<(f64, f64)> {
        let mut y = 0.0;
        let mut f_prev = 0.0;
        let mut rows = Vec::with_capacity(ticks);
        for _ in 0..ticks {
            let e = r - f_prev;
            let u = kp * e;
            y = pole * y + gain * (u + d_p);
            f_prev = y;
            rows.push((e, y));
        }
        rows
    }

    #[test]
    fn zero_fixed_point() {
        let def = simple_def(0.8, 0.5, 1.0, 1.0);
        let state = def.initial_state();
        let next = step_control_loop(
            &def,
            &state,
            LoopCommand::regulate(0.0),
            0.0,
            0.0,
            &PlantEnv::default(),
            SensorHealth::Ok,
        )
        .unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn error_is_reference_minus_previous_filter_output() {
        let def = simple_def(0.8, 0.5, 1.0, 1.0);
        let mut state = def.initial_state();
        state.f_p = 0.25;
        let next = step_control_loop(
            &def,
            &state,
            LoopCommand::regulate(1.0),
            0.0,
            0.0,
            &PlantEnv::default(),
            SensorHealth::Ok,
        )
        .unwrap();
        assert_eq!(next.e_r, 0.75);
    }

    #[test]
    fn step_response_matches_difference_equation_oracle() {
        // Oracle steady value for kp=0.8, pole=0.5, gain=1, r=1:
        // y* = 0.8/1.3 = 0.6153846153846154, frozen below.
        let oracle = difference_equation_oracle(0.8, 0.5, 1.0, 1.0, 0.0, 200);
        let y_steady = oracle.last().unwrap().1;
        assert!((y_steady - 0.6153846153846154).abs() < 1e-12);

        let states = run(&simple_def(0.8, 0.5, 1.0, 1.0), 1.0, 50);
        let y50 = states.last().unwrap().y;
        assert!(
            (y50 - y_steady).abs() < 0.05,
            "y after 50 ticks {y50} not within 0.05 of steady {y_steady}"
        );
        // And tick by tick the kernel reproduces the oracle exactly.
        for (st, (e, y)) in states.iter().zip(&oracle) {
            assert_eq!(st.e_r, *e);
            assert_eq!(st.y, *y);
        }
    }

    #[test]
    fn pi_zero_error_zero_output() {
        let (u, i) = proportional_integral_controller(0.0, 0.0, 2.0, 1.0, 0.1, -10.0, 10.0);
        assert_eq!(u, 0.0);
        assert_eq!(i, 0.0);
    }

    #[test]
    fn pi_pure_proportional() {
        let (u, _) = proportional_integral_controller(0.5, 0.0, 2.0, 0.0, 0.1, -10.0, 10.0);
        assert_eq!(u, 1.0);
    }

    #[test]
    fn pi_integral_accumulates() {
        // kp=1, ki=1, dt=0.1, e_r=1 held for 10 ticks -> u = 1 + 10*0.1 = 2.0
        let mut integral = 0.0;
        let mut u = 0.0;
        for _ in 0..10 {
            (u, integral) = proportional_integral_controller(1.0, integral, 1.0, 1.0, 0.1, -10.0, 10.0);
        }
        assert!((u - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pi_anti_windup_clamps() {
        let (_, i) = proportional_integral_controller(1.0, 0.95, 1.0, 1.0, 1.0, -1.0, 1.0);
        assert_eq!(i, 1.0);
    }

    #[test]
    fn first_order_trivials() {
        assert_eq!(first_order_plant(0.0, 0.0, 0.0, 0.5, 1.0).0, 0.0);
        assert_eq!(first_order_plant(3.0, 1.0, 7.0, 0.0, 1.0).0, 4.0);
    }

    #[test]
    fn first_order_geometric_convergence() {
        // a=0.9, b=0.1, u=1 held: y_n = 1 - 0.9^n; within 1% needs
        // 0.9^n <= 0.01, first at n = 44 (0.9^44 = 9.69e-3); the stated
        // tick-45 bound therefore holds.
        let mut y = 0.0;
        let mut hit = None;
        for n in 1..=60 {
            (y, _) = first_order_plant(1.0, 0.0, y, 0.9, 0.1);
            if hit.is_none() && (1.0 - y).abs() <= 0.01 {
                hit = Some(n);
            }
        }
        assert_eq!(hit, Some(44));
        let y45: f64 = 1.0 - 0.9f64.powi(45);
        assert!((1.0 - y45).abs() <= 0.01);
    }

    #[test]
    fn lowpass_trivials() {
        assert_eq!(lowpass_filter(2.0, 5.0, 1.0), 2.0);
        assert_eq!(lowpass_filter(2.0, 0.0, 0.5), 1.0);
    }

    #[test]
    fn lowpass_converges_by_tick_21() {
        // f_n = 1 - 0.8^n; 0.8^21 = 9.2e-3 so f_21 >= 0.99, f_20 < 0.99.
        let mut f = 0.0;
        let mut f20 = 0.0;
        for n in 1..=21 {
            f = lowpass_filter(1.0, f, 0.2);
            if n == 20 {
                f20 = f;
            }
        }
        assert!(f20 < 0.99);
        assert!(f >= 0.99);
    }

    #[test]
    fn metrics_constant_zero_trace() {
        let m = loop_metrics(&[0.0; 10], 0.1, None).unwrap();
        assert_eq!(m.max_abs_error, 0.0);
        assert_eq!(m.settle_tick, Some(0));
    }

    #[test]
    fn metrics_halving_error_settles_at_four() {
        // |e_r| = 1, 1/2, 1/4, 1/8, 1/16, ...: 1/2^4 < 0.1 first.
        let errors: Vec<f64> = (0..10).map(|k| 0.5_f64.powi(k)).collect();
        let m = loop_metrics(&errors, 0.1, None).unwrap();
        assert_eq!(m.settle_tick, Some(4));
    }

    #[test]
    fn metrics_never_settles() {
        let m = loop_metrics(&[1.0, 1.0, 1.0], 0.1, None).unwrap();
        assert_eq!(m.settle_tick, None);
    }

    #[test]
    fn metrics_empty_trace_is_usage_error() {
        assert!(matches!(
            loop_metrics(&[], 0.1, None),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn metrics_rejection_ratio_matches_oracle() {
        // Step to r=1 for 100 ticks, then a held step disturbance d_p=0.5
        // for another 100. The oracle gives the steady error with the
        // disturbance applied.
        let def = simple_def(0.8, 0.5, 1.0, 1.0);
        let mut state = def.initial_state();
        let mut errors = Vec::new();
        for tick in 0..200 {
            let d_p = if tick >= 100 { 0.5 } else { 0.0 };
            state = step_control_loop(
                &def,
                &state,
                LoopCommand::regulate(1.0),
                d_p,
                0.0,
                &PlantEnv::default(),
                SensorHealth::Ok,
            )
            .unwrap();
            errors.push(state.e_r);
        }

        // Oracle: steady error of the disturbed loop minus nothing — the
        // same difference equation iterated to steady state with d_p held.
        let oracle = difference_equation_oracle(0.8, 0.5, 1.0, 1.0, 0.5, 400);
        let e_steady = oracle.last().unwrap().0.abs();

        let m = loop_metrics(
            &errors,
            0.05,
            Some(DisturbanceWindow {
                start: 100,
                end: 199,
                amplitude: 0.5,
            }),
        )
        .unwrap();
        let ratio = m.disturbance_rejection_ratio.unwrap();
        assert!(
            (ratio - e_steady / 0.5).abs() < 1e-6,
            "ratio {ratio} vs oracle {}",
            e_steady / 0.5
        );
    }

    #[test]
    fn non_finite_input_identifies_block() {
        let def = simple_def(0.8, 0.5, 1.0, 1.0);
        let state = def.initial_state();
        let err = step_control_loop(
            &def,
            &state,
            LoopCommand::regulate(f64::NAN),
            0.0,
            0.0,
            &PlantEnv::default(),
            SensorHealth::Ok,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { block: "input", .. }));
    }

    #[test]
    fn dropout_holds_sample_and_filter() {
        let def = simple_def(0.8, 0.5, 1.0, 0.5);
        let mut state = def.initial_state();
        for _ in 0..5 {
            state = step_control_loop(
                &def,
                &state,
                LoopCommand::regulate(1.0),
                0.0,
                0.0,
                &PlantEnv::default(),
                SensorHealth::Ok,
            )
            .unwrap();
        }
        let before = state.clone();
        state = step_control_loop(
            &def,
            &state,
            LoopCommand::regulate(1.0),
            0.0,
            0.0,
            &PlantEnv::default(),
            SensorHealth::Dropout,
        )
        .unwrap();
        assert_eq!(state.s_p, before.s_p);
        assert_eq!(state.f_p, before.f_p);
        assert!(state.f_p.is_finite());
    }

    #[test]
    fn invalid_block_constants_rejected() {
        assert!(pi(-1.0, 0.0).validate().is_err());
        assert!(PlantDef::FirstOrder { pole: 1.0, gain: 1.0 }.validate().is_err());
        assert!(FilterDef { alpha: 0.0 }.validate().is_err());
        assert!(FilterDef { alpha: 1.2 }.validate().is_err());
    }

    proptest! {
        /// Purity: identical (state, inputs) give bit-identical outputs.
        #[test]
        fn step_is_pure(r in -10.0f64..10.0, d in -1.0f64..1.0, n in -0.5f64..0.5) {
            let def = simple_def(0.8, 0.5, 1.0, 0.3);
            let mut state = def.initial_state();
            for _ in 0..3 {
                state = step_control_loop(&def, &state, LoopCommand::regulate(r), d, n,
                    &PlantEnv::default(), SensorHealth::Ok).unwrap();
            }
            let a = step_control_loop(&def, &state, LoopCommand::regulate(r), d, n,
                &PlantEnv::default(), SensorHealth::Ok).unwrap();
            let b = step_control_loop(&def, &state, LoopCommand::regulate(r), d, n,
                &PlantEnv::default(), SensorHealth::Ok).unwrap();
            prop_assert_eq!(a, b);
        }

        /// Feedback-delay law: e_r(k) + f_p(k-1) = r(k) exactly, every tick.
        #[test]
        fn feedback_delay_law(rs in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            let def = simple_def(0.8, 0.5, 1.0, 0.4);
            let mut state = def.initial_state();
            for r in rs {
                let prev_f = state.f_p;
                state = step_control_loop(&def, &state, LoopCommand::regulate(r), 0.0, 0.1,
                    &PlantEnv::default(), SensorHealth::Ok).unwrap();
                prop_assert_eq!(state.e_r, r - prev_f);
            }
        }

        /// Stability: shipped first-order plant and default gains keep |e_r|
        /// bounded over 10,000 ticks for any bounded disturbance sequence.
        #[test]
        fn bounded_disturbance_keeps_error_bounded(seed in 0u64..32) {
            use crate::rng::RngStreams;
            let def = ControlLoopDef {
                controller: pi(0.8, 0.2),
                plant: PlantDef::FirstOrder { pole: 0.5, gain: 1.0 },
                filter: FilterDef { alpha: 1.0 },
                dt: 1.0,
            };
            let mut rng = RngStreams::new(seed);
            let mut state = def.initial_state();
            let mut max_e = 0.0f64;
            for _ in 0..10_000 {
                let d = rng.uniform("dist", 1.0);
                state = step_control_loop(&def, &state, LoopCommand::regulate(1.0), d, 0.0,
                    &PlantEnv::default(), SensorHealth::Ok).unwrap();
                max_e = max_e.max(state.e_r.abs());
            }
            prop_assert!(max_e < 5.0, "max |e_r| = {}", max_e);
        }
    }

    #[test]
    fn filter_reduces_noise_variance() {
        // Constant y with injected noise: var(f_p) < var(s_p) at alpha=0.2.
        use crate::rng::RngStreams;
        let def = ControlLoopDef {
            controller: pi(0.0, 0.0),
            plant: PlantDef::Holder { gain: 1.0 },
            filter: FilterDef { alpha: 0.2 },
            dt: 1.0,
        };
        let mut rng = RngStreams::new(9);
        let mut state = def.initial_state();
        let mut s = Vec::new();
        let mut f = Vec::new();
        for _ in 0..4000 {
            let noise = rng.normal("n", 0.3);
            state = step_control_loop(
                &def,
                &state,
                LoopCommand::regulate(0.0),
                0.0,
                noise,
                &PlantEnv::default(),
                SensorHealth::Ok,
            )
            .unwrap();
            s.push(state.s_p);
            f.push(state.f_p);
        }
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
        };
        // Skip the filter's settling transient.
        assert!(var(&f[200..]) < var(&s[200..]));
    }
}
