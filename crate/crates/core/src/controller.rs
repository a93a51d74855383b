//! Firmware-style control loop for the painting rig.
//!
//! The rig paints a wall column by column starting at the top-right corner:
//! it descends spraying, climbs back dry, shifts one stroke spacing to the
//! left and repeats. After the last column it either shifts to the next
//! wall or stops. `Controller` carries the immutable mission context; all
//! mutable progress lives in `ControllerState`, which `tick` and
//! `handle_command` take by value and hand back, so a run is a pure fold
//! over (command trace, sensor trace).
//!
//! Positions are tracked in whole microsteps, exactly as an open-loop
//! stepper firmware counts them. Only one axis moves per tick.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::{Band, CoverageError, StrokeSpec};
use crate::kinematics::{self, MotorError, MotorSpec};
use crate::simworld::SensorReading;

/// Servo angle that presses the spray can.
pub const SERVO_SPRAY_DEG: u16 = 90;
/// Servo angle that releases it.
pub const SERVO_STOP_DEG: u16 = 0;
/// Length of one spray burst at a waypoint, ms.
pub const BURST_MS: u32 = 500;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("wall {what} must be positive, got {value} mm")]
    WallDims { what: &'static str, value: f64 },
    #[error("nozzle reach must be positive, got {0} mm")]
    Reach(f64),
    #[error("stroke: {0}")]
    Stroke(#[from] CoverageError),
    #[error("zero stroke spacing cannot advance across a wall wider than the stroke")]
    ZeroSpacing,
    #[error("wall count must be at least 1")]
    WallCount,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("motor: {0}")]
    Motor(#[from] MotorError),
    #[error("tick of {got} ms does not match the configured {expected} ms step")]
    Timestep { expected: u32, got: u32 },
    #[error("timestep must be positive")]
    ZeroTimestep,
    #[error("motor speed allows no steps within one {0} ms tick")]
    NoMotion(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaintMode {
    /// Spray held on for the whole descent.
    #[default]
    Continuous,
    /// Stop at each waypoint, spray for `BURST_MS`, move on dry.
    Burst,
}

impl fmt::Display for PaintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PaintMode::Continuous => "continuous",
            PaintMode::Burst => "burst",
        })
    }
}

impl std::str::FromStr for PaintMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "continuous" => Ok(PaintMode::Continuous),
            "burst" => Ok(PaintMode::Burst),
            other => Err(format!("unknown paint mode `{other}` (expected burst|continuous)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionPlan {
    pub wall_width: f64,
    pub wall_height: f64,
    /// Stroke centers, right to left.
    pub column_centers: Vec<f64>,
    pub y_top: f64,
    pub y_bottom: f64,
    pub stroke: StrokeSpec,
    pub mode: PaintMode,
    pub wall_count: u32,
}

/// Lays out the columns for one wall.
pub fn plan_mission(
    wall_width: f64,
    wall_height: f64,
    stroke: StrokeSpec,
    nozzle_reach: f64,
    mode: PaintMode,
) -> Result<MissionPlan, PlanError> {
    if !(wall_width > 0.0 && wall_width.is_finite()) {
        return Err(PlanError::WallDims { what: "width", value: wall_width });
    }
    if !(wall_height > 0.0 && wall_height.is_finite()) {
        return Err(PlanError::WallDims { what: "height", value: wall_height });
    }
    if !(nozzle_reach > 0.0 && nozzle_reach.is_finite()) {
        return Err(PlanError::Reach(nozzle_reach));
    }
    stroke.validate()?;

    let half = stroke.width / 2.0;
    let column_centers = if wall_width <= stroke.width {
        vec![wall_width / 2.0]
    } else {
        if stroke.spacing <= 0.0 {
            return Err(PlanError::ZeroSpacing);
        }
        // Shave float noise so an exact multiple does not add a column.
        let extra = ((wall_width - stroke.width) / stroke.spacing - 1e-9).ceil() as usize;
        (0..=extra)
            .map(|i| (wall_width - half - stroke.spacing * i as f64).max(half))
            .collect()
    };

    Ok(MissionPlan {
        wall_width,
        wall_height,
        column_centers,
        y_top: wall_height,
        y_bottom: (wall_height - nozzle_reach).max(0.0),
        stroke,
        mode,
        wall_count: 1,
    })
}

impl MissionPlan {
    pub fn with_walls(mut self, wall_count: u32) -> Result<Self, PlanError> {
        if wall_count == 0 {
            return Err(PlanError::WallCount);
        }
        self.wall_count = wall_count;
        Ok(self)
    }

    /// Band below the nozzle's lowest reachable point, if any.
    pub fn unpaintable_band(&self) -> Option<Band> {
        (self.y_bottom > 0.0).then(|| Band { y_from: 0.0, y_to: self.y_bottom })
    }

    /// Vertical pitch between burst waypoints: the same overlap as between
    /// columns.
    pub fn burst_pitch(&self) -> f64 {
        if self.stroke.spacing > 0.0 {
            self.stroke.spacing
        } else {
            self.stroke.width
        }
    }

    /// Burst stops along one column, top to bottom. A burst paints the
    /// pitch-high patch below the nozzle, so the last stop sits one pitch
    /// above the lowest reachable point and the patches tile the column.
    pub fn burst_waypoints(&self) -> Vec<f64> {
        let pitch = self.burst_pitch();
        let span = self.y_top - self.y_bottom;
        let n = ((span / pitch - 1e-9).ceil() as usize).max(1);
        (0..n)
            .map(|i| (self.y_top - pitch * i as f64).max(self.y_bottom + pitch).min(self.y_top))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Idle,
    Ready,
    Descending,
    Ascending,
    ShiftingColumn,
    ShiftingWall,
    ObstacleHold,
    Paused,
    Done,
    Fault,
}

impl Mode {
    pub const ALL: [Mode; 10] = [
        Mode::Idle,
        Mode::Ready,
        Mode::Descending,
        Mode::Ascending,
        Mode::ShiftingColumn,
        Mode::ShiftingWall,
        Mode::ObstacleHold,
        Mode::Paused,
        Mode::Done,
        Mode::Fault,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Idle => "IDLE",
            Mode::Ready => "READY",
            Mode::Descending => "DESCENDING",
            Mode::Ascending => "ASCENDING",
            Mode::ShiftingColumn => "SHIFTING_COLUMN",
            Mode::ShiftingWall => "SHIFTING_WALL",
            Mode::ObstacleHold => "OBSTACLE_HOLD",
            Mode::Paused => "PAUSED",
            Mode::Done => "DONE",
            Mode::Fault => "FAULT",
        }
    }

    /// Modes in which the mission is under way and PAUSE applies.
    pub fn is_active(self) -> bool {
        matches!(
            self,
            Mode::Ready
                | Mode::Descending
                | Mode::Ascending
                | Mode::ShiftingColumn
                | Mode::ShiftingWall
                | Mode::ObstacleHold
        )
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JogDirection {
    Up,
    Down,
    Left,
    Right,
}

impl JogDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            JogDirection::Up => "UP",
            JogDirection::Down => "DOWN",
            JogDirection::Left => "LEFT",
            JogDirection::Right => "RIGHT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Command {
    Hello,
    Start,
    Pause,
    Resume,
    Abort,
    Jog { direction: JogDirection, mm: f64 },
    Spray { on: bool },
    Shift,
    Set { key: String, value: String },
    GetStatus,
}

impl Command {
    pub fn verb(&self) -> &'static str {
        match self {
            Command::Hello => "HELLO",
            Command::Start => "START",
            Command::Pause => "PAUSE",
            Command::Resume => "RESUME",
            Command::Abort => "ABORT",
            Command::Jog { .. } => "JOG",
            Command::Spray { .. } => "SPRAY",
            Command::Shift => "SHIFT",
            Command::Set { .. } => "SET",
            Command::GetStatus => "GET",
        }
    }
}

/// NAK reasons.
pub mod reason {
    pub const STATE: &str = "STATE";
    pub const UNSAFE: &str = "UNSAFE";
    pub const BADARG: &str = "BADARG";
    pub const BADKEY: &str = "BADKEY";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActuatorCommand {
    pub step_x: i64,
    pub step_y: i64,
    pub servo_angle: u16,
    pub shift_motor_on: bool,
}

impl ActuatorCommand {
    pub fn spraying(&self) -> bool {
        self.servo_angle == SERVO_SPRAY_DEG
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guard {
    Pass,
    Hold,
}

/// Hold when something sits closer than the wall by more than `margin_cm`.
pub fn obstacle_guard(ultrasonic_cm: f64, expected_wall_cm: f64, margin_cm: f64) -> Guard {
    if ultrasonic_cm < expected_wall_cm - margin_cm {
        Guard::Hold
    } else {
        Guard::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Event {
    Transition { from: Mode, to: Mode },
    Ack { verb: String },
    Nak { verb: String, reason: String },
    ObstacleHold { ultrasonic: f64 },
    ObstacleClear { ultrasonic: f64 },
    /// Arrival at a planned position; coordinates are the plan's, in mm.
    Waypoint { x: f64, y: f64 },
    StrokeDone { wall: u32, column: usize, duration_ms: u64 },
    Fault { reason: String },
}

/// Runtime-tunable settings (SET).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub margin_cm: f64,
    pub expected_wall_cm: f64,
    pub telemetry_ms: u32,
}

/// Controller configuration fixed for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub motor: MotorSpec,
    pub dt_ms: u32,
    pub wall_shift_ms: u32,
    pub settings: Settings,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            motor: MotorSpec::default(),
            dt_ms: 10,
            wall_shift_ms: 2000,
            settings: Settings {
                margin_cm: 5.0,
                expected_wall_cm: 100.0,
                telemetry_ms: 100,
            },
        }
    }
}

/// Travel envelope in microsteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Travel {
    pub x_max: i64,
    pub y_min: i64,
    pub y_max: i64,
}

const STEP_EPS: f64 = 1e-9;

impl Travel {
    pub fn new(plan: &MissionPlan, per_step: f64) -> Self {
        let x_max = (plan.wall_width / per_step + STEP_EPS).floor() as i64;
        let y_max = (plan.y_top / per_step + STEP_EPS).floor() as i64;
        let y_min = ((plan.y_bottom / per_step - STEP_EPS).ceil() as i64).min(y_max);
        Self { x_max, y_min, y_max }
    }

    pub fn clamp_x(&self, x: i64) -> i64 {
        x.clamp(0, self.x_max)
    }

    pub fn clamp_y(&self, y: i64) -> i64 {
        y.clamp(self.y_min, self.y_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub x: i64,
    pub y: i64,
    pub then: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub mode: Mode,
    pub t_ms: u64,
    pub x_steps: i64,
    pub y_steps: i64,
    pub spray_on: bool,
    /// Operator master switch; SPRAY OFF clears it until SPRAY ON or START.
    pub spray_enabled: bool,
    pub column_index: usize,
    pub wall_index: u32,
    pub waypoint_index: usize,
    pub burst_remaining_ms: u32,
    pub last_ultrasonic: f64,
    pub shift_elapsed_ms: u32,
    pub settings: Settings,
    /// Mode to return to on RESUME.
    pub resume_mode: Option<Mode>,
    pub pause_pose: Option<(i64, i64)>,
    /// Where READY is heading and what it hands over to.
    pub homing: Option<Target>,
    pub jog_target: Option<(i64, i64)>,
    /// What SHIFTING_WALL hands over to.
    pub shift_then: Mode,
    pub stroke_started_ms: u64,
    pub fault: Option<String>,
}

impl ControllerState {
    pub fn x_mm(&self, per_step: f64) -> f64 {
        self.x_steps as f64 * per_step
    }

    pub fn y_mm(&self, per_step: f64) -> f64 {
        self.y_steps as f64 * per_step
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub state: ControllerState,
    pub actuator: ActuatorCommand,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    plan: MissionPlan,
    config: ControllerConfig,
    per_step: f64,
    step_cap: i64,
    travel: Travel,
    column_steps: Vec<i64>,
    waypoint_steps: Vec<i64>,
}

impl Controller {
    pub fn new(plan: MissionPlan, config: ControllerConfig) -> Result<Self, ControllerError> {
        if config.dt_ms == 0 {
            return Err(ControllerError::ZeroTimestep);
        }
        let per_step = kinematics::distance_per_step(&config.motor)?;
        let step_cap = config.motor.max_steps_per_tick(config.dt_ms)? as i64;
        if step_cap == 0 {
            return Err(ControllerError::NoMotion(config.dt_ms));
        }
        let travel = Travel::new(&plan, per_step);
        let to_steps = |mm: f64| kinematics::steps_for_distance_at(mm, per_step).signed_steps();
        let column_steps = plan
            .column_centers
            .iter()
            .map(|&c| travel.clamp_x(to_steps(c)))
            .collect();
        let waypoint_steps = plan
            .burst_waypoints()
            .iter()
            .map(|&y| travel.clamp_y(to_steps(y)))
            .collect();
        Ok(Self {
            plan,
            config,
            per_step,
            step_cap,
            travel,
            column_steps,
            waypoint_steps,
        })
    }

    pub fn plan(&self) -> &MissionPlan {
        &self.plan
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn per_step(&self) -> f64 {
        self.per_step
    }

    pub fn step_cap(&self) -> i64 {
        self.step_cap
    }

    pub fn travel(&self) -> Travel {
        self.travel
    }

    /// Column center in microsteps.
    pub fn column_x(&self, column: usize) -> i64 {
        self.column_steps[column]
    }

    /// Power-on state: idle at the top of the first column.
    pub fn initial_state(&self) -> ControllerState {
        ControllerState {
            mode: Mode::Idle,
            t_ms: 0,
            x_steps: self.column_x(0),
            y_steps: self.travel.y_max,
            spray_on: false,
            spray_enabled: true,
            column_index: 0,
            wall_index: 0,
            waypoint_index: 0,
            burst_remaining_ms: 0,
            last_ultrasonic: self.config.settings.expected_wall_cm,
            shift_elapsed_ms: 0,
            settings: self.config.settings,
            resume_mode: None,
            pause_pose: None,
            homing: None,
            jog_target: None,
            shift_then: Mode::Idle,
            stroke_started_ms: 0,
            fault: None,
        }
    }

    fn top_of_column(&self, column: usize) -> Target {
        Target {
            x: self.column_x(column),
            y: self.travel.y_max,
            then: Mode::Descending,
        }
    }

    pub fn handle_command(&self, mut state: ControllerState, cmd: &Command) -> (ControllerState, Vec<Event>) {
        let mut events = Vec::new();
        let verb = cmd.verb();
        let nak = |events: &mut Vec<Event>, reason: &str| {
            events.push(Event::Nak {
                verb: verb.to_string(),
                reason: reason.to_string(),
            })
        };
        let from = state.mode;

        match cmd {
            Command::Hello | Command::GetStatus => {}
            Command::Start => {
                if state.mode != Mode::Idle {
                    nak(&mut events, reason::STATE);
                    return (state, events);
                }
                state.spray_enabled = true;
                state.jog_target = None;
                state.homing = Some(self.top_of_column(state.column_index));
                state.mode = Mode::Ready;
            }
            Command::Pause => {
                if !state.mode.is_active() {
                    nak(&mut events, reason::STATE);
                    return (state, events);
                }
                state.resume_mode = Some(state.mode);
                state.pause_pose = Some((state.x_steps, state.y_steps));
                state.spray_on = false;
                // An interrupted burst is redone in full.
                state.burst_remaining_ms = 0;
                state.mode = Mode::Paused;
            }
            Command::Resume => {
                let Some(prior) = state.resume_mode.filter(|_| state.mode == Mode::Paused) else {
                    nak(&mut events, reason::STATE);
                    return (state, events);
                };
                state.jog_target = None;
                state.resume_mode = None;
                let pose = state.pause_pose.take();
                match pose {
                    Some((x, y)) if prior != Mode::Ready && (x, y) != (state.x_steps, state.y_steps) => {
                        state.homing = Some(Target { x, y, then: prior });
                        state.mode = Mode::Ready;
                    }
                    _ => state.mode = prior,
                }
            }
            Command::Abort => {
                state = ControllerState {
                    mode: Mode::Idle,
                    x_steps: state.x_steps,
                    y_steps: state.y_steps,
                    t_ms: state.t_ms,
                    wall_index: state.wall_index,
                    last_ultrasonic: state.last_ultrasonic,
                    settings: state.settings,
                    ..self.initial_state()
                };
            }
            Command::Jog { direction, mm } => {
                if !matches!(state.mode, Mode::Idle | Mode::Paused) {
                    nak(&mut events, reason::STATE);
                    return (state, events);
                }
                if !(*mm > 0.0 && mm.is_finite()) {
                    nak(&mut events, reason::BADARG);
                    return (state, events);
                }
                let steps = kinematics::steps_for_distance_at(*mm, self.per_step).signed_steps();
                let (x, y) = state.jog_target.unwrap_or((state.x_steps, state.y_steps));
                let target = match direction {
                    JogDirection::Up => (x, self.travel.clamp_y(y + steps)),
                    JogDirection::Down => (x, self.travel.clamp_y(y - steps)),
                    JogDirection::Left => (self.travel.clamp_x(x - steps), y),
                    JogDirection::Right => (self.travel.clamp_x(x + steps), y),
                };
                state.jog_target = Some(target);
            }
            Command::Spray { on: true } => {
                if state.mode != Mode::Descending {
                    nak(&mut events, reason::UNSAFE);
                    return (state, events);
                }
                state.spray_enabled = true;
            }
            Command::Spray { on: false } => {
                state.spray_enabled = false;
                state.spray_on = false;
            }
            Command::Shift => {
                if !matches!(state.mode, Mode::Idle | Mode::Done) {
                    nak(&mut events, reason::STATE);
                    return (state, events);
                }
                state.jog_target = None;
                state.shift_elapsed_ms = 0;
                state.shift_then = Mode::Idle;
                state.mode = Mode::ShiftingWall;
            }
            Command::Set { key, value } => {
                if !matches!(state.mode, Mode::Idle | Mode::Paused) {
                    nak(&mut events, reason::STATE);
                    return (state, events);
                }
                if let Err(r) = apply_setting(&mut state.settings, key, value, self.config.dt_ms) {
                    nak(&mut events, r);
                    return (state, events);
                }
            }
        }

        events.push(Event::Ack { verb: verb.to_string() });
        if state.mode != from {
            events.push(Event::Transition { from, to: state.mode });
        }
        (state, events)
    }

    pub fn tick(
        &self,
        state: ControllerState,
        reading: &SensorReading,
        dt_ms: u32,
    ) -> Result<TickOutput, ControllerError> {
        if dt_ms != self.config.dt_ms {
            return Err(ControllerError::Timestep {
                expected: self.config.dt_ms,
                got: dt_ms,
            });
        }
        let mut step = Step {
            ctl: self,
            state,
            act: ActuatorCommand::default(),
            events: Vec::new(),
            reading,
        };
        step.state.t_ms += u64::from(dt_ms);
        step.state.last_ultrasonic = reading.ultrasonic;
        step.run();
        let Step {
            mut state,
            mut act,
            events,
            ..
        } = step;
        state.spray_on &= state.mode == Mode::Descending;
        act.servo_angle = if state.spray_on { SERVO_SPRAY_DEG } else { SERVO_STOP_DEG };
        Ok(TickOutput {
            state,
            actuator: act,
            events,
        })
    }
}

fn apply_setting(settings: &mut Settings, key: &str, value: &str, dt_ms: u32) -> Result<(), &'static str> {
    match key {
        "margin_cm" | "wall_cm" => {
            let v: f64 = value.parse().map_err(|_| reason::BADARG)?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(reason::BADARG);
            }
            if key == "margin_cm" {
                settings.margin_cm = v;
            } else {
                settings.expected_wall_cm = v;
            }
        }
        "telemetry_ms" => {
            let v: u32 = value.parse().map_err(|_| reason::BADARG)?;
            if v < dt_ms {
                return Err(reason::BADARG);
            }
            settings.telemetry_ms = v;
        }
        _ => return Err(reason::BADKEY),
    }
    Ok(())
}

/// Scratch space for one tick.
struct Step<'a> {
    ctl: &'a Controller,
    state: ControllerState,
    act: ActuatorCommand,
    events: Vec<Event>,
    reading: &'a SensorReading,
}

impl Step<'_> {
    fn transition(&mut self, to: Mode) {
        let from = self.state.mode;
        if from != to {
            self.state.mode = to;
            self.events.push(Event::Transition { from, to });
        }
    }

    fn waypoint(&mut self, x_mm: f64, y_mm: f64) {
        self.events.push(Event::Waypoint { x: x_mm, y: y_mm });
    }

    fn column_center(&self) -> f64 {
        self.ctl.plan.column_centers[self.state.column_index]
    }

    /// Moves one axis toward `target` by at most the per-tick cap. Returns
    /// true once the axis is on target after this tick.
    fn move_x(&mut self, target: i64) -> bool {
        let delta = (target - self.state.x_steps).clamp(-self.ctl.step_cap, self.ctl.step_cap);
        self.act.step_x = delta;
        self.state.x_steps += delta;
        self.state.x_steps == target
    }

    fn move_y(&mut self, target: i64) -> bool {
        let delta = (target - self.state.y_steps).clamp(-self.ctl.step_cap, self.ctl.step_cap);
        self.act.step_y = delta;
        self.state.y_steps += delta;
        self.state.y_steps == target
    }

    /// X first, then Y; never both in one tick.
    fn move_to(&mut self, x: i64, y: i64) -> bool {
        if self.state.x_steps != x {
            self.move_x(x) && self.state.y_steps == y
        } else {
            self.move_y(y)
        }
    }

    fn at_bottom(&self) -> bool {
        self.reading.limit_bottom || self.state.y_steps <= self.ctl.travel.y_min
    }

    fn at_top(&self) -> bool {
        self.reading.limit_top || self.state.y_steps >= self.ctl.travel.y_max
    }

    fn guard(&self) -> Guard {
        obstacle_guard(
            self.reading.ultrasonic,
            self.state.settings.expected_wall_cm,
            self.state.settings.margin_cm,
        )
    }

    fn run(&mut self) {
        if self.reading.fault && self.state.mode != Mode::Fault {
            self.state.spray_on = false;
            self.state.burst_remaining_ms = 0;
            let reason = "sensor fault".to_string();
            self.events.push(Event::Fault { reason: reason.clone() });
            self.state.fault = Some(reason);
            self.transition(Mode::Fault);
            return;
        }
        match self.state.mode {
            Mode::Idle | Mode::Paused => self.jog(),
            Mode::Done | Mode::Fault => {}
            Mode::Ready => self.ready(),
            Mode::Descending => self.descend(),
            Mode::ObstacleHold => self.hold(),
            Mode::Ascending => self.ascend(),
            Mode::ShiftingColumn => self.shift_column(),
            Mode::ShiftingWall => self.shift_wall(),
        }
    }

    fn jog(&mut self) {
        if let Some((x, y)) = self.state.jog_target {
            if self.move_to(x, y) {
                self.state.jog_target = None;
            }
        }
    }

    fn ready(&mut self) {
        let target = self
            .state
            .homing
            .unwrap_or_else(|| self.ctl.top_of_column(self.state.column_index));
        if self.state.x_steps == target.x && self.state.y_steps == target.y {
            self.state.homing = None;
            if target.then == Mode::Descending {
                self.begin_stroke();
            }
            self.transition(target.then);
        } else if self.move_to(target.x, target.y) && target.then == Mode::Descending {
            let y = self.state.y_steps as f64 * self.ctl.per_step;
            let x = self.column_center();
            let y = if self.state.y_steps == self.ctl.travel.y_max { self.ctl.plan.y_top } else { y };
            self.waypoint(x, y);
        }
    }

    fn begin_stroke(&mut self) {
        self.state.stroke_started_ms = self.state.t_ms;
        self.state.waypoint_index = 0;
        self.state.burst_remaining_ms = 0;
    }

    fn descend(&mut self) {
        if self.guard() == Guard::Hold {
            self.state.spray_on = false;
            self.state.burst_remaining_ms = 0;
            self.events.push(Event::ObstacleHold {
                ultrasonic: self.reading.ultrasonic,
            });
            self.transition(Mode::ObstacleHold);
            self.advance_dry();
            return;
        }
        match self.ctl.plan.mode {
            PaintMode::Continuous => self.descend_continuous(),
            PaintMode::Burst => self.descend_burst(),
        }
    }

    fn descend_continuous(&mut self) {
        if self.at_bottom() {
            self.finish_stroke();
            return;
        }
        self.state.spray_on = self.state.spray_enabled;
        let target = self.ctl.travel.y_min;
        if self.move_y(target) {
            let x = self.column_center();
            self.waypoint(x, self.ctl.plan.y_bottom);
        }
    }

    fn descend_burst(&mut self) {
        if self.state.burst_remaining_ms > 0 {
            self.state.spray_on = self.state.spray_enabled;
            let dt = self.ctl.config.dt_ms;
            self.state.burst_remaining_ms = self.state.burst_remaining_ms.saturating_sub(dt);
            if self.state.burst_remaining_ms == 0 {
                self.state.waypoint_index += 1;
            }
            return;
        }
        self.state.spray_on = false;
        let waypoints = &self.ctl.waypoint_steps;
        // Skip stops already passed, e.g. while holding over an obstacle.
        while self.state.waypoint_index < waypoints.len()
            && waypoints[self.state.waypoint_index] > self.state.y_steps
        {
            self.state.waypoint_index += 1;
        }
        let Some(&target) = waypoints.get(self.state.waypoint_index) else {
            self.finish_stroke();
            return;
        };
        if self.state.y_steps == target {
            if self.state.spray_enabled {
                let dt = self.ctl.config.dt_ms;
                self.state.spray_on = true;
                self.state.burst_remaining_ms = BURST_MS.saturating_sub(dt);
                if self.state.burst_remaining_ms == 0 {
                    self.state.waypoint_index += 1;
                }
            } else {
                self.state.waypoint_index += 1;
            }
        } else if self.move_y(target) {
            let y = self.ctl.plan.burst_waypoints()[self.state.waypoint_index];
            let x = self.column_center();
            self.waypoint(x, y);
        }
    }

    fn advance_dry(&mut self) {
        if !self.at_bottom() {
            let target = self.ctl.travel.y_min;
            self.move_y(target);
        }
    }

    fn hold(&mut self) {
        if self.guard() == Guard::Pass {
            self.events.push(Event::ObstacleClear {
                ultrasonic: self.reading.ultrasonic,
            });
            self.transition(Mode::Descending);
            self.descend();
            return;
        }
        self.state.spray_on = false;
        if self.at_bottom() {
            self.finish_stroke();
        } else {
            self.advance_dry();
        }
    }

    fn finish_stroke(&mut self) {
        self.state.spray_on = false;
        self.state.burst_remaining_ms = 0;
        self.events.push(Event::StrokeDone {
            wall: self.state.wall_index,
            column: self.state.column_index,
            duration_ms: self.state.t_ms - self.state.stroke_started_ms,
        });
        self.transition(Mode::Ascending);
    }

    fn ascend(&mut self) {
        if self.at_top() {
            let next = self.state.column_index + 1;
            if next < self.ctl.plan.column_centers.len() {
                self.transition(Mode::ShiftingColumn);
            } else if self.state.wall_index + 1 < self.ctl.plan.wall_count {
                self.state.shift_elapsed_ms = 0;
                self.state.shift_then = Mode::Descending;
                self.transition(Mode::ShiftingWall);
            } else {
                self.transition(Mode::Done);
            }
            return;
        }
        let target = self.ctl.travel.y_max;
        if self.move_y(target) {
            let x = self.column_center();
            self.waypoint(x, self.ctl.plan.y_top);
        }
    }

    fn shift_column(&mut self) {
        let next = self.state.column_index + 1;
        let target = self.ctl.column_x(next);
        if self.state.x_steps == target {
            self.state.column_index = next;
            self.begin_stroke();
            self.transition(Mode::Descending);
        } else if self.move_x(target) {
            let x = self.ctl.plan.column_centers[next];
            self.waypoint(x, self.ctl.plan.y_top);
        }
    }

    fn shift_wall(&mut self) {
        self.act.shift_motor_on = true;
        self.state.shift_elapsed_ms = self
            .state
            .shift_elapsed_ms
            .saturating_add(self.ctl.config.dt_ms);
        let home_x = self.ctl.column_x(0);
        let home_y = self.ctl.travel.y_max;
        let arrived = self.state.x_steps == home_x && self.state.y_steps == home_y
            || self.move_to(home_x, home_y);
        if arrived && self.state.shift_elapsed_ms >= self.ctl.config.wall_shift_ms {
            self.state.wall_index += 1;
            self.state.column_index = 0;
            self.state.shift_elapsed_ms = 0;
            let then = self.state.shift_then;
            if then == Mode::Descending {
                self.begin_stroke();
            }
            self.transition(then);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stroke() -> StrokeSpec {
        StrokeSpec {
            width: 10.0,
            spacing: 5.5,
            stroke_time: 35.0,
        }
    }

    fn reading() -> SensorReading {
        SensorReading {
            ultrasonic: 100.0,
            limit_top: false,
            limit_bottom: false,
            limit_left: false,
            limit_right: false,
            fault: false,
            t_ms: 0,
        }
    }

    /// Brute-force column enumeration: walk left from the right edge in
    /// spacing increments until the stroke reaches the left edge.
    fn enumerate_columns(width: f64, w: f64, s: f64) -> Vec<f64> {
        let mut out = vec![width - w / 2.0];
        while out.last().unwrap() - w / 2.0 > 0.0 {
            let next = out.last().unwrap() - s;
            out.push(next.max(w / 2.0));
        }
        out
    }

    #[test]
    fn plan_desk_wall() {
        let plan = plan_mission(457.0, 457.0, stroke(), 457.0, PaintMode::Continuous).unwrap();
        assert_eq!(plan.column_centers.len(), 83);
        assert_eq!(plan.column_centers[0], 452.0);
        assert_eq!(*plan.column_centers.last().unwrap(), 5.0);
        assert_eq!(plan.column_centers, enumerate_columns(457.0, 10.0, 5.5));
        assert!(plan.column_centers.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(plan.y_bottom, 0.0);
        assert!(plan.unpaintable_band().is_none());
    }

    #[test]
    fn plan_single_column() {
        let plan = plan_mission(10.0, 100.0, stroke(), 100.0, PaintMode::Continuous).unwrap();
        assert_eq!(plan.column_centers, vec![5.0]);
        let narrow = plan_mission(6.0, 100.0, stroke(), 100.0, PaintMode::Continuous).unwrap();
        assert_eq!(narrow.column_centers, vec![3.0]);
    }

    #[test]
    fn plan_limited_reach() {
        let plan = plan_mission(457.0, 457.0, stroke(), 300.0, PaintMode::Continuous).unwrap();
        assert_eq!(plan.y_bottom, 157.0);
        assert_eq!(plan.unpaintable_band(), Some(Band { y_from: 0.0, y_to: 157.0 }));
    }

    #[test]
    fn plan_errors() {
        let mut s = stroke();
        s.spacing = 0.0;
        assert_eq!(
            plan_mission(100.0, 100.0, s, 100.0, PaintMode::Continuous),
            Err(PlanError::ZeroSpacing)
        );
        assert!(plan_mission(10.0, 100.0, s, 100.0, PaintMode::Continuous).is_ok());
        assert!(matches!(
            plan_mission(0.0, 100.0, stroke(), 100.0, PaintMode::Continuous),
            Err(PlanError::WallDims { .. })
        ));
        assert!(matches!(
            plan_mission(100.0, 100.0, stroke(), 0.0, PaintMode::Continuous),
            Err(PlanError::Reach(_))
        ));
        assert!(plan_mission(100.0, 100.0, stroke(), 100.0, PaintMode::Continuous)
            .unwrap()
            .with_walls(0)
            .is_err());
    }

    #[test]
    fn plan_exact_multiple_has_no_extra_column() {
        let s = StrokeSpec { width: 10.0, spacing: 5.0, stroke_time: 1.0 };
        let plan = plan_mission(100.0, 100.0, s, 100.0, PaintMode::Continuous).unwrap();
        assert_eq!(plan.column_centers.len(), 19);
        assert_eq!(*plan.column_centers.last().unwrap(), 5.0);
    }

    #[test]
    fn burst_waypoints_tile_the_column() {
        let plan = plan_mission(100.0, 20.0, stroke(), 20.0, PaintMode::Burst).unwrap();
        assert_eq!(plan.burst_waypoints(), vec![20.0, 14.5, 9.0, 5.5]);
        let short = plan_mission(100.0, 20.0, stroke(), 3.0, PaintMode::Burst).unwrap();
        assert_eq!(short.burst_waypoints(), vec![20.0]);
    }

    #[test]
    fn guard_examples() {
        assert_eq!(obstacle_guard(60.0, 100.0, 5.0), Guard::Hold);
        assert_eq!(obstacle_guard(100.0, 100.0, 5.0), Guard::Pass);
        assert_eq!(obstacle_guard(96.0, 100.0, 5.0), Guard::Pass);
        assert_eq!(obstacle_guard(95.0, 100.0, 5.0), Guard::Pass);
    }

    fn controller(mode: PaintMode) -> Controller {
        let plan = plan_mission(100.0, 100.0, stroke(), 100.0, mode).unwrap();
        Controller::new(plan, ControllerConfig::default()).unwrap()
    }

    fn descending(ctl: &Controller) -> ControllerState {
        let mut s = ctl.initial_state();
        s.mode = Mode::Descending;
        s.spray_on = true;
        s.y_steps -= 1000;
        s
    }

    #[test]
    fn start_from_idle() {
        let ctl = controller(PaintMode::Continuous);
        let (s, ev) = ctl.handle_command(ctl.initial_state(), &Command::Start);
        assert_eq!(s.mode, Mode::Ready);
        assert_eq!(
            ev,
            vec![
                Event::Ack { verb: "START".into() },
                Event::Transition { from: Mode::Idle, to: Mode::Ready }
            ]
        );
    }

    #[test]
    fn pause_forces_spray_off() {
        let ctl = controller(PaintMode::Continuous);
        let (s, _) = ctl.handle_command(descending(&ctl), &Command::Pause);
        assert_eq!(s.mode, Mode::Paused);
        assert!(!s.spray_on);
        let (s, _) = ctl.handle_command(s, &Command::Resume);
        assert_eq!(s.mode, Mode::Descending);
    }

    #[test]
    fn illegal_resume_is_nak() {
        let ctl = controller(PaintMode::Continuous);
        let before = ctl.initial_state();
        let (s, ev) = ctl.handle_command(before.clone(), &Command::Resume);
        assert_eq!(s, before);
        assert_eq!(
            ev,
            vec![Event::Nak { verb: "RESUME".into(), reason: "STATE".into() }]
        );
    }

    #[test]
    fn spray_on_only_while_descending() {
        let ctl = controller(PaintMode::Continuous);
        let mut s = ctl.initial_state();
        s.mode = Mode::ShiftingColumn;
        let (_, ev) = ctl.handle_command(s, &Command::Spray { on: true });
        assert_eq!(ev, vec![Event::Nak { verb: "SPRAY".into(), reason: "UNSAFE".into() }]);
        let (s, ev) = ctl.handle_command(descending(&ctl), &Command::Spray { on: false });
        assert!(!s.spray_on && !s.spray_enabled);
        assert_eq!(ev, vec![Event::Ack { verb: "SPRAY".into() }]);
        let (s, _) = ctl.handle_command(s, &Command::Spray { on: true });
        assert!(s.spray_enabled);
    }

    #[test]
    fn abort_resets_progress() {
        let ctl = controller(PaintMode::Continuous);
        let mut s = descending(&ctl);
        s.column_index = 3;
        let (s, ev) = ctl.handle_command(s, &Command::Abort);
        assert_eq!(s.mode, Mode::Idle);
        assert_eq!(s.column_index, 0);
        assert!(!s.spray_on);
        assert!(ev.contains(&Event::Transition { from: Mode::Descending, to: Mode::Idle }));
    }

    #[test]
    fn jog_only_when_idle_or_paused() {
        let ctl = controller(PaintMode::Continuous);
        let jog = Command::Jog { direction: JogDirection::Down, mm: 1.0 };
        let (s, ev) = ctl.handle_command(ctl.initial_state(), &jog);
        assert_eq!(ev, vec![Event::Ack { verb: "JOG".into() }]);
        let y0 = s.y_steps;
        let out = ctl.tick(s, &reading(), 10).unwrap();
        assert_eq!(out.actuator.step_y, -32);
        let out = ctl.tick(out.state, &reading(), 10).unwrap();
        let out = ctl.tick(out.state, &reading(), 10).unwrap();
        let out = ctl.tick(out.state, &reading(), 10).unwrap();
        assert_eq!(out.state.y_steps, y0 - 100);
        assert_eq!(out.state.jog_target, None);

        let (_, ev) = ctl.handle_command(descending(&ctl), &jog);
        assert_eq!(ev, vec![Event::Nak { verb: "JOG".into(), reason: "STATE".into() }]);
        let bad = Command::Jog { direction: JogDirection::Up, mm: -1.0 };
        let (_, ev) = ctl.handle_command(ctl.initial_state(), &bad);
        assert_eq!(ev, vec![Event::Nak { verb: "JOG".into(), reason: "BADARG".into() }]);
    }

    #[test]
    fn jog_is_clamped_to_wall() {
        let ctl = controller(PaintMode::Continuous);
        let jog = Command::Jog { direction: JogDirection::Right, mm: 1000.0 };
        let (s, _) = ctl.handle_command(ctl.initial_state(), &jog);
        assert_eq!(s.jog_target.unwrap().0, ctl.travel().x_max);
    }

    #[test]
    fn set_validates_keys() {
        let ctl = controller(PaintMode::Continuous);
        let set = |k: &str, v: &str| Command::Set { key: k.into(), value: v.into() };
        let (s, ev) = ctl.handle_command(ctl.initial_state(), &set("margin_cm", "7.5"));
        assert_eq!(s.settings.margin_cm, 7.5);
        assert_eq!(ev, vec![Event::Ack { verb: "SET".into() }]);
        let (_, ev) = ctl.handle_command(ctl.initial_state(), &set("colour", "red"));
        assert_eq!(ev, vec![Event::Nak { verb: "SET".into(), reason: "BADKEY".into() }]);
        let (_, ev) = ctl.handle_command(ctl.initial_state(), &set("telemetry_ms", "1"));
        assert_eq!(ev, vec![Event::Nak { verb: "SET".into(), reason: "BADARG".into() }]);
    }

    #[test]
    fn bottom_limit_ends_descent() {
        let ctl = controller(PaintMode::Continuous);
        let r = SensorReading { limit_bottom: true, ..reading() };
        let out = ctl.tick(descending(&ctl), &r, 10).unwrap();
        assert_eq!(out.state.mode, Mode::Ascending);
        assert_eq!(out.actuator.servo_angle, SERVO_STOP_DEG);
        assert!(!out.state.spray_on);
    }

    #[test]
    fn descent_respects_speed_cap() {
        let ctl = controller(PaintMode::Continuous);
        let out = ctl.tick(descending(&ctl), &reading(), 10).unwrap();
        assert_eq!(out.actuator.step_y, -32);
        assert_eq!(out.actuator.step_x, 0);
        assert_eq!(out.actuator.servo_angle, SERVO_SPRAY_DEG);
    }

    #[test]
    fn paused_is_inert() {
        let ctl = controller(PaintMode::Continuous);
        let (s, _) = ctl.handle_command(descending(&ctl), &Command::Pause);
        let r = SensorReading { ultrasonic: 20.0, limit_bottom: true, ..reading() };
        let out = ctl.tick(s.clone(), &r, 10).unwrap();
        assert_eq!(out.actuator, ActuatorCommand::default());
        assert_eq!(out.state.mode, Mode::Paused);
        assert_eq!(out.state.x_steps, s.x_steps);
        assert_eq!(out.state.y_steps, s.y_steps);
        assert!(out.events.is_empty());
    }

    #[test]
    fn burst_holds_servo_for_500ms() {
        let ctl = controller(PaintMode::Burst);
        let mut s = ctl.initial_state();
        s.mode = Mode::Descending;
        let mut angles = Vec::new();
        for _ in 0..60 {
            let out = ctl.tick(s, &reading(), 10).unwrap();
            angles.push(out.actuator.servo_angle);
            s = out.state;
        }
        let on = angles.iter().take_while(|&&a| a == SERVO_SPRAY_DEG).count();
        assert_eq!(on, 50);
        assert_eq!(angles[50], SERVO_STOP_DEG);
    }

    #[test]
    fn hold_stops_spray_same_tick() {
        let ctl = controller(PaintMode::Continuous);
        let r = SensorReading { ultrasonic: 60.0, ..reading() };
        let out = ctl.tick(descending(&ctl), &r, 10).unwrap();
        assert_eq!(out.state.mode, Mode::ObstacleHold);
        assert_eq!(out.actuator.servo_angle, SERVO_STOP_DEG);
        assert_eq!(out.actuator.step_y, -32);
        assert!(matches!(out.events[0], Event::ObstacleHold { .. }));
        let out = ctl.tick(out.state, &reading(), 10).unwrap();
        assert_eq!(out.state.mode, Mode::Descending);
        assert!(out.state.spray_on);
    }

    #[test]
    fn fault_marker_stops_everything() {
        let ctl = controller(PaintMode::Continuous);
        let r = SensorReading { fault: true, ..reading() };
        let out = ctl.tick(descending(&ctl), &r, 10).unwrap();
        assert_eq!(out.state.mode, Mode::Fault);
        assert_eq!(out.actuator.servo_angle, SERVO_STOP_DEG);
    }

    #[test]
    fn wrong_timestep_rejected() {
        let ctl = controller(PaintMode::Continuous);
        assert_eq!(
            ctl.tick(ctl.initial_state(), &reading(), 20),
            Err(ControllerError::Timestep { expected: 10, got: 20 })
        );
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
    }
}
