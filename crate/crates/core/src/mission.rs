//! Mission runner, event log and replay.
//!
//! A [`Mission`] owns one controller state and one world and advances them
//! in lockstep. Commands are applied at tick boundaries. Everything that
//! happens is written to an in-memory JSON Lines log:
//!
//! ```text
//! {"t_ms":0,"kind":"header","detail":{...scenario, seed, mode...}}
//! {"t_ms":0,"kind":"telemetry","detail":{"body":"TELEM t=0 ..."}}
//! {"t_ms":0,"kind":"command","detail":{"body":"START"}}
//! {"t_ms":0,"kind":"ack","detail":{"verb":"START"}}
//! ...
//! {"t_ms":2412340,"kind":"end","detail":{"outcome":"done","ticks":241234}}
//! ```
//!
//! The header carries the full scenario, so a log replays without the
//! scenario file: rebuild the mission, feed it the logged commands at their
//! logged times and compare the regenerated log line by line.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::controller::{
    Command, Controller, ControllerError, ControllerState, Event, Mode, PaintMode, BURST_MS,
};
use crate::coverage::{self, CoverageError, CoverageReport, Quality, WallGrid};
use crate::protocol::{self, TelemetryRecord};
use crate::scenario::{ConfigError, Scenario, ScenarioConfig};
use crate::simworld::{SensorReading, World, WorldError};

pub const LOG_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum MissionError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> MissionError + '_ {
    move |source| MissionError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Done,
    Fault,
    /// Idle or paused with nothing left to do.
    Stopped,
    /// Tick budget exhausted.
    TimedOut,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Done => 0,
            Outcome::Fault => 2,
            Outcome::Stopped | Outcome::TimedOut => 3,
        }
    }
}

/// A command due at `t_ms` of virtual time.
#[derive(Debug, Clone, PartialEq)]
pub struct Scheduled {
    pub t_ms: u64,
    pub command: Command,
}

impl Scheduled {
    pub fn new(t_ms: u64, command: Command) -> Self {
        Self { t_ms, command }
    }
}

/// One completed descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokeRecord {
    pub wall: u32,
    pub column: usize,
    /// True rig x during the stroke, mm.
    pub realized_x: f64,
    pub duration_ms: u64,
}

/// What one tick produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TickReport {
    pub events: Vec<Event>,
    pub telemetry: Option<TelemetryRecord>,
    pub deposited: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mission {
    scenario: Scenario,
    controller: Controller,
    state: ControllerState,
    world: World,
    reading: SensorReading,
    ticks: u64,
    max_ticks: u64,
    next_telemetry_ms: u64,
    log: Option<Vec<String>>,
    max_waypoint_error: f64,
    strokes: Vec<StrokeRecord>,
}

#[derive(Serialize)]
struct Line<'a> {
    t_ms: u64,
    kind: &'a str,
    detail: Value,
}

fn line(t_ms: u64, kind: &str, detail: Value) -> String {
    serde_json::to_string(&Line { t_ms, kind, detail }).expect("log records serialize")
}

/// Generous tick budget for a scenario: twice the time needed to sweep
/// every column down and up plus shifts and bursts.
pub fn default_tick_budget(controller: &Controller) -> u64 {
    let plan = controller.plan();
    let dt = f64::from(controller.config().dt_ms);
    let per_tick = controller.step_cap() as f64 * controller.per_step();
    let cols = plan.column_centers.len() as f64;
    let walls = f64::from(plan.wall_count);
    let span = plan.y_top - plan.y_bottom;
    let travel = walls * (cols * (2.0 * span + plan.stroke.spacing) + plan.wall_width + plan.wall_height);
    let bursts = match plan.mode {
        PaintMode::Burst => plan.burst_waypoints().len() as f64 * (f64::from(BURST_MS) / dt + 2.0),
        PaintMode::Continuous => 0.0,
    };
    let shifts = walls * f64::from(controller.config().wall_shift_ms) / dt;
    let ticks = travel / per_tick + walls * cols * (bursts + 8.0) + shifts;
    (2.0 * ticks) as u64 + 10_000
}

impl Mission {
    /// A mission that keeps an event log.
    pub fn new(scenario: Scenario) -> Result<Self, MissionError> {
        Self::build(scenario, true)
    }

    /// A mission without an event log, for long-running service use.
    pub fn unlogged(scenario: Scenario) -> Result<Self, MissionError> {
        Self::build(scenario, false)
    }

    fn build(scenario: Scenario, logged: bool) -> Result<Self, MissionError> {
        let controller = Controller::new(scenario.plan.clone(), scenario.controller)?;
        let mut world = World::new(&scenario)?;
        let reading = world.sense();
        let state = controller.initial_state();
        let max_ticks = scenario
            .config
            .sim
            .max_ticks
            .unwrap_or_else(|| default_tick_budget(&controller));
        let log = logged.then(|| {
            vec![line(
                0,
                "header",
                json!({
                    "format": LOG_FORMAT,
                    "digest": scenario.config.digest(),
                    "seed": scenario.config.sim.seed,
                    "mode": scenario.config.sim.mode,
                    "max_ticks": max_ticks,
                    "scenario": scenario.config,
                }),
            )]
        });
        let mut mission = Self {
            scenario,
            controller,
            state,
            world,
            reading,
            ticks: 0,
            max_ticks,
            next_telemetry_ms: 0,
            log,
            max_waypoint_error: 0.0,
            strokes: Vec::new(),
        };
        mission.telemetry_if_due();
        Ok(mission)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// The world, for injecting obstacles mid-run.
    pub fn world_mut(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn reading(&self) -> &SensorReading {
        &self.reading
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn max_ticks(&self) -> u64 {
        self.max_ticks
    }

    pub fn t_ms(&self) -> u64 {
        self.state.t_ms
    }

    pub fn max_waypoint_error(&self) -> f64 {
        self.max_waypoint_error
    }

    pub fn strokes(&self) -> &[StrokeRecord] {
        &self.strokes
    }

    pub fn log_lines(&self) -> &[String] {
        self.log.as_deref().unwrap_or(&[])
    }

    fn push_log(&mut self, t_ms: u64, kind: &str, detail: Value) {
        if let Some(log) = &mut self.log {
            log.push(line(t_ms, kind, detail));
        }
    }

    /// Current pose and sensor state as a telemetry sample.
    pub fn telemetry(&self) -> TelemetryRecord {
        TelemetryRecord {
            t_ms: self.state.t_ms,
            mode: self.state.mode,
            x_mm: self.world.rig_x(),
            y_mm: self.world.rig_y(),
            spray: self.state.spray_on,
            ultra_cm: self.reading.ultrasonic,
            coverage_pct: self.world.wall().painted_fraction() * 100.0,
        }
    }

    fn telemetry_if_due(&mut self) -> Option<TelemetryRecord> {
        if self.state.t_ms < self.next_telemetry_ms {
            return None;
        }
        self.next_telemetry_ms = self.state.t_ms + u64::from(self.state.settings.telemetry_ms);
        let rec = self.telemetry();
        if self.log.is_some() {
            self.push_log(rec.t_ms, "telemetry", json!({ "body": rec.body() }));
        }
        Some(rec)
    }

    fn log_event(&mut self, t_ms: u64, event: &Event) {
        if self.log.is_none() {
            return;
        }
        let Value::Object(mut obj) = serde_json::to_value(event).expect("events serialize") else {
            unreachable!("events serialize as objects")
        };
        let kind = match obj.remove("kind") {
            Some(Value::String(k)) => k,
            _ => unreachable!("events carry a kind tag"),
        };
        let mut detail = obj.remove("detail").unwrap_or(Value::Null);
        if let (Event::Waypoint { x, y }, Value::Object(d)) = (event, &mut detail) {
            let (ax, ay) = (self.world.rig_x(), self.world.rig_y());
            d.insert("actual_x".into(), json!(ax));
            d.insert("actual_y".into(), json!(ay));
            d.insert("error".into(), json!((x - ax).hypot(y - ay)));
        }
        self.push_log(t_ms, &kind, detail);
    }

    /// Applies an operator command at the current tick boundary.
    pub fn command(&mut self, cmd: &Command) -> Vec<Event> {
        let t = self.state.t_ms;
        self.push_log(t, "command", json!({ "body": protocol::command_body(cmd) }));
        let (state, events) = self.controller.handle_command(self.state.clone(), cmd);
        self.state = state;
        for e in &events {
            self.log_event(t, e);
        }
        // A shorter telemetry interval takes effect from now.
        let due = self.state.t_ms + u64::from(self.state.settings.telemetry_ms);
        self.next_telemetry_ms = self.next_telemetry_ms.min(due);
        events
    }

    /// Advances controller and world by one tick.
    pub fn step(&mut self) -> Result<TickReport, MissionError> {
        let dt = self.controller.config().dt_ms;
        let out = self.controller.tick(self.state.clone(), &self.reading, dt)?;
        let outcome = self.world.step(&out.actuator, dt)?;
        self.state = out.state;
        self.reading = outcome.reading;
        self.ticks += 1;
        let t = self.state.t_ms;
        for e in &out.events {
            match *e {
                Event::Waypoint { x, y } => {
                    let err = (x - self.world.rig_x()).hypot(y - self.world.rig_y());
                    self.max_waypoint_error = self.max_waypoint_error.max(err);
                }
                Event::StrokeDone { wall, column, duration_ms } => self.strokes.push(StrokeRecord {
                    wall,
                    column,
                    realized_x: self.world.rig_x(),
                    duration_ms,
                }),
                _ => {}
            }
            self.log_event(t, e);
        }
        let telemetry = self.telemetry_if_due();
        Ok(TickReport {
            events: out.events,
            telemetry,
            deposited: outcome.deposited,
        })
    }

    fn settled(&self) -> Option<Outcome> {
        match self.state.mode {
            Mode::Done => Some(Outcome::Done),
            Mode::Fault => Some(Outcome::Fault),
            Mode::Idle | Mode::Paused if self.state.jog_target.is_none() => Some(Outcome::Stopped),
            _ => None,
        }
    }

    /// Runs until the mission settles with no commands left, or the tick
    /// budget runs out. Commands are applied once virtual time reaches their
    /// `t_ms`, in schedule order for equal times.
    pub fn run(&mut self, schedule: &[Scheduled]) -> Result<Outcome, MissionError> {
        let mut pending: Vec<&Scheduled> = schedule.iter().collect();
        pending.sort_by_key(|s| s.t_ms);
        let mut pending: VecDeque<&Scheduled> = pending.into();
        let outcome = loop {
            while let Some(s) = pending.front().filter(|s| s.t_ms <= self.state.t_ms) {
                let cmd = s.command.clone();
                pending.pop_front();
                self.command(&cmd);
            }
            if pending.is_empty() {
                if let Some(o) = self.settled() {
                    break o;
                }
            }
            if self.ticks >= self.max_ticks {
                break Outcome::TimedOut;
            }
            self.step()?;
        };
        let t = self.state.t_ms;
        self.push_log(t, "end", json!({ "outcome": outcome, "ticks": self.ticks }));
        Ok(outcome)
    }

    /// Every wall the rig has worked on, oldest first.
    pub fn walls(&self) -> Vec<&WallGrid> {
        let mut walls: Vec<&WallGrid> = self.world.finished_walls().iter().collect();
        walls.push(self.world.wall());
        walls
    }

    pub fn mean_stroke_time_s(&self) -> f64 {
        if self.strokes.is_empty() {
            return self.scenario.plan.stroke.stroke_time;
        }
        let total: u64 = self.strokes.iter().map(|s| s.duration_ms).sum();
        total as f64 / self.strokes.len() as f64 / 1000.0
    }

    pub fn report(&self, outcome: Outcome, event_log_path: &str) -> Result<RunReport, MissionError> {
        let plan = &self.scenario.plan;
        let per_wall = self
            .walls()
            .iter()
            .enumerate()
            .map(|(i, grid)| {
                let (planned, realized): (Vec<f64>, Vec<f64>) = self
                    .strokes
                    .iter()
                    .filter(|s| s.wall as usize == i)
                    .map(|s| (plan.column_centers[s.column], s.realized_x))
                    .unzip();
                coverage::coverage_report(grid, &planned, &realized)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let least = per_wall
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.painted_fraction.total_cmp(&b.1.painted_fraction))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let overlap = plan.stroke.overlap()?.ratio;
        let mean_stroke_time_s = self.mean_stroke_time_s();
        let quality = coverage::classify_quality(overlap.clamp(0.0, 1.0), mean_stroke_time_s)?;
        Ok(RunReport {
            scenario_digest: self.scenario.config.digest(),
            seed: self.scenario.config.sim.seed,
            mode: plan.mode,
            outcome,
            final_mode: self.state.mode,
            coverage: per_wall[least].clone(),
            least_covered_wall: least,
            per_wall,
            overlap_ratio: overlap,
            mean_stroke_time_s,
            quality,
            max_position_error: self.max_waypoint_error,
            stroke_count: self.strokes.len(),
            tick_count: self.ticks,
            virtual_time_ms: self.state.t_ms,
            wall_count: self.walls().len(),
            event_log_path: event_log_path.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_digest: String,
    pub seed: u64,
    pub mode: PaintMode,
    pub outcome: Outcome,
    pub final_mode: Mode,
    /// Coverage of the least-covered wall.
    pub coverage: CoverageReport,
    pub least_covered_wall: usize,
    pub per_wall: Vec<CoverageReport>,
    pub overlap_ratio: f64,
    pub mean_stroke_time_s: f64,
    pub quality: Quality,
    /// Largest planned-vs-true pose distance at any waypoint, mm.
    pub max_position_error: f64,
    pub stroke_count: usize,
    pub tick_count: u64,
    pub virtual_time_ms: u64,
    pub wall_count: usize,
    pub event_log_path: String,
}

pub const REPORT_FILE: &str = "report.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const COVERAGE_PGM: &str = "coverage.pgm";
pub const COVERAGE_CSV: &str = "coverage.csv";

/// Runs a scenario from START to completion and writes the report, event
/// log and coverage maps into `out_dir`.
pub fn run_mission(scenario: Scenario, out_dir: &Path) -> Result<RunReport, MissionError> {
    let mut mission = Mission::new(scenario)?;
    let outcome = mission.run(&[Scheduled::new(0, Command::Start)])?;
    write_artifacts(&mission, outcome, out_dir)
}

pub fn write_artifacts(mission: &Mission, outcome: Outcome, out_dir: &Path) -> Result<RunReport, MissionError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let events_path = out_dir.join(EVENTS_FILE);
    let report = mission.report(outcome, &events_path.display().to_string())?;

    let write = |name: &str, f: &dyn Fn(&mut BufWriter<fs::File>) -> io::Result<()>| {
        let path = out_dir.join(name);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))
    };
    write(EVENTS_FILE, &|w| {
        for l in mission.log_lines() {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })?;
    write(REPORT_FILE, &|w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)
    })?;
    let walls = mission.walls();
    let least = walls[report.least_covered_wall];
    write(COVERAGE_PGM, &|w| least.write_pgm(w))?;
    write(COVERAGE_CSV, &|w| least.write_csv(w))?;
    if walls.len() > 1 {
        for (i, grid) in walls.iter().enumerate() {
            write(&format!("wall-{i}.pgm"), &|w| grid.write_pgm(w))?;
        }
    }
    Ok(report)
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line 1 is not a valid log header: {0}")]
    Header(String),
    #[error("unsupported log format {0}")]
    Format(u64),
    #[error("line {line}: bad command record: {message}")]
    Command { line: usize, message: String },
    #[error("scenario in header: {0}")]
    Scenario(#[from] ConfigError),
    #[error(transparent)]
    Mission(#[from] MissionError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayStatus {
    Identical,
    /// First differing line, 1-based. `found` is `None` when the regenerated
    /// log ends early and `expected` when the logged one has extra lines.
    Diverged {
        line: usize,
        expected: Option<String>,
        found: Option<String>,
    },
    /// The log stops partway; every complete line it has matches.
    Truncated { complete_lines: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySummary {
    pub status: ReplayStatus,
    pub logged_lines: usize,
    pub regenerated_lines: usize,
    pub commands: usize,
    pub ticks: u64,
    pub outcome: Outcome,
}

impl ReplaySummary {
    pub fn exit_code(&self) -> i32 {
        match self.status {
            ReplayStatus::Identical => 0,
            ReplayStatus::Diverged { .. } => 2,
            ReplayStatus::Truncated { .. } => 3,
        }
    }
}

#[derive(Deserialize)]
struct RawLine {
    t_ms: u64,
    kind: String,
    detail: Value,
}

pub fn replay_file(path: &Path) -> Result<ReplaySummary, ReplayError> {
    let text = fs::read_to_string(path).map_err(|source| ReplayError::Io { path: path.to_path_buf(), source })?;
    replay(&text)
}

/// Re-executes a logged run and compares the regenerated log with `text`.
pub fn replay(text: &str) -> Result<ReplaySummary, ReplayError> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    // A final newline leaves an empty tail; anything else there is a
    // partial line.
    let partial = lines.pop().filter(|tail| !tail.is_empty());

    let first = lines.first().copied().or(partial).unwrap_or("");
    let header: RawLine = serde_json::from_str(first).map_err(|e| ReplayError::Header(e.to_string()))?;
    if header.kind != "header" {
        return Err(ReplayError::Header(format!("kind is `{}`", header.kind)));
    }
    let format = header.detail.get("format").and_then(Value::as_u64).unwrap_or(0);
    if format != u64::from(LOG_FORMAT) {
        return Err(ReplayError::Format(format));
    }
    let config: ScenarioConfig = header
        .detail
        .get("scenario")
        .cloned()
        .ok_or_else(|| ReplayError::Header("no scenario".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| ReplayError::Header(e.to_string())))?;
    let scenario = config.validate()?;
    let mut schedule = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        let Ok(raw) = serde_json::from_str::<RawLine>(l) else { continue };
        if raw.kind != "command" {
            continue;
        }
        let body = raw.detail.get("body").and_then(Value::as_str).ok_or_else(|| ReplayError::Command {
            line: i + 1,
            message: "missing body".into(),
        })?;
        let command = protocol::parse_command(body).map_err(|e| ReplayError::Command {
            line: i + 1,
            message: e.to_string(),
        })?;
        schedule.push(Scheduled::new(raw.t_ms, command));
    }
    let commands = schedule.len();

    let mut mission = Mission::new(scenario)?;
    let outcome = mission.run(&schedule)?;
    let regenerated = mission.log_lines();

    let status = compare(&lines, partial, regenerated);
    Ok(ReplaySummary {
        status,
        logged_lines: lines.len(),
        regenerated_lines: regenerated.len(),
        commands,
        ticks: mission.ticks(),
        outcome,
    })
}

fn compare(logged: &[&str], partial: Option<&str>, regenerated: &[String]) -> ReplayStatus {
    for (i, want) in regenerated.iter().enumerate() {
        match logged.get(i) {
            Some(got) if *got == want => {}
            Some(got) => {
                return ReplayStatus::Diverged {
                    line: i + 1,
                    expected: Some(want.clone()),
                    found: Some(got.to_string()),
                }
            }
            None => {
                return match partial {
                    Some(p) if !want.starts_with(p) => ReplayStatus::Diverged {
                        line: i + 1,
                        expected: Some(want.clone()),
                        found: Some(p.to_string()),
                    },
                    _ => ReplayStatus::Truncated { complete_lines: logged.len() },
                };
            }
        }
    }
    if logged.len() > regenerated.len() || partial.is_some() {
        let line = regenerated.len() + 1;
        return ReplayStatus::Diverged {
            line,
            expected: None,
            found: logged.get(regenerated.len()).copied().or(partial).map(str::to_string),
        };
    }
    ReplayStatus::Identical
}
