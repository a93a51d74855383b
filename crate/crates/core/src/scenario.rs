//! Scenario files.
//!
//! ```toml
//! [wall]
//! width_mm = 457
//! height_mm = 457
//! distance_cm = 100
//! nozzle_reach_mm = 300     # optional, defaults to the wall height
//!
//! [stroke]
//! width_mm = 10
//! overlap_ratio = 0.45      # or spacing_mm = 5.5
//!
//! [sim]
//! seed = 7
//!
//! [[obstacle]]
//! x_mm = 200
//! y_mm = 150
//! width_mm = 40
//! height_mm = 60
//! depth_cm = 40
//! ```
//!
//! `[motor]` and most `[sim]` keys are optional. Validation reports every
//! problem at once, each tagged with its field path.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controller::{self, ControllerConfig, MissionPlan, PaintMode, Settings};
use crate::coverage::{self, StrokeSpec};
use crate::kinematics::{self, MotorSpec};
use crate::simworld::Obstacle;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario is not valid TOML: {0}")]
    Parse(String),
    #[error("invalid scenario:\n{}", .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldIssue>),
}

impl ConfigError {
    pub fn issues(&self) -> &[FieldIssue] {
        match self {
            ConfigError::Invalid(issues) => issues,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallSection {
    pub width_mm: f64,
    pub height_mm: f64,
    pub distance_cm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nozzle_reach_mm: Option<f64>,
    #[serde(default = "default_cell")]
    pub cell_mm: f64,
    #[serde(default = "default_count")]
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrokeSection {
    pub width_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stroke_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotorSection {
    #[serde(default = "default_step_angle")]
    pub step_angle_deg: f64,
    #[serde(default = "default_microstep")]
    pub microstep: u32,
    #[serde(default = "default_pulley")]
    pub pulley_mm: f64,
    #[serde(default = "default_rpm")]
    pub rpm: f64,
}

impl Default for MotorSection {
    fn default() -> Self {
        let m = MotorSpec::default();
        Self {
            step_angle_deg: m.step_angle,
            microstep: m.microstep_factor,
            pulley_mm: m.pulley_diameter,
            rpm: m.speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_dt")]
    pub dt_ms: u32,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_cm: f64,
    #[serde(default)]
    pub mode: PaintMode,
    #[serde(default = "default_telemetry")]
    pub telemetry_ms: u32,
    #[serde(default = "default_margin")]
    pub margin_cm: f64,
    #[serde(default = "default_lead")]
    pub sensor_lead_mm: f64,
    #[serde(default = "default_wall_shift")]
    pub wall_shift_ms: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ticks: Option<u64>,
}

fn default_cell() -> f64 {
    1.0
}
fn default_count() -> u32 {
    1
}
fn default_step_angle() -> f64 {
    MotorSpec::default().step_angle
}
fn default_microstep() -> u32 {
    MotorSpec::default().microstep_factor
}
fn default_pulley() -> f64 {
    MotorSpec::default().pulley_diameter
}
fn default_rpm() -> f64 {
    MotorSpec::default().speed
}
fn default_dt() -> u32 {
    10
}
fn default_noise() -> f64 {
    2.0
}
fn default_telemetry() -> u32 {
    100
}
fn default_margin() -> f64 {
    5.0
}
fn default_lead() -> f64 {
    10.0
}
fn default_wall_shift() -> u32 {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub wall: WallSection,
    pub stroke: StrokeSection,
    #[serde(default)]
    pub motor: MotorSection,
    pub sim: SimSection,
    #[serde(default, rename = "obstacle", skip_serializing_if = "Vec::is_empty")]
    pub obstacles: Vec<Obstacle>,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 over the canonical JSON rendering, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn motor_spec(&self) -> MotorSpec {
        MotorSpec {
            step_angle: self.motor.step_angle_deg,
            microstep_factor: self.motor.microstep,
            pulley_diameter: self.motor.pulley_mm,
            speed: self.motor.rpm,
        }
    }

    pub fn validate(self) -> Result<Scenario, ConfigError> {
        let mut issues = Vec::new();
        let mut bad = |path: &str, message: String| {
            issues.push(FieldIssue {
                path: path.to_string(),
                message,
            })
        };
        let positive = |v: f64| v > 0.0 && v.is_finite();

        let w = &self.wall;
        if !positive(w.width_mm) {
            bad("wall.width_mm", format!("must be positive, got {}", w.width_mm));
        }
        if !positive(w.height_mm) {
            bad("wall.height_mm", format!("must be positive, got {}", w.height_mm));
        }
        if !positive(w.distance_cm) {
            bad("wall.distance_cm", format!("must be positive, got {}", w.distance_cm));
        }
        if let Some(r) = w.nozzle_reach_mm {
            if !positive(r) {
                bad("wall.nozzle_reach_mm", format!("must be positive, got {r}"));
            }
        }
        if !positive(w.cell_mm) {
            bad("wall.cell_mm", format!("must be positive, got {}", w.cell_mm));
        } else if positive(w.width_mm) && positive(w.height_mm) {
            if let Err(e) = coverage::WallGrid::new(w.width_mm, w.height_mm, w.cell_mm) {
                bad("wall.cell_mm", e.to_string());
            }
        }
        if w.count == 0 {
            bad("wall.count", "must be at least 1".into());
        }

        let s = &self.stroke;
        if !positive(s.width_mm) {
            bad("stroke.width_mm", format!("must be positive, got {}", s.width_mm));
        }
        let spacing = match (s.spacing_mm, s.overlap_ratio) {
            (Some(_), Some(_)) => {
                bad("stroke", "give either spacing_mm or overlap_ratio, not both".into());
                None
            }
            (None, None) => {
                bad("stroke", "one of spacing_mm or overlap_ratio is required".into());
                None
            }
            (Some(sp), None) if !(sp >= 0.0 && sp.is_finite()) => {
                bad("stroke.spacing_mm", format!("must be non-negative, got {sp}"));
                None
            }
            (Some(sp), None) => Some(sp),
            (None, Some(r)) => match coverage::spacing_for_overlap(s.width_mm, r) {
                Ok(sp) => Some(sp),
                Err(e) => {
                    bad("stroke.overlap_ratio", e.to_string());
                    None
                }
            },
        };
        if let Some(t) = s.stroke_time_s {
            if !positive(t) {
                bad("stroke.stroke_time_s", format!("must be positive, got {t}"));
            }
        }

        let motor = self.motor_spec();
        let per_step = match kinematics::distance_per_step(&motor) {
            Ok(d) => Some(d),
            Err(e) => {
                let path = match e {
                    kinematics::MotorError::StepAngleRange(_)
                    | kinematics::MotorError::StepAngleNotDivisor(_) => "motor.step_angle_deg",
                    kinematics::MotorError::Microstep => "motor.microstep",
                    kinematics::MotorError::PulleyDiameter(_) => "motor.pulley_mm",
                    kinematics::MotorError::Speed(_) => "motor.rpm",
                };
                bad(path, e.to_string());
                None
            }
        };

        let sim = &self.sim;
        if sim.dt_ms == 0 {
            bad("sim.dt_ms", "must be positive".into());
        }
        let step_cap = match (per_step, sim.dt_ms) {
            (Some(_), dt) if dt > 0 => {
                let cap = motor.max_steps_per_tick(dt).unwrap_or(0);
                if cap == 0 {
                    bad("sim.dt_ms", format!("motor cannot take a single step in {dt} ms"));
                }
                Some(cap)
            }
            _ => None,
        };
        if !(sim.noise_cm >= 0.0 && sim.noise_cm.is_finite()) {
            bad("sim.noise_cm", format!("must be non-negative, got {}", sim.noise_cm));
        }
        if sim.telemetry_ms < sim.dt_ms {
            bad("sim.telemetry_ms", format!("must be at least dt_ms ({})", sim.dt_ms));
        }
        if !positive(sim.margin_cm) {
            bad("sim.margin_cm", format!("must be positive, got {}", sim.margin_cm));
        } else if sim.margin_cm <= sim.noise_cm {
            bad(
                "sim.margin_cm",
                format!("must exceed the sensor noise bound ({} cm)", sim.noise_cm),
            );
        }
        if let (Some(cap), Some(d)) = (step_cap, per_step) {
            let per_tick = cap as f64 * d;
            if !(sim.sensor_lead_mm > per_tick && sim.sensor_lead_mm.is_finite()) {
                bad(
                    "sim.sensor_lead_mm",
                    format!("must exceed the travel of one tick ({per_tick:.3} mm)"),
                );
            }
            if let (PaintMode::Burst, Some(sp)) = (sim.mode, spacing) {
                let pitch = if sp > 0.0 { sp } else { s.width_mm };
                if sim.sensor_lead_mm < pitch {
                    bad(
                        "sim.sensor_lead_mm",
                        format!("must cover the burst pitch ({pitch} mm) in burst mode"),
                    );
                }
            }
        }
        if sim.max_ticks == Some(0) {
            bad("sim.max_ticks", "must be positive".into());
        }

        for (i, o) in self.obstacles.iter().enumerate() {
            if let Err(msg) = o.check_within(w.width_mm, w.height_mm) {
                bad(&format!("obstacle[{i}]"), msg);
            }
        }

        let mut plan = None;
        if let Some(spacing) = spacing {
            let reach = w.nozzle_reach_mm.unwrap_or(w.height_mm);
            let stroke_time = s.stroke_time_s.unwrap_or_else(|| {
                let mm_per_s = motor.speed / 60.0 * std::f64::consts::PI * motor.pulley_diameter;
                let span = (w.height_mm - (w.height_mm - reach).max(0.0)).max(0.0);
                (span / mm_per_s).max(f64::MIN_POSITIVE)
            });
            let stroke = StrokeSpec {
                width: s.width_mm,
                spacing,
                stroke_time,
            };
            match controller::plan_mission(w.width_mm, w.height_mm, stroke, reach, sim.mode) {
                Ok(p) => plan = p.with_walls(w.count.max(1)).ok(),
                Err(controller::PlanError::ZeroSpacing) => {
                    bad("stroke.spacing_mm", "zero spacing cannot cover a wall wider than the stroke".into())
                }
                Err(e) => bad("stroke", e.to_string()),
            }
        }

        if !issues.is_empty() {
            return Err(ConfigError::Invalid(issues));
        }
        let plan = plan.expect("plan exists when no issues were found");
        let controller = ControllerConfig {
            motor,
            dt_ms: sim.dt_ms,
            wall_shift_ms: sim.wall_shift_ms,
            settings: Settings {
                margin_cm: sim.margin_cm,
                expected_wall_cm: w.distance_cm,
                telemetry_ms: sim.telemetry_ms,
            },
        };
        Ok(Scenario {
            config: self,
            plan,
            controller,
        })
    }
}

/// A validated scenario with its derived mission plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub plan: MissionPlan,
    pub controller: ControllerConfig,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        ScenarioConfig::load(path)?.validate()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        ScenarioConfig::parse(text)?.validate()
    }

    pub fn dt_ms(&self) -> u32 {
        self.config.sim.dt_ms
    }
}
