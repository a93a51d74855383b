//! Simulated ground truth for the rig.
//!
//! The rig is kinematic: actuator step counts move it by whole microsteps,
//! clamped to the travel envelope, and the spray servo deposits paint into
//! the wall grid. The ultrasonic sensor looks at the wall through a window
//! that spans the spray footprint horizontally and reaches `sensor_lead_mm`
//! below the nozzle, so anything the nozzle is about to pass over shows up
//! before paint lands on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ActuatorCommand, MissionPlan, PaintMode, Travel};
use crate::coverage::WallGrid;
use crate::kinematics;
use crate::scenario::Scenario;

/// Physical range of the modeled ultrasonic ranger, cm.
pub const ULTRASONIC_MIN_CM: f64 = 2.0;
pub const ULTRASONIC_MAX_CM: f64 = 400.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("obstacle: {0}")]
    Obstacle(String),
    #[error("step of {got} ms does not match the configured {expected} ms")]
    Timestep { expected: u32, got: u32 },
    #[error("{0}")]
    Setup(String),
}

/// Something standing proud of the wall: `[x, x+width) × [y, y+height)` mm,
/// protruding `depth_cm` toward the rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub x_mm: f64,
    pub y_mm: f64,
    pub width_mm: f64,
    pub height_mm: f64,
    pub depth_cm: f64,
}

impl Obstacle {
    pub fn check_within(&self, wall_width: f64, wall_height: f64) -> Result<(), String> {
        let finite = [self.x_mm, self.y_mm, self.width_mm, self.height_mm, self.depth_cm]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err("fields must be finite".into());
        }
        if self.width_mm <= 0.0 || self.height_mm <= 0.0 {
            return Err("width_mm and height_mm must be positive".into());
        }
        if self.depth_cm <= 0.0 {
            return Err("depth_cm must be positive".into());
        }
        if self.x_mm < 0.0
            || self.y_mm < 0.0
            || self.x_mm + self.width_mm > wall_width
            || self.y_mm + self.height_mm > wall_height
        {
            return Err(format!(
                "box [{}, {}) x [{}, {}) leaves the {wall_width} x {wall_height} mm wall",
                self.x_mm,
                self.x_mm + self.width_mm,
                self.y_mm,
                self.y_mm + self.height_mm
            ));
        }
        Ok(())
    }

    /// Whether the box shares any area with the sensing window
    /// `[x_lo, x_hi) × [y_lo, y_hi]`.
    fn meets(&self, x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> bool {
        x_lo < self.x_mm + self.width_mm
            && self.x_mm < x_hi
            && self.y_mm <= y_hi
            && y_lo < self.y_mm + self.height_mm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub ultrasonic: f64,
    pub limit_top: bool,
    pub limit_bottom: bool,
    pub limit_left: bool,
    pub limit_right: bool,
    /// Set when the last actuator command broke the speed cap.
    pub fault: bool,
    pub t_ms: u64,
}

/// Result of advancing the world by one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reading: SensorReading,
    /// Cells coated this tick.
    pub deposited: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    rig_x: i64,
    rig_y: i64,
    per_step: f64,
    step_cap: i64,
    travel: Travel,
    y_bottom: f64,
    wall: WallGrid,
    finished_walls: Vec<WallGrid>,
    obstacles: Vec<Obstacle>,
    wall_distance_cm: f64,
    noise_cm: f64,
    spray_width: f64,
    burst_height: f64,
    sensor_lead_mm: f64,
    dt_ms: u32,
    clock_ms: u64,
    seed: u64,
    rng: ChaCha8Rng,
    servo_was_on: bool,
    shift_was_on: bool,
}

impl World {
    /// Builds the world for a validated scenario: rig hanging at the top of
    /// the first column, clean wall, clock at zero.
    pub fn new(scenario: &Scenario) -> Result<Self, WorldError> {
        let cfg = &scenario.config;
        let plan = &scenario.plan;
        let mut world = Self::bare(
            plan,
            scenario.controller.motor,
            cfg.sim.dt_ms,
            cfg.wall.cell_mm,
            cfg.wall.distance_cm,
            cfg.sim.noise_cm,
            cfg.sim.sensor_lead_mm,
            cfg.sim.seed,
        )?;
        for o in &cfg.obstacles {
            world.inject_obstacle(*o)?;
        }
        Ok(world)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn bare(
        plan: &MissionPlan,
        motor: kinematics::MotorSpec,
        dt_ms: u32,
        cell_mm: f64,
        wall_distance_cm: f64,
        noise_cm: f64,
        sensor_lead_mm: f64,
        seed: u64,
    ) -> Result<Self, WorldError> {
        let setup = |e: &dyn std::fmt::Display| WorldError::Setup(e.to_string());
        let per_step = kinematics::distance_per_step(&motor).map_err(|e| setup(&e))?;
        let step_cap = motor.max_steps_per_tick(dt_ms).map_err(|e| setup(&e))? as i64;
        let wall = WallGrid::new(plan.wall_width, plan.wall_height, cell_mm).map_err(|e| setup(&e))?;
        let travel = Travel::new(plan, per_step);
        let start_x = kinematics::steps_for_distance_at(plan.column_centers[0], per_step).signed_steps();
        Ok(Self {
            rig_x: travel.clamp_x(start_x),
            rig_y: travel.y_max,
            per_step,
            step_cap,
            travel,
            y_bottom: plan.y_bottom,
            wall,
            finished_walls: Vec::new(),
            obstacles: Vec::new(),
            wall_distance_cm,
            noise_cm,
            spray_width: plan.stroke.width,
            burst_height: match plan.mode {
                PaintMode::Burst => plan.burst_pitch(),
                PaintMode::Continuous => 0.0,
            },
            sensor_lead_mm,
            dt_ms,
            clock_ms: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            servo_was_on: false,
            shift_was_on: false,
        })
    }

    pub fn rig_x(&self) -> f64 {
        self.rig_x as f64 * self.per_step
    }

    pub fn rig_y(&self) -> f64 {
        self.rig_y as f64 * self.per_step
    }

    pub fn rig_steps(&self) -> (i64, i64) {
        (self.rig_x, self.rig_y)
    }

    pub fn per_step(&self) -> f64 {
        self.per_step
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn wall(&self) -> &WallGrid {
        &self.wall
    }

    /// Walls left behind by wall shifts, oldest first.
    pub fn finished_walls(&self) -> &[WallGrid] {
        &self.finished_walls
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn wall_distance_cm(&self) -> f64 {
        self.wall_distance_cm
    }

    pub fn inject_obstacle(&mut self, obstacle: Obstacle) -> Result<(), WorldError> {
        obstacle
            .check_within(self.wall.width(), self.wall.height())
            .map_err(WorldError::Obstacle)?;
        self.obstacles.push(obstacle);
        Ok(())
    }

    /// Noise-free distance from the sensor to the nearest surface in its
    /// window, cm.
    pub fn true_range_cm(&self) -> f64 {
        let (x, y) = (self.rig_x(), self.rig_y());
        let half = self.spray_width / 2.0;
        let deepest = self
            .obstacles
            .iter()
            .filter(|o| o.meets(x - half, x + half, y - self.sensor_lead_mm, y))
            .map(|o| o.depth_cm)
            .fold(0.0, f64::max);
        self.wall_distance_cm - deepest
    }

    /// One ultrasonic sample: truth plus uniform noise within ±`noise_cm`.
    pub fn read_ultrasonic(&mut self) -> f64 {
        let truth = self.true_range_cm();
        let noise = if self.noise_cm > 0.0 {
            self.rng.random_range(-self.noise_cm..=self.noise_cm)
        } else {
            0.0
        };
        (truth + noise).clamp(ULTRASONIC_MIN_CM, ULTRASONIC_MAX_CM)
    }

    /// Reading at the current pose without advancing the clock.
    pub fn sense(&mut self) -> SensorReading {
        self.reading(false)
    }

    fn reading(&mut self, fault: bool) -> SensorReading {
        SensorReading {
            ultrasonic: self.read_ultrasonic(),
            limit_top: self.rig_y >= self.travel.y_max,
            limit_bottom: self.rig_y <= self.travel.y_min,
            limit_left: self.rig_x <= 0,
            limit_right: self.rig_x >= self.travel.x_max,
            fault,
            t_ms: self.clock_ms,
        }
    }

    pub fn step(&mut self, act: &ActuatorCommand, dt_ms: u32) -> Result<StepOutcome, WorldError> {
        if dt_ms != self.dt_ms {
            return Err(WorldError::Timestep {
                expected: self.dt_ms,
                got: dt_ms,
            });
        }
        let fault = act.step_x.abs() > self.step_cap || act.step_y.abs() > self.step_cap;
        let dx = act.step_x.clamp(-self.step_cap, self.step_cap);
        let dy = act.step_y.clamp(-self.step_cap, self.step_cap);

        if act.shift_motor_on && !self.shift_was_on {
            let fresh = WallGrid::new(self.wall.width(), self.wall.height(), self.wall.cell_size())
                .expect("same dimensions as the current wall");
            self.finished_walls.push(std::mem::replace(&mut self.wall, fresh));
        }
        self.shift_was_on = act.shift_motor_on;

        let y_before = self.rig_y();
        self.rig_x = self.travel.clamp_x(self.rig_x + dx);
        self.rig_y = self.travel.clamp_y(self.rig_y + dy);
        let (x, y_after) = (self.rig_x(), self.rig_y());

        let spraying = act.spraying();
        let mut deposited = 0;
        if spraying {
            if y_after != y_before {
                let (lo, hi) = if y_after < y_before { (y_after, y_before) } else { (y_before, y_after) };
                deposited = self.wall.apply_stroke(x, lo, hi, self.spray_width);
            } else if !self.servo_was_on && self.burst_height > 0.0 {
                let lo = (y_after - self.burst_height).max(self.y_bottom);
                deposited = self.wall.apply_stroke(x, lo, y_after, self.spray_width);
            }
        }
        self.servo_was_on = spraying;

        self.clock_ms += u64::from(dt_ms);
        Ok(StepOutcome {
            reading: self.reading(fault),
            deposited,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::SERVO_SPRAY_DEG;

    const SMALL: &str = r#"
[wall]
width_mm = 100
height_mm = 100
distance_cm = 100

[stroke]
width_mm = 10
spacing_mm = 5.5

[sim]
seed = 9
"#;

    fn world(text: &str) -> World {
        World::new(&Scenario::parse(text).unwrap()).unwrap()
    }

    fn down(steps: i64) -> ActuatorCommand {
        ActuatorCommand { step_y: -steps, ..Default::default() }
    }

    #[test]
    fn starts_top_right() {
        let w = world(SMALL);
        assert!((w.rig_x() - 95.0).abs() <= w.per_step() / 2.0);
        assert!((w.rig_y() - 100.0).abs() <= w.per_step());
        assert!(w.rig_y() <= 100.0);
        assert_eq!(w.clock_ms(), 0);
        assert_eq!(w.wall().total_coats(), 0);
        assert!(w.obstacles().is_empty());
    }

    #[test]
    fn same_scenario_same_world() {
        assert_eq!(world(SMALL), world(SMALL));
        let mut a = world(SMALL);
        let mut b = world(SMALL);
        for _ in 0..100 {
            assert_eq!(a.step(&down(5), 10).unwrap(), b.step(&down(5), 10).unwrap());
        }
    }

    #[test]
    fn steps_move_by_distance_per_step() {
        let mut w = world(SMALL);
        let y0 = w.rig_y();
        w.step(&down(25), 10).unwrap();
        w.step(&down(25), 10).unwrap();
        assert!((y0 - w.rig_y() - 50.0 * w.per_step()).abs() < 1e-9);
        assert!((y0 - w.rig_y() - 0.5).abs() < 1e-5);
        assert_eq!(w.wall().total_coats(), 0);
        assert_eq!(w.clock_ms(), 20);
    }

    #[test]
    fn bottom_limit_clamps() {
        let text = SMALL.replace("distance_cm = 100", "distance_cm = 100\nnozzle_reach_mm = 1");
        let mut w = world(&text);
        let mut last = None;
        for _ in 0..5 {
            last = Some(w.step(&down(32), 10).unwrap().reading);
        }
        let r = last.unwrap();
        assert!(r.limit_bottom);
        assert!(!r.limit_top);
        assert!((w.rig_y() - 99.0).abs() <= w.per_step());
    }

    #[test]
    fn over_cap_command_faults() {
        let mut w = world(SMALL);
        let y0 = w.rig_steps().1;
        let out = w.step(&down(33), 10).unwrap();
        assert!(out.reading.fault);
        assert_eq!(w.rig_steps().1, y0 - 32);
        assert!(!w.step(&down(32), 10).unwrap().reading.fault);
    }

    #[test]
    fn timestep_must_match() {
        let mut w = world(SMALL);
        assert!(matches!(w.step(&down(1), 20), Err(WorldError::Timestep { .. })));
    }

    #[test]
    fn spraying_descent_deposits_swept_band() {
        let mut w = world(SMALL);
        let act = ActuatorCommand {
            step_y: -32,
            servo_angle: SERVO_SPRAY_DEG,
            ..Default::default()
        };
        let mut total = 0;
        for _ in 0..500 {
            total += w.step(&act, 10).unwrap().deposited;
        }
        assert_eq!(total as u64, w.wall().total_coats());
        // 160 mm of travel clipped at the bottom: the whole column, once.
        assert_eq!(w.wall().total_coats(), 1000);
        assert_eq!(w.wall().coats().iter().copied().max(), Some(1));
    }

    #[test]
    fn noise_bounds() {
        let mut w = world(SMALL);
        for _ in 0..10_000 {
            let r = w.read_ultrasonic();
            assert!((98.0..=102.0).contains(&r), "{r}");
        }
        let mut quiet = world(&SMALL.replace("seed = 9", "seed = 9\nnoise_cm = 0\nmargin_cm = 5"));
        assert_eq!(quiet.read_ultrasonic(), 100.0);
        let mut near = world(&SMALL.replace("distance_cm = 100", "distance_cm = 75").replace("seed = 9", "seed = 9\nnoise_cm = 0"));
        assert_eq!(near.read_ultrasonic(), 75.0);
    }

    #[test]
    fn obstacle_changes_reading() {
        let mut w = world(SMALL);
        let before = w.true_range_cm();
        // Away from the rig's column.
        w.inject_obstacle(Obstacle { x_mm: 10.0, y_mm: 90.0, width_mm: 20.0, height_mm: 10.0, depth_cm: 40.0 })
            .unwrap();
        assert_eq!(w.true_range_cm(), before);
        w.inject_obstacle(Obstacle { x_mm: 85.0, y_mm: 95.0, width_mm: 15.0, height_mm: 5.0, depth_cm: 40.0 })
            .unwrap();
        assert_eq!(w.true_range_cm(), 60.0);
        for _ in 0..1000 {
            let r = w.read_ultrasonic();
            assert!((58.0..=62.0).contains(&r), "{r}");
        }
        w.inject_obstacle(Obstacle { x_mm: 90.0, y_mm: 92.0, width_mm: 5.0, height_mm: 3.0, depth_cm: 70.0 })
            .unwrap();
        assert_eq!(w.true_range_cm(), 30.0);
        assert!(w
            .inject_obstacle(Obstacle { x_mm: 95.0, y_mm: 0.0, width_mm: 10.0, height_mm: 3.0, depth_cm: 10.0 })
            .is_err());
    }

    #[test]
    fn shift_motor_swaps_wall() {
        let mut w = world(SMALL);
        let spray = ActuatorCommand { step_y: -32, servo_angle: SERVO_SPRAY_DEG, ..Default::default() };
        for _ in 0..10 {
            w.step(&spray, 10).unwrap();
        }
        assert!(w.wall().total_coats() > 0);
        let shift = ActuatorCommand { shift_motor_on: true, ..Default::default() };
        w.step(&shift, 10).unwrap();
        w.step(&shift, 10).unwrap();
        assert_eq!(w.finished_walls().len(), 1);
        assert!(w.finished_walls()[0].total_coats() > 0);
        assert_eq!(w.wall().total_coats(), 0);
    }
}
