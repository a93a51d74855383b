//! Stepper motion math.
//!
//! Full steps per revolution come from the step angle, the driver's
//! microstepping multiplies them, and the rope pulley turns a revolution
//! into linear travel. Everything downstream (controller step budgets,
//! simulated rig displacement) goes through these functions so both sides
//! quantize identically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MotorError {
    #[error("step angle must be in (0, 360] degrees, got {0}")]
    StepAngleRange(f64),
    #[error("360 / step angle must be a whole number of steps, got {0}")]
    StepAngleNotDivisor(f64),
    #[error("microstep factor must be at least 1")]
    Microstep,
    #[error("pulley diameter must be positive, got {0} mm")]
    PulleyDiameter(f64),
    #[error("speed must be positive, got {0} rpm")]
    Speed(f64),
}

/// Geometry of one axis drive: step angle (degrees), microstepping,
/// pulley diameter (mm) and speed (rpm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorSpec {
    pub step_angle: f64,
    pub microstep_factor: u32,
    pub pulley_diameter: f64,
    pub speed: f64,
}

impl Default for MotorSpec {
    /// 1.8° steppers at ×16 on a 10.186 mm pulley, 60 rpm: 0.01 mm per step.
    fn default() -> Self {
        Self {
            step_angle: 1.8,
            microstep_factor: 16,
            pulley_diameter: 10.186,
            speed: 60.0,
        }
    }
}

// Tolerance for deciding that 360 / step_angle is a whole number. Step angles
// are decimal literals (1.8, 0.9, 7.5) and never exactly representable.
const WHOLE_STEP_EPS: f64 = 1e-9;

impl MotorSpec {
    pub fn validate(&self) -> Result<(), MotorError> {
        if !(self.step_angle > 0.0 && self.step_angle <= 360.0) {
            return Err(MotorError::StepAngleRange(self.step_angle));
        }
        let full = 360.0 / self.step_angle;
        if (full - full.round()).abs() > WHOLE_STEP_EPS * full.max(1.0) {
            return Err(MotorError::StepAngleNotDivisor(self.step_angle));
        }
        if self.microstep_factor < 1 {
            return Err(MotorError::Microstep);
        }
        if !(self.pulley_diameter > 0.0 && self.pulley_diameter.is_finite()) {
            return Err(MotorError::PulleyDiameter(self.pulley_diameter));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(MotorError::Speed(self.speed));
        }
        Ok(())
    }

    fn full_steps(&self) -> u64 {
        (360.0 / self.step_angle).round() as u64
    }

    /// Largest step count a single axis may be commanded in `dt_ms`.
    pub fn max_steps_per_tick(&self, dt_ms: u32) -> Result<u64, MotorError> {
        let spr = steps_per_revolution(self)? as f64;
        Ok((self.speed * spr * f64::from(dt_ms) / 60_000.0).floor() as u64)
    }
}

/// Microsteps per shaft revolution.
pub fn steps_per_revolution(spec: &MotorSpec) -> Result<u64, MotorError> {
    spec.validate()?;
    Ok(spec.full_steps() * u64::from(spec.microstep_factor))
}

/// Linear rope travel per microstep, in mm.
pub fn distance_per_step(spec: &MotorSpec) -> Result<f64, MotorError> {
    let spr = steps_per_revolution(spec)?;
    Ok(std::f64::consts::PI * spec.pulley_diameter / spr as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }
}

/// Quantized realization of a requested travel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub steps: u64,
    pub direction: Direction,
    /// Signed travel the steps actually produce, mm.
    pub achievable: f64,
    /// requested − achievable, mm.
    pub residual: f64,
}

impl StepPlan {
    pub fn signed_steps(&self) -> i64 {
        match self.direction {
            Direction::Positive => self.steps as i64,
            Direction::Negative => -(self.steps as i64),
        }
    }
}

/// Step count for a signed travel at a given per-step distance, rounded to
/// nearest with ties away from zero.
pub fn steps_for_distance_at(distance: f64, per_step: f64) -> StepPlan {
    let direction = if distance < 0.0 {
        Direction::Negative
    } else {
        Direction::Positive
    };
    let steps = if per_step > 0.0 {
        // f64::round is half-away-from-zero.
        (distance.abs() / per_step).round() as u64
    } else {
        0
    };
    let achievable = steps as f64 * per_step * direction.sign();
    StepPlan {
        steps,
        direction,
        achievable,
        residual: distance - achievable,
    }
}

pub fn steps_for_distance(distance: f64, spec: &MotorSpec) -> Result<StepPlan, MotorError> {
    Ok(steps_for_distance_at(distance, distance_per_step(spec)?))
}

/// Absolute positioning error, mm.
pub fn position_error(expected: f64, actual: f64) -> f64 {
    (expected - actual).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(step_angle: f64, micro: u32, d: f64) -> MotorSpec {
        MotorSpec {
            step_angle,
            microstep_factor: micro,
            pulley_diameter: d,
            speed: 60.0,
        }
    }

    #[test]
    fn steps_per_revolution_examples() {
        assert_eq!(steps_per_revolution(&spec(1.8, 1, 10.0)).unwrap(), 200);
        assert_eq!(steps_per_revolution(&spec(90.0, 1, 10.0)).unwrap(), 4);
        assert_eq!(steps_per_revolution(&spec(1.8, 16, 10.0)).unwrap(), 3200);
        assert_eq!(steps_per_revolution(&spec(360.0, 1, 10.0)).unwrap(), 1);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert_eq!(
            steps_per_revolution(&spec(7.0, 1, 10.0)),
            Err(MotorError::StepAngleNotDivisor(7.0))
        );
        assert!(matches!(
            steps_per_revolution(&spec(0.0, 1, 10.0)),
            Err(MotorError::StepAngleRange(_))
        ));
        assert!(matches!(
            steps_per_revolution(&spec(400.0, 1, 10.0)),
            Err(MotorError::StepAngleRange(_))
        ));
        assert_eq!(
            steps_per_revolution(&spec(1.8, 0, 10.0)),
            Err(MotorError::Microstep)
        );
        assert!(matches!(
            distance_per_step(&spec(1.8, 1, -1.0)),
            Err(MotorError::PulleyDiameter(_))
        ));
        let mut s = MotorSpec::default();
        s.speed = 0.0;
        assert!(matches!(s.validate(), Err(MotorError::Speed(_))));
    }

    #[test]
    fn distance_per_step_examples() {
        let d = distance_per_step(&MotorSpec::default()).unwrap();
        assert!((d - 0.01).abs() <= 1e-4, "{d}");
        let d = distance_per_step(&spec(1.8, 1, 10.186)).unwrap();
        assert!((d - 0.16).abs() <= 1e-3, "{d}");
        let d = distance_per_step(&spec(1.8, 1, 1e-12)).unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn steps_for_distance_examples() {
        let p = steps_for_distance_at(0.5, 0.01);
        assert_eq!(p.steps, 50);
        assert!(p.residual.abs() < 1e-12);

        let p = steps_for_distance_at(0.0, 0.01);
        assert_eq!(p.steps, 0);
        assert_eq!(p.residual, 0.0);

        let p = steps_for_distance_at(0.004, 0.01);
        assert_eq!(p.steps, 0);
        assert!((p.residual - 0.004).abs() < 1e-15);

        let p = steps_for_distance_at(-0.5, 0.01);
        assert_eq!(p.signed_steps(), -50);
        assert!((p.achievable + 0.5).abs() < 1e-12);
    }

    #[test]
    fn ties_round_away_from_zero() {
        // 0.25 / 0.5 = 0.5 exactly in binary.
        assert_eq!(steps_for_distance_at(0.25, 0.5).steps, 1);
        assert_eq!(steps_for_distance_at(-0.25, 0.5).signed_steps(), -1);
    }

    #[test]
    fn position_error_examples() {
        assert!((position_error(100.0, 99.5) - 0.5).abs() < 1e-12);
        assert_eq!(position_error(3.25, 3.25), 0.0);
        assert_eq!(position_error(-3.0, 4.0), 7.0);
    }

    #[test]
    fn max_steps_per_tick_from_rpm() {
        // 60 rpm × 3200 steps/rev = 3200 steps/s → 32 per 10 ms.
        assert_eq!(MotorSpec::default().max_steps_per_tick(10).unwrap(), 32);
    }

    fn valid_angle() -> impl Strategy<Value = f64> {
        prop::sample::select(vec![0.9, 1.8, 3.6, 7.5, 15.0, 18.0, 45.0, 90.0, 180.0])
    }

    proptest! {
        #[test]
        fn spr_times_angle_is_full_turn(angle in valid_angle(), micro in 1u32..=256) {
            let s = spec(angle, micro, 10.0);
            let spr = steps_per_revolution(&s).unwrap();
            let turn = spr as f64 * angle / f64::from(micro);
            prop_assert!((turn - 360.0).abs() < 1e-9);
        }

        #[test]
        fn quantization_bound(d in -1000.0f64..1000.0) {
            let per = distance_per_step(&MotorSpec::default()).unwrap();
            let p = steps_for_distance_at(d, per);
            prop_assert!((p.achievable - d).abs() <= per / 2.0 + 1e-12);
            prop_assert!((p.residual - (d - p.achievable)).abs() < 1e-12);
        }

        #[test]
        fn error_is_a_metric(a in -1e4f64..1e4, b in -1e4f64..1e4) {
            prop_assert_eq!(position_error(a, b), position_error(b, a));
            prop_assert!(position_error(a, b) >= 0.0);
            prop_assert_eq!(position_error(a, b) == 0.0, a == b);
        }

        #[test]
        fn monotone_in_geometry(d in 1.0f64..100.0, bump in 0.01f64..10.0, micro in 1u32..64) {
            let small = distance_per_step(&spec(1.8, micro, d)).unwrap();
            let large = distance_per_step(&spec(1.8, micro, d + bump)).unwrap();
            prop_assert!(large > small);
            let finer = distance_per_step(&spec(1.8, micro + 1, d)).unwrap();
            prop_assert!(finer < small);
        }
    }
}
