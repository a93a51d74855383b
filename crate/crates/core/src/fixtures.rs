//! Reference measurements from the physical prototype trials.

use crate::coverage::Quality;

/// One trial row: ultrasonic reading (cm), overlap ratio, stroke time (s)
/// and the paint quality judged for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityTrial {
    pub index: u32,
    pub sensor_cm: f64,
    pub overlap_ratio: f64,
    pub stroke_time_s: f64,
    pub quality: Quality,
}

const fn trial(index: u32, sensor_cm: f64, overlap_ratio: f64, stroke_time_s: f64, quality: Quality) -> QualityTrial {
    QualityTrial {
        index,
        sensor_cm,
        overlap_ratio,
        stroke_time_s,
        quality,
    }
}

pub const QUALITY_TRIALS: [QualityTrial; 10] = [
    trial(1, 57.1, 0.2, 30.0, Quality::Medium),
    trial(2, 139.18, 0.25, 31.0, Quality::Medium),
    trial(3, 102.18, 0.3, 32.0, Quality::ModerateHigh),
    trial(4, 76.46, 0.32, 32.0, Quality::ModerateHigh),
    trial(5, 58.71, 0.35, 33.0, Quality::ModerateHigh),
    trial(6, 127.42, 0.4, 34.0, Quality::ModerateHigh),
    trial(7, 121.52, 0.45, 35.0, Quality::High),
    trial(8, 129.17, 0.45, 35.0, Quality::High),
    trial(9, 104.49, 0.5, 36.0, Quality::High),
    trial(10, 104.88, 0.55, 38.0, Quality::High),
];

/// Ultrasonic reading (cm) against the overlap ratio observed with it.
/// There is no model behind these pairs; they are kept as recorded.
pub const SENSOR_OVERLAP_PAIRS: [(f64, f64); 5] = [
    (51.88, 0.57),
    (86.37, 0.0),
    (147.86, 0.98),
    (96.15, 0.98),
    (110.28, 0.98),
];

/// Reported stroke width and spacing, mm.
pub const TRIAL_STROKE_WIDTH_MM: f64 = 10.0;
pub const TRIAL_STROKE_SPACING_MM: f64 = 5.5;

/// Reported evaluation figures.
pub const SENSOR_ERROR_MARGIN_CM: f64 = 2.0;
pub const MOVEMENT_PRECISION_MM: f64 = 0.5;
pub const OVERLAP_RATIO: f64 = 0.45;
pub const DISTANCE_PER_STEP_MM: f64 = 0.01;
pub const DEVIATION_MM: f64 = 2.24;
