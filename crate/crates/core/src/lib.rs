//! Controller, simulator and operator-link codec for a rope-suspended
//! facade painting rig.

pub mod controller;
pub mod coverage;
pub mod fixtures;
pub mod kinematics;
pub mod mission;
pub mod protocol;
pub mod scenario;
pub mod simworld;
