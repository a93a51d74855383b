//! Operational surface of the painting rig simulator: the operator bridge.
//! The `paintrig` binary wraps this together with the batch runner and the
//! replay verifier from `paintrig-core`.

pub mod bridge;
