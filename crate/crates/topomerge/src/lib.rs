//! Structure-free topometric mapping engine.
//!
//! The crate implements the full collaborative mapping pipeline on top of a
//! three-layer topometric map (covisibility, odometry factors,
//! traversability): sequence-based place matching, geometric verification,
//! confidence-calibrated metric alignment, robust pose-graph optimization,
//! probabilistic node culling, and shortest-path planning. All perception
//! frontends are pluggable; [`synthworld`] provides oracle implementations
//! backed by a generated ground-truth world so every stage can be verified
//! end to end.

pub mod providers;
pub mod se3;
pub mod topomap;

pub use se3::{Covariance6, Pose, Twist};
pub use topomap::{NodeId, TopometricMap};
