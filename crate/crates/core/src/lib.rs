//! Belief-space navigation testbed: a 2D world simulator, pose-graph SLAM
//! with sonar-style point scans, occupancy and uncertainty (virtual) maps,
//! and receding-horizon planners that trade goal progress against
//! localization uncertainty.

pub mod em;
pub mod error;
pub mod harness;
pub mod maps;
pub mod planner;
pub mod plots;
pub mod scenario;
pub mod se2;
pub mod slam;
pub mod world;

pub use error::{Error, Result};
