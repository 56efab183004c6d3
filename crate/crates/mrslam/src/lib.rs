//! Simulation, mission orchestration and result files for multi-robot sonar
//! SLAM built on `mrslam-core`.

pub mod config;
pub mod io;
pub mod merge;
pub mod metrics;
pub mod mission;
pub mod motion;
pub mod node;
pub mod sonar;
pub mod world;

pub use config::{MissionConfig, Scenario};
pub use mission::{run_mission, MissionResult};
