//! Mission configuration. Every field has a default, so a TOML file only
//! needs the keys it changes.

use std::path::Path;

use mrslam_core::frontend::CfarParams;
use mrslam_core::graph::KeyframePolicy;
use mrslam_core::registration::{GlobalParams, IcpParams};
use mrslam_core::robust::{GateConfig, CHI2_3DOF_99};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("case must be in 1..=5, got {0}")]
    Case(u8),
    #[error("need at least 2 robots, got {0}")]
    Robots(usize),
    #[error("invalid value for {0}")]
    Invalid(&'static str),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Neighboring square loops driven in opposite senses that share one edge.
    #[default]
    Crossing,
    /// Robots in far-apart regions with very different clutter.
    Disjoint,
    /// Shared start area, long featureless excursions, noisier odometry.
    DriftHeavy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeteringMode {
    #[default]
    Once,
    PerRecipient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Forward distance per step, meters.
    pub speed: f64,
    pub max_turn_deg: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_theta_deg: f64,
    /// Lower bounds on the odometry std devs the estimator assumes, so a
    /// noiseless run still has finite information.
    pub floor_sigma_xy: f64,
    pub floor_sigma_theta_deg: f64,
    /// Seconds per step.
    pub dt: f64,
    /// Hard cap on steps per robot.
    pub max_steps: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            speed: 1.0,
            max_turn_deg: 30.0,
            sigma_x: 0.05,
            sigma_y: 0.05,
            sigma_theta_deg: 1.0,
            floor_sigma_xy: 0.01,
            floor_sigma_theta_deg: 0.2,
            dt: 1.0,
            max_steps: 215,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SonarConfig {
    pub max_range: f64,
    pub fov_deg: f64,
    pub beams: usize,
    pub range_bins: usize,
    /// Rayleigh scale of the background.
    pub background: f64,
    /// Return amplitude of a reflectivity-1 target.
    pub gain: f64,
    /// Std dev of the multiplicative Gaussian speckle on returns.
    pub speckle: f64,
}

impl Default for SonarConfig {
    fn default() -> Self {
        SonarConfig {
            max_range: 30.0,
            fov_deg: 130.0,
            beams: 256,
            range_bins: 300,
            background: 1.0,
            gain: 30.0,
            speckle: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub train_cells: usize,
    pub guard_cells: usize,
    pub pfa: f64,
    pub voxel: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        let c = CfarParams::default();
        FrontendConfig {
            train_cells: c.train_cells,
            guard_cells: c.guard_cells,
            pfa: c.pfa,
            voxel: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaceConfig {
    /// Largest descriptor distance (count space) that still counts as a hit.
    pub max_dist: f64,
    pub neighbors: usize,
    pub scene_cell: f64,
}

impl Default for PlaceConfig {
    fn default() -> Self {
        PlaceConfig {
            max_dist: 40.0,
            neighbors: 3,
            scene_cell: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSettings {
    pub min_points: usize,
    pub max_ratio: f64,
    pub max_sad: f64,
    pub min_overlap: f64,
    pub pcm_threshold: f64,
}

impl Default for GateSettings {
    fn default() -> Self {
        let g = GateConfig::default();
        GateSettings {
            min_points: g.min_points,
            max_ratio: g.max_ratio,
            max_sad: g.max_sad,
            min_overlap: g.min_overlap,
            pcm_threshold: CHI2_3DOF_99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub icp_iterations: usize,
    pub match_radius: f64,
    pub tolerance: f64,
    pub rotations: usize,
    pub trim_fraction: f64,
    pub coarse_iterations: usize,
    pub hypotheses: usize,
    /// Second ICP pass gate; set >= match_radius to disable.
    pub fine_match_radius: f64,
    pub overlap_radius: f64,
    /// Scan-matching factor std dev per meter of ICP RMSE.
    pub sigma_per_rmse: f64,
    pub min_sigma_xy: f64,
    pub min_sigma_theta_deg: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        let icp = IcpParams::default();
        let g = GlobalParams::default();
        RegistrationConfig {
            icp_iterations: icp.max_iterations,
            match_radius: icp.match_radius,
            tolerance: icp.tolerance,
            rotations: g.rotations,
            trim_fraction: g.trim_fraction,
            coarse_iterations: g.coarse_iterations,
            hypotheses: g.hypotheses,
            fine_match_radius: 0.75,
            overlap_radius: 0.5,
            sigma_per_rmse: 0.25,
            min_sigma_xy: 0.05,
            min_sigma_theta_deg: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Minimum keyframe gap for an intra-robot loop.
    pub nssm_min_gap: usize,
    pub nssm_radius: f64,
    pub nssm_max_candidates: usize,
    /// Std devs of one partner keyframe-to-keyframe step.
    pub partner_sigma_xy: f64,
    pub partner_sigma_theta_deg: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            nssm_min_gap: 10,
            nssm_radius: 10.0,
            nssm_max_candidates: 3,
            partner_sigma_xy: 0.1,
            partner_sigma_theta_deg: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommsConfig {
    pub compression_resolution: f64,
    pub update_translation: f64,
    pub update_rotation_deg: f64,
    pub metering: MeteringMode,
    pub utilization_window: usize,
}

impl Default for CommsConfig {
    fn default() -> Self {
        CommsConfig {
            compression_resolution: 0.25,
            update_translation: 0.5,
            update_rotation_deg: 5.0,
            metering: MeteringMode::Once,
            utilization_window: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissionConfig {
    pub seed: u64,
    /// Ablation case, 1 to 5.
    pub case: u8,
    pub robots: usize,
    pub scenario: Scenario,
    pub motion: MotionConfig,
    pub sonar: SonarConfig,
    pub frontend: FrontendConfig,
    pub keyframe_translation: f64,
    pub keyframe_rotation_deg: f64,
    pub place: PlaceConfig,
    pub gates: GateSettings,
    pub registration: RegistrationConfig,
    pub loops: LoopConfig,
    pub comms: CommsConfig,
}

impl Default for MissionConfig {
    fn default() -> Self {
        let kf = KeyframePolicy::default();
        MissionConfig {
            seed: 0,
            case: 4,
            robots: 2,
            scenario: Scenario::Crossing,
            motion: MotionConfig::default(),
            sonar: SonarConfig::default(),
            frontend: FrontendConfig::default(),
            keyframe_translation: kf.min_translation,
            keyframe_rotation_deg: kf.min_rotation.to_degrees(),
            place: PlaceConfig::default(),
            gates: GateSettings::default(),
            registration: RegistrationConfig::default(),
            loops: LoopConfig::default(),
            comms: CommsConfig::default(),
        }
    }
}

/// Feature switches implied by an ablation case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaseFlags {
    pub scene_image: bool,
    pub pcm: bool,
    pub compression: bool,
    pub resend: bool,
}

impl CaseFlags {
    pub fn for_case(case: u8) -> CaseFlags {
        CaseFlags {
            scene_image: case >= 2,
            pcm: case >= 3,
            compression: case == 4,
            resend: case != 5,
        }
    }
}

impl MissionConfig {
    /// Scenario defaults: the drift-heavy world comes with noisier odometry
    /// and longer routes.
    pub fn for_scenario(scenario: Scenario) -> MissionConfig {
        let mut c = MissionConfig {
            scenario,
            ..MissionConfig::default()
        };
        if scenario == Scenario::DriftHeavy {
            c.motion.sigma_x = 0.1;
            c.motion.sigma_y = 0.1;
            c.motion.sigma_theta_deg = 2.0;
            c.motion.max_steps = 330;
        }
        c
    }

    pub fn load(path: &Path) -> Result<MissionConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: MissionConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=5).contains(&self.case) {
            return Err(ConfigError::Case(self.case));
        }
        if self.robots < 2 {
            return Err(ConfigError::Robots(self.robots));
        }
        if self.robots > 255 {
            return Err(ConfigError::Invalid("robots"));
        }
        let m = &self.motion;
        if !(m.sigma_x >= 0.0 && m.sigma_y >= 0.0 && m.sigma_theta_deg >= 0.0) {
            return Err(ConfigError::Invalid("motion noise"));
        }
        if !(m.floor_sigma_xy > 0.0 && m.floor_sigma_theta_deg > 0.0) {
            return Err(ConfigError::Invalid("odometry floor"));
        }
        if !(m.speed > 0.0 && m.dt > 0.0) {
            return Err(ConfigError::Invalid("motion speed/dt"));
        }
        let s = &self.sonar;
        if !(s.max_range > 0.0 && s.fov_deg > 0.0 && s.fov_deg <= 360.0 && s.beams > 0 && s.range_bins > 0) {
            return Err(ConfigError::Invalid("sonar"));
        }
        if !(self.frontend.voxel > 0.0 && self.frontend.pfa > 0.0 && self.frontend.pfa < 1.0) {
            return Err(ConfigError::Invalid("frontend"));
        }
        if !(self.place.scene_cell > 0.0 && self.place.max_dist >= 0.0) {
            return Err(ConfigError::Invalid("place"));
        }
        let g = &self.gates;
        if !(g.max_ratio >= 1.0 && g.min_overlap > 0.0 && g.min_overlap <= 1.0 && g.pcm_threshold > 0.0) {
            return Err(ConfigError::Invalid("gates"));
        }
        if !(self.comms.compression_resolution > 0.0) {
            return Err(ConfigError::Invalid("compression_resolution"));
        }
        if !(self.registration.trim_fraction > 0.0 && self.registration.trim_fraction <= 1.0) {
            return Err(ConfigError::Invalid("trim_fraction"));
        }
        Ok(())
    }

    pub fn flags(&self) -> CaseFlags {
        CaseFlags::for_case(self.case)
    }

    pub fn gate_config(&self) -> GateConfig {
        let flags = self.flags();
        GateConfig {
            min_points: self.gates.min_points,
            max_ratio: self.gates.max_ratio,
            max_sad: self.gates.max_sad,
            min_overlap: self.gates.min_overlap,
            pcm_threshold: self.gates.pcm_threshold,
            use_scene_image: flags.scene_image,
            use_pcm: flags.pcm,
        }
    }

    pub fn cfar(&self) -> CfarParams {
        CfarParams {
            train_cells: self.frontend.train_cells,
            guard_cells: self.frontend.guard_cells,
            pfa: self.frontend.pfa,
        }
    }

    pub fn keyframe_policy(&self) -> KeyframePolicy {
        KeyframePolicy {
            min_translation: self.keyframe_translation,
            min_rotation: self.keyframe_rotation_deg.to_radians(),
        }
    }

    pub fn icp(&self) -> IcpParams {
        IcpParams {
            max_iterations: self.registration.icp_iterations,
            match_radius: self.registration.match_radius,
            tolerance: self.registration.tolerance,
        }
    }

    pub fn global(&self) -> GlobalParams {
        GlobalParams {
            rotations: self.registration.rotations,
            trim_fraction: self.registration.trim_fraction,
            coarse_iterations: self.registration.coarse_iterations,
            hypotheses: self.registration.hypotheses,
            min_points: GlobalParams::default().min_points,
            refine: self.icp(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = MissionConfig::for_scenario(Scenario::DriftHeavy);
        let back: MissionConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let partial: MissionConfig = toml::from_str("seed = 9\ncase = 3\n[motion]\nsigma_x = 0.0\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.motion.sigma_x, 0.0);
        assert_eq!(partial.motion.sigma_y, 0.05);
        assert!(toml::from_str::<MissionConfig>("bogus = 1").is_err());
    }

    #[test]
    fn validation_and_flags() {
        let mut c = MissionConfig::default();
        assert!(c.validate().is_ok());
        c.case = 6;
        assert!(matches!(c.validate(), Err(ConfigError::Case(6))));
        c.case = 1;
        c.robots = 1;
        assert!(matches!(c.validate(), Err(ConfigError::Robots(1))));
        assert_eq!(CaseFlags::for_case(1), CaseFlags { scene_image: false, pcm: false, compression: false, resend: true });
        assert_eq!(CaseFlags::for_case(4), CaseFlags { scene_image: true, pcm: true, compression: true, resend: true });
        assert_eq!(CaseFlags::for_case(5), CaseFlags { scene_image: true, pcm: true, compression: false, resend: false });
    }
}
