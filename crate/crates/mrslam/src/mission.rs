//! Mission orchestration: world, motion, round-robin node ticks, metrics.

use std::collections::BTreeMap;

use mrslam_core::comms::{utilization, Channel, LogEvent, Metering, Utilization};
use mrslam_core::{Key, PointCloud2D, Pose2, RobotId};

use crate::config::{ConfigError, MeteringMode, MissionConfig};
use crate::merge::{merge_maps, MapPoint};
use crate::metrics::{evaluate, MetricsReport};
use crate::motion::{step_robot, Controller, MotionNoise, RobotState};
use crate::node::{NodeParams, RobotNode};
use crate::sonar::{mix_seed, simulate_scan};
use crate::world::{build_scenario, Route, World};

pub struct MissionResult {
    pub config: MissionConfig,
    pub world: World,
    pub routes: Vec<Route>,
    pub nodes: Vec<RobotNode>,
    /// True pose of every keyframe, per robot.
    pub truth: Vec<Vec<Pose2>>,
    pub log: Vec<LogEvent>,
    pub utilization: Utilization,
    pub metrics: MetricsReport,
    pub duration: f64,
}

impl MissionResult {
    /// Map as seen by `robot`: every keyframe cloud it has a pose for.
    pub fn merged_map(&self, robot: RobotId) -> Vec<MapPoint> {
        let clouds: BTreeMap<Key, &PointCloud2D> = self
            .nodes
            .iter()
            .flat_map(|n| n.keyframes.iter().map(move |k| (Key::new(n.id, k.id), &k.cloud)))
            .collect();
        merge_maps(self.nodes[robot as usize].estimates(), &clouds)
    }
}

pub fn run_mission(cfg: &MissionConfig) -> Result<MissionResult, ConfigError> {
    cfg.validate()?;
    let (world, routes) = build_scenario(cfg.scenario, cfg.seed, cfg.robots);
    let params = NodeParams::from_config(cfg);
    let m = &cfg.motion;
    let noise = MotionNoise::new(m.sigma_x, m.sigma_y, m.sigma_theta_deg.to_radians());
    let metering = match cfg.comms.metering {
        MeteringMode::Once => Metering::Once,
        MeteringMode::PerRecipient => Metering::PerRecipient,
    };
    let mut channel = Channel::new(cfg.robots, metering);

    let mut nodes: Vec<RobotNode> = (0..cfg.robots).map(|r| RobotNode::new(r as RobotId, params.clone())).collect();
    let mut controllers: Vec<Controller> = routes
        .iter()
        .map(|r| Controller::new(r.clone(), m.speed, m.max_turn_deg.to_radians()))
        .collect();
    let mut states: Vec<RobotState> = routes
        .iter()
        .map(|r| RobotState {
            truth: r.start,
            dead_reckoning: r.start,
        })
        .collect();
    let mut rngs: Vec<rand_chacha::ChaCha8Rng> = (0..cfg.robots)
        .map(|r| rand::SeedableRng::seed_from_u64(mix_seed(&[cfg.seed, r as u64, 0x6d6f74])))
        .collect();
    let mut truth: Vec<Vec<Pose2>> = vec![Vec::new(); cfg.robots];
    let mut scans = vec![0u64; cfg.robots];

    for step in 0..m.max_steps {
        let t = step as f64 * m.dt;
        for r in 0..cfg.robots {
            if step > 0 {
                let u = controllers[r].control(&states[r].truth);
                states[r] = step_robot(&states[r], &u, &noise, &mut rngs[r]);
            }
            let state = states[r];
            // each robot's map frame is its own start pose
            let dr = routes[r].start.between(&state.dead_reckoning);
            let mut scan = || {
                let img = simulate_scan(&world, &state.truth, &cfg.sonar, r as u8, scans[r]);
                scans[r] += 1;
                img
            };
            if nodes[r].tick(t, step > 0, dr, &mut scan, &mut channel).is_some() {
                truth[r].push(state.truth);
            }
        }
    }

    let duration = m.max_steps as f64 * m.dt;
    let log = channel.log().to_vec();
    let util = utilization(&log, cfg.comms.utilization_window, duration);
    let cloud_bits = log.iter().filter(|e| e.kind.is_cloud()).map(|e| e.size_bits).sum();
    let metrics = evaluate(&nodes, &truth, &util, cloud_bits);
    Ok(MissionResult {
        config: cfg.clone(),
        world,
        routes,
        nodes,
        truth,
        log,
        utilization: util,
        metrics,
        duration,
    })
}
