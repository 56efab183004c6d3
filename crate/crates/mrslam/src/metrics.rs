//! Inter-robot trajectory error and channel statistics.

use std::collections::BTreeSet;

use mrslam_core::comms::Utilization;
use mrslam_core::graph::FactorKind;
use mrslam_core::math::wrap_angle;
use mrslam_core::{Key, Pose2};
use serde::Serialize;

use crate::node::RobotNode;

/// MAE and RMSE of position (m) and heading (deg) over a set of poses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorBlock {
    pub count: usize,
    pub mae_dist: f64,
    pub rmse_dist: f64,
    pub mae_theta_deg: f64,
    pub rmse_theta_deg: f64,
}

impl ErrorBlock {
    /// `NaN` statistics for an empty sample.
    pub fn from_errors(errors: &[(f64, f64)]) -> ErrorBlock {
        let n = errors.len();
        if n == 0 {
            return ErrorBlock {
                count: 0,
                mae_dist: f64::NAN,
                rmse_dist: f64::NAN,
                mae_theta_deg: f64::NAN,
                rmse_theta_deg: f64::NAN,
            };
        }
        let nf = n as f64;
        let (mut ad, mut sd, mut at, mut st) = (0.0, 0.0, 0.0, 0.0);
        for &(d, t) in errors {
            ad += d.abs();
            sd += d * d;
            at += t.abs();
            st += t * t;
        }
        ErrorBlock {
            count: n,
            mae_dist: ad / nf,
            rmse_dist: (sd / nf).sqrt(),
            mae_theta_deg: at / nf,
            rmse_theta_deg: (st / nf).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub full: ErrorBlock,
    pub ir: ErrorBlock,
    pub network_avg: f64,
    pub network_min: f64,
    pub network_max: f64,
    pub total_bits: u64,
    pub cloud_bits: u64,
    /// Accepted inter-robot loops summed over all robots' graphs.
    pub ir_loops: usize,
    pub success: bool,
}

/// Error of `estimate` against `truth`: (translation m, heading deg).
pub fn pose_error(estimate: &Pose2, truth: &Pose2) -> (f64, f64) {
    let d = (estimate.x - truth.x).hypot(estimate.y - truth.y);
    let t = wrap_angle(estimate.theta - truth.theta).to_degrees();
    (d, t)
}

/// Compares every robot's estimates of its partners against ground truth
/// expressed in that robot's true starting frame.
///
/// `truth[r][k]` is the true pose of robot `r` at keyframe `k`.
pub fn evaluate(nodes: &[RobotNode], truth: &[Vec<Pose2>], util: &Utilization, cloud_bits: u64) -> MetricsReport {
    let mut full = Vec::new();
    let mut ir = Vec::new();
    let mut ir_loops = 0;
    for node in nodes {
        let o = node.id as usize;
        let Some(origin) = truth[o].first() else { continue };
        let to_frame = origin.inverse();
        let ir_keys: BTreeSet<Key> = node
            .graph
            .factors_of(FactorKind::InterRobot)
            .flat_map(|f| [Some(f.a), f.b])
            .flatten()
            .filter(|k| k.robot != node.id)
            .collect();
        ir_loops += node.graph.factors_of(FactorKind::InterRobot).count();
        for (k, est) in node.estimates() {
            if k.robot == node.id {
                continue;
            }
            let Some(t) = truth.get(k.robot as usize).and_then(|tr| tr.get(k.frame as usize)) else { continue };
            let e = pose_error(est, &to_frame.compose(t));
            full.push(e);
            if ir_keys.contains(k) {
                ir.push(e);
            }
        }
    }
    MetricsReport {
        full: ErrorBlock::from_errors(&full),
        ir: ErrorBlock::from_errors(&ir),
        network_avg: util.average,
        network_min: util.min,
        network_max: util.max,
        total_bits: util.total_bits,
        cloud_bits,
        ir_loops,
        success: ir_loops > 0,
    }
}
