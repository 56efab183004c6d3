//! Map merging: keyframe clouds placed by one robot's pose estimates.

use std::collections::BTreeMap;

use mrslam_core::{Key, PointCloud2D, Pose2, RobotId};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MapPoint {
    pub robot: RobotId,
    pub frame: u16,
    pub x: f64,
    pub y: f64,
}

/// Transforms each cloud with a pose estimate into the estimator's frame and
/// concatenates them. Keyframes without an estimate are skipped.
pub fn merge_maps(estimates: &BTreeMap<Key, Pose2>, clouds: &BTreeMap<Key, &PointCloud2D>) -> Vec<MapPoint> {
    let mut out = Vec::new();
    for (key, cloud) in clouds {
        let Some(pose) = estimates.get(key) else { continue };
        out.extend(cloud.points.iter().map(|p| {
            let q = pose.transform_point(*p);
            MapPoint {
                robot: key.robot,
                frame: key.frame,
                x: q.x,
                y: q.y,
            }
        }));
    }
    out
}
