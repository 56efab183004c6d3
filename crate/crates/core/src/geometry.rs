//! SE(2) pose algebra, sonar projection and planar point clouds.

use alloc::vec::Vec;
use core::fmt;

use crate::linalg::{Mat3, Vec3};
use crate::math::{cos, hypot, sin, sin_cos, wrap_angle};

pub type RobotId = u8;
pub type KeyframeId = u16;

/// A keyframe of a specific robot; the node identity of every pose graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key {
    pub robot: RobotId,
    pub frame: KeyframeId,
}

impl Key {
    pub const fn new(robot: RobotId, frame: KeyframeId) -> Key {
        Key { robot, frame }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}:{}", self.robot, self.frame)
    }
}

/// Planar pose (x, y in meters, theta in radians wrapped to `[-pi, pi)`).
///
/// Also used for relative transforms: `a.compose(&b)` applies `b` expressed
/// in the frame of `a`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Pose2 {
        Pose2 {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn from_vector(v: Vec3) -> Pose2 {
        Pose2::new(v[0], v[1], v[2])
    }

    /// Chart coordinates `(x, y, theta)`; the residual space of every factor.
    pub fn to_vector(&self) -> Vec3 {
        [self.x, self.y, self.theta]
    }

    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = sin_cos(self.theta);
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = sin_cos(self.theta);
        Pose2::new(
            -c * self.x - s * self.y,
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: Point2) -> Point2 {
        let (s, c) = sin_cos(self.theta);
        Point2 {
            x: self.x + c * p.x - s * p.y,
            y: self.y + s * p.x + c * p.y,
        }
    }

    pub fn translation_norm(&self) -> f64 {
        hypot(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// Jacobians of `a.compose(b)` with respect to `a` and `b` in chart coordinates.
    pub fn compose_jacobians(a: &Pose2, b: &Pose2) -> (Mat3, Mat3) {
        let (s, c) = sin_cos(a.theta);
        let ja = Mat3([
            [1.0, 0.0, -s * b.x - c * b.y],
            [0.0, 1.0, c * b.x - s * b.y],
            [0.0, 0.0, 1.0],
        ]);
        let jb = Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]);
        (ja, jb)
    }

    /// Jacobian of `p.inverse()` with respect to `p`.
    pub fn inverse_jacobian(p: &Pose2) -> Mat3 {
        let (s, c) = sin_cos(p.theta);
        Mat3([
            [-c, -s, s * p.x - c * p.y],
            [s, -c, c * p.x + s * p.y],
            [0.0, 0.0, -1.0],
        ])
    }
}

impl fmt::Display for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.4}, {:.4}, {:.4})", self.x, self.y, self.theta)
    }
}

/// A single sonar return in spherical sensor coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SonarReturn {
    pub range: f64,
    pub bearing: f64,
    pub elevation: f64,
    pub intensity: f64,
}

impl SonarReturn {
    /// In-plane return; the sensor reports no elevation.
    pub fn planar(range: f64, bearing: f64, intensity: f64) -> SonarReturn {
        SonarReturn {
            range,
            bearing: wrap_angle(bearing),
            elevation: 0.0,
            intensity,
        }
    }
}

/// Spherical to Cartesian sensor coordinates.
pub fn polar_to_cartesian(ret: &SonarReturn) -> [f64; 3] {
    let r = ret.range;
    let (sp, cp) = sin_cos(ret.elevation);
    let horizontal = r * cp;
    [horizontal * cos(ret.bearing), horizontal * sin(ret.bearing), r * sp]
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Point2 {
        Point2 { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        hypot(self.x - other.x, self.y - other.y)
    }

    pub fn distance_sq(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn norm(&self) -> f64 {
        hypot(self.x, self.y)
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Sonar contacts in meters, expressed in the sensor frame of keyframe `frame`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud2D {
    pub points: Vec<Point2>,
    pub frame: KeyframeId,
}

impl PointCloud2D {
    pub fn new(points: Vec<Point2>, frame: KeyframeId) -> PointCloud2D {
        PointCloud2D { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point2> {
        if self.points.is_empty() {
            return None;
        }
        let n = self.points.len() as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Some(Point2::new(sx / n, sy / n))
    }
}

/// Applies `pose` to every point, keeping order and the frame tag.
pub fn transform_cloud(pose: &Pose2, cloud: &PointCloud2D) -> PointCloud2D {
    PointCloud2D {
        points: cloud.points.iter().map(|p| pose.transform_point(*p)).collect(),
        frame: cloud.frame,
    }
}
