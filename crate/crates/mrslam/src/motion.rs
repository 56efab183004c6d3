//! Noisy planar motion and a waypoint-following controller.

use mrslam_core::{Point2, Pose2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::world::{bearing_to, Route};

/// Per-step zero-mean Gaussian noise on `(x, y, theta)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionNoise {
    pub sigma: [f64; 3],
}

impl MotionNoise {
    pub fn new(sigma_x: f64, sigma_y: f64, sigma_theta: f64) -> MotionNoise {
        assert!(sigma_x >= 0.0 && sigma_y >= 0.0 && sigma_theta >= 0.0, "noise std devs must be >= 0");
        MotionNoise {
            sigma: [sigma_x, sigma_y, sigma_theta],
        }
    }

    fn perturb(&self, u: &Pose2, rng: &mut ChaCha8Rng) -> Pose2 {
        let n: [f64; 3] = std::array::from_fn(|i| {
            if self.sigma[i] > 0.0 {
                Normal::new(0.0, self.sigma[i]).unwrap().sample(rng)
            } else {
                0.0
            }
        });
        Pose2::new(u.x + n[0], u.y + n[1], u.theta + n[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotState {
    pub truth: Pose2,
    pub dead_reckoning: Pose2,
}

/// Applies control `u` twice with independent noise draws: once to the true
/// pose, once to the dead-reckoning estimate.
pub fn step_robot(state: &RobotState, u: &Pose2, noise: &MotionNoise, rng: &mut ChaCha8Rng) -> RobotState {
    let truth = state.truth.compose(&noise.perturb(u, rng));
    let dead_reckoning = state.dead_reckoning.compose(&noise.perturb(u, rng));
    RobotState { truth, dead_reckoning }
}

/// Steers along a route, cycling through its waypoints forever.
#[derive(Clone, Debug)]
pub struct Controller {
    route: Route,
    next: usize,
    speed: f64,
    max_turn: f64,
}

impl Controller {
    pub fn new(route: Route, speed: f64, max_turn: f64) -> Controller {
        Controller {
            route,
            next: 0,
            speed,
            max_turn,
        }
    }

    /// Control for the next step given the current true pose.
    pub fn control(&mut self, pose: &Pose2) -> Pose2 {
        let n = self.route.waypoints.len();
        let mut target: Point2 = self.route.waypoints[self.next];
        if target.distance(&Point2::new(pose.x, pose.y)) < self.speed {
            self.next = (self.next + 1) % n;
            target = self.route.waypoints[self.next];
        }
        let err = bearing_to(pose, target);
        let turn = err.clamp(-self.max_turn, self.max_turn);
        let forward = if err.abs() > self.max_turn { 0.3 * self.speed } else { self.speed };
        Pose2::new(forward, 0.0, turn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn noiseless_dead_reckoning_tracks_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = MotionNoise::new(0.0, 0.0, 0.0);
        let mut s = RobotState { truth: Pose2::new(1.0, 2.0, 0.3), dead_reckoning: Pose2::new(1.0, 2.0, 0.3) };
        for k in 0..50 {
            s = step_robot(&s, &Pose2::new(1.0, 0.0, 0.05 * k as f64), &noise, &mut rng);
            assert_eq!(s.truth, s.dead_reckoning);
        }
        let still = step_robot(&s, &Pose2::IDENTITY, &noise, &mut rng);
        assert_eq!(still, s);
    }

    #[test]
    fn drift_grows() {
        let noise = MotionNoise::new(0.05, 0.05, 1f64.to_radians());
        let mut early = Vec::new();
        let mut late = Vec::new();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = RobotState { truth: Pose2::IDENTITY, dead_reckoning: Pose2::IDENTITY };
            for k in 0..100 {
                s = step_robot(&s, &Pose2::new(1.0, 0.0, 0.0), &noise, &mut rng);
                let e = s.truth.between(&s.dead_reckoning).translation_norm();
                if k == 0 {
                    early.push(e);
                }
            }
            late.push(s.truth.between(&s.dead_reckoning).translation_norm());
        }
        early.sort_by(f64::total_cmp);
        late.sort_by(f64::total_cmp);
        assert!(late[50] > early[50]);
    }

    #[test]
    fn controller_drives_a_square() {
        let route = Route {
            start: Pose2::new(0.0, 0.0, 0.0),
            waypoints: vec![Point2::new(10.0, 0.0), Point2::new(10.0, 10.0), Point2::new(0.0, 10.0), Point2::new(0.0, 0.0)],
        };
        let mut c = Controller::new(route, 1.0, 30f64.to_radians());
        let mut p = Pose2::new(0.0, 0.0, 0.0);
        let mut max_dist: f64 = 0.0;
        for _ in 0..44 {
            p = p.compose(&c.control(&p));
            max_dist = max_dist.max((p.x - 5.0).abs().max((p.y - 5.0).abs()));
        }
        assert!(max_dist < 6.5);
        assert!(p.x.hypot(p.y) < 3.0, "{p:?}");
    }
}
