//! Synthetic 2-D worlds made of wall segments and point scatterers, plus
//! the scripted scenarios used by the missions.

use mrslam_core::math::wrap_angle;
use mrslam_core::{Point2, Pose2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Scenario;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Feature {
    Wall { a: Point2, b: Point2, reflectivity: f64 },
    Scatterer { center: Point2, radius: f64, reflectivity: f64 },
}

impl Feature {
    pub fn reflectivity(&self) -> f64 {
        match self {
            Feature::Wall { reflectivity, .. } | Feature::Scatterer { reflectivity, .. } => *reflectivity,
        }
    }

    /// Distance along the ray `origin + t * dir` (unit `dir`) to the first
    /// hit, if any. Rays starting inside a scatterer ignore it.
    pub fn intersect(&self, origin: Point2, dir: (f64, f64)) -> Option<f64> {
        match *self {
            Feature::Wall { a, b, .. } => {
                let e = (b.x - a.x, b.y - a.y);
                let denom = dir.0 * e.1 - dir.1 * e.0;
                if denom.abs() < 1e-12 {
                    return None;
                }
                let w = (a.x - origin.x, a.y - origin.y);
                let t = (w.0 * e.1 - w.1 * e.0) / denom;
                let s = (w.0 * dir.1 - w.1 * dir.0) / denom;
                (t > 0.0 && (0.0..=1.0).contains(&s)).then_some(t)
            }
            Feature::Scatterer { center, radius, .. } => {
                let w = (origin.x - center.x, origin.y - center.y);
                let c = w.0 * w.0 + w.1 * w.1 - radius * radius;
                if c <= 0.0 {
                    return None;
                }
                let b = w.0 * dir.0 + w.1 * dir.1;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > 0.0).then_some(t)
            }
        }
    }

    pub fn distance_to_segment(&self, p: Point2, q: Point2) -> f64 {
        match *self {
            Feature::Wall { a, b, .. } => segment_distance(a, b, p, q),
            Feature::Scatterer { center, radius, .. } => (point_segment_distance(center, p, q) - radius).max(0.0),
        }
    }

    fn within(&self, min: Point2, max: Point2) -> bool {
        let inside = |p: Point2| p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y;
        match *self {
            Feature::Wall { a, b, .. } => inside(a) && inside(b),
            Feature::Scatterer { center, .. } => inside(center),
        }
    }
}

pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let e = (b.x - a.x, b.y - a.y);
    let len2 = e.0 * e.0 + e.1 * e.1;
    let s = if len2 > 0.0 {
        (((p.x - a.x) * e.0 + (p.y - a.y) * e.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Point2::new(a.x + s * e.0, a.y + s * e.1).distance(&p)
}

fn segments_cross(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let orient = |p: Point2, q: Point2, r: Point2| (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

pub fn segment_distance(a: Point2, b: Point2, c: Point2, d: Point2) -> f64 {
    if segments_cross(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub seed: u64,
    pub min: Point2,
    pub max: Point2,
    pub features: Vec<Feature>,
}

impl World {
    /// First hit along a ray: `(range, reflectivity)`.
    pub fn raycast(&self, origin: Point2, heading: f64, max_range: f64) -> Option<(f64, f64)> {
        let dir = (heading.cos(), heading.sin());
        let mut best: Option<(f64, f64)> = None;
        for f in &self.features {
            if let Some(t) = f.intersect(origin, dir) {
                if t < max_range && best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, f.reflectivity()));
                }
            }
        }
        best
    }
}

/// Recipe for random clutter inside a box.
#[derive(Clone, Copy, Debug)]
struct Clutter {
    walls: usize,
    scatterers: usize,
    wall_length: (f64, f64),
}

fn random_feature(rng: &mut ChaCha8Rng, min: Point2, max: Point2, wall: bool, wall_length: (f64, f64)) -> Feature {
    let reflectivity = rng.random_range(0.5..=1.0);
    let center = Point2::new(rng.random_range(min.x..=max.x), rng.random_range(min.y..=max.y));
    if wall {
        let len = rng.random_range(wall_length.0..=wall_length.1);
        let ang: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let h = (0.5 * len * ang.cos(), 0.5 * len * ang.sin());
        let clamp = |p: Point2| Point2::new(p.x.clamp(min.x, max.x), p.y.clamp(min.y, max.y));
        Feature::Wall {
            a: clamp(Point2::new(center.x - h.0, center.y - h.1)),
            b: clamp(Point2::new(center.x + h.0, center.y + h.1)),
            reflectivity,
        }
    } else {
        Feature::Scatterer {
            center,
            radius: rng.random_range(0.2..=0.5),
            reflectivity,
        }
    }
}

/// Uniform random world of `n_features` features inside the square
/// `[-extent/2, extent/2]^2`. Roughly a quarter of the features are walls.
pub fn generate_world(seed: u64, n_features: usize, extent: f64) -> World {
    assert!(n_features >= 1, "a world needs at least one feature");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 0.5 * extent;
    let (min, max) = (Point2::new(-h, -h), Point2::new(h, h));
    let features = (0..n_features)
        .map(|_| {
            let wall = rng.random_bool(0.25);
            random_feature(&mut rng, min, max, wall, (2.0, (0.3 * extent).max(2.0)))
        })
        .collect();
    World {
        seed,
        min,
        max,
        features,
    }
}

/// Waypoint loop driven by a robot; `start` faces the first waypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub start: Pose2,
    pub waypoints: Vec<Point2>,
}

impl Route {
    fn closed(points: &[(f64, f64)]) -> Route {
        let pts: Vec<Point2> = points.iter().map(|&(x, y)| Point2::new(x, y)).collect();
        let s = pts[0];
        let first = pts[1];
        let heading = (first.y - s.y).atan2(first.x - s.x);
        let mut waypoints = pts[1..].to_vec();
        waypoints.push(s);
        Route {
            start: Pose2::new(s.x, s.y, heading),
            waypoints,
        }
    }

    /// Segments of one lap, starting at the start pose.
    pub fn segments(&self) -> Vec<(Point2, Point2)> {
        let mut prev = Point2::new(self.start.x, self.start.y);
        self.waypoints
            .iter()
            .map(|&w| {
                let s = (prev, w);
                prev = w;
                s
            })
            .collect()
    }
}

fn fill(
    rng: &mut ChaCha8Rng,
    features: &mut Vec<Feature>,
    min: Point2,
    max: Point2,
    clutter: Clutter,
    routes: &[Route],
    clearance: f64,
) {
    let segments: Vec<(Point2, Point2)> = routes.iter().flat_map(|r| r.segments()).collect();
    let clear = |f: &Feature| segments.iter().all(|&(p, q)| f.distance_to_segment(p, q) >= clearance);
    for (count, wall) in [(clutter.walls, true), (clutter.scatterers, false)] {
        let mut placed = 0;
        let mut attempts = 0;
        while placed < count && attempts < 100 * count {
            attempts += 1;
            let f = random_feature(rng, min, max, wall, clutter.wall_length);
            if clear(&f) && f.within(min, max) {
                features.push(f);
                placed += 1;
            }
        }
    }
}

/// World and routes for a scenario; robot `r` drives `routes[r]`.
pub fn build_scenario(scenario: Scenario, seed: u64, robots: usize) -> (World, Vec<Route>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_3011d);
    let mut features = Vec::new();
    let (min, max, routes) = match scenario {
        Scenario::Crossing => {
            // side-by-side squares; even robots counter-clockwise, odd clockwise,
            // so neighbors drive their shared edge in the same direction
            let side = 40.0;
            let x0 = -side * robots as f64 / 2.0;
            let h = side / 2.0;
            let routes: Vec<Route> = (0..robots)
                .map(|r| {
                    let (l, rr) = (x0 + r as f64 * side, x0 + (r + 1) as f64 * side);
                    if r % 2 == 0 {
                        Route::closed(&[(l, -h), (rr, -h), (rr, h), (l, h)])
                    } else {
                        Route::closed(&[(rr, h), (rr, -h), (l, -h), (l, h)])
                    }
                })
                .collect();
            let margin = 15.0;
            let min = Point2::new(x0 - margin, -h - margin);
            let max = Point2::new(-x0 + margin, h + margin);
            let area = (max.x - min.x) * (max.y - min.y);
            let clutter = Clutter {
                walls: (area * 0.008) as usize,
                scatterers: (area * 0.03) as usize,
                wall_length: (3.0, 12.0),
            };
            fill(&mut rng, &mut features, min, max, clutter, &routes, 2.0);
            (min, max, routes)
        }
        Scenario::Disjoint => {
            // regions 150 m apart; even robots in near clutter, odd robots in
            // an open field ringed by distant walls
            let mut routes = Vec::new();
            for r in 0..robots {
                let cx = r as f64 * 150.0;
                // a tighter loop keeps the cluttered robot's returns short
                let half = if r % 2 == 0 { 8.0 } else { 12.0 };
                let route = Route::closed(&[(cx - half, -half), (cx + half, -half), (cx + half, half), (cx - half, half)]);
                let lo = Point2::new(cx - half - 30.0, -half - 30.0);
                let hi = Point2::new(cx + half + 30.0, half + 30.0);
                if r % 2 == 0 {
                    let near_lo = Point2::new(cx - half - 7.0, -half - 7.0);
                    let near_hi = Point2::new(cx + half + 7.0, half + 7.0);
                    let clutter = Clutter {
                        walls: 0,
                        scatterers: 900,
                        wall_length: (1.0, 2.0),
                    };
                    fill(&mut rng, &mut features, near_lo, near_hi, clutter, std::slice::from_ref(&route), 1.5);
                } else {
                    let clutter = Clutter {
                        walls: 60,
                        scatterers: 0,
                        wall_length: (6.0, 14.0),
                    };
                    fill(&mut rng, &mut features, lo, hi, clutter, std::slice::from_ref(&route), 20.0);
                }
                routes.push(route);
            }
            let max_x = (robots - 1) as f64 * 150.0 + 45.0;
            (Point2::new(-45.0, -45.0), Point2::new(max_x, 45.0), routes)
        }
        Scenario::DriftHeavy => {
            // feature-rich home area, empty excursions east (even) or west (odd)
            let lane = 8.0;
            let home = 12.0;
            let far = 80.0;
            let routes: Vec<Route> = (0..robots)
                .map(|r| {
                    let offset = (r / 2) as f64 * 4.0;
                    let (l1, l2) = (-lane - offset, lane + offset);
                    if r % 2 == 0 {
                        Route::closed(&[(-home, l1), (far, l1), (far, l2), (-home, l2)])
                    } else {
                        Route::closed(&[(home, l2), (-far, l2), (-far, l1), (home, l1)])
                    }
                })
                .collect();
            let min = Point2::new(-28.0, -28.0);
            let max = Point2::new(28.0, 28.0);
            let clutter = Clutter {
                walls: 30,
                scatterers: 110,
                wall_length: (3.0, 10.0),
            };
            fill(&mut rng, &mut features, min, max, clutter, &routes, 2.0);
            (Point2::new(-far - 10.0, -30.0), Point2::new(far + 10.0, 30.0), routes)
        }
    };
    (
        World {
            seed,
            min,
            max,
            features,
        },
        routes,
    )
}

/// Heading that points from `p` to `q`.
pub fn bearing_to(p: &Pose2, q: Point2) -> f64 {
    wrap_angle((q.y - p.y).atan2(q.x - p.x) - p.theta)
}
