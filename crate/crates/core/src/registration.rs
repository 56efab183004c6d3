//! Rigid 2D registration of sonar point clouds.
//!
//! [`icp`] is point-to-point ICP with radius-gated nearest-neighbor matching
//! and a closed-form Procrustes step. [`global_register`] needs no initial
//! guess: both clouds are centered, and for each rotation of a fixed lattice
//! a translation is voted from pairwise point differences and polished by a
//! few trimmed ICP iterations. The best few distinct starts run trimmed ICP
//! to convergence and the winner is refined with [`icp`].
//!
//! All transforms map source coordinates into the target frame.

use alloc::vec::Vec;

use thiserror::Error;

use crate::geometry::{Point2, PointCloud2D, Pose2};
use crate::kdtree::KdTree;
use crate::math::{abs, atan2, ceil, floor, hypot, sqrt, wrap_angle, PI, TAU};

pub type Transform2 = Pose2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("cannot register an empty cloud")]
    EmptyCloud,
    #[error("global registration needs at least {need} points per cloud, got {have}")]
    TooFewPoints { need: usize, have: usize },
    #[error("only {matched} matched pairs; at least 3 are required")]
    Degenerate { matched: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Association gate in meters.
    pub match_radius: f64,
    /// Convergence threshold on the per-iteration transform update.
    pub tolerance: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        IcpParams {
            max_iterations: 50,
            match_radius: 2.0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalParams {
    pub rotations: usize,
    pub trim_fraction: f64,
    pub coarse_iterations: usize,
    /// Best coarse starts polished to convergence before picking one.
    pub hypotheses: usize,
    pub min_points: usize,
    pub refine: IcpParams,
}

impl Default for GlobalParams {
    fn default() -> Self {
        GlobalParams {
            rotations: 64,
            trim_fraction: 0.7,
            coarse_iterations: 10,
            hypotheses: 4,
            min_points: 10,
            refine: IcpParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub transform: Transform2,
    /// RMS distance over the final matched pairs.
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub matched: usize,
    /// Truncated objective `sum_i min(d_i^2, r^2)` at every visited transform.
    pub objective_trace: Vec<f64>,
}

/// Nearest-neighbor index over a target cloud.
pub struct Target<'a> {
    cloud: &'a PointCloud2D,
    tree: KdTree<2, u32>,
}

impl<'a> Target<'a> {
    pub fn new(cloud: &'a PointCloud2D) -> Target<'a> {
        let tree = KdTree::build(cloud.points.iter().enumerate().map(|(i, p)| (p.as_array(), i as u32)));
        Target { cloud, tree }
    }

    fn nearest(&self, q: Point2) -> (Point2, f64) {
        let n = self.tree.nearest(&q.as_array()).expect("target cloud is non-empty");
        (self.cloud.points[n.key as usize], n.distance)
    }
}

/// Closed-form least-squares rigid alignment of `src[i]` onto `dst[i]`.
fn procrustes(pairs: &[(Point2, Point2)]) -> Transform2 {
    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut tx, mut ty) = (0.0, 0.0, 0.0, 0.0);
    for (s, t) in pairs {
        sx += s.x;
        sy += s.y;
        tx += t.x;
        ty += t.y;
    }
    let (sx, sy, tx, ty) = (sx / n, sy / n, tx / n, ty / n);
    let (mut cross, mut dotp) = (0.0, 0.0);
    for (s, t) in pairs {
        let (ax, ay) = (s.x - sx, s.y - sy);
        let (bx, by) = (t.x - tx, t.y - ty);
        dotp += ax * bx + ay * by;
        cross += ax * by - ay * bx;
    }
    let theta = atan2(cross, dotp);
    let rot = Pose2::new(0.0, 0.0, theta);
    let rs = rot.transform_point(Point2::new(sx, sy));
    Pose2::new(tx - rs.x, ty - rs.y, theta)
}

struct Association {
    pairs: Vec<(Point2, Point2)>,
    truncated: f64,
    sum_sq: f64,
}

fn associate(source: &PointCloud2D, target: &Target<'_>, t: &Transform2, radius: f64) -> Association {
    let r2 = radius * radius;
    let mut pairs = Vec::with_capacity(source.len());
    let (mut truncated, mut sum_sq) = (0.0, 0.0);
    for s in &source.points {
        let (q, d) = target.nearest(t.transform_point(*s));
        let d2 = d * d;
        if d <= radius {
            pairs.push((*s, q));
            truncated += d2;
            sum_sq += d2;
        } else {
            truncated += r2;
        }
    }
    Association {
        pairs,
        truncated,
        sum_sq,
    }
}

pub fn icp(
    source: &PointCloud2D,
    target: &PointCloud2D,
    init: Transform2,
    params: &IcpParams,
) -> Result<RegistrationResult, RegistrationError> {
    if source.is_empty() || target.is_empty() {
        return Err(RegistrationError::EmptyCloud);
    }
    let index = Target::new(target);
    icp_indexed(source, &index, init, params)
}

pub fn icp_indexed(
    source: &PointCloud2D,
    target: &Target<'_>,
    init: Transform2,
    params: &IcpParams,
) -> Result<RegistrationResult, RegistrationError> {
    if source.is_empty() || target.cloud.is_empty() {
        return Err(RegistrationError::EmptyCloud);
    }
    let mut t = init;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iterations {
        let assoc = associate(source, target, &t, params.match_radius);
        trace.push(assoc.truncated);
        if assoc.pairs.len() < 3 {
            return Err(RegistrationError::Degenerate {
                matched: assoc.pairs.len(),
            });
        }
        let next = procrustes(&assoc.pairs);
        let step = t.between(&next);
        t = next;
        iterations += 1;
        if step.translation_norm() < params.tolerance && abs(step.theta) < params.tolerance {
            converged = true;
            break;
        }
    }
    let assoc = associate(source, target, &t, params.match_radius);
    trace.push(assoc.truncated);
    if assoc.pairs.len() < 3 {
        return Err(RegistrationError::Degenerate {
            matched: assoc.pairs.len(),
        });
    }
    Ok(RegistrationResult {
        transform: t,
        rmse: sqrt(assoc.sum_sq / assoc.pairs.len() as f64),
        iterations,
        converged,
        matched: assoc.pairs.len(),
        objective_trace: trace,
    })
}

/// Trimmed association: every source point to its nearest target, keeping
/// the best `keep` pairs ordered by distance then source index.
fn trimmed_pairs(source: &PointCloud2D, target: &Target<'_>, t: &Transform2, keep: usize) -> (Vec<(Point2, Point2)>, f64) {
    let mut all: Vec<(f64, usize, Point2)> = source
        .points
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (q, d) = target.nearest(t.transform_point(*s));
            (d * d, i, q)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(keep);
    let cost = all.iter().map(|a| a.0).sum();
    (all.into_iter().map(|(_, i, q)| (source.points[i], q)).collect(), cost)
}

/// Short trimmed ICP from `init`; returns the polished transform and its trimmed RMSE.
fn coarse_align(source: &PointCloud2D, target: &Target<'_>, init: Transform2, keep: usize, iterations: usize) -> (Transform2, f64) {
    let mut t = init;
    for _ in 0..iterations {
        let (pairs, _) = trimmed_pairs(source, target, &t, keep);
        let next = procrustes(&pairs);
        let step = t.between(&next);
        t = next;
        if step.translation_norm() < 1e-9 && abs(step.theta) < 1e-9 {
            break;
        }
    }
    let (_, cost) = trimmed_pairs(source, target, &t, keep);
    (t, sqrt(cost / keep as f64))
}

fn centered(cloud: &PointCloud2D) -> (PointCloud2D, Point2) {
    let c = cloud.centroid().unwrap_or_default();
    let pts = cloud.points.iter().map(|p| Point2::new(p.x - c.x, p.y - c.y)).collect();
    (PointCloud2D::new(pts, cloud.frame), c)
}

const VOTE_CELL: f64 = 0.5;

/// Translation with the most point pairs agreeing once `source` is rotated
/// by `theta`: every difference `q - R p` votes for a grid cell and the
/// fullest cell wins (lowest index on ties). Independent of where either
/// cloud is centered, so unshared points only add background votes.
/// Both clouds must be centered so the grid can span `radius` each way.
fn vote_translation(source: &PointCloud2D, target: &PointCloud2D, theta: f64, radius: f64, votes: &mut Vec<u32>) -> Option<Point2> {
    let side = (2.0 * radius / VOTE_CELL) as usize + 1;
    votes.clear();
    votes.resize(side * side, 0);
    let rot = Pose2::new(0.0, 0.0, theta);
    for p in &source.points {
        let rp = rot.transform_point(*p);
        for q in &target.points {
            let i = floor((q.x - rp.x + radius) / VOTE_CELL) as usize;
            let j = floor((q.y - rp.y + radius) / VOTE_CELL) as usize;
            votes[j.min(side - 1) * side + i.min(side - 1)] += 1;
        }
    }
    let mut best = (0u32, 0usize);
    for (n, &v) in votes.iter().enumerate() {
        if v > best.0 {
            best = (v, n);
        }
    }
    if best.0 == 0 {
        return None;
    }
    let (i, j) = (best.1 % side, best.1 / side);
    Some(Point2::new((i as f64 + 0.5) * VOTE_CELL - radius, (j as f64 + 0.5) * VOTE_CELL - radius))
}

fn max_radius(cloud: &PointCloud2D) -> f64 {
    cloud.points.iter().map(|p| hypot(p.x, p.y)).fold(0.0, f64::max)
}

/// Lattice rotation of start `k`.
pub fn lattice_rotation(k: usize, rotations: usize) -> f64 {
    wrap_angle(-PI + TAU * k as f64 / rotations as f64)
}

/// Registration without an initial guess.
///
/// Deterministic: starts are ranked by trimmed RMSE with ties broken by
/// lattice index, and among polished hypotheses the first strictly best wins.
pub fn global_register(
    source: &PointCloud2D,
    target: &PointCloud2D,
    params: &GlobalParams,
) -> Result<RegistrationResult, RegistrationError> {
    for c in [source, target] {
        if c.len() < params.min_points {
            return Err(RegistrationError::TooFewPoints {
                need: params.min_points,
                have: c.len(),
            });
        }
    }
    let (src_c, src_mean) = centered(source);
    let (tgt_c, tgt_mean) = centered(target);
    let tgt_index = Target::new(&tgt_c);
    let keep = (ceil(params.trim_fraction * source.len() as f64) as usize).clamp(3, source.len());

    let mut coarse: Vec<(f64, usize, Transform2)> = Vec::new();
    let mut votes: Vec<u32> = Vec::new();
    let vote_radius = max_radius(&src_c) + max_radius(&tgt_c) + VOTE_CELL;
    for k in 0..params.rotations.max(1) {
        let theta = lattice_rotation(k, params.rotations.max(1));
        // translation from pairwise-difference votes; the centroids are off
        // whenever part of either cloud has no counterpart
        let t = vote_translation(&src_c, &tgt_c, theta, vote_radius, &mut votes).unwrap_or_default();
        let (t, score) = coarse_align(&src_c, &tgt_index, Pose2::new(t.x, t.y, theta), keep, params.coarse_iterations);
        if score.is_finite() {
            coarse.push((score, k, t));
        }
    }
    coarse.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // several starts often settle into the same basin; polish distinct ones only
    let mut seeds: Vec<Transform2> = Vec::new();
    for (_, _, t) in &coarse {
        if seeds.len() >= params.hypotheses.max(1) {
            break;
        }
        if seeds.iter().all(|s| {
            let d = s.between(t);
            d.translation_norm() > 0.5 || abs(d.theta) > 0.05
        }) {
            seeds.push(*t);
        }
    }
    let polish = (params.coarse_iterations * 5).max(params.refine.max_iterations);
    let mut best: Option<(f64, Transform2)> = None;
    for s in seeds {
        let (t, score) = coarse_align(&src_c, &tgt_index, s, keep, polish);
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, t));
        }
    }
    let (_, centered_t) = best.ok_or(RegistrationError::Degenerate { matched: 0 })?;

    // undo the centering: x_t = R (x_s - mu_s) + t_c + mu_t
    let shift_in = Pose2::new(-src_mean.x, -src_mean.y, 0.0);
    let shift_out = Pose2::new(tgt_mean.x, tgt_mean.y, 0.0);
    let init = shift_out.compose(&centered_t).compose(&shift_in);

    let target_index = Target::new(target);
    icp_indexed(source, &target_index, init, &params.refine)
}

/// Fraction of transformed source points with a target neighbor within `radius`.
pub fn overlap(source: &PointCloud2D, target: &PointCloud2D, t: &Transform2, radius: f64) -> f64 {
    if source.is_empty() || target.is_empty() {
        return 0.0;
    }
    let index = Target::new(target);
    let hits = source
        .points
        .iter()
        .filter(|s| index.nearest(t.transform_point(**s)).1 <= radius)
        .count();
    hits as f64 / source.len() as f64
}
