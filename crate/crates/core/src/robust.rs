//! Loop-closure outlier rejection.
//!
//! Candidates pass through cheap gates before registration (point count,
//! point-count ratio, scene-image SAD), an overlap gate after registration,
//! and finally pairwise consistency maximization (PCM): the largest set of
//! loop closures that are mutually consistent with the robots' trajectories,
//! found as the maximum clique of the consistency graph.

use alloc::vec::Vec;
use core::cmp::Ordering;

use thiserror::Error;

use crate::geometry::{Key, PointCloud2D, Pose2};
use crate::linalg::Mat3;
use crate::place::{scene_sad, SceneImage};
use crate::registration::{RegistrationResult, Transform2};

/// Chi-square quantile, 3 degrees of freedom, 0.99.
pub const CHI2_3DOF_99: f64 = 11.344_866_730_144_373;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobustError {
    #[error("covariance is not symmetric positive definite")]
    NonSpd,
    #[error("loop closures do not connect the same pair of robots")]
    RobotPairMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub min_points: usize,
    pub max_ratio: f64,
    pub max_sad: f64,
    pub min_overlap: f64,
    pub pcm_threshold: f64,
    pub use_scene_image: bool,
    pub use_pcm: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            min_points: 75,
            max_ratio: 2.0,
            max_sad: 0.8,
            min_overlap: 0.55,
            pcm_threshold: CHI2_3DOF_99,
            use_scene_image: true,
            use_pcm: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateReason {
    MinPoints,
    Ratio,
    SceneImage,
    Overlap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateOutcome {
    Pass,
    Fail(GateReason),
}

impl GateOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, GateOutcome::Pass)
    }
}

/// Checks run before any registration attempt. All thresholds are inclusive.
pub fn gate_pre(
    src_cloud: &PointCloud2D,
    dst_cloud: &PointCloud2D,
    src_img: &SceneImage,
    dst_img: &SceneImage,
    cfg: &GateConfig,
) -> GateOutcome {
    let (a, b) = (src_cloud.len(), dst_cloud.len());
    if a < cfg.min_points || b < cfg.min_points {
        return GateOutcome::Fail(GateReason::MinPoints);
    }
    let ratio = a.max(b) as f64 / a.min(b) as f64;
    if ratio > cfg.max_ratio {
        return GateOutcome::Fail(GateReason::Ratio);
    }
    if cfg.use_scene_image {
        match scene_sad(src_img, dst_img) {
            Ok(sad) if sad <= cfg.max_sad => {}
            _ => return GateOutcome::Fail(GateReason::SceneImage),
        }
    }
    GateOutcome::Pass
}

pub fn gate_post(_result: &RegistrationResult, overlap: f64, cfg: &GateConfig) -> GateOutcome {
    if overlap >= cfg.min_overlap {
        GateOutcome::Pass
    } else {
        GateOutcome::Fail(GateReason::Overlap)
    }
}

/// A relative pose with its covariance in chart coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    pub pose: Pose2,
    pub covariance: Mat3,
}

impl RelativePose {
    pub fn new(pose: Pose2, covariance: Mat3) -> RelativePose {
        RelativePose { pose, covariance }
    }

    pub fn inverse(&self) -> RelativePose {
        let j = Pose2::inverse_jacobian(&self.pose);
        RelativePose {
            pose: self.pose.inverse(),
            covariance: self.covariance.congruent(&j).symmetrized(),
        }
    }

    /// First-order composition of independent relative poses.
    pub fn compose(&self, other: &RelativePose) -> RelativePose {
        let (ja, jb) = Pose2::compose_jacobians(&self.pose, &other.pose);
        RelativePose {
            pose: self.pose.compose(&other.pose),
            covariance: (self.covariance.congruent(&ja) + other.covariance.congruent(&jb)).symmetrized(),
        }
    }
}

/// Loop-closure hypothesis: `relative` is the pose of `dst` in the frame of `src`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopCandidate {
    pub src: Key,
    pub dst: Key,
    pub relative: Transform2,
    pub covariance: Mat3,
    pub overlap: f64,
    pub rmse: f64,
}

impl LoopCandidate {
    pub fn measurement(&self) -> RelativePose {
        RelativePose::new(self.relative, self.covariance)
    }

    pub fn reversed(&self) -> LoopCandidate {
        let inv = self.measurement().inverse();
        LoopCandidate {
            src: self.dst,
            dst: self.src,
            relative: inv.pose,
            covariance: inv.covariance,
            ..*self
        }
    }

    /// Orientation with the lower robot id (then lower key) on the `src` side.
    pub fn canonical(&self) -> LoopCandidate {
        if (self.dst.robot, self.dst) < (self.src.robot, self.src) {
            self.reversed()
        } else {
            *self
        }
    }
}

fn cycle_distance(l1: &LoopCandidate, l2: &LoopCandidate, odo_a: &RelativePose, odo_b: &RelativePose) -> Result<f64, RobustError> {
    let cycle = l1
        .measurement()
        .inverse()
        .compose(odo_a)
        .compose(&l2.measurement())
        .compose(&odo_b.inverse());
    let e = cycle.pose.to_vector();
    cycle.covariance.mahalanobis_sq(&e).ok_or(RobustError::NonSpd)
}

/// Squared Mahalanobis norm of the loop `l1 -> odo_b -> l2^-1 -> odo_a^-1`.
///
/// `odo_a` is the relative pose on the `src` robot from `l1.src` to `l2.src`,
/// `odo_b` the one on the `dst` robot from `l1.dst` to `l2.dst`. The value is
/// the mean over both traversal directions of the cycle, so swapping the two
/// loops (and inverting the odometry) gives the same number.
pub fn pairwise_consistency(
    l1: &LoopCandidate,
    l2: &LoopCandidate,
    odo_a: &RelativePose,
    odo_b: &RelativePose,
) -> Result<f64, RobustError> {
    if l1.src.robot != l2.src.robot || l1.dst.robot != l2.dst.robot {
        return Err(RobustError::RobotPairMismatch);
    }
    for c in [&l1.covariance, &l2.covariance, &odo_a.covariance, &odo_b.covariance] {
        if !c.is_spd() {
            return Err(RobustError::NonSpd);
        }
    }
    let forward = cycle_distance(l1, l2, odo_a, odo_b)?;
    let backward = cycle_distance(l2, l1, &odo_a.inverse(), &odo_b.inverse())?;
    Ok(0.5 * (forward + backward))
}

/// Supplies relative poses (with covariance) between keyframes of one robot.
pub trait Odometry {
    fn relative(&self, from: Key, to: Key) -> Option<RelativePose>;
}

/// Symmetric matrix of pairwise distances; `None` marks pairs that could not be evaluated.
pub fn consistency_matrix(candidates: &[LoopCandidate], odometry: &dyn Odometry) -> Vec<Vec<Option<f64>>> {
    let n = candidates.len();
    let mut m = alloc::vec![alloc::vec![None; n]; n];
    for i in 0..n {
        m[i][i] = Some(0.0);
        for j in i + 1..n {
            let (a, mut b) = (candidates[i], candidates[j]);
            if b.src.robot != a.src.robot {
                b = b.reversed();
            }
            let d = match (odometry.relative(a.src, b.src), odometry.relative(a.dst, b.dst)) {
                (Some(oa), Some(ob)) => pairwise_consistency(&a, &b, &oa, &ob).ok(),
                _ => None,
            };
            if d.is_none() {
                log::debug!("no consistency value for {}->{} vs {}->{}", a.src, a.dst, b.src, b.dst);
            }
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

/// PCM: indices of the maximum mutually consistent subset, ascending.
pub fn pcm_select(candidates: &[LoopCandidate], odometry: &dyn Odometry, threshold: f64) -> Vec<usize> {
    let m = consistency_matrix(candidates, odometry);
    let keys: Vec<(Key, Key)> = candidates.iter().map(|c| (c.src, c.dst)).collect();
    maximum_consistent_set(&m, threshold, &keys)
}

/// Maximum clique of the graph with an edge wherever `dist[i][j] <= threshold`.
///
/// Ties on size go to the lower sum of pairwise distances inside the clique,
/// then to the lexicographically smaller list of `ids`, then of indices.
pub fn maximum_consistent_set<I: Ord + Copy>(dist: &[Vec<Option<f64>>], threshold: f64, ids: &[I]) -> Vec<usize> {
    let n = dist.len();
    if n == 0 {
        return Vec::new();
    }
    let mut adj = alloc::vec![BitSet::new(n); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dist[i][j].is_some_and(|d| d <= threshold) {
                adj[i].insert(j);
            }
        }
    }
    let mut search = CliqueSearch {
        adj: &adj,
        dist,
        ids,
        best: Vec::new(),
        best_weight: f64::INFINITY,
    };
    let mut all = BitSet::new(n);
    for i in 0..n {
        all.insert(i);
    }
    search.expand(&mut Vec::new(), all, BitSet::new(n));
    search.best
}

struct CliqueSearch<'a, I> {
    adj: &'a [BitSet],
    dist: &'a [Vec<Option<f64>>],
    ids: &'a [I],
    best: Vec<usize>,
    best_weight: f64,
}

impl<I: Ord + Copy> CliqueSearch<'_, I> {
    /// Bron-Kerbosch with Tomita pivoting over all maximal cliques.
    fn expand(&mut self, r: &mut Vec<usize>, mut p: BitSet, mut x: BitSet) {
        if p.is_empty() {
            if x.is_empty() {
                self.offer(r);
            }
            return;
        }
        if r.len() + p.len() < self.best.len() {
            return;
        }
        let pivot = p
            .union(&x)
            .iter()
            .max_by_key(|&u| (p.intersection(&self.adj[u]).len(), core::cmp::Reverse(u)))
            .expect("p is non-empty");
        let branch: Vec<usize> = p.difference(&self.adj[pivot]).iter().collect();
        for v in branch {
            r.push(v);
            self.expand(r, p.intersection(&self.adj[v]), x.intersection(&self.adj[v]));
            r.pop();
            p.remove(v);
            x.insert(v);
        }
    }

    fn offer(&mut self, r: &[usize]) {
        let mut clique = r.to_vec();
        clique.sort_unstable();
        let weight = clique_weight(&clique, self.dist);
        let better = match clique.len().cmp(&self.best.len()) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => match weight.total_cmp(&self.best_weight) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => {
                    let a: Vec<I> = clique.iter().map(|&i| self.ids[i]).collect();
                    let b: Vec<I> = self.best.iter().map(|&i| self.ids[i]).collect();
                    (a, &clique) < (b, &self.best)
                }
            },
        };
        if better {
            self.best = clique;
            self.best_weight = weight;
        }
    }
}

/// Sum of pairwise distances inside a clique.
pub fn clique_weight(clique: &[usize], dist: &[Vec<Option<f64>>]) -> f64 {
    let mut w = 0.0;
    for (k, &i) in clique.iter().enumerate() {
        for &j in &clique[k + 1..] {
            w += dist[i][j].unwrap_or(f64::INFINITY);
        }
    }
    w
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct BitSet {
    words: Vec<u64>,
}

impl BitSet {
    fn new(n: usize) -> BitSet {
        BitSet {
            words: alloc::vec![0; n.div_ceil(64)],
        }
    }

    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn remove(&mut self, i: usize) {
        self.words[i / 64] &= !(1 << (i % 64));
    }

    fn is_empty(&self) -> bool {
        self.words.iter().all(|w| *w == 0)
    }

    fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn zip(&self, other: &BitSet, f: impl Fn(u64, u64) -> u64) -> BitSet {
        BitSet {
            words: self.words.iter().zip(&other.words).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    fn union(&self, other: &BitSet) -> BitSet {
        self.zip(other, |a, b| a | b)
    }

    fn intersection(&self, other: &BitSet) -> BitSet {
        self.zip(other, |a, b| a & b)
    }

    fn difference(&self, other: &BitSet) -> BitSet {
        self.zip(other, |a, b| a & !b)
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            core::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(wi * 64 + tz)
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use crate::place::make_scene_image;
    use crate::registration::RegistrationResult;

    fn cloud(n: usize) -> PointCloud2D {
        PointCloud2D::new((0..n).map(|k| Point2::new(k as f64 * 0.2, (k % 5) as f64)).collect(), 0)
    }

    fn images(a: &PointCloud2D, b: &PointCloud2D) -> (SceneImage, SceneImage) {
        (make_scene_image(a, 1.0, 30.0), make_scene_image(b, 1.0, 30.0))
    }

    #[test]
    fn pre_gates() {
        let cfg = GateConfig::default();
        let (a, b) = (cloud(74), cloud(200));
        let (ia, ib) = images(&a, &b);
        assert_eq!(gate_pre(&a, &b, &ia, &ib, &cfg), GateOutcome::Fail(GateReason::MinPoints));
        let (a, b) = (cloud(100), cloud(201));
        let (ia, ib) = images(&a, &b);
        assert_eq!(gate_pre(&a, &b, &ia, &ib, &cfg), GateOutcome::Fail(GateReason::Ratio));
        let (a, b) = (cloud(100), cloud(200));
        let (ia, ib) = images(&a, &b);
        assert_eq!(gate_pre(&a, &b, &ia, &ib, &cfg).passed(), scene_sad(&ia, &ib).unwrap() <= 0.8);
        let a = cloud(100);
        let (ia, ib) = images(&a, &a);
        assert_eq!(gate_pre(&a, &a, &ia, &ib, &cfg), GateOutcome::Pass);
        let far = PointCloud2D::new(a.points.iter().map(|p| Point2::new(-p.x - 5.0, -p.y - 5.0)).collect(), 0);
        let (ia, ib) = images(&a, &far);
        assert_eq!(gate_pre(&a, &far, &ia, &ib, &cfg), GateOutcome::Fail(GateReason::SceneImage));
        let no_image = GateConfig { use_scene_image: false, ..cfg };
        assert_eq!(gate_pre(&a, &far, &ia, &ib, &no_image), GateOutcome::Pass);
    }

    #[test]
    fn post_gate_is_inclusive() {
        let cfg = GateConfig::default();
        let r = RegistrationResult {
            transform: Pose2::IDENTITY,
            rmse: 0.0,
            iterations: 1,
            converged: true,
            matched: 3,
            objective_trace: Vec::new(),
        };
        assert!(gate_post(&r, 1.0, &cfg).passed());
        assert!(gate_post(&r, 0.55, &cfg).passed());
        assert_eq!(gate_post(&r, 0.54, &cfg), GateOutcome::Fail(GateReason::Overlap));
    }

    #[test]
    fn chi2_constant() {
        // P(chi2_3 <= x) = erf(sqrt(x/2)) - sqrt(2x/pi) exp(-x/2)
        let x = CHI2_3DOF_99;
        let cdf = erf((x / 2.0).sqrt()) - (2.0 * x / core::f64::consts::PI).sqrt() * (-x / 2.0).exp();
        assert!((cdf - 0.99).abs() < 1e-9, "{cdf}");
    }

    fn erf(x: f64) -> f64 {
        // series expansion, converges quickly for the small arguments used here
        let mut sum = 0.0;
        let mut term = x;
        let mut n = 0.0;
        while term.abs() > 1e-17 {
            sum += term / (2.0 * n + 1.0);
            n += 1.0;
            term *= -x * x / n;
        }
        2.0 / core::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn bitset_iteration() {
        let mut b = BitSet::new(130);
        for i in [0, 63, 64, 129] {
            b.insert(i);
        }
        assert_eq!(b.iter().collect::<Vec<_>>(), alloc::vec![0, 63, 64, 129]);
        assert_eq!(b.len(), 4);
        b.remove(64);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn clique_tie_breaks() {
        // two disjoint edges {0,1} and {2,3}; the lighter one wins
        let d = |a: f64, b: f64| {
            alloc::vec![
                alloc::vec![Some(0.0), Some(a), None, None],
                alloc::vec![Some(a), Some(0.0), None, None],
                alloc::vec![None, None, Some(0.0), Some(b)],
                alloc::vec![None, None, Some(b), Some(0.0)],
            ]
        };
        let ids = [3u32, 2, 1, 0];
        assert_eq!(maximum_consistent_set(&d(5.0, 1.0), 11.0, &ids), alloc::vec![2, 3]);
        assert_eq!(maximum_consistent_set(&d(1.0, 5.0), 11.0, &ids), alloc::vec![0, 1]);
        // equal weight: smaller ids win
        assert_eq!(maximum_consistent_set(&d(1.0, 1.0), 11.0, &ids), alloc::vec![2, 3]);
        let empty: Vec<Vec<Option<f64>>> = Vec::new();
        assert!(maximum_consistent_set::<u32>(&empty, 11.0, &[]).is_empty());
    }
}
