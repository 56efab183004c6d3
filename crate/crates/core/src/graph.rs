//! Per-robot SE(2) factor graph and its batch Levenberg-Marquardt solver.
//!
//! A robot's graph holds its own keyframes (prior, odometry, sequential and
//! non-sequential scan matching factors) plus, once an inter-robot loop
//! closure exists, partner keyframes chained by partner-robot factors.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::geometry::{Key, Pose2, RobotId};
use crate::linalg::{dot, Mat3, Vec3};
use crate::math::{abs, sin_cos, wrap_angle};
use crate::sparse::{self, BlockSystem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FactorKind {
    Prior,
    Odometry,
    Ssm,
    Nssm,
    InterRobot,
    PartnerRobot,
}

impl FactorKind {
    pub fn label(&self) -> &'static str {
        match self {
            FactorKind::Prior => "PRIOR",
            FactorKind::Odometry => "ODOM",
            FactorKind::Ssm => "SSM",
            FactorKind::Nssm => "NSSM",
            FactorKind::InterRobot => "IR",
            FactorKind::PartnerRobot => "PR",
        }
    }

    pub fn from_label(s: &str) -> Option<FactorKind> {
        Some(match s {
            "PRIOR" => FactorKind::Prior,
            "ODOM" => FactorKind::Odometry,
            "SSM" => FactorKind::Ssm,
            "NSSM" => FactorKind::Nssm,
            "IR" => FactorKind::InterRobot,
            "PR" => FactorKind::PartnerRobot,
            _ => return None,
        })
    }
}

impl fmt::Display for FactorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Gaussian constraint on one (prior) or two poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub a: Key,
    pub b: Option<Key>,
    pub measurement: Pose2,
    pub covariance: Mat3,
}

impl Factor {
    pub fn prior(key: Key, pose: Pose2, covariance: Mat3) -> Factor {
        Factor {
            kind: FactorKind::Prior,
            a: key,
            b: None,
            measurement: pose,
            covariance,
        }
    }

    pub fn between(kind: FactorKind, a: Key, b: Key, measurement: Pose2, covariance: Mat3) -> Factor {
        Factor {
            kind,
            a,
            b: Some(b),
            measurement,
            covariance,
        }
    }

    fn same_as(&self, other: &Factor) -> bool {
        self.kind == other.kind
            && self.a == other.a
            && self.b == other.b
            && self.measurement.x.to_bits() == other.measurement.x.to_bits()
            && self.measurement.y.to_bits() == other.measurement.y.to_bits()
            && self.measurement.theta.to_bits() == other.measurement.theta.to_bits()
    }

    pub fn keys(&self) -> impl Iterator<Item = Key> + '_ {
        core::iter::once(self.a).chain(self.b)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("factor {kind} {a} -> {b:?} already present")]
    DuplicateFactor { kind: FactorKind, a: Key, b: Option<Key> },
    #[error("no pose for {0}")]
    MissingEndpoint(Key),
    #[error("factor shape does not match its kind")]
    InvalidFactor,
    #[error("factor covariance is not symmetric positive definite")]
    NonSpdCovariance,
    #[error("the graph already has a prior")]
    SecondPrior,
    #[error("normal equations are singular (no prior or gauge not fixed)")]
    SingularSystem,
}

/// One robot's view of the team: poses keyed by `(robot, keyframe)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphState {
    pub own_robot: RobotId,
    pub poses: BTreeMap<Key, Pose2>,
    pub factors: Vec<Factor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframePolicy {
    pub min_translation: f64,
    pub min_rotation: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        KeyframePolicy {
            min_translation: 2.0,
            min_rotation: 30f64.to_radians(),
        }
    }
}

/// True when dead reckoning has moved far enough for a new keyframe.
pub fn maybe_add_keyframe(dead_reckoning_delta: &Pose2, policy: &KeyframePolicy) -> bool {
    dead_reckoning_delta.translation_norm() >= policy.min_translation
        || abs(dead_reckoning_delta.theta) >= policy.min_rotation
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmParams {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        LmParams {
            max_iterations: 100,
            relative_tolerance: 1e-9,
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeReport {
    /// Chi-square of the initial state and after every accepted step.
    pub chi2: Vec<f64>,
    pub iterations: usize,
    /// Poses with no path to a prior; left untouched.
    pub disconnected: Vec<Key>,
}

impl OptimizeReport {
    pub fn final_chi2(&self) -> f64 {
        *self.chi2.last().unwrap_or(&0.0)
    }
}

/// Whitened-free residual of a factor in chart coordinates.
pub fn residual(f: &Factor, poses: &BTreeMap<Key, Pose2>) -> Result<Vec3, GraphError> {
    let pa = *poses.get(&f.a).ok_or(GraphError::MissingEndpoint(f.a))?;
    let value = match f.b {
        None => pa,
        Some(b) => {
            let pb = poses.get(&b).ok_or(GraphError::MissingEndpoint(b))?;
            pa.between(pb)
        }
    };
    let e = f.measurement.inverse().compose(&value);
    Ok(e.to_vector())
}

/// Residual and analytic Jacobians with respect to the `(x, y, theta)` of
/// each endpoint (additive perturbation).
pub fn linearize(f: &Factor, poses: &BTreeMap<Key, Pose2>) -> Result<(Vec3, Mat3, Option<Mat3>), GraphError> {
    let e = residual(f, poses)?;
    let (sm, cm) = sin_cos(f.measurement.theta);
    // R(m)^T
    let rmt = [[cm, sm], [-sm, cm]];
    let pa = poses[&f.a];
    match f.b {
        None => {
            let j = Mat3([[rmt[0][0], rmt[0][1], 0.0], [rmt[1][0], rmt[1][1], 0.0], [0.0, 0.0, 1.0]]);
            Ok((e, j, None))
        }
        Some(b) => {
            let pb = poses[&b];
            let (sa, ca) = sin_cos(pa.theta);
            let d = [pb.x - pa.x, pb.y - pa.y];
            let rat = [[ca, sa], [-sa, ca]];
            let drat_d = [-sa * d[0] + ca * d[1], -ca * d[0] - sa * d[1]];
            let mut m = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    m[i][j] = rmt[i][0] * rat[0][j] + rmt[i][1] * rat[1][j];
                }
            }
            let dth = [
                rmt[0][0] * drat_d[0] + rmt[0][1] * drat_d[1],
                rmt[1][0] * drat_d[0] + rmt[1][1] * drat_d[1],
            ];
            let ja = Mat3([[-m[0][0], -m[0][1], dth[0]], [-m[1][0], -m[1][1], dth[1]], [0.0, 0.0, -1.0]]);
            let jb = Mat3([[m[0][0], m[0][1], 0.0], [m[1][0], m[1][1], 0.0], [0.0, 0.0, 1.0]]);
            Ok((e, ja, Some(jb)))
        }
    }
}

/// Keys whose pose moved by at least `threshold_t` meters or `threshold_r` radians.
pub fn changed_poses(
    before: &BTreeMap<Key, Pose2>,
    after: &BTreeMap<Key, Pose2>,
    threshold_t: f64,
    threshold_r: f64,
) -> Vec<(Key, Pose2)> {
    after
        .iter()
        .filter_map(|(k, now)| {
            let old = before.get(k)?;
            let dt = crate::math::hypot(now.x - old.x, now.y - old.y);
            let dr = abs(wrap_angle(now.theta - old.theta));
            (dt >= threshold_t || dr >= threshold_r).then_some((*k, *now))
        })
        .collect()
}

impl GraphState {
    pub fn new(own_robot: RobotId) -> GraphState {
        GraphState {
            own_robot,
            poses: BTreeMap::new(),
            factors: Vec::new(),
        }
    }

    pub fn contains(&self, key: &Key) -> bool {
        self.poses.contains_key(key)
    }

    pub fn pose(&self, key: &Key) -> Option<Pose2> {
        self.poses.get(key).copied()
    }

    pub fn factors_of(&self, kind: FactorKind) -> impl Iterator<Item = &Factor> + '_ {
        self.factors.iter().filter(move |f| f.kind == kind)
    }

    /// Appends a factor, creating a missing endpoint from the other one and
    /// the measurement.
    pub fn add_factor(&mut self, f: Factor) -> Result<(), GraphError> {
        if !f.covariance.is_spd() {
            return Err(GraphError::NonSpdCovariance);
        }
        if (f.kind == FactorKind::Prior) != f.b.is_none() || f.b == Some(f.a) {
            return Err(GraphError::InvalidFactor);
        }
        if let Some(dup) = self.factors.iter().find(|g| g.same_as(&f)) {
            return Err(GraphError::DuplicateFactor {
                kind: dup.kind,
                a: dup.a,
                b: dup.b,
            });
        }
        match f.b {
            None => {
                if self.factors.iter().any(|g| g.kind == FactorKind::Prior) {
                    return Err(GraphError::SecondPrior);
                }
                self.poses.entry(f.a).or_insert(f.measurement);
            }
            Some(b) => match (self.poses.get(&f.a).copied(), self.poses.get(&b).copied()) {
                (Some(_), Some(_)) => {}
                (Some(pa), None) => {
                    self.poses.insert(b, pa.compose(&f.measurement));
                }
                (None, Some(pb)) => {
                    self.poses.insert(f.a, pb.compose(&f.measurement.inverse()));
                }
                (None, None) => return Err(GraphError::MissingEndpoint(f.a)),
            },
        }
        self.factors.push(f);
        Ok(())
    }

    /// Drops every factor matching `pred`, then any pose no factor references.
    pub fn remove_factors(&mut self, mut pred: impl FnMut(&Factor) -> bool) {
        self.factors.retain(|f| !pred(f));
        let used: BTreeSet<Key> = self.factors.iter().flat_map(|f| f.keys().collect::<Vec<_>>()).collect();
        self.poses.retain(|k, _| used.contains(k));
    }

    pub fn chi2(&self) -> Result<f64, GraphError> {
        let mut total = 0.0;
        for f in &self.factors {
            total += whitened_sq(f, &self.poses)?;
        }
        Ok(total)
    }

    /// Keys reachable from a prior through factors.
    fn anchored(&self) -> BTreeSet<Key> {
        let mut adj: BTreeMap<Key, Vec<Key>> = BTreeMap::new();
        for f in &self.factors {
            if let Some(b) = f.b {
                adj.entry(f.a).or_default().push(b);
                adj.entry(b).or_default().push(f.a);
            }
        }
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<Key> = self.factors_of(FactorKind::Prior).map(|f| f.a).collect();
        while let Some(k) = queue.pop_front() {
            if !seen.insert(k) {
                continue;
            }
            for n in adj.get(&k).into_iter().flatten() {
                if !seen.contains(n) {
                    queue.push_back(*n);
                }
            }
        }
        seen
    }

    /// Levenberg-Marquardt on the whitened squared residuals.
    pub fn optimize(&mut self, params: &LmParams) -> Result<OptimizeReport, GraphError> {
        if self.factors_of(FactorKind::Prior).next().is_none() {
            return Err(GraphError::SingularSystem);
        }
        let anchored = self.anchored();
        let disconnected: Vec<Key> = self.poses.keys().filter(|k| !anchored.contains(k)).copied().collect();
        let index: BTreeMap<Key, usize> = anchored.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let active: Vec<Factor> = self
            .factors
            .iter()
            .filter(|f| index.contains_key(&f.a))
            .copied()
            .collect();
        let mut infos = Vec::with_capacity(active.len());
        for f in &active {
            infos.push(f.covariance.inverse_spd().ok_or(GraphError::NonSpdCovariance)?);
        }

        let mut poses = self.poses.clone();
        let mut chi2 = total_chi2(&active, &infos, &poses)?;
        let mut report = OptimizeReport {
            chi2: alloc::vec![chi2],
            iterations: 0,
            disconnected,
        };
        let mut lambda = params.initial_lambda;
        let mut first = true;
        while report.iterations < params.max_iterations && chi2 > 1e-24 {
            let sys = build_system(&active, &infos, &poses, &index)?;
            if first {
                // gauge check on the undamped system
                sparse::solve(&sys, 0.0).map_err(|_| GraphError::SingularSystem)?;
                first = false;
            }
            let mut accepted = None;
            for _ in 0..12 {
                let Ok(step) = sparse::solve(&sys, lambda) else {
                    lambda *= 10.0;
                    continue;
                };
                let candidate = apply_step(&poses, &index, &step);
                let new_chi2 = total_chi2(&active, &infos, &candidate)?;
                if new_chi2 <= chi2 {
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = Some((candidate, new_chi2));
                    break;
                }
                lambda *= 10.0;
            }
            let Some((candidate, new_chi2)) = accepted else { break };
            report.iterations += 1;
            let rel = (chi2 - new_chi2) / chi2.max(1e-300);
            poses = candidate;
            chi2 = new_chi2;
            report.chi2.push(chi2);
            if rel < params.relative_tolerance {
                break;
            }
        }
        self.poses = poses;
        Ok(report)
    }
}

fn whitened_sq(f: &Factor, poses: &BTreeMap<Key, Pose2>) -> Result<f64, GraphError> {
    let e = residual(f, poses)?;
    f.covariance.mahalanobis_sq(&e).ok_or(GraphError::NonSpdCovariance)
}

fn total_chi2(factors: &[Factor], infos: &[Mat3], poses: &BTreeMap<Key, Pose2>) -> Result<f64, GraphError> {
    let mut total = 0.0;
    for (f, info) in factors.iter().zip(infos) {
        let e = residual(f, poses)?;
        total += dot(&e, &info.mul_vec(&e));
    }
    Ok(total)
}

fn build_system(
    factors: &[Factor],
    infos: &[Mat3],
    poses: &BTreeMap<Key, Pose2>,
    index: &BTreeMap<Key, usize>,
) -> Result<BlockSystem, GraphError> {
    let mut sys = BlockSystem::new(index.len());
    for (f, info) in factors.iter().zip(infos) {
        let (e, ja, jb) = linearize(f, poses)?;
        let ia = index[&f.a];
        let wa = ja.transpose() * *info;
        sys.add_block(ia, ia, &(wa * ja));
        let ga = wa.mul_vec(&e);
        sys.add_rhs(ia, &[-ga[0], -ga[1], -ga[2]]);
        if let (Some(b), Some(jb)) = (f.b, jb) {
            let ib = index[&b];
            let wb = jb.transpose() * *info;
            sys.add_block(ib, ib, &(wb * jb));
            sys.add_block(ia, ib, &(wa * jb));
            let gb = wb.mul_vec(&e);
            sys.add_rhs(ib, &[-gb[0], -gb[1], -gb[2]]);
        }
    }
    Ok(sys)
}

fn apply_step(poses: &BTreeMap<Key, Pose2>, index: &BTreeMap<Key, usize>, step: &[[f64; 3]]) -> BTreeMap<Key, Pose2> {
    let mut out = poses.clone();
    for (k, &i) in index {
        let p = out.get_mut(k).expect("indexed pose exists");
        *p = Pose2::new(p.x + step[i][0], p.y + step[i][1], p.theta + step[i][2]);
    }
    out
}
