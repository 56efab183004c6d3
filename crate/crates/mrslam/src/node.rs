//! Per-robot SLAM node: keyframing, scan matching, descriptor-first cloud
//! exchange, loop verification and pose-graph upkeep.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use mrslam_core::codec::{compress, decompress, from_raw, to_raw};
use mrslam_core::comms::{Channel, CloudPayload, Delivery, NetMessage};
use mrslam_core::frontend::{cfar_detect, downsample_medoid, mask_to_cloud, CfarParams, PolarImage};
use mrslam_core::graph::{changed_poses, maybe_add_keyframe, Factor, FactorKind, GraphState, KeyframePolicy, LmParams};
use mrslam_core::linalg::Mat3;
use mrslam_core::place::{make_descriptor, make_scene_image, DescriptorTree, SceneDescriptor, SceneImage};
use mrslam_core::registration::{global_register, icp, overlap, GlobalParams, IcpParams, RegistrationResult};
use mrslam_core::robust::{
    gate_pre, gate_post, maximum_consistent_set, pairwise_consistency, pcm_select, GateConfig, LoopCandidate, Odometry,
    RelativePose,
};
use mrslam_core::{Key, KeyframeId, PointCloud2D, Pose2, RobotId};

use crate::config::{CaseFlags, MissionConfig};

/// Everything a node needs from the mission configuration.
#[derive(Clone, Debug)]
pub struct NodeParams {
    pub cfar: CfarParams,
    pub voxel: f64,
    pub max_range: f64,
    pub keyframes: KeyframePolicy,
    pub gates: GateConfig,
    pub flags: CaseFlags,
    pub icp: IcpParams,
    pub global: GlobalParams,
    pub overlap_radius: f64,
    pub sigma_per_rmse: f64,
    pub min_sigma_xy: f64,
    pub min_sigma_theta: f64,
    /// Association radius of the second, tighter ICP pass.
    pub fine_match_radius: f64,
    /// Dead-reckoning covariance of one motion step.
    pub step_covariance: Mat3,
    pub partner_step_covariance: Mat3,
    pub prior_covariance: Mat3,
    pub nssm_min_gap: usize,
    pub nssm_radius: f64,
    pub nssm_max: usize,
    pub descriptor_max_dist: f64,
    pub descriptor_neighbors: usize,
    pub scene_cell: f64,
    pub compression_resolution: f64,
    pub update_translation: f64,
    pub update_rotation: f64,
    pub lm: LmParams,
}

impl NodeParams {
    pub fn from_config(cfg: &MissionConfig) -> NodeParams {
        let m = &cfg.motion;
        let step = Mat3::from_sigmas([
            m.sigma_x.max(m.floor_sigma_xy),
            m.sigma_y.max(m.floor_sigma_xy),
            m.sigma_theta_deg.max(m.floor_sigma_theta_deg).to_radians(),
        ]);
        let l = &cfg.loops;
        NodeParams {
            cfar: cfg.cfar(),
            voxel: cfg.frontend.voxel,
            max_range: cfg.sonar.max_range,
            keyframes: cfg.keyframe_policy(),
            gates: cfg.gate_config(),
            flags: cfg.flags(),
            icp: cfg.icp(),
            global: cfg.global(),
            overlap_radius: cfg.registration.overlap_radius,
            sigma_per_rmse: cfg.registration.sigma_per_rmse,
            min_sigma_xy: cfg.registration.min_sigma_xy,
            min_sigma_theta: cfg.registration.min_sigma_theta_deg.to_radians(),
            fine_match_radius: cfg.registration.fine_match_radius,
            step_covariance: step,
            partner_step_covariance: Mat3::from_sigmas([
                l.partner_sigma_xy,
                l.partner_sigma_xy,
                l.partner_sigma_theta_deg.to_radians(),
            ]),
            prior_covariance: Mat3::from_sigmas([1e-3, 1e-3, 1e-4]),
            nssm_min_gap: l.nssm_min_gap,
            nssm_radius: l.nssm_radius,
            nssm_max: l.nssm_max_candidates,
            descriptor_max_dist: cfg.place.max_dist,
            descriptor_neighbors: cfg.place.neighbors,
            scene_cell: cfg.place.scene_cell,
            compression_resolution: cfg.comms.compression_resolution,
            update_translation: cfg.comms.update_translation,
            update_rotation: cfg.comms.update_rotation_deg.to_radians(),
            lm: LmParams::default(),
        }
    }

    /// Polishes a registration with a tighter association gate. Keeps the
    /// input when the fine pass fails or loses most of the matches.
    fn refine(&self, source: &PointCloud2D, target: &PointCloud2D, r: RegistrationResult) -> RegistrationResult {
        if self.fine_match_radius >= self.icp.match_radius {
            return r;
        }
        let fine = IcpParams {
            match_radius: self.fine_match_radius,
            ..self.icp
        };
        match icp(source, target, r.transform, &fine) {
            Ok(f) if 2 * f.matched >= r.matched => f,
            _ => r,
        }
    }

    fn registration_covariance(&self, r: &RegistrationResult) -> Mat3 {
        let s = self.sigma_per_rmse * r.rmse;
        Mat3::from_sigmas([
            s.max(self.min_sigma_xy),
            s.max(self.min_sigma_xy),
            (s / 10.0).max(self.min_sigma_theta),
        ])
    }
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub time: f64,
    pub cloud: PointCloud2D,
    pub descriptor: SceneDescriptor,
    pub image: SceneImage,
    pub dead_reckoning: Pose2,
    /// Motion steps since the previous keyframe.
    pub steps: usize,
}

#[derive(Clone, Debug)]
struct PartnerFrame {
    pose: Pose2,
    descriptor: SceneDescriptor,
    cloud: Option<(PointCloud2D, SceneImage)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Found,
    Received,
}

#[derive(Clone, Debug, Default)]
struct Partner {
    frames: BTreeMap<KeyframeId, PartnerFrame>,
    tree: DescriptorTree,
    requested: BTreeSet<KeyframeId>,
    /// Own keyframes to try against a partner keyframe once its cloud arrives.
    pending: BTreeMap<KeyframeId, BTreeSet<KeyframeId>>,
    tried: BTreeSet<(KeyframeId, KeyframeId)>,
    /// Loop candidates oriented own -> partner.
    pool: Vec<LoopCandidate>,
    origin: Vec<Origin>,
    accepted: Vec<usize>,
    announced: BTreeSet<(Key, Key)>,
    dirty: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub keyframes: usize,
    pub ssm_added: usize,
    pub ssm_rejected: usize,
    pub nssm_candidates: usize,
    pub ir_attempts: usize,
    pub ir_gate_pre_rejected: usize,
    pub ir_registration_failed: usize,
    pub ir_overlap_rejected: usize,
    pub ir_candidates: usize,
    pub clouds_requested: usize,
    pub clouds_sent: usize,
    pub errors: usize,
}

/// Dead-reckoning chain of one robot, composed with first-order covariance.
struct DeadReckoning<'a> {
    robot: RobotId,
    keyframes: &'a [Keyframe],
    step: Mat3,
}

impl DeadReckoning<'_> {
    fn chain(&self, from: usize, to: usize) -> RelativePose {
        // tiny floor keeps a zero-length chain positive definite
        let mut acc = RelativePose::new(Pose2::IDENTITY, Mat3::IDENTITY.scale(1e-9));
        for k in from..to {
            let (a, b) = (&self.keyframes[k], &self.keyframes[k + 1]);
            let inc = RelativePose::new(
                a.dead_reckoning.between(&b.dead_reckoning),
                self.step.scale(b.steps.max(1) as f64),
            );
            acc = acc.compose(&inc);
        }
        acc
    }
}

impl Odometry for DeadReckoning<'_> {
    fn relative(&self, from: Key, to: Key) -> Option<RelativePose> {
        if from.robot != self.robot || to.robot != self.robot {
            return None;
        }
        let (a, b) = (from.frame as usize, to.frame as usize);
        if a.max(b) >= self.keyframes.len() {
            return None;
        }
        Some(if a <= b { self.chain(a, b) } else { self.chain(b, a).inverse() })
    }
}

/// Own dead reckoning plus the partner's shared estimates.
struct TeamOdometry<'a> {
    own: DeadReckoning<'a>,
    partner: RobotId,
    partner_frames: &'a BTreeMap<KeyframeId, PartnerFrame>,
    partner_step: Mat3,
}

impl Odometry for TeamOdometry<'_> {
    fn relative(&self, from: Key, to: Key) -> Option<RelativePose> {
        if from.robot == self.own.robot {
            return self.own.relative(from, to);
        }
        if from.robot != self.partner || to.robot != self.partner {
            return None;
        }
        let a = self.partner_frames.get(&from.frame)?.pose;
        let b = self.partner_frames.get(&to.frame)?.pose;
        let gap = (from.frame as f64 - to.frame as f64).abs().max(1.0);
        Some(RelativePose::new(a.between(&b), self.partner_step.scale(gap)))
    }
}

fn to_f32(p: &Pose2) -> [f32; 3] {
    [p.x as f32, p.y as f32, p.theta as f32]
}

fn from_f32(p: &[f32; 3]) -> Pose2 {
    Pose2::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

fn descriptor_mass(d: &SceneDescriptor) -> usize {
    d.bins.iter().map(|&b| b as usize).sum()
}

pub struct RobotNode {
    pub id: RobotId,
    pub params: NodeParams,
    pub graph: GraphState,
    pub keyframes: Vec<Keyframe>,
    pub stats: NodeStats,
    own_tree: DescriptorTree,
    steps_since_keyframe: usize,
    nssm_pool: Vec<LoopCandidate>,
    nssm_dist: Vec<Vec<Option<f64>>>,
    partners: BTreeMap<RobotId, Partner>,
    last_sent: BTreeMap<KeyframeId, Pose2>,
    replied: BTreeSet<KeyframeId>,
    now: f64,
}

impl RobotNode {
    pub fn new(id: RobotId, params: NodeParams) -> RobotNode {
        RobotNode {
            id,
            params,
            graph: GraphState::new(id),
            keyframes: Vec::new(),
            stats: NodeStats::default(),
            own_tree: DescriptorTree::new(),
            steps_since_keyframe: 0,
            nssm_pool: Vec::new(),
            nssm_dist: Vec::new(),
            partners: BTreeMap::new(),
            last_sent: BTreeMap::new(),
            replied: BTreeSet::new(),
            now: 0.0,
        }
    }

    /// Accepted inter-robot loops, oriented own -> partner.
    pub fn accepted_loops(&self) -> Vec<LoopCandidate> {
        self.partners
            .values()
            .flat_map(|p| p.accepted.iter().map(|&i| p.pool[i]))
            .collect()
    }

    pub fn own_key(&self, frame: KeyframeId) -> Key {
        Key::new(self.id, frame)
    }

    /// One scheduler tick. `moved` is false only on the very first tick.
    /// Returns the id of a keyframe created during this tick.
    pub fn tick(
        &mut self,
        t: f64,
        moved: bool,
        dead_reckoning: Pose2,
        scan: &mut dyn FnMut() -> PolarImage,
        channel: &mut Channel,
    ) -> Option<KeyframeId> {
        self.now = t;
        if moved {
            self.steps_since_keyframe += 1;
        }
        let mut graph_dirty = false;
        let new_kf = match self.keyframes.last() {
            None => true,
            Some(last) => maybe_add_keyframe(&last.dead_reckoning.between(&dead_reckoning), &self.params.keyframes),
        };
        let created = if new_kf {
            let img = scan();
            let id = self.add_keyframe(t, dead_reckoning, &img);
            graph_dirty = true;
            Some(id)
        } else {
            None
        };

        while let Some(d) = channel.receive(self.id) {
            self.handle(d, channel);
        }

        if let Some(id) = created {
            self.match_new_keyframe(id, channel);
        }

        if self.partners.values().any(|p| p.dirty) {
            self.reselect_partner_loops(channel);
            graph_dirty = true;
        }
        if graph_dirty {
            self.optimize(channel);
        }
        if let Some(id) = created {
            let kf = &self.keyframes[id as usize];
            let pose = self.graph.pose(&self.own_key(id)).unwrap_or(Pose2::IDENTITY);
            self.send(
                channel,
                NetMessage::Descriptor {
                    sender: self.id,
                    frame: id,
                    pose: to_f32(&pose),
                    histogram: kf.descriptor.bins,
                },
            );
            self.last_sent.insert(id, pose);
        }
        created
    }

    fn send(&mut self, channel: &mut Channel, m: NetMessage) {
        if let Err(e) = channel.broadcast(&m, self.now) {
            warn!("robot {}: broadcast failed: {e}", self.id);
            self.stats.errors += 1;
        }
    }

    fn add_keyframe(&mut self, t: f64, dr: Pose2, img: &PolarImage) -> KeyframeId {
        let id = self.keyframes.len() as KeyframeId;
        let cloud = match cfar_detect(img, &self.params.cfar).and_then(|mask| mask_to_cloud(&mask, img, id)) {
            Ok(raw) => downsample_medoid(&raw, self.params.voxel),
            Err(e) => {
                warn!("robot {}: frontend failed on keyframe {id}: {e}", self.id);
                self.stats.errors += 1;
                PointCloud2D::new(Vec::new(), id)
            }
        };
        let descriptor = make_descriptor(&cloud, self.params.max_range);
        let image = make_scene_image(&cloud, self.params.scene_cell, self.params.max_range);
        let kf = Keyframe {
            id,
            time: t,
            cloud,
            descriptor,
            image,
            dead_reckoning: dr,
            steps: self.steps_since_keyframe,
        };
        self.steps_since_keyframe = 0;
        let key = self.own_key(id);
        let result = if id == 0 {
            self.graph.add_factor(Factor::prior(key, Pose2::IDENTITY, self.params.prior_covariance))
        } else {
            let prev = &self.keyframes[id as usize - 1];
            let delta = prev.dead_reckoning.between(&dr);
            let cov = self.params.step_covariance.scale(kf.steps.max(1) as f64);
            self.graph
                .add_factor(Factor::between(FactorKind::Odometry, self.own_key(id - 1), key, delta, cov))
        };
        if let Err(e) = result {
            warn!("robot {}: keyframe {id} factor rejected: {e}", self.id);
            self.stats.errors += 1;
        }
        self.own_tree.insert(key, &kf.descriptor);
        self.keyframes.push(kf);
        self.stats.keyframes += 1;
        if id > 0 {
            self.sequential_match(id);
            self.loop_search(id);
        }
        id
    }

    fn sequential_match(&mut self, id: KeyframeId) {
        let (prev, cur) = (&self.keyframes[id as usize - 1], &self.keyframes[id as usize]);
        if prev.cloud.len() < 10 || cur.cloud.len() < 10 {
            return;
        }
        let init = prev.dead_reckoning.between(&cur.dead_reckoning);
        let accepted = match icp(&cur.cloud, &prev.cloud, init, &self.params.icp) {
            Ok(r) => {
                let r = self.params.refine(&cur.cloud, &prev.cloud, r);
                let ovl = overlap(&cur.cloud, &prev.cloud, &r.transform, self.params.overlap_radius);
                let jump = init.between(&r.transform);
                let plausible = jump.translation_norm() <= 1.0 && jump.theta.abs() <= 10f64.to_radians();
                (ovl >= self.params.gates.min_overlap && plausible).then_some(r)
            }
            Err(e) => {
                debug!("robot {}: ssm {id} failed: {e}", self.id);
                None
            }
        };
        match accepted {
            Some(r) => {
                let cov = self.params.registration_covariance(&r);
                let f = Factor::between(FactorKind::Ssm, self.own_key(id - 1), self.own_key(id), r.transform, cov);
                match self.graph.add_factor(f) {
                    Ok(()) => self.stats.ssm_added += 1,
                    Err(e) => warn!("robot {}: ssm factor rejected: {e}", self.id),
                }
            }
            None => self.stats.ssm_rejected += 1,
        }
    }

    /// Intra-robot loop closures against older keyframes that are nearby or
    /// look alike.
    fn loop_search(&mut self, id: KeyframeId) {
        let p = &self.params;
        if (id as usize) < p.nssm_min_gap {
            return;
        }
        let Some(cur_pose) = self.graph.pose(&self.own_key(id)) else { return };
        let mut near: Vec<(f64, KeyframeId)> = (0..=(id as usize - p.nssm_min_gap))
            .filter_map(|j| {
                let pose = self.graph.pose(&self.own_key(j as KeyframeId))?;
                let d = Pose2::between(&pose, &cur_pose).translation_norm();
                (d <= p.nssm_radius).then_some((d, j as KeyframeId))
            })
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(p.nssm_max);
        // (frame, use the current estimate as ICP init)
        let mut tries: Vec<(KeyframeId, bool)> = near.iter().map(|&(_, j)| (j, true)).collect();
        // place recognition finds revisits the drifted estimate no longer puts nearby
        let cur_desc = &self.keyframes[id as usize].descriptor;
        if descriptor_mass(cur_desc) >= p.gates.min_points {
            for n in self.own_tree.query(cur_desc, p.descriptor_max_dist, p.descriptor_neighbors) {
                let j = n.key.frame;
                let recent = j as usize + p.nssm_min_gap > id as usize;
                if recent || tries.iter().any(|t| t.0 == j) {
                    continue;
                }
                if descriptor_mass(&self.keyframes[j as usize].descriptor) >= p.gates.min_points {
                    tries.push((j, false));
                }
            }
        }
        let mut found = Vec::new();
        for (j, local) in tries {
            let (old, cur) = (&self.keyframes[j as usize], &self.keyframes[id as usize]);
            if !gate_pre(&cur.cloud, &old.cloud, &cur.image, &old.image, &p.gates).passed() {
                continue;
            }
            let r = if local {
                let init = self.graph.pose(&self.own_key(j)).unwrap().between(&cur_pose);
                icp(&cur.cloud, &old.cloud, init, &p.icp)
            } else {
                global_register(&cur.cloud, &old.cloud, &p.global)
            };
            let Ok(r) = r else { continue };
            let r = p.refine(&cur.cloud, &old.cloud, r);
            let ovl = overlap(&cur.cloud, &old.cloud, &r.transform, p.overlap_radius);
            if !gate_post(&r, ovl, &p.gates).passed() {
                continue;
            }
            let c = LoopCandidate {
                src: self.own_key(j),
                dst: self.own_key(id),
                relative: r.transform,
                covariance: p.registration_covariance(&r),
                overlap: ovl,
                rmse: r.rmse,
            };
            found.push(c);
        }
        if !found.is_empty() {
            for c in found {
                self.push_nssm(c);
            }
            self.rebuild_nssm();
        }
    }

    fn push_nssm(&mut self, c: LoopCandidate) {
        self.stats.nssm_candidates += 1;
        let odo = DeadReckoning {
            robot: self.id,
            keyframes: &self.keyframes,
            step: self.params.step_covariance,
        };
        let n = self.nssm_pool.len();
        let mut row = Vec::with_capacity(n + 1);
        for (i, other) in self.nssm_pool.iter().enumerate() {
            let d = match (odo.relative(other.src, c.src), odo.relative(other.dst, c.dst)) {
                (Some(a), Some(b)) => pairwise_consistency(other, &c, &a, &b).ok(),
                _ => None,
            };
            self.nssm_dist[i].push(d);
            row.push(d);
        }
        row.push(Some(0.0));
        self.nssm_dist.push(row);
        self.nssm_pool.push(c);
    }

    fn rebuild_nssm(&mut self) {
        let inliers: Vec<usize> = if self.params.flags.pcm {
            let ids: Vec<(Key, Key)> = self.nssm_pool.iter().map(|c| (c.src, c.dst)).collect();
            maximum_consistent_set(&self.nssm_dist, self.params.gates.pcm_threshold, &ids)
        } else {
            (0..self.nssm_pool.len()).collect()
        };
        self.graph.remove_factors(|f| f.kind == FactorKind::Nssm);
        for i in inliers {
            let c = self.nssm_pool[i];
            let f = Factor::between(FactorKind::Nssm, c.src, c.dst, c.relative, c.covariance);
            if let Err(e) = self.graph.add_factor(f) {
                debug!("robot {}: nssm factor skipped: {e}", self.id);
            }
        }
    }

    fn handle(&mut self, d: Delivery, channel: &mut Channel) {
        let msg = match d.decode() {
            Ok(m) => m,
            Err(e) => {
                warn!("robot {}: undecodable {} from {}: {e}", self.id, d.kind, d.sender);
                self.stats.errors += 1;
                return;
            }
        };
        match msg {
            NetMessage::Descriptor {
                sender,
                frame,
                pose,
                histogram,
            } => {
                let descriptor = SceneDescriptor {
                    bins: histogram,
                    bin_width: self.params.max_range / histogram.len() as f64,
                };
                let partner = self.partners.entry(sender).or_default();
                partner.frames.insert(
                    frame,
                    PartnerFrame {
                        pose: from_f32(&pose),
                        descriptor,
                        cloud: None,
                    },
                );
                partner.tree.insert(Key::new(sender, frame), &descriptor);
                if !partner.accepted.is_empty() {
                    partner.dirty = true;
                }
                if descriptor_mass(&descriptor) < self.params.gates.min_points {
                    return;
                }
                let hits: Vec<KeyframeId> = self
                    .own_tree
                    .query(&descriptor, self.params.descriptor_max_dist, self.params.descriptor_neighbors)
                    .into_iter()
                    .map(|n| n.key.frame)
                    .filter(|&f| descriptor_mass(&self.keyframes[f as usize].descriptor) >= self.params.gates.min_points)
                    .collect();
                for own in hits {
                    self.want_pair(own, sender, frame, channel);
                }
            }
            NetMessage::CloudRequest { sender: _, target, frame } => {
                if target == self.id && (frame as usize) < self.keyframes.len() && self.replied.insert(frame) {
                    self.reply_cloud(frame, channel);
                }
            }
            NetMessage::Cloud { sender, frame, cloud } => {
                let pc = match cloud {
                    CloudPayload::Compressed(c) => decompress(&c, frame),
                    CloudPayload::Raw(p) => from_raw(&p, frame),
                };
                let image = make_scene_image(&pc, self.params.scene_cell, self.params.max_range);
                let partner = self.partners.entry(sender).or_default();
                let Some(pf) = partner.frames.get_mut(&frame) else {
                    debug!("robot {}: cloud for unknown {}:{}", self.id, sender, frame);
                    return;
                };
                pf.cloud = Some((pc, image));
                let pending = partner.pending.remove(&frame).unwrap_or_default();
                for own in pending {
                    self.try_pair(own, sender, frame);
                }
            }
            NetMessage::Loop {
                src,
                dst,
                transform,
                covariance_diag,
            } => {
                if dst.robot != self.id || src.robot == self.id {
                    return;
                }
                let cov = Mat3::diag([
                    covariance_diag[0] as f64,
                    covariance_diag[1] as f64,
                    covariance_diag[2] as f64,
                ]);
                if !cov.is_spd() {
                    return;
                }
                let theirs = LoopCandidate {
                    src,
                    dst,
                    relative: from_f32(&transform),
                    covariance: cov,
                    overlap: f64::NAN,
                    rmse: f64::NAN,
                };
                let c = theirs.reversed();
                let partner = self.partners.entry(src.robot).or_default();
                if partner.pool.iter().any(|p| p.src == c.src && p.dst == c.dst) {
                    return;
                }
                partner.pool.push(c);
                partner.origin.push(Origin::Received);
                partner.dirty = true;
            }
            NetMessage::PoseUpdate { sender, poses } => {
                let partner = self.partners.entry(sender).or_default();
                for (frame, pose) in poses {
                    if let Some(pf) = partner.frames.get_mut(&frame) {
                        pf.pose = from_f32(&pose);
                    }
                }
                if !partner.accepted.is_empty() || !partner.pool.is_empty() {
                    partner.dirty = true;
                }
            }
        }
    }

    fn reply_cloud(&mut self, frame: KeyframeId, channel: &mut Channel) {
        let cloud = &self.keyframes[frame as usize].cloud;
        let payload = if self.params.flags.compression {
            match compress(cloud, self.params.compression_resolution) {
                Ok(c) => CloudPayload::Compressed(c),
                Err(e) => {
                    warn!("robot {}: compression failed for keyframe {frame}: {e}; sending raw", self.id);
                    CloudPayload::Raw(to_raw(cloud))
                }
            }
        } else {
            CloudPayload::Raw(to_raw(cloud))
        };
        self.stats.clouds_sent += 1;
        self.send(
            channel,
            NetMessage::Cloud {
                sender: self.id,
                frame,
                cloud: payload,
            },
        );
    }

    /// Registers own keyframe `own` against partner keyframe `frame`, asking
    /// for the partner cloud first if it is not here yet.
    fn want_pair(&mut self, own: KeyframeId, robot: RobotId, frame: KeyframeId, channel: &mut Channel) {
        let partner = self.partners.entry(robot).or_default();
        if partner.tried.contains(&(own, frame)) {
            return;
        }
        let have_cloud = partner.frames.get(&frame).is_some_and(|f| f.cloud.is_some());
        if have_cloud {
            self.try_pair(own, robot, frame);
            return;
        }
        partner.pending.entry(frame).or_default().insert(own);
        if partner.requested.insert(frame) {
            self.stats.clouds_requested += 1;
            self.send(
                channel,
                NetMessage::CloudRequest {
                    sender: self.id,
                    target: robot,
                    frame,
                },
            );
        }
    }

    fn try_pair(&mut self, own: KeyframeId, robot: RobotId, frame: KeyframeId) {
        let p = &self.params;
        let Some(partner) = self.partners.get_mut(&robot) else { return };
        if !partner.tried.insert((own, frame)) {
            return;
        }
        let Some((pc, pimg)) = partner.frames.get(&frame).and_then(|f| f.cloud.as_ref()) else { return };
        let kf = &self.keyframes[own as usize];
        self.stats.ir_attempts += 1;
        if !gate_pre(&kf.cloud, pc, &kf.image, pimg, &p.gates).passed() {
            self.stats.ir_gate_pre_rejected += 1;
            return;
        }
        let r = match global_register(pc, &kf.cloud, &p.global) {
            Ok(r) => p.refine(pc, &kf.cloud, r),
            Err(e) => {
                debug!("robot {}: registration {own} vs {robot}:{frame} failed: {e}", self.id);
                self.stats.ir_registration_failed += 1;
                return;
            }
        };
        let ovl = overlap(pc, &kf.cloud, &r.transform, p.overlap_radius);
        if !gate_post(&r, ovl, &p.gates).passed() {
            self.stats.ir_overlap_rejected += 1;
            return;
        }
        let c = LoopCandidate {
            src: Key::new(self.id, own),
            dst: Key::new(robot, frame),
            relative: r.transform,
            covariance: p.registration_covariance(&r),
            overlap: ovl,
            rmse: r.rmse,
        };
        debug!("robot {}: IR candidate {} -> {} overlap {ovl:.2} rmse {:.3}", self.id, c.src, c.dst, r.rmse);
        self.stats.ir_candidates += 1;
        partner.pool.push(c);
        partner.origin.push(Origin::Found);
        partner.dirty = true;
    }

    fn match_new_keyframe(&mut self, id: KeyframeId, channel: &mut Channel) {
        let kf = &self.keyframes[id as usize];
        if descriptor_mass(&kf.descriptor) < self.params.gates.min_points {
            return;
        }
        let desc = kf.descriptor;
        let mut wanted = Vec::new();
        for (&robot, partner) in &self.partners {
            for n in partner
                .tree
                .query(&desc, self.params.descriptor_max_dist, self.params.descriptor_neighbors)
            {
                let pd = &partner.frames[&n.key.frame].descriptor;
                if descriptor_mass(pd) >= self.params.gates.min_points {
                    wanted.push((robot, n.key.frame));
                }
            }
        }
        for (robot, frame) in wanted {
            self.want_pair(id, robot, frame, channel);
        }
    }

    fn reselect_partner_loops(&mut self, channel: &mut Channel) {
        let robots: Vec<RobotId> = self.partners.keys().copied().collect();
        let mut outgoing = Vec::new();
        for robot in robots {
            let partner = &self.partners[&robot];
            if !partner.dirty {
                continue;
            }
            let accepted = if self.params.flags.pcm {
                let odo = TeamOdometry {
                    own: DeadReckoning {
                        robot: self.id,
                        keyframes: &self.keyframes,
                        step: self.params.step_covariance,
                    },
                    partner: robot,
                    partner_frames: &partner.frames,
                    partner_step: self.params.partner_step_covariance,
                };
                pcm_select(&partner.pool, &odo, self.params.gates.pcm_threshold)
            } else {
                (0..partner.pool.len()).collect()
            };
            let partner = self.partners.get_mut(&robot).unwrap();
            partner.accepted = accepted;
            partner.dirty = false;
            for &i in &partner.accepted {
                let c = partner.pool[i];
                if partner.origin[i] == Origin::Found && partner.announced.insert((c.src, c.dst)) {
                    let d = c.covariance.diagonal();
                    outgoing.push(NetMessage::Loop {
                        src: c.src,
                        dst: c.dst,
                        transform: to_f32(&c.relative),
                        covariance_diag: [d[0] as f32, d[1] as f32, d[2] as f32],
                    });
                }
            }
        }
        for m in outgoing {
            self.send(channel, m);
        }
        self.rebuild_partner_factors();
    }

    /// Replaces all inter-robot and partner-chain factors with ones built from
    /// the accepted loops and the latest partner estimates.
    fn rebuild_partner_factors(&mut self) {
        self.graph
            .remove_factors(|f| matches!(f.kind, FactorKind::InterRobot | FactorKind::PartnerRobot));
        for (&robot, partner) in &self.partners {
            if partner.accepted.is_empty() {
                continue;
            }
            let mut anchor = KeyframeId::MAX;
            for &i in &partner.accepted {
                let c = partner.pool[i];
                anchor = anchor.min(c.dst.frame);
                let f = Factor::between(FactorKind::InterRobot, c.src, c.dst, c.relative, c.covariance);
                if let Err(e) = self.graph.add_factor(f) {
                    debug!("robot {}: IR factor skipped: {e}", self.id);
                }
            }
            let frames: Vec<KeyframeId> = partner.frames.keys().copied().collect();
            let Some(a) = frames.iter().position(|&f| f == anchor) else { continue };
            let mut chain = |i: usize| {
                let (fa, fb) = (frames[i], frames[i + 1]);
                let (pa, pb) = (partner.frames[&fa].pose, partner.frames[&fb].pose);
                let gap = (fb - fa) as f64;
                let f = Factor::between(
                    FactorKind::PartnerRobot,
                    Key::new(robot, fa),
                    Key::new(robot, fb),
                    pa.between(&pb),
                    self.params.partner_step_covariance.scale(gap),
                );
                if let Err(e) = self.graph.add_factor(f) {
                    debug!("robot {}: PR factor skipped: {e}", self.id);
                }
            };
            for i in a..frames.len().saturating_sub(1) {
                chain(i);
            }
            for i in (0..a).rev() {
                chain(i);
            }
        }
    }

    fn optimize(&mut self, channel: &mut Channel) {
        match self.graph.optimize(&self.params.lm) {
            Ok(r) => {
                if !r.disconnected.is_empty() {
                    debug!("robot {}: {} poses not anchored", self.id, r.disconnected.len());
                }
            }
            Err(e) => {
                warn!("robot {}: optimization failed: {e}", self.id);
                self.stats.errors += 1;
                return;
            }
        }
        if !self.params.flags.resend {
            return;
        }
        let id = self.id;
        let sent: BTreeMap<Key, Pose2> = self.last_sent.iter().map(|(&f, &p)| (Key::new(id, f), p)).collect();
        let now: BTreeMap<Key, Pose2> = self
            .graph
            .poses
            .iter()
            .filter(|(k, _)| k.robot == id && self.last_sent.contains_key(&k.frame))
            .map(|(k, p)| (*k, *p))
            .collect();
        let changed = changed_poses(&sent, &now, self.params.update_translation, self.params.update_rotation);
        if changed.is_empty() {
            return;
        }
        for (k, p) in &changed {
            self.last_sent.insert(k.frame, *p);
        }
        for chunk in changed.chunks(u16::MAX as usize) {
            let poses = chunk.iter().map(|(k, p)| (k.frame, to_f32(p))).collect();
            self.send(channel, NetMessage::PoseUpdate { sender: id, poses });
        }
    }

    /// Own and partner pose estimates currently held by this robot.
    pub fn estimates(&self) -> &BTreeMap<Key, Pose2> {
        &self.graph.poses
    }
}
