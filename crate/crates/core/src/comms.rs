//! Wire messages of the descriptor-first sharing protocol and a simulated
//! lossless broadcast channel that meters every message it carries.
//!
//! Layouts are big-endian and byte aligned, so `size_bits` is always eight
//! times the encoded length.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::codec::{self, CodecError, CompressedCloud};
use crate::geometry::{Key, KeyframeId, RobotId};
use crate::place::DESCRIPTOR_BINS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommsError {
    #[error("{what} count {count} does not fit its field")]
    Overflow { what: &'static str, count: usize },
    #[error("cloud payload: {0}")]
    Codec(#[from] CodecError),
    #[error("truncated message: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("message time {t} precedes last event at {last}")]
    TimeWentBackwards { t: f64, last: f64 },
    #[error("unknown robot {0}")]
    UnknownRobot(RobotId),
}

#[derive(Clone, Debug, PartialEq)]
pub enum CloudPayload {
    Compressed(CompressedCloud),
    Raw(Vec<[f32; 2]>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum NetMessage {
    Descriptor {
        sender: RobotId,
        frame: KeyframeId,
        pose: [f32; 3],
        histogram: [u8; DESCRIPTOR_BINS],
    },
    CloudRequest {
        sender: RobotId,
        target: RobotId,
        frame: KeyframeId,
    },
    Cloud {
        sender: RobotId,
        frame: KeyframeId,
        cloud: CloudPayload,
    },
    /// Accepted inter-robot loop; `src` belongs to the sending robot.
    Loop {
        src: Key,
        dst: Key,
        transform: [f32; 3],
        covariance_diag: [f32; 3],
    },
    PoseUpdate {
        sender: RobotId,
        poses: Vec<(KeyframeId, [f32; 3])>,
    },
}

/// Message variant, with enough detail to pick the right decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    Descriptor,
    CloudRequest,
    Cloud { compressed: bool },
    Loop,
    PoseUpdate,
}

impl MessageKind {
    pub fn label(&self) -> &'static str {
        match self {
            MessageKind::Descriptor => "descriptor",
            MessageKind::CloudRequest => "cloud_request",
            MessageKind::Cloud { compressed: true } => "cloud_compressed",
            MessageKind::Cloud { compressed: false } => "cloud_raw",
            MessageKind::Loop => "loop",
            MessageKind::PoseUpdate => "pose_update",
        }
    }

    pub fn from_label(s: &str) -> Option<MessageKind> {
        Some(match s {
            "descriptor" => MessageKind::Descriptor,
            "cloud_request" => MessageKind::CloudRequest,
            "cloud_compressed" => MessageKind::Cloud { compressed: true },
            "cloud_raw" => MessageKind::Cloud { compressed: false },
            "loop" => MessageKind::Loop,
            "pose_update" => MessageKind::PoseUpdate,
            _ => return None,
        })
    }

    pub fn is_cloud(&self) -> bool {
        matches!(self, MessageKind::Cloud { .. })
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl NetMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            NetMessage::Descriptor { .. } => MessageKind::Descriptor,
            NetMessage::CloudRequest { .. } => MessageKind::CloudRequest,
            NetMessage::Cloud { cloud, .. } => MessageKind::Cloud {
                compressed: matches!(cloud, CloudPayload::Compressed(_)),
            },
            NetMessage::Loop { .. } => MessageKind::Loop,
            NetMessage::PoseUpdate { .. } => MessageKind::PoseUpdate,
        }
    }

    pub fn sender(&self) -> RobotId {
        match self {
            NetMessage::Descriptor { sender, .. }
            | NetMessage::CloudRequest { sender, .. }
            | NetMessage::Cloud { sender, .. }
            | NetMessage::PoseUpdate { sender, .. } => *sender,
            NetMessage::Loop { src, .. } => src.robot,
        }
    }

    /// Keyframe the message is about: the described or shipped keyframe, the
    /// requested one, or the sender side of a loop.
    pub fn subject(&self) -> Option<Key> {
        match self {
            NetMessage::Descriptor { sender, frame, .. } | NetMessage::Cloud { sender, frame, .. } => {
                Some(Key::new(*sender, *frame))
            }
            NetMessage::CloudRequest { target, frame, .. } => Some(Key::new(*target, *frame)),
            NetMessage::Loop { src, .. } => Some(*src),
            NetMessage::PoseUpdate { .. } => None,
        }
    }

    /// Encoded size from the layout alone.
    pub fn size_bits(&self) -> u64 {
        match self {
            NetMessage::Descriptor { .. } => 8 + 16 + 3 * 32 + 8 * DESCRIPTOR_BINS as u64,
            NetMessage::CloudRequest { .. } => 32,
            NetMessage::Cloud { cloud, .. } => {
                24 + match cloud {
                    CloudPayload::Compressed(c) => c.encoded_bits(),
                    CloudPayload::Raw(p) => codec::COUNT_BITS + codec::raw_payload_bits(p.len()),
                }
            }
            NetMessage::Loop { .. } => 2 * 24 + 3 * 32 + 3 * 32,
            NetMessage::PoseUpdate { poses, .. } => 24 + 112 * poses.len() as u64,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, CommsError> {
        let mut out = Vec::with_capacity((self.size_bits() / 8) as usize);
        match self {
            NetMessage::Descriptor {
                sender,
                frame,
                pose,
                histogram,
            } => {
                out.push(*sender);
                out.extend_from_slice(&frame.to_be_bytes());
                put_f32s(&mut out, pose);
                out.extend_from_slice(histogram);
            }
            NetMessage::CloudRequest { sender, target, frame } => {
                out.push(*sender);
                out.push(*target);
                out.extend_from_slice(&frame.to_be_bytes());
            }
            NetMessage::Cloud { sender, frame, cloud } => {
                out.push(*sender);
                out.extend_from_slice(&frame.to_be_bytes());
                match cloud {
                    CloudPayload::Compressed(c) => c.write_to(&mut out)?,
                    CloudPayload::Raw(p) => codec::write_raw(p, &mut out)?,
                }
            }
            NetMessage::Loop {
                src,
                dst,
                transform,
                covariance_diag,
            } => {
                for k in [src, dst] {
                    out.push(k.robot);
                    out.extend_from_slice(&k.frame.to_be_bytes());
                }
                put_f32s(&mut out, transform);
                put_f32s(&mut out, covariance_diag);
            }
            NetMessage::PoseUpdate { sender, poses } => {
                let count = u16::try_from(poses.len()).map_err(|_| CommsError::Overflow {
                    what: "pose",
                    count: poses.len(),
                })?;
                out.push(*sender);
                out.extend_from_slice(&count.to_be_bytes());
                for (frame, pose) in poses {
                    out.extend_from_slice(&frame.to_be_bytes());
                    put_f32s(&mut out, pose);
                }
            }
        }
        debug_assert_eq!(out.len() as u64 * 8, self.size_bits());
        Ok(out)
    }

    pub fn decode(kind: MessageKind, buf: &[u8]) -> Result<NetMessage, CommsError> {
        let mut r = Reader { buf, at: 0 };
        let msg = match kind {
            MessageKind::Descriptor => NetMessage::Descriptor {
                sender: r.u8()?,
                frame: r.u16()?,
                pose: r.f32s()?,
                histogram: r.take(DESCRIPTOR_BINS)?.try_into().expect("length checked"),
            },
            MessageKind::CloudRequest => NetMessage::CloudRequest {
                sender: r.u8()?,
                target: r.u8()?,
                frame: r.u16()?,
            },
            MessageKind::Cloud { compressed } => {
                let sender = r.u8()?;
                let frame = r.u16()?;
                let rest = &buf[r.at..];
                let (cloud, used) = if compressed {
                    let (c, used) = CompressedCloud::read_from(rest)?;
                    (CloudPayload::Compressed(c), used)
                } else {
                    let (p, used) = codec::read_raw(rest)?;
                    (CloudPayload::Raw(p), used)
                };
                r.at += used;
                NetMessage::Cloud { sender, frame, cloud }
            }
            MessageKind::Loop => {
                let src = Key::new(r.u8()?, r.u16()?);
                let dst = Key::new(r.u8()?, r.u16()?);
                NetMessage::Loop {
                    src,
                    dst,
                    transform: r.f32s()?,
                    covariance_diag: r.f32s()?,
                }
            }
            MessageKind::PoseUpdate => {
                let sender = r.u8()?;
                let count = r.u16()? as usize;
                let mut poses = Vec::with_capacity(count);
                for _ in 0..count {
                    poses.push((r.u16()?, r.f32s()?));
                }
                NetMessage::PoseUpdate { sender, poses }
            }
        };
        if r.at != buf.len() {
            return Err(CommsError::TrailingBytes(buf.len() - r.at));
        }
        Ok(msg)
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32; 3]) {
    for x in v {
        out.extend_from_slice(&x.to_be_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CommsError> {
        let need = self.at + n;
        if need > self.buf.len() {
            return Err(CommsError::Truncated {
                need,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.at..need];
        self.at = need;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CommsError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CommsError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn f32s(&mut self) -> Result<[f32; 3], CommsError> {
        let b = self.take(12)?;
        Ok(core::array::from_fn(|i| {
            f32::from_be_bytes([b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]])
        }))
    }
}

/// How a broadcast is charged against the channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metering {
    /// One log event per broadcast.
    #[default]
    Once,
    /// One log event per recipient.
    PerRecipient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEvent {
    pub time: f64,
    pub sender: RobotId,
    pub kind: MessageKind,
    pub size_bits: u64,
    pub subject: Option<Key>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Delivery {
    pub time: f64,
    pub sender: RobotId,
    pub kind: MessageKind,
    pub bytes: Vec<u8>,
}

impl Delivery {
    pub fn decode(&self) -> Result<NetMessage, CommsError> {
        NetMessage::decode(self.kind, &self.bytes)
    }
}

/// Reliable, in-order, zero-latency broadcast medium shared by the team.
#[derive(Clone, Debug)]
pub struct Channel {
    queues: Vec<VecDeque<Delivery>>,
    log: Vec<LogEvent>,
    metering: Metering,
    last_time: f64,
}

impl Channel {
    pub fn new(robots: usize, metering: Metering) -> Channel {
        Channel {
            queues: (0..robots).map(|_| VecDeque::new()).collect(),
            log: Vec::new(),
            metering,
            last_time: f64::NEG_INFINITY,
        }
    }

    pub fn robots(&self) -> usize {
        self.queues.len()
    }

    /// Encodes `m` and enqueues the bytes for every robot except the sender.
    pub fn broadcast(&mut self, m: &NetMessage, t: f64) -> Result<(), CommsError> {
        if t < self.last_time {
            return Err(CommsError::TimeWentBackwards { t, last: self.last_time });
        }
        let sender = m.sender();
        if sender as usize >= self.queues.len() {
            return Err(CommsError::UnknownRobot(sender));
        }
        let bytes = m.encode()?;
        let kind = m.kind();
        let event = LogEvent {
            time: t,
            sender,
            kind,
            size_bits: 8 * bytes.len() as u64,
            subject: m.subject(),
        };
        let recipients = self.queues.len() - 1;
        match self.metering {
            Metering::Once => self.log.push(event),
            Metering::PerRecipient => self.log.extend(core::iter::repeat(event).take(recipients)),
        }
        for (r, q) in self.queues.iter_mut().enumerate() {
            if r != sender as usize {
                q.push_back(Delivery {
                    time: t,
                    sender,
                    kind,
                    bytes: bytes.clone(),
                });
            }
        }
        self.last_time = t;
        Ok(())
    }

    pub fn receive(&mut self, robot: RobotId) -> Option<Delivery> {
        self.queues.get_mut(robot as usize)?.pop_front()
    }

    pub fn pending(&self, robot: RobotId) -> usize {
        self.queues.get(robot as usize).map_or(0, |q| q.len())
    }

    pub fn log(&self) -> &[LogEvent] {
        &self.log
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatePoint {
    pub time: f64,
    pub bits_per_second: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Utilization {
    pub series: Vec<RatePoint>,
    pub total_bits: u64,
    pub duration: f64,
    /// Total bits over mission duration.
    pub average: f64,
    pub min: f64,
    pub max: f64,
}

/// Sliding-window rate at every event plus a whole-mission summary.
///
/// The window ending at event `i` spans the last `window` events and the
/// time since the event before them (mission start, `t = 0`, for the first).
/// Windows with zero elapsed time have no defined rate and are skipped.
/// `duration` defaults to the last event time when not positive.
pub fn utilization(log: &[LogEvent], window: usize, duration: f64) -> Utilization {
    let window = window.max(1);
    let total_bits: u64 = log.iter().map(|e| e.size_bits).sum();
    let duration = if duration > 0.0 {
        duration
    } else {
        log.last().map_or(0.0, |e| e.time)
    };
    let mut prefix = Vec::with_capacity(log.len() + 1);
    prefix.push(0u64);
    for e in log {
        prefix.push(prefix.last().unwrap() + e.size_bits);
    }
    let mut series = Vec::with_capacity(log.len());
    for (i, e) in log.iter().enumerate() {
        let s = (i + 1).saturating_sub(window);
        let start = if s == 0 { 0.0 } else { log[s - 1].time };
        let elapsed = e.time - start;
        if elapsed > 0.0 {
            let bits = (prefix[i + 1] - prefix[s]) as f64;
            series.push(RatePoint {
                time: e.time,
                bits_per_second: bits / elapsed,
            });
        }
    }
    let min = series.iter().map(|p| p.bits_per_second).fold(f64::INFINITY, f64::min);
    let max = series.iter().map(|p| p.bits_per_second).fold(0.0, f64::max);
    Utilization {
        total_bits,
        duration,
        average: if duration > 0.0 { total_bits as f64 / duration } else { 0.0 },
        min: if series.is_empty() { 0.0 } else { min },
        max,
        series,
    }
}

/// A log event that broke the descriptor, request, cloud ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalityViolation {
    pub index: usize,
    pub event: LogEvent,
}

/// Checks that every cloud follows a request for that keyframe, and every
/// request follows the matching descriptor.
pub fn check_causality(log: &[LogEvent]) -> Result<(), CausalityViolation> {
    let mut described: BTreeSet<Key> = BTreeSet::new();
    let mut requested: BTreeMap<Key, usize> = BTreeMap::new();
    for (index, e) in log.iter().enumerate() {
        let ok = match (e.kind, e.subject) {
            (MessageKind::Descriptor, Some(k)) => {
                described.insert(k);
                true
            }
            (MessageKind::CloudRequest, Some(k)) => {
                *requested.entry(k).or_default() += 1;
                described.contains(&k)
            }
            (MessageKind::Cloud { .. }, Some(k)) => requested.contains_key(&k) && k.robot == e.sender,
            (MessageKind::Descriptor | MessageKind::CloudRequest | MessageKind::Cloud { .. }, None) => false,
            _ => true,
        };
        if !ok {
            return Err(CausalityViolation {
                index,
                event: e.clone(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn descriptor(sender: RobotId, frame: KeyframeId) -> NetMessage {
        NetMessage::Descriptor {
            sender,
            frame,
            pose: [1.0, -2.0, 0.5],
            histogram: core::array::from_fn(|i| i as u8),
        }
    }

    #[test]
    fn layout_sizes() {
        assert_eq!(descriptor(0, 3).size_bits(), 248);
        assert_eq!(descriptor(0, 3).encode().unwrap().len(), 31);
        let req = NetMessage::CloudRequest { sender: 1, target: 0, frame: 3 };
        assert_eq!(req.encode().unwrap().len() * 8, 32);
        let cells: Vec<(u8, u8)> = (0..139u16).map(|k| ((k / 16) as u8, (k % 16) as u8)).collect();
        let cloud = NetMessage::Cloud {
            sender: 0,
            frame: 3,
            cloud: CloudPayload::Compressed(CompressedCloud { origin: [0.0, 0.0], resolution: 0.3, cells }),
        };
        assert_eq!(cloud.size_bits(), 2360);
        assert_eq!(cloud.encode().unwrap().len() * 8, 2360);
        let raw = NetMessage::Cloud { sender: 0, frame: 3, cloud: CloudPayload::Raw(alloc::vec![[0.0, 0.0]; 139]) };
        assert_eq!(raw.size_bits(), 24 + 16 + 64 * 139);
        let lp = NetMessage::Loop { src: Key::new(0, 1), dst: Key::new(1, 2), transform: [0.0; 3], covariance_diag: [1.0; 3] };
        assert_eq!(lp.encode().unwrap().len() * 8, 240);
        let empty = NetMessage::PoseUpdate { sender: 2, poses: Vec::new() };
        assert_eq!(empty.encode().unwrap().len() * 8, 24);
        let two = NetMessage::PoseUpdate { sender: 2, poses: alloc::vec![(1, [0.0; 3]), (2, [1.0; 3])] };
        assert_eq!(two.size_bits(), 24 + 224);
    }

    #[test]
    fn pose_update_overflow() {
        let m = NetMessage::PoseUpdate { sender: 0, poses: alloc::vec![(0, [0.0; 3]); 70_000] };
        assert!(matches!(m.encode(), Err(CommsError::Overflow { .. })));
    }

    #[test]
    fn decode_rejects_bad_lengths() {
        let bytes = descriptor(1, 2).encode().unwrap();
        assert!(matches!(NetMessage::decode(MessageKind::Descriptor, &bytes[..30]), Err(CommsError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(NetMessage::decode(MessageKind::Descriptor, &long), Err(CommsError::TrailingBytes(1)));
    }

    #[test]
    fn broadcast_fan_out_and_log() {
        let mut ch = Channel::new(3, Metering::Once);
        ch.broadcast(&descriptor(0, 1), 1.0).unwrap();
        assert_eq!(ch.pending(0), 0);
        assert_eq!(ch.pending(1), 1);
        assert_eq!(ch.pending(2), 1);
        assert_eq!(ch.log().len(), 1);
        let d = ch.receive(2).unwrap();
        assert_eq!(d.decode().unwrap(), descriptor(0, 1));
        assert_eq!(d.bytes, descriptor(0, 1).encode().unwrap());

        let mut per = Channel::new(3, Metering::PerRecipient);
        per.broadcast(&descriptor(0, 1), 1.0).unwrap();
        assert_eq!(per.log().len(), 2);
    }

    #[test]
    fn fifo_and_time_order() {
        let mut ch = Channel::new(2, Metering::Once);
        ch.broadcast(&descriptor(0, 1), 2.0).unwrap();
        ch.broadcast(&descriptor(0, 2), 2.0).unwrap();
        assert_eq!(ch.log()[0].subject, Some(Key::new(0, 1)));
        assert_eq!(ch.log()[1].subject, Some(Key::new(0, 2)));
        assert_eq!(ch.receive(1).unwrap().decode().unwrap(), descriptor(0, 1));
        assert_eq!(ch.receive(1).unwrap().decode().unwrap(), descriptor(0, 2));
        assert!(ch.receive(1).is_none());
        assert!(matches!(ch.broadcast(&descriptor(0, 3), 1.0), Err(CommsError::TimeWentBackwards { .. })));
        assert_eq!(ch.broadcast(&descriptor(5, 3), 3.0), Err(CommsError::UnknownRobot(5)));
    }

    fn event(time: f64, bits: u64) -> LogEvent {
        LogEvent { time, sender: 0, kind: MessageKind::Descriptor, size_bits: bits, subject: None }
    }

    #[test]
    fn utilization_examples() {
        let u = utilization(&[], 100, 50.0);
        assert_eq!((u.average, u.min, u.max, u.total_bits), (0.0, 0.0, 0.0, 0));
        let log: Vec<LogEvent> = (1..=100).map(|i| event(i as f64 * 0.1, 100)).collect();
        let u = utilization(&log, 100, 0.0);
        assert!((u.series.last().unwrap().bits_per_second - 1000.0).abs() < 1e-9);
        assert!((u.average - 1000.0).abs() < 1e-9);
        for w in [1, 7, 100, 1000] {
            let v = utilization(&log, w, 20.0);
            assert_eq!(v.average, 500.0);
            assert!(v.min <= v.max);
        }
        // simultaneous events at t = 0 have no rate
        assert!(utilization(&[event(0.0, 8)], 100, 1.0).series.is_empty());
    }

    #[test]
    fn causality() {
        let ev = |kind, sender, subject| LogEvent { time: 0.0, sender, kind, size_bits: 8, subject: Some(subject) };
        let k = Key::new(0, 4);
        let cloud = MessageKind::Cloud { compressed: true };
        let good = [ev(MessageKind::Descriptor, 0, k), ev(MessageKind::CloudRequest, 1, k), ev(cloud, 0, k)];
        assert!(check_causality(&good).is_ok());
        let early = [ev(MessageKind::Descriptor, 0, k), ev(cloud, 0, k)];
        assert_eq!(check_causality(&early).unwrap_err().index, 1);
        let blind = [ev(MessageKind::CloudRequest, 1, k)];
        assert_eq!(check_causality(&blind).unwrap_err().index, 0);
    }

    fn arb_message() -> impl Strategy<Value = NetMessage> {
        let f3 = proptest::array::uniform3(any::<f32>());
        prop_oneof![
            (any::<u8>(), any::<u16>(), f3.clone(), proptest::array::uniform16(any::<u8>()))
                .prop_map(|(sender, frame, pose, histogram)| NetMessage::Descriptor { sender, frame, pose, histogram }),
            (any::<u8>(), any::<u8>(), any::<u16>()).prop_map(|(sender, target, frame)| NetMessage::CloudRequest { sender, target, frame }),
            (any::<u8>(), any::<u16>(), proptest::collection::btree_set((any::<u8>(), any::<u8>()), 0..200), any::<[f32; 3]>())
                .prop_map(|(sender, frame, cells, h)| NetMessage::Cloud {
                    sender,
                    frame,
                    cloud: CloudPayload::Compressed(CompressedCloud { origin: [h[0], h[1]], resolution: h[2], cells: cells.into_iter().collect() }),
                }),
            (any::<u8>(), any::<u16>(), proptest::collection::vec(any::<[f32; 2]>(), 0..100))
                .prop_map(|(sender, frame, pts)| NetMessage::Cloud { sender, frame, cloud: CloudPayload::Raw(pts) }),
            (any::<(u8, u16, u8, u16)>(), f3.clone(), f3.clone()).prop_map(|((a, b, c, d), transform, covariance_diag)| NetMessage::Loop {
                src: Key::new(a, b),
                dst: Key::new(c, d),
                transform,
                covariance_diag,
            }),
            (any::<u8>(), proptest::collection::vec((any::<u16>(), f3), 0..40)).prop_map(|(sender, poses)| NetMessage::PoseUpdate { sender, poses }),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(m in arb_message()) {
            let bytes = m.encode().unwrap();
            prop_assert_eq!(bytes.len() as u64 * 8, m.size_bits());
            let back = NetMessage::decode(m.kind(), &bytes).unwrap();
            // compare through bytes so NaN payloads count as equal
            prop_assert_eq!(back.encode().unwrap(), bytes);
        }
    }
}
