//! Voxel-grid point cloud compression.
//!
//! Points are snapped to a grid of resolution `delta` anchored at the cloud's
//! minimum corner; each occupied voxel is sent as a pair of `u8` indices and
//! decoded to its center. Wire layout (big-endian):
//!
//! ```text
//! [origin_x f32][origin_y f32][resolution f32][count u16][(i u8)(j u8) x count]
//! ```

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use thiserror::Error;

use crate::geometry::{KeyframeId, Point2, PointCloud2D};
use crate::math::floor;

/// Header bits: origin and resolution as three `f32`.
pub const HEADER_BITS: u64 = 96;
pub const COUNT_BITS: u64 = 16;
pub const CELL_BITS: u64 = 16;
/// Payload bits of one raw point (two `f32`).
pub const RAW_POINT_BITS: u64 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("resolution must be positive and finite")]
    InvalidResolution,
    #[error("cloud extent needs voxel index {index} > 255; resolution too small")]
    Overflow { index: i64 },
    #[error("non-finite point in cloud")]
    NonFinite,
    #[error("too many cells for a u16 count: {0}")]
    TooManyCells(usize),
    #[error("truncated buffer: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("duplicate or unordered cell in encoded cloud")]
    Malformed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedCloud {
    pub origin: [f32; 2],
    pub resolution: f32,
    /// Unique, sorted by `(i, j)`.
    pub cells: Vec<(u8, u8)>,
}

impl CompressedCloud {
    pub fn count(&self) -> usize {
        self.cells.len()
    }

    pub fn encoded_bits(&self) -> u64 {
        HEADER_BITS + COUNT_BITS + CELL_BITS * self.cells.len() as u64
    }

    pub fn write_to(&self, out: &mut Vec<u8>) -> Result<(), CodecError> {
        let count = u16::try_from(self.cells.len()).map_err(|_| CodecError::TooManyCells(self.cells.len()))?;
        out.extend_from_slice(&self.origin[0].to_be_bytes());
        out.extend_from_slice(&self.origin[1].to_be_bytes());
        out.extend_from_slice(&self.resolution.to_be_bytes());
        out.extend_from_slice(&count.to_be_bytes());
        for &(i, j) in &self.cells {
            out.push(i);
            out.push(j);
        }
        Ok(())
    }

    /// Parses one cloud from the front of `buf`, returning it and the bytes consumed.
    pub fn read_from(buf: &[u8]) -> Result<(CompressedCloud, usize), CodecError> {
        const FIXED: usize = 14;
        if buf.len() < FIXED {
            return Err(CodecError::Truncated {
                need: FIXED,
                have: buf.len(),
            });
        }
        let f = |o: usize| f32::from_be_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]);
        let origin = [f(0), f(4)];
        let resolution = f(8);
        let count = u16::from_be_bytes([buf[12], buf[13]]) as usize;
        let need = FIXED + 2 * count;
        if buf.len() < need {
            return Err(CodecError::Truncated { need, have: buf.len() });
        }
        let cells: Vec<(u8, u8)> = buf[FIXED..need].chunks_exact(2).map(|c| (c[0], c[1])).collect();
        if cells.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CodecError::Malformed);
        }
        Ok((
            CompressedCloud {
                origin,
                resolution,
                cells,
            },
            need,
        ))
    }
}

/// Largest `f32` not above `v`, so grid indices relative to it are never negative.
fn f32_at_or_below(v: f64) -> f32 {
    let mut o = v as f32;
    while f64::from(o) > v {
        o = next_down(o);
    }
    o
}

fn next_down(x: f32) -> f32 {
    if x == 0.0 {
        return -f32::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f32::from_bits(bits - 1)
    } else {
        f32::from_bits(bits + 1)
    }
}

pub fn compress(cloud: &PointCloud2D, delta: f64) -> Result<CompressedCloud, CodecError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(CodecError::InvalidResolution);
    }
    let resolution = delta as f32;
    if cloud.is_empty() {
        return Ok(CompressedCloud {
            origin: [0.0, 0.0],
            resolution,
            cells: Vec::new(),
        });
    }
    if cloud.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(CodecError::NonFinite);
    }
    let (mut mx, mut my) = (f64::INFINITY, f64::INFINITY);
    for p in &cloud.points {
        mx = mx.min(p.x);
        my = my.min(p.y);
    }
    let origin = [f32_at_or_below(mx), f32_at_or_below(my)];
    let (ox, oy, res) = (f64::from(origin[0]), f64::from(origin[1]), f64::from(resolution));
    let mut cells = BTreeSet::new();
    for p in &cloud.points {
        let i = floor((p.x - ox) / res) as i64;
        let j = floor((p.y - oy) / res) as i64;
        let idx = |v: i64| u8::try_from(v).map_err(|_| CodecError::Overflow { index: v });
        cells.insert((idx(i)?, idx(j)?));
    }
    Ok(CompressedCloud {
        origin,
        resolution,
        cells: cells.into_iter().collect(),
    })
}

/// Voxel centers of every occupied cell.
pub fn decompress(c: &CompressedCloud, frame: KeyframeId) -> PointCloud2D {
    let (ox, oy, res) = (f64::from(c.origin[0]), f64::from(c.origin[1]), f64::from(c.resolution));
    let points = c
        .cells
        .iter()
        .map(|&(i, j)| Point2::new(ox + (f64::from(i) + 0.5) * res, oy + (f64::from(j) + 0.5) * res))
        .collect();
    PointCloud2D::new(points, frame)
}

/// Payload bits of a raw `f32` cloud (points only, no count field).
pub fn raw_payload_bits(n_points: usize) -> u64 {
    RAW_POINT_BITS * n_points as u64
}

/// Raw wire body: `[count u16][(x f32)(y f32) x count]`.
pub fn write_raw(points: &[[f32; 2]], out: &mut Vec<u8>) -> Result<(), CodecError> {
    let count = u16::try_from(points.len()).map_err(|_| CodecError::TooManyCells(points.len()))?;
    out.extend_from_slice(&count.to_be_bytes());
    for p in points {
        out.extend_from_slice(&p[0].to_be_bytes());
        out.extend_from_slice(&p[1].to_be_bytes());
    }
    Ok(())
}

pub fn read_raw(buf: &[u8]) -> Result<(Vec<[f32; 2]>, usize), CodecError> {
    if buf.len() < 2 {
        return Err(CodecError::Truncated { need: 2, have: buf.len() });
    }
    let count = u16::from_be_bytes([buf[0], buf[1]]) as usize;
    let need = 2 + 8 * count;
    if buf.len() < need {
        return Err(CodecError::Truncated { need, have: buf.len() });
    }
    let pts = buf[2..need]
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_be_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_be_bytes([c[4], c[5], c[6], c[7]]),
            ]
        })
        .collect();
    Ok((pts, need))
}

pub fn to_raw(cloud: &PointCloud2D) -> Vec<[f32; 2]> {
    cloud.points.iter().map(|p| [p.x as f32, p.y as f32]).collect()
}

pub fn from_raw(points: &[[f32; 2]], frame: KeyframeId) -> PointCloud2D {
    PointCloud2D::new(
        points
            .iter()
            .map(|p| Point2::new(f64::from(p[0]), f64::from(p[1])))
            .collect(),
        frame,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(pts: &[(f64, f64)]) -> PointCloud2D {
        PointCloud2D::new(pts.iter().map(|&(x, y)| Point2::new(x, y)).collect(), 0)
    }

    #[test]
    fn empty_cloud_is_header_only() {
        let c = compress(&PointCloud2D::default(), 0.25).unwrap();
        assert_eq!(c.count(), 0);
        assert_eq!(c.encoded_bits(), 112);
        assert!(decompress(&c, 0).is_empty());
    }

    #[test]
    fn nearby_points_share_a_cell() {
        let c = compress(&cloud(&[(1.3, 2.7), (1.31, 2.72)]), 0.25).unwrap();
        assert_eq!(c.cells, alloc::vec![(0, 0)]);
    }

    #[test]
    fn center_rule() {
        let c = CompressedCloud {
            origin: [0.0, 0.0],
            resolution: 0.25,
            cells: alloc::vec![(0, 0)],
        };
        assert_eq!(decompress(&c, 2).points, alloc::vec![Point2::new(0.125, 0.125)]);
    }

    #[test]
    fn cell_payload_is_sixteen_bits_per_point() {
        let pts: Vec<(f64, f64)> = (0..139).map(|k| (k as f64 * 0.3, (k % 7) as f64 * 0.5)).collect();
        let c = compress(&cloud(&pts), 0.25).unwrap();
        assert_eq!(c.count(), 139);
        assert_eq!(c.encoded_bits() - HEADER_BITS - COUNT_BITS, 16 * 139);
        assert_eq!(c.encoded_bits(), 2336);
        assert_eq!(raw_payload_bits(139), 8896);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(buf.len() as u64 * 8, c.encoded_bits());
    }

    #[test]
    fn extent_overflow_is_reported() {
        let err = compress(&cloud(&[(0.0, 0.0), (64.0, 1.0)]), 0.25).unwrap_err();
        assert_eq!(err, CodecError::Overflow { index: 256 });
        assert!(compress(&cloud(&[(0.0, 0.0), (63.9, 1.0)]), 0.25).is_ok());
        assert_eq!(compress(&cloud(&[(0.0, 0.0)]), 0.0), Err(CodecError::InvalidResolution));
    }

    #[test]
    fn origin_never_exceeds_minimum() {
        // 0.1 is not representable in f32; the rounded origin must stay below it
        let c = compress(&cloud(&[(0.1, -0.1), (0.2, 0.3)]), 0.25).unwrap();
        assert!(f64::from(c.origin[0]) <= 0.1);
        assert!(f64::from(c.origin[1]) <= -0.1);
    }

    #[test]
    fn truncated_buffers_are_rejected() {
        let c = compress(&cloud(&[(0.0, 0.0), (1.0, 1.0)]), 0.25).unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert!(matches!(CompressedCloud::read_from(&buf[..buf.len() - 1]), Err(CodecError::Truncated { .. })));
        assert!(matches!(read_raw(&[0, 3, 1]), Err(CodecError::Truncated { .. })));
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud2D> {
        proptest::collection::vec((-30.0..30.0f64, -30.0..30.0f64), 0..200).prop_map(|v| cloud(&v))
    }

    proptest! {
        #[test]
        fn decode_error_bounded_and_idempotent(c in arb_cloud(), delta in 0.25..1.0f64) {
            let comp = compress(&c, delta).unwrap();
            prop_assert!(comp.count() <= c.len());
            let dec = decompress(&comp, 0);
            let bound = delta * core::f64::consts::SQRT_2 / 2.0 + 1e-5;
            for q in &dec.points {
                let nearest = c.points.iter().map(|p| p.distance(q)).fold(f64::INFINITY, f64::min);
                prop_assert!(nearest <= bound);
            }
            let again = compress(&dec, delta).unwrap();
            prop_assert_eq!(&again.cells, &comp.cells);
            let mut buf = Vec::new();
            comp.write_to(&mut buf).unwrap();
            let (back, used) = CompressedCloud::read_from(&buf).unwrap();
            prop_assert_eq!(used, buf.len());
            prop_assert_eq!(back, comp);
        }
    }
}
