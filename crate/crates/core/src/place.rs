//! Place recognition: range-histogram scene descriptors, their k-d tree
//! index, and coarse binary scene images compared by normalized SAD.

use alloc::vec::Vec;

use thiserror::Error;

use crate::geometry::{Key, PointCloud2D};
use crate::kdtree::{KdTree, Neighbor};
use crate::math::{ceil, floor};

pub const DESCRIPTOR_BINS: usize = 16;
/// Encoded descriptor size: sixteen saturating `u8` counts.
pub const DESCRIPTOR_BITS: u64 = 8 * DESCRIPTOR_BINS as u64;

/// Rotation-invariant histogram of point ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneDescriptor {
    pub bins: [u8; DESCRIPTOR_BINS],
    pub bin_width: f64,
}

impl SceneDescriptor {
    pub fn as_point(&self) -> [f64; DESCRIPTOR_BINS] {
        core::array::from_fn(|i| f64::from(self.bins[i]))
    }

    pub fn distance(&self, other: &SceneDescriptor) -> f64 {
        let a = self.as_point();
        let b = other.as_point();
        crate::math::sqrt((0..DESCRIPTOR_BINS).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum())
    }
}

pub fn make_descriptor(cloud: &PointCloud2D, max_range: f64) -> SceneDescriptor {
    let width = max_range / DESCRIPTOR_BINS as f64;
    let mut bins = [0u8; DESCRIPTOR_BINS];
    for p in &cloud.points {
        let r = p.norm();
        if r >= max_range {
            continue;
        }
        let k = floor(r / width) as usize;
        if k < DESCRIPTOR_BINS {
            bins[k] = bins[k].saturating_add(1);
        }
    }
    SceneDescriptor {
        bins,
        bin_width: width,
    }
}

/// Exact nearest-neighbor index over scene descriptors.
#[derive(Clone, Debug, Default)]
pub struct DescriptorTree {
    tree: KdTree<DESCRIPTOR_BINS, Key>,
}

impl DescriptorTree {
    pub fn new() -> DescriptorTree {
        DescriptorTree::default()
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn insert(&mut self, id: Key, d: &SceneDescriptor) {
        self.tree.insert(d.as_point(), id);
    }

    /// Up to `k` neighbors within `max_dist`, nearest first (ties by key).
    pub fn query(&self, d: &SceneDescriptor, max_dist: f64, k: usize) -> Vec<Neighbor<Key>> {
        self.tree.knn(&d.as_point(), k, max_dist)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneImageError {
    #[error("scene images have different shapes: {0} vs {1} cells per side")]
    ShapeMismatch(usize, usize),
}

/// Coarse binary occupancy raster centered on the sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pub cell: f64,
    pub max_range: f64,
    pub side: usize,
    pub grid: Vec<bool>,
}

impl SceneImage {
    pub fn occupied(&self) -> usize {
        self.grid.iter().filter(|c| **c).count()
    }
}

/// Rasterizes `cloud` onto a square grid spanning `[-max_range, max_range)^2`.
/// Panics if `cell` is not positive.
pub fn make_scene_image(cloud: &PointCloud2D, cell: f64, max_range: f64) -> SceneImage {
    assert!(cell > 0.0, "scene image cell must be positive");
    let side = ceil(2.0 * max_range / cell) as usize;
    let mut grid = alloc::vec![false; side * side];
    for p in &cloud.points {
        let i = floor((p.x + max_range) / cell);
        let j = floor((p.y + max_range) / cell);
        if i < 0.0 || j < 0.0 {
            continue;
        }
        let (i, j) = (i as usize, j as usize);
        if i < side && j < side {
            grid[i * side + j] = true;
        }
    }
    SceneImage {
        cell,
        max_range,
        side,
        grid,
    }
}

/// Sum of absolute differences normalized by the total set-cell mass.
pub fn scene_sad(a: &SceneImage, b: &SceneImage) -> Result<f64, SceneImageError> {
    if a.side != b.side || a.grid.len() != b.grid.len() {
        return Err(SceneImageError::ShapeMismatch(a.side, b.side));
    }
    let diff = a.grid.iter().zip(&b.grid).filter(|(x, y)| x != y).count();
    let mass = a.occupied() + b.occupied();
    Ok(diff as f64 / mass.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_cloud, Point2, Pose2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cloud(pts: &[(f64, f64)]) -> PointCloud2D {
        PointCloud2D::new(pts.iter().map(|&(x, y)| Point2::new(x, y)).collect(), 0)
    }

    #[test]
    fn descriptor_basics() {
        let d = make_descriptor(&PointCloud2D::default(), 30.0);
        assert_eq!(d.bins, [0; 16]);
        assert_eq!(DESCRIPTOR_BITS, 128);
        let many: Vec<(f64, f64)> = (0..300).map(|k| {
            let a = k as f64 * 0.01;
            (10.0 * a.cos(), 10.0 * a.sin())
        }).collect();
        let d = make_descriptor(&cloud(&many), 30.0);
        assert_eq!(d.bins[5], 255);
        assert_eq!(d.bins.iter().map(|&b| b as u32).sum::<u32>(), 255);
        // at or beyond max range is dropped
        let d = make_descriptor(&cloud(&[(30.0, 0.0), (29.99, 0.0)]), 30.0);
        assert_eq!(d.bins[15], 1);
        assert_eq!(d.bins.iter().map(|&b| b as u32).sum::<u32>(), 1);
    }

    #[test]
    fn tree_query_examples() {
        let mut tree = DescriptorTree::new();
        let d = make_descriptor(&cloud(&[(1.0, 1.0), (5.0, 0.0)]), 30.0);
        assert!(tree.query(&d, 40.0, 3).is_empty());
        tree.insert(Key::new(0, 7), &d);
        tree.insert(Key::new(0, 8), &make_descriptor(&cloud(&[(20.0, 1.0)]), 30.0));
        let hits = tree.query(&d, 40.0, 3);
        assert_eq!(hits[0].key, Key::new(0, 7));
        assert_eq!(hits[0].distance, 0.0);
    }

    #[test]
    fn tree_matches_linear_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut tree = DescriptorTree::new();
        let mut all = Vec::new();
        for k in 0..1000u16 {
            let d = SceneDescriptor { bins: core::array::from_fn(|_| rng.random_range(0..20)), bin_width: 1.875 };
            tree.insert(Key::new(1, k), &d);
            all.push((Key::new(1, k), d));
        }
        for _ in 0..100 {
            let q = SceneDescriptor { bins: core::array::from_fn(|_| rng.random_range(0..20)), bin_width: 1.875 };
            let max = rng.random_range(10.0..40.0);
            let k = rng.random_range(1..6);
            let mut brute: Vec<(f64, Key)> = all.iter().map(|(id, d)| (q.distance(d), *id)).filter(|(dd, _)| *dd <= max).collect();
            brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            brute.truncate(k);
            let got: Vec<(f64, Key)> = tree.query(&q, max, k).into_iter().map(|n| (n.distance, n.key)).collect();
            assert_eq!(got.len(), brute.len());
            for (g, b) in got.iter().zip(&brute) {
                assert_eq!(g.1, b.1);
                assert!((g.0 - b.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scene_image_examples() {
        let img = make_scene_image(&PointCloud2D::default(), 1.0, 30.0);
        assert_eq!(img.side, 60);
        assert_eq!(img.occupied(), 0);
        let one = make_scene_image(&cloud(&[(3.2, -4.7)]), 1.0, 30.0);
        assert_eq!(one.occupied(), 1);
        assert!(one.grid[33 * 60 + 25]);
        assert_eq!(scene_sad(&one, &one).unwrap(), 0.0);
        assert_eq!(scene_sad(&img, &img).unwrap(), 0.0);
        let other = make_scene_image(&cloud(&[(-10.0, 10.0)]), 1.0, 30.0);
        assert_eq!(scene_sad(&one, &other).unwrap(), 1.0);
        let coarse = make_scene_image(&PointCloud2D::default(), 2.0, 30.0);
        assert_eq!(scene_sad(&img, &coarse), Err(SceneImageError::ShapeMismatch(60, 30)));
    }

    proptest! {
        #[test]
        fn descriptor_rotation_invariant(pts in proptest::collection::vec((-25.0..25.0f64, -25.0..25.0f64), 0..150), angle in -3.2..3.2f64) {
            let c = cloud(&pts);
            let rotated = transform_cloud(&Pose2::new(0.0, 0.0, angle), &c);
            let a = make_descriptor(&c, 30.0);
            let b = make_descriptor(&rotated, 30.0);
            // only points sitting within rounding of a bin edge may move
            let near_edge = c.points.iter().any(|p| {
                let u = p.norm() / a.bin_width;
                (u - u.round()).abs() < 1e-9
            });
            if !near_edge {
                prop_assert_eq!(a.bins, b.bins);
            }
        }

        #[test]
        fn scene_image_pigeonhole_and_symmetry(a in proptest::collection::vec((-35.0..35.0f64, -35.0..35.0f64), 0..120), b in proptest::collection::vec((-35.0..35.0f64, -35.0..35.0f64), 0..120)) {
            let ia = make_scene_image(&cloud(&a), 1.0, 30.0);
            let ib = make_scene_image(&cloud(&b), 1.0, 30.0);
            prop_assert!(ia.occupied() <= a.len());
            let ab = scene_sad(&ia, &ib).unwrap();
            prop_assert_eq!(ab, scene_sad(&ib, &ia).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
