//! Sonar image front end: CA-CFAR contact detection, projection of flagged
//! cells to meters and medoid voxel downsampling.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use thiserror::Error;

use crate::geometry::{polar_to_cartesian, KeyframeId, Point2, PointCloud2D, SonarReturn};
use crate::math::{floor, powf, wrap_angle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrontendError {
    #[error("empty polar image")]
    EmptyImage,
    #[error("CFAR window of {window} cells exceeds {bins} range bins")]
    WindowTooLarge { window: usize, bins: usize },
    #[error("invalid CFAR parameters: {0}")]
    InvalidParams(&'static str),
    #[error("mask shape {mask:?} does not match image shape {image:?}")]
    ShapeMismatch {
        mask: (usize, usize),
        image: (usize, usize),
    },
}

/// Polar intensity image, stored range-major: `intensities[bin * n_beams + beam]`.
///
/// Beams are evenly spread over the horizontal field of view, centered on
/// the sensor's forward axis.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarImage {
    pub n_range_bins: usize,
    pub n_beams: usize,
    pub range_resolution: f64,
    pub fov: f64,
    pub intensities: Vec<f64>,
}

impl PolarImage {
    pub fn zeros(n_range_bins: usize, n_beams: usize, range_resolution: f64, fov: f64) -> PolarImage {
        PolarImage {
            n_range_bins,
            n_beams,
            range_resolution,
            fov,
            intensities: alloc::vec![0.0; n_range_bins * n_beams],
        }
    }

    pub fn max_range(&self) -> f64 {
        self.n_range_bins as f64 * self.range_resolution
    }

    pub fn bearing_of_beam(&self, beam: usize) -> f64 {
        let step = self.fov / self.n_beams as f64;
        wrap_angle(-0.5 * self.fov + (beam as f64 + 0.5) * step)
    }

    /// Beam whose angular sector contains `bearing`, if inside the fan.
    pub fn beam_of_bearing(&self, bearing: f64) -> Option<usize> {
        let u = (bearing + 0.5 * self.fov) / self.fov;
        if !(0.0..1.0).contains(&u) {
            return None;
        }
        Some(((u * self.n_beams as f64) as usize).min(self.n_beams - 1))
    }

    pub fn get(&self, bin: usize, beam: usize) -> f64 {
        self.intensities[bin * self.n_beams + beam]
    }

    pub fn set(&mut self, bin: usize, beam: usize, value: f64) {
        self.intensities[bin * self.n_beams + beam] = value;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_range_bins, self.n_beams)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfarParams {
    pub train_cells: usize,
    pub guard_cells: usize,
    pub pfa: f64,
}

impl Default for CfarParams {
    fn default() -> Self {
        CfarParams {
            train_cells: 10,
            guard_cells: 2,
            pfa: 1e-3,
        }
    }
}

impl CfarParams {
    /// Cell-averaging threshold factor `N (pfa^(-1/N) - 1)`, `N = 2 * train_cells`.
    pub fn alpha(&self) -> f64 {
        let n = (2 * self.train_cells) as f64;
        n * (powf(self.pfa, -1.0 / n) - 1.0)
    }

    fn window(&self) -> usize {
        2 * (self.train_cells + self.guard_cells) + 1
    }
}

/// Binary detection mask with the same layout as the image it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMask {
    pub n_range_bins: usize,
    pub n_beams: usize,
    pub cells: Vec<bool>,
}

impl DetectionMask {
    pub fn get(&self, bin: usize, beam: usize) -> bool {
        self.cells[bin * self.n_beams + beam]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }
}

/// Cell-averaging CFAR along the range axis of every beam.
///
/// Near the ends of a beam only the training cells that exist are averaged.
pub fn cfar_detect(img: &PolarImage, p: &CfarParams) -> Result<DetectionMask, FrontendError> {
    let (bins, beams) = img.shape();
    if bins == 0 || beams == 0 || img.intensities.len() != bins * beams {
        return Err(FrontendError::EmptyImage);
    }
    if p.train_cells == 0 {
        return Err(FrontendError::InvalidParams("train_cells must be >= 1"));
    }
    if !(p.pfa > 0.0 && p.pfa < 1.0) {
        return Err(FrontendError::InvalidParams("pfa must lie in (0, 1)"));
    }
    if p.window() > bins {
        return Err(FrontendError::WindowTooLarge {
            window: p.window(),
            bins,
        });
    }
    let alpha = p.alpha();
    let (t, g) = (p.train_cells, p.guard_cells);
    let mut cells = alloc::vec![false; bins * beams];
    // prefix sums per beam; column-wise access through the range-major layout
    let mut prefix = alloc::vec![0.0; bins + 1];
    for beam in 0..beams {
        for bin in 0..bins {
            prefix[bin + 1] = prefix[bin] + img.get(bin, beam);
        }
        for bin in 0..bins {
            let mut sum = 0.0;
            let mut count = 0usize;
            // leading window [bin-g-t, bin-g-1]
            if bin > g {
                let hi = bin - g;
                let lo = hi.saturating_sub(t);
                sum += prefix[hi] - prefix[lo];
                count += hi - lo;
            }
            // trailing window [bin+g+1, bin+g+t]
            let lo = bin + g + 1;
            if lo < bins {
                let hi = (lo + t).min(bins);
                sum += prefix[hi] - prefix[lo];
                count += hi - lo;
            }
            if count == 0 {
                continue;
            }
            let noise = sum / count as f64;
            cells[bin * beams + beam] = img.get(bin, beam) > alpha * noise;
        }
    }
    Ok(DetectionMask {
        n_range_bins: bins,
        n_beams: beams,
        cells,
    })
}

/// Projects flagged cells to sensor-frame meters at bin centers, range-major order.
pub fn mask_to_cloud(
    mask: &DetectionMask,
    img: &PolarImage,
    frame: KeyframeId,
) -> Result<PointCloud2D, FrontendError> {
    if (mask.n_range_bins, mask.n_beams) != img.shape() {
        return Err(FrontendError::ShapeMismatch {
            mask: (mask.n_range_bins, mask.n_beams),
            image: img.shape(),
        });
    }
    let mut points = Vec::with_capacity(mask.count());
    for bin in 0..mask.n_range_bins {
        let range = (bin as f64 + 0.5) * img.range_resolution;
        for beam in 0..mask.n_beams {
            if mask.get(bin, beam) {
                let ret = SonarReturn::planar(range, img.bearing_of_beam(beam), img.get(bin, beam));
                let [x, y, _] = polar_to_cartesian(&ret);
                points.push(Point2::new(x, y));
            }
        }
    }
    Ok(PointCloud2D::new(points, frame))
}

/// Voxel downsampling that keeps the medoid of every occupied voxel.
///
/// Output is ordered by voxel index `(i, j)`; ties in the medoid distance sum
/// go to the lowest input index. Panics if `voxel` is not positive.
pub fn downsample_medoid(cloud: &PointCloud2D, voxel: f64) -> PointCloud2D {
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut buckets: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (idx, p) in cloud.points.iter().enumerate() {
        let key = (floor(p.x / voxel) as i64, floor(p.y / voxel) as i64);
        buckets.entry(key).or_default().push(idx);
    }
    let points = buckets
        .values()
        .map(|members| {
            let mut best = members[0];
            let mut best_sum = f64::INFINITY;
            for &i in members {
                let s: f64 = members
                    .iter()
                    .map(|&j| cloud.points[i].distance(&cloud.points[j]))
                    .sum();
                if s < best_sum {
                    best_sum = s;
                    best = i;
                }
            }
            cloud.points[best]
        })
        .collect();
    PointCloud2D::new(points, cloud.frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::PI;
    use proptest::prelude::*;

    fn flat(bins: usize, beams: usize, c: f64) -> PolarImage {
        let mut img = PolarImage::zeros(bins, beams, 0.1, 130f64.to_radians());
        img.intensities.iter_mut().for_each(|v| *v = c);
        img
    }

    /// Independent per-cell threshold: explicit loops over the training cells.
    fn brute_cfar(img: &PolarImage, p: &CfarParams) -> Vec<bool> {
        let n = (2 * p.train_cells) as f64;
        let alpha = n * (p.pfa.powf(-1.0 / n) - 1.0);
        let mut out = alloc::vec![false; img.intensities.len()];
        for beam in 0..img.n_beams {
            for bin in 0..img.n_range_bins {
                let mut vals = Vec::new();
                for off in (p.guard_cells + 1)..=(p.guard_cells + p.train_cells) {
                    if bin >= off {
                        vals.push(img.get(bin - off, beam));
                    }
                    if bin + off < img.n_range_bins {
                        vals.push(img.get(bin + off, beam));
                    }
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                out[bin * img.n_beams + beam] = img.get(bin, beam) > alpha * mean;
            }
        }
        out
    }

    #[test]
    fn all_zero_image_has_no_detections() {
        let m = cfar_detect(&flat(64, 8, 0.0), &CfarParams::default()).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn flat_floor_has_no_detections() {
        for pfa in [1e-6, 1e-4, 1e-2, 0.1, 0.3] {
            let p = CfarParams { pfa, ..CfarParams::default() };
            assert!(p.alpha() > 1.0, "alpha {} for pfa {}", p.alpha(), pfa);
            let m = cfar_detect(&flat(64, 8, 3.5), &p).unwrap();
            assert_eq!(m.count(), 0);
        }
    }

    #[test]
    fn single_spike_flags_exactly_that_cell() {
        let p = CfarParams::default();
        for (bin, beam) in [(0, 0), (30, 3), (63, 7), (5, 2)] {
            let mut img = flat(64, 8, 0.2);
            img.set(bin, beam, 20.0);
            let m = cfar_detect(&img, &p).unwrap();
            assert_eq!(m.cells, brute_cfar(&img, &p));
            assert_eq!(m.count(), 1);
            assert!(m.get(bin, beam));
        }
    }

    #[test]
    fn window_larger_than_image_is_rejected() {
        let p = CfarParams { train_cells: 10, guard_cells: 2, pfa: 1e-3 };
        assert_eq!(
            cfar_detect(&flat(24, 4, 1.0), &p),
            Err(FrontendError::WindowTooLarge { window: 25, bins: 24 })
        );
        assert!(cfar_detect(&flat(25, 4, 1.0), &p).is_ok());
    }

    #[test]
    fn bin_center_projection() {
        let mut img = PolarImage::zeros(20, 1, 0.1, 0.01);
        assert!(img.bearing_of_beam(0).abs() < 1e-15);
        img.set(9, 0, 1.0);
        let mask = DetectionMask { n_range_bins: 20, n_beams: 1, cells: (0..20).map(|b| b == 9).collect() };
        let cloud = mask_to_cloud(&mask, &img, 4).unwrap();
        assert_eq!(cloud.len(), 1);
        assert!((cloud.points[0].x - 0.95).abs() < 1e-12);
        assert!(cloud.points[0].y.abs() < 1e-12);
        assert_eq!(cloud.frame, 4);

        let empty = DetectionMask { n_range_bins: 20, n_beams: 1, cells: alloc::vec![false; 20] };
        assert!(mask_to_cloud(&empty, &img, 0).unwrap().is_empty());
    }

    #[test]
    fn beam_bearings_span_the_fan() {
        let img = PolarImage::zeros(10, 130, 0.1, 130f64.to_radians());
        let first = img.bearing_of_beam(0);
        let last = img.bearing_of_beam(129);
        assert!((first + 64.5f64.to_radians()).abs() < 1e-12);
        assert!((last - 64.5f64.to_radians()).abs() < 1e-12);
        for b in 0..130 {
            assert_eq!(img.beam_of_bearing(img.bearing_of_beam(b)), Some(b));
        }
        assert_eq!(img.beam_of_bearing(PI / 2.0), None);
    }

    #[test]
    fn medoid_of_three_points() {
        let pts = [Point2::new(0.1, 0.1), Point2::new(0.2, 0.2), Point2::new(0.15, 0.12)];
        let cloud = PointCloud2D::new(pts.to_vec(), 0);
        let out = downsample_medoid(&cloud, 1.0);
        let oracle = pts
            .iter()
            .min_by(|a, b| {
                let sa: f64 = pts.iter().map(|q| a.distance(q)).sum();
                let sb: f64 = pts.iter().map(|q| b.distance(q)).sum();
                sa.total_cmp(&sb)
            })
            .unwrap();
        assert_eq!(out.points, alloc::vec![*oracle]);
        assert_eq!(*oracle, pts[2]);
        assert!(downsample_medoid(&PointCloud2D::default(), 0.3).is_empty());
    }

    #[test]
    fn medoid_tie_goes_to_lowest_index() {
        let cloud = PointCloud2D::new(alloc::vec![Point2::new(0.1, 0.1), Point2::new(0.2, 0.1)], 0);
        assert_eq!(downsample_medoid(&cloud, 1.0).points, alloc::vec![Point2::new(0.1, 0.1)]);
    }

    #[test]
    fn distinct_voxels_are_kept() {
        let pts = alloc::vec![Point2::new(2.5, 0.1), Point2::new(-1.5, 3.2), Point2::new(0.4, 0.4)];
        let out = downsample_medoid(&PointCloud2D::new(pts.clone(), 0), 1.0);
        assert_eq!(out.len(), 3);
        for p in &pts {
            assert!(out.points.contains(p));
        }
        // ordered by voxel index
        assert_eq!(out.points[0], Point2::new(-1.5, 3.2));
    }

    proptest! {
        #[test]
        fn medoid_is_member_and_shrinks(pts in proptest::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 0..80), voxel in 0.05..3.0f64) {
            let cloud = PointCloud2D::new(pts.iter().map(|&(x, y)| Point2::new(x, y)).collect(), 0);
            let out = downsample_medoid(&cloud, voxel);
            prop_assert!(out.len() <= cloud.len());
            for p in &out.points {
                prop_assert!(cloud.points.contains(p));
            }
        }

        #[test]
        fn spike_on_constant_background_matches_brute_force(bins in 30usize..90, beams in 1usize..6, c in 0.01..10.0f64, gain in 1.0..200.0f64, seed in 0usize..10_000) {
            let mut img = flat(bins, beams, c);
            let bin = seed % bins;
            let beam = (seed / 7) % beams;
            img.set(bin, beam, c * gain);
            let p = CfarParams::default();
            let m = cfar_detect(&img, &p).unwrap();
            prop_assert_eq!(m.cells, brute_cfar(&img, &p));
        }
    }
}
