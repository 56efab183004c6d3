//! Forward-looking imaging sonar model: one ray per beam, Rayleigh
//! background and speckled returns.

use mrslam_core::frontend::PolarImage;
use mrslam_core::{Point2, Pose2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SonarConfig;
use crate::world::World;

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Renders one scan taken from `pose`. The noise stream depends only on
/// the world seed, the robot and the scan index.
pub fn simulate_scan(world: &World, pose: &Pose2, sonar: &SonarConfig, robot: u8, scan_index: u64) -> PolarImage {
    let resolution = sonar.max_range / sonar.range_bins as f64;
    let mut img = PolarImage::zeros(sonar.range_bins, sonar.beams, resolution, sonar.fov_deg.to_radians());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[world.seed, robot as u64, scan_index]));
    let speckle = Normal::new(0.0, sonar.speckle.max(0.0)).expect("finite speckle");
    let origin = Point2::new(pose.x, pose.y);
    for bin in 0..sonar.range_bins {
        for beam in 0..sonar.beams {
            // Rayleigh amplitude by inversion
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            img.set(bin, beam, sonar.background * (-2.0 * u.ln()).sqrt());
        }
    }
    for beam in 0..sonar.beams {
        let heading = pose.theta + img.bearing_of_beam(beam);
        let s = speckle.sample(&mut rng);
        if let Some((range, reflectivity)) = world.raycast(origin, heading, sonar.max_range) {
            let bin = ((range / resolution) as usize).min(sonar.range_bins - 1);
            let value = (sonar.gain * reflectivity * (1.0 + s)).max(0.0);
            img.set(bin, beam, value);
        }
    }
    img
}
