use std::collections::BTreeMap;
use std::f64::consts::PI;

use mrslam_core::graph::{linearize, residual, Factor, FactorKind, GraphState, LmParams};
use mrslam_core::linalg::Mat3;
use mrslam_core::math::wrap_angle;
use mrslam_core::{Key, Pose2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_pose(rng: &mut ChaCha8Rng, extent: f64) -> Pose2 {
    Pose2::new(
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
        rng.random_range(-PI..PI),
    )
}

fn fd_jacobian(f: &Factor, poses: &BTreeMap<Key, Pose2>, key: Key) -> Mat3 {
    let h = 1e-6;
    let mut j = Mat3::ZERO;
    for c in 0..3 {
        let mut plus = poses.clone();
        let mut minus = poses.clone();
        let mut vp = plus[&key].to_vector();
        let mut vm = minus[&key].to_vector();
        vp[c] += h;
        vm[c] -= h;
        plus.insert(key, Pose2::from_vector(vp));
        minus.insert(key, Pose2::from_vector(vm));
        let ep = residual(f, &plus).unwrap();
        let em = residual(f, &minus).unwrap();
        for r in 0..3 {
            let d = if r == 2 { wrap_angle(ep[r] - em[r]) } else { ep[r] - em[r] };
            j.0[r][c] = d / (2.0 * h);
        }
    }
    j
}

fn rel_err(a: &Mat3, b: &Mat3) -> f64 {
    let mut diff = Mat3::ZERO;
    for r in 0..3 {
        for c in 0..3 {
            diff.0[r][c] = a.0[r][c] - b.0[r][c];
        }
    }
    diff.frobenius() / a.frobenius().max(1.0)
}

#[test]
fn analytic_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cov = Mat3::from_sigmas([0.1, 0.1, 0.02]);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let (a, b) = (Key::new(0, 0), Key::new(1, 5));
        let mut poses = BTreeMap::new();
        poses.insert(a, random_pose(&mut rng, 30.0));
        poses.insert(b, random_pose(&mut rng, 30.0));
        let m = random_pose(&mut rng, 10.0);
        let f = if i % 10 == 0 {
            Factor::prior(a, m, cov)
        } else {
            Factor::between(FactorKind::InterRobot, a, b, m, cov)
        };
        let (_, ja, jb) = linearize(&f, &poses).unwrap();
        worst = worst.max(rel_err(&ja, &fd_jacobian(&f, &poses, a)));
        if let Some(jb) = jb {
            worst = worst.max(rel_err(&jb, &fd_jacobian(&f, &poses, b)));
        }
    }
    assert!(worst <= 1e-5, "worst relative Jacobian error {worst}");
}

fn noisy_graph(seed: u64, n: u16, loops: usize) -> GraphState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sig = [0.05, 0.05, 1f64.to_radians()];
    let cov = Mat3::from_sigmas(sig);
    let noise: Vec<Normal<f64>> = sig.iter().map(|s| Normal::new(0.0, *s).unwrap()).collect();
    let mut truth = vec![Pose2::IDENTITY];
    for i in 1..n as usize {
        let step = Pose2::new(1.5, 0.0, if (i / 8) % 2 == 0 { 0.25 } else { -0.2 });
        truth.push(truth[i - 1].compose(&step));
    }
    let mut g = GraphState::new(0);
    g.add_factor(Factor::prior(Key::new(0, 0), Pose2::IDENTITY, cov)).unwrap();
    let noisy = |rng: &mut ChaCha8Rng, p: Pose2| {
        Pose2::new(p.x + noise[0].sample(rng), p.y + noise[1].sample(rng), p.theta + noise[2].sample(rng))
    };
    for i in 1..n {
        let m = noisy(&mut rng, truth[i as usize - 1].between(&truth[i as usize]));
        g.add_factor(Factor::between(FactorKind::Odometry, Key::new(0, i - 1), Key::new(0, i), m, cov)).unwrap();
    }
    for _ in 0..loops {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a.abs_diff(b) < 3 {
            continue;
        }
        let m = noisy(&mut rng, truth[a as usize].between(&truth[b as usize]));
        let _ = g.add_factor(Factor::between(FactorKind::Nssm, Key::new(0, a), Key::new(0, b), m, cov));
    }
    g
}

#[test]
fn chi2_never_increases() {
    for seed in 0..30 {
        let mut g = noisy_graph(seed, 40, 12);
        let r = g.optimize(&LmParams::default()).unwrap();
        assert!(r.chi2.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {:?}", r.chi2);
        assert!(r.final_chi2().is_finite());
        assert!((g.chi2().unwrap() - r.final_chi2()).abs() <= 1e-9 * r.final_chi2().max(1.0));
    }
}

#[test]
fn gauge_invariance() {
    let g0 = noisy_graph(5, 30, 8);
    let t = Pose2::new(12.0, -7.0, 2.1);
    let mut moved = g0.clone();
    for p in moved.poses.values_mut() {
        *p = t.compose(p);
    }
    for f in moved.factors.iter_mut().filter(|f| f.kind == FactorKind::Prior) {
        f.measurement = t.compose(&f.measurement);
    }
    let c0 = g0.chi2().unwrap();
    assert!((moved.chi2().unwrap() - c0).abs() <= 1e-9 * c0.max(1.0));

    let mut a = g0.clone();
    let mut b = moved.clone();
    let ra = a.optimize(&LmParams::default()).unwrap();
    let rb = b.optimize(&LmParams::default()).unwrap();
    assert!((ra.final_chi2() - rb.final_chi2()).abs() <= 1e-6 * ra.final_chi2().max(1.0));
    for (k, p) in &a.poses {
        let q = t.compose(p);
        let r = b.poses[k];
        assert!((q.x - r.x).abs() < 1e-6 && (q.y - r.y).abs() < 1e-6 && wrap_angle(q.theta - r.theta).abs() < 1e-6);
    }
}

#[test]
fn triangle_loop_closure_reduces_chi2() {
    let odo = Mat3::from_sigmas([0.05, 0.05, 1f64.to_radians()]);
    let tight = Mat3::from_sigmas([0.01, 0.01, 0.1f64.to_radians()]);
    let mut g = GraphState::new(0);
    let k = |i| Key::new(0, i);
    g.add_factor(Factor::prior(k(0), Pose2::IDENTITY, odo)).unwrap();
    let leg = Pose2::new(3.0, 0.0, 2.0 * PI / 3.0);
    g.add_factor(Factor::between(FactorKind::Odometry, k(0), k(1), leg, odo)).unwrap();
    g.add_factor(Factor::between(FactorKind::Odometry, k(1), k(2), leg, odo)).unwrap();
    // the closing leg disagrees with the chain by 0.1 m
    let close = Pose2::new(3.1, 0.0, 2.0 * PI / 3.0);
    g.add_factor(Factor::between(FactorKind::Nssm, k(2), k(0), close, tight)).unwrap();
    let r = g.optimize(&LmParams::default()).unwrap();
    let (first, last) = (r.chi2[0], r.final_chi2());
    assert!(last <= 0.1 * first, "chi2 {first} -> {last}");
}
