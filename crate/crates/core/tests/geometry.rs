mod common;

use std::f64::consts::{FRAC_PI_2, PI};

use common::{monte_carlo_iou_bev, oracle_intersection, oracle_iou_bev, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use routefuse_core::geometry::{rotated_iou_3d, rotated_iou_bev, Box3D};

fn random_box(r: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        r.gen_range(-2.0..2.0),
        r.gen_range(-2.0..2.0),
        r.gen_range(-0.5..0.5),
        r.gen_range(0.5..3.0),
        r.gen_range(0.5..5.0),
        r.gen_range(0.5..2.5),
        r.gen_range(-PI..PI),
    )
}

#[test]
fn identical_and_symmetric_squares() {
    let b = Box3D::new(3.0, -1.0, 0.2, 2.1, 4.2, 2.0, 0.7);
    assert!((rotated_iou_bev(&b, &b) - 1.0).abs() < 1e-12);
    assert!((rotated_iou_3d(&b, &b) - 1.0).abs() < 1e-12);
    let sq = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.3);
    let turned = Box3D { theta: 0.3 + FRAC_PI_2, ..sq };
    assert!((rotated_iou_bev(&sq, &turned) - 1.0).abs() < 1e-12);
}

#[test]
fn half_offset_unit_squares() {
    let a = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    let b = Box3D::new(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    assert!((rotated_iou_bev(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    assert!((monte_carlo_iou_bev(&a, &b, 1_000_000, 1) - 1.0 / 3.0).abs() < 1e-2);
}

#[test]
fn degenerate_and_disjoint() {
    let a = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    assert_eq!(rotated_iou_bev(&a, &Box3D { w: 0.0, ..a }), 0.0);
    assert_eq!(rotated_iou_bev(&a, &Box3D { x: 5.0, ..a }), 0.0);
    assert_eq!(rotated_iou_3d(&a, &Box3D { z: 1.5, ..a }), 0.0);
    assert_eq!(rotated_iou_3d(&a, &Box3D { z: 1.0, ..a }), 0.0);
    // half the height overlapping: 0.5 / (2 - 0.5)
    assert!((rotated_iou_3d(&a, &Box3D { z: 0.5, ..a }) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn random_pairs_match_clipping_and_monte_carlo_oracles() {
    let mut r = rng(61);
    let mut overlapping = 0;
    for i in 0..200 {
        let (a, b) = (random_box(&mut r), random_box(&mut r));
        let got = rotated_iou_bev(&a, &b);
        let exact = oracle_iou_bev(&a, &b);
        assert!((got - exact).abs() < 1e-9, "pair {i}: {got} vs {exact}");
        let mc = monte_carlo_iou_bev(&a, &b, 1_000_000, 1000 + i);
        assert!((got - mc).abs() < 1e-2, "pair {i}: {got} vs monte carlo {mc}");
        overlapping += (got > 0.0) as usize;
    }
    assert!(overlapping > 100, "only {overlapping} overlapping pairs");
}

#[test]
fn volumetric_iou_matches_monte_carlo() {
    let mut r = rng(62);
    for i in 0..20 {
        let (a, b) = (random_box(&mut r), random_box(&mut r));
        let (a0, a1) = a.z_range();
        let (b0, b1) = b.z_range();
        let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
        let inter = oracle_intersection(&a, &b) * dz;
        let exact = inter / (a.volume() + b.volume() - inter);
        assert!((rotated_iou_3d(&a, &b) - exact).abs() < 1e-9);
        // sample the bounding volume directly
        let mut g = rng(2000 + i);
        let rad = |q: &Box3D| 0.5 * (q.w * q.w + q.l * q.l).sqrt();
        let (x0, x1) = ((a.x - rad(&a)).min(b.x - rad(&b)), (a.x + rad(&a)).max(b.x + rad(&b)));
        let (y0, y1) = ((a.y - rad(&a)).min(b.y - rad(&b)), (a.y + rad(&a)).max(b.y + rad(&b)));
        let (z0, z1) = (a0.min(b0), a1.max(b1));
        let inside = |q: &Box3D, p: [f64; 3]| {
            let (s, c) = q.theta.sin_cos();
            let (dx, dy) = (p[0] - q.x, p[1] - q.y);
            (c * dx + s * dy).abs() <= q.l / 2.0 && (-s * dx + c * dy).abs() <= q.w / 2.0 && (p[2] - q.z).abs() <= q.h / 2.0
        };
        let (mut n_i, mut n_u) = (0usize, 0usize);
        for _ in 0..1_000_000 {
            let p = [g.gen_range(x0..x1), g.gen_range(y0..y1), g.gen_range(z0..z1)];
            let (ia, ib) = (inside(&a, p), inside(&b, p));
            n_i += (ia && ib) as usize;
            n_u += (ia || ib) as usize;
        }
        assert!((rotated_iou_3d(&a, &b) - n_i as f64 / n_u as f64).abs() < 1e-2);
    }
}

fn arb_box() -> impl Strategy<Value = Box3D> {
    (-3.0..3.0f64, -3.0..3.0f64, -1.0..1.0f64, 0.3..3.0f64, 0.3..5.0f64, 0.3..2.5f64, -PI..PI)
        .prop_map(|(x, y, z, w, l, h, t)| Box3D::new(x, y, z, w, l, h, t))
}

fn rigid(b: &Box3D, angle: f64, shift: (f64, f64, f64)) -> Box3D {
    let (s, c) = angle.sin_cos();
    Box3D {
        x: c * b.x - s * b.y + shift.0,
        y: s * b.x + c * b.y + shift.1,
        z: b.z + shift.2,
        theta: b.theta + angle,
        ..*b
    }
}

proptest! {
    #[test]
    fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
        prop_assert!((rotated_iou_bev(&a, &b) - rotated_iou_bev(&b, &a)).abs() < 1e-12);
        prop_assert!((rotated_iou_3d(&a, &b) - rotated_iou_3d(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn iou_is_rigid_invariant(a in arb_box(), b in arb_box(), angle in -PI..PI, dx in -50.0..50.0f64, dy in -50.0..50.0f64, dz in -5.0..5.0f64) {
        let (ra, rb) = (rigid(&a, angle, (dx, dy, dz)), rigid(&b, angle, (dx, dy, dz)));
        prop_assert!((rotated_iou_bev(&a, &b) - rotated_iou_bev(&ra, &rb)).abs() < 1e-9);
        prop_assert!((rotated_iou_3d(&a, &b) - rotated_iou_3d(&ra, &rb)).abs() < 1e-9);
    }

    #[test]
    fn iou_lies_in_unit_interval(a in arb_box(), b in arb_box()) {
        let v = rotated_iou_bev(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((0.0..=1.0).contains(&rotated_iou_3d(&a, &b)));
    }
}
