mod common;

use common::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use routefuse_core::eval::{average_precision, evaluate};
use routefuse_core::geometry::{rotated_iou_3d, rotated_iou_bev, Box3D, Detection};
use routefuse_core::weather::Weather;

fn car(x: f64, y: f64, theta: f64) -> Box3D {
    Box3D::new(x, y, 0.0, 2.0, 4.0, 2.0, theta)
}

fn det(b: Box3D, score: f64) -> Detection {
    Detection { bbox: b, score }
}

/// Reference AP: for every cut-off k the top-k detections are matched from
/// scratch, giving one precision/recall point per k; interpolated precision
/// at recall r is the best precision among points reaching r.
fn brute_force_ap(dets: &[Vec<Detection>], gts: &[Vec<Box3D>], iou: fn(&Box3D, &Box3D) -> f64, thr: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut all: Vec<(usize, usize)> = Vec::new();
    for (s, d) in dets.iter().enumerate() {
        for i in 0..d.len() {
            all.push((s, i));
        }
    }
    all.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score).then(a.cmp(b)));
    let mut points = Vec::new();
    for k in 1..=all.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for &(s, i) in &all[..k] {
            let cand = (0..gts[s].len())
                .filter(|&g| !used[s][g])
                .map(|g| (g, iou(&dets[s][i].bbox, &gts[s][g])))
                .fold(None, |best: Option<(usize, f64)>, c| match best {
                    Some(b) if b.1 >= c.1 => Some(b),
                    _ => Some(c),
                });
            if let Some((g, v)) = cand {
                if v >= thr {
                    used[s][g] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / k as f64, tp as f64 / n_gt as f64));
    }
    let mut total = 0.0;
    for j in 1..=40 {
        let r = j as f64 / 40.0;
        total += points.iter().filter(|p| p.1 >= r - 1e-12).map(|p| p.0).fold(0.0, f64::max);
    }
    total / 40.0
}

fn constructed_scene(r: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<Box3D>>) {
    let scenes = r.gen_range(1..4);
    let mut budget = 20usize;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut scores: Vec<f64> = (0..20).map(|i| (i as f64 + 0.5) / 20.0).collect();
    scores.shuffle(r);
    for _ in 0..scenes {
        let n_gt = r.gen_range(0..=budget.min(5));
        budget -= n_gt;
        let g: Vec<Box3D> = (0..n_gt).map(|i| car(8.0 * i as f64, r.gen_range(-1.0..1.0), r.gen_range(-0.3..0.3))).collect();
        let n_det = r.gen_range(0..=budget.min(6));
        budget -= n_det;
        let d: Vec<Detection> = (0..n_det)
            .map(|_| {
                let b = if !g.is_empty() && r.gen_bool(0.7) {
                    let t = g[r.gen_range(0..g.len())];
                    Box3D { x: t.x + r.gen_range(-1.5..1.5), y: t.y + r.gen_range(-1.0..1.0), z: r.gen_range(-0.8..0.8), ..t }
                } else {
                    car(r.gen_range(-5.0..40.0), r.gen_range(-3.0..3.0), r.gen_range(-1.0..1.0))
                };
                det(b, scores.pop().unwrap())
            })
            .collect();
        gts.push(g);
        dets.push(d);
    }
    (dets, gts)
}

#[test]
fn matches_brute_force_on_constructed_scenes() {
    let mut r = rng(71);
    let mut nontrivial = 0;
    for _ in 0..300 {
        let (dets, gts) = constructed_scene(&mut r);
        for thr in [0.3, 0.5] {
            for iou in [rotated_iou_bev as fn(&Box3D, &Box3D) -> f64, rotated_iou_3d] {
                let got = average_precision(&dets, &gts, iou, thr);
                let want = brute_force_ap(&dets, &gts, iou, thr);
                assert_eq!(got, want);
                nontrivial += (got > 0.0 && got < 1.0) as usize;
            }
        }
    }
    assert!(nontrivial > 100);
}

#[test]
fn five_ground_truths_eight_detections() {
    let gts = vec![(0..5).map(|i| car(10.0 * i as f64, 0.0, 0.0)).collect::<Vec<_>>()];
    // ranks 1..8: TP, TP, FP, TP, duplicate (FP), FP, TP, FP
    let dets = vec![vec![
        det(car(0.1, 0.0, 0.0), 0.95),
        det(car(10.0, 0.1, 0.0), 0.9),
        det(car(5.0, 0.0, 0.0), 0.85),
        det(car(20.2, 0.0, 0.0), 0.8),
        det(car(0.2, 0.0, 0.0), 0.7),
        det(car(55.0, 0.0, 0.0), 0.6),
        det(car(30.0, 0.0, 0.05), 0.5),
        det(car(40.0, 5.0, 0.0), 0.4),
    ]];
    // precision at the TPs: 1, 1, 3/4, 4/7 with recall 0.2, 0.4, 0.6, 0.8
    let want = (16.0 * 1.0 + 8.0 * 0.75 + 8.0 * 4.0 / 7.0) / 40.0;
    let got = average_precision(&dets, &gts, rotated_iou_bev, 0.5);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert_eq!(got, brute_force_ap(&dets, &gts, rotated_iou_bev, 0.5));
}

#[test]
fn trivial_cases() {
    let g = vec![vec![car(0.0, 0.0, 0.0)]];
    assert_eq!(average_precision(&[vec![det(car(0.0, 0.1, 0.0), 0.9)]], &g, rotated_iou_bev, 0.5), 1.0);
    assert_eq!(average_precision(&[vec![det(car(3.9, 0.0, 0.0), 0.9)]], &g, rotated_iou_bev, 0.3), 0.0);
    assert_eq!(average_precision(&[vec![det(car(0.0, 0.0, 0.0), 0.9)]], &[vec![]], rotated_iou_bev, 0.5), 0.0);
}

#[test]
fn ap_is_monotone_in_threshold() {
    let mut r = rng(72);
    for _ in 0..100 {
        let (dets, gts) = constructed_scene(&mut r);
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let ap = average_precision(&dets, &gts, rotated_iou_bev, k as f64 / 20.0);
            assert!(ap <= prev + 1e-12);
            assert!((0.0..=1.0).contains(&ap));
            prev = ap;
        }
    }
}

#[test]
fn report_splits_categories_and_flags_empty_ones() {
    let gts = vec![vec![car(0.0, 0.0, 0.0)], vec![], vec![car(5.0, 0.0, 0.0)]];
    let dets = vec![vec![det(car(0.0, 0.0, 0.0), 0.9)], vec![det(car(1.0, 0.0, 0.0), 0.8)], vec![]];
    let weather = [Weather::Normal, Weather::Fog, Weather::Normal];
    let rep = evaluate(&dets, &gts, &weather);
    assert_eq!(rep.scene_counts[Weather::Normal.index()], 2);
    assert_eq!(rep.scene_counts[Weather::Fog.index()], 1);
    assert_eq!(rep.empty_categories, vec![Weather::Fog]);
    assert_eq!(rep.per_category[Weather::Fog.index()], [[0.0; 2]; 2]);
    // one of two cars found at a single precision of 1 -> 20 of 40 recall points
    assert!((rep.per_category[Weather::Normal.index()][0][1] - 0.5).abs() < 1e-12);
    let table = rep.to_table();
    assert_eq!(table.lines().count(), 9);
    assert!(table.lines().nth(1).unwrap().starts_with("normal"));
    assert!(rep.to_csv().lines().last().unwrap().starts_with("total,"));
}
