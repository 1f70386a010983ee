//! Average precision over rotated boxes, per weather category.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::geometry::{rotated_iou_3d, rotated_iou_bev, Box3D, Detection};
use crate::weather::{Weather, NUM_WEATHER};

pub const IOU_THRESHOLDS: [f64; 2] = [0.3, 0.5];
const RECALL_POINTS: usize = 40;

/// Greedy matching in descending confidence order, then 40-point
/// interpolated precision (recall levels `j / 40`, `j = 1..=40`).
///
/// `dets[s]` and `gts[s]` belong to scene `s`. Each ground truth is matched
/// at most once; a detection takes the unmatched ground truth with the
/// highest IoU and counts as a true positive when that IoU reaches
/// `threshold`. Returns 0 when there is no ground truth at all.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<Box3D>],
    iou_fn: impl Fn(&Box3D, &Box3D) -> f64,
    threshold: f64,
) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<(usize, usize)> =
        dets.iter().enumerate().flat_map(|(s, d)| (0..d.len()).map(move |i| (s, i))).collect();
    order.sort_by(|&(sa, ia), &(sb, ib)| dets[sb][ib].score.total_cmp(&dets[sa][ia].score).then((sa, ia).cmp(&(sb, ib))));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &(s, i)) in order.iter().enumerate() {
        let det = &dets[s][i].bbox;
        let mut best: Option<(usize, f64)> = None;
        if let Some(scene_gts) = gts.get(s) {
            for (g, gt) in scene_gts.iter().enumerate() {
                if matched[s][g] {
                    continue;
                }
                let iou = iou_fn(det, gt);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
        }
        if let Some((g, iou)) = best {
            if iou >= threshold {
                matched[s][g] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    interpolated_ap(&precision, &recall)
}

fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut total = 0.0;
    for j in 1..=RECALL_POINTS {
        let r = j as f64 / RECALL_POINTS as f64;
        let p = precision
            .iter()
            .zip(recall)
            .filter(|&(_, &rc)| rc >= r - 1e-12)
            .map(|(&p, _)| p)
            .fold(0.0, f64::max);
        total += p;
    }
    total / RECALL_POINTS as f64
}

/// AP values in `[0, 1]`, indexed `[metric][threshold]` with metric 0 = BEV,
/// 1 = 3D and thresholds as in [`IOU_THRESHOLDS`].
pub type ApGrid = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_category: [ApGrid; NUM_WEATHER],
    pub total: ApGrid,
    /// Scenes per category in the evaluated split.
    pub scene_counts: [usize; NUM_WEATHER],
    /// Categories that had scenes but no ground-truth boxes; their AP is 0.
    pub empty_categories: Vec<Weather>,
}

fn ap_grid(dets: &[Vec<Detection>], gts: &[Vec<Box3D>]) -> ApGrid {
    let mut g = [[0.0; 2]; 2];
    for (t, &thr) in IOU_THRESHOLDS.iter().enumerate() {
        g[0][t] = average_precision(dets, gts, rotated_iou_bev, thr);
        g[1][t] = average_precision(dets, gts, rotated_iou_3d, thr);
    }
    g
}

/// Evaluate per-scene detections against ground truth, split by category.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<Box3D>], weather: &[Weather]) -> EvalReport {
    let mut per_category = [[[0.0; 2]; 2]; NUM_WEATHER];
    let mut scene_counts = [0; NUM_WEATHER];
    let mut empty_categories = Vec::new();
    for w in Weather::ALL {
        let idx: Vec<usize> = (0..gts.len()).filter(|&s| weather[s] == w).collect();
        scene_counts[w.index()] = idx.len();
        if idx.is_empty() {
            continue;
        }
        let d: Vec<Vec<Detection>> = idx.iter().map(|&s| dets[s].clone()).collect();
        let g: Vec<Vec<Box3D>> = idx.iter().map(|&s| gts[s].clone()).collect();
        if g.iter().all(Vec::is_empty) {
            empty_categories.push(w);
        }
        per_category[w.index()] = ap_grid(&d, &g);
    }
    EvalReport { per_category, total: ap_grid(dets, gts), scene_counts, empty_categories }
}

impl EvalReport {
    fn rows(&self) -> impl Iterator<Item = (&'static str, &ApGrid)> {
        Weather::ALL.iter().map(|w| w.name()).zip(self.per_category.iter()).chain([("total", &self.total)])
    }

    /// Fixed-width table with values scaled to percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>9} {:>9} {:>9} {:>9}", "category", "BEV@0.3", "BEV@0.5", "3D@0.3", "3D@0.5");
        for (name, g) in self.rows() {
            let _ = writeln!(
                s,
                "{:<10} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
                name,
                100.0 * g[0][0],
                100.0 * g[0][1],
                100.0 * g[1][0],
                100.0 * g[1][1]
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,ap_bev_0.3,ap_bev_0.5,ap_3d_0.3,ap_3d_0.5\n");
        for (name, g) in self.rows() {
            let _ = writeln!(s, "{name},{},{},{},{}", g[0][0], g[0][1], g[1][0], g[1][1]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> Box3D {
        Box3D::new(x, 0.0, 0.0, 2.0, 4.0, 2.0, 0.0)
    }

    #[test]
    fn single_match_is_perfect() {
        let ap = average_precision(&[vec![Detection { bbox: b(0.1), score: 0.9 }]], &[vec![b(0.0)]], rotated_iou_bev, 0.5);
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn below_threshold_is_zero() {
        let ap = average_precision(&[vec![Detection { bbox: b(3.5), score: 0.9 }]], &[vec![b(0.0)]], rotated_iou_bev, 0.5);
        assert_eq!(ap, 0.0);
        assert_eq!(average_precision(&[vec![]], &[vec![]], rotated_iou_bev, 0.5), 0.0);
    }
}
