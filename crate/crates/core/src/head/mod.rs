//! Anchor-based BEV detection head: anchors, target assignment, box
//! encoding, decoding and non-maximum suppression.

pub mod loss;

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, ParamStore, Tape, Var};
use crate::config::{LossConfig, ModelConfig};
use crate::error::Result;
use crate::geometry::{rotated_iou_bev, Box3D, Detection};
use crate::math;
use crate::nn::Conv2d;

/// Values regressed per anchor: `(dx, dy, dz, ln w, ln l, ln h, sin, cos)`.
pub const REG_DIM: usize = 8;
/// Anchor rotations per BEV cell.
pub const ROTATIONS: usize = 2;
/// Prior foreground probability used for the classification bias.
const PRIOR: f64 = 0.01;

/// One anchor per BEV cell and rotation in `{0, π/2}`. Anchor `a` sits at
/// rotation `a / (H W)`, row `(a % (H W)) / W`, column `a % W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    /// `(w, l, h)`.
    pub size: [f64; 3],
    pub z: f64,
    origin: (f64, f64),
    cell: f64,
}

impl AnchorGrid {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (height, width) = cfg.bev_hw();
        let roi = cfg.roi;
        AnchorGrid {
            height,
            width,
            size: cfg.anchor_size,
            z: 0.5 * (roi.z_range.0 + roi.z_range.1),
            origin: (roi.x_range.0, roi.y_range.0),
            cell: roi.voxel_size,
        }
    }

    pub fn len(&self) -> usize {
        ROTATIONS * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn anchor(&self, a: usize) -> Box3D {
        let hw = self.height * self.width;
        let (r, rem) = (a / hw, a % hw);
        let (iy, ix) = (rem / self.width, rem % self.width);
        Box3D {
            x: self.origin.0 + (ix as f64 + 0.5) * self.cell,
            y: self.origin.1 + (iy as f64 + 0.5) * self.cell,
            z: self.z,
            w: self.size[0],
            l: self.size[1],
            h: self.size[2],
            theta: r as f64 * FRAC_PI_2,
        }
    }

    fn diagonal(&self) -> f64 {
        math::sqrt(self.size[0] * self.size[0] + self.size[1] * self.size[1])
    }
}

/// Regression target of `gt` relative to `anchor`. The heading is encoded
/// as the sine and cosine of its offset from the anchor rotation.
pub fn encode_box(anchor: &Box3D, gt: &Box3D) -> [f64; REG_DIM] {
    let d = math::sqrt(anchor.w * anchor.w + anchor.l * anchor.l);
    let dt = gt.theta - anchor.theta;
    [
        (gt.x - anchor.x) / d,
        (gt.y - anchor.y) / d,
        (gt.z - anchor.z) / anchor.h,
        math::ln(gt.w / anchor.w),
        math::ln(gt.l / anchor.l),
        math::ln(gt.h / anchor.h),
        math::sin(dt),
        math::cos(dt),
    ]
}

/// Inverse of [`encode_box`]; `θ = θ_a + atan2(sin, cos)`.
pub fn decode_box(anchor: &Box3D, t: &[f64]) -> Box3D {
    let d = math::sqrt(anchor.w * anchor.w + anchor.l * anchor.l);
    Box3D {
        x: anchor.x + t[0] * d,
        y: anchor.y + t[1] * d,
        z: anchor.z + t[2] * anchor.h,
        w: anchor.w * math::exp(t[3]),
        l: anchor.l * math::exp(t[4]),
        h: anchor.h * math::exp(t[5]),
        theta: math::wrap_angle(anchor.theta + math::atan2(t[6], t[7])),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground truth with this index.
    Pos(usize),
    Neg,
    Ignore,
}

/// Per-anchor training targets in the layout the losses consume.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    /// 1 for positives, 0 otherwise.
    pub cls: Arc<Vec<f64>>,
    /// 1 for positives and negatives, 0 for ignored anchors.
    pub cls_weight: Arc<Vec<f64>>,
    /// Indices of positive anchors, ascending.
    pub pos: Arc<Vec<u32>>,
    /// `[pos.len(), 8]` regression targets.
    pub reg: Arc<Vec<f64>>,
}

impl AnchorTargets {
    pub fn num_pos(&self) -> usize {
        self.pos.len()
    }
}

/// Label anchors by their best BEV IoU over the ground truth: at least
/// `pos_iou` is positive (matched to the best box), at most `neg_iou`
/// negative, anything between ignored.
pub fn assign_targets(anchors: &AnchorGrid, gts: &[Box3D], cfg: &LossConfig) -> AnchorTargets {
    let n = anchors.len();
    let reach = 0.5 * anchors.diagonal();
    let mut labels = Vec::with_capacity(n);
    let mut cls = Vec::with_capacity(n);
    let mut cls_weight = Vec::with_capacity(n);
    let mut pos = Vec::new();
    let mut reg = Vec::new();
    for a in 0..n {
        let anchor = anchors.anchor(a);
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let r = reach + gt.radius_bev();
            let (dx, dy) = (anchor.x - gt.x, anchor.y - gt.y);
            let iou = if dx * dx + dy * dy >= r * r { 0.0 } else { rotated_iou_bev(&anchor, gt) };
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        let label = match best {
            Some((g, iou)) if iou >= cfg.pos_iou => AnchorLabel::Pos(g),
            Some((_, iou)) if iou > cfg.neg_iou => AnchorLabel::Ignore,
            _ => AnchorLabel::Neg,
        };
        match label {
            AnchorLabel::Pos(g) => {
                cls.push(1.0);
                cls_weight.push(1.0);
                pos.push(a as u32);
                reg.extend(encode_box(&anchor, &gts[g]));
            }
            AnchorLabel::Neg => {
                cls.push(0.0);
                cls_weight.push(1.0);
            }
            AnchorLabel::Ignore => {
                cls.push(0.0);
                cls_weight.push(0.0);
            }
        }
        labels.push(label);
    }
    AnchorTargets { labels, cls: Arc::new(cls), cls_weight: Arc::new(cls_weight), pos: Arc::new(pos), reg: Arc::new(reg) }
}

/// Classification and regression convolutions over the aggregated BEV map.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub cls: Conv2d,
    pub reg: Conv2d,
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.aggregated_channels();
        let k = cfg.head_kernel;
        let std = math::sqrt(1.0 / (c * k * k) as f64);
        let cls = Conv2d::new(store, rng, "head.cls", (c, ROTATIONS, k), 1, 0.1 * std);
        let reg = Conv2d::new(store, rng, "head.reg", (c, ROTATIONS * REG_DIM, k), 1, 0.1 * std);
        store.value_mut(cls.b).data_mut().iter_mut().for_each(|b| *b = -math::ln((1.0 - PRIOR) / PRIOR));
        HeadParams { cls, reg }
    }
}

/// `bev [C, H, W]` -> `(logits [2HW], regression [2HW, 8])` in anchor order.
pub fn head_forward_var(tape: &mut Tape, p: &Bound, hp: &HeadParams, bev: Var) -> Result<(Var, Var)> {
    let s = tape.shape(bev).to_vec();
    let hw = s[1] * s[2];
    let logits = hp.cls.forward(tape, p, bev)?;
    let logits = tape.reshape(logits, &[ROTATIONS * hw])?;
    let reg = hp.reg.forward(tape, p, bev)?;
    let reg = tape.reshape(reg, &[ROTATIONS, REG_DIM, hw])?;
    let reg = tape.transpose(reg)?;
    let reg = tape.reshape(reg, &[ROTATIONS * hw, REG_DIM])?;
    Ok((logits, reg))
}

/// Decode anchors scoring at least `conf_thresh`, then greedy NMS: in
/// descending score order a box survives unless its BEV IoU with an
/// earlier survivor exceeds `iou_thresh`.
pub fn decode_and_nms(
    logits: &[f64],
    reg: &[f64],
    anchors: &AnchorGrid,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Vec<Detection> {
    let mut cands: Vec<Detection> = logits
        .iter()
        .enumerate()
        .filter_map(|(a, &z)| {
            let score = math::sigmoid(z);
            (score >= conf_thresh).then(|| Detection {
                bbox: decode_box(&anchors.anchor(a), &reg[a * REG_DIM..(a + 1) * REG_DIM]),
                score,
            })
        })
        .collect();
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    nms(&cands, iou_thresh)
}

/// Greedy suppression over detections already sorted by descending score.
pub fn nms(sorted: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        if keep.iter().all(|k| rotated_iou_bev(&k.bbox, &d.bbox) <= iou_thresh) {
            keep.push(*d);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn anchor_count_and_layout() {
        let cfg = RunConfig::desk();
        let g = AnchorGrid::new(&cfg.model);
        assert_eq!(g.len(), 2 * 32 * 48);
        let a = g.anchor(32 * 48 + 48 + 2);
        assert!((a.x - 1.0).abs() < 1e-12 && (a.y - (-6.4 + 0.6)).abs() < 1e-12);
        assert!((a.theta - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(a.z, 2.0);
    }

    #[test]
    fn zero_offsets_decode_to_anchor() {
        let g = AnchorGrid::new(&RunConfig::desk().model);
        for a in [0, 100, 2000] {
            let an = g.anchor(a);
            let d = decode_box(&an, &[0.0; REG_DIM]);
            assert_eq!(d, an);
        }
    }

    #[test]
    fn gt_on_anchor_is_positive_with_identity_target() {
        let cfg = RunConfig::desk();
        let g = AnchorGrid::new(&cfg.model);
        let a = 700;
        let gt = g.anchor(a);
        let t = assign_targets(&g, &[gt], &cfg.loss);
        assert_eq!(t.labels[a], AnchorLabel::Pos(0));
        let i = t.pos.iter().position(|&p| p as usize == a).unwrap();
        assert_eq!(&t.reg[i * REG_DIM..(i + 1) * REG_DIM], &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let empty = assign_targets(&g, &[], &cfg.loss);
        assert!(empty.labels.iter().all(|l| *l == AnchorLabel::Neg));
    }
}
