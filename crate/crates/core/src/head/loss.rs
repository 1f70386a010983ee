//! Training objectives: detection, auxiliary weather supervision, routing
//! diversity and routing entropy, and their weighted total.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnchorTargets;
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::config::{AblationConfig, LossConfig};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Linear;
use crate::router::RoutingWeights;
use crate::weather::NUM_WEATHER;

/// Values of every objective term for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det: f64,
    pub cls: f64,
    pub reg: f64,
    pub aux: f64,
    pub intra: f64,
    pub inter: f64,
    pub div: f64,
    pub ent: f64,
    pub total: f64,
    /// Batch-mean normalized routing entropy.
    pub h_bar: f64,
}

/// Effective term weights after the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub aux: f64,
    pub div: f64,
    pub ent: f64,
}

impl LossWeights {
    pub fn resolve(loss: &LossConfig, ablation: &AblationConfig) -> Self {
        LossWeights {
            aux: if ablation.aux_loss { loss.lambda_aux } else { 0.0 },
            div: if ablation.div_loss { loss.lambda_div } else { 0.0 },
            ent: if ablation.ent_loss { loss.lambda_ent } else { 0.0 },
        }
    }
}

/// Focal classification over non-ignored anchors plus smooth-L1 over the
/// positives, both summed and divided by `max(1, #pos)`. Returns
/// `(cls, reg)` scalars.
pub fn detection_loss_var(
    tape: &mut Tape,
    logits: Var,
    reg: Var,
    targets: &AnchorTargets,
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    let norm = 1.0 / targets.num_pos().max(1) as f64;
    let focal = tape.focal(logits, targets.cls.clone(), targets.cls_weight.clone(), cfg.focal_alpha, cfg.focal_gamma)?;
    let cls = tape.sum(focal);
    let cls = tape.scale(cls, norm);
    let reg_loss = if targets.pos.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let picked = tape.gather_rows(reg, targets.pos.clone())?;
        let l1 = tape.smooth_l1(picked, targets.reg.clone(), cfg.smooth_l1_beta)?;
        let s = tape.sum(l1);
        tape.scale(s, norm)
    };
    Ok((cls, reg_loss))
}

/// Auxiliary weather classifier: token -> hidden -> 7 logits.
#[derive(Debug, Clone)]
pub struct AuxParams {
    pub hidden: Linear,
    pub out: Linear,
}

impl AuxParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, token_dim: usize) -> Self {
        let hidden = Linear::relu_init(store, rng, "aux.hidden", token_dim, token_dim);
        let out = Linear::linear_init(store, rng, "aux.out", token_dim, NUM_WEATHER);
        AuxParams { hidden, out }
    }
}

pub fn aux_logits_var(tape: &mut Tape, p: &Bound, ap: &AuxParams, token: Var) -> Result<Var> {
    let h = ap.hidden.forward(tape, p, token)?;
    let h = tape.relu(h);
    ap.out.forward(tape, p, h)
}

/// `-rho_y ln softmax(z)_y` for logits `[1, 7]`.
pub fn weighted_ce_var(tape: &mut Tape, logits: Var, label: usize, rho: &[f64; NUM_WEATHER]) -> Result<Var> {
    if label >= NUM_WEATHER {
        return Err(Error::InvalidLabel(label));
    }
    let prob = tape.softmax(logits, 1)?;
    let py = tape.slice(prob, 1, label, 1)?;
    let py = tape.clamp(py, 1e-300, 1.0);
    let lp = tape.log(py);
    let lp = tape.sum(lp);
    Ok(tape.scale(lp, -rho[label]))
}

fn group_by_label(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    groups
}

/// Routing diversity over a batch of `[1, 3]` weight rows: the mean
/// within-category squared spread around each category center, and the
/// mean hinge `max(0, m - ‖μ_j - μ_k‖)` over unordered center pairs.
/// Returns `(intra, inter)`.
pub fn diversity_loss_var(tape: &mut Tape, weights: &[Var], labels: &[usize], margin: f64) -> Result<(Var, Var)> {
    if weights.is_empty() || weights.len() != labels.len() {
        return Err(Error::shape("diversity_loss", &[&[weights.len()], &[labels.len()]], "need one label per weight row"));
    }
    let groups = group_by_label(labels);
    let mut centers = Vec::with_capacity(groups.len());
    let mut spreads = Vec::with_capacity(groups.len());
    for idx in groups.values() {
        let rows: Vec<Var> = idx.iter().map(|&i| weights[i]).collect();
        let stacked = tape.concat(&rows, 0)?;
        let mu = tape.mean_rows(stacked)?;
        let diff = tape.sub(stacked, mu)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq);
        spreads.push(tape.scale(total, 1.0 / idx.len() as f64));
        centers.push(mu);
    }
    let intra = mean_of(tape, &spreads)?;
    let mut hinges = Vec::new();
    for j in 0..centers.len() {
        for k in j + 1..centers.len() {
            let d = tape.sub(centers[j], centers[k])?;
            let dist = tape.norm2(d);
            let neg = tape.scale(dist, -1.0);
            let gap = tape.add_scalar(neg, margin);
            hinges.push(tape.relu(gap));
        }
    }
    let inter = if hinges.is_empty() { tape.constant(Tensor::scalar(0.0)) } else { mean_of(tape, &hinges)? };
    Ok((intra, inter))
}

fn mean_of(tape: &mut Tape, scalars: &[Var]) -> Result<Var> {
    let all = tape.concat(scalars, 0)?;
    tape.mean(all)
}

/// Batch-mean normalized entropy `H̄` and the hinge `max(0, tau - H̄)`.
pub fn entropy_loss_var(tape: &mut Tape, weights: &[Var], tau: f64) -> Result<(Var, Var)> {
    if weights.is_empty() {
        return Err(Error::shape("entropy_loss", &[&[0]], "empty batch"));
    }
    let stacked = tape.concat(weights, 0)?;
    let safe = tape.clamp(stacked, 1e-12, 1.0);
    let logw = tape.log(safe);
    let plogp = tape.mul(stacked, logw)?;
    let s = tape.sum(plogp);
    let h_bar = tape.scale(s, -1.0 / (math::ln(3.0) * weights.len() as f64));
    let neg = tape.scale(h_bar, -1.0);
    let gap = tape.add_scalar(neg, tau);
    Ok((h_bar, tape.relu(gap)))
}

/// `L_det + λ_aux L_aux + λ_div (L_intra + L_inter) + λ_ent L_ent`; returns
/// `(L_div, total)`.
pub fn total_loss_var(
    tape: &mut Tape,
    det: Var,
    aux: Var,
    intra: Var,
    inter: Var,
    ent: Var,
    w: &LossWeights,
) -> Result<(Var, Var)> {
    let div = tape.add(intra, inter)?;
    let a = tape.scale(aux, w.aux);
    let d = tape.scale(div, w.div);
    let e = tape.scale(ent, w.ent);
    let t = tape.add(det, a)?;
    let t = tape.add(t, d)?;
    Ok((div, tape.add(t, e)?))
}

fn weight_rows(tape: &mut Tape, weights: &[RoutingWeights]) -> Vec<Var> {
    weights
        .iter()
        .map(|w| tape.constant(Tensor::new(alloc::vec![1, 3], w.to_array().to_vec()).expect("1x3")))
        .collect()
}

/// Value-level auxiliary loss of raw logits.
pub fn aux_loss_from_logits(logits: &[f64; NUM_WEATHER], label: usize, rho: &[f64; NUM_WEATHER]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(alloc::vec![1, NUM_WEATHER], logits.to_vec())?);
    let l = weighted_ce_var(&mut tape, z, label, rho)?;
    Ok(tape.value(l).item())
}

/// Value-level auxiliary loss of a condition token through the aux head.
pub fn aux_weather_loss(
    token: &[f64],
    store: &ParamStore,
    ap: &AuxParams,
    label: usize,
    rho: &[f64; NUM_WEATHER],
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let t = tape.constant(Tensor::new(alloc::vec![1, token.len()], token.to_vec())?);
    let z = aux_logits_var(&mut tape, &p, ap, t)?;
    let l = weighted_ce_var(&mut tape, z, label, rho)?;
    Ok(tape.value(l).item())
}

/// Value-level diversity loss: `(intra, inter)`.
pub fn diversity_loss(weights: &[RoutingWeights], labels: &[usize], margin: f64) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let rows = weight_rows(&mut tape, weights);
    let (a, b) = diversity_loss_var(&mut tape, &rows, labels, margin)?;
    Ok((tape.value(a).item(), tape.value(b).item()))
}

/// Value-level entropy loss: `(H̄, L_ent)`.
pub fn entropy_loss(weights: &[RoutingWeights], tau: f64) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let rows = weight_rows(&mut tape, weights);
    let (h, l) = entropy_loss_var(&mut tape, &rows, tau)?;
    Ok((tape.value(h).item(), tape.value(l).item()))
}

/// Value-level weighted sum; returns `total`.
pub fn total_loss(det: f64, aux: f64, div: f64, ent: f64, w: &LossWeights) -> f64 {
    det + w.aux * aux + w.div * div + w.ent * ent
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln7() {
        let l = aux_loss_from_logits(&[0.0; 7], 3, &[1.0; 7]).unwrap();
        assert!((l - math::ln(7.0)).abs() < 1e-12);
        assert_eq!(aux_loss_from_logits(&[0.0; 7], 7, &[1.0; 7]).unwrap_err(), Error::InvalidLabel(7));
    }

    #[test]
    fn coincident_centers_hit_margin() {
        let w = RoutingWeights::from_array([0.5, 0.3, 0.2]);
        let (intra, inter) = diversity_loss(&[w, w], &[0, 1], 0.12).unwrap();
        assert_eq!(intra, 0.0);
        assert_eq!(inter, 0.12);
    }
}
