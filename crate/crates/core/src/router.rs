//! Condition-driven soft routing over the three branches.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::config::RoutingConfig;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Linear;

/// Branch weights `(w_L, w_R, w_F)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingWeights {
    pub w_l: f64,
    pub w_r: f64,
    pub w_f: f64,
}

impl RoutingWeights {
    pub const UNIFORM: RoutingWeights = RoutingWeights { w_l: 1.0 / 3.0, w_r: 1.0 / 3.0, w_f: 1.0 / 3.0 };
    pub const FUSION_ONLY: RoutingWeights = RoutingWeights { w_l: 0.0, w_r: 0.0, w_f: 1.0 };

    pub fn from_array(w: [f64; 3]) -> Self {
        RoutingWeights { w_l: w[0], w_r: w[1], w_f: w[2] }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.w_l, self.w_r, self.w_f]
    }

    /// Shannon entropy normalized by `ln 3`, with `0 ln 0 = 0`.
    pub fn normalized_entropy(self) -> f64 {
        -self.to_array().iter().filter(|&&w| w > 0.0).map(|&w| w * math::ln(w)).sum::<f64>() / math::ln(3.0)
    }
}

/// The weight floor `w <- (1 - 3 eps) w + eps`.
pub fn apply_floor(w: [f64; 3], eps: f64) -> [f64; 3] {
    w.map(|v| (1.0 - 3.0 * eps) * v + eps)
}

#[derive(Debug, Clone)]
pub struct RouterParams {
    pub hidden: Linear,
    pub out: Linear,
}

impl RouterParams {
    /// First layer `N(0, 0.02)`, last layer all zeros so every branch starts
    /// at weight 1/3.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, token_dim: usize) -> Self {
        let hidden = Linear::new(store, rng, "router.hidden", token_dim, token_dim / 2, 0.02);
        let out = Linear::new(store, rng, "router.out", token_dim / 2, 3, 0.0);
        RouterParams { hidden, out }
    }
}

/// Pre-softmax router logits `[1, 3]` for a token `[1, d_c]`.
pub fn router_logits_var(tape: &mut Tape, p: &Bound, rp: &RouterParams, token: Var) -> Result<Var> {
    let h = rp.hidden.forward(tape, p, token)?;
    let h = tape.relu(h);
    rp.out.forward(tape, p, h)
}

/// Routing weights `[1, 3]`: softmax of the logits, then the floor unless
/// it is disabled for testing.
pub fn route_var(tape: &mut Tape, p: &Bound, rp: &RouterParams, token: Var, cfg: &RoutingConfig) -> Result<Var> {
    let logits = router_logits_var(tape, p, rp, token)?;
    let w = tape.softmax(logits, 1)?;
    if cfg.floor_disabled {
        return Ok(w);
    }
    let scaled = tape.scale(w, 1.0 - 3.0 * cfg.epsilon);
    Ok(tape.add_scalar(scaled, cfg.epsilon))
}

fn component(tape: &mut Tape, w: Var, i: usize) -> Result<Var> {
    let s = tape.slice(w, 1, i, 1)?;
    tape.reshape(s, &[1])
}

/// `[(w_R + w_F) F̃_R ‖ w_L F̃_L + w_F F̃_F]` along channels. `w` is `[1, 3]`.
pub fn aggregate_var(tape: &mut Tape, w: Var, lidar: Var, radar: Var, fusion: Var) -> Result<Var> {
    let (sl, sr, sf) = (tape.shape(lidar).to_vec(), tape.shape(radar), tape.shape(fusion));
    if sl.as_slice() != sr || sl.as_slice() != sf {
        return Err(Error::shape("aggregate", &[&sl, sr, sf], "branch maps must have identical shapes"));
    }
    let wl = component(tape, w, 0)?;
    let wr = component(tape, w, 1)?;
    let wf = component(tape, w, 2)?;
    let w_radar = tape.add(wr, wf)?;
    let radar_side = tape.mul(radar, w_radar)?;
    let l = tape.mul(lidar, wl)?;
    let f = tape.mul(fusion, wf)?;
    let lidar_side = tape.add(l, f)?;
    tape.concat(&[radar_side, lidar_side], 0)
}

/// Value-level routing of a single token.
pub fn route(token: &[f64], store: &ParamStore, rp: &RouterParams, cfg: &RoutingConfig) -> Result<RoutingWeights> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let t = tape.constant(Tensor::new(alloc::vec![1, token.len()], token.to_vec())?);
    let w = route_var(&mut tape, &p, rp, t, cfg)?;
    let d = tape.value(w).data();
    Ok(RoutingWeights::from_array([d[0], d[1], d[2]]))
}

/// Value-level aggregation of three equally shaped `[c, H, W]` maps.
pub fn aggregate(w: RoutingWeights, lidar: &Tensor, radar: &Tensor, fusion: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let wv = tape.constant(Tensor::new(alloc::vec![1, 3], w.to_array().to_vec())?);
    let l = tape.constant(lidar.clone());
    let r = tape.constant(radar.clone());
    let f = tape.constant(fusion.clone());
    let out = aggregate_var(&mut tape, wv, l, r, f)?;
    Ok(tape.value(out).clone())
}
