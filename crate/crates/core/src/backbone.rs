//! Three parallel sparse encoders (LiDAR-only, radar-only, gated fusion)
//! and their BEV projections.
//!
//! The fusion stream reuses the LiDAR encoder and BEV weights; at each
//! layer it encodes its own previous output and then absorbs radar context
//! through gated neighbor attention. All sparse convolutions and BEV
//! projections are bias-free, so empty regions stay exactly zero.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::gaussian;
use crate::autodiff::{Bound, Neighbors, ParamId, ParamStore, Rulebook, Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Linear;
use crate::voxel::{knn_voxels, layer_k, BevPlan, ConvMode, CoordSet, SparseConvPlan, SparseVoxelTensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL;
/// Number of encoder layers.
pub const LAYERS: usize = 3;

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    /// Strided conv `[27, c_in, c_out]`.
    pub down: ParamId,
    /// Two residual blocks of two submanifold convs `[27, c, c]` each.
    pub res: [[ParamId; 2]; 2],
}

#[derive(Debug, Clone)]
pub struct BevProjection {
    /// Per layer `[gz_l, C_l, c_bev]`.
    pub collapse: [ParamId; LAYERS],
    /// Per layer `[c_bev, c_bev, s_l, s_l]`.
    pub upsample: [ParamId; LAYERS],
}

#[derive(Debug, Clone)]
pub struct FuseLayer {
    pub value: Linear,
    /// The gate's linear map over `[k ‖ ĉ^l]`, split into its key and
    /// token blocks.
    pub gate_keys: ParamId,
    pub gate_token: ParamId,
    pub gate_bias: ParamId,
    /// Layer-specific projection of the condition token to `C_l`.
    pub token: Linear,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub input_lidar: Linear,
    pub input_radar: Linear,
    pub lidar: [EncoderLayer; LAYERS],
    pub radar: [EncoderLayer; LAYERS],
    pub fuse: [FuseLayer; LAYERS],
    pub bev_lidar: BevProjection,
    pub bev_radar: BevProjection,
}

/// Grid extents after each strided layer.
pub fn layer_grids(cfg: &ModelConfig) -> [[usize; 3]; LAYERS] {
    let mut g = cfg.roi.grid();
    core::array::from_fn(|_| {
        g = g.map(|n| (n + 2 * (KERNEL / 2) - KERNEL) / 2 + 1);
        g
    })
}

fn encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> [EncoderLayer; LAYERS] {
    let ch = cfg.channels;
    core::array::from_fn(|l| {
        let c_in = if l == 0 { ch[0] } else { ch[l - 1] };
        let c = ch[l];
        // Active sparse inputs per output are far fewer than 27; scale for a
        // handful of live taps.
        let down_std = math::sqrt(2.0 / (8 * c_in) as f64);
        let res_std = 0.5 * math::sqrt(2.0 / (8 * c) as f64);
        let down = store.add(format!("{name}.l{}.down", l + 1), gaussian(rng, &[TAPS, c_in, c], down_std));
        let res = core::array::from_fn(|b| {
            core::array::from_fn(|k| {
                store.add(format!("{name}.l{}.res{}.conv{}", l + 1, b + 1, k + 1), gaussian(rng, &[TAPS, c, c], res_std))
            })
        });
        EncoderLayer { down, res }
    })
}

fn bev_projection(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> BevProjection {
    let grids = layer_grids(cfg);
    let cb = cfg.bev_channels;
    let collapse = core::array::from_fn(|l| {
        let c = cfg.channels[l];
        store.add(format!("{name}.l{}.collapse", l + 1), gaussian(rng, &[grids[l][2], c, cb], math::sqrt(2.0 / (4 * c) as f64)))
    });
    let upsample = core::array::from_fn(|l| {
        let s = 2usize << l;
        store.add(format!("{name}.l{}.upsample", l + 1), gaussian(rng, &[cb, cb, s, s], math::sqrt(1.0 / cb as f64)))
    });
    BevProjection { collapse, upsample }
}

impl BackboneParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c0 = cfg.channels[0];
        let input_lidar = Linear::relu_init(store, rng, "input_lidar", 4, c0);
        let input_radar = Linear::relu_init(store, rng, "input_radar", 4, c0);
        let lidar = encoder(store, rng, "lidar_enc", cfg);
        let radar = encoder(store, rng, "radar_enc", cfg);
        let d = cfg.token_dim;
        let fuse = core::array::from_fn(|l| {
            let c = cfg.channels[l];
            let n = format!("fuse.l{}", l + 1);
            let std = math::sqrt(1.0 / c as f64);
            FuseLayer {
                value: Linear::linear_init(store, rng, &format!("{n}.value"), c, c),
                gate_keys: store.add(format!("{n}.gate_keys"), gaussian(rng, &[c, c], std)),
                gate_token: store.add(format!("{n}.gate_token"), gaussian(rng, &[c, c], std)),
                gate_bias: store.add(format!("{n}.gate_bias"), Tensor::zeros(&[c])),
                token: Linear::linear_init(store, rng, &format!("{n}.token"), d, c),
            }
        });
        let bev_lidar = bev_projection(store, rng, "bev_lidar", cfg);
        let bev_radar = bev_projection(store, rng, "bev_radar", cfg);
        BackboneParams { input_lidar, input_radar, lidar, radar, fuse, bev_lidar, bev_radar }
    }
}

/// Coordinate sets and rulebooks of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub set: Arc<CoordSet>,
    pub down: Arc<Rulebook>,
    pub subm: Arc<Rulebook>,
    pub bev: BevPlan,
}

/// Per-modality sparse structure for all layers; depends only on the
/// input coordinates, never on parameters.
#[derive(Debug, Clone)]
pub struct ModalityPlan {
    pub layers: Vec<LayerPlan>,
}

impl ModalityPlan {
    pub fn new(input: &CoordSet, cfg: &ModelConfig) -> Result<Self> {
        let hw = cfg.bev_hw();
        let mut layers = Vec::with_capacity(LAYERS);
        let mut cur = input.clone();
        for l in 0..LAYERS {
            let down = SparseConvPlan::new(&cur, KERNEL, ConvMode::Strided(2))?;
            let subm = SparseConvPlan::new(&down.output, KERNEL, ConvMode::Submanifold)?;
            let bev = BevPlan::new(&down.output, 2 << l, hw);
            cur = (*down.output).clone();
            layers.push(LayerPlan { set: down.output, down: down.rulebook, subm: subm.rulebook, bev });
        }
        Ok(ModalityPlan { layers })
    }
}

#[derive(Debug, Clone)]
pub struct BackbonePlan {
    /// `None` when the modality has no voxels.
    pub lidar: Option<ModalityPlan>,
    pub radar: Option<ModalityPlan>,
    /// Radar neighbors of every LiDAR voxel per layer; `None` when either
    /// side is empty at that layer (fusion then reduces to the residual).
    pub neighbors: [Option<Arc<Neighbors>>; LAYERS],
}

impl BackbonePlan {
    pub fn new(lidar: &CoordSet, radar: &CoordSet, cfg: &ModelConfig) -> Result<Self> {
        let lp = if lidar.is_empty() { None } else { Some(ModalityPlan::new(lidar, cfg)?) };
        let rp = if radar.is_empty() { None } else { Some(ModalityPlan::new(radar, cfg)?) };
        let mut neighbors: [Option<Arc<Neighbors>>; LAYERS] = Default::default();
        if let (Some(lp), Some(rp)) = (&lp, &rp) {
            for l in 0..LAYERS {
                let q = lp.layers[l].set.coords();
                let k = rp.layers[l].set.coords();
                if q.is_empty() || k.is_empty() {
                    continue;
                }
                let lists = knn_voxels(q, k, layer_k(l + 1))?;
                neighbors[l] = Some(Arc::new(Neighbors::from_lists(&lists)));
            }
        }
        Ok(BackbonePlan { lidar: lp, radar: rp, neighbors })
    }
}

/// Input lift: `relu(x W + b)` per voxel.
pub fn input_layer_var(tape: &mut Tape, p: &Bound, lin: &Linear, raw: Var) -> Result<Var> {
    let y = lin.forward(tape, p, raw)?;
    Ok(tape.relu(y))
}

fn residual_block(tape: &mut Tape, p: &Bound, w: &[ParamId; 2], rb: &Arc<Rulebook>, x: Var) -> Result<Var> {
    let h = tape.sparse_conv(x, p[w[0]], rb.clone())?;
    let h = tape.relu(h);
    let h = tape.sparse_conv(h, p[w[1]], rb.clone())?;
    tape.add(x, h)
}

/// Strided conv, relu, then two residual blocks `x + conv(relu(conv(x)))`.
pub fn encode_layer_var(tape: &mut Tape, p: &Bound, layer: &EncoderLayer, plan: &LayerPlan, x: Var) -> Result<Var> {
    let y = tape.sparse_conv(x, p[layer.down], plan.down.clone())?;
    let mut y = tape.relu(y);
    for block in &layer.res {
        y = residual_block(tape, p, block, &plan.subm, y)?;
    }
    Ok(y)
}

/// Result of one fusion layer.
#[derive(Debug, Clone, Copy)]
pub struct FuseOutput {
    pub fused: Var,
    /// Gate `[n, C_l]`, absent when there was no radar context.
    pub gate: Option<Var>,
    pub attention: Option<Var>,
}

/// `F = softmax(q Kᵀ) V ⊙ g + q` per LiDAR voxel, with
/// `g = sigmoid(mean_k Linear([k ‖ ĉ^l]))` pooled over the neighbors.
/// Without radar context the output is `q` itself.
pub fn gated_knn_fuse_var(
    tape: &mut Tape,
    p: &Bound,
    fl: &FuseLayer,
    q: Var,
    radar: Option<(Var, Arc<Neighbors>)>,
    token: Var,
    scaled: bool,
    layer: usize,
) -> Result<FuseOutput> {
    let Some((keys, nbrs)) = radar else {
        return Ok(FuseOutput { fused: q, gate: None, attention: None });
    };
    let c = tape.shape(q)[1];
    let scale = if scaled { 1.0 / math::sqrt(c as f64) } else { 1.0 };
    let values = fl.value.forward(tape, p, keys)?;
    let att = tape.knn_attention(q, keys, values, nbrs.clone(), scale)?;
    let tok = fl.token.forward(tape, p, token)?;
    let gate_tok = tape.matmul(tok, p[fl.gate_token])?;
    let gate_tok = tape.reshape(gate_tok, &[c])?;
    let gate_tok = tape.add(gate_tok, p[fl.gate_bias])?;
    let pooled = tape.neighbor_mean(keys, nbrs)?;
    let gate_keys = tape.matmul(pooled, p[fl.gate_keys])?;
    let pre = tape.add(gate_keys, gate_tok)?;
    let gate = tape.sigmoid(pre);
    if tape.value(gate).data().iter().any(|&g| !(g > 0.0 && g < 1.0)) {
        return Err(Error::GateSaturated(layer));
    }
    let mixed = tape.mul(att, gate)?;
    let fused = tape.add(mixed, q)?;
    Ok(FuseOutput { fused, gate: Some(gate), attention: Some(att) })
}

/// Everything the backbone records for one sample.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// `[3 c_bev, H, W]` each.
    pub bev_lidar: Var,
    pub bev_radar: Var,
    pub bev_fusion: Var,
    /// Per-layer sparse features (empty when the modality is empty).
    pub lidar_layers: Vec<Var>,
    pub radar_layers: Vec<Var>,
    pub fusion_layers: Vec<Var>,
    pub gates: Vec<Option<Var>>,
}

fn project(tape: &mut Tape, p: &Bound, proj: &BevProjection, plan: &ModalityPlan, feats: &[Var]) -> Result<Var> {
    let mut maps = Vec::with_capacity(LAYERS);
    for l in 0..LAYERS {
        maps.push(plan.layers[l].bev.apply(tape, feats[l], p[proj.collapse[l]], p[proj.upsample[l]])?);
    }
    tape.concat(&maps, 0)
}

/// Encode all three branches and project each onto the BEV grid.
/// `lidar0` / `radar0` are post-input-layer features (`None` when empty)
/// and `token` is `ĉ [1, d_c]`.
pub fn run_backbone_var(
    tape: &mut Tape,
    p: &Bound,
    bp: &BackboneParams,
    plan: &BackbonePlan,
    cfg: &ModelConfig,
    lidar0: Option<Var>,
    radar0: Option<Var>,
    token: Var,
) -> Result<BranchOutput> {
    let (h, w) = cfg.bev_hw();
    let zero_bev = |tape: &mut Tape| tape.constant(Tensor::zeros(&[LAYERS * cfg.bev_channels, h, w]));

    let mut radar_layers = Vec::new();
    let bev_radar = match (&plan.radar, radar0) {
        (Some(rp), Some(r0)) => {
            let mut x = r0;
            for l in 0..LAYERS {
                x = encode_layer_var(tape, p, &bp.radar[l], &rp.layers[l], x)?;
                radar_layers.push(x);
            }
            project(tape, p, &bp.bev_radar, rp, &radar_layers)?
        }
        _ => zero_bev(tape),
    };

    let mut lidar_layers = Vec::new();
    let mut fusion_layers = Vec::new();
    let mut gates = Vec::new();
    let (bev_lidar, bev_fusion) = match (&plan.lidar, lidar0) {
        (Some(lp), Some(l0)) => {
            let mut x = l0;
            for l in 0..LAYERS {
                x = encode_layer_var(tape, p, &bp.lidar[l], &lp.layers[l], x)?;
                lidar_layers.push(x);
            }
            let mut f = l0;
            for l in 0..LAYERS {
                // The first fusion layer encodes exactly L^0, so its query is L^1.
                let q = if l == 0 { lidar_layers[0] } else { encode_layer_var(tape, p, &bp.lidar[l], &lp.layers[l], f)? };
                let ctx = plan.neighbors[l].as_ref().map(|n| (radar_layers[l], n.clone()));
                let out = gated_knn_fuse_var(tape, p, &bp.fuse[l], q, ctx, token, cfg.scaled_attention, l + 1)?;
                f = out.fused;
                fusion_layers.push(f);
                gates.push(out.gate);
            }
            (project(tape, p, &bp.bev_lidar, lp, &lidar_layers)?, project(tape, p, &bp.bev_lidar, lp, &fusion_layers)?)
        }
        _ => (zero_bev(tape), zero_bev(tape)),
    };
    Ok(BranchOutput { bev_lidar, bev_radar, bev_fusion, lidar_layers, radar_layers, fusion_layers, gates })
}

/// Value-level input lift of raw 4-channel voxel features.
pub fn input_layer(voxels: &SparseVoxelTensor, store: &ParamStore, lin: &Linear) -> Result<SparseVoxelTensor> {
    if voxels.is_empty() {
        let c = store.value(lin.w).shape()[1];
        return Ok(SparseVoxelTensor::empty(voxels.set.grid(), c));
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(voxels.feats.clone());
    let y = input_layer_var(&mut tape, &p, lin, x)?;
    SparseVoxelTensor::new(voxels.set.clone(), tape.value(y).clone())
}

/// Value-level three-branch backbone on post-input-layer features.
/// Returns `(F̃_L, F̃_R, F̃_F)`.
pub fn run_backbone(
    lidar0: &SparseVoxelTensor,
    radar0: &SparseVoxelTensor,
    token: &[f64],
    store: &ParamStore,
    bp: &BackboneParams,
    cfg: &ModelConfig,
) -> Result<[Tensor; 3]> {
    let plan = BackbonePlan::new(&lidar0.set, &radar0.set, cfg)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let l0 = (!lidar0.is_empty()).then(|| tape.constant(lidar0.feats.clone()));
    let r0 = (!radar0.is_empty()).then(|| tape.constant(radar0.feats.clone()));
    let t = tape.constant(Tensor::new(alloc::vec![1, token.len()], token.to_vec())?);
    let out = run_backbone_var(&mut tape, &p, bp, &plan, cfg, l0, r0, t)?;
    Ok([tape.value(out.bev_lidar).clone(), tape.value(out.bev_radar).clone(), tape.value(out.bev_fusion).clone()])
}
