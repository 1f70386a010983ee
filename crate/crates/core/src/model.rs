//! The full detector: parameters, per-sample preprocessing, forward pass
//! and the batch objective.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::backbone::{input_layer_var, run_backbone_var, BackboneParams, BackbonePlan, BranchOutput};
use crate::condition::{refine_token_var, semantic_token_var, visual_token_var, ConditionParams, WeatherVocabulary};
use crate::config::{AblationConfig, EvalConfig, LossConfig, ModelConfig, RoutingConfig, RunConfig};
use crate::error::{Error, Result};
use crate::geometry::{Box3D, Detection};
use crate::head::loss::{
    aux_logits_var, detection_loss_var, diversity_loss_var, entropy_loss_var, total_loss_var, weighted_ce_var, AuxParams,
    LossBreakdown, LossWeights,
};
use crate::head::{assign_targets, decode_and_nms, head_forward_var, AnchorGrid, AnchorTargets, HeadParams};
use crate::router::{aggregate_var, route_var, RouterParams, RoutingWeights};
use crate::sim::SceneSample;
use crate::voxel::{voxelize, RoiSpec, SparseVoxelTensor};
use crate::weather::Weather;

/// Doppler speeds are divided by this before the radar input layer.
pub const DOPPLER_SCALE: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub condition: ConditionParams,
    pub backbone: BackboneParams,
    pub router: RouterParams,
    pub head: HeadParams,
    pub aux: AuxParams,
    pub vocab: WeatherVocabulary,
    pub anchors: AnchorGrid,
}

impl Model {
    /// Seeded initialization from `cfg.init_seed`.
    pub fn new(cfg: &ModelConfig, vocab: WeatherVocabulary) -> Result<Self> {
        cfg.validate()?;
        if vocab.dim() != cfg.token_dim {
            return Err(Error::Config(alloc::format!(
                "vocabulary width {} != token_dim {}",
                vocab.dim(),
                cfg.token_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let condition = ConditionParams::new(&mut store, &mut rng, cfg);
        let backbone = BackboneParams::new(&mut store, &mut rng, cfg);
        let router = RouterParams::new(&mut store, &mut rng, cfg.token_dim);
        let head = HeadParams::new(&mut store, &mut rng, cfg);
        let aux = AuxParams::new(&mut store, &mut rng, cfg.token_dim);
        Ok(Model { cfg: cfg.clone(), store, condition, backbone, router, head, aux, vocab, anchors: AnchorGrid::new(cfg) })
    }
}

/// How branch weights are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoutingMode {
    Learned(RoutingConfig),
    /// Router bypassed.
    Fixed(RoutingWeights),
}

impl RoutingMode {
    pub fn from_config(routing: &RoutingConfig, ablation: &AblationConfig) -> Self {
        if ablation.force_fusion_only {
            RoutingMode::Fixed(RoutingWeights::FUSION_ONLY)
        } else if !ablation.branch_routing {
            RoutingMode::Fixed(RoutingWeights::UNIFORM)
        } else {
            RoutingMode::Learned(*routing)
        }
    }
}

/// Parameter-independent view of one scene, computed once per dataset.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// Normalized `[n, 4]` voxel features, `None` if no voxels.
    pub lidar: Option<Tensor>,
    pub radar: Option<Tensor>,
    pub plan: BackbonePlan,
    pub image: Tensor,
    /// `[1, d_c]`
    pub prompt: Tensor,
    pub weather: Weather,
    pub boxes: Vec<Box3D>,
    pub targets: AnchorTargets,
}

/// Voxel-local input features: point offsets from the voxel center in
/// voxel units, and the fourth channel divided by `scale`.
pub fn normalize_voxels(v: &SparseVoxelTensor, roi: &RoiSpec, scale: f64) -> Option<Tensor> {
    if v.is_empty() {
        return None;
    }
    let vs = roi.voxel_size;
    let mut data = Vec::with_capacity(v.len() * 4);
    for (i, &c) in v.set.coords().iter().enumerate() {
        let center = roi.voxel_center(c);
        let r = v.row(i);
        data.extend([(r[0] - center[0]) / vs, (r[1] - center[1]) / vs, (r[2] - center[2]) / vs, r[3] / scale]);
    }
    Some(Tensor::from_parts(alloc::vec![v.len(), 4], data))
}

pub fn prepare_sample(s: &SceneSample, model: &ModelConfig, loss: &LossConfig, anchors: &AnchorGrid) -> Result<PreparedSample> {
    let roi = &model.roi;
    let lv = voxelize(&s.lidar, roi);
    let rv = voxelize(&s.radar, roi);
    let plan = BackbonePlan::new(&lv.set, &rv.set, model)?;
    let [h, w] = model.image_size;
    if s.image.shape() != [3, h, w] {
        return Err(Error::shape("prepare_sample", &[s.image.shape(), &[3, h, w]], "pseudo-image size differs from config"));
    }
    if s.prompt.len() != model.token_dim {
        return Err(Error::shape("prepare_sample", &[&[s.prompt.len()], &[model.token_dim]], "prompt width != token_dim"));
    }
    Ok(PreparedSample {
        lidar: normalize_voxels(&lv, roi, 1.0),
        radar: normalize_voxels(&rv, roi, DOPPLER_SCALE),
        plan,
        image: s.image.clone(),
        prompt: Tensor::from_parts(alloc::vec![1, model.token_dim], s.prompt.clone()),
        weather: s.weather,
        boxes: s.boxes.clone(),
        targets: assign_targets(anchors, &s.boxes, loss),
    })
}

pub fn prepare_all(samples: &[SceneSample], cfg: &RunConfig, anchors: &AnchorGrid) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| prepare_sample(s, &cfg.model, &cfg.loss, anchors)).collect()
}

/// Tape handles produced by one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub token: Var,
    pub alpha: Var,
    /// `[1, 3]`
    pub weights: Var,
    pub branches: BranchOutput,
    pub aggregated: Var,
    pub logits: Var,
    pub reg: Var,
    pub aux_logits: Var,
}

impl Model {
    pub fn forward_sample(&self, tape: &mut Tape, p: &Bound, s: &PreparedSample, mode: &RoutingMode) -> Result<SampleForward> {
        let lidar0 = match &s.lidar {
            Some(t) => {
                let x = tape.constant(t.clone());
                Some(input_layer_var(tape, p, &self.backbone.input_lidar, x)?)
            }
            None => None,
        };
        let radar0 = match &s.radar {
            Some(t) => {
                let x = tape.constant(t.clone());
                Some(input_layer_var(tape, p, &self.backbone.input_radar, x)?)
            }
            None => None,
        };
        let img = tape.constant(s.image.clone());
        let c_v = visual_token_var(tape, p, &self.condition, img)?;
        let prompt = tape.constant(s.prompt.clone());
        let vocab = tape.constant(self.vocab.matrix().clone());
        let (c_p, alpha) = semantic_token_var(tape, p, &self.condition, prompt, vocab)?;
        let token = refine_token_var(tape, p, &self.condition, c_v, c_p, radar0, lidar0)?;
        let branches = run_backbone_var(tape, p, &self.backbone, &s.plan, &self.cfg, lidar0, radar0, token)?;
        let weights = match mode {
            RoutingMode::Learned(rc) => route_var(tape, p, &self.router, token, rc)?,
            RoutingMode::Fixed(w) => tape.constant(Tensor::from_parts(alloc::vec![1, 3], w.to_array().to_vec())),
        };
        let aggregated = aggregate_var(tape, weights, branches.bev_lidar, branches.bev_radar, branches.bev_fusion)?;
        let (logits, reg) = head_forward_var(tape, p, &self.head, aggregated)?;
        let aux_logits = aux_logits_var(tape, p, &self.aux, token)?;
        Ok(SampleForward { token, alpha, weights, branches, aggregated, logits, reg, aux_logits })
    }

    /// Build the batch objective on `tape`.
    pub fn batch_loss(&self, tape: &mut Tape, p: &Bound, batch: &[&PreparedSample], run: &RunConfig) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::shape("batch_loss", &[&[0]], "empty batch"));
        }
        let mode = RoutingMode::from_config(&run.routing, &run.ablation);
        let mut samples = Vec::with_capacity(batch.len());
        let mut det_terms = Vec::with_capacity(batch.len());
        let mut cls_terms = Vec::with_capacity(batch.len());
        let mut reg_terms = Vec::with_capacity(batch.len());
        let mut aux_terms = Vec::with_capacity(batch.len());
        for s in batch {
            let f = self.forward_sample(tape, p, s, &mode)?;
            let (cls, reg) = detection_loss_var(tape, f.logits, f.reg, &s.targets, &run.loss)?;
            det_terms.push(tape.add(cls, reg)?);
            cls_terms.push(cls);
            reg_terms.push(reg);
            aux_terms.push(weighted_ce_var(tape, f.aux_logits, s.weather.index(), &run.loss.rho)?);
            samples.push(f);
        }
        let inv = 1.0 / batch.len() as f64;
        let mean = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let c = tape.concat(v, 0)?;
            let s = tape.sum(c);
            Ok(tape.scale(s, inv))
        };
        let det = mean(tape, &det_terms)?;
        let cls = mean(tape, &cls_terms)?;
        let reg = mean(tape, &reg_terms)?;
        let aux = mean(tape, &aux_terms)?;
        let weights: Vec<Var> = samples.iter().map(|f| f.weights).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.weather.index()).collect();
        let (intra, inter) = diversity_loss_var(tape, &weights, &labels, run.loss.margin)?;
        let (h_bar, ent) = entropy_loss_var(tape, &weights, run.loss.tau)?;
        let lw = LossWeights::resolve(&run.loss, &run.ablation);
        let (div, total) = total_loss_var(tape, det, aux, intra, inter, ent, &lw)?;
        let v = |x: Var| tape.value(x).item();
        let breakdown = LossBreakdown {
            det: v(det),
            cls: v(cls),
            reg: v(reg),
            aux: v(aux),
            intra: v(intra),
            inter: v(inter),
            div: v(div),
            ent: v(ent),
            total: v(total),
            h_bar: v(h_bar),
        };
        let routing = samples
            .iter()
            .map(|f| {
                let d = tape.value(f.weights).data();
                RoutingWeights::from_array([d[0], d[1], d[2]])
            })
            .collect();
        Ok(BatchLoss { total, aux, breakdown, routing, samples })
    }

    /// Detections and routing weights for one scene.
    pub fn predict(&self, s: &PreparedSample, mode: &RoutingMode, eval: &EvalConfig) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let f = self.forward_sample(&mut tape, &p, s, mode)?;
        let w = tape.value(f.weights).data();
        let weights = RoutingWeights::from_array([w[0], w[1], w[2]]);
        let detections = decode_and_nms(
            tape.value(f.logits).data(),
            tape.value(f.reg).data(),
            &self.anchors,
            eval.conf_thresh,
            eval.nms_iou,
        );
        let alpha = tape.value(f.alpha).data().to_vec();
        Ok(Prediction { detections, weights, alpha })
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    /// Mean auxiliary loss (the objective of visual pretraining).
    pub aux: Var,
    pub breakdown: LossBreakdown,
    pub routing: Vec<RoutingWeights>,
    pub samples: Vec<SampleForward>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub detections: Vec<Detection>,
    pub weights: RoutingWeights,
    pub alpha: Vec<f64>,
}
