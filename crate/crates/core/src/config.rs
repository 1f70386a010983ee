//! Run configuration with the two named presets.

use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::voxel::RoiSpec;
use crate::weather::NUM_WEATHER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

impl core::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(alloc::format!("unknown preset `{other}` (expected paper|desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub roi: RoiSpec,
    /// Encoder widths per layer; the input lift produces `channels[0]`.
    pub channels: [usize; 3],
    /// BEV width contributed by each encoder layer.
    pub bev_channels: usize,
    /// Condition token width.
    pub token_dim: usize,
    /// Pseudo-image `[height, width]`.
    pub image_size: [usize; 2],
    pub visual_channels: [usize; 3],
    pub visual_stride: usize,
    pub head_kernel: usize,
    /// Divide attention scores by `sqrt(C_l)`.
    pub scaled_attention: bool,
    /// Anchor `(w, l, h)` in meters.
    pub anchor_size: [f64; 3],
    pub vocab_seed: u64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn bev_hw(&self) -> (usize, usize) {
        let g = self.roi.grid();
        (g[1], g[0])
    }

    /// Per-branch BEV width (three layers concatenated).
    pub fn branch_bev_channels(&self) -> usize {
        3 * self.bev_channels
    }

    /// Aggregated BEV width fed to the head.
    pub fn aggregated_channels(&self) -> usize {
        2 * self.branch_bev_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.roi.validate()?;
        if self.token_dim < NUM_WEATHER || self.token_dim % 2 != 0 {
            return Err(Error::Config("token_dim must be even and at least 7".into()));
        }
        if self.head_kernel % 2 == 0 {
            return Err(Error::Config("head_kernel must be odd".into()));
        }
        if self.channels.iter().chain(&self.visual_channels).any(|&c| c == 0) || self.bev_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingConfig {
    /// Minimum weight guaranteed to every branch.
    pub epsilon: f64,
    /// Test mode only: skip the floor so simplex corners are reachable.
    pub floor_disabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_aux: f64,
    pub lambda_div: f64,
    pub lambda_ent: f64,
    /// Hinge margin between routing centers.
    pub margin: f64,
    /// Target normalized routing entropy.
    pub tau: f64,
    /// Per-category weights of the auxiliary cross-entropy.
    pub rho: [f64; NUM_WEATHER],
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// When off the router is bypassed and the three branches are averaged
    /// with fixed equal weights.
    pub branch_routing: bool,
    pub aux_loss: bool,
    pub div_loss: bool,
    pub ent_loss: bool,
    /// Router bypassed, aggregation uses the fixed weights `(0, 0, 1)`.
    pub force_fusion_only: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { branch_routing: true, aux_loss: true, div_loss: true, ent_loss: true, force_fusion_only: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    /// Epochs that train only the visual backbone and auxiliary head on
    /// the auxiliary loss before joint training (0 disables).
    pub visual_pretrain_epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub conf_thresh: f64,
    pub nms_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub min_cars: usize,
    pub max_cars: usize,
    /// Relative jitter of car extents around the anchor size.
    pub size_jitter: f64,
    /// LiDAR surface samples per square meter of visible car surface.
    pub lidar_density: f64,
    pub lidar_keep_slope: f64,
    pub lidar_noise_base: f64,
    pub lidar_noise_slope: f64,
    /// Radar surface density relative to LiDAR.
    pub radar_density_ratio: f64,
    pub radar_keep_slope: f64,
    pub radar_noise: f64,
    pub ground_points: usize,
    pub radar_ground_points: usize,
    /// Spurious near-range LiDAR returns per scene at severity 1.
    pub lidar_clutter: f64,
    pub prompt_sigma: f64,
    /// `(lidar, radar)` severity per category, in category order.
    pub severities: [(f64, f64); NUM_WEATHER],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub routing: RoutingConfig,
    pub loss: LossConfig,
    pub ablation: AblationConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sim: SimConfig,
}

pub const DEFAULT_RHO: [f64; NUM_WEATHER] = [1.0, 1.0, 1.6, 1.3, 2.0, 1.3, 2.0];

pub const DEFAULT_SEVERITIES: [(f64, f64); NUM_WEATHER] =
    [(0.0, 0.0), (0.15, 0.05), (0.55, 0.10), (0.35, 0.10), (0.75, 0.15), (0.35, 0.10), (0.90, 0.15)];

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Paper => ModelConfig {
                roi: RoiSpec::paper(),
                channels: [64, 128, 256],
                bev_channels: 256,
                token_dim: 512,
                image_size: [704, 1280],
                visual_channels: [16, 32, 64],
                visual_stride: 4,
                head_kernel: 3,
                scaled_attention: true,
                anchor_size: [2.1, 4.2, 2.0],
                vocab_seed: 17,
                init_seed: 1,
            },
            Preset::Desk => ModelConfig {
                roi: RoiSpec::desk(),
                channels: [8, 16, 32],
                bev_channels: 8,
                token_dim: 32,
                image_size: [16, 16],
                visual_channels: [8, 16, 16],
                visual_stride: 2,
                head_kernel: 1,
                scaled_attention: true,
                anchor_size: [2.1, 4.2, 2.0],
                vocab_seed: 17,
                init_seed: 1,
            },
        };
        let sim = SimConfig {
            seed: 2024,
            train_per_category: 100,
            test_per_category: 20,
            min_cars: 1,
            max_cars: if preset == Preset::Paper { 6 } else { 3 },
            size_jitter: 0.15,
            lidar_density: 6.0,
            lidar_keep_slope: 0.7,
            lidar_noise_base: 0.02,
            lidar_noise_slope: 0.10,
            radar_density_ratio: 0.125,
            radar_keep_slope: 0.1,
            radar_noise: 0.15,
            ground_points: 60,
            radar_ground_points: 6,
            lidar_clutter: 60.0,
            prompt_sigma: 0.3,
            severities: DEFAULT_SEVERITIES,
        };
        RunConfig {
            preset,
            model,
            routing: RoutingConfig { epsilon: 0.1, floor_disabled: false },
            loss: LossConfig {
                lambda_aux: 0.1,
                lambda_div: 0.02,
                lambda_ent: 0.01,
                margin: 0.12,
                tau: 0.78,
                rho: DEFAULT_RHO,
                focal_alpha: 0.25,
                focal_gamma: 2.0,
                smooth_l1_beta: 1.0,
                pos_iou: 0.5,
                neg_iou: 0.2,
            },
            ablation: AblationConfig::default(),
            train: TrainConfig {
                epochs: 20,
                batch_size: 4,
                lr_max: 5e-4,
                lr_min: 1e-4,
                adam: AdamConfig::default(),
                visual_pretrain_epochs: 0,
                seed: 0,
            },
            eval: EvalConfig { conf_thresh: 0.3, nms_iou: 0.1 },
            sim,
        }
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn paper() -> Self {
        Self::preset(Preset::Paper)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let r = &self.routing;
        if !(0.0..1.0 / 3.0).contains(&r.epsilon) {
            return Err(Error::Config("routing.epsilon must lie in [0, 1/3)".into()));
        }
        let l = &self.loss;
        if l.rho.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config("loss.rho entries must be positive".into()));
        }
        if !(l.neg_iou <= l.pos_iou) {
            return Err(Error::Config("loss.neg_iou must not exceed loss.pos_iou".into()));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be positive".into()));
        }
        let s = &self.sim;
        if s.min_cars == 0 || s.min_cars > s.max_cars || s.max_cars > 6 {
            return Err(Error::Config("sim car counts must satisfy 1 <= min_cars <= max_cars <= 6".into()));
        }
        for (i, &(sl, sr)) in s.severities.iter().enumerate() {
            if !(0.0..=1.0).contains(&sl) || !(0.0..=1.0).contains(&sr) {
                return Err(Error::Config(alloc::format!("sim.severities[{i}] outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Short human-readable description of the ablation switches.
    pub fn ablation_label(&self) -> String {
        let a = &self.ablation;
        alloc::format!(
            "routing={} aux={} div={} ent={} fusion_only={}",
            a.branch_routing,
            a.aux_loss,
            a.div_loss,
            a.ent_loss,
            a.force_fusion_only
        )
    }
}
