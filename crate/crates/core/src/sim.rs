//! Synthetic weather-labeled driving scenes.
//!
//! Cars are boxes on a flat ground plane seen by a sensor at the origin.
//! LiDAR samples the visible faces densely and degrades with the weather's
//! LiDAR severity (dropout, positional noise, attenuated intensity and
//! clumped backscatter near the sensor). Radar samples the same faces at a
//! fraction of the density with a fixed, coarser noise and Doppler speed,
//! and barely degrades. A small pseudo-image and a noisy prompt embedding
//! carry the weather appearance.

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::condition::WeatherVocabulary;
use crate::config::{RunConfig, SimConfig};
use crate::geometry::{rotated_iou_bev, Box3D};
use crate::math;
use crate::voxel::RoiSpec;
use crate::weather::{Weather, NUM_WEATHER};

/// Ground plane height below the sensor.
pub const GROUND_Z: f64 = -1.7;
const PLACEMENT_RETRIES: usize = 60;
const CAR_GAP: f64 = 0.4;

/// Degradation and appearance parameters of one category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherProfile {
    pub weather: Weather,
    pub lidar_severity: f64,
    pub radar_severity: f64,
    /// Mean pixel value.
    pub brightness: f64,
    /// Per-pixel Gaussian texture standard deviation.
    pub image_noise: f64,
    /// Per-channel multiplicative tint (RGB).
    pub tint: [f64; 3],
}

const APPEARANCE: [(f64, f64, [f64; 3]); NUM_WEATHER] = [
    (0.62, 0.06, [1.00, 1.00, 1.05]),
    (0.45, 0.05, [0.95, 0.97, 1.00]),
    (0.70, 0.02, [1.00, 1.00, 1.00]),
    (0.35, 0.12, [0.90, 0.95, 1.05]),
    (0.42, 0.15, [0.95, 0.98, 1.05]),
    (0.75, 0.10, [1.00, 1.00, 1.02]),
    (0.85, 0.18, [1.00, 1.00, 1.00]),
];

impl WeatherProfile {
    pub fn new(weather: Weather, sim: &SimConfig) -> Self {
        let (lidar_severity, radar_severity) = sim.severities[weather.index()];
        let (brightness, image_noise, tint) = APPEARANCE[weather.index()];
        WeatherProfile { weather, lidar_severity, radar_severity, brightness, image_noise, tint }
    }

    pub fn lidar_keep(&self, sim: &SimConfig) -> f64 {
        1.0 - sim.lidar_keep_slope * self.lidar_severity
    }

    pub fn lidar_noise(&self, sim: &SimConfig) -> f64 {
        sim.lidar_noise_base + sim.lidar_noise_slope * self.lidar_severity
    }

    pub fn radar_keep(&self, sim: &SimConfig) -> f64 {
        1.0 - sim.radar_keep_slope * self.radar_severity
    }
}

/// One synthetic frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `(x, y, z, intensity)` per return.
    pub lidar: Vec<[f64; 4]>,
    /// `(x, y, z, radial speed)` per return.
    pub radar: Vec<[f64; 4]>,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub prompt: Vec<f64>,
    pub weather: Weather,
    pub boxes: Vec<Box3D>,
}

/// Raw and surviving sample counts, for checking the degradation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SceneStats {
    pub lidar_surface_raw: usize,
    pub lidar_surface_kept: usize,
    pub lidar_ground_kept: usize,
    pub lidar_clutter: usize,
    pub radar_surface_raw: usize,
    pub radar_surface_kept: usize,
}

/// Static inputs shared by every scene of a run.
#[derive(Debug, Clone, Copy)]
pub struct SimEnv<'a> {
    pub roi: &'a RoiSpec,
    pub sim: &'a SimConfig,
    pub vocab: &'a WeatherVocabulary,
    /// `[height, width]`.
    pub image_size: [usize; 2],
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

struct Car {
    bbox: Box3D,
    speed: f64,
}

fn place_cars(rng: &mut ChaCha8Rng, roi: &RoiSpec, sim: &SimConfig, n: usize) -> Option<Vec<Car>> {
    let mut cars: Vec<Car> = Vec::with_capacity(n);
    let margin = 2.4;
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let jitter = |rng: &mut ChaCha8Rng| 1.0 + sim.size_jitter * (2.0 * rng.gen::<f64>() - 1.0);
            let w = 2.1 * jitter(rng);
            let l = 4.2 * jitter(rng);
            let h = 2.0 * jitter(rng);
            let base = if rng.gen::<bool>() { 0.0 } else { FRAC_PI_2 };
            let theta = base + 0.2 * (2.0 * rng.gen::<f64>() - 1.0);
            let x = rng.gen_range(roi.x_range.0 + margin..roi.x_range.1 - margin);
            let y = rng.gen_range(roi.y_range.0 + 1.6..roi.y_range.1 - 1.6);
            let bbox = Box3D::new(x, y, GROUND_Z + h / 2.0, w, l, h, theta);
            let grown = Box3D { w: w + 2.0 * CAR_GAP, l: l + 2.0 * CAR_GAP, ..bbox };
            if cars.iter().all(|c| rotated_iou_bev(&grown, &c.bbox) == 0.0) {
                let speed = rng.gen_range(2.0..15.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                cars.push(Car { bbox, speed });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(cars)
}

/// Face sample points `(point, outward normal)` on the faces of `b` that
/// point toward the sensor at the origin, at `density` samples per m².
fn sample_visible_faces(rng: &mut ChaCha8Rng, b: &Box3D, density: f64) -> Vec<[f64; 3]> {
    let (s, c) = (math::sin(b.theta), math::cos(b.theta));
    let mut out = Vec::new();
    // (face center offset along heading, across, normal in local frame, face extent)
    let faces = [
        (b.l / 2.0, 0.0, [1.0, 0.0], b.w),
        (-b.l / 2.0, 0.0, [-1.0, 0.0], b.w),
        (0.0, b.w / 2.0, [0.0, 1.0], b.l),
        (0.0, -b.w / 2.0, [0.0, -1.0], b.l),
    ];
    for (u, v, n, extent) in faces {
        let cx = b.x + c * u - s * v;
        let cy = b.y + s * u + c * v;
        let nx = c * n[0] - s * n[1];
        let ny = s * n[0] + c * n[1];
        if nx * (-cx) + ny * (-cy) <= 0.0 {
            continue;
        }
        let area = extent * b.h;
        let expected = density * area;
        let count = math::floor(expected) as usize + usize::from(rng.gen::<f64>() < expected - math::floor(expected));
        let (tx, ty) = (-ny, nx);
        for _ in 0..count {
            let a = (rng.gen::<f64>() - 0.5) * extent;
            let z = b.z - b.h / 2.0 + rng.gen::<f64>() * b.h;
            out.push([cx + tx * a, cy + ty * a, z]);
        }
    }
    let top_z = b.z + b.h / 2.0;
    if top_z < 0.0 {
        let expected = density * b.w * b.l;
        let count = math::round(expected) as usize;
        for _ in 0..count {
            let u = (rng.gen::<f64>() - 0.5) * b.l;
            let v = (rng.gen::<f64>() - 0.5) * b.w;
            out.push([b.x + c * u - s * v, b.y + s * u + c * v, top_z]);
        }
    }
    out
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

/// Prompt embedding: the category's vocabulary row plus isotropic noise of
/// total standard deviation `sigma` (per component `sigma / sqrt(d)`),
/// renormalized to unit length.
pub fn prompt_embedding(rng: &mut ChaCha8Rng, vocab: &WeatherVocabulary, weather: Weather, sigma: f64) -> Vec<f64> {
    let d = vocab.dim();
    let per = sigma / math::sqrt(d as f64);
    let mut p: Vec<f64> = vocab.row(weather.index()).iter().map(|&v| v + gauss(rng, per)).collect();
    let n = math::sqrt(p.iter().map(|v| v * v).sum());
    p.iter_mut().for_each(|v| *v /= n);
    p
}

fn pseudo_image(rng: &mut ChaCha8Rng, profile: &WeatherProfile, size: [usize; 2]) -> Tensor {
    let [h, w] = size;
    let mut data = Vec::with_capacity(3 * h * w);
    for ch in 0..3 {
        for y in 0..h {
            // sky brighter than road
            let grad = 0.15 * (0.5 - y as f64 / h.max(1) as f64);
            for _ in 0..w {
                let v = profile.brightness * profile.tint[ch] + grad + gauss(rng, profile.image_noise);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_parts(alloc::vec![3, h, w], data)
}

/// Generate a scene; `n_cars` is clamped to `1..=6` and reduced if the
/// cars cannot be placed without overlap.
pub fn generate_scene(seed: u64, profile: &WeatherProfile, n_cars: usize, env: &SimEnv) -> SceneSample {
    generate_scene_with_stats(seed, profile, n_cars, env).0
}

pub fn generate_scene_with_stats(seed: u64, profile: &WeatherProfile, n_cars: usize, env: &SimEnv) -> (SceneSample, SceneStats) {
    let sim = env.sim;
    let roi = env.roi;
    let mut layout = stream(seed, 0);
    let mut n = n_cars.clamp(1, 6);
    let cars = loop {
        if let Some(c) = place_cars(&mut layout, roi, sim, n) {
            break c;
        }
        n -= 1;
        if n == 0 {
            break Vec::new();
        }
    };
    let mut rng = stream(seed, 1);
    let mut stats = SceneStats::default();

    let keep_l = profile.lidar_keep(sim);
    let sigma_l = profile.lidar_noise(sim);
    let atten = 1.0 - 0.5 * profile.lidar_severity;
    let mut lidar = Vec::new();
    for car in &cars {
        for p in sample_visible_faces(&mut layout, &car.bbox, sim.lidar_density) {
            stats.lidar_surface_raw += 1;
            if rng.gen::<f64>() >= keep_l {
                continue;
            }
            stats.lidar_surface_kept += 1;
            let i = rng.gen_range(0.4..0.9) * atten;
            lidar.push([p[0] + gauss(&mut rng, sigma_l), p[1] + gauss(&mut rng, sigma_l), p[2] + gauss(&mut rng, sigma_l), i]);
        }
    }
    for _ in 0..sim.ground_points {
        let x = layout.gen_range(roi.x_range.0..roi.x_range.1);
        let y = layout.gen_range(roi.y_range.0..roi.y_range.1);
        if rng.gen::<f64>() >= keep_l {
            continue;
        }
        stats.lidar_ground_kept += 1;
        let i = rng.gen_range(0.05..0.3) * atten;
        lidar.push([x + gauss(&mut rng, sigma_l), y + gauss(&mut rng, sigma_l), GROUND_Z + gauss(&mut rng, sigma_l), i]);
    }
    // Backscatter: clumps of returns in the near range.
    let expected = sim.lidar_clutter * profile.lidar_severity;
    let mut budget = math::floor(expected) as usize + usize::from(rng.gen::<f64>() < expected - math::floor(expected));
    let near_x = roi.x_range.0 + 0.6 * (roi.x_range.1 - roi.x_range.0);
    while budget > 0 {
        let size = rng.gen_range(3..=8).min(budget);
        let cx = rng.gen_range(roi.x_range.0..near_x);
        let cy = rng.gen_range(roi.y_range.0..roi.y_range.1);
        let cz = rng.gen_range(GROUND_Z..GROUND_Z + 2.5);
        for _ in 0..size {
            let i = rng.gen_range(0.1..0.7) * atten;
            lidar.push([cx + gauss(&mut rng, 0.3), cy + gauss(&mut rng, 0.3), cz + gauss(&mut rng, 0.3), i]);
        }
        stats.lidar_clutter += size;
        budget -= size;
    }

    let keep_r = profile.radar_keep(sim);
    let sigma_r = Normal::new(0.0, sim.radar_noise).expect("positive radar noise");
    let mut radar = Vec::new();
    for car in &cars {
        let (s, c) = (math::sin(car.bbox.theta), math::cos(car.bbox.theta));
        for p in sample_visible_faces(&mut layout, &car.bbox, sim.lidar_density * sim.radar_density_ratio) {
            stats.radar_surface_raw += 1;
            if rng.gen::<f64>() >= keep_r {
                continue;
            }
            stats.radar_surface_kept += 1;
            let r = math::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).max(1e-6);
            let doppler = car.speed * (c * p[0] + s * p[1]) / r + gauss(&mut rng, 0.1);
            radar.push([
                p[0] + sigma_r.sample(&mut rng),
                p[1] + sigma_r.sample(&mut rng),
                p[2] + sigma_r.sample(&mut rng),
                doppler,
            ]);
        }
    }
    for _ in 0..sim.radar_ground_points {
        let x = layout.gen_range(roi.x_range.0..roi.x_range.1);
        let y = layout.gen_range(roi.y_range.0..roi.y_range.1);
        if rng.gen::<f64>() >= keep_r {
            continue;
        }
        radar.push([x + sigma_r.sample(&mut rng), y + sigma_r.sample(&mut rng), GROUND_Z + sigma_r.sample(&mut rng), gauss(&mut rng, 0.1)]);
    }

    let image = pseudo_image(&mut rng, profile, env.image_size);
    let prompt = prompt_embedding(&mut rng, env.vocab, profile.weather, sim.prompt_sigma);
    let boxes = cars.iter().map(|c| c.bbox).collect();
    (SceneSample { lidar, radar, image, prompt, weather: profile.weather, boxes }, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Seed of scene `index` in `split`.
pub fn scene_seed(base: u64, split: Split, index: usize) -> u64 {
    // splitmix64 finalizer over a packed key
    let tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    let mut z = base ^ (tag << 62) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Balanced split: scene `i` has category `i % 7` and a car count drawn
/// from the scene's own seed.
pub fn generate_split(cfg: &RunConfig, vocab: &WeatherVocabulary, split: Split) -> Vec<SceneSample> {
    let sim = &cfg.sim;
    let per = match split {
        Split::Train => sim.train_per_category,
        Split::Test => sim.test_per_category,
    };
    let env = SimEnv { roi: &cfg.model.roi, sim, vocab, image_size: cfg.model.image_size };
    (0..per * NUM_WEATHER)
        .map(|i| {
            let seed = scene_seed(sim.seed, split, i);
            let mut pick = stream(seed, 2);
            let n = pick.gen_range(sim.min_cars..=sim.max_cars);
            let profile = WeatherProfile::new(Weather::from_index(i % NUM_WEATHER).expect("index < 7"), sim);
            generate_scene(seed, &profile, n, &env)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_profile_is_undegraded() {
        let cfg = RunConfig::desk();
        let p = WeatherProfile::new(Weather::Normal, &cfg.sim);
        assert_eq!(p.lidar_keep(&cfg.sim), 1.0);
        assert_eq!(p.lidar_noise(&cfg.sim), 0.02);
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = RunConfig::desk();
        let vocab = WeatherVocabulary::generate(1, cfg.model.token_dim).unwrap();
        let env = SimEnv { roi: &cfg.model.roi, sim: &cfg.sim, vocab: &vocab, image_size: cfg.model.image_size };
        let p = WeatherProfile::new(Weather::Fog, &cfg.sim);
        assert_eq!(generate_scene(9, &p, 3, &env), generate_scene(9, &p, 3, &env));
    }
}
