mod common;

use routefuse_core::condition::WeatherVocabulary;
use routefuse_core::config::RunConfig;
use routefuse_core::sim::{generate_scene, generate_scene_with_stats, generate_split, scene_seed, SimEnv, Split, WeatherProfile};
use routefuse_core::weather::{Weather, NUM_WEATHER};

fn setup() -> (RunConfig, WeatherVocabulary) {
    let cfg = RunConfig::desk();
    let vocab = WeatherVocabulary::generate(cfg.model.vocab_seed, cfg.model.token_dim).unwrap();
    (cfg, vocab)
}

#[test]
fn zero_severity_keeps_every_point() {
    let (cfg, _) = setup();
    let p = WeatherProfile::new(Weather::Normal, &cfg.sim);
    assert_eq!((p.lidar_severity, p.radar_severity), (0.0, 0.0));
    assert_eq!(p.lidar_keep(&cfg.sim), 1.0);
    assert_eq!(p.lidar_noise(&cfg.sim), 0.02);
}

#[test]
fn full_lidar_severity_retains_thirty_percent() {
    let (cfg, vocab) = setup();
    let env = SimEnv { roi: &cfg.model.roi, sim: &cfg.sim, vocab: &vocab, image_size: cfg.model.image_size };
    let profile = WeatherProfile { lidar_severity: 1.0, ..WeatherProfile::new(Weather::HeavySnow, &cfg.sim) };
    assert!((profile.lidar_keep(&cfg.sim) - 0.3).abs() < 1e-15);
    let (mut raw, mut kept) = (0usize, 0usize);
    for s in 0..100 {
        let (_, st) = generate_scene_with_stats(scene_seed(5, Split::Train, s), &profile, 1 + s % 3, &env);
        raw += st.lidar_surface_raw;
        kept += st.lidar_surface_kept;
    }
    let n = raw as f64;
    let sigma = (n * 0.3 * 0.7).sqrt();
    assert!(raw > 1000);
    assert!((kept as f64 - 0.3 * n).abs() < 3.0 * sigma, "kept {kept} of {raw}");
}

#[test]
fn identical_seed_is_bit_identical() {
    let (cfg, vocab) = setup();
    let env = SimEnv { roi: &cfg.model.roi, sim: &cfg.sim, vocab: &vocab, image_size: cfg.model.image_size };
    for w in Weather::ALL {
        let p = WeatherProfile::new(w, &cfg.sim);
        let a = generate_scene(77, &p, 3, &env);
        let b = generate_scene(77, &p, 3, &env);
        assert_eq!(a, b);
        let bits = |s: &routefuse_core::sim::SceneSample| s.lidar.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
    let mut small = cfg.clone();
    small.sim.train_per_category = 2;
    assert_eq!(generate_split(&small, &vocab, Split::Train), generate_split(&small, &vocab, Split::Train));
}

#[test]
fn severity_ordering() {
    let (cfg, _) = setup();
    let s = |w: Weather| WeatherProfile::new(w, &cfg.sim);
    use Weather::*;
    let order = [Normal, Overcast, Rain, Fog, Sleet, HeavySnow];
    for pair in order.windows(2) {
        assert!(s(pair[0]).lidar_severity <= s(pair[1]).lidar_severity);
    }
    assert_eq!(s(Rain).lidar_severity, s(LightSnow).lidar_severity);
    for w in Weather::ALL.into_iter().filter(|&w| w != Normal) {
        assert!(s(w).radar_severity < s(w).lidar_severity, "{w:?}");
    }
}

#[test]
fn scenes_respect_the_roi() {
    let (cfg, vocab) = setup();
    let roi = cfg.model.roi;
    for s in generate_split(&cfg, &vocab, Split::Test) {
        assert!((1..=cfg.sim.max_cars).contains(&s.boxes.len()));
        for b in &s.boxes {
            assert!(b.x > roi.x_range.0 && b.x < roi.x_range.1);
            assert!(b.y > roi.y_range.0 && b.y < roi.y_range.1);
            assert!(b.z > roi.z_range.0 && b.z < roi.z_range.1);
        }
        let norm: f64 = s.prompt.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(s.image.shape(), &[3, 16, 16]);
    }
}

#[test]
fn lidar_degrades_and_radar_holds_up() {
    // the same 100 layouts rendered under every category
    let (cfg, vocab) = setup();
    let env = SimEnv { roi: &cfg.model.roi, sim: &cfg.sim, vocab: &vocab, image_size: cfg.model.image_size };
    let mut lidar = [0.0; NUM_WEATHER];
    let mut radar = [0.0; NUM_WEATHER];
    for w in Weather::ALL {
        let p = WeatherProfile::new(w, &cfg.sim);
        for i in 0..100 {
            let s = generate_scene(scene_seed(9, Split::Train, i), &p, 1 + i % 3, &env);
            lidar[w.index()] += s.lidar.len() as f64 / 100.0;
            radar[w.index()] += s.radar.len() as f64 / 100.0;
        }
    }
    for k in 1..NUM_WEATHER {
        assert!(lidar[k] < lidar[0], "category {k}: {} vs normal {}", lidar[k], lidar[0]);
    }
    let hi = radar.iter().cloned().fold(0.0, f64::max);
    let lo = radar.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!((hi - lo) / hi < 0.15, "radar counts {radar:?}");
}

#[test]
fn balanced_split_sizes() {
    let (cfg, vocab) = setup();
    let train = generate_split(&cfg, &vocab, Split::Train);
    let test = generate_split(&cfg, &vocab, Split::Test);
    assert_eq!((train.len(), test.len()), (700, 140));
    let mut hist = [0; NUM_WEATHER];
    train.iter().for_each(|s| hist[s.weather.index()] += 1);
    assert_eq!(hist, [100; NUM_WEATHER]);
}
