//! The subcommands as library functions. Each writes its outputs into a
//! directory together with the resolved configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use routefuse_core::condition::WeatherVocabulary;
use routefuse_core::config::Preset;
use routefuse_core::eval::{evaluate, EvalReport};
use routefuse_core::model::{prepare_all, Model, PreparedSample, RoutingMode};
use routefuse_core::nn::group_of;
use routefuse_core::sim::{generate_scene, generate_split, scene_seed, SceneSample, SimEnv, Split, WeatherProfile};
use routefuse_core::train::{gradcheck, train as run_training, EpochSummary, GradcheckOptions, GroupCheck, StepRecord};
use routefuse_core::weather::{Weather, NUM_WEATHER};

use crate::config::Config;
use crate::{checkpoint, dataset, vocab};

pub const LOSS_LOG: &str = "loss_log.csv";
pub const EPOCH_LOG: &str = "epochs.csv";
pub const EPOCH_ROUTING: &str = "epoch_routing.csv";
pub const ROUTING_REPORT: &str = "routing_report.csv";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

fn prepare_dir(out: &Path, cfg: &Config) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).with_context(|| format!("writing into {}", out.display()))
}

fn split_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

fn data_dir<'a>(cfg: &'a Config, data: Option<&'a Path>) -> Result<&'a Path> {
    match data.or(cfg.paths.data.as_deref()) {
        Some(d) => Ok(d),
        None => bail!("no dataset directory: pass --data or set paths.data"),
    }
}

/// Vocabulary from `paths.vocab`, else the data directory's `vocab.txt`,
/// else generated from `model.vocab_seed`.
pub fn resolve_vocab(cfg: &Config, data: Option<&Path>) -> Result<WeatherVocabulary> {
    let file = cfg.paths.vocab.clone().or_else(|| data.map(|d| d.join("vocab.txt")).filter(|p| p.exists()));
    let v = match file {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            vocab::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => WeatherVocabulary::generate(cfg.run.model.vocab_seed, cfg.run.model.token_dim)?,
    };
    if v.dim() != cfg.run.model.token_dim {
        bail!("vocabulary width {} does not match model.token_dim {}", v.dim(), cfg.run.model.token_dim);
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub train: PathBuf,
    pub test: PathBuf,
    pub counts: (usize, usize),
}

pub fn gen_data(cfg: &Config, out: &Path) -> Result<GenOutput> {
    prepare_dir(out, cfg)?;
    let v = resolve_vocab(cfg, None)?;
    fs::write(out.join("vocab.txt"), vocab::to_text(&v))?;
    let mut counts = (0, 0);
    for split in [Split::Train, Split::Test] {
        let scenes = generate_split(&cfg.run, &v, split);
        let meta = dataset::Metadata {
            format: dataset::FORMAT.into(),
            split: split.name().into(),
            seed: cfg.run.sim.seed,
            config_hash: cfg.data_hash(),
            count: scenes.len(),
        };
        dataset::write_file(&split_file(out, split), &meta, &scenes)?;
        match split {
            Split::Train => counts.0 = scenes.len(),
            Split::Test => counts.1 = scenes.len(),
        }
    }
    Ok(GenOutput { train: split_file(out, Split::Train), test: split_file(out, Split::Test), counts })
}

fn load_split(cfg: &Config, dir: &Path, split: Split) -> Result<Vec<SceneSample>> {
    let (meta, scenes) = dataset::read_file(&split_file(dir, split))?;
    if meta.config_hash != cfg.data_hash() {
        eprintln!(
            "warning: {} was generated with a different scene configuration (seed {}, hash {})",
            split_file(dir, split).display(),
            meta.seed,
            &meta.config_hash[..meta.config_hash.len().min(12)]
        );
    }
    Ok(scenes)
}

fn loss_row(r: &StepRecord) -> String {
    let l = &r.loss;
    format!("{},{},{},{},{},{},{},{}\n", r.step, l.det, l.aux, l.intra, l.inter, l.ent, l.total, l.h_bar)
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub epochs: Vec<EpochSummary>,
    /// Batch routing entropies of every step, in step order.
    pub step_entropy: Vec<(usize, f64)>,
    pub best_epoch: Option<usize>,
}

pub fn train(cfg: &Config, data: Option<&Path>, out: &Path, verbose: bool) -> Result<TrainOutput> {
    let dir = data_dir(cfg, data)?;
    let v = resolve_vocab(cfg, Some(dir))?;
    let scenes = load_split(cfg, dir, Split::Train)?;
    prepare_dir(out, cfg)?;
    fs::write(out.join("vocab.txt"), vocab::to_text(&v))?;
    let mut model = Model::new(&cfg.run.model, v)?;
    let prepared = prepare_all(&scenes, &cfg.run, &model.anchors)?;

    let mut log = String::from("step,L_det,L_aux,L_intra,L_inter,L_ent,total,H_bar\n");
    let mut epoch_log = String::from("epoch,pretrain,L_det,L_aux,L_intra,L_inter,L_ent,total,min_H_bar\n");
    let mut routing = String::from("epoch,weather,w_L,w_R,w_F\n");
    let mut step_entropy = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut save_err: Option<anyhow::Error> = None;
    let best_path = out.join(BEST_CKPT);
    let total_epochs = cfg.run.train.epochs + cfg.run.train.visual_pretrain_epochs;
    let result = run_training(
        &mut model,
        &prepared,
        &cfg.run,
        |r| {
            log.push_str(&loss_row(r));
            step_entropy.push((r.epoch, r.loss.h_bar));
        },
        |e, m| {
            let l = &e.mean_loss;
            let _ = writeln!(
                epoch_log,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch, e.pretrain, l.det, l.aux, l.intra, l.inter, l.ent, l.total, e.min_h_bar
            );
            for w in Weather::ALL {
                if let Some(mu) = e.routing_means[w.index()] {
                    let _ = writeln!(routing, "{},{},{},{},{}", e.epoch, w.name(), mu[0], mu[1], mu[2]);
                }
            }
            if verbose {
                eprintln!("epoch {}/{total_epochs}  loss {:.5}  min H {:.3}", e.epoch + 1, l.total, e.min_h_bar);
            }
            if !e.pretrain && best.is_none_or(|(b, _)| l.total < b) {
                best = Some((l.total, e.epoch));
                if let Err(err) = checkpoint::save(&best_path, &m.store) {
                    save_err.get_or_insert(err);
                }
            }
        },
    );
    // logs are written even when training aborts, for diagnosis
    fs::write(out.join(LOSS_LOG), &log)?;
    fs::write(out.join(EPOCH_LOG), &epoch_log)?;
    fs::write(out.join(EPOCH_ROUTING), &routing)?;
    let epochs = result.context("training aborted")?;
    if let Some(err) = save_err {
        return Err(err);
    }
    checkpoint::save(&out.join(FINAL_CKPT), &model.store)?;
    Ok(TrainOutput { model, epochs, step_entropy, best_epoch: best.map(|b| b.1) })
}

/// One routing report row.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRow {
    pub sample_id: usize,
    pub weather: Weather,
    pub weights: [f64; 3],
    pub entropy: f64,
}

pub fn routing_csv(rows: &[RoutingRow]) -> String {
    let mut s = String::from("sample_id,weather,w_L,w_R,w_F,entropy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.sample_id, r.weather.name(), r.weights[0], r.weights[1], r.weights[2], r.entropy);
    }
    s
}

/// Mean routing weights per category; `None` where a category is absent.
pub fn category_means(rows: &[RoutingRow]) -> [Option<[f64; 3]>; NUM_WEATHER] {
    std::array::from_fn(|k| {
        let sel: Vec<&RoutingRow> = rows.iter().filter(|r| r.weather.index() == k).collect();
        (!sel.is_empty()).then(|| std::array::from_fn(|j| sel.iter().map(|r| r.weights[j]).sum::<f64>() / sel.len() as f64))
    })
}

fn load_model(cfg: &Config, dir: &Path, ckpt: Option<&Path>) -> Result<Model> {
    let mut model = Model::new(&cfg.run.model, resolve_vocab(cfg, Some(dir))?)?;
    if let Some(p) = ckpt {
        checkpoint::load(p, &mut model.store)?;
    }
    Ok(model)
}

fn predict_all(cfg: &Config, model: &Model, prepared: &[PreparedSample]) -> Result<(Vec<RoutingRow>, Vec<Vec<routefuse_core::geometry::Detection>>)> {
    let mode = RoutingMode::from_config(&cfg.run.routing, &cfg.run.ablation);
    let mut rows = Vec::with_capacity(prepared.len());
    let mut dets = Vec::with_capacity(prepared.len());
    for (i, s) in prepared.iter().enumerate() {
        let p = model.predict(s, &mode, &cfg.run.eval)?;
        rows.push(RoutingRow { sample_id: i, weather: s.weather, weights: p.weights.to_array(), entropy: p.weights.normalized_entropy() });
        dets.push(p.detections);
    }
    Ok((rows, dets))
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub routing: Vec<RoutingRow>,
}

/// Evaluate on the test split. Without a checkpoint the freshly
/// initialized model is evaluated.
pub fn eval(cfg: &Config, data: Option<&Path>, ckpt: Option<&Path>, out: &Path) -> Result<EvalOutput> {
    let dir = data_dir(cfg, data)?;
    let model = load_model(cfg, dir, ckpt)?;
    let scenes = load_split(cfg, dir, Split::Test)?;
    let prepared = prepare_all(&scenes, &cfg.run, &model.anchors)?;
    let (routing, dets) = predict_all(cfg, &model, &prepared)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
    let weather: Vec<Weather> = scenes.iter().map(|s| s.weather).collect();
    let report = evaluate(&dets, &gts, &weather);
    for w in &report.empty_categories {
        eprintln!("warning: no ground truth for category {}; its AP is reported as 0", w.name());
    }
    prepare_dir(out, cfg)?;
    fs::write(out.join("eval.txt"), report.to_table())?;
    fs::write(out.join("eval.csv"), report.to_csv())?;
    fs::write(out.join(ROUTING_REPORT), routing_csv(&routing))?;
    Ok(EvalOutput { report, routing })
}

/// Resolved configuration and parameter inventory; with a dataset, also
/// the routing report over its test split (written to `out` if given).
pub fn inspect(cfg: &Config, data: Option<&Path>, ckpt: Option<&Path>, out: Option<&Path>) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "# resolved configuration\n{}", cfg.to_toml());
    let dir = data.or(cfg.paths.data.as_deref());
    let model = match dir {
        Some(d) => load_model(cfg, d, ckpt)?,
        None => {
            let mut m = Model::new(&cfg.run.model, resolve_vocab(cfg, None)?)?;
            if let Some(p) = ckpt {
                checkpoint::load(p, &mut m.store)?;
            }
            m
        }
    };
    let mut groups: Vec<(String, usize, usize)> = Vec::new();
    for id in model.store.ids() {
        let g = group_of(model.store.name(id));
        let n = model.store.value(id).numel();
        match groups.iter_mut().find(|e| e.0 == g) {
            Some(e) => {
                e.1 += 1;
                e.2 += n;
            }
            None => groups.push((g, 1, n)),
        }
    }
    let _ = writeln!(s, "# parameters ({} scalars)", model.store.scalar_count());
    for (g, tensors, scalars) in &groups {
        let _ = writeln!(s, "{g:<10} {tensors:>4} tensors {scalars:>9} scalars");
    }
    if let Some(d) = dir {
        let scenes = load_split(cfg, d, Split::Test)?;
        let prepared = prepare_all(&scenes, &cfg.run, &model.anchors)?;
        let (rows, _) = predict_all(cfg, &model, &prepared)?;
        let _ = writeln!(s, "\n# mean routing weights on {} test scenes", rows.len());
        let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>7}", "category", "w_L", "w_R", "w_F");
        for (k, m) in category_means(&rows).iter().enumerate() {
            if let Some(m) = m {
                let name = Weather::from_index(k).map_or("?", Weather::name);
                let _ = writeln!(s, "{name:<10} {:>7.4} {:>7.4} {:>7.4}", m[0], m[1], m[2]);
            }
        }
        if let Some(o) = out {
            prepare_dir(o, cfg)?;
            fs::write(o.join(ROUTING_REPORT), routing_csv(&rows))?;
        }
    }
    Ok(s)
}

/// Finite-difference check of every parameter group on a two-scene batch
/// (one normal, one heavy-snow scene drawn from `cfg.sim.seed`).
pub fn gradcheck_cmd(cfg: &Config, opts: &GradcheckOptions) -> Result<Vec<GroupCheck>> {
    if cfg.run.preset != Preset::Desk {
        eprintln!("warning: gradient checking at paper scale is very slow");
    }
    let v = resolve_vocab(cfg, None)?;
    let model = Model::new(&cfg.run.model, v.clone())?;
    let env = SimEnv { roi: &cfg.run.model.roi, sim: &cfg.run.sim, vocab: &v, image_size: cfg.run.model.image_size };
    let scenes: Vec<SceneSample> = [Weather::Normal, Weather::HeavySnow]
        .iter()
        .enumerate()
        .map(|(i, &w)| generate_scene(scene_seed(cfg.run.sim.seed, Split::Train, i), &WeatherProfile::new(w, &cfg.run.sim), 2, &env))
        .collect();
    let prepared = prepare_all(&scenes, &cfg.run, &model.anchors)?;
    let batch: Vec<&PreparedSample> = prepared.iter().collect();
    Ok(gradcheck(&model, &batch, &cfg.run, opts)?)
}

pub fn gradcheck_table(groups: &[GroupCheck], tolerance: f64) -> String {
    let mut s = format!("{:<10} {:>8} {:>12}  result (tolerance {tolerance:e})\n", "group", "entries", "max rel err");
    for g in groups {
        let verdict = if g.passed { "pass".to_string() } else { format!("FAIL (worst {} [{}])", g.worst.0, g.worst.1) };
        let _ = writeln!(s, "{:<10} {:>8} {:>12.3e}  {verdict}", g.group, g.entries, g.max_rel_err);
    }
    s
}
