//! Training loop, per-epoch routing statistics and finite-difference
//! gradient checking.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{cosine_lr, optimizer_step_filtered, AdamState, OpKind, ParamId, Tape};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::head::loss::LossBreakdown;
use crate::model::{Model, PreparedSample};
use crate::nn::group_of;
use crate::router::RoutingWeights;
use crate::weather::NUM_WEATHER;

/// Losses of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub routing: Vec<RoutingWeights>,
    pub labels: Vec<usize>,
}

/// Epoch-level summary; routing means are over the training samples seen
/// in the epoch, per category (`None` for absent categories).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// True for the visual pretraining epochs.
    pub pretrain: bool,
    pub mean_loss: LossBreakdown,
    pub routing_means: [Option<[f64; 3]>; NUM_WEATHER],
    pub min_h_bar: f64,
}

fn check_finite(b: &LossBreakdown, step: usize) -> Result<()> {
    let terms = [
        ("L_det", b.det),
        ("L_aux", b.aux),
        ("L_intra", b.intra),
        ("L_inter", b.inter),
        ("L_ent", b.ent),
        ("total", b.total),
    ];
    for (term, v) in terms {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term, step });
        }
    }
    Ok(())
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.det += w * b.det;
    acc.cls += w * b.cls;
    acc.reg += w * b.reg;
    acc.aux += w * b.aux;
    acc.intra += w * b.intra;
    acc.inter += w * b.inter;
    acc.div += w * b.div;
    acc.ent += w * b.ent;
    acc.total += w * b.total;
    acc.h_bar += w * b.h_bar;
}

fn is_pretrain_param(name: &str) -> bool {
    name.starts_with("visual.") || name.starts_with("aux.")
}

/// Optimizer state carried across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub adam: AdamState,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: &Model) -> Self {
        Trainer { adam: AdamState::new(&model.store), step: 0 }
    }

    /// One optimizer step on `batch`. During pretraining only the visual
    /// backbone and auxiliary head are updated, on the auxiliary loss.
    pub fn step(&mut self, model: &mut Model, batch: &[&PreparedSample], cfg: &RunConfig, lr: f64, pretrain: bool, epoch: usize) -> Result<StepRecord> {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let out = model.batch_loss(&mut tape, &p, batch, cfg)?;
        check_finite(&out.breakdown, self.step)?;
        tape.backward(if pretrain { out.aux } else { out.total })?;
        model.store.zero_grads();
        model.store.accumulate_grads(&tape, &p);
        let filter = |name: &str| !pretrain || is_pretrain_param(name);
        optimizer_step_filtered(&mut model.store, &mut self.adam, &cfg.train.adam, lr, filter)?;
        let rec = StepRecord {
            step: self.step,
            epoch,
            lr,
            loss: out.breakdown,
            routing: out.routing,
            labels: batch.iter().map(|s| s.weather.index()).collect(),
        };
        self.step += 1;
        Ok(rec)
    }
}

/// Seeded per-epoch shuffle of `0..n`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Run every configured epoch: `train.visual_pretrain_epochs` pretraining
/// epochs, then `train.epochs` joint epochs on a cosine schedule.
/// `on_step` sees every step, `on_epoch` every finished epoch.
pub fn train(
    model: &mut Model,
    data: &[PreparedSample],
    cfg: &RunConfig,
    mut on_step: impl FnMut(&StepRecord),
    mut on_epoch: impl FnMut(&EpochSummary, &Model),
) -> Result<Vec<EpochSummary>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let t = &cfg.train;
    let mut trainer = Trainer::new(model);
    let mut summaries = Vec::new();
    let total_epochs = t.visual_pretrain_epochs + t.epochs;
    for e in 0..total_epochs {
        let pretrain = e < t.visual_pretrain_epochs;
        let lr = if pretrain { t.lr_max } else { cosine_lr(e - t.visual_pretrain_epochs, t.epochs, t.lr_max, t.lr_min) };
        let order = epoch_order(t.seed, e, data.len());
        let mut sums = [[0.0; 3]; NUM_WEATHER];
        let mut counts = [0usize; NUM_WEATHER];
        let mut mean = LossBreakdown::default();
        let mut min_h = f64::INFINITY;
        let batches: Vec<&[usize]> = order.chunks(t.batch_size).collect();
        for chunk in &batches {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let rec = trainer.step(model, &batch, cfg, lr, pretrain, e)?;
            for (w, &y) in rec.routing.iter().zip(&rec.labels) {
                let a = w.to_array();
                (0..3).for_each(|k| sums[y][k] += a[k]);
                counts[y] += 1;
            }
            min_h = min_h.min(rec.loss.h_bar);
            add_breakdown(&mut mean, &rec.loss, 1.0 / batches.len() as f64);
            on_step(&rec);
        }
        let routing_means = core::array::from_fn(|y| (counts[y] > 0).then(|| sums[y].map(|s| s / counts[y] as f64)));
        let summary = EpochSummary { epoch: e, pretrain, mean_loss: mean, routing_means, min_h_bar: min_h };
        on_epoch(&summary, model);
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Finite-difference settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Randomly drawn entries per parameter tensor, in addition to the
    /// entry with the largest analytic gradient.
    pub samples_per_param: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Test fixture: scale the backward contribution of one primitive.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { samples_per_param: 2, step: 1e-5, tolerance: 1e-3, seed: 0, fault: None }
    }
}

/// Outcome for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: (String, usize),
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn loss_value(model: &Model, batch: &[&PreparedSample], cfg: &RunConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    Ok(model.batch_loss(&mut tape, &p, batch, cfg)?.breakdown.total)
}

/// Compare analytic gradients of the batch objective with central
/// differences, for a sample of entries of every parameter.
pub fn gradcheck(model: &Model, batch: &[&PreparedSample], cfg: &RunConfig, opts: &GradcheckOptions) -> Result<Vec<GroupCheck>> {
    let mut tape = Tape::new();
    if let Some((kind, factor)) = opts.fault {
        tape.inject_backward_fault(kind, factor);
    }
    let p = model.store.bind(&mut tape);
    let out = model.batch_loss(&mut tape, &p, batch, cfg)?;
    tape.backward(out.total)?;
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(model.store.len());
    for id in model.store.ids() {
        let n = model.store.value(id).numel();
        grads.push(tape.grad(p[id]).map(|g| g.to_vec()).unwrap_or_else(|| alloc::vec![0.0; n]));
    }
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut groups: BTreeMap<String, GroupCheck> = BTreeMap::new();
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let name = String::from(model.store.name(id));
        let g = &grads[id.index()];
        let mut entries: Vec<usize> = Vec::with_capacity(opts.samples_per_param + 1);
        let argmax = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0);
        entries.push(argmax);
        for _ in 0..opts.samples_per_param.min(g.len().saturating_sub(1)) {
            entries.push(rng.gen_range(0..g.len()));
        }
        entries.sort_unstable();
        entries.dedup();
        let group = groups.entry(group_of(&name)).or_insert_with(|| GroupCheck {
            group: group_of(&name),
            entries: 0,
            max_rel_err: 0.0,
            worst: (name.clone(), 0),
            passed: true,
        });
        for i in entries {
            let orig = probe.store.value(id).data()[i];
            probe.store.value_mut(id).data_mut()[i] = orig + opts.step;
            let up = loss_value(&probe, batch, cfg)?;
            probe.store.value_mut(id).data_mut()[i] = orig - opts.step;
            let down = loss_value(&probe, batch, cfg)?;
            probe.store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(g[i], numeric);
            group.entries += 1;
            if err >= group.max_rel_err {
                group.max_rel_err = err;
                group.worst = (name.clone(), i);
            }
        }
    }
    Ok(groups
        .into_values()
        .map(|mut g| {
            g.passed = g.max_rel_err < opts.tolerance;
            g
        })
        .collect())
}
