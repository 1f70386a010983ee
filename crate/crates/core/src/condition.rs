//! Condition token: visual token from the pseudo-image, semantic token from
//! soft alignment with a frozen weather vocabulary, and sensor-aware
//! refinement from pooled voxel features.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Conv2d, Linear};
use crate::weather::NUM_WEATHER;

const LN_EPS: f64 = 1e-5;

/// Frozen `7 x d_c` matrix with unit-norm rows in category order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherVocabulary {
    matrix: Tensor,
}

impl WeatherVocabulary {
    /// Seeded Gaussian rows, orthonormalized by Gram–Schmidt.
    pub fn generate(seed: u64, dim: usize) -> Result<Self> {
        if dim < NUM_WEATHER {
            return Err(Error::Config(alloc::format!("vocabulary width {dim} < {NUM_WEATHER}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(NUM_WEATHER);
        while rows.len() < NUM_WEATHER {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
            let n = math::sqrt(v.iter().map(|a| a * a).sum());
            if n > 1e-6 {
                v.iter_mut().for_each(|a| *a /= n);
                rows.push(v);
            }
        }
        Ok(WeatherVocabulary { matrix: Tensor::from_parts(alloc::vec![NUM_WEATHER, dim], rows.concat()) })
    }

    /// Rows in category order; each must have norm 1 within 1e-6. Rows off
    /// by more than rounding error are renormalized, others kept bit for bit.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != NUM_WEATHER {
            return Err(Error::Config(alloc::format!("vocabulary needs {NUM_WEATHER} rows, got {}", rows.len())));
        }
        let dim = rows[0].len();
        let mut data = Vec::with_capacity(NUM_WEATHER * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Config(alloc::format!("vocabulary row {i} has width {}, expected {dim}", r.len())));
            }
            if !r.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("vocabulary"));
            }
            let n = math::sqrt(r.iter().map(|a| a * a).sum());
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Config(alloc::format!("vocabulary row {i} has norm {n}, expected 1")));
            }
            if (n - 1.0).abs() > 1e-12 {
                data.extend(r.iter().map(|a| a / n));
            } else {
                data.extend_from_slice(r);
            }
        }
        Ok(WeatherVocabulary { matrix: Tensor::from_parts(alloc::vec![NUM_WEATHER, dim], data) })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.matrix.data()[k * d..(k + 1) * d]
    }
}

#[derive(Debug, Clone)]
pub struct ConditionParams {
    pub visual: [Conv2d; 3],
    pub visual_proj: Linear,
    pub semantic_proj: Linear,
    /// Shared projection of pooled modality features.
    pub context: Linear,
    pub mix_hidden: Linear,
    pub mix_out: Linear,
}

impl ConditionParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.token_dim;
        let vc = cfg.visual_channels;
        let s = cfg.visual_stride;
        let ins = [3, vc[0], vc[1]];
        let visual = core::array::from_fn(|i| {
            let std = math::sqrt(2.0 / (9 * ins[i]) as f64);
            Conv2d::new(store, rng, &alloc::format!("visual.conv{}", i + 1), (ins[i], vc[i], 3), s, std)
        });
        let visual_proj = Linear::linear_init(store, rng, "visual.proj", vc[2], d);
        let semantic_proj = Linear::linear_init(store, rng, "semantic.proj", d, d);
        let context = Linear::linear_init(store, rng, "mix.context", cfg.channels[0], d);
        let mix_hidden = Linear::relu_init(store, rng, "mix.hidden", 3 * d, 2 * d);
        let mix_out = Linear::new(store, rng, "mix.out", 2 * d, d, 0.1 * math::sqrt(1.0 / (2 * d) as f64));
        ConditionParams { visual, visual_proj, semantic_proj, context, mix_hidden, mix_out }
    }
}

/// `img [3, H, W] -> c_v [1, d_c]`.
pub fn visual_token_var(tape: &mut Tape, p: &Bound, cp: &ConditionParams, img: Var) -> Result<Var> {
    let mut x = img;
    for conv in &cp.visual {
        x = conv.forward(tape, p, x)?;
        x = tape.relu(x);
    }
    let pooled = tape.global_average_pool(x)?;
    let c = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, &[1, c])?;
    cp.visual_proj.forward(tape, p, row)
}

/// `prompt [1, d_c]`, `vocab [7, d_c]` -> `(c_p [1, d_c], alpha [1, 7])`.
pub fn semantic_token_var(tape: &mut Tape, p: &Bound, cp: &ConditionParams, prompt: Var, vocab: Var) -> Result<(Var, Var)> {
    let vt = tape.transpose(vocab)?;
    let scores = tape.matmul(prompt, vt)?;
    let alpha = tape.softmax(scores, 1)?;
    let mixed = tape.matmul(alpha, vocab)?;
    let proj = cp.semantic_proj.forward(tape, p, mixed)?;
    let normed = tape.layer_norm(proj, LN_EPS)?;
    Ok((tape.relu(normed), alpha))
}

fn context_token(tape: &mut Tape, p: &Bound, cp: &ConditionParams, feats: Option<Var>, d: usize) -> Result<Var> {
    match feats {
        Some(f) => {
            let pooled = tape.mean_rows(f)?;
            let c = tape.shape(pooled)[0];
            let row = tape.reshape(pooled, &[1, c])?;
            cp.context.forward(tape, p, row)
        }
        None => Ok(tape.constant(Tensor::zeros(&[1, d]))),
    }
}

/// Sensor-aware refinement. `radar0` / `lidar0` are the post-input-layer
/// voxel features `[n, C_0]`, `None` for an empty modality (its context
/// token is then the zero vector). Returns `ĉ [1, d_c]`.
pub fn refine_token_var(
    tape: &mut Tape,
    p: &Bound,
    cp: &ConditionParams,
    c_v: Var,
    c_p: Var,
    radar0: Option<Var>,
    lidar0: Option<Var>,
) -> Result<Var> {
    let d = tape.shape(c_v)[1];
    let sum = tape.add(c_v, c_p)?;
    let c = tape.scale(sum, 0.5);
    let t_r = context_token(tape, p, cp, radar0, d)?;
    let t_l = context_token(tape, p, cp, lidar0, d)?;
    let joint = tape.concat(&[c, t_r, t_l], 1)?;
    let h = cp.mix_hidden.forward(tape, p, joint)?;
    let h = tape.relu(h);
    let delta = cp.mix_out.forward(tape, p, h)?;
    let s = tape.add(c, delta)?;
    tape.layer_norm(s, LN_EPS)
}

fn row_var(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::from_parts(alloc::vec![1, v.len()], v.to_vec()))
}

/// Value-level visual token of a `[3, H, W]` pseudo-image.
pub fn visual_token(img: &Tensor, store: &ParamStore, cp: &ConditionParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(img.clone());
    let t = visual_token_var(&mut tape, &p, cp, x)?;
    Ok(tape.value(t).data().to_vec())
}

/// Value-level semantic token: `(c_p, alpha)`.
pub fn semantic_token(
    prompt: &[f64],
    vocab: &WeatherVocabulary,
    store: &ParamStore,
    cp: &ConditionParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !prompt.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("prompt embedding"));
    }
    if prompt.len() != vocab.dim() {
        return Err(Error::shape("semantic_token", &[&[prompt.len()], vocab.matrix.shape()], "prompt width != vocabulary width"));
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = row_var(&mut tape, prompt);
    let w = tape.constant(vocab.matrix.clone());
    let (c_p, alpha) = semantic_token_var(&mut tape, &p, cp, x, w)?;
    Ok((tape.value(c_p).data().to_vec(), tape.value(alpha).data().to_vec()))
}

/// Value-level refinement from explicit tokens and `[n, C_0]` features.
pub fn refine_token(
    c_v: &[f64],
    c_p: &[f64],
    radar0: Option<&Tensor>,
    lidar0: Option<&Tensor>,
    store: &ParamStore,
    cp: &ConditionParams,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let v = row_var(&mut tape, c_v);
    let s = row_var(&mut tape, c_p);
    let r = radar0.filter(|t| t.shape()[0] > 0).map(|t| tape.constant(t.clone()));
    let l = lidar0.filter(|t| t.shape()[0] > 0).map(|t| tape.constant(t.clone()));
    let out = refine_token_var(&mut tape, &p, cp, v, s, r, l)?;
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_orthonormal() {
        let v = WeatherVocabulary::generate(3, 32).unwrap();
        for i in 0..NUM_WEATHER {
            for j in 0..NUM_WEATHER {
                let d: f64 = v.row(i).iter().zip(v.row(j)).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12);
            }
        }
        assert_eq!(WeatherVocabulary::generate(3, 32).unwrap(), v);
    }

    #[test]
    fn rejects_wrong_row_count() {
        assert!(WeatherVocabulary::from_rows(&[alloc::vec![1.0]]).is_err());
    }
}
