#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routefuse_core::autodiff::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, with random sign.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m = r.gen_range(0.1..1.5);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

/// Reduce `out` to a scalar through a fixed random projection so every
/// output entry contributes to the checked gradient.
fn projected(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let shape = tape.shape(out).to_vec();
    let w = rand_tensor(&mut r, &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

/// Central differences on every entry of every input; returns the largest
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn max_fd_error(inputs: &[Tensor], h: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let root = projected(&mut tape, out, 99);
        tape.value(root).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let root = projected(&mut tape, out, 99);
    tape.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let mut up = inputs.to_vec();
            up[k].data_mut()[i] += h;
            let mut down = inputs.to_vec();
            down[k].data_mut()[i] -= h;
            let numeric = (eval(&up) - eval(&down)) / (2.0 * h);
            let a = analytic[k][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn desk_model() -> routefuse_core::model::Model {
    let cfg = routefuse_core::config::RunConfig::desk().model;
    let vocab = routefuse_core::condition::WeatherVocabulary::generate(cfg.vocab_seed, cfg.token_dim).unwrap();
    routefuse_core::model::Model::new(&cfg, vocab).unwrap()
}

/// Overwrite every parameter whose name starts with `prefix` with fresh
/// uniform noise, so zero-initialized layers become informative.
pub fn randomize(store: &mut routefuse_core::autodiff::ParamStore, prefix: &str, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

/// `x W + b` for a row vector and a `[in, out]` matrix.
pub fn dense_linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), n_in);
    (0..n_out).map(|o| b.data()[o] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + o]).sum::<f64>()).collect()
}

pub fn dense_layer_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter().map(|v| (v - mu) / (var + eps).sqrt()).collect()
}

pub fn dense_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn relu(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|v| v.max(0.0)).collect()
}

fn inside_rect(b: &routefuse_core::geometry::Box3D, p: [f64; 2]) -> bool {
    let (s, c) = b.theta.sin_cos();
    let (dx, dy) = (p[0] - b.x, p[1] - b.y);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.l / 2.0 + 1e-12 && v.abs() <= b.w / 2.0 + 1e-12
}

fn rect_corners(b: &routefuse_core::geometry::Box3D) -> Vec<[f64; 2]> {
    let (s, c) = b.theta.sin_cos();
    [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
        .iter()
        .map(|&(su, sv)| {
            let (u, v) = (su * b.l / 2.0, sv * b.w / 2.0);
            [b.x + c * u - s * v, b.y + s * u + c * v]
        })
        .collect()
}

/// Footprint intersection from first principles: corners of each box that
/// lie inside the other plus all pairwise edge crossings, ordered by angle
/// around their centroid.
pub fn oracle_intersection(a: &routefuse_core::geometry::Box3D, b: &routefuse_core::geometry::Box3D) -> f64 {
    let (ca, cb) = (rect_corners(a), rect_corners(b));
    let mut pts: Vec<[f64; 2]> = Vec::new();
    pts.extend(ca.iter().filter(|&&p| inside_rect(b, p)));
    pts.extend(cb.iter().filter(|&&p| inside_rect(a, p)));
    for i in 0..4 {
        let (p, p2) = (ca[i], ca[(i + 1) % 4]);
        for j in 0..4 {
            let (q, q2) = (cb[j], cb[(j + 1) % 4]);
            let r = [p2[0] - p[0], p2[1] - p[1]];
            let s = [q2[0] - q[0], q2[1] - q[1]];
            let den = r[0] * s[1] - r[1] * s[0];
            if den.abs() < 1e-15 {
                continue;
            }
            let t = ((q[0] - p[0]) * s[1] - (q[1] - p[1]) * s[0]) / den;
            let u = ((q[0] - p[0]) * r[1] - (q[1] - p[1]) * r[0]) / den;
            if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
                pts.push([p[0] + t * r[0], p[1] + t * r[1]]);
            }
        }
    }
    if pts.len() < 3 {
        return 0.0;
    }
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64;
    pts.sort_by(|p, q| (p[1] - cy).atan2(p[0] - cx).total_cmp(&(q[1] - cy).atan2(q[0] - cx)));
    let mut s = 0.0;
    for i in 0..pts.len() {
        let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
        s += p[0] * q[1] - p[1] * q[0];
    }
    0.5 * s.abs()
}

pub fn oracle_iou_bev(a: &routefuse_core::geometry::Box3D, b: &routefuse_core::geometry::Box3D) -> f64 {
    let i = oracle_intersection(a, b);
    i / (a.w * a.l + b.w * b.l - i)
}

/// Monte-Carlo BEV IoU from `n` uniform samples over a square covering
/// both footprints.
pub fn monte_carlo_iou_bev(a: &routefuse_core::geometry::Box3D, b: &routefuse_core::geometry::Box3D, n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let ra = 0.5 * (a.w * a.w + a.l * a.l).sqrt();
    let rb = 0.5 * (b.w * b.w + b.l * b.l).sqrt();
    let (x0, x1) = ((a.x - ra).min(b.x - rb), (a.x + ra).max(b.x + rb));
    let (y0, y1) = ((a.y - ra).min(b.y - rb), (a.y + ra).max(b.y + rb));
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..n {
        let p = [r.gen_range(x0..x1), r.gen_range(y0..y1)];
        let (ia, ib) = (inside_rect(a, p), inside_rect(b, p));
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
