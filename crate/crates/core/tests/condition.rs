mod common;

use common::{dense_layer_norm, dense_linear, dense_softmax, desk_model, rand_tensor, randomize, relu, rng};
use routefuse_core::autodiff::Tensor;
use routefuse_core::condition::{refine_token, semantic_token, visual_token, WeatherVocabulary};
use routefuse_core::nn::Conv2d;
use routefuse_core::Error;

const EPS: f64 = 1e-5;

#[test]
fn exact_prompt_concentrates_alignment() {
    let m = desk_model();
    for k in 0..7 {
        let (_, alpha) = semantic_token(m.vocab.row(k), &m.vocab, &m.store, &m.condition).unwrap();
        let e = std::f64::consts::E;
        for (j, a) in alpha.iter().enumerate() {
            let want = if j == k { e / (e + 6.0) } else { 1.0 / (e + 6.0) };
            assert!((a - want).abs() < 1e-12, "alpha[{j}] = {a}");
        }
        assert!((alpha[k] - 0.311791).abs() < 1e-6);
        assert!((alpha[(k + 1) % 7] - 0.114701).abs() < 1e-6);
    }
}

#[test]
fn semantic_token_matches_dense_oracle() {
    let mut m = desk_model();
    randomize(&mut m.store, "semantic", 5, 0.4);
    let mut r = rng(21);
    let prompt = rand_tensor(&mut r, &[32], -0.5, 0.5).into_data();
    let (c_p, alpha) = semantic_token(&prompt, &m.vocab, &m.store, &m.condition).unwrap();
    let scores: Vec<f64> = (0..7).map(|k| prompt.iter().zip(m.vocab.row(k)).map(|(a, b)| a * b).sum()).collect();
    let want_alpha = dense_softmax(&scores);
    let mixed: Vec<f64> = (0..32).map(|i| (0..7).map(|k| want_alpha[k] * m.vocab.row(k)[i]).sum()).collect();
    let sp = &m.condition.semantic_proj;
    let want = relu(dense_layer_norm(&dense_linear(&mixed, m.store.value(sp.w), m.store.value(sp.b)), EPS));
    assert!(alpha.iter().zip(&want_alpha).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(c_p.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-10));
    assert!(c_p.iter().all(|&v| v >= 0.0));
}

#[test]
fn non_finite_prompt_is_rejected() {
    let m = desk_model();
    let mut prompt = m.vocab.row(0).to_vec();
    prompt[3] = f64::NAN;
    assert_eq!(semantic_token(&prompt, &m.vocab, &m.store, &m.condition).unwrap_err(), Error::NonFinite("prompt embedding"));
}

#[test]
fn vocabulary_rows_must_be_unit_norm() {
    let v = WeatherVocabulary::generate(17, 32).unwrap();
    let mut rows: Vec<Vec<f64>> = (0..7).map(|k| v.row(k).to_vec()).collect();
    let back = WeatherVocabulary::from_rows(&rows).unwrap();
    assert!(back.matrix().data().iter().zip(v.matrix().data()).all(|(a, b)| (a - b).abs() < 1e-15));
    rows[2].iter_mut().for_each(|x| *x *= 1.01);
    assert!(matches!(WeatherVocabulary::from_rows(&rows), Err(Error::Config(_))));
    assert!(WeatherVocabulary::from_rows(&rows[..6]).is_err());
}

fn dense_conv(x: &[f64], (c, h, w): (usize, usize, usize), conv: &Conv2d, m: &routefuse_core::model::Model) -> (Vec<f64>, (usize, usize, usize)) {
    let wt = m.store.value(conv.w);
    let b = m.store.value(conv.b);
    let (o, k) = (wt.shape()[0], wt.shape()[2]);
    let (s, p) = (conv.stride, conv.pad as isize);
    let oh = (h + 2 * conv.pad - k) / s + 1;
    let ow = (w + 2 * conv.pad - k) / s + 1;
    let mut out = vec![0.0; o * oh * ow];
    for co in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b.data()[co];
                for ci in 0..c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (y * s + dy) as isize - p;
                            let ix = (xx * s + dx) as isize - p;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[(ci * h + iy as usize) * w + ix as usize] * wt.data()[((co * c + ci) * k + dy) * k + dx];
                        }
                    }
                }
                out[(co * oh + y) * ow + xx] = acc.max(0.0);
            }
        }
    }
    (out, (o, oh, ow))
}

#[test]
fn visual_token_matches_dense_oracle() {
    let m = desk_model();
    let img = rand_tensor(&mut rng(22), &[3, 16, 16], 0.0, 1.0);
    let got = visual_token(&img, &m.store, &m.condition).unwrap();
    let mut x = img.data().to_vec();
    let mut dims = (3, 16, 16);
    for conv in &m.condition.visual {
        let (y, d) = dense_conv(&x, dims, conv, &m);
        x = y;
        dims = d;
    }
    assert_eq!(dims, (16, 2, 2));
    let pooled: Vec<f64> = (0..dims.0).map(|c| x[c * 4..(c + 1) * 4].iter().sum::<f64>() / 4.0).collect();
    let vp = &m.condition.visual_proj;
    let want = dense_linear(&pooled, m.store.value(vp.w), m.store.value(vp.b));
    assert_eq!(got.len(), 32);
    assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-10));
}

fn dense_refine(m: &routefuse_core::model::Model, c_v: &[f64], c_p: &[f64], radar: Option<&Tensor>, lidar: Option<&Tensor>) -> Vec<f64> {
    let cp = &m.condition;
    let c: Vec<f64> = c_v.iter().zip(c_p).map(|(a, b)| 0.5 * (a + b)).collect();
    let ctx = |t: Option<&Tensor>| -> Vec<f64> {
        match t {
            None => vec![0.0; 32],
            Some(t) => {
                let (n, w) = (t.shape()[0], t.shape()[1]);
                let pooled: Vec<f64> = (0..w).map(|j| (0..n).map(|i| t.data()[i * w + j]).sum::<f64>() / n as f64).collect();
                dense_linear(&pooled, m.store.value(cp.context.w), m.store.value(cp.context.b))
            }
        }
    };
    let joint: Vec<f64> = c.iter().cloned().chain(ctx(radar)).chain(ctx(lidar)).collect();
    let h = relu(dense_linear(&joint, m.store.value(cp.mix_hidden.w), m.store.value(cp.mix_hidden.b)));
    let delta = dense_linear(&h, m.store.value(cp.mix_out.w), m.store.value(cp.mix_out.b));
    dense_layer_norm(&c.iter().zip(&delta).map(|(a, b)| a + b).collect::<Vec<_>>(), EPS)
}

#[test]
fn refinement_matches_dense_oracle() {
    let mut m = desk_model();
    randomize(&mut m.store, "mix", 6, 0.3);
    let mut r = rng(23);
    let c_v = rand_tensor(&mut r, &[32], -1.0, 1.0).into_data();
    let c_p = rand_tensor(&mut r, &[32], 0.0, 1.0).into_data();
    let radar = rand_tensor(&mut r, &[5, 8], -1.0, 1.0);
    let lidar = rand_tensor(&mut r, &[40, 8], -1.0, 1.0);
    let cases = [(Some(&radar), Some(&lidar)), (None, Some(&lidar)), (Some(&radar), None), (None, None)];
    for (rd, ld) in cases {
        let got = refine_token(&c_v, &c_p, rd, ld, &m.store, &m.condition).unwrap();
        let want = dense_refine(&m, &c_v, &c_p, rd, ld);
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-10));
        let mean = got.iter().sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-10);
    }
    // an empty feature table behaves like a missing modality
    let empty = Tensor::new(vec![0, 8], vec![]).unwrap();
    let a = refine_token(&c_v, &c_p, Some(&empty), Some(&lidar), &m.store, &m.condition).unwrap();
    let b = refine_token(&c_v, &c_p, None, Some(&lidar), &m.store, &m.condition).unwrap();
    assert_eq!(a, b);
}

#[test]
fn refinement_starts_near_the_mean_token() {
    let m = desk_model();
    let mut r = rng(24);
    let c_v = rand_tensor(&mut r, &[32], -1.0, 1.0).into_data();
    let c_p = rand_tensor(&mut r, &[32], 0.0, 1.0).into_data();
    let lidar = rand_tensor(&mut r, &[20, 8], -1.0, 1.0);
    let got = refine_token(&c_v, &c_p, None, Some(&lidar), &m.store, &m.condition).unwrap();
    let base = dense_layer_norm(&c_v.iter().zip(&c_p).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<_>>(), EPS);
    let gap = got.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 0.5, "small initial residual, got {gap}");
}
