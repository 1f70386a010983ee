//! Rulebook construction for submanifold and strided sparse convolution.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{in_grid, Coord, CoordSet, SparseVoxelTensor};
use crate::autodiff::{Rulebook, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Output sites are exactly the input sites.
    Submanifold,
    /// Downsampling with padding `k / 2`; an output site exists iff at least
    /// one input voxel falls in its receptive field.
    Strided(usize),
}

/// A reusable convolution plan: output coordinates plus the tap/pair list.
/// Tap `t` of a `k^3` kernel is `((a * k) + b) * k + c` for per-axis tap
/// indices `a, b, c`, matching a `[k, k, k, c_in, c_out]` weight layout.
#[derive(Debug, Clone)]
pub struct SparseConvPlan {
    pub output: Arc<CoordSet>,
    pub rulebook: Arc<Rulebook>,
}

fn taps(k: usize) -> impl Iterator<Item = (usize, [i32; 3])> {
    let k32 = k as i32;
    (0..k32).flat_map(move |a| {
        (0..k32).flat_map(move |b| (0..k32).map(move |c| (((a * k32 + b) * k32 + c) as usize, [a, b, c])))
    })
}

impl SparseConvPlan {
    pub fn new(input: &CoordSet, kernel: usize, mode: ConvMode) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::EvenKernel(kernel));
        }
        let pad = (kernel / 2) as i32;
        let volume = kernel * kernel * kernel;
        match mode {
            ConvMode::Submanifold => {
                let grid = input.grid();
                let mut tap_pairs = vec![Vec::new(); volume];
                for (o, &c) in input.coords().iter().enumerate() {
                    for (t, d) in taps(kernel) {
                        let p = [c[0] + d[0] - pad, c[1] + d[1] - pad, c[2] + d[2] - pad];
                        if !in_grid(p, grid) {
                            continue;
                        }
                        if let Some(i) = input.lookup(p) {
                            tap_pairs[t].push((i as u32, o as u32));
                        }
                    }
                }
                Ok(SparseConvPlan {
                    output: Arc::new(input.clone()),
                    rulebook: Arc::new(Rulebook { n_in: input.len(), n_out: input.len(), taps: tap_pairs }),
                })
            }
            ConvMode::Strided(stride) => {
                if stride == 0 {
                    return Err(Error::Config("stride must be positive".into()));
                }
                let g = input.grid();
                let k = kernel;
                let p = pad as usize;
                let out_grid = [
                    (g[0] + 2 * p).saturating_sub(k) / stride + 1,
                    (g[1] + 2 * p).saturating_sub(k) / stride + 1,
                    (g[2] + 2 * p).saturating_sub(k) / stride + 1,
                ];
                let s = stride as i32;
                // output o receives input q through tap d iff q = o * s + d - pad
                let mut raw: Vec<(Coord, usize, usize)> = Vec::new();
                for (i, &q) in input.coords().iter().enumerate() {
                    for (t, d) in taps(kernel) {
                        let num = [q[0] - d[0] + pad, q[1] - d[1] + pad, q[2] - d[2] + pad];
                        if num.iter().any(|&v| v < 0 || v % s != 0) {
                            continue;
                        }
                        let o = [num[0] / s, num[1] / s, num[2] / s];
                        if in_grid(o, out_grid) {
                            raw.push((o, t, i));
                        }
                    }
                }
                let output = CoordSet::new(raw.iter().map(|r| r.0).collect(), out_grid)?;
                let mut tap_pairs = vec![Vec::new(); volume];
                for (o, t, i) in raw {
                    let oi = output.lookup(o).expect("output built from these sites");
                    tap_pairs[t].push((i as u32, oi as u32));
                }
                for pairs in &mut tap_pairs {
                    pairs.sort_unstable_by_key(|&(i, o)| (o, i));
                }
                let n_out = output.len();
                Ok(SparseConvPlan {
                    output: Arc::new(output),
                    rulebook: Arc::new(Rulebook { n_in: input.len(), n_out, taps: tap_pairs }),
                })
            }
        }
    }
}

/// Value-level sparse convolution. `weights` is `[k, k, k, c_in, c_out]`
/// (or the equivalent flat `[k^3, c_in, c_out]`).
pub fn sparse_conv3d(input: &SparseVoxelTensor, weights: &Tensor, mode: ConvMode) -> Result<SparseVoxelTensor> {
    let ws = weights.shape();
    let (k, cin, cout) = match ws.len() {
        5 if ws[0] == ws[1] && ws[1] == ws[2] => (ws[0], ws[3], ws[4]),
        _ => return Err(Error::shape("sparse_conv3d", &[ws], "expected [k, k, k, c_in, c_out]")),
    };
    if k % 2 == 0 {
        return Err(Error::EvenKernel(k));
    }
    if input.channels() != cin {
        return Err(Error::shape("sparse_conv3d", &[input.feats.shape(), ws], "feature width != c_in"));
    }
    let plan = SparseConvPlan::new(&input.set, k, mode)?;
    let mut tape = Tape::new();
    let x = tape.constant(input.feats.clone());
    let w = tape.constant(weights.clone().reshaped(vec![k * k * k, cin, cout])?);
    let y = tape.sparse_conv(x, w, plan.rulebook.clone())?;
    let feats = tape.value(y).clone();
    SparseVoxelTensor::new((*plan.output).clone(), feats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_kernel_rejected() {
        let s = CoordSet::new(vec![[0, 0, 0]], [4, 4, 4]).unwrap();
        assert_eq!(SparseConvPlan::new(&s, 2, ConvMode::Submanifold).unwrap_err(), Error::EvenKernel(2));
    }

    #[test]
    fn isolated_site_uses_center_tap() {
        let set = CoordSet::new(vec![[2, 2, 2]], [5, 5, 5]).unwrap();
        let input = SparseVoxelTensor::new(set, Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap()).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 3, 2, 1]);
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.01;
        }
        let out = sparse_conv3d(&input, &w, ConvMode::Submanifold).unwrap();
        assert_eq!(out.set.coords(), &[[2, 2, 2]]);
        let center = 13 * 2;
        let expect = 1.5 * w.data()[center] - 2.0 * w.data()[center + 1];
        assert!((out.row(0)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn strided_output_sites() {
        let set = CoordSet::new(vec![[5, 5, 5]], [12, 12, 12]).unwrap();
        let plan = SparseConvPlan::new(&set, 3, ConvMode::Strided(2)).unwrap();
        assert_eq!(plan.output.grid(), [6, 6, 6]);
        // 5 = 2*2 + 2 - 1 and 5 = 2*3 + 0 - 1
        assert!(plan.output.lookup([2, 2, 2]).is_some());
        assert!(plan.output.lookup([3, 3, 3]).is_some());
        assert_eq!(plan.output.len(), 8);
        assert_eq!(plan.rulebook.pair_count(), 8);
    }
}
