//! Collapse a sparse layer along z and upsample it onto the common BEV grid.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{CoordSet, SparseVoxelTensor};
use crate::autodiff::{Rulebook, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Full-height z convolution plan for one layer: tap `iz` maps voxel
/// `(ix, iy, iz)` to BEV cell `iy * gx + ix` of the layer's own grid.
#[derive(Debug, Clone)]
pub struct BevPlan {
    pub rulebook: Arc<Rulebook>,
    /// Layer grid `[gx, gy, gz]`.
    pub grid: [usize; 3],
    pub stride: usize,
    /// Target BEV `(height, width)` = `(ny, nx)` of the full-resolution grid.
    pub out_hw: (usize, usize),
}

impl BevPlan {
    pub fn new(set: &CoordSet, stride: usize, out_hw: (usize, usize)) -> Self {
        let grid = set.grid();
        let mut taps = vec![Vec::new(); grid[2]];
        for (i, c) in set.coords().iter().enumerate() {
            let cell = c[1] as usize * grid[0] + c[0] as usize;
            taps[c[2] as usize].push((i as u32, cell as u32));
        }
        BevPlan {
            rulebook: Arc::new(Rulebook { n_in: set.len(), n_out: grid[0] * grid[1], taps }),
            grid,
            stride,
            out_hw,
        }
    }

    /// `feats [n, c]` -> BEV `[c_bev, H, W]`.
    ///
    /// `collapse_w` is `[gz, c, c_bev]`; `upsample_w` is `[c_bev, c_bev, s, s]`.
    /// No bias terms, so columns without voxels stay exactly zero.
    pub fn apply(&self, tape: &mut Tape, feats: Var, collapse_w: Var, upsample_w: Var) -> Result<Var> {
        let cb = tape.shape(collapse_w).get(2).copied().unwrap_or(0);
        let cells = tape.sparse_conv(feats, collapse_w, self.rulebook.clone())?;
        let cells = tape.relu(cells);
        let chw = tape.transpose(cells)?;
        let chw = tape.reshape(chw, &[cb, self.grid[1], self.grid[0]])?;
        tape.upsample_transpose(chw, upsample_w, self.stride, self.out_hw.0, self.out_hw.1)
    }
}

/// Value-level BEV projection of one sparse layer.
pub fn z_collapse_to_bev(
    input: &SparseVoxelTensor,
    stride: usize,
    out_hw: (usize, usize),
    collapse_weights: &Tensor,
    upsample_weights: &Tensor,
) -> Result<Tensor> {
    let cw = collapse_weights.shape();
    if cw.len() != 3 || cw[0] != input.set.grid()[2] || cw[1] != input.channels() {
        return Err(Error::shape(
            "z_collapse_to_bev",
            &[cw, input.feats.shape()],
            "collapse weights must be [gz, c, c_bev]",
        ));
    }
    let plan = BevPlan::new(&input.set, stride, out_hw);
    let mut tape = Tape::new();
    let x = tape.constant(input.feats.clone());
    let c = tape.constant(collapse_weights.clone());
    let u = tape.constant(upsample_weights.clone());
    let y = plan.apply(&mut tape, x, c, u)?;
    Ok(tape.value(y).clone())
}
