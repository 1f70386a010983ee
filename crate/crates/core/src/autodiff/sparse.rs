//! Index structures consumed by the sparse tape primitives.

use alloc::vec::Vec;

/// Gather-GEMM-scatter plan: for every kernel tap `k`, the list of
/// `(input_row, output_row)` pairs that tap connects.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    pub taps: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn kernel_volume(&self) -> usize {
        self.taps.len()
    }

    pub fn pair_count(&self) -> usize {
        self.taps.iter().map(Vec::len).sum()
    }
}

/// Variable-length neighbor lists in compressed-row form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Neighbors {
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl Neighbors {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for list in lists {
            indices.extend(list.iter().map(|&i| i as u32));
            offsets.push(indices.len());
        }
        Neighbors { offsets, indices }
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().map(|&i| i as usize).max()
    }

    pub fn total(&self) -> usize {
        self.indices.len()
    }

    pub(crate) fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}
