use alloc::vec::Vec;
use core::cmp::Ordering;

use super::Coord;
use crate::error::{Error, Result};

/// Neighbor count at encoder layer `l` (1-based): `floor(64 / 2^(l-1))`.
pub fn layer_k(l: usize) -> usize {
    64usize >> (l.max(1) - 1).min(63)
}

fn dist2(a: Coord, b: Coord) -> i64 {
    a.iter().zip(&b).map(|(&x, &y)| (x as i64 - y as i64).pow(2)).sum()
}

/// For each query, indices of its `k` nearest keys by Euclidean distance in
/// voxel index space, nearest first. Equal distances resolve by
/// lexicographic key coordinate. Fewer than `k` keys returns all of them.
pub fn knn_voxels(queries: &[Coord], keys: &[Coord], k: usize) -> Result<Vec<Vec<usize>>> {
    if keys.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let take = k.min(keys.len());
    let mut scratch: Vec<(i64, Coord, usize)> = Vec::with_capacity(keys.len());
    let order = |a: &(i64, Coord, usize), b: &(i64, Coord, usize)| -> Ordering {
        a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2))
    };
    Ok(queries
        .iter()
        .map(|&q| {
            scratch.clear();
            scratch.extend(keys.iter().enumerate().map(|(i, &c)| (dist2(q, c), c, i)));
            if take < scratch.len() {
                scratch.select_nth_unstable_by(take - 1, order);
                scratch.truncate(take);
            }
            scratch.sort_unstable_by(order);
            scratch.iter().map(|e| e.2).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn neighbor_counts_per_layer() {
        assert_eq!([layer_k(1), layer_k(2), layer_k(3)], [64, 32, 16]);
    }

    #[test]
    fn dominance() {
        let r = knn_voxels(&[[0, 0, 0]], &[[1, 0, 0], [5, 5, 5]], 1).unwrap();
        assert_eq!(r, vec![vec![0]]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let keys = [[0, 1, 0], [1, 0, 0], [0, 0, 1], [-1, 0, 0]];
        let r = knn_voxels(&[[0, 0, 0]], &keys, 2).unwrap();
        assert_eq!(r[0], vec![3, 2]);
    }

    #[test]
    fn small_key_set_returns_all() {
        let r = knn_voxels(&[[0, 0, 0]], &[[3, 0, 0], [1, 0, 0]], 16).unwrap();
        assert_eq!(r[0], vec![1, 0]);
        assert_eq!(knn_voxels(&[[0, 0, 0]], &[], 4).unwrap_err(), Error::EmptyKeys);
    }
}
