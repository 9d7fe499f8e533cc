//! Sign random projections (cosine LSH) over sparse columns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::buckets::{topk_rows, CoarseBuckets};
use super::insert_bits;
use crate::data::SparseRatings;
use crate::error::{invalid, Result};
use crate::similarity::{check_k, NeighborTable};

/// `count` Gaussian hyperplane normals in `dim` dimensions, row-major by plane.
#[derive(Clone, Debug)]
pub struct RandomPlanes {
    dim: usize,
    count: usize,
    normals: Vec<f64>,
}

impl RandomPlanes {
    pub fn new(dim: usize, count: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let normals = (0..dim * count).map(|_| StandardNormal.sample(&mut rng)).collect();
        RandomPlanes { dim, count, normals }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// One bit per plane: set when the projection is nonnegative.
    pub fn bits(&self, rows: &[u32], vals: &[f64]) -> Vec<bool> {
        (0..self.count)
            .map(|t| {
                let w = &self.normals[t * self.dim..(t + 1) * self.dim];
                rows.iter().zip(vals).map(|(&i, &v)| w[i as usize] * v).sum::<f64>() >= 0.0
            })
            .collect()
    }

    /// Packs the bits of at most 64 planes; plane `t` lands at bit `t`.
    pub fn signature(&self, rows: &[u32], vals: &[f64]) -> u64 {
        debug_assert!(self.count <= 64);
        self.bits(rows, vals)
            .iter()
            .enumerate()
            .fold(0, |acc, (t, &b)| if b { acc | (1 << t) } else { acc })
    }
}

/// `p·q` maps of `num_planes_per_map` planes each; a group's bucket key is
/// the concatenation of its `p` signatures, then frequency ranking as in simLSH.
pub fn rpcos_topk(
    ratings: &SparseRatings,
    num_planes_per_map: usize,
    p: usize,
    q: usize,
    k: usize,
    seed: u64,
) -> Result<NeighborTable> {
    let (m_rows, n) = (ratings.n_rows(), ratings.n_cols());
    check_k(k, n)?;
    if !(1..=64).contains(&num_planes_per_map) || p == 0 || q == 0 {
        return Err(invalid("planes per map must be in 1..=64 and p, q at least 1"));
    }
    let words = (p * num_planes_per_map).div_ceil(64);
    let groups: Vec<CoarseBuckets<'static>> = (0..q)
        .into_par_iter()
        .map(|g| {
            let mut keys = vec![0u64; n * words];
            for m in 0..p {
                let planes = RandomPlanes::new(m_rows, num_planes_per_map, seed, (g * p + m) as u64);
                for j in 0..n {
                    let (rows, vals) = ratings.col(j);
                    let sig = planes.signature(rows, vals);
                    insert_bits(&mut keys[j * words..(j + 1) * words], m * num_planes_per_map, num_planes_per_map, sig);
                }
            }
            CoarseBuckets::from_keys(keys.into(), words)
        })
        .collect();
    let cols: Vec<usize> = (0..n).collect();
    NeighborTable::new(n, k, topk_rows(&groups, k, n, seed, &cols).concat())
}
