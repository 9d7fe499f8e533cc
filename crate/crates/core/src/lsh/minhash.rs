//! Min-wise hashing over column supports with banded candidate generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::buckets::{topk_rows, CoarseBuckets};
use crate::data::SparseRatings;
use crate::error::{invalid, Result};
use crate::similarity::{check_k, NeighborTable};

const PRIME: u64 = (1 << 61) - 1;

/// Universal hash family `h(i) = (a·(i+1) + b) mod (2^61 − 1)`.
#[derive(Clone, Debug)]
pub struct MinHasher {
    coeffs: Vec<(u64, u64)>,
}

impl MinHasher {
    pub fn new(num_hashes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..num_hashes)
            .map(|_| (rng.random_range(1..PRIME), rng.random_range(0..PRIME)))
            .collect();
        MinHasher { coeffs }
    }

    pub fn num_hashes(&self) -> usize {
        self.coeffs.len()
    }

    #[inline]
    fn hash(a: u64, b: u64, i: u32) -> u64 {
        ((a as u128 * (i as u128 + 1) + b as u128) % PRIME as u128) as u64
    }

    /// Min-hash signature of a row-index set; `u64::MAX` everywhere when empty.
    pub fn signature(&self, rows: &[u32]) -> Vec<u64> {
        self.coeffs
            .iter()
            .map(|&(a, b)| rows.iter().map(|&i| Self::hash(a, b, i)).min().unwrap_or(u64::MAX))
            .collect()
    }
}

/// Fraction of positions where two signatures agree; estimates Jaccard.
pub fn agreement(a: &[u64], b: &[u64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Exact Jaccard index of two sorted sets.
pub fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    let (mut x, mut y, mut inter) = (0, 0, 0usize);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                x += 1;
                y += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Columns whose signatures agree on every row of some band become
/// candidates; bands play the role of coarse groups in frequency ranking.
pub fn minhash_topk(ratings: &SparseRatings, num_hashes: usize, bands: usize, k: usize, seed: u64) -> Result<NeighborTable> {
    let n = ratings.n_cols();
    check_k(k, n)?;
    if bands == 0 || num_hashes == 0 || num_hashes % bands != 0 {
        return Err(invalid(format!("{num_hashes} hashes cannot be split into {bands} equal bands")));
    }
    let per_band = num_hashes / bands;
    let hasher = MinHasher::new(num_hashes, seed);
    let sigs: Vec<Vec<u64>> = (0..n).into_par_iter().map(|j| hasher.signature(ratings.col(j).0)).collect();
    let groups: Vec<CoarseBuckets<'static>> = (0..bands)
        .into_par_iter()
        .map(|band| {
            let keys: Vec<u64> = sigs
                .iter()
                .flat_map(|s| s[band * per_band..(band + 1) * per_band].iter().copied())
                .collect();
            CoarseBuckets::from_keys(keys.into(), per_band)
        })
        .collect();
    let cols: Vec<usize> = (0..n).collect();
    NeighborTable::new(n, k, topk_rows(&groups, k, n, seed, &cols).concat())
}
