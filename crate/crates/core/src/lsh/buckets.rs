use std::borrow::Cow;

use rayon::prelude::*;

use super::insert_bits;
use crate::error::{invalid, Result};
use crate::similarity::{check_k, column_rng, fill_random, select_top, NeighborTable};

/// Columns grouped by an exact multi-word key. Two columns are candidates of
/// each other when their keys are equal.
#[derive(Clone, Debug)]
pub struct CoarseBuckets<'a> {
    keys: Cow<'a, [u64]>,
    words: usize,
    /// Columns sorted by `(key, index)`; each bucket is a contiguous run.
    order: Vec<u32>,
    bucket_of: Vec<u32>,
    /// Run boundaries in `order`, one more than the bucket count.
    starts: Vec<u32>,
}

impl<'a> CoarseBuckets<'a> {
    /// `keys` holds `N × words` words, column-major by key.
    pub fn from_keys(keys: Cow<'a, [u64]>, words: usize) -> Self {
        assert!(words > 0 && keys.len() % words == 0);
        let n = keys.len() / words;
        let order: Vec<u32> = if words == 1 {
            let mut pairs: Vec<(u64, u32)> = keys.iter().copied().zip(0..n as u32).collect();
            pairs.sort_unstable();
            pairs.into_iter().map(|(_, j)| j).collect()
        } else {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_unstable_by(|&a, &b| {
                let ka = &keys[a as usize * words..][..words];
                let kb = &keys[b as usize * words..][..words];
                ka.cmp(kb).then(a.cmp(&b))
            });
            order
        };
        let mut bucket_of = vec![0u32; n];
        let mut starts = Vec::new();
        for (pos, &j) in order.iter().enumerate() {
            let key = &keys[j as usize * words..][..words];
            if pos == 0 || key != &keys[order[pos - 1] as usize * words..][..words] {
                starts.push(pos as u32);
            }
            bucket_of[j as usize] = starts.len() as u32 - 1;
        }
        starts.push(n as u32);
        CoarseBuckets { keys, words, order, bucket_of, starts }
    }

    pub fn n_cols(&self) -> usize {
        self.order.len()
    }

    pub fn key(&self, j: usize) -> &[u64] {
        &self.keys[j * self.words..][..self.words]
    }

    fn bucket(&self, j: usize) -> &[u32] {
        let b = self.bucket_of[j] as usize;
        &self.order[self.starts[b] as usize..self.starts[b + 1] as usize]
    }

    /// Columns sharing `j`'s bucket, excluding `j`, ascending.
    pub fn candidates(&self, j: usize) -> impl Iterator<Item = u32> + '_ {
        self.bucket(j).iter().copied().filter(move |&x| x as usize != j)
    }

    pub fn bucket_size(&self, j: usize) -> usize {
        self.bucket(j).len()
    }

    /// Number of distinct keys.
    pub fn n_buckets(&self) -> usize {
        self.starts.len() - 1
    }

    /// Bytes of the bucket index (keys are counted with the signatures).
    pub fn memory_bytes(&self) -> usize {
        (self.order.len() + self.bucket_of.len() + self.starts.len()) * std::mem::size_of::<u32>()
    }
}

/// AND-combines `p` signature vectors (each of length `N`, `g_bits` wide)
/// into one coarse bucketing.
pub fn coarse_candidates(signatures: &[&[u64]], g_bits: usize) -> Result<CoarseBuckets<'static>> {
    let Some(first) = signatures.first() else {
        return Err(invalid("at least one signature vector is required"));
    };
    let n = first.len();
    if signatures.iter().any(|s| s.len() != n) || !(1..=64).contains(&g_bits) {
        return Err(invalid("signature vectors must share a length and G must be in 1..=64"));
    }
    let words = (signatures.len() * g_bits).div_ceil(64);
    let mut keys = vec![0u64; n * words];
    for (m, sig) in signatures.iter().enumerate() {
        for (j, &s) in sig.iter().enumerate() {
            insert_bits(&mut keys[j * words..(j + 1) * words], m * g_bits, g_bits, s);
        }
    }
    Ok(CoarseBuckets::from_keys(keys.into(), words))
}

/// OR-combines coarse groups: neighbors of `j` are its `K` most frequent
/// co-bucketed columns (ties by lower index), padded with seeded random
/// columns when fewer than `K` candidates exist.
pub fn fine_topk(groups: &[CoarseBuckets<'_>], k: usize, n: usize, seed: u64) -> Result<NeighborTable> {
    check_k(k, n)?;
    if groups.iter().any(|g| g.n_cols() != n) {
        return Err(invalid("coarse groups disagree on the column count"));
    }
    let cols: Vec<usize> = (0..n).collect();
    let rows = topk_rows(groups, k, n, seed, &cols);
    NeighborTable::new(n, k, rows.concat())
}

/// Neighbor rows for `cols` only, one `Vec` per requested column.
pub(crate) fn topk_rows(groups: &[CoarseBuckets<'_>], k: usize, n: usize, seed: u64, cols: &[usize]) -> Vec<Vec<u32>> {
    cols.par_iter()
        .map_init(
            || (vec![0u32; n], Vec::<u32>::new()),
            |(counts, touched), &j| {
                for g in groups {
                    for c in g.candidates(j) {
                        if counts[c as usize] == 0 {
                            touched.push(c);
                        }
                        counts[c as usize] += 1;
                    }
                }
                let scored: Vec<(f64, u32)> = touched
                    .iter()
                    .map(|&c| (counts[c as usize] as f64, c))
                    .collect();
                for &c in touched.iter() {
                    counts[c as usize] = 0;
                }
                touched.clear();
                let mut row = select_top(scored, k);
                fill_random(&mut row, j, n, k, &mut column_rng(seed, j));
                row
            },
        )
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bucket(sigs: &[&[u64]], g: usize) -> CoarseBuckets<'static> {
        coarse_candidates(sigs, g).unwrap()
    }

    #[test]
    fn and_requires_every_map_to_agree() {
        let a = [1u64, 1, 2, 1];
        let b = [5u64, 5, 5, 6];
        let bk = bucket(&[&a, &b], 4);
        assert_eq!(bk.candidates(0).collect::<Vec<_>>(), vec![1]);
        assert_eq!(bk.candidates(1).collect::<Vec<_>>(), vec![0]);
        assert_eq!(bk.candidates(2).count(), 0);
        assert_eq!(bk.candidates(3).count(), 0);
        assert_eq!(bk.n_buckets(), 3);
        assert_eq!(bk.bucket_size(0), 2);
    }

    #[test]
    fn frequency_ranking_and_supplement() {
        // column 0 shares a bucket with 1 in all three groups, with 2 in two
        // and with 3 in one; column 4 is always alone
        let g1 = bucket(&[&[0, 0, 0, 0, 9]], 8);
        let g2 = bucket(&[&[0, 0, 0, 1, 9]], 8);
        let g3 = bucket(&[&[0, 0, 2, 1, 9]], 8);
        let t = fine_topk(&[g1, g2, g3], 3, 5, 11).unwrap();
        assert_eq!(t.row(0), &[1, 2, 3]);
        assert_eq!(t.row(1), &[0, 2, 3]);
        let lone = t.row(4);
        assert_eq!(lone.len(), 3);
        assert!(!lone.contains(&4));
        let mut uniq = lone.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 3);
    }

    #[test]
    fn ties_broken_by_index() {
        let g = bucket(&[&[7, 7, 7, 7, 7]], 4);
        let t = fine_topk(&[g], 2, 5, 0).unwrap();
        assert_eq!(t.row(0), &[1, 2]);
        assert_eq!(t.row(3), &[0, 1]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(coarse_candidates(&[], 8).is_err());
        assert!(coarse_candidates(&[&[1, 2], &[1]], 8).is_err());
        let g = bucket(&[&[1, 2, 3]], 8);
        assert!(fine_topk(&[g.clone()], 3, 3, 0).is_err());
        assert!(fine_topk(&[g], 1, 4, 0).is_err());
    }
}
