//! Exact column similarity (shrunk Pearson) and Top-K neighbor tables.

use std::cmp::Ordering;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SparseRatings;
use crate::error::{invalid, Result};

/// `J^K`: for every column, `K` distinct neighbor columns (never itself).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    n_cols: usize,
    k: usize,
    entries: Vec<u32>,
}

impl NeighborTable {
    pub fn new(n_cols: usize, k: usize, entries: Vec<u32>) -> Result<Self> {
        let table = NeighborTable { n_cols, k, entries };
        table.validate()?;
        Ok(table)
    }

    /// A table with `K = 0` (plain factorization).
    pub fn empty(n_cols: usize) -> Self {
        NeighborTable {
            n_cols,
            k: 0,
            entries: Vec::new(),
        }
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, j: usize) -> &[u32] {
        &self.entries[j * self.k..(j + 1) * self.k]
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != self.n_cols * self.k {
            return Err(invalid(format!(
                "neighbor table holds {} entries, expected {}x{}",
                self.entries.len(),
                self.n_cols,
                self.k
            )));
        }
        for j in 0..self.n_cols {
            let row = self.row(j);
            for (a, &x) in row.iter().enumerate() {
                if x as usize >= self.n_cols || x as usize == j || row[..a].contains(&x) {
                    return Err(invalid(format!("neighbor row {j} is not a set of distinct other columns")));
                }
            }
        }
        Ok(())
    }

    /// Appends rows for new columns; existing rows are left untouched.
    pub fn extend(&mut self, new_n_cols: usize, rows: &[Vec<u32>]) -> Result<()> {
        if new_n_cols < self.n_cols || rows.len() != new_n_cols - self.n_cols {
            return Err(invalid("extension rows do not match the new column count"));
        }
        for row in rows {
            if row.len() != self.k {
                return Err(invalid("extension row has the wrong length"));
            }
            self.entries.extend_from_slice(row);
        }
        self.n_cols = new_n_cols;
        self.validate()
    }

    pub fn memory_bytes(&self) -> usize {
        self.entries.len() * std::mem::size_of::<u32>()
    }

    /// CSV export with a `j,rank,neighbor` header, ranks 0-based.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "j,rank,neighbor")?;
        for j in 0..self.n_cols {
            for (rank, nb) in self.row(j).iter().enumerate() {
                writeln!(w, "{j},{rank},{nb}")?;
            }
        }
        Ok(())
    }
}

/// Mean over columns of `|row_a ∩ row_b| / K`.
pub fn mean_overlap(a: &NeighborTable, b: &NeighborTable) -> f64 {
    assert_eq!(a.n_cols, b.n_cols);
    assert_eq!(a.k, b.k);
    if a.k == 0 || a.n_cols == 0 {
        return 0.0;
    }
    let total: usize = (0..a.n_cols)
        .map(|j| a.row(j).iter().filter(|x| b.row(j).contains(x)).count())
        .sum();
    total as f64 / (a.n_cols * a.k) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityConfig {
    pub lambda_rho: f64,
    pub k: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            lambda_rho: 100.0,
            k: 32,
        }
    }
}

/// Walks the co-rated rows of two ascending column slices.
fn co_rated<'a>(
    (rows_a, vals_a): (&'a [u32], &'a [f64]),
    (rows_b, vals_b): (&'a [u32], &'a [f64]),
    mut visit: impl FnMut(f64, f64),
) -> usize {
    let (mut x, mut y, mut n) = (0, 0, 0);
    while x < rows_a.len() && y < rows_b.len() {
        match rows_a[x].cmp(&rows_b[y]) {
            Ordering::Less => x += 1,
            Ordering::Greater => y += 1,
            Ordering::Equal => {
                visit(vals_a[x], vals_b[y]);
                n += 1;
                x += 1;
                y += 1;
            }
        }
    }
    n
}

/// Pearson correlation over `Ω̂_{j1} ∩ Ω̂_{j2}` with co-rated centering,
/// plus the co-rated count. Degenerate inputs give 0.
fn pearson_with_count(ratings: &SparseRatings, j1: usize, j2: usize) -> (f64, usize) {
    let (a, b) = (ratings.col(j1), ratings.col(j2));
    let (mut sa, mut sb) = (0.0, 0.0);
    let n = co_rated(a, b, |x, y| {
        sa += x;
        sb += y;
    });
    if n < 2 {
        return (0.0, n);
    }
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    co_rated(a, b, |x, y| {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    });
    if saa <= 0.0 || sbb <= 0.0 {
        return (0.0, n);
    }
    ((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0), n)
}

/// `ρ_{j1,j2}`.
pub fn pearson(ratings: &SparseRatings, j1: usize, j2: usize) -> f64 {
    pearson_with_count(ratings, j1, j2).0
}

/// `S_{j1,j2} = n/(n+λ_ρ)·ρ` with `n = |Ω̂_{j1} ∩ Ω̂_{j2}|`.
pub fn shrunk_similarity(ratings: &SparseRatings, j1: usize, j2: usize, lambda_rho: f64) -> f64 {
    let (rho, n) = pearson_with_count(ratings, j1, j2);
    shrink(rho, n, lambda_rho)
}

fn shrink(rho: f64, n: usize, lambda_rho: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    // `+ 0.0` folds -0.0 into 0.0 so ties compare equal.
    n / (n + lambda_rho) * rho + 0.0
}

/// Dense symmetric GSM stored as a packed strict upper triangle.
pub struct SimilarityMatrix {
    n: usize,
    packed: Vec<f64>,
}

impl SimilarityMatrix {
    /// Evaluates the shrunk similarity for all `N(N−1)/2` column pairs.
    pub fn build(ratings: &SparseRatings, lambda_rho: f64) -> Self {
        let n = ratings.n_cols();
        let mut packed = vec![0.0; n * n.saturating_sub(1) / 2];
        let mut rows: Vec<(usize, &mut [f64])> = Vec::with_capacity(n);
        let mut rest = packed.as_mut_slice();
        for j1 in 0..n {
            let (head, tail) = rest.split_at_mut(n - 1 - j1);
            rows.push((j1, head));
            rest = tail;
        }
        rows.into_par_iter().for_each(|(j1, row)| {
            for (off, slot) in row.iter_mut().enumerate() {
                *slot = shrunk_similarity(ratings, j1, j1 + 1 + off, lambda_rho);
            }
        });
        SimilarityMatrix { n, packed }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, j1: usize, j2: usize) -> f64 {
        assert!(j1 != j2 && j1 < self.n && j2 < self.n);
        let (a, b) = if j1 < j2 { (j1, j2) } else { (j2, j1) };
        self.packed[a * self.n - a * (a + 1) / 2 + (b - a - 1)]
    }

    pub fn memory_bytes(&self) -> usize {
        self.packed.len() * std::mem::size_of::<f64>()
    }

    pub fn top_k(&self, k: usize) -> Result<NeighborTable> {
        check_k(k, self.n)?;
        let rows: Vec<Vec<u32>> = (0..self.n)
            .into_par_iter()
            .map(|j| {
                let scored: Vec<(f64, u32)> = (0..self.n).filter(|&x| x != j).map(|x| (self.get(j, x), x as u32)).collect();
                select_top(scored, k)
            })
            .collect();
        NeighborTable::new(self.n, k, rows.concat())
    }
}

pub(crate) fn check_k(k: usize, n: usize) -> Result<()> {
    if n == 0 && k == 0 {
        return Ok(());
    }
    if k + 1 > n {
        return Err(invalid(format!("K = {k} exceeds N - 1 = {}", n.saturating_sub(1) as isize)));
    }
    Ok(())
}

/// Highest score first; equal scores by ascending index.
pub(crate) fn rank_order(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `k` best `(score, index)` pairs under [`rank_order`], best first.
pub(crate) fn select_top(mut scored: Vec<(f64, u32)>, k: usize) -> Vec<u32> {
    if k == 0 {
        return Vec::new();
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored.into_iter().map(|(_, x)| x).collect()
}

/// Exact Top-K from the full GSM. Cost and memory are quadratic in `N`.
pub fn gsm_topk(ratings: &SparseRatings, config: &SimilarityConfig) -> Result<NeighborTable> {
    check_k(config.k, ratings.n_cols())?;
    if config.lambda_rho < 0.0 {
        return Err(invalid("lambda_rho must be non-negative"));
    }
    SimilarityMatrix::build(ratings, config.lambda_rho).top_k(config.k)
}

/// Deterministic per-column generator, independent of evaluation order.
pub(crate) fn column_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

/// Appends uniformly drawn distinct columns (≠ `j`, not already present)
/// until `row` holds `k` entries.
pub(crate) fn fill_random(row: &mut Vec<u32>, j: usize, n: usize, k: usize, rng: &mut ChaCha8Rng) {
    let need = k.saturating_sub(row.len());
    if need == 0 {
        return;
    }
    let eligible = n - 1 - row.len();
    if eligible <= 4 * need + 16 {
        let mut pool: Vec<u32> = (0..n as u32).filter(|&x| x as usize != j && !row.contains(&x)).collect();
        for a in 0..need {
            let b = rng.random_range(a..pool.len());
            pool.swap(a, b);
            row.push(pool[a]);
        }
    } else {
        while row.len() < k {
            let x = rng.random_range(0..n as u32);
            if x as usize != j && !row.contains(&x) {
                row.push(x);
            }
        }
    }
}

/// The random-selection control: `K` uniform distinct non-self columns.
pub fn random_topk(n: usize, k: usize, seed: u64) -> Result<NeighborTable> {
    check_k(k, n)?;
    let rows: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut row = Vec::with_capacity(k);
            fill_random(&mut row, j, n, k, &mut column_rng(seed, j));
            row
        })
        .collect();
    NeighborTable::new(n, k, rows.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_indices, RatingTriplet};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn matrix(cols: &[&[(usize, f64)]], m: usize) -> SparseRatings {
        let trip = cols
            .iter()
            .enumerate()
            .flat_map(|(j, c)| c.iter().map(move |&(i, v)| RatingTriplet::new(i, j, v)))
            .collect();
        build_indices(trip, m, cols.len()).unwrap()
    }

    /// Straight-formula Pearson over explicit co-rated vectors.
    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn pearson_examples() {
        let r = matrix(&[&[(0, 1.0), (1, 2.0), (2, 3.0)], &[(0, 1.0), (1, 2.0), (2, 3.0)], &[(0, 3.0), (1, 2.0), (2, 1.0)]], 3);
        assert!((pearson(&r, 0, 1) - 1.0).abs() < 1e-15);
        assert!((pearson(&r, 0, 2) + 1.0).abs() < 1e-15);

        let r = matrix(&[&[(0, 1.0), (1, 2.0), (2, 4.0), (3, 5.0)], &[(0, 2.0), (1, 2.0), (2, 5.0)]], 4);
        let expected = pearson_oracle(&[1.0, 2.0, 4.0], &[2.0, 2.0, 5.0]);
        assert!((pearson(&r, 0, 1) - expected).abs() < 1e-12);
        assert!((expected - 0.9449111825230680).abs() < 1e-12);
    }

    #[test]
    fn pearson_degenerate_is_zero() {
        let r = matrix(&[&[(0, 1.0)], &[(0, 2.0)], &[(0, 3.0), (1, 3.0)], &[(0, 1.0), (1, 2.0)]], 2);
        assert_eq!(pearson(&r, 0, 1), 0.0);
        assert_eq!(pearson(&r, 2, 3), 0.0);
    }

    #[test]
    fn shrink_examples() {
        assert_eq!(shrink(0.7, 0, 100.0), 0.0);
        assert!((shrink(1.0, 100, 100.0) - 0.5).abs() < 1e-15);
        assert!((shrink(0.5, 300, 100.0) - 0.375).abs() < 1e-15);
        let r = matrix(&[&[(0, 1.0)], &[(1, 2.0)]], 2);
        assert_eq!(shrunk_similarity(&r, 0, 1, 100.0), 0.0);
    }

    #[test]
    fn forced_and_tie_membership() {
        let r = matrix(&[&[(0, 1.0), (1, 2.0), (2, 3.0)], &[(0, 1.0), (1, 2.0), (2, 3.5)], &[(0, 3.0), (1, 2.0), (2, 1.0)]], 3);
        let t = gsm_topk(&r, &SimilarityConfig { lambda_rho: 0.0, k: 2 }).unwrap();
        assert_eq!(t.row(0), &[1, 2]);
        assert_eq!(t.row(1), &[0, 2]);
        assert_eq!(t.row(2), &[1, 0]);

        let r = matrix(&[&[(0, 1.0)], &[(1, 1.0)], &[(2, 1.0)], &[(3, 1.0)], &[(4, 1.0)]], 5);
        let t = gsm_topk(&r, &SimilarityConfig { lambda_rho: 100.0, k: 2 }).unwrap();
        assert_eq!(t.row(0), &[1, 2]);
        assert_eq!(t.row(1), &[0, 2]);
        assert_eq!(t.row(4), &[0, 1]);
        assert!(gsm_topk(&r, &SimilarityConfig { lambda_rho: 100.0, k: 5 }).is_err());
    }

    fn random_matrix(m: usize, n: usize, density: f64, seed: u64) -> SparseRatings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trip = Vec::new();
        for i in 0..m {
            for j in 0..n {
                if rng.random::<f64>() < density {
                    trip.push(RatingTriplet::new(i, j, rng.random_range(1..=5) as f64));
                }
            }
        }
        build_indices(trip, m, n).unwrap()
    }

    #[test]
    fn gsm_matches_brute_force_sort() {
        for seed in 0..20 {
            let r = random_matrix(8, 6, 0.7, seed);
            let lambda = 2.0;
            let t = gsm_topk(&r, &SimilarityConfig { lambda_rho: lambda, k: 3 }).unwrap();
            for j in 0..6 {
                // oracle: dense co-rated vectors, full sort
                let mut scored: Vec<(f64, usize)> = (0..6)
                    .filter(|&x| x != j)
                    .map(|x| {
                        let (mut a, mut b) = (Vec::new(), Vec::new());
                        for i in 0..8 {
                            if let (Some(p), Some(q)) = (r.get(i, j), r.get(i, x)) {
                                a.push(p);
                                b.push(q);
                            }
                        }
                        let n = a.len() as f64;
                        let rho = if a.len() < 2 { 0.0 } else { pearson_oracle(&a, &b) };
                        let rho = if rho.is_nan() { 0.0 } else { rho };
                        (n / (n + lambda) * rho, x)
                    })
                    .collect();
                scored.sort_by(|p, q| q.0.partial_cmp(&p.0).unwrap().then(p.1.cmp(&q.1)));
                let expected: Vec<u32> = scored.iter().take(3).map(|s| s.1 as u32).collect();
                assert_eq!(t.row(j), expected.as_slice(), "seed {seed} column {j}");
            }
        }
    }

    #[test]
    fn gsm_invariant_to_input_order() {
        let r = random_matrix(30, 12, 0.4, 3);
        let mut trip = r.triplets().to_vec();
        trip.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let shuffled = build_indices(trip, 30, 12).unwrap();
        let cfg = SimilarityConfig { lambda_rho: 10.0, k: 4 };
        assert_eq!(gsm_topk(&r, &cfg).unwrap(), gsm_topk(&shuffled, &cfg).unwrap());
    }

    #[test]
    fn random_examples() {
        let t = random_topk(2, 1, 0).unwrap();
        assert_eq!(t.row(0), &[1]);
        assert_eq!(t.row(1), &[0]);
        assert_eq!(random_topk(50, 7, 42).unwrap(), random_topk(50, 7, 42).unwrap());
        assert_ne!(random_topk(50, 7, 42).unwrap(), random_topk(50, 7, 43).unwrap());
        let t = random_topk(1000, 32, 5).unwrap();
        t.validate().unwrap();
        assert!(random_topk(3, 3, 0).is_err());
    }

    #[test]
    fn random_is_roughly_uniform() {
        let t = random_topk(20, 3, 11).unwrap();
        let mut hits = [0usize; 20];
        for j in 0..20 {
            for &x in t.row(j) {
                hits[x as usize] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h < 12));
    }

    #[test]
    fn csv_export() {
        let t = NeighborTable::new(3, 1, vec![1, 2, 0]).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "j,rank,neighbor\n0,0,1\n1,0,2\n2,0,0\n");
        assert!(NeighborTable::new(2, 1, vec![0, 0]).is_err());
        assert!(NeighborTable::new(3, 2, vec![1, 1, 0, 2, 0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn shrunk_is_symmetric_and_bounded(seed: u64, lambda in 0.0f64..50.0) {
            let r = random_matrix(15, 5, 0.6, seed);
            for a in 0..5 {
                for b in 0..5 {
                    if a == b { continue; }
                    let s = shrunk_similarity(&r, a, b, lambda);
                    prop_assert_eq!(s, shrunk_similarity(&r, b, a, lambda));
                    let p = pearson(&r, a, b);
                    prop_assert!(s.abs() <= p.abs() + 1e-15);
                    prop_assert!(p.abs() <= 1.0);
                }
            }
        }
    }
}
