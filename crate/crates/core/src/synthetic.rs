//! Seeded synthetic rating matrices for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{build_indices, RatingTriplet, SparseRatings};
use crate::error::{invalid, Result};

/// Uniform sparsity with integer ratings in `1..=5`.
pub fn uniform_sparse(n_rows: usize, n_cols: usize, density: f64, seed: u64) -> Result<SparseRatings> {
    if !(0.0..=1.0).contains(&density) {
        return Err(invalid("density must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trip = Vec::with_capacity((n_rows as f64 * n_cols as f64 * density * 1.1) as usize);
    for j in 0..n_cols {
        for i in 0..n_rows {
            if rng.random::<f64>() < density {
                trip.push(RatingTriplet::new(i, j, rng.random_range(1..=5) as f64));
            }
        }
    }
    build_indices(trip, n_rows, n_cols)
}

/// Entries of `U·Vᵀ` plus Gaussian noise, with `U`, `V` uniform in
/// `[lo, hi]`, each cell kept with probability `density`.
pub struct LowRank {
    pub n_rows: usize,
    pub n_cols: usize,
    pub rank: usize,
    pub density: f64,
    pub factor_range: (f64, f64),
    pub noise: f64,
    pub seed: u64,
}

impl LowRank {
    pub fn generate(&self) -> Result<SparseRatings> {
        if self.rank == 0 || !(0.0..=1.0).contains(&self.density) || self.noise < 0.0 {
            return Err(invalid("rank must be positive, density in [0, 1], noise non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = self.factor_range;
        let mut factors = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(lo..=hi)).collect() };
        let u = factors(self.n_rows * self.rank);
        let v = factors(self.n_cols * self.rank);
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("valid deviation");
        let mut trip = Vec::new();
        for i in 0..self.n_rows {
            for j in 0..self.n_cols {
                if rng.random::<f64>() >= self.density {
                    continue;
                }
                let dot: f64 = (0..self.rank).map(|f| u[i * self.rank + f] * v[j * self.rank + f]).sum();
                let eps = if self.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                trip.push(RatingTriplet::new(i, j, dot + eps));
            }
        }
        build_indices(trip, self.n_rows, self.n_cols)
    }
}

/// Columns grouped into clusters that concentrate on a cluster-specific set
/// of rows (row `i` belongs to cluster `i mod C`) and share a rating profile
/// there.
pub struct PlantedClusters {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_clusters: usize,
    /// Rating probability for rows of the column's own cluster.
    pub in_density: f64,
    /// Rating probability for all other rows.
    pub out_density: f64,
    /// Standard deviation added to the profile before rounding to `1..=5`.
    pub noise: f64,
    pub seed: u64,
}

impl PlantedClusters {
    /// Matrix and cluster label per column (`j mod C`).
    pub fn generate(&self) -> Result<(SparseRatings, Vec<usize>)> {
        let c = self.n_clusters;
        if c == 0 || c > self.n_cols.max(1) {
            return Err(invalid("cluster count must be in 1..=N"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let profile: Vec<f64> = (0..c * self.n_rows).map(|_| rng.random_range(1..=5) as f64).collect();
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("valid deviation");
        let labels: Vec<usize> = (0..self.n_cols).map(|j| j % c).collect();
        let mut trip = Vec::new();
        for (j, &label) in labels.iter().enumerate() {
            for i in 0..self.n_rows {
                let p = if i % c == label { self.in_density } else { self.out_density };
                if rng.random::<f64>() >= p {
                    continue;
                }
                let eps = if self.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                let r = (profile[label * self.n_rows + i] + eps).round().clamp(1.0, 5.0);
                trip.push(RatingTriplet::new(i, j, r));
            }
        }
        Ok((build_indices(trip, self.n_rows, self.n_cols)?, labels))
    }
}

/// `n_cols` columns split evenly into `n_groups` groups; every column of a
/// group is an exact copy of the group's random template.
pub fn identical_column_groups(n_rows: usize, n_cols: usize, n_groups: usize, density: f64, seed: u64) -> Result<(SparseRatings, Vec<usize>)> {
    if n_groups == 0 {
        return Err(invalid("at least one group is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<(usize, f64)>> = (0..n_groups)
        .map(|_| {
            (0..n_rows)
                .filter_map(|i| (rng.random::<f64>() < density).then(|| (i, rng.random_range(1..=5) as f64)))
                .collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n_cols).map(|j| j * n_groups / n_cols.max(1)).collect();
    let trip = labels
        .iter()
        .enumerate()
        .flat_map(|(j, &g)| templates[g].iter().map(move |&(i, r)| RatingTriplet::new(i, j, r)))
        .collect();
    Ok((build_indices(trip, n_rows, n_cols)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded() {
        let a = uniform_sparse(30, 20, 0.2, 1).unwrap();
        assert_eq!(a.triplets(), uniform_sparse(30, 20, 0.2, 1).unwrap().triplets());
        assert!(a.triplets().iter().all(|t| (1.0..=5.0).contains(&t.value)));

        let spec = PlantedClusters { n_rows: 40, n_cols: 20, n_clusters: 4, in_density: 0.5, out_density: 0.02, noise: 0.3, seed: 2 };
        let (m, labels) = spec.generate().unwrap();
        assert_eq!(labels[5], 1);
        let own = m.triplets().iter().filter(|t| t.row % 4 == labels[t.col]).count();
        assert!(own * 2 > m.nnz());

        let (g, labels) = identical_column_groups(20, 6, 2, 0.5, 3).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(g.col(0), g.col(2));
        assert_eq!(g.col(3), g.col(5));
    }

    #[test]
    fn low_rank_without_noise_is_exact() {
        let spec = LowRank { n_rows: 5, n_cols: 4, rank: 1, density: 1.0, factor_range: (2.0, 2.0), noise: 0.0, seed: 0 };
        let m = spec.generate().unwrap();
        assert_eq!(m.nnz(), 20);
        assert!(m.triplets().iter().all(|t| t.value == 4.0));
    }
}
