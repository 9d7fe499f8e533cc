//! Conflict-free multi-worker SGD by `D × D` block rotation.
//!
//! Rows and columns are cut into `D` contiguous ranges. Worker `d` keeps
//! column block `d` (`V, b̂, W, C`) for the whole epoch; in stage `s` it
//! borrows row block `(d + s) mod D` (`U, b`). Within a stage no two workers
//! share a row block or a column block, and over `D` stages every block of
//! the rating matrix is visited once.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use crate::data::SparseRatings;
use crate::error::{invalid, Error, Result};
use crate::factorization::kernel::{self, ColBlock, Mask, RowBlock, Scratch};
use crate::factorization::{check_epoch, init_basic, init_full, EpochInfo, ModelParams, TrainConfig};
use crate::similarity::NeighborTable;

/// One rating inside a block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockEntry {
    pub row: u32,
    pub col: u32,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct BlockPartition {
    d: usize,
    row_bounds: Vec<usize>,
    col_bounds: Vec<usize>,
    /// `blocks[r·D + c]`, column-major inside each block.
    blocks: Vec<Vec<BlockEntry>>,
}

fn even_bounds(len: usize, d: usize) -> Vec<usize> {
    (0..=d).map(|k| k * len / d).collect()
}

fn block_of(bounds: &[usize], x: usize) -> usize {
    bounds.partition_point(|&b| b <= x) - 1
}

/// Cuts the matrix into `D × D` blocks of near-equal row and column ranges.
pub fn make_partition(ratings: &SparseRatings, d: usize) -> Result<BlockPartition> {
    let (m, n) = (ratings.n_rows(), ratings.n_cols());
    if d == 0 || d > m.min(n) {
        return Err(invalid(format!("worker count D = {d} must lie in 1..={}", m.min(n))));
    }
    let row_bounds = even_bounds(m, d);
    let col_bounds = even_bounds(n, d);
    let mut blocks = vec![Vec::new(); d * d];
    for j in 0..n {
        let cb = block_of(&col_bounds, j);
        let (rows, vals) = ratings.col(j);
        for (&i, &value) in rows.iter().zip(vals) {
            let rb = block_of(&row_bounds, i as usize);
            blocks[rb * d + cb].push(BlockEntry { row: i, col: j as u32, value });
        }
    }
    Ok(BlockPartition { d, row_bounds, col_bounds, blocks })
}

impl BlockPartition {
    pub fn workers(&self) -> usize {
        self.d
    }

    pub fn row_range(&self, block: usize) -> std::ops::Range<usize> {
        self.row_bounds[block]..self.row_bounds[block + 1]
    }

    pub fn col_range(&self, block: usize) -> std::ops::Range<usize> {
        self.col_bounds[block]..self.col_bounds[block + 1]
    }

    pub fn block(&self, row_block: usize, col_block: usize) -> &[BlockEntry] {
        &self.blocks[row_block * self.d + col_block]
    }

    pub fn total_entries(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }
}

/// `stages[s][d]` is the row block worker `d` trains in stage `s`
/// (0-based); worker `d` always owns column block `d`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RotationSchedule {
    pub stages: Vec<Vec<usize>>,
}

pub fn rotation_schedule(d: usize) -> RotationSchedule {
    RotationSchedule {
        stages: (0..d).map(|s| (0..d).map(|w| (w + s) % d).collect()).collect(),
    }
}

impl RotationSchedule {
    pub fn workers(&self) -> usize {
        self.stages.len()
    }

    /// Row blocks distinct within each stage and every (row, column) block
    /// pair visited exactly once.
    pub fn is_valid(&self) -> bool {
        let d = self.workers();
        let mut seen = vec![false; d * d];
        for stage in &self.stages {
            let mut used = vec![false; d];
            if stage.len() != d {
                return false;
            }
            for (w, &r) in stage.iter().enumerate() {
                if r >= d || used[r] || seen[r * d + w] {
                    return false;
                }
                used[r] = true;
                seen[r * d + w] = true;
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Rows and columns one worker wrote during one stage, sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WriteSet {
    pub rows: Vec<u32>,
    pub cols: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct StageRecord {
    pub epoch: usize,
    pub stage: usize,
    pub seconds: f64,
    /// One entry per worker when instrumentation is on.
    pub writes: Vec<WriteSet>,
}

impl StageRecord {
    /// No row or column written by two workers.
    pub fn is_disjoint(&self) -> bool {
        let mut rows: Vec<u32> = self.writes.iter().flat_map(|w| w.rows.iter().copied()).collect();
        let mut cols: Vec<u32> = self.writes.iter().flat_map(|w| w.cols.iter().copied()).collect();
        let (nr, nc) = (rows.len(), cols.len());
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        rows.len() == nr && cols.len() == nc
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ParallelOptions {
    /// Record the write set of every worker in every stage.
    pub instrument: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParallelReport {
    pub stages: Vec<StageRecord>,
    /// Updates applied per epoch, summed over workers.
    pub updates_per_epoch: Vec<usize>,
}

fn split_by<'a, T>(mut s: &'a mut [T], bounds: &[usize], stride: usize) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(bounds.len() - 1);
    for w in bounds.windows(2) {
        let (head, tail) = s.split_at_mut((w[1] - w[0]) * stride);
        out.push(head);
        s = tail;
    }
    out
}

struct WorkerResult {
    updates: usize,
    diverged: bool,
    writes: WriteSet,
}

fn run_block(
    fixed: &kernel::Fixed<'_>,
    ratings: &SparseRatings,
    rows: &mut RowBlock<'_>,
    cols: &mut ColBlock<'_>,
    entries: &[BlockEntry],
    rates: &kernel::StepRates,
    instrument: bool,
) -> WorkerResult {
    let mut scratch = Scratch::default();
    let mut res = WorkerResult { updates: 0, diverged: false, writes: WriteSet::default() };
    for e in entries {
        let err = kernel::step(fixed, ratings, rows, cols, e.row as usize, e.col as usize, e.value, rates, Mask::ALL, &mut scratch);
        res.updates += 1;
        if instrument {
            res.writes.rows.push(e.row);
            res.writes.cols.push(e.col);
        }
        if !err.is_finite() {
            res.diverged = true;
            break;
        }
    }
    if instrument {
        res.writes.rows.sort_unstable();
        res.writes.rows.dedup();
        res.writes.cols.sort_unstable();
        res.writes.cols.dedup();
    }
    res
}

/// The full model trained by `D` workers under the rotation schedule.
pub fn parallel_train(ratings: &SparseRatings, neighbors: &NeighborTable, config: &TrainConfig, d: usize) -> Result<ModelParams> {
    let (params, _) = parallel_train_with(ratings, neighbors, config, d, ParallelOptions::default(), |_, _| Ok(()))?;
    Ok(params)
}

pub fn parallel_train_with<F>(
    ratings: &SparseRatings,
    neighbors: &NeighborTable,
    config: &TrainConfig,
    d: usize,
    options: ParallelOptions,
    mut on_epoch: F,
) -> Result<(ModelParams, ParallelReport)>
where
    F: FnMut(EpochInfo, &ModelParams) -> Result<()>,
{
    let partition = make_partition(ratings, d)?;
    let schedule = rotation_schedule(d);
    let mut params = init_full(ratings, neighbors, config)?;
    let (f, k) = (params.rank(), params.k());
    let mut report = ParallelReport::default();
    let start = Instant::now();
    for epoch in 0..config.epochs {
        let rates = config.step_rates(epoch);
        let mut updates = 0;
        for (s, assignment) in schedule.stages.iter().enumerate() {
            let stage_start = Instant::now();
            let (fixed, rows_all, cols_all) = params.fixed_and_blocks();
            let mut row_blocks: Vec<Option<RowBlock<'_>>> = split_by(rows_all.b, &partition.row_bounds, 1)
                .into_iter()
                .zip(split_by(rows_all.u, &partition.row_bounds, f))
                .enumerate()
                .map(|(r, (b, u))| Some(RowBlock { start: partition.row_bounds[r], b, u }))
                .collect();
            let col_blocks: Vec<ColBlock<'_>> = split_by(cols_all.b_hat, &partition.col_bounds, 1)
                .into_iter()
                .zip(split_by(cols_all.v, &partition.col_bounds, f))
                .zip(split_by(cols_all.w, &partition.col_bounds, k))
                .zip(split_by(cols_all.c, &partition.col_bounds, k))
                .enumerate()
                .map(|(c, (((b_hat, v), w), cc))| ColBlock { start: partition.col_bounds[c], b_hat, v, w, c: cc })
                .collect();
            let fixed = &fixed;
            let partition = &partition;
            let results: Vec<WorkerResult> = std::thread::scope(|scope| {
                let handles: Vec<_> = col_blocks
                    .into_iter()
                    .enumerate()
                    .map(|(w, mut cols)| {
                        let rb = assignment[w];
                        let mut rows = row_blocks[rb].take().expect("row block assigned twice in one stage");
                        scope.spawn(move || {
                            run_block(fixed, ratings, &mut rows, &mut cols, partition.block(rb, w), &rates, options.instrument)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
            if results.iter().any(|r| r.diverged) {
                return Err(Error::Divergence { epoch: epoch + 1 });
            }
            updates += results.iter().map(|r| r.updates).sum::<usize>();
            report.stages.push(StageRecord {
                epoch: epoch + 1,
                stage: s,
                seconds: stage_start.elapsed().as_secs_f64(),
                writes: if options.instrument { results.into_iter().map(|r| r.writes).collect() } else { Vec::new() },
            });
        }
        report.updates_per_epoch.push(updates);
        check_epoch(&params, epoch + 1)?;
        on_epoch(EpochInfo { epoch: epoch + 1, elapsed_seconds: start.elapsed().as_secs_f64() }, &params)?;
    }
    Ok((params, report))
}

/// Lock-free basic model where threads own disjoint rows and share `V`
/// and `b̂` through relaxed atomics; concurrent writes to the same column
/// may be lost. Results depend on thread timing.
pub fn hogwild_train_basic(ratings: &SparseRatings, config: &TrainConfig, threads: usize) -> Result<ModelParams> {
    if threads == 0 {
        return Err(invalid("at least one thread is required"));
    }
    let mut params = init_basic(ratings, config)?;
    let f = params.rank();
    let train_biases = config.biases == crate::factorization::BiasMode::Trained;
    let shared_v: Vec<AtomicU64> = params.v.iter().map(|x| AtomicU64::new(x.to_bits())).collect();
    let shared_bh: Vec<AtomicU64> = params.b_hat.iter().map(|x| AtomicU64::new(x.to_bits())).collect();
    let load = |a: &AtomicU64| f64::from_bits(a.load(Ordering::Relaxed));
    let store = |a: &AtomicU64, x: f64| a.store(x.to_bits(), Ordering::Relaxed);
    let bounds = even_bounds(ratings.n_rows(), threads.min(ratings.n_rows().max(1)));
    let mu = params.mu;
    for epoch in 0..config.epochs {
        let StepRatesView { g, l } = StepRatesView::from(config, epoch);
        let bs = split_by(&mut params.b, &bounds, 1);
        let us = split_by(&mut params.u, &bounds, f);
        let diverged = std::thread::scope(|scope| {
            let handles: Vec<_> = bs
                .into_iter()
                .zip(us)
                .enumerate()
                .map(|(t, (b, u))| {
                    let start = bounds[t];
                    let (shared_v, shared_bh) = (&shared_v, &shared_bh);
                    scope.spawn(move || {
                        let mut vj = vec![0.0; f];
                        for li in 0..b.len() {
                            let i = start + li;
                            let ui = &mut u[li * f..(li + 1) * f];
                            let (cols, vals) = ratings.row(i);
                            for (&j, &r) in cols.iter().zip(vals) {
                                let j = j as usize;
                                for (x, a) in vj.iter_mut().zip(&shared_v[j * f..(j + 1) * f]) {
                                    *x = load(a);
                                }
                                let bh = load(&shared_bh[j]);
                                let dot: f64 = ui.iter().zip(&vj).map(|(x, y)| x * y).sum();
                                let e = r - (mu + b[li] + bh + dot);
                                if !e.is_finite() {
                                    return true;
                                }
                                if train_biases {
                                    b[li] += g.b * (e - l.b * b[li]);
                                    store(&shared_bh[j], bh + g.b_hat * (e - l.b_hat * bh));
                                }
                                for (q, a) in shared_v[j * f..(j + 1) * f].iter().enumerate() {
                                    let (u0, v0) = (ui[q], vj[q]);
                                    ui[q] = u0 + g.u * (e * v0 - l.u * u0);
                                    store(a, v0 + g.v * (e * u0 - l.v * v0));
                                }
                            }
                        }
                        false
                    })
                })
                .collect();
            handles.into_iter().any(|h| h.join().expect("worker panicked"))
        });
        if diverged {
            return Err(Error::Divergence { epoch: epoch + 1 });
        }
    }
    params.v = shared_v.iter().map(load).collect();
    params.b_hat = shared_bh.iter().map(load).collect();
    check_epoch(&params, config.epochs)?;
    Ok(params)
}

struct StepRatesView {
    g: crate::factorization::PerClass,
    l: crate::factorization::PerClass,
}

impl StepRatesView {
    fn from(config: &TrainConfig, epoch: usize) -> Self {
        let r = config.step_rates(epoch);
        StepRatesView { g: r.gamma, l: r.lambda }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_indices, RatingTriplet};
    use crate::factorization::{train_full, Preset};
    use crate::similarity::{gsm_topk, SimilarityConfig};
    use crate::synthetic::uniform_sparse;

    #[test]
    fn partition_shapes() {
        let r = uniform_sparse(9, 9, 0.5, 1).unwrap();
        let one = make_partition(&r, 1).unwrap();
        assert_eq!(one.block(0, 0).len(), r.nnz());
        let p = make_partition(&r, 3).unwrap();
        for b in 0..3 {
            assert_eq!(p.row_range(b), 3 * b..3 * b + 3);
            assert_eq!(p.col_range(b), 3 * b..3 * b + 3);
        }
        assert_eq!(p.total_entries(), r.nnz());
        for rb in 0..3 {
            for cb in 0..3 {
                for e in p.block(rb, cb) {
                    assert!(p.row_range(rb).contains(&(e.row as usize)));
                    assert!(p.col_range(cb).contains(&(e.col as usize)));
                }
            }
        }
        assert!(make_partition(&r, 0).is_err());
        assert!(make_partition(&r, 10).is_err());
    }

    #[test]
    fn uneven_partition_counts() {
        let r = uniform_sparse(23, 17, 0.3, 2).unwrap();
        let p = make_partition(&r, 4).unwrap();
        assert_eq!(p.total_entries(), r.nnz());
        assert_eq!(p.row_range(3).end, 23);
        assert_eq!(p.col_range(0).start, 0);
    }

    #[test]
    fn schedule_examples() {
        let s = rotation_schedule(3);
        // stage 2 of the 1-based figure: workers 1, 2, 3 take row blocks 2, 3, 1
        assert_eq!(s.stages[1], vec![1, 2, 0]);
        assert_eq!(rotation_schedule(1).stages, vec![vec![0]]);
        for d in 1..=6 {
            assert!(rotation_schedule(d).is_valid());
        }
        assert!(!RotationSchedule { stages: vec![vec![0, 0], vec![1, 1]] }.is_valid());
    }

    #[test]
    fn single_worker_matches_serial() {
        let r = uniform_sparse(30, 25, 0.3, 3).unwrap();
        let nb = gsm_topk(&r, &SimilarityConfig { lambda_rho: 10.0, k: 4 }).unwrap();
        let mut cfg = TrainConfig::full(Preset::MovieLens);
        cfg.k = 4;
        cfg.rank = 5;
        cfg.epochs = 4;
        assert_eq!(parallel_train(&r, &nb, &cfg, 1).unwrap(), train_full(&r, &nb, &cfg).unwrap());
    }

    #[test]
    fn stages_write_disjoint_sets() {
        let r = uniform_sparse(40, 36, 0.25, 4).unwrap();
        let nb = gsm_topk(&r, &SimilarityConfig { lambda_rho: 10.0, k: 3 }).unwrap();
        let mut cfg = TrainConfig::full(Preset::MovieLens);
        cfg.k = 3;
        cfg.rank = 4;
        cfg.epochs = 2;
        let opts = ParallelOptions { instrument: true };
        let (a, report) = parallel_train_with(&r, &nb, &cfg, 4, opts, |_, _| Ok(())).unwrap();
        assert_eq!(report.stages.len(), 8);
        assert!(report.stages.iter().all(StageRecord::is_disjoint));
        assert_eq!(report.updates_per_epoch, vec![r.nnz(); 2]);
        let (b, _) = parallel_train_with(&r, &nb, &cfg, 4, opts, |_, _| Ok(())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlapping_writes_are_detected() {
        let rec = StageRecord {
            epoch: 1,
            stage: 0,
            seconds: 0.0,
            writes: vec![WriteSet { rows: vec![1, 2], cols: vec![0] }, WriteSet { rows: vec![2], cols: vec![1] }],
        };
        assert!(!rec.is_disjoint());
    }

    #[test]
    fn hogwild_learns() {
        let trip = (0..20)
            .flat_map(|i| (0..10).map(move |j| RatingTriplet::new(i, j, 1.0 + ((i + j) % 5) as f64)))
            .collect();
        let r = build_indices(trip, 20, 10).unwrap();
        let mut cfg = TrainConfig::basic(Preset::MovieLens);
        cfg.rank = 4;
        cfg.epochs = 20;
        let before = crate::factorization::train_rmse(&init_basic(&r, &cfg).unwrap(), &r).unwrap();
        let p = hogwild_train_basic(&r, &cfg, 3).unwrap();
        let after = crate::factorization::train_rmse(&p, &r).unwrap();
        assert!(after < before);
        assert!(hogwild_train_basic(&r, &cfg, 0).is_err());
    }
}
