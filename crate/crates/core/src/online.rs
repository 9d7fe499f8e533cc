//! Absorbing new rows and columns into a trained model without touching
//! the parameters of existing ones.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{build_indices, RatingTriplet, SparseRatings};
use crate::error::{invalid, Error, Result};
use crate::factorization::kernel::{self, Mask, Scratch};
use crate::factorization::{check_epoch, factor_rng, uniform_fill, BiasMode, EpochInfo, ModelParams, TrainConfig};
use crate::lsh::{group_buckets, topk_rows, HashState, RowHashes};
use crate::similarity::{check_k, NeighborTable};

/// New rows `M..M+M̄`, new columns `N..N+N̄` and every rating that involves
/// at least one of them. Triplets are kept sorted by column, then row.
#[derive(Clone, Debug, PartialEq)]
pub struct IncrementBatch {
    base_rows: usize,
    base_cols: usize,
    new_rows: usize,
    new_cols: usize,
    triplets: Vec<RatingTriplet>,
}

impl IncrementBatch {
    pub fn new(base_rows: usize, base_cols: usize, new_rows: usize, new_cols: usize, mut triplets: Vec<RatingTriplet>) -> Result<Self> {
        let (m, n) = (base_rows + new_rows, base_cols + new_cols);
        for t in &triplets {
            if t.row >= m || t.col >= n {
                return Err(Error::IndexOutOfRange { row: t.row, col: t.col, rows: m, cols: n });
            }
            if t.row < base_rows && t.col < base_cols {
                return Err(invalid(format!("entry ({}, {}) involves no new row or column", t.row, t.col)));
            }
            if !t.value.is_finite() {
                return Err(invalid(format!("entry ({}, {}) is not finite", t.row, t.col)));
            }
        }
        triplets.sort_by_key(|t| (t.col, t.row));
        if let Some(w) = triplets.windows(2).find(|w| (w[0].row, w[0].col) == (w[1].row, w[1].col)) {
            return Err(Error::DuplicateEntry { row: w[0].row, col: w[0].col });
        }
        Ok(IncrementBatch { base_rows, base_cols, new_rows, new_cols, triplets })
    }

    pub fn empty(base_rows: usize, base_cols: usize) -> Self {
        IncrementBatch { base_rows, base_cols, new_rows: 0, new_cols: 0, triplets: Vec::new() }
    }

    pub fn base_rows(&self) -> usize {
        self.base_rows
    }

    pub fn base_cols(&self) -> usize {
        self.base_cols
    }

    pub fn new_rows(&self) -> usize {
        self.new_rows
    }

    pub fn new_cols(&self) -> usize {
        self.new_cols
    }

    /// `M̂ = M + M̄`.
    pub fn total_rows(&self) -> usize {
        self.base_rows + self.new_rows
    }

    /// `N̂ = N + N̄`.
    pub fn total_cols(&self) -> usize {
        self.base_cols + self.new_cols
    }

    pub fn triplets(&self) -> &[RatingTriplet] {
        &self.triplets
    }

    pub fn is_empty(&self) -> bool {
        self.new_rows == 0 && self.new_cols == 0 && self.triplets.is_empty()
    }

    /// The base matrix with the batch appended, over `M̂ × N̂`.
    pub fn merged(&self, base: &SparseRatings) -> Result<SparseRatings> {
        if base.n_rows() != self.base_rows || base.n_cols() != self.base_cols {
            return Err(invalid("batch does not extend a matrix of this shape"));
        }
        let mut trip = base.triplets().to_vec();
        trip.extend_from_slice(&self.triplets);
        build_indices(trip, self.total_rows(), self.total_cols())
    }
}

/// Old-to-new index maps produced by [`hold_back`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reindex {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl Reindex {
    pub fn apply(&self, t: &RatingTriplet) -> RatingTriplet {
        RatingTriplet::new(self.rows[t.row], self.cols[t.col], t.value)
    }
}

/// Moves the listed rows and columns to the end of their index spaces and
/// splits `ratings` into the matrix without them and the batch that adds
/// them back.
pub fn hold_back(ratings: &SparseRatings, rows: &[usize], cols: &[usize]) -> Result<(SparseRatings, IncrementBatch, Reindex)> {
    let (m, n) = (ratings.n_rows(), ratings.n_cols());
    let relabel = |len: usize, held: &[usize]| -> Result<(Vec<usize>, usize)> {
        let mut is_held = vec![false; len];
        for &x in held {
            if x >= len || std::mem::replace(&mut is_held[x], true) {
                return Err(invalid(format!("held-back index {x} is out of range or repeated")));
            }
        }
        let kept = len - held.len();
        let mut map = vec![0; len];
        let mut next = 0;
        for x in 0..len {
            if !is_held[x] {
                map[x] = next;
                next += 1;
            }
        }
        for (k, &x) in held.iter().enumerate() {
            map[x] = kept + k;
        }
        Ok((map, kept))
    };
    let (row_map, m0) = relabel(m, rows)?;
    let (col_map, n0) = relabel(n, cols)?;
    let re = Reindex { rows: row_map, cols: col_map };
    let (mut base, mut inc) = (Vec::new(), Vec::new());
    for t in ratings.triplets() {
        let x = re.apply(t);
        if x.row < m0 && x.col < n0 {
            base.push(x);
        } else {
            inc.push(x);
        }
    }
    let base = build_indices(base, m0, n0)?;
    let batch = IncrementBatch::new(m0, n0, m - m0, n - n0, inc)?;
    Ok((base, batch, re))
}

/// Draws rows and columns in seeded random order, alternating, until the
/// ratings they touch reach `fraction` of the matrix.
pub fn choose_hold_back(ratings: &SparseRatings, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid("hold-back fraction must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row_order: Vec<usize> = (0..ratings.n_rows()).collect();
    let mut col_order: Vec<usize> = (0..ratings.n_cols()).collect();
    row_order.shuffle(&mut rng);
    col_order.shuffle(&mut rng);
    let target = (fraction * ratings.nnz() as f64).ceil() as usize;
    let (mut row_held, mut col_held) = (vec![false; ratings.n_rows()], vec![false; ratings.n_cols()]);
    let (mut rows, mut cols) = (Vec::new(), Vec::new());
    let mut touched = 0;
    let (mut ri, mut ci) = (0, 0);
    // at least one row and one column always stay in the base matrix
    let (row_cap, col_cap) = (row_order.len().saturating_sub(1), col_order.len().saturating_sub(1));
    while touched < target && (ri < row_cap || ci < col_cap) {
        let take_row = (rows.len() <= cols.len() && ri < row_cap) || ci >= col_cap;
        if take_row {
            let i = row_order[ri];
            ri += 1;
            let (cs, _) = ratings.row(i);
            touched += cs.iter().filter(|&&j| !col_held[j as usize]).count();
            row_held[i] = true;
            rows.push(i);
        } else {
            let j = col_order[ci];
            ci += 1;
            let (rs, _) = ratings.col(j);
            touched += rs.iter().filter(|&&i| !row_held[i as usize]).count();
            col_held[j] = true;
            cols.push(j);
        }
    }
    Ok((rows, cols))
}

/// Extends `state` to `N̂` columns and adds the batch's ratings to the
/// accumulators; keys of every touched column are re-thresholded.
pub fn update_hashes_incremental(state: &mut HashState, batch: &IncrementBatch, hashes: &RowHashes) -> Result<()> {
    if state.n_cols() != batch.base_cols() {
        return Err(Error::MissingState(format!(
            "state holds {} columns, batch extends {}",
            state.n_cols(),
            batch.base_cols()
        )));
    }
    if hashes.n_rows() < batch.total_rows() {
        return Err(invalid(format!("{} row hashes drawn for {} rows", hashes.n_rows(), batch.total_rows())));
    }
    if batch.is_empty() {
        return Ok(());
    }
    state.grow(batch.total_cols());
    state.add_ratings(batch.triplets(), hashes)
}

/// Top-K rows for columns `n_old..N̂` by the bucket, frequency and
/// supplement rule of the batch search.
pub fn topk_for_new(state: &HashState, k: usize, n_old: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let n = state.n_cols();
    check_k(k, n)?;
    if n_old > n {
        return Err(invalid("old column count exceeds the hashed columns"));
    }
    if n_old == n {
        return Ok(Vec::new());
    }
    let groups = group_buckets(state);
    let cols: Vec<usize> = (n_old..n).collect();
    Ok(topk_rows(&groups, k, n, seed, &cols))
}

/// `neighbors` with rows for the new columns appended.
pub fn extend_neighbors(neighbors: &NeighborTable, new_rows: &[Vec<u32>]) -> Result<NeighborTable> {
    let mut out = neighbors.clone();
    if out.k() == 0 {
        return Ok(NeighborTable::empty(neighbors.n_cols() + new_rows.len()));
    }
    out.extend(neighbors.n_cols() + new_rows.len(), new_rows)?;
    Ok(out)
}

fn local_deviations(batch: &IncrementBatch, mu: f64) -> (Vec<f64>, Vec<f64>) {
    let (m0, n0) = (batch.base_rows(), batch.base_cols());
    let mut row_sum = vec![(0.0, 0usize); batch.new_rows()];
    let mut col_sum = vec![(0.0, 0usize); batch.new_cols()];
    for t in batch.triplets() {
        if t.row >= m0 {
            let s = &mut row_sum[t.row - m0];
            s.0 += t.value;
            s.1 += 1;
        }
        if t.col >= n0 {
            let s = &mut col_sum[t.col - n0];
            s.0 += t.value;
            s.1 += 1;
        }
    }
    let dev = |(sum, count): (f64, usize)| if count == 0 { 0.0 } else { sum / count as f64 - mu };
    (row_sum.into_iter().map(dev).collect(), col_sum.into_iter().map(dev).collect())
}

/// Appends initialized parameters for the batch's new rows and columns.
///
/// New biases (and their residual references) are the batch-local mean
/// deviations from `μ`, or zero with [`BiasMode::Off`]. New `U`, `V` rows
/// are uniform in `[0, init_scale]` from their own random streams; new
/// `W`, `C` rows are zero.
pub fn extend_params(params: &ModelParams, batch: &IncrementBatch, neighbors: &NeighborTable, config: &TrainConfig) -> Result<ModelParams> {
    config.validate()?;
    if params.n_rows() != batch.base_rows() || params.n_cols() != batch.base_cols() {
        return Err(invalid("batch does not extend a model of this shape"));
    }
    if params.rank() != config.rank {
        return Err(invalid("configured rank differs from the model's"));
    }
    let (n0, n1) = (params.n_cols(), batch.total_cols());
    let k = params.k();
    if neighbors.n_cols() != n1 || neighbors.k() != k || neighbors.entries()[..n0 * k] != *params.neighbors.entries() {
        return Err(invalid("neighbor table must keep the model's rows and cover the new columns"));
    }
    let (db, dbh) = if config.biases == BiasMode::Off {
        (vec![0.0; batch.new_rows()], vec![0.0; batch.new_cols()])
    } else {
        local_deviations(batch, params.mu)
    };
    let f = params.rank();
    let scale = config.effective_init_scale();
    let mut out = params.clone();
    out.b.extend_from_slice(&db);
    out.ref_b.extend_from_slice(&db);
    out.b_hat.extend_from_slice(&dbh);
    out.ref_b_hat.extend_from_slice(&dbh);
    out.u.extend(uniform_fill(batch.new_rows() * f, scale, &mut factor_rng(config.seed, 2)));
    out.v.extend(uniform_fill(batch.new_cols() * f, scale, &mut factor_rng(config.seed, 3)));
    out.w.resize(n1 * k, 0.0);
    out.c.resize(n1 * k, 0.0);
    out.neighbors = neighbors.clone();
    out.validate()?;
    Ok(out)
}

/// Trains only the new variables of an extended model on the merged matrix.
///
/// Each epoch first walks the new rows (updating `b_ī, u_ī`, plus the column
/// side when the column is new too), then the new columns over their old
/// rows (updating `b̂_j̄, v_j̄, w_j̄, c_j̄`).
pub fn train_incremental<F>(
    params: &mut ModelParams,
    merged: &SparseRatings,
    batch: &IncrementBatch,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(EpochInfo, &ModelParams) -> Result<()>,
{
    config.validate()?;
    let (m0, n0) = (batch.base_rows(), batch.base_cols());
    let (m1, n1) = (batch.total_rows(), batch.total_cols());
    if params.n_rows() != m1 || params.n_cols() != n1 || merged.n_rows() != m1 || merged.n_cols() != n1 {
        return Err(invalid("model and merged matrix must both cover the extended index spaces"));
    }
    if batch.is_empty() {
        return Ok(());
    }
    let biases = config.biases == BiasMode::Trained;
    let masked = |row: bool, col: bool| {
        let mut m = Mask::sides(row, col);
        m.b &= biases;
        m.b_hat &= biases;
        m
    };
    let start = Instant::now();
    let mut scratch = Scratch::default();
    for epoch in 0..config.epochs {
        let step = config.step_rates(epoch);
        let (fixed, mut rows, mut cols) = params.fixed_and_blocks();
        let mut run = |i: usize, j: usize, r: f64, mask: Mask| -> Result<()> {
            let e = kernel::step(&fixed, merged, &mut rows, &mut cols, i, j, r, &step, mask, &mut scratch);
            if e.is_finite() {
                Ok(())
            } else {
                Err(Error::Divergence { epoch: epoch + 1 })
            }
        };
        for i in m0..m1 {
            let (cs, vs) = merged.row(i);
            for (&j, &r) in cs.iter().zip(vs) {
                run(i, j as usize, r, masked(true, j as usize >= n0))?;
            }
        }
        for j in n0..n1 {
            let (is, vs) = merged.col(j);
            for (&i, &r) in is.iter().zip(vs).take_while(|(&i, _)| (i as usize) < m0) {
                run(i as usize, j, r, masked(false, true))?;
            }
        }
        check_epoch(params, epoch + 1)?;
        on_epoch(EpochInfo { epoch: epoch + 1, elapsed_seconds: start.elapsed().as_secs_f64() }, params)?;
    }
    Ok(())
}

/// Everything the model keeps between increments.
#[derive(Clone, Debug)]
pub struct OnlineModel {
    pub params: ModelParams,
    pub ratings: SparseRatings,
    pub state: HashState,
    pub hashes: RowHashes,
}

impl OnlineModel {
    /// Runs the whole online step: hash update, Top-K for new columns,
    /// parameter extension and incremental training.
    pub fn absorb(&mut self, batch: &IncrementBatch, config: &TrainConfig) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let merged = batch.merged(&self.ratings)?;
        let hashes = crate::lsh::assign_row_hashes(batch.total_rows(), self.state.config())?;
        let mut state = self.state.clone();
        update_hashes_incremental(&mut state, batch, &hashes)?;
        let rows = if self.params.k() == 0 {
            Vec::new()
        } else {
            topk_for_new(&state, self.params.k(), batch.base_cols(), state.config().seed)?
        };
        let neighbors = extend_neighbors(&self.params.neighbors, &rows)?;
        let mut params = extend_params(&self.params, batch, &neighbors, config)?;
        train_incremental(&mut params, &merged, batch, config, |_, _| Ok(()))?;
        *self = OnlineModel { params, ratings: merged, state, hashes };
        Ok(())
    }
}
