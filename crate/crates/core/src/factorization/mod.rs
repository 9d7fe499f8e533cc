//! Neighborhood-augmented matrix factorization trained by SGD.
//!
//! ```text
//! r̂ = μ + b_i + b̂_j
//!     + |R|^-½ Σ_{k∈R} (r_{i,J_k} − b̄_{i,J_k}) w_{j,k}
//!     + |N|^-½ Σ_{k∈N} c_{j,k}
//!     + u_i·v_j
//! ```
//!
//! `R` holds the neighbor slots of `j` that row `i` has rated and `N` the
//! rest. The residual baseline `b̄_{i,J_k}` is the reference baseline fixed at
//! initialization, so every update rule is an exact stochastic gradient.

mod checkpoint;
pub(crate) mod kernel;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BaselineStats, RatingTriplet, SparseRatings};
use crate::error::{invalid, Error, Result};
use crate::similarity::NeighborTable;

use kernel::{Mask, Scratch, StepRates};

/// One value per parameter class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerClass {
    pub b: f64,
    pub b_hat: f64,
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub c: f64,
}

impl PerClass {
    pub fn uniform(x: f64) -> Self {
        PerClass { b: x, b_hat: x, u: x, v: x, w: x, c: x }
    }

    fn all(&self) -> [f64; 6] {
        [self.b, self.b_hat, self.u, self.v, self.w, self.c]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        PerClass {
            b: f(self.b),
            b_hat: f(self.b_hat),
            u: f(self.u),
            v: f(self.v),
            w: f(self.w),
            c: f(self.c),
        }
    }
}

/// How the basic model treats `μ, b, b̂`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasMode {
    /// Pure `u_i·v_j`; biases are zero.
    Off,
    /// Baselines from the data, never updated.
    Fixed,
    /// Baselines as the starting point, then trained.
    Trained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOrder {
    Natural,
    /// Rows with the most ratings first.
    DescendingCount,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Netflix,
    MovieLens,
    YahooMusic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub rank: usize,
    pub k: usize,
    /// Initial rates `α` per class.
    pub rates: PerClass,
    pub beta: f64,
    pub regs: PerClass,
    pub epochs: usize,
    /// Upper bound of the uniform `U`, `V` initialization; `None` means `1/√F`.
    pub init_scale: Option<f64>,
    pub seed: u64,
    /// Applied to predictions at evaluation only.
    pub clamp: Option<(f64, f64)>,
    /// Used by the basic model; the full model always trains its biases.
    pub biases: BiasMode,
    pub row_order: RowOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::full(Preset::MovieLens)
    }
}

impl TrainConfig {
    /// Rates for the basic model.
    pub fn basic(preset: Preset) -> Self {
        let (alpha, beta, lambda) = match preset {
            Preset::Netflix | Preset::MovieLens => (0.04, 0.3, 0.035),
            Preset::YahooMusic => (0.01, 0.1, 0.02),
        };
        TrainConfig {
            rank: 32,
            k: 0,
            rates: PerClass::uniform(alpha),
            beta,
            regs: PerClass::uniform(lambda),
            epochs: 50,
            init_scale: None,
            seed: 0,
            clamp: None,
            biases: BiasMode::Trained,
            row_order: RowOrder::Natural,
        }
    }

    /// Rates for the neighborhood model.
    pub fn full(preset: Preset) -> Self {
        let (a, aw, l, lw) = match preset {
            Preset::Netflix => (0.02, 0.001, 0.01, 0.05),
            Preset::MovieLens => (0.035, 0.002, 0.02, 0.002),
            Preset::YahooMusic => (0.02, 0.001, 0.02, 0.05),
        };
        TrainConfig {
            rank: 32,
            k: 32,
            rates: PerClass { b: a, b_hat: a, u: a, v: a, w: aw, c: aw },
            beta: 0.3,
            regs: PerClass { b: l, b_hat: l, u: l, v: l, w: lw, c: lw },
            epochs: 50,
            init_scale: None,
            seed: 0,
            clamp: None,
            biases: BiasMode::Trained,
            row_order: RowOrder::Natural,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(invalid("rank F must be at least 1"));
        }
        if self.rates.all().iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(invalid("learning rates must be positive and finite"));
        }
        if self.regs.all().iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(invalid("regularizers must be non-negative and finite"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid("beta must be non-negative"));
        }
        if let Some(s) = self.init_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(invalid("init_scale must be non-negative"));
            }
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo <= hi) {
                return Err(invalid("clamp range must satisfy lo <= hi"));
            }
        }
        Ok(())
    }

    pub fn effective_init_scale(&self) -> f64 {
        self.init_scale.unwrap_or(1.0 / (self.rank as f64).sqrt())
    }

    pub(crate) fn step_rates(&self, epoch: usize) -> StepRates {
        StepRates {
            gamma: self.rates.map(|a| learning_rate(a, self.beta, epoch as f64)),
            lambda: self.regs,
        }
    }
}

/// `γ_t = α / (1 + β·t^1.5)`.
pub fn learning_rate(alpha: f64, beta: f64, t: f64) -> f64 {
    alpha / (1.0 + beta * t.powf(1.5))
}

/// All trainable state plus the neighbor table it is aligned with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub mu: f64,
    pub b: Vec<f64>,
    pub b_hat: Vec<f64>,
    /// `M × F`, row-major.
    pub u: Vec<f64>,
    /// `N × F`, row-major.
    pub v: Vec<f64>,
    /// `N × K`; `w[j·K + k]` belongs to neighbor `J^K[j][k]`.
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub neighbors: NeighborTable,
    /// Reference baselines used in neighbor residuals; never trained.
    pub ref_b: Vec<f64>,
    pub ref_b_hat: Vec<f64>,
    rank: usize,
}

impl ModelParams {
    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    pub fn n_cols(&self) -> usize {
        self.b_hat.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn k(&self) -> usize {
        self.neighbors.k()
    }

    pub fn u_row(&self, i: usize) -> &[f64] {
        &self.u[i * self.rank..(i + 1) * self.rank]
    }

    pub fn v_row(&self, j: usize) -> &[f64] {
        &self.v[j * self.rank..(j + 1) * self.rank]
    }

    pub fn w_row(&self, j: usize) -> &[f64] {
        let k = self.k();
        &self.w[j * k..(j + 1) * k]
    }

    pub fn c_row(&self, j: usize) -> &[f64] {
        let k = self.k();
        &self.c[j * k..(j + 1) * k]
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n, f, k) = (self.n_rows(), self.n_cols(), self.rank, self.k());
        let shapes_ok = self.u.len() == m * f
            && self.v.len() == n * f
            && self.w.len() == n * k
            && self.c.len() == n * k
            && self.ref_b.len() == m
            && self.ref_b_hat.len() == n
            && self.neighbors.n_cols() == n;
        if !shapes_ok || f == 0 {
            return Err(invalid("model parameter shapes are inconsistent"));
        }
        self.neighbors.validate()?;
        if !self.all_finite() {
            return Err(invalid("model parameters contain non-finite values"));
        }
        Ok(())
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.mu.is_finite()
            && [&self.b, &self.b_hat, &self.u, &self.v, &self.w, &self.c]
                .iter()
                .all(|x| x.iter().all(|v| v.is_finite()))
    }

    /// Entries held by `J^K`, `W` and `C`, in that order.
    pub fn neighbor_entries(&self) -> (usize, usize, usize) {
        (self.neighbors.entries().len(), self.w.len(), self.c.len())
    }

    pub fn memory_bytes(&self) -> usize {
        let reals = 1
            + self.b.len()
            + self.b_hat.len()
            + self.u.len()
            + self.v.len()
            + self.w.len()
            + self.c.len()
            + self.ref_b.len()
            + self.ref_b_hat.len();
        reals * 8 + self.neighbors.memory_bytes()
    }

    pub(crate) fn fixed_and_blocks(&mut self) -> (kernel::Fixed<'_>, kernel::RowBlock<'_>, kernel::ColBlock<'_>) {
        let fixed = kernel::Fixed {
            mu: self.mu,
            rank: self.rank,
            k: self.neighbors.k(),
            neighbors: self.neighbors.entries(),
            ref_b: &self.ref_b,
            ref_b_hat: &self.ref_b_hat,
        };
        let rows = kernel::RowBlock { start: 0, b: &mut self.b, u: &mut self.u };
        let cols = kernel::ColBlock {
            start: 0,
            b_hat: &mut self.b_hat,
            v: &mut self.v,
            w: &mut self.w,
            c: &mut self.c,
        };
        (fixed, rows, cols)
    }

    pub(crate) fn from_parts(
        mu: f64,
        b: Vec<f64>,
        b_hat: Vec<f64>,
        u: Vec<f64>,
        v: Vec<f64>,
        w: Vec<f64>,
        c: Vec<f64>,
        neighbors: NeighborTable,
        ref_b: Vec<f64>,
        ref_b_hat: Vec<f64>,
        rank: usize,
    ) -> Result<Self> {
        let p = ModelParams { mu, b, b_hat, u, v, w, c, neighbors, ref_b, ref_b_hat, rank };
        p.validate()?;
        Ok(p)
    }
}

pub(crate) fn uniform_fill(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random::<f64>() * scale).collect()
}

pub(crate) fn factor_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `μ, b, b̂` (and the residual reference) from `baselines`; `U`, `V` uniform
/// in `[0, init_scale]`; `W = C = 0`.
pub fn init_params(
    m: usize,
    n: usize,
    neighbors: NeighborTable,
    baselines: &BaselineStats,
    config: &TrainConfig,
) -> Result<ModelParams> {
    config.validate()?;
    if baselines.b.len() != m || baselines.b_hat.len() != n || neighbors.n_cols() != n {
        return Err(invalid("baselines or neighbor table do not match the matrix dimensions"));
    }
    let f = config.rank;
    let k = neighbors.k();
    let scale = config.effective_init_scale();
    let u = uniform_fill(m * f, scale, &mut factor_rng(config.seed, 0));
    let v = uniform_fill(n * f, scale, &mut factor_rng(config.seed, 1));
    ModelParams::from_parts(
        baselines.mu,
        baselines.b.clone(),
        baselines.b_hat.clone(),
        u,
        v,
        vec![0.0; n * k],
        vec![0.0; n * k],
        neighbors,
        baselines.b.clone(),
        baselines.b_hat.clone(),
        f,
    )
}

/// Neighbor slots of `j` split by whether row `i` rated them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSplit {
    pub explicit: Vec<usize>,
    pub implicit: Vec<usize>,
}

pub fn split_neighbors(i: usize, j: usize, neighbors: &NeighborTable, ratings: &SparseRatings) -> NeighborSplit {
    let (cols, _) = ratings.row(i);
    let (explicit, implicit) = neighbors
        .row(j)
        .iter()
        .enumerate()
        .partition::<Vec<_>, _>(|(_, &nb)| cols.binary_search(&nb).is_ok());
    NeighborSplit {
        explicit: explicit.into_iter().map(|(k, _)| k).collect(),
        implicit: implicit.into_iter().map(|(k, _)| k).collect(),
    }
}

fn check_index(params: &ModelParams, i: usize, j: usize) -> Result<()> {
    if i >= params.n_rows() || j >= params.n_cols() {
        return Err(Error::IndexOutOfRange {
            row: i,
            col: j,
            rows: params.n_rows(),
            cols: params.n_cols(),
        });
    }
    Ok(())
}

fn check_ratings(params: &ModelParams, ratings: &SparseRatings) -> Result<()> {
    if ratings.n_rows() != params.n_rows() || ratings.n_cols() != params.n_cols() {
        return Err(invalid(format!(
            "model is {}x{} but the ratings are {}x{}",
            params.n_rows(),
            params.n_cols(),
            ratings.n_rows(),
            ratings.n_cols()
        )));
    }
    Ok(())
}

/// Unclamped prediction. `ratings` supplies the explicit-neighbor values.
pub fn predict(params: &ModelParams, ratings: &SparseRatings, i: usize, j: usize) -> Result<f64> {
    check_index(params, i, j)?;
    check_ratings(params, ratings)?;
    Ok(kernel::predict_view(params, ratings, i, j))
}

/// Prediction for pairs that may fall outside the model: unknown rows or
/// columns contribute no bias and no interaction terms.
pub fn predict_cold(params: &ModelParams, ratings: &SparseRatings, i: usize, j: usize) -> f64 {
    let row_known = i < params.n_rows() && i < ratings.n_rows();
    let col_known = j < params.n_cols();
    match (row_known, col_known) {
        (true, true) => kernel::predict_view(params, ratings, i, j),
        (true, false) => params.mu + params.b[i],
        (false, true) => params.mu + params.b_hat[j],
        (false, false) => params.mu,
    }
}

/// Applies every update rule once for the sample `(i, j, r)`; returns the
/// pre-update error `e = r − r̂`.
pub fn sgd_update(
    params: &mut ModelParams,
    ratings: &SparseRatings,
    sample: RatingTriplet,
    rates: &PerClass,
    regs: &PerClass,
) -> Result<f64> {
    check_index(params, sample.row, sample.col)?;
    check_ratings(params, ratings)?;
    let step = StepRates { gamma: *rates, lambda: *regs };
    let mut scratch = Scratch::default();
    let (fixed, mut rows, mut cols) = params.fixed_and_blocks();
    let e = kernel::step(&fixed, ratings, &mut rows, &mut cols, sample.row, sample.col, sample.value, &step, Mask::ALL, &mut scratch);
    if !e.is_finite() || !params.all_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    Ok(e)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub clamp: Option<(f64, f64)>,
    /// Factor applied to predictions to return to the original rating units.
    pub unscale: Option<f64>,
}

fn finish_prediction(pred: f64, opts: &EvalOptions) -> f64 {
    let p = match opts.clamp {
        Some((lo, hi)) => pred.clamp(lo, hi),
        None => pred,
    };
    p * opts.unscale.unwrap_or(1.0)
}

/// Root-mean-square error over `test`.
pub fn rmse(params: &ModelParams, test: &[RatingTriplet], ratings: &SparseRatings, opts: &EvalOptions) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    check_ratings(params, ratings)?;
    let mut sse = 0.0;
    for t in test {
        check_index(params, t.row, t.col)?;
        let p = finish_prediction(kernel::predict_view(params, ratings, t.row, t.col), opts);
        sse += (t.value - p).powi(2);
    }
    Ok((sse / test.len() as f64).sqrt())
}

/// Like [`rmse`], but pairs outside the model use [`predict_cold`].
pub fn rmse_cold(params: &ModelParams, test: &[RatingTriplet], ratings: &SparseRatings, opts: &EvalOptions) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let sse: f64 = test
        .iter()
        .map(|t| (t.value - finish_prediction(predict_cold(params, ratings, t.row, t.col), opts)).powi(2))
        .sum();
    Ok((sse / test.len() as f64).sqrt())
}

/// RMSE over every stored rating of `ratings`.
pub fn train_rmse(params: &ModelParams, ratings: &SparseRatings) -> Result<f64> {
    if ratings.nnz() == 0 {
        return Err(Error::EmptyTestSet);
    }
    check_ratings(params, ratings)?;
    let sse: f64 = ratings
        .iter_row_major()
        .map(|t| (t.value - kernel::predict_view(params, ratings, t.row, t.col)).powi(2))
        .sum();
    Ok((sse / ratings.nnz() as f64).sqrt())
}

/// Regularized squared-error objective over all stored ratings.
pub fn objective(params: &ModelParams, ratings: &SparseRatings, regs: &PerClass) -> Result<f64> {
    check_ratings(params, ratings)?;
    let data: f64 = ratings
        .iter_row_major()
        .map(|t| (t.value - kernel::predict_view(params, ratings, t.row, t.col)).powi(2))
        .sum();
    let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    Ok(data
        + regs.b * sq(&params.b)
        + regs.b_hat * sq(&params.b_hat)
        + regs.u * sq(&params.u)
        + regs.v * sq(&params.v)
        + regs.w * sq(&params.w)
        + regs.c * sq(&params.c))
}

/// Progress passed to epoch callbacks.
#[derive(Clone, Copy, Debug)]
pub struct EpochInfo {
    /// Epochs completed so far (1-based after the first pass).
    pub epoch: usize,
    pub elapsed_seconds: f64,
}

pub(crate) fn check_epoch(params: &ModelParams, epoch: usize) -> Result<()> {
    if params.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch })
    }
}

fn row_visit_order(ratings: &SparseRatings, order: RowOrder) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..ratings.n_rows()).collect();
    if order == RowOrder::DescendingCount {
        rows.sort_by_key(|&i| std::cmp::Reverse(ratings.row_len(i)));
    }
    rows
}

/// Basic model, rows outermost; only `U`, `V` (and biases when
/// [`BiasMode::Trained`]) are updated.
pub fn train_basic(ratings: &SparseRatings, config: &TrainConfig) -> Result<ModelParams> {
    train_basic_with(ratings, config, |_, _| Ok(()))
}

pub fn init_basic(ratings: &SparseRatings, config: &TrainConfig) -> Result<ModelParams> {
    let (m, n) = (ratings.n_rows(), ratings.n_cols());
    let mut base = crate::data::compute_baselines(ratings)?;
    if config.biases == BiasMode::Off {
        base = BaselineStats { mu: 0.0, b: vec![0.0; m], b_hat: vec![0.0; n] };
    }
    init_params(m, n, NeighborTable::empty(n), &base, config)
}

pub fn train_basic_with<F>(ratings: &SparseRatings, config: &TrainConfig, on_epoch: F) -> Result<ModelParams>
where
    F: FnMut(EpochInfo, &ModelParams) -> Result<()>,
{
    let mut params = init_basic(ratings, config)?;
    continue_basic(&mut params, ratings, config, on_epoch)?;
    Ok(params)
}

/// Runs the basic model's epochs on existing parameters.
pub fn continue_basic<F>(params: &mut ModelParams, ratings: &SparseRatings, config: &TrainConfig, mut on_epoch: F) -> Result<()>
where
    F: FnMut(EpochInfo, &ModelParams) -> Result<()>,
{
    config.validate()?;
    check_ratings(params, ratings)?;
    let mask = match config.biases {
        BiasMode::Trained => Mask { b: true, b_hat: true, u: true, v: true, neighbors: false },
        BiasMode::Off | BiasMode::Fixed => Mask { b: false, b_hat: false, u: true, v: true, neighbors: false },
    };
    let order = row_visit_order(ratings, config.row_order);
    let start = Instant::now();
    let mut scratch = Scratch::default();
    for epoch in 0..config.epochs {
        let step = config.step_rates(epoch);
        let (fixed, mut rows, mut cols) = params.fixed_and_blocks();
        for &i in &order {
            let (cs, vs) = ratings.row(i);
            for (&j, &r) in cs.iter().zip(vs) {
                let e = kernel::step(&fixed, ratings, &mut rows, &mut cols, i, j as usize, r, &step, mask, &mut scratch);
                if !e.is_finite() {
                    return Err(Error::Divergence { epoch: epoch + 1 });
                }
            }
        }
        check_epoch(params, epoch + 1)?;
        on_epoch(EpochInfo { epoch: epoch + 1, elapsed_seconds: start.elapsed().as_secs_f64() }, params)?;
    }
    Ok(())
}

/// Full model, columns outermost; all six parameter classes are updated.
pub fn train_full(ratings: &SparseRatings, neighbors: &NeighborTable, config: &TrainConfig) -> Result<ModelParams> {
    train_full_with(ratings, neighbors, config, |_, _| Ok(()))
}

pub fn init_full(ratings: &SparseRatings, neighbors: &NeighborTable, config: &TrainConfig) -> Result<ModelParams> {
    if neighbors.n_cols() != ratings.n_cols() {
        return Err(invalid("neighbor table does not match the column count"));
    }
    if neighbors.k() != config.k {
        return Err(invalid(format!("neighbor table has K = {}, config asks for {}", neighbors.k(), config.k)));
    }
    let base = crate::data::compute_baselines(ratings)?;
    init_params(ratings.n_rows(), ratings.n_cols(), neighbors.clone(), &base, config)
}

pub fn train_full_with<F>(ratings: &SparseRatings, neighbors: &NeighborTable, config: &TrainConfig, on_epoch: F) -> Result<ModelParams>
where
    F: FnMut(EpochInfo, &ModelParams) -> Result<()>,
{
    let mut params = init_full(ratings, neighbors, config)?;
    continue_full(&mut params, ratings, config, on_epoch)?;
    Ok(params)
}

pub fn continue_full<F>(params: &mut ModelParams, ratings: &SparseRatings, config: &TrainConfig, mut on_epoch: F) -> Result<()>
where
    F: FnMut(EpochInfo, &ModelParams) -> Result<()>,
{
    config.validate()?;
    check_ratings(params, ratings)?;
    let start = Instant::now();
    let mut scratch = Scratch::default();
    for epoch in 0..config.epochs {
        let step = config.step_rates(epoch);
        let (fixed, mut rows, mut cols) = params.fixed_and_blocks();
        for j in 0..ratings.n_cols() {
            let (is, vs) = ratings.col(j);
            for (&i, &r) in is.iter().zip(vs) {
                let e = kernel::step(&fixed, ratings, &mut rows, &mut cols, i as usize, j, r, &step, Mask::ALL, &mut scratch);
                if !e.is_finite() {
                    return Err(Error::Divergence { epoch: epoch + 1 });
                }
            }
        }
        check_epoch(params, epoch + 1)?;
        on_epoch(EpochInfo { epoch: epoch + 1, elapsed_seconds: start.elapsed().as_secs_f64() }, params)?;
    }
    Ok(())
}

pub use checkpoint::{read_checkpoint, write_checkpoint};
