//! The per-sample prediction and update, written against borrowed parameter
//! blocks so serial, block-parallel and incremental training share it.

use super::{ModelParams, PerClass};
use crate::data::SparseRatings;

/// Read-only model state.
pub(crate) struct Fixed<'a> {
    pub mu: f64,
    pub rank: usize,
    pub k: usize,
    pub neighbors: &'a [u32],
    pub ref_b: &'a [f64],
    pub ref_b_hat: &'a [f64],
}

/// Row parameters for rows `start..start + b.len()`.
pub(crate) struct RowBlock<'a> {
    pub start: usize,
    pub b: &'a mut [f64],
    pub u: &'a mut [f64],
}

/// Column parameters for columns `start..start + b_hat.len()`.
pub(crate) struct ColBlock<'a> {
    pub start: usize,
    pub b_hat: &'a mut [f64],
    pub v: &'a mut [f64],
    pub w: &'a mut [f64],
    pub c: &'a mut [f64],
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct StepRates {
    pub gamma: PerClass,
    pub lambda: PerClass,
}

/// Which parameter groups a step may write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Mask {
    pub b: bool,
    pub b_hat: bool,
    pub u: bool,
    pub v: bool,
    /// `w_j` and `c_j`.
    pub neighbors: bool,
}

impl Mask {
    pub const ALL: Mask = Mask { b: true, b_hat: true, u: true, v: true, neighbors: true };

    /// Row-side parameters only when `row`, column-side only when `col`.
    pub fn sides(row: bool, col: bool) -> Mask {
        Mask { b: row, b_hat: col, u: row, v: col, neighbors: col }
    }
}

#[derive(Default)]
pub(crate) struct Scratch {
    /// `(slot, residual)` for rated neighbors.
    explicit: Vec<(usize, f64)>,
    implicit: Vec<usize>,
}

fn inv_sqrt_len(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        1.0 / (n as f64).sqrt()
    }
}

/// Fills `scratch` with the explicit/implicit split of `j`'s neighbors for row `i`.
fn split(fx: &Fixed<'_>, ratings: &SparseRatings, i: usize, j: usize, scratch: &mut Scratch) {
    scratch.explicit.clear();
    scratch.implicit.clear();
    if fx.k == 0 {
        return;
    }
    let (cols, vals) = ratings.row(i);
    let base_i = fx.mu + fx.ref_b[i];
    for (slot, &nb) in fx.neighbors[j * fx.k..(j + 1) * fx.k].iter().enumerate() {
        match cols.binary_search(&nb) {
            Ok(at) => scratch.explicit.push((slot, vals[at] - base_i - fx.ref_b_hat[nb as usize])),
            Err(_) => scratch.implicit.push(slot),
        }
    }
}

/// Neighbor terms given a split and the `w_j`, `c_j` rows.
fn neighbor_terms(scratch: &Scratch, w: &[f64], c: &[f64]) -> (f64, f64, f64, f64) {
    let sr = inv_sqrt_len(scratch.explicit.len());
    let sn = inv_sqrt_len(scratch.implicit.len());
    let exp: f64 = scratch.explicit.iter().map(|&(s, res)| res * w[s]).sum();
    let imp: f64 = scratch.implicit.iter().map(|&s| c[s]).sum();
    (sr, sn, sr * exp, sn * imp)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn predict_view(params: &ModelParams, ratings: &SparseRatings, i: usize, j: usize) -> f64 {
    let fx = Fixed {
        mu: params.mu,
        rank: params.rank,
        k: params.k(),
        neighbors: params.neighbors.entries(),
        ref_b: &params.ref_b,
        ref_b_hat: &params.ref_b_hat,
    };
    let mut scratch = Scratch::default();
    split(&fx, ratings, i, j, &mut scratch);
    let (_, _, exp, imp) = neighbor_terms(&scratch, params.w_row(j), params.c_row(j));
    params.mu + params.b[i] + params.b_hat[j] + exp + imp + dot(params.u_row(i), params.v_row(j))
}

/// Predicts `(i, j)` from pre-update values, then applies the masked updates.
/// Returns the error `r − r̂`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn step(
    fx: &Fixed<'_>,
    ratings: &SparseRatings,
    rows: &mut RowBlock<'_>,
    cols: &mut ColBlock<'_>,
    i: usize,
    j: usize,
    r: f64,
    rates: &StepRates,
    mask: Mask,
    scratch: &mut Scratch,
) -> f64 {
    let (f, k) = (fx.rank, fx.k);
    let li = i - rows.start;
    let lj = j - cols.start;
    split(fx, ratings, i, j, scratch);

    let u = &mut rows.u[li * f..(li + 1) * f];
    let v = &mut cols.v[lj * f..(lj + 1) * f];
    let w = &mut cols.w[lj * k..(lj + 1) * k];
    let c = &mut cols.c[lj * k..(lj + 1) * k];
    let (sr, sn, exp, imp) = neighbor_terms(scratch, w, c);
    let pred = fx.mu + rows.b[li] + cols.b_hat[lj] + exp + imp + dot(u, v);
    let e = r - pred;

    let (g, l) = (&rates.gamma, &rates.lambda);
    if mask.b {
        rows.b[li] += g.b * (e - l.b * rows.b[li]);
    }
    if mask.b_hat {
        cols.b_hat[lj] += g.b_hat * (e - l.b_hat * cols.b_hat[lj]);
    }
    if mask.u || mask.v {
        for (uf, vf) in u.iter_mut().zip(v.iter_mut()) {
            let (u0, v0) = (*uf, *vf);
            if mask.u {
                *uf = u0 + g.u * (e * v0 - l.u * u0);
            }
            if mask.v {
                *vf = v0 + g.v * (e * u0 - l.v * v0);
            }
        }
    }
    if mask.neighbors {
        for &(s, res) in &scratch.explicit {
            w[s] += g.w * (sr * e * res - l.w * w[s]);
        }
        for &s in &scratch.implicit {
            c[s] += g.c * (sn * e - l.c * c[s]);
        }
    }
    e
}
