//! Ingestion, indexing and baseline statistics for sparse interaction data.
//!
//! A [`SparseRatings`] keeps the same set of triplets in two layouts: a
//! row-major index (`Ω_i`, the columns rated by row `i`) and a column-major
//! index (`Ω̂_j`, the rows that rated column `j`). Both are sorted by the
//! secondary index, so `get(i, j)` is a binary search and column slices are
//! enumerated in ascending row order.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatingTriplet {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl RatingTriplet {
    pub fn new(row: usize, col: usize, value: f64) -> Self {
        RatingTriplet { row, col, value }
    }
}

/// Field separator of a ratings text file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delimiter {
    DoubleColon,
    Tab,
    Comma,
    Space,
}

impl Delimiter {
    pub fn as_str(self) -> &'static str {
        match self {
            Delimiter::DoubleColon => "::",
            Delimiter::Tab => "\t",
            Delimiter::Comma => ",",
            Delimiter::Space => " ",
        }
    }
}

impl FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "::" | "double-colon" => Ok(Delimiter::DoubleColon),
            "\t" | "\\t" | "tab" => Ok(Delimiter::Tab),
            "," | "comma" => Ok(Delimiter::Comma),
            " " | "space" => Ok(Delimiter::Space),
            other => Err(invalid(format!("unknown delimiter {other:?}"))),
        }
    }
}

impl fmt::Display for Delimiter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Delimiter::DoubleColon => "::",
            Delimiter::Tab => "tab",
            Delimiter::Comma => "comma",
            Delimiter::Space => "space",
        };
        f.write_str(name)
    }
}

/// Bijection between original identifiers and dense 0-based indices,
/// in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get_or_insert(&mut self, id: &str) -> usize {
        if let Some(&idx) = self.index.get(id) {
            return idx;
        }
        let idx = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), idx);
        idx
    }

    pub fn original(&self, idx: usize) -> Option<&str> {
        self.ids.get(idx).map(String::as_str)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMaps {
    pub rows: IdMap,
    pub cols: IdMap,
}

/// How ids missing from an existing [`IdMaps`] are treated while parsing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnknownIds {
    /// Assign the next dense index.
    Extend,
    /// Drop the line and count it as skipped.
    Skip,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedRatings {
    pub triplets: Vec<RatingTriplet>,
    pub ids: IdMaps,
    pub skipped: usize,
}

impl ParsedRatings {
    pub fn n_rows(&self) -> usize {
        self.ids.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.ids.cols.len()
    }

    pub fn into_ratings(self) -> Result<SparseRatings> {
        let (m, n) = (self.n_rows(), self.n_cols());
        Ok(build_indices(self.triplets, m, n)?.with_ids(self.ids))
    }
}

/// Parses `<row-id><sep><col-id><sep><rating>[<sep><timestamp>]` lines.
/// Blank lines are ignored; trailing fields are ignored.
pub fn parse_ratings<R: BufRead>(reader: R, delimiter: Delimiter) -> Result<ParsedRatings> {
    parse_ratings_with(reader, delimiter, IdMaps::default(), UnknownIds::Extend)
}

/// Like [`parse_ratings`], continuing from existing id maps.
pub fn parse_ratings_with<R: BufRead>(
    reader: R,
    delimiter: Delimiter,
    ids: IdMaps,
    unknown: UnknownIds,
) -> Result<ParsedRatings> {
    let mut out = ParsedRatings {
        triplets: Vec::new(),
        ids,
        skipped: 0,
    };
    let sep = delimiter.as_str();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        let mut fields = line.split(sep).map(str::trim);
        let (row_id, col_id, raw) = match (fields.next(), fields.next(), fields.next()) {
            (Some(r), Some(c), Some(v)) if !r.is_empty() && !c.is_empty() => (r, c, v),
            _ => return Err(parse_err(format!("expected at least 3 fields separated by {delimiter}"))),
        };
        let value: f64 = raw
            .parse()
            .map_err(|_| parse_err(format!("invalid rating {raw:?}")))?;
        if !value.is_finite() {
            return Err(parse_err(format!("non-finite rating {raw:?}")));
        }
        let (row, col) = match unknown {
            UnknownIds::Extend => (
                out.ids.rows.get_or_insert(row_id),
                out.ids.cols.get_or_insert(col_id),
            ),
            UnknownIds::Skip => match (out.ids.rows.get(row_id), out.ids.cols.get(col_id)) {
                (Some(r), Some(c)) => (r, c),
                _ => {
                    out.skipped += 1;
                    continue;
                }
            },
        };
        out.triplets.push(RatingTriplet::new(row, col, value));
    }
    Ok(out)
}

/// Replaces exact zeros by `zero_floor`, then divides every value by `scale`.
pub fn transform_ratings(
    mut triplets: Vec<RatingTriplet>,
    zero_floor: Option<f64>,
    scale: Option<f64>,
) -> Result<Vec<RatingTriplet>> {
    if let Some(s) = scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(invalid(format!("scale must be positive, got {s}")));
        }
    }
    for t in &mut triplets {
        if let Some(floor) = zero_floor {
            if t.value == 0.0 {
                t.value = floor;
            }
        }
        if let Some(s) = scale {
            t.value /= s;
        }
    }
    Ok(triplets)
}

/// Immutable dual-indexed sparse matrix.
#[derive(Clone, Debug)]
pub struct SparseRatings {
    n_rows: usize,
    n_cols: usize,
    triplets: Vec<RatingTriplet>,
    row_ptr: Vec<usize>,
    row_cols: Vec<u32>,
    row_vals: Vec<f64>,
    col_ptr: Vec<usize>,
    col_rows: Vec<u32>,
    col_vals: Vec<f64>,
    ids: IdMaps,
}

/// Builds both indices. Rejects out-of-range indices, non-finite values and
/// duplicated `(row, col)` pairs.
pub fn build_indices(triplets: Vec<RatingTriplet>, n_rows: usize, n_cols: usize) -> Result<SparseRatings> {
    if n_rows > u32::MAX as usize || n_cols > u32::MAX as usize {
        return Err(invalid("dimensions exceed 32-bit index range"));
    }
    for t in &triplets {
        if t.row >= n_rows || t.col >= n_cols {
            return Err(Error::IndexOutOfRange {
                row: t.row,
                col: t.col,
                rows: n_rows,
                cols: n_cols,
            });
        }
        if !t.value.is_finite() {
            return Err(invalid(format!("non-finite value at ({}, {})", t.row, t.col)));
        }
    }

    let mut order: Vec<u32> = (0..triplets.len() as u32).collect();
    order.sort_unstable_by_key(|&k| {
        let t = &triplets[k as usize];
        (t.row, t.col)
    });
    for pair in order.windows(2) {
        let (a, b) = (&triplets[pair[0] as usize], &triplets[pair[1] as usize]);
        if a.row == b.row && a.col == b.col {
            return Err(Error::DuplicateEntry { row: a.row, col: a.col });
        }
    }
    let mut row_ptr = vec![0usize; n_rows + 1];
    for t in &triplets {
        row_ptr[t.row + 1] += 1;
    }
    for i in 0..n_rows {
        row_ptr[i + 1] += row_ptr[i];
    }
    let row_cols = order.iter().map(|&k| triplets[k as usize].col as u32).collect();
    let row_vals = order.iter().map(|&k| triplets[k as usize].value).collect();

    order.sort_unstable_by_key(|&k| {
        let t = &triplets[k as usize];
        (t.col, t.row)
    });
    let mut col_ptr = vec![0usize; n_cols + 1];
    for t in &triplets {
        col_ptr[t.col + 1] += 1;
    }
    for j in 0..n_cols {
        col_ptr[j + 1] += col_ptr[j];
    }
    let col_rows = order.iter().map(|&k| triplets[k as usize].row as u32).collect();
    let col_vals = order.iter().map(|&k| triplets[k as usize].value).collect();

    Ok(SparseRatings {
        n_rows,
        n_cols,
        triplets,
        row_ptr,
        row_cols,
        row_vals,
        col_ptr,
        col_rows,
        col_vals,
        ids: IdMaps::default(),
    })
}

impl SparseRatings {
    pub fn with_ids(mut self, ids: IdMaps) -> Self {
        self.ids = ids;
        self
    }

    pub fn ids(&self) -> &IdMaps {
        &self.ids
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// `|Ω|`
    pub fn nnz(&self) -> usize {
        self.triplets.len()
    }

    /// Triplets in input order.
    pub fn triplets(&self) -> &[RatingTriplet] {
        &self.triplets
    }

    /// `Ω_i`: columns rated by row `i` (ascending) and their values.
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.row_cols[a..b], &self.row_vals[a..b])
    }

    /// `Ω̂_j`: rows that rated column `j` (ascending) and their values.
    pub fn col(&self, j: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.col_rows[a..b], &self.col_vals[a..b])
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn col_len(&self, j: usize) -> usize {
        self.col_ptr[j + 1] - self.col_ptr[j]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i >= self.n_rows {
            return None;
        }
        let (cols, vals) = self.row(i);
        cols.binary_search(&(j as u32)).ok().map(|k| vals[k])
    }

    /// All entries in column-major order: column ascending, then row ascending.
    pub fn iter_col_major(&self) -> impl Iterator<Item = RatingTriplet> + '_ {
        (0..self.n_cols).flat_map(move |j| {
            let (rows, vals) = self.col(j);
            rows.iter()
                .zip(vals)
                .map(move |(&i, &v)| RatingTriplet::new(i as usize, j, v))
        })
    }

    /// All entries in row-major order: row ascending, then column ascending.
    pub fn iter_row_major(&self) -> impl Iterator<Item = RatingTriplet> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter()
                .zip(vals)
                .map(move |(&j, &v)| RatingTriplet::new(i, j as usize, v))
        })
    }

    /// Bytes held by the triplet list and both indices.
    pub fn memory_bytes(&self) -> usize {
        use std::mem::size_of;
        self.triplets.len() * size_of::<RatingTriplet>()
            + (self.row_ptr.len() + self.col_ptr.len()) * size_of::<usize>()
            + (self.row_cols.len() + self.col_rows.len()) * size_of::<u32>()
            + (self.row_vals.len() + self.col_vals.len()) * size_of::<f64>()
    }
}

/// Global mean and per-row / per-column deviations from it.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineStats {
    pub mu: f64,
    pub b: Vec<f64>,
    pub b_hat: Vec<f64>,
}

/// `μ = Σr/|Ω|`, `b_i = mean(Ω_i) − μ`, `b̂_j = mean(Ω̂_j) − μ`.
/// Rows or columns without entries get a zero deviation.
pub fn compute_baselines(ratings: &SparseRatings) -> Result<BaselineStats> {
    if ratings.nnz() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mu = ratings.triplets().iter().map(|t| t.value).sum::<f64>() / ratings.nnz() as f64;
    let deviation = |vals: &[f64]| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64 - mu
        }
    };
    let b = (0..ratings.n_rows()).map(|i| deviation(ratings.row(i).1)).collect();
    let b_hat = (0..ratings.n_cols()).map(|j| deviation(ratings.col(j).1)).collect();
    Ok(BaselineStats { mu, b, b_hat })
}

/// Moves a seeded random `test_fraction` of the entries into a held-out list.
///
/// An entry is only moved if its row and column keep at least one training
/// entry, so the held-out list can come out smaller than requested on very
/// sparse inputs. The training matrix keeps the original dimensions and ids.
pub fn split_holdout(
    ratings: &SparseRatings,
    test_fraction: f64,
    seed: u64,
) -> Result<(SparseRatings, Vec<RatingTriplet>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(invalid(format!("test_fraction must be in [0, 1), got {test_fraction}")));
    }
    let triplets = ratings.triplets();
    let target = (test_fraction * triplets.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut row_left: Vec<usize> = (0..ratings.n_rows()).map(|i| ratings.row_len(i)).collect();
    let mut col_left: Vec<usize> = (0..ratings.n_cols()).map(|j| ratings.col_len(j)).collect();
    let mut held = vec![false; triplets.len()];
    let mut taken = 0;
    for k in order {
        if taken == target {
            break;
        }
        let t = &triplets[k];
        if row_left[t.row] > 1 && col_left[t.col] > 1 {
            row_left[t.row] -= 1;
            col_left[t.col] -= 1;
            held[k] = true;
            taken += 1;
        }
    }
    let mut train = Vec::with_capacity(triplets.len() - taken);
    let mut test = Vec::with_capacity(taken);
    for (t, &h) in triplets.iter().zip(&held) {
        if h {
            test.push(*t);
        } else {
            train.push(*t);
        }
    }
    let train = build_indices(train, ratings.n_rows(), ratings.n_cols())?.with_ids(ratings.ids().clone());
    Ok((train, test))
}

const MATRIX_MAGIC: &str = "LSHMF-R v1";

/// Writes `LSHMF-R v1 M N NNZ` followed by one `row col value` line per entry.
pub fn write_matrix<W: Write>(mut w: W, ratings: &SparseRatings) -> Result<()> {
    writeln!(w, "{MATRIX_MAGIC} {} {} {}", ratings.n_rows(), ratings.n_cols(), ratings.nnz())?;
    for t in ratings.triplets() {
        writeln!(w, "{} {} {}", t.row, t.col, t.value)?;
    }
    Ok(())
}

pub fn read_matrix<R: BufRead>(reader: R) -> Result<SparseRatings> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let dims = header
        .strip_prefix(MATRIX_MAGIC)
        .map(|rest| rest.split_whitespace().map(str::parse::<usize>).collect::<std::result::Result<Vec<_>, _>>());
    let (m, n, nnz) = match dims {
        Some(Ok(d)) if d.len() == 3 => (d[0], d[1], d[2]),
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected `{MATRIX_MAGIC} M N NNZ`"),
            })
        }
    };
    let mut triplets = Vec::with_capacity(nnz);
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Parse {
            line: k + 2,
            message: format!("expected `row col value`, got {line:?}"),
        };
        let mut f = line.split_whitespace();
        let row = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let col = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let value = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        triplets.push(RatingTriplet::new(row, col, value));
    }
    if triplets.len() != nnz {
        return Err(Error::Parse {
            line: 1,
            message: format!("header declares {nnz} entries, found {}", triplets.len()),
        });
    }
    build_indices(triplets, m, n)
}

/// True if the first line carries the matrix header.
pub fn is_matrix_header(first_line: &str) -> bool {
    first_line.starts_with(MATRIX_MAGIC)
}
