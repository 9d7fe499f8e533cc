//! simLSH for sparse columns and its coarse/fine amplification.
//!
//! Every row `i` draws a random `G`-bit string `H_i` per map. A column's
//! signature sets bit `g` when `Σ_{i∈Ω̂_j} Ψ(r_{i,j})·Φ(H_{i,g}) ≥ 0`, with
//! `Φ(0) = −1`, `Φ(1) = +1` and `Ψ(r) = r^e`. Bit `g` of a string is its
//! `g`-th character read left to right, stored at bit position `g` of a
//! `u64`.
//!
//! `p` maps form a coarse group: columns are candidates of each other when
//! all `p` signatures agree (AND). The `q` groups are combined by counting
//! how often each candidate shows up (OR), and the `K` most frequent become
//! the neighbors, topped up at random when fewer than `K` exist.

mod buckets;
pub mod minhash;
pub mod rpcos;

use std::io::{BufRead, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{RatingTriplet, SparseRatings};
use crate::error::{invalid, Error, Result};
use crate::similarity::{check_k, NeighborTable};

pub use buckets::{coarse_candidates, fine_topk, CoarseBuckets};
pub(crate) use buckets::topk_rows;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LshConfig {
    /// Bits per signature, `G`.
    pub g_bits: usize,
    /// simLSH maps per coarse group.
    pub p: usize,
    /// Coarse groups.
    pub q: usize,
    /// `e` in `Ψ(r) = r^e`.
    pub psi_exponent: u32,
    pub seed: u64,
}

impl Default for LshConfig {
    fn default() -> Self {
        LshConfig {
            g_bits: 8,
            p: 3,
            q: 100,
            psi_exponent: 2,
            seed: 0,
        }
    }
}

impl LshConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=64).contains(&self.g_bits) {
            return Err(invalid(format!("G must be in 1..=64, got {}", self.g_bits)));
        }
        if self.p == 0 || self.q == 0 {
            return Err(invalid("p and q must be at least 1"));
        }
        if ![1, 2, 4].contains(&self.psi_exponent) {
            return Err(invalid(format!("psi exponent must be 1, 2 or 4, got {}", self.psi_exponent)));
        }
        Ok(())
    }

    pub fn maps(&self) -> usize {
        self.p * self.q
    }

    /// 64-bit words in a coarse bucket key (`p` concatenated signatures).
    pub fn key_words(&self) -> usize {
        (self.p * self.g_bits).div_ceil(64)
    }
}

#[inline]
pub fn psi(r: f64, exponent: u32) -> f64 {
    match exponent {
        1 => r,
        2 => r * r,
        e => r.powi(e as i32),
    }
}

pub(crate) fn bit_mask(g_bits: usize) -> u64 {
    if g_bits == 64 {
        u64::MAX
    } else {
        (1u64 << g_bits) - 1
    }
}

/// Random `G`-bit row strings `H_i`, one `M`-vector per `(group, map)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowHashes {
    n_rows: usize,
    g_bits: usize,
    p: usize,
    maps: Vec<Vec<u64>>,
}

fn map_stream(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// Draws `p·q` independent `M × G` bit matrices. Row `i` of map `(g, m)`
/// depends only on `(seed, g, m, i)`, so a longer draw extends a shorter one.
pub fn assign_row_hashes(n_rows: usize, config: &LshConfig) -> Result<RowHashes> {
    config.validate()?;
    let mask = bit_mask(config.g_bits);
    let maps = (0..config.maps())
        .map(|t| {
            let mut rng = map_stream(config.seed, t);
            (0..n_rows).map(|_| rng.next_u64() & mask).collect()
        })
        .collect();
    Ok(RowHashes {
        n_rows,
        g_bits: config.g_bits,
        p: config.p,
        maps,
    })
}

impl RowHashes {
    /// Hand-specified hashes; `maps[g·p + m]` holds one `G`-bit string per row.
    pub fn from_maps(g_bits: usize, p: usize, maps: Vec<Vec<u64>>) -> Result<Self> {
        let n_rows = maps.first().map_or(0, Vec::len);
        if g_bits == 0 || g_bits > 64 || p == 0 || maps.len() % p != 0 {
            return Err(invalid("maps must come in whole groups of p with 1..=64 bits"));
        }
        if maps.iter().any(|m| m.len() != n_rows || m.iter().any(|&h| h & !bit_mask(g_bits) != 0)) {
            return Err(invalid("every map needs one G-bit string per row"));
        }
        Ok(RowHashes { n_rows, g_bits, p, maps })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn map(&self, group: usize, m: usize) -> &[u64] {
        &self.maps[group * self.p + m]
    }

    pub fn memory_bytes(&self) -> usize {
        self.maps.len() * self.n_rows * std::mem::size_of::<u64>()
    }
}

/// Adds `Ψ(r)·Φ(H_i)` for every `(i, r)` into `acc` (length `G`).
#[inline]
pub(crate) fn accumulate(rows: &[u32], vals: &[f64], hashes: &[u64], psi_exponent: u32, acc: &mut [f64]) {
    for (&i, &r) in rows.iter().zip(vals) {
        let w = psi(r, psi_exponent);
        let w_bits = w.to_bits();
        // clear bit g flips the sign of w
        let flip = !hashes[i as usize];
        for (g, a) in acc.iter_mut().enumerate() {
            *a += f64::from_bits(w_bits ^ (((flip >> g) & 1) << 63));
        }
    }
}

/// `Υ`: nonnegative → 1, negative → 0.
#[inline]
pub(crate) fn threshold(acc: &[f64]) -> u64 {
    acc.iter()
        .enumerate()
        .fold(0u64, |sig, (g, &a)| if a >= 0.0 { sig | (1 << g) } else { sig })
}

/// Accumulators and signature of column `j` under one row-hash map.
pub fn simlsh_signature(
    ratings: &SparseRatings,
    j: usize,
    hashes: &[u64],
    g_bits: usize,
    psi_exponent: u32,
) -> (Vec<f64>, u64) {
    let (rows, vals) = ratings.col(j);
    let mut acc = vec![0.0; g_bits];
    accumulate(rows, vals, hashes, psi_exponent, &mut acc);
    let sig = threshold(&acc);
    (acc, sig)
}

/// Parses a `{0,1}` string into signature bits (first character → bit 0).
pub fn bits_from_str(s: &str) -> u64 {
    s.bytes().enumerate().fold(0, |acc, (g, c)| if c == b'1' { acc | (1 << g) } else { acc })
}

pub fn bits_to_string(bits: u64, g_bits: usize) -> String {
    (0..g_bits).map(|g| if (bits >> g) & 1 == 1 { '1' } else { '0' }).collect()
}

/// Persistent simLSH state: signed accumulators for every `(g, m, j, bit)`
/// and the thresholded signatures, packed per `(g, j)` as bucket keys.
#[derive(Clone, Debug, PartialEq)]
pub struct HashState {
    pub(crate) config: LshConfig,
    pub(crate) n_cols: usize,
    /// `(g, m, j, bit)` order.
    pub(crate) accumulators: Vec<f64>,
    /// `(g, j, word)` order; map `m` occupies bits `m·G..(m+1)·G` of the key.
    pub(crate) keys: Vec<u64>,
}

impl HashState {
    fn zeroed(config: LshConfig, n_cols: usize) -> Self {
        HashState {
            config,
            n_cols,
            accumulators: vec![0.0; config.maps() * n_cols * config.g_bits],
            keys: vec![0; config.q * n_cols * config.key_words()],
        }
    }

    /// Computes the state of every column from scratch.
    pub fn compute(ratings: &SparseRatings, hashes: &RowHashes, config: &LshConfig) -> Result<Self> {
        config.validate()?;
        if hashes.n_rows() < ratings.n_rows() || hashes.g_bits != config.g_bits || hashes.maps.len() != config.maps() {
            return Err(invalid("row hashes do not match the matrix or configuration"));
        }
        let n = ratings.n_cols();
        let g_bits = config.g_bits;
        let mut state = HashState::zeroed(*config, n);
        state
            .accumulators
            .par_chunks_mut(n * g_bits)
            .enumerate()
            .for_each(|(t, block)| {
                let h = &hashes.maps[t];
                for (j, acc) in block.chunks_mut(g_bits).enumerate() {
                    let (rows, vals) = ratings.col(j);
                    accumulate(rows, vals, h, config.psi_exponent, acc);
                }
            });
        state.rethreshold_all();
        Ok(state)
    }

    pub fn config(&self) -> &LshConfig {
        &self.config
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    fn acc_offset(&self, group: usize, m: usize, j: usize) -> usize {
        ((group * self.config.p + m) * self.n_cols + j) * self.config.g_bits
    }

    pub fn accumulator(&self, group: usize, m: usize, j: usize) -> &[f64] {
        let a = self.acc_offset(group, m, j);
        &self.accumulators[a..a + self.config.g_bits]
    }

    pub fn signature(&self, group: usize, m: usize, j: usize) -> u64 {
        let g_bits = self.config.g_bits;
        let words = self.config.key_words();
        let key = &self.keys[(group * self.n_cols + j) * words..][..words];
        extract_bits(key, m * g_bits, g_bits)
    }

    /// Packed keys of one group, `N × key_words` words.
    pub fn group_keys(&self, group: usize) -> &[u64] {
        let w = self.n_cols * self.config.key_words();
        &self.keys[group * w..(group + 1) * w]
    }

    /// Re-derives the key of column `j` in every group from its accumulators.
    pub(crate) fn rethreshold(&mut self, j: usize) {
        let (p, g_bits, words) = (self.config.p, self.config.g_bits, self.config.key_words());
        for group in 0..self.config.q {
            let mut key = vec![0u64; words];
            for m in 0..p {
                let sig = threshold(self.accumulator(group, m, j));
                insert_bits(&mut key, m * g_bits, g_bits, sig);
            }
            let at = (group * self.n_cols + j) * words;
            self.keys[at..at + words].copy_from_slice(&key);
        }
    }

    fn rethreshold_all(&mut self) {
        let cfg = self.config;
        let (n, g_bits, words) = (self.n_cols, cfg.g_bits, cfg.key_words());
        let acc = &self.accumulators;
        self.keys
            .par_chunks_mut(n * words)
            .enumerate()
            .for_each(|(group, keys)| {
                for (j, key) in keys.chunks_mut(words).enumerate() {
                    key.fill(0);
                    for m in 0..cfg.p {
                        let a = ((group * cfg.p + m) * n + j) * g_bits;
                        insert_bits(key, m * g_bits, g_bits, threshold(&acc[a..a + g_bits]));
                    }
                }
            });
    }

    /// Grows the column space to `new_n_cols`; new columns start at zero.
    pub(crate) fn grow(&mut self, new_n_cols: usize) {
        if new_n_cols == self.n_cols {
            return;
        }
        let mut grown = HashState::zeroed(self.config, new_n_cols);
        let g_bits = self.config.g_bits;
        for t in 0..self.config.maps() {
            let old = &self.accumulators[t * self.n_cols * g_bits..(t + 1) * self.n_cols * g_bits];
            grown.accumulators[t * new_n_cols * g_bits..][..old.len()].copy_from_slice(old);
        }
        grown.rethreshold_all();
        *self = grown;
    }

    /// Adds `Ψ(r)Φ(H_i)` for every entry of `col_major` (sorted by column,
    /// then row) and re-thresholds the touched columns. Entries are added in
    /// the order a full recomputation would visit them.
    pub(crate) fn add_ratings(&mut self, col_major: &[RatingTriplet], hashes: &RowHashes) -> Result<()> {
        if hashes.g_bits != self.config.g_bits || hashes.maps.len() != self.config.maps() {
            return Err(invalid("row hashes do not match the hash state configuration"));
        }
        if let Some(t) = col_major.iter().find(|t| t.row >= hashes.n_rows() || t.col >= self.n_cols) {
            return Err(invalid(format!("entry ({}, {}) lies outside the hashed rows or columns", t.row, t.col)));
        }
        let (n, g_bits, e) = (self.n_cols, self.config.g_bits, self.config.psi_exponent);
        self.accumulators
            .par_chunks_mut(n * g_bits)
            .enumerate()
            .for_each(|(t, block)| {
                let h = &hashes.maps[t];
                for x in col_major {
                    let acc = &mut block[x.col * g_bits..(x.col + 1) * g_bits];
                    accumulate(&[x.row as u32], &[x.value], h, e, acc);
                }
            });
        let mut touched: Vec<usize> = col_major.iter().map(|t| t.col).collect();
        touched.dedup();
        for j in touched {
            self.rethreshold(j);
        }
        Ok(())
    }

    /// Bucket-key (signature) storage in bytes.
    pub fn signature_bytes(&self) -> usize {
        self.keys.len() * std::mem::size_of::<u64>()
    }

    /// Accumulator storage in bytes; only needed for incremental updates.
    pub fn accumulator_bytes(&self) -> usize {
        self.accumulators.len() * std::mem::size_of::<f64>()
    }

    /// Writes `LSHMF-H v1 N G p q e seed\n` then the accumulators as
    /// little-endian `f64` in `(g, m, j, bit)` order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        writeln!(w, "{HASH_MAGIC} {} {} {} {} {} {}", self.n_cols, c.g_bits, c.p, c.q, c.psi_exponent, c.seed)?;
        for a in &self.accumulators {
            w.write_all(&a.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let fields: Vec<u64> = header
            .trim_end()
            .strip_prefix(HASH_MAGIC)
            .ok_or_else(|| Error::Checkpoint(format!("expected `{HASH_MAGIC}` header")))?
            .split_whitespace()
            .map(|s| s.parse::<u64>().map_err(|_| Error::Checkpoint(format!("bad header field {s:?}"))))
            .collect::<Result<_>>()?;
        let [n, g_bits, p, q, e, seed] = fields[..] else {
            return Err(Error::Checkpoint("expected `N G p q e seed`".into()));
        };
        let config = LshConfig {
            g_bits: g_bits as usize,
            p: p as usize,
            q: q as usize,
            psi_exponent: e as u32,
            seed,
        };
        config.validate()?;
        let mut state = HashState::zeroed(config, n as usize);
        let mut buf = [0u8; 8];
        for a in state.accumulators.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated accumulator data".into()))?;
            *a = f64::from_le_bytes(buf);
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after accumulators".into()));
        }
        state.rethreshold_all();
        Ok(state)
    }
}

const HASH_MAGIC: &str = "LSHMF-H v1";

pub(crate) fn extract_bits(key: &[u64], offset: usize, len: usize) -> u64 {
    let (w, b) = (offset / 64, offset % 64);
    let mut v = key[w] >> b;
    if b + len > 64 {
        v |= key[w + 1] << (64 - b);
    }
    v & bit_mask(len)
}

pub(crate) fn insert_bits(key: &mut [u64], offset: usize, len: usize, bits: u64) {
    let bits = bits & bit_mask(len);
    let (w, b) = (offset / 64, offset % 64);
    key[w] |= bits << b;
    if b + len > 64 {
        key[w + 1] |= bits >> (64 - b);
    }
}

/// Full simLSH Top-K: row hashes, all `p·q` signatures, coarse buckets per
/// group, then frequency ranking with random supplement.
pub fn simlsh_topk(ratings: &SparseRatings, config: &LshConfig, k: usize) -> Result<(NeighborTable, HashState)> {
    config.validate()?;
    check_k(k, ratings.n_cols())?;
    let hashes = assign_row_hashes(ratings.n_rows(), config)?;
    let state = HashState::compute(ratings, &hashes, config)?;
    let table = topk_from_state(&state, k)?;
    Ok((table, state))
}

/// Top-K for every column from the signatures in `state`.
pub fn topk_from_state(state: &HashState, k: usize) -> Result<NeighborTable> {
    let n = state.n_cols();
    check_k(k, n)?;
    let groups = group_buckets(state);
    let cols: Vec<usize> = (0..n).collect();
    let rows = topk_rows(&groups, k, n, state.config.seed, &cols);
    NeighborTable::new(n, k, rows.concat())
}

/// Bytes held while searching: row hashes, bucket keys and the bucket index
/// of every group. Accumulators are excluded; see
/// [`HashState::accumulator_bytes`].
pub fn simlsh_aux_bytes(hashes: &RowHashes, state: &HashState) -> usize {
    let index: usize = group_buckets(state).iter().map(CoarseBuckets::memory_bytes).sum();
    hashes.memory_bytes() + state.signature_bytes() + index
}

pub(crate) fn group_buckets(state: &HashState) -> Vec<CoarseBuckets<'_>> {
    let words = state.config.key_words();
    (0..state.config.q)
        .into_par_iter()
        .map(|g| CoarseBuckets::from_keys(state.group_keys(g).into(), words))
        .collect()
}
