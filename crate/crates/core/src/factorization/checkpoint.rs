use std::io::{BufRead, Write};

use super::ModelParams;
use crate::error::{Error, Result};
use crate::similarity::NeighborTable;

const MAGIC: &str = "LSHMF-M v1";

/// `LSHMF-M v1 M N F K\n`, then `μ, b, b̂, U, V, W, C` as little-endian
/// `f64`, `J^K` as little-endian `u32`, then the residual reference `b, b̂`.
pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    writeln!(w, "{MAGIC} {} {} {} {}", params.n_rows(), params.n_cols(), params.rank(), params.k())?;
    let mut put = |xs: &[f64]| -> std::io::Result<()> {
        for x in xs {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    };
    put(&[params.mu])?;
    for block in [&params.b, &params.b_hat, &params.u, &params.v, &params.w, &params.c] {
        put(block)?;
    }
    for &x in params.neighbors.entries() {
        w.write_all(&x.to_le_bytes())?;
    }
    for block in [&params.ref_b, &params.ref_b_hat] {
        for x in block.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<ModelParams> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let dims: Vec<usize> = header
        .trim_end()
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Checkpoint(format!("expected `{MAGIC}` header")))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad header field {s:?}"))))
        .collect::<Result<_>>()?;
    let [m, n, f, k] = dims[..] else {
        return Err(Error::Checkpoint("expected `M N F K`".into()));
    };
    let mu = read_reals(&mut r, 1, "mu")?[0];
    let b = read_reals(&mut r, m, "b")?;
    let b_hat = read_reals(&mut r, n, "b_hat")?;
    let u = read_reals(&mut r, m * f, "U")?;
    let v = read_reals(&mut r, n * f, "V")?;
    let wv = read_reals(&mut r, n * k, "W")?;
    let c = read_reals(&mut r, n * k, "C")?;
    let mut entries = Vec::with_capacity(n * k);
    let mut buf = [0u8; 4];
    for _ in 0..n * k {
        r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated neighbor table".into()))?;
        entries.push(u32::from_le_bytes(buf));
    }
    let ref_b = read_reals(&mut r, m, "reference b")?;
    let ref_b_hat = read_reals(&mut r, n, "reference b_hat")?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after model data".into()));
    }
    let neighbors = if k == 0 { NeighborTable::empty(n) } else { NeighborTable::new(n, k, entries)? };
    ModelParams::from_parts(mu, b, b_hat, u, v, wv, c, neighbors, ref_b, ref_b_hat, f)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

fn read_reals<R: BufRead>(r: &mut R, len: usize, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated {what} data")))?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}
