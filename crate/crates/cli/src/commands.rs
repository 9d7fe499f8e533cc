use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use lshmf::data::{
    build_indices, is_matrix_header, parse_ratings, parse_ratings_with, read_matrix, split_holdout, transform_ratings, write_matrix,
    ParsedRatings, RatingTriplet, SparseRatings, UnknownIds,
};
use lshmf::factorization::{
    read_checkpoint, rmse, rmse_cold, train_basic_with, train_full_with, write_checkpoint, EpochInfo, ModelParams,
};
use lshmf::lsh::minhash::minhash_topk;
use lshmf::lsh::rpcos::rpcos_topk;
use lshmf::lsh::{assign_row_hashes, simlsh_aux_bytes, topk_from_state, HashState};
use lshmf::online::{IncrementBatch, OnlineModel};
use lshmf::parallel::{hogwild_train_basic, parallel_train_with, ParallelOptions};
use lshmf::similarity::{mean_overlap, random_topk, NeighborTable, SimilarityMatrix};
use lshmf::synthetic::uniform_sparse;

use crate::config::{ModelKind, Provider, RunConfig};

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn is_matrix_file(path: &Path) -> Result<bool> {
    let mut first = String::new();
    open(path)?.read_line(&mut first)?;
    Ok(is_matrix_header(&first))
}

fn parse_raw(cfg: &RunConfig, path: &Path, ids: Option<(lshmf::data::IdMaps, UnknownIds)>) -> Result<ParsedRatings> {
    let reader = open(path)?;
    let mut parsed = match ids {
        None => parse_ratings(reader, cfg.delimiter),
        Some((ids, unknown)) => parse_ratings_with(reader, cfg.delimiter, ids, unknown),
    }
    .with_context(|| format!("parsing {}", path.display()))?;
    parsed.triplets = transform_ratings(std::mem::take(&mut parsed.triplets), cfg.zero_floor, cfg.scale)?;
    Ok(parsed)
}

/// A serialized matrix or a ratings text file.
fn load_ratings(cfg: &RunConfig, path: &Path) -> Result<SparseRatings> {
    if is_matrix_file(path)? {
        Ok(read_matrix(open(path)?)?)
    } else {
        Ok(parse_raw(cfg, path, None)?.into_ratings()?)
    }
}

/// Test entries in the index space of `train`. Text files are mapped
/// through `train`'s ids; unknown ids are dropped.
fn load_test(cfg: &RunConfig, path: &Path, train: &SparseRatings) -> Result<Vec<RatingTriplet>> {
    if is_matrix_file(path)? {
        let test = read_matrix(open(path)?)?;
        ensure!(
            test.n_rows() <= train.n_rows() && test.n_cols() <= train.n_cols(),
            "test matrix is larger than the training matrix"
        );
        return Ok(test.triplets().to_vec());
    }
    ensure!(!train.ids().rows.is_empty(), "a text test file needs a text training file to map its ids");
    let parsed = parse_raw(cfg, path, Some((train.ids().clone(), UnknownIds::Skip)))?;
    if parsed.skipped > 0 {
        eprintln!("skipped {} test ratings with unknown ids", parsed.skipped);
    }
    Ok(parsed.triplets)
}

pub fn neighbors(cfg: &RunConfig, provider: Provider, ratings: &SparseRatings) -> Result<NeighborTable> {
    let (k, seed) = (cfg.k, cfg.seed);
    Ok(match provider {
        Provider::Gsm => lshmf::similarity::gsm_topk(ratings, &cfg.similarity_config())?,
        Provider::SimLsh => lshmf::lsh::simlsh_topk(ratings, &cfg.lsh_config(), k)?.0,
        Provider::MinHash => minhash_topk(ratings, cfg.minhash_hashes, cfg.minhash_bands, k, seed)?,
        Provider::RpCos => rpcos_topk(ratings, cfg.rpcos_planes, cfg.lsh.p, cfg.lsh.q, k, seed)?,
        Provider::Random => random_topk(ratings.n_cols(), k, seed)?,
    })
}

pub fn ingest(cfg: &RunConfig, input: &Path, output: &Path, ids_output: Option<&Path>) -> Result<()> {
    let ratings = parse_raw(cfg, input, None)?.into_ratings()?;
    let mut w = create(output)?;
    write_matrix(&mut w, &ratings)?;
    w.flush()?;
    if let Some(path) = ids_output {
        let mut w = create(path)?;
        writeln!(w, "kind,index,id")?;
        for (kind, map) in [("row", &ratings.ids().rows), ("col", &ratings.ids().cols)] {
            for idx in 0..map.len() {
                writeln!(w, "{kind},{idx},{}", map.original(idx).unwrap_or_default())?;
            }
        }
        w.flush()?;
    }
    eprintln!("{} rows, {} columns, {} ratings", ratings.n_rows(), ratings.n_cols(), ratings.nnz());
    Ok(())
}

pub fn split(cfg: &RunConfig, input: &Path, train_out: &Path, test_out: &Path) -> Result<()> {
    let ratings = load_ratings(cfg, input)?;
    let (train, test) = split_holdout(&ratings, cfg.test_fraction, cfg.seed)?;
    let test = build_indices(test, train.n_rows(), train.n_cols())?;
    for (path, m) in [(train_out, &train), (test_out, &test)] {
        let mut w = create(path)?;
        write_matrix(&mut w, m)?;
        w.flush()?;
    }
    eprintln!("{} training and {} test ratings", train.nnz(), test.nnz());
    Ok(())
}

pub fn topk(cfg: &RunConfig, input: &Path, output: &Path, compare: Option<&str>, compare_output: Option<&Path>) -> Result<()> {
    let ratings = load_ratings(cfg, input)?;
    let table = neighbors(cfg, cfg.provider, &ratings)?;
    let mut w = create(output)?;
    table.write_csv(&mut w)?;
    w.flush()?;
    if let Some(other) = compare {
        let other = neighbors(cfg, other.parse()?, &ratings)?;
        if let Some(path) = compare_output {
            let mut w = create(path)?;
            other.write_csv(&mut w)?;
            w.flush()?;
        }
        println!("overlap,{:.6}", mean_overlap(&table, &other));
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn train(
    cfg: &RunConfig,
    input: &Path,
    test: Option<&Path>,
    metrics: &Path,
    checkpoint: Option<&Path>,
    hash_state: Option<&Path>,
) -> Result<()> {
    let ratings = load_ratings(cfg, input)?;
    let test = test.map(|p| load_test(cfg, p, &ratings)).transpose()?;
    let tcfg = cfg.train_config();
    let opts = cfg.eval_options();
    let mut w = create(metrics)?;
    writeln!(w, "epoch,wall_seconds_cumulative,train_rmse,test_rmse")?;
    let evaluate = |p: &ModelParams| -> Result<(f64, Option<f64>)> {
        let tr = rmse(p, ratings.triplets(), &ratings, &opts)?;
        let te = match &test {
            Some(t) if !t.is_empty() => Some(rmse(p, t, &ratings, &opts)?),
            _ => None,
        };
        Ok((tr, te))
    };
    let mut rows = Vec::new();
    let mut on_epoch = |info: EpochInfo, p: &ModelParams| -> lshmf::Result<()> {
        let (tr, te) = evaluate(p).map_err(|e| lshmf::Error::InvalidConfig(e.to_string()))?;
        rows.push(format!("{},{:.6},{:.6},{}", info.epoch, info.elapsed_seconds, tr, fmt_opt(te)));
        Ok(())
    };

    let start = Instant::now();
    let mut stages = Vec::new();
    let params = match cfg.model {
        ModelKind::Basic if cfg.racy => hogwild_train_basic(&ratings, &tcfg, cfg.workers)?,
        ModelKind::Basic if cfg.workers > 1 => bail!("the basic model runs on several workers only with --racy"),
        ModelKind::Basic => train_basic_with(&ratings, &tcfg, &mut on_epoch)?,
        ModelKind::Full if cfg.racy => bail!("--racy applies to the basic model only"),
        ModelKind::Full => {
            let nb = if tcfg.k == 0 { NeighborTable::empty(ratings.n_cols()) } else { neighbors(cfg, cfg.provider, &ratings)? };
            if cfg.workers == 1 {
                train_full_with(&ratings, &nb, &tcfg, &mut on_epoch)?
            } else {
                let (p, report) = parallel_train_with(&ratings, &nb, &tcfg, cfg.workers, ParallelOptions::default(), &mut on_epoch)?;
                stages = report.stages;
                p
            }
        }
    };
    let total = start.elapsed().as_secs_f64();
    for row in rows {
        writeln!(w, "{row}")?;
    }
    let (tr, te) = evaluate(&params)?;
    writeln!(w, "summary,{total:.6},{tr:.6},{}", fmt_opt(te))?;
    for s in &stages {
        writeln!(w, "stage,{},{},{:.6}", s.epoch, s.stage, s.seconds)?;
    }
    w.flush()?;
    eprintln!("train RMSE {tr:.5}{}", te.map(|t| format!(", test RMSE {t:.5}")).unwrap_or_default());

    if let Some(path) = checkpoint {
        let mut w = create(path)?;
        write_checkpoint(&params, &mut w)?;
        w.flush()?;
    }
    if let Some(path) = hash_state {
        let lcfg = cfg.lsh_config();
        let state = HashState::compute(&ratings, &assign_row_hashes(ratings.n_rows(), &lcfg)?, &lcfg)?;
        let mut w = create(path)?;
        state.write_checkpoint(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, model: &Path, input: &Path, test: &Path) -> Result<()> {
    let params = read_checkpoint(open(model)?)?;
    let ratings = load_ratings(cfg, input)?;
    let test = load_test(cfg, test, &ratings)?;
    println!("rmse,{:.6}", rmse(&params, &test, &ratings, &cfg.eval_options())?);
    Ok(())
}

pub fn online_update(
    cfg: &RunConfig,
    model: &Path,
    base: &Path,
    increment: &Path,
    test: &Path,
    hash_state: Option<&Path>,
    checkpoint_out: Option<&Path>,
) -> Result<()> {
    let params = read_checkpoint(open(model)?)?;
    ensure!(!is_matrix_file(base)?, "online updates need ratings text files to match ids");
    let base = parse_raw(cfg, base, None)?.into_ratings()?;
    let (m, n) = (base.n_rows(), base.n_cols());
    ensure!(params.n_rows() == m && params.n_cols() == n, "model is {}x{}, base ratings are {m}x{n}", params.n_rows(), params.n_cols());

    let inc = parse_raw(cfg, increment, Some((base.ids().clone(), UnknownIds::Extend)))?;
    let (m1, n1) = (inc.n_rows(), inc.n_cols());
    let (fresh, old): (Vec<_>, Vec<_>) = inc.triplets.iter().partition(|t| t.row >= m || t.col >= n);
    if !old.is_empty() {
        eprintln!("ignored {} increment ratings between existing rows and columns", old.len());
    }
    let batch = IncrementBatch::new(m, n, m1 - m, n1 - n, fresh)?;
    let test = parse_raw(cfg, test, Some((inc.ids.clone(), UnknownIds::Skip)))?.triplets;

    let state = match hash_state {
        Some(path) => HashState::read_checkpoint(open(path)?)?,
        None => {
            let lcfg = cfg.lsh_config();
            HashState::compute(&base, &assign_row_hashes(m, &lcfg)?, &lcfg)?
        }
    };
    let hashes = assign_row_hashes(m, state.config())?;
    let opts = cfg.eval_options();
    let before = rmse_cold(&params, &test, &base, &opts)?;

    let mut tcfg = cfg.train_config();
    tcfg.rank = params.rank();
    tcfg.k = params.k();
    let mut online = OnlineModel { params, ratings: base, state, hashes };
    online.absorb(&batch, &tcfg)?;
    let after = rmse(&online.params, &test, &online.ratings, &opts)?;
    println!("rmse_before,rmse_after,delta");
    println!("{before:.6},{after:.6},{:.6}", after - before);

    if let Some(path) = checkpoint_out {
        let mut w = create(path)?;
        write_checkpoint(&online.params, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn parse_synthetic(spec: &str) -> Result<(usize, usize, f64)> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let [m, n, d] = parts[..] else {
        bail!("--synthetic expects ROWS,COLS,DENSITY");
    };
    Ok((m.parse()?, n.parse()?, d.parse()?))
}

pub fn bench_topk(cfg: &RunConfig, input: Option<&Path>, synthetic: Option<&str>, providers: &str, output: Option<&Path>) -> Result<()> {
    let ratings = match (input, synthetic) {
        (Some(path), _) => load_ratings(cfg, path)?,
        (None, Some(spec)) => {
            let (m, n, d) = parse_synthetic(spec)?;
            uniform_sparse(m, n, d, cfg.seed)?
        }
        (None, None) => bail!("give --input or --synthetic"),
    };
    let providers = providers.split(',').map(|p| p.trim().parse()).collect::<Result<Vec<Provider>>>()?;
    let (m, n, k) = (ratings.n_rows(), ratings.n_cols(), cfg.k);
    let mut lines = vec!["provider,seconds,aux_bytes,state_bytes".to_string()];
    for provider in providers {
        let start = Instant::now();
        let secs = || start.elapsed().as_secs_f64();
        // bucket indices hold an order and a bucket id per column and group
        let index_bytes = |groups: usize| groups * n * 8;
        let (seconds, aux, state_bytes) = match provider {
            Provider::Gsm => {
                let gsm = SimilarityMatrix::build(&ratings, cfg.lambda_rho);
                gsm.top_k(k)?;
                (secs(), gsm.memory_bytes(), 0)
            }
            Provider::SimLsh => {
                let lcfg = cfg.lsh_config();
                let hashes = assign_row_hashes(m, &lcfg)?;
                let state = HashState::compute(&ratings, &hashes, &lcfg)?;
                topk_from_state(&state, k)?;
                (secs(), simlsh_aux_bytes(&hashes, &state), state.accumulator_bytes())
            }
            Provider::MinHash => {
                minhash_topk(&ratings, cfg.minhash_hashes, cfg.minhash_bands, k, cfg.seed)?;
                (secs(), n * cfg.minhash_hashes * 8 + index_bytes(cfg.minhash_bands), 0)
            }
            Provider::RpCos => {
                let (p, q, planes) = (cfg.lsh.p, cfg.lsh.q, cfg.rpcos_planes);
                rpcos_topk(&ratings, planes, p, q, k, cfg.seed)?;
                // planes of one group at a time, keys of all groups
                let words = (p * planes).div_ceil(64);
                (secs(), p * planes * m * 8 + q * n * words * 8 + index_bytes(q), 0)
            }
            Provider::Random => {
                random_topk(n, k, cfg.seed)?;
                (secs(), 0, 0)
            }
        };
        lines.push(format!("{provider},{seconds:.6},{aux},{state_bytes}"));
    }
    let text = lines.join("\n") + "\n";
    match output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
