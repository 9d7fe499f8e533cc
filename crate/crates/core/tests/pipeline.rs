use std::io::BufReader;

use lshmf::data::{parse_ratings, read_matrix, split_holdout, write_matrix, Delimiter};
use lshmf::factorization::{read_checkpoint, rmse, train_full, write_checkpoint, EvalOptions, Preset, TrainConfig};
use lshmf::lsh::{simlsh_topk, LshConfig};
use lshmf::parallel::parallel_train;
use lshmf::similarity::{gsm_topk, mean_overlap, SimilarityConfig};
use lshmf::synthetic::{identical_column_groups, LowRank};

#[test]
fn identical_columns_land_in_each_others_top_k() {
    let (ratings, labels) = identical_column_groups(80, 60, 6, 0.3, 2).unwrap();
    let k = 9;
    let (nb, _) = simlsh_topk(&ratings, &LshConfig { q: 20, ..LshConfig::default() }, k).unwrap();
    for j in 0..ratings.n_cols() {
        let mut got: Vec<u32> = nb.row(j).to_vec();
        got.sort_unstable();
        let want: Vec<u32> = (0..ratings.n_cols()).filter(|&x| x != j && labels[x] == labels[j]).map(|x| x as u32).collect();
        assert_eq!(got, want, "column {j}");
    }
}

#[test]
fn text_to_trained_model_and_back() {
    let text: String = (0..30)
        .flat_map(|u| (0..25).filter(move |i| (u * 5 + i * 3) % 3 != 0).map(move |i| format!("{u}\t{i}\t{}\t0\n", 1 + (u * i) % 5)))
        .collect();
    let ratings = parse_ratings(BufReader::new(text.as_bytes()), Delimiter::Tab).unwrap().into_ratings().unwrap();
    let mut bytes = Vec::new();
    write_matrix(&mut bytes, &ratings).unwrap();
    let again = read_matrix(BufReader::new(bytes.as_slice())).unwrap();
    assert_eq!(again.triplets(), ratings.triplets());

    let (train, test) = split_holdout(&ratings, 0.1, 1).unwrap();
    let cfg = TrainConfig { rank: 4, k: 5, epochs: 10, ..TrainConfig::full(Preset::MovieLens) };
    let nb = gsm_topk(&train, &SimilarityConfig { lambda_rho: 100.0, k: 5 }).unwrap();
    let params = train_full(&train, &nb, &cfg).unwrap();
    let mut ckpt = Vec::new();
    write_checkpoint(&params, &mut ckpt).unwrap();
    let loaded = read_checkpoint(BufReader::new(ckpt.as_slice())).unwrap();
    assert_eq!(loaded, params);
    let opts = EvalOptions::default();
    assert_eq!(rmse(&loaded, &test, &train, &opts).unwrap(), rmse(&params, &test, &train, &opts).unwrap());
}

#[test]
fn low_rank_data_is_learned_by_serial_and_blocked_training() {
    let ratings = LowRank { n_rows: 150, n_cols: 120, rank: 3, density: 0.3, factor_range: (0.0, 1.2), noise: 0.05, seed: 4 }.generate().unwrap();
    let (train, test) = split_holdout(&ratings, 0.1, 0).unwrap();
    let (nb, _) = simlsh_topk(&train, &LshConfig { q: 30, ..LshConfig::default() }, 8).unwrap();
    let exact = gsm_topk(&train, &SimilarityConfig { lambda_rho: 100.0, k: 8 }).unwrap();
    assert!(mean_overlap(&nb, &exact) > 0.0);

    let cfg = TrainConfig { rank: 3, k: 8, epochs: 40, ..TrainConfig::full(Preset::MovieLens) };
    let opts = EvalOptions::default();
    let mean = train.triplets().iter().map(|t| t.value).sum::<f64>() / train.nnz() as f64;
    let trivial = (test.iter().map(|t| (t.value - mean).powi(2)).sum::<f64>() / test.len() as f64).sqrt();
    let serial = rmse(&train_full(&train, &nb, &cfg).unwrap(), &test, &train, &opts).unwrap();
    let blocked = rmse(&parallel_train(&train, &nb, &cfg, 3).unwrap(), &test, &train, &opts).unwrap();
    assert!(serial < 0.8 * trivial, "serial {serial} vs mean predictor {trivial}");
    assert!(blocked < 0.8 * trivial, "blocked {blocked} vs mean predictor {trivial}");
}
