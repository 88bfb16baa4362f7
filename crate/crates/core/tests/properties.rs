//! Property tests over random shapes and values.

use cmfusion::attention::AttentionLayer;
use cmfusion::data::{make_batches, DatasetSplit};
use cmfusion::layers::{BiLstm, LstmCell};
use cmfusion::metrics::weighted_f1;
use cmfusion::model::{CmRobertaModel, ModelConfig};
use cmfusion::synth::{synthesize, SyntheticSpec};
use cmfusion::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn reversed_rows(t: &Tensor) -> Tensor {
    let (r, _) = t.dims2().unwrap();
    let rows: Vec<&[f64]> = (0..r).rev().map(|i| t.row(i)).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn permuted_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = perm.iter().map(|&i| t.row(i)).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).expect("same shape")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in 1usize..6, cols in 1usize..9, seed: u64, shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, rows, cols, 20.0);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let s = g.softmax(xv, 1).unwrap();
        let shifted = g.input(x.map(|v| v + shift));
        let s2 = g.softmax(shifted, 1).unwrap();
        for r in 0..rows {
            let total: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "row {r} sums to {total}");
        }
        prop_assert!(max_diff(g.value(s), g.value(s2)) <= 1e-12);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_and_near_unit_variance(
        rows in 1usize..5, cols in 2usize..12, seed: u64, scale in 0.1f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, rows, cols, scale);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let gamma = g.input(Tensor::full(&[cols], 1.0));
        let beta = g.input(Tensor::zeros(&[cols]));
        let eps = 1e-5;
        let y = g.layer_norm(xv, gamma, beta, eps).unwrap();
        for r in 0..rows {
            let n = cols as f64;
            let xr = x.row(r);
            let mu_x = xr.iter().sum::<f64>() / n;
            let var_x = xr.iter().map(|v| (v - mu_x).powi(2)).sum::<f64>() / n;
            let yr = g.value(y).row(r);
            let mu = yr.iter().sum::<f64>() / n;
            let var = yr.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            prop_assert!(mu.abs() <= 1e-12, "mean {mu}");
            // population variance after normalising is var_x / (var_x + eps)
            prop_assert!((var - var_x / (var_x + eps)).abs() <= 1e-9, "variance {var}");
        }
    }

    #[test]
    fn matmul_shapes_follow_operands(m in 1usize..6, k in 1usize..6, n in 1usize..6, extra in 1usize..4) {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[m, k]));
        let b = g.input(Tensor::zeros(&[k, n]));
        let c = g.matmul(a, b).unwrap();
        prop_assert_eq!(g.shape(c), &[m, n]);
        let bad = g.input(Tensor::zeros(&[k + extra, n]));
        prop_assert!(g.matmul(a, bad).is_err());
    }

    #[test]
    fn self_attention_is_permutation_equivariant(t in 2usize..6, seed: u64, perm_seed: u64) {
        let dim = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, &mut rng, "att", dim, 6).unwrap();
        let x = random_matrix(&mut rng, t, dim, 1.0);
        let mut perm: Vec<usize> = (0..t).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..t).rev() {
            perm.swap(i, prng.random_range(0..=i));
        }
        let mask = vec![true; t];
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = layer.self_block(&mut g, &store, xv, &mask).unwrap();
        let xp = g.input(permuted_rows(&x, &perm));
        let yp = layer.self_block(&mut g, &store, xp, &mask).unwrap();
        prop_assert!(max_diff(g.value(yp), &permuted_rows(g.value(y), &perm)) <= 1e-12);
    }

    #[test]
    fn reverse_lstm_equals_forward_lstm_on_reversed_input(t in 1usize..7, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, &mut rng, "cell", 3, 4).unwrap();
        let x = random_matrix(&mut rng, t, 3, 1.5);
        let mask = vec![true; t];
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let back = cell.run(&mut g, &store, xv, &mask, true).unwrap();
        let xr = g.input(reversed_rows(&x));
        let fwd_on_rev = cell.run(&mut g, &store, xr, &mask, false).unwrap();
        prop_assert!(max_diff(g.value(back), &reversed_rows(g.value(fwd_on_rev))) <= 1e-15);
    }

    #[test]
    fn weighted_f1_matches_counting_oracle(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 0..80),
    ) {
        let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = weighted_f1(&preds, &labels, &names).unwrap();
        let total: usize = r.confusion.iter().flatten().sum();
        prop_assert_eq!(total, labels.len());
        let mut expected = 0.0;
        for c in 0..5 {
            let tp = preds.iter().zip(&labels).filter(|(p, y)| **p == c && **y == c).count() as f64;
            let fp = preds.iter().zip(&labels).filter(|(p, y)| **p == c && **y != c).count() as f64;
            let fn_ = preds.iter().zip(&labels).filter(|(p, y)| **p != c && **y == c).count() as f64;
            let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
            prop_assert!((r.per_class[c].f1 - f1).abs() <= 1e-12);
            expected += (tp + fn_) * f1;
        }
        if !labels.is_empty() {
            expected /= labels.len() as f64;
        }
        prop_assert!((r.weighted_f1 - expected).abs() <= 1e-12);
    }

    #[test]
    fn batching_conserves_utterances(n in 1usize..20, batch in 1usize..7, seed: u64) {
        let split: DatasetSplit = synthesize(&SyntheticSpec {
            n_dialogues: n,
            min_utterances: 1,
            max_utterances: 6,
            d_audio: 3,
            d_text: 2,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let batches = make_batches(&split, batch, seed).unwrap();
        prop_assert_eq!(batches.iter().map(|b| b.n_valid()).sum::<usize>(), split.n_utterances());
        prop_assert_eq!(batches.iter().map(|b| b.len()).sum::<usize>(), n);
        for b in &batches {
            let valid_labels = b.labels.iter().zip(&b.mask).filter(|(l, m)| **m && **l >= 0).count();
            prop_assert_eq!(valid_labels, b.n_valid());
            prop_assert!(b.labels.iter().zip(&b.mask).all(|(l, m)| *m || *l == -1));
        }
        prop_assert_eq!(batches, make_batches(&split, batch, seed).unwrap());
    }
}

#[test]
fn bilstm_with_mirrored_weights_is_time_reversal_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let bi = BiLstm::new(&mut store, &mut rng, "bi", 3, 4).unwrap();
    for (f, b) in [
        (bi.forward.w_ih, bi.backward.w_ih),
        (bi.forward.w_hh, bi.backward.w_hh),
        (bi.forward.bias, bi.backward.bias),
    ] {
        let v = store.value(f).clone();
        store.set_value(b, v).unwrap();
    }
    let x = random_matrix(&mut rng, 5, 3, 1.0);
    let mask = vec![true; 5];
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = bi.run(&mut g, &store, xv, &mask).unwrap();
    let xr = g.input(reversed_rows(&x));
    let yr = bi.run(&mut g, &store, xr, &mask).unwrap();
    // Reversing time swaps the two halves and reverses the rows.
    let y = g.value(y);
    let yr = reversed_rows(g.value(yr));
    for t in 0..5 {
        assert_eq!(&y.row(t)[..4], &yr.row(t)[4..]);
        assert_eq!(&y.row(t)[4..], &yr.row(t)[..4]);
    }
}

#[test]
fn padded_positions_do_not_change_real_logits() {
    let cfg = ModelConfig {
        d_audio_in: 6,
        d_text_in: 5,
        d_model: 8,
        n_classes: 4,
        audio_lld_dim: 3,
        seed: 17,
        ..ModelConfig::default()
    };
    let model = CmRobertaModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let audio = random_matrix(&mut rng, 3, 6, 1.0);
    let text = random_matrix(&mut rng, 3, 5, 1.0);
    let mut g = Graph::new();
    let plain = model.forward(&mut g, &audio, &text, &[true; 3]).unwrap();
    let plain = g.value(plain.logits).clone();
    for pad in [1, 4] {
        let junk_a = random_matrix(&mut rng, pad, 6, 50.0);
        let junk_t = random_matrix(&mut rng, pad, 5, 50.0);
        let cat = |a: &Tensor, b: &Tensor| {
            let rows: Vec<&[f64]> = (0..a.shape()[0]).map(|i| a.row(i)).chain((0..b.shape()[0]).map(|i| b.row(i))).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let mut mask = vec![true; 3];
        mask.extend(vec![false; pad]);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &cat(&audio, &junk_a), &cat(&text, &junk_t), &mask).unwrap();
        let logits = g.value(out.logits);
        for t in 0..3 {
            for (a, b) in logits.row(t).iter().zip(plain.row(t)) {
                assert!((a - b).abs() <= 1e-9, "pad {pad}, row {t}: {a} vs {b}");
            }
        }
    }
}
