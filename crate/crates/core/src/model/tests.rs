use super::*;
use crate::embed::ContextRole;
use crate::itr::{Step, TreePath};
use ndarray::array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(vocab: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        n_heads: 2,
        n_layers: layers,
        d_ff: 12,
        max_seq: 64,
        max_depth: 8,
    }
}

fn params(seed: u64, vocab: usize, layers: usize) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(cfg(vocab, layers), &mut rng).unwrap();
    // larger weights so attention is far from uniform
    for (_, mut t) in p.tensors_mut() {
        t.mapv_inplace(|x| x * 20.0);
    }
    p
}

fn enc(ids: &[u32]) -> EncodedTrace {
    let paths = [
        TreePath::root(),
        TreePath(vec![Step::L]),
        TreePath(vec![Step::L, Step::R]),
    ];
    EncodedTrace {
        ids: ids.to_vec(),
        paths: (0..ids.len()).map(|i| paths[i % 3].clone()).collect(),
        roles: (0..ids.len()).map(|i| ContextRole::ALL[i % 16]).collect(),
    }
}

#[test]
fn layer_norm_examples() {
    let one = Array1::ones(2);
    let zero = Array1::zeros(2);
    let y = layer_norm(array![1.0, 3.0].view(), &one, &zero).unwrap();
    // epsilon shifts the result by about 5e-6
    assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);
    let c = layer_norm(array![4.0, 4.0, 4.0].view(), &Array1::ones(3), &Array1::zeros(3)).unwrap();
    assert!(c.iter().all(|&x| x == 0.0));
    assert!(layer_norm(array![1.0].view(), &Array1::ones(1), &Array1::zeros(1)).is_err());
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let v = Array1::from_shape_simple_fn(16, || rng.random_range(-10.0..10.0));
        let y = layer_norm(v.view(), &Array1::ones(16), &Array1::zeros(16)).unwrap();
        let mean = y.sum() / 16.0;
        let sd = (y.mapv(|x| (x - mean).powi(2)).sum() / 16.0).sqrt();
        let var_in = {
            let m = v.sum() / 16.0;
            v.mapv(|x| (x - m).powi(2)).sum() / 16.0
        };
        assert!(mean.abs() < 1e-9);
        // exact value with the epsilon term, and the unit-variance claim
        assert!((sd - (var_in / (var_in + LN_EPS)).sqrt()).abs() < 1e-12);
        assert!((sd - 1.0).abs() < 1e-6, "var {var_in}");
    }
}

#[test]
fn single_token_attention_returns_value() {
    let p = params(1, 5, 1);
    let z = Array2::from_shape_fn((1, 8), |(_, j)| j as f64 * 0.1);
    let out = self_attention(&z, &AttentionMask::causal(1), &p.layers[0], 2).unwrap();
    let v = z.dot(&p.layers[0].wv);
    for (a, b) in out.iter().zip(v.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let p = params(2, 5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = normal_matrix(7, 8, 1.0, &mut rng);
    let blocks = [Block {
        start: 0,
        mask: build_causal_pack_mask(&[3, 4], 64).unwrap(),
    }];
    let mha = multi_head(&p.layers[0], &x, &blocks, 2);
    for pm in &mha.probs {
        for (i, row) in pm.rows().into_iter().enumerate() {
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
            for (j, &a) in row.iter().enumerate() {
                if !blocks[0].mask.allowed(i, j) {
                    assert_eq!(a, 0.0);
                }
            }
        }
    }
}

#[test]
fn masked_positions_do_not_contribute() {
    let p = params(4, 5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = normal_matrix(6, 8, 1.0, &mut rng);
    let mask = build_causal_pack_mask(&[2, 4], 64).unwrap();
    let base = self_attention(&x, &mask, &p.layers[0], 2).unwrap();
    for j in 0..6 {
        let mut y = x.clone();
        y.row_mut(j).mapv_inplace(|v| v + 3.0);
        let out = self_attention(&y, &mask, &p.layers[0], 2).unwrap();
        for i in 0..6 {
            if !mask.allowed(i, j) {
                for (a, b) in out.row(i).iter().zip(base.row(i).iter()) {
                    assert_eq!(a, b, "row {i} changed when perturbing {j}");
                }
            }
        }
    }
}

#[test]
fn feed_forward_hand_values() {
    let mut lp = params(6, 5, 1).layers[0].clone();
    lp.ff_c = Array2::zeros((8, 12));
    lp.ff_a = Array2::zeros((12, 8));
    lp.ff_d = Array1::zeros(12);
    lp.ff_b = Array1::zeros(8);
    assert!(feed_forward(Array1::ones(8).view(), &lp).iter().all(|&x| x == 0.0));

    let small = LayerParams {
        ff_c: Array2::eye(2),
        ff_d: Array1::zeros(2),
        ff_a: Array2::eye(2),
        ff_b: array![0.5, 0.0],
        ..lp
    };
    let y = feed_forward(array![0.1, -0.2].view(), &small);
    assert!((y[0] - 0.553_982_751_045_435_2).abs() < 1e-12);
    assert!((y[1] + 0.084_148_570_217_893_74).abs() < 1e-12);
}

#[test]
fn zero_ff_layer_reduces_to_norm_of_residual() {
    let mut p = params(7, 5, 1);
    let lp = &mut p.layers[0];
    lp.ff_c.fill(0.0);
    lp.ff_a.fill(0.0);
    lp.ff_d.fill(0.0);
    lp.ff_b.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = normal_matrix(3, 8, 1.0, &mut rng);
    let blocks = [Block {
        start: 0,
        mask: AttentionMask::causal(3),
    }];
    let (y, c) = layer_forward(&p.layers[0], x, &blocks, 2);
    let (again, _) = ln_forward(&c.u, &p.layers[0].ln2_gain, &p.layers[0].ln2_bias);
    for (a, b) in y.iter().zip(again.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn large_inputs_stay_finite() {
    let p = params(9, 5, 2);
    let x = Array2::from_elem((4, 8), 1e3);
    let y = encoder_forward(&p, x, &AttentionMask::causal(4)).unwrap();
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn encoder_shapes() {
    let p0 = params(10, 5, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = normal_matrix(5, 8, 1.0, &mut rng);
    assert_eq!(encoder_forward(&p0, x.clone(), &AttentionMask::causal(5)).unwrap(), x);
    let p = params(10, 5, 2);
    let one = encoder_forward(&p, x.slice(s![..1, ..]).to_owned(), &AttentionMask::causal(1)).unwrap();
    assert_eq!(one.dim(), (1, 8));
    assert!(encoder_forward(&p, x, &AttentionMask::causal(4)).is_err());
}

#[test]
fn next_token_distribution_examples() {
    let p = softmax(array![0.0, 0.0].view());
    assert!((p[0] - 0.5).abs() < 1e-15);
    let p = softmax(array![3f64.ln(), 0.0].view());
    assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
    let z = array![1.0, -2.0];
    let a = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
    let d = next_token_distribution(z.view(), &a);
    assert!(d.iter().all(|&x| x > 0.0));
    assert!((d.sum() - 1.0).abs() < 1e-9);
}

#[test]
fn uniform_head_gives_log_uniform() {
    let mut p = params(12, 7, 2);
    p.out.fill(0.0);
    let e = enc(&[1, 2, 3, 4, 5]);
    let ll = trace_log_likelihood(&p, &e).unwrap();
    assert!((ll - 5.0 * (1.0f64 / 7.0).ln()).abs() < 1e-12);
    let single = trace_log_likelihood(&p, &enc(&[3])).unwrap();
    assert!((single - (1.0f64 / 7.0).ln()).abs() < 1e-12);
}

#[test]
fn log_likelihood_is_sum_of_terms() {
    let p = params(13, 9, 2);
    let e = enc(&[1, 8, 3, 3, 0, 7]);
    let fwd = forward_pack(&p, &[&e]).unwrap();
    let total = trace_log_likelihood(&p, &e).unwrap();
    // recompute each term from its own contextual vector
    let mut sum = 0.0;
    for (t, &id) in e.ids.iter().enumerate() {
        let dist = next_token_distribution(fwd.hidden().row(t), &p.out);
        sum += dist[id as usize].ln();
    }
    assert!((total - sum).abs() < 1e-10);
}

#[test]
fn pack_mask_examples() {
    let m = build_causal_pack_mask(&[3], 8).unwrap();
    assert_eq!(m, AttentionMask::causal(3));
    let m = build_causal_pack_mask(&[2, 2], 8).unwrap();
    let want = [
        [true, false, false, false],
        [true, true, false, false],
        [false, false, true, false],
        [false, false, true, true],
    ];
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            assert_eq!(m.allowed(i, j), w);
        }
    }
    assert!(build_causal_pack_mask(&[5, 4], 8).is_err());
}

#[test]
fn packed_equals_solo() {
    let p = params(14, 11, 2);
    let traces = [enc(&[1, 2, 3]), enc(&[10, 4]), enc(&[5, 5, 5, 5, 9]), enc(&[0])];
    let refs: Vec<&EncodedTrace> = traces.iter().collect();
    let packed = forward_pack(&p, &refs).unwrap().segment_log_likelihoods(&refs);
    for (t, lp) in traces.iter().zip(&packed) {
        let solo = trace_log_likelihood(&p, t).unwrap();
        assert!((solo - lp).abs() < 1e-6, "{solo} vs {lp}");
    }
}

#[test]
fn earlier_predictions_ignore_later_tokens() {
    let p = params(15, 9, 2);
    let a = enc(&[1, 2, 3, 4, 5, 6]);
    let fa = forward_pack(&p, &[&a]).unwrap();
    for j in 0..a.len() {
        let mut b = a.clone();
        b.ids[j] = 8;
        let fb = forward_pack(&p, &[&b]).unwrap();
        // the distribution at position i conditions on tokens < i
        for i in 0..=j {
            assert_eq!(fa.log_probs().row(i), fb.log_probs().row(i));
        }
    }
}

#[test]
fn rejects_bad_inputs() {
    let p = params(16, 5, 1);
    assert!(trace_log_likelihood(&p, &enc(&[])).is_err());
    assert!(trace_log_likelihood(&p, &enc(&[5])).is_err());
    let long = enc(&vec![1; 65]);
    assert!(trace_log_likelihood(&p, &long).is_err());
    assert!(ModelParams::init(
        ModelConfig {
            n_heads: 3,
            ..cfg(5, 1)
        },
        &mut ChaCha8Rng::seed_from_u64(0)
    )
    .is_err());
}

#[test]
fn checkpoint_round_trip() {
    let p = params(17, 9, 2);
    let e = enc(&[1, 2, 3, 4]);
    let meta = serde_json::json!({"lr": 6e-4});
    let mut first = Vec::new();
    write_checkpoint(&mut first, &p, Some(&meta)).unwrap();
    assert_eq!(&first[..5], b"BGPT1");
    let (p1, m1) = read_checkpoint(first.as_slice()).unwrap();
    assert_eq!(m1, Some(meta.clone()));
    let mut second = Vec::new();
    write_checkpoint(&mut second, &p1, Some(&meta)).unwrap();
    assert_eq!(first, second);
    let (p2, _) = read_checkpoint(second.as_slice()).unwrap();
    assert_eq!(p1, p2);
    let (a, b) = (trace_log_likelihood(&p1, &e).unwrap(), trace_log_likelihood(&p2, &e).unwrap());
    assert_eq!(a.to_bits(), b.to_bits());
    // f32 storage stays close to the f64 original
    assert!((a - trace_log_likelihood(&p, &e).unwrap()).abs() < 1e-3);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let p = params(18, 5, 1);
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &p, None).unwrap();
    assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(read_checkpoint(extra.as_slice()).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(bad.as_slice()).is_err());
}

#[test]
fn tensor_names_are_unique_and_stable() {
    let p = params(19, 5, 2);
    let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert_eq!(names.len(), 4 + 2 * 11 + 1);
    let mut q = p.clone();
    let mut_names: Vec<String> = q.tensors_mut().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, mut_names);
}
