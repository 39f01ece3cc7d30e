use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so that every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, out: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(out.shape(), &mut rng);
    let prod = tape.mul(out, &w).unwrap();
    tape.sum(&prod)
}

/// Largest per-input relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)
/// between tape gradients and central differences with step `eps`.
fn grad_rel_err(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Tensor]) -> Tensor) -> f64 {
    let eps = 1e-4;
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &leaves);
    let grads = tape.backward(&loss).unwrap();

    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        t.set_recording(false);
        f(&mut t, xs).item()
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[i]).expect("missing grad").to_vec();
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let bump = |delta: f64| {
                let mut xs = inputs.to_vec();
                let mut d = input.to_vec();
                d[j] += delta;
                xs[i] = Tensor::new(input.shape().to_vec(), d).unwrap();
                eval(&xs)
            };
            numeric[j] = (bump(eps) - bump(-eps)) / (2.0 * eps);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-12));
    }
    worst
}

const TOL: f64 = 1e-5;

#[test]
fn matmul_values() {
    let mut tape = Tape::new();
    let b = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let c = tape.matmul(&Tensor::identity(2), &b).unwrap();
    assert_eq!(c, b);

    let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
    let v = Tensor::from_rows(&[&[5.0], &[7.0]]);
    assert_eq!(tape.matmul(&a, &v).unwrap().data(), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let err = tape.matmul(&Tensor::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 3], &mut rng);
    let b = random(&[3, 3], &mut rng);
    let err = grad_rel_err(&[a, b], |t, x| {
        let c = t.matmul(&x[0], &x[1]).unwrap();
        t.sum(&c)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn relu_values_and_mask() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(&x);
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

    let x = tape.leaf(&Tensor::new([2], vec![-1.0, 2.0]).unwrap());
    let y = tape.relu(&x);
    let loss = tape.sum(&y);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[0.0, 1.0]);

    // subgradient at 0 is 0
    let z = tape.leaf(&Tensor::new([1], vec![0.0]).unwrap());
    let y = tape.relu(&z);
    let loss = tape.sum(&y);
    assert_eq!(tape.backward(&loss).unwrap().get(&z).unwrap().data(), &[0.0]);
}

#[test]
fn relu_gradient_away_from_zero() {
    let x = Tensor::new([6], vec![-0.9, -0.4, 0.3, 0.8, 1.5, -2.0]).unwrap();
    let err = grad_rel_err(&[x], |t, x| {
        let y = t.relu(&x[0]);
        weighted_sum(t, &y, 3)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng);
    let err = grad_rel_err(&[a, b], |t, x| {
        let s = t.add(&x[0], &x[1]).unwrap();
        let p = t.mul(&s, &x[0]).unwrap();
        let q = t.scale(&p, -1.7);
        let m = t.mean(&q);
        let tot = t.sum(&x[1]);
        t.add(&m, &tot).unwrap()
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn linear_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[4, 3], &mut rng);
    let w = random(&[5, 3], &mut rng);
    let b = random(&[5], &mut rng);
    let err = grad_rel_err(&[x, w, b], |t, v| {
        let y = t.linear(&v[0], &v[1], Some(&v[2])).unwrap();
        weighted_sum(t, &y, 9)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn softmax_rows_sum_to_one_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 7], &mut rng);
    let mut tape = Tape::new();
    let scaled = tape.scale(&x, 10.0);
    let y = tape.softmax_rows(&scaled).unwrap();
    for r in 0..3 {
        assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    let err = grad_rel_err(&[x], |t, v| {
        let y = t.softmax_rows(&v[0]).unwrap();
        weighted_sum(t, &y, 11)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn layer_norm_normalises_rows_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[4, 8], &mut rng);
    let ones = Tensor::full([8], 1.0);
    let zeros = Tensor::zeros([8]);
    let mut tape = Tape::new();
    let scaled = tape.scale(&x, 3.0);
    let y = tape.layer_norm(&scaled, &ones, &zeros).unwrap();
    for r in 0..4 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-5, "{mean}");
        assert!((var - 1.0).abs() <= 1e-4, "{var}");
    }
    let g = random(&[8], &mut rng);
    let b = random(&[8], &mut rng);
    let err = grad_rel_err(&[x, g, b], |t, v| {
        let y = t.layer_norm(&v[0], &v[1], &v[2]).unwrap();
        weighted_sum(t, &y, 12)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn embedding_reshape_concat_gather_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let table = random(&[5, 3], &mut rng);
    let extra = random(&[2, 3], &mut rng);
    let err = grad_rel_err(&[table, extra], |t, v| {
        let e = t.embedding(&v[0], &[4, 1, 1, 0]).unwrap();
        let c = t.concat_rows(&[&v[1], &e]).unwrap();
        let g = t.gather_rows(&c, &[5, 0, 2, 2, 3]).unwrap();
        let r = t.reshape(&g, &[3, 5]).unwrap();
        weighted_sum(t, &r, 13)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&[4, 3], &mut rng);
    let err = grad_rel_err(&[logits], |t, v| t.cross_entropy(&v[0], &[0, 2, 1, 2]).unwrap());
    assert!(err <= TOL, "{err}");

    let mut tape = Tape::new();
    let uniform = tape.cross_entropy(&Tensor::zeros([2, 4]), &[1, 3]).unwrap();
    assert!((uniform.item() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn attention_gradient_with_key_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random(&[6, 4], &mut rng);
    let k = random(&[6, 4], &mut rng);
    let v = random(&[6, 4], &mut rng);
    let mask = [true, true, false, true, true, true];
    let err = grad_rel_err(&[q, k, v], |t, x| {
        let o = t.attention(&x[0], &x[1], &x[2], 2, 3, 2, &mask).unwrap();
        weighted_sum(t, &o, 14)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn attention_ignores_masked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let q = random(&[3, 4], &mut rng);
    let k = random(&[3, 4], &mut rng);
    let mask = [true, false, true];
    let p = ops::attention_probs(&q, &k, 1, 3, 2, &mask);
    for row in p.chunks_exact(3) {
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    let mut tape = Tape::new();
    assert!(tape.attention(&q, &k, &k, 1, 3, 3, &mask).is_err());
}

fn pool(row: &[f64], valid: usize, l: usize, mode: PoolMode) -> Vec<f64> {
    // row is one feature over positions, i.e. a column in the row layout
    let x = Tensor::new([row.len(), 1], row.to_vec()).unwrap();
    let plan = PoolPlan {
        seq_len: row.len(),
        valid: vec![valid],
        out_len: l,
    };
    Tape::new().bucket_pool(&x, &plan, mode).unwrap().to_vec()
}

#[test]
fn bucket_pool_values() {
    assert_eq!(pool(&[1.0, 2.0, 3.0, 4.0], 4, 2, PoolMode::Avg), vec![1.5, 3.5]);
    assert_eq!(pool(&[5.0, 1.0, 7.0], 3, 2, PoolMode::Max), vec![5.0, 7.0]);
    let six = [0.3, -1.0, 2.0, 8.0, -4.0, 0.5];
    assert_eq!(pool(&six, 6, 6, PoolMode::Avg), six.to_vec());
    assert_eq!(pool(&six, 6, 6, PoolMode::Max), six.to_vec());
    // trailing padding is ignored
    assert_eq!(pool(&[1.0, 3.0, 100.0], 2, 1, PoolMode::Avg), vec![2.0]);
    assert_eq!(pool(&[1.0, 3.0, 100.0], 2, 1, PoolMode::Max), vec![3.0]);
}

#[test]
fn bucket_pool_rejects_short_inputs() {
    let x = Tensor::zeros([4, 2]);
    let plan = PoolPlan {
        seq_len: 4,
        valid: vec![2],
        out_len: 3,
    };
    let err = Tape::new().bucket_pool(&x, &plan, PoolMode::Avg).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)));
    assert!(err.to_string().contains("shorten the prompt"));
}

#[test]
fn bucket_pool_max_ties_go_to_first_position() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new([3, 1], vec![2.0, 2.0, 1.0]).unwrap());
    let plan = PoolPlan {
        seq_len: 3,
        valid: vec![3],
        out_len: 1,
    };
    let y = tape.bucket_pool(&x, &plan, PoolMode::Max).unwrap();
    let loss = tape.sum(&y);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn bucket_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&[2 * 7, 3], &mut rng);
    let plan = PoolPlan {
        seq_len: 7,
        valid: vec![7, 5],
        out_len: 3,
    };
    for mode in [PoolMode::Avg, PoolMode::Max] {
        let err = grad_rel_err(&[x.clone()], |t, v| {
            let y = t.bucket_pool(&v[0], &plan, mode).unwrap();
            weighted_sum(t, &y, 16)
        });
        assert!(err <= TOL, "{mode:?}: {err}");
    }
}

#[test]
fn detach_is_a_gradient_wall() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new([2], vec![3.0, 4.0]).unwrap());
    let w = tape.leaf(&Tensor::new([2], vec![0.5, -1.0]).unwrap());
    let xd = x.detach();
    assert_eq!(xd.data(), &[3.0, 4.0]);
    let p = tape.mul(&xd, &w).unwrap();
    let loss = tape.sum(&p);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&w).unwrap().data(), &[3.0, 4.0]);
    assert!(g.get(&x).is_none());
    assert_eq!(g.leaf_keys(), vec![w.node().unwrap()]);

    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let b = tape.leaf(&Tensor::new([2], vec![5.0, 6.0]).unwrap());
    let s = tape.add(&a.detach(), &b).unwrap();
    let loss = tape.sum(&s);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&b).unwrap().data(), &[1.0, 1.0]);
    assert!(g.get(&a).is_none());
}

#[test]
fn two_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w1 = random(&[4, 3], &mut rng);
    let w2 = random(&[2, 4], &mut rng);
    let x = random(&[3, 1], &mut rng);
    let err = grad_rel_err(&[w1, w2], |t, v| {
        let h = t.matmul(&v[0], &x).unwrap();
        let h = t.relu(&h);
        let o = t.matmul(&v[1], &h).unwrap();
        let o = t.relu(&o);
        t.sum(&o)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn backward_twice_is_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut tape = Tape::new();
    let a = tape.leaf(&random(&[3, 3], &mut rng));
    let b = tape.leaf(&random(&[3, 3], &mut rng));
    let c = tape.matmul(&a, &b).unwrap();
    let c = tape.relu(&c);
    let loss = tape.sum(&c);
    let g1 = tape.backward(&loss).unwrap();
    let g2 = tape.backward(&loss).unwrap();
    assert_eq!(g1.get(&a), g2.get(&a));
    assert_eq!(g1.get(&b), g2.get(&b));
    assert_eq!(g1.keys().collect::<Vec<_>>(), g2.keys().collect::<Vec<_>>());
}

#[test]
fn backward_rejects_non_scalar_and_unrecorded_losses() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros([2]));
    assert!(matches!(tape.backward(&a), Err(Error::Contract(_))));
    assert!(matches!(tape.backward(&Tensor::scalar(1.0)), Err(Error::Contract(_))));
}

#[test]
fn nothing_is_recorded_while_recording_is_off() {
    let mut tape = Tape::new();
    let w = tape.leaf(&Tensor::full([2, 2], 0.5));
    let before = tape.len();
    let y = tape.without_recording(|t| {
        let h = t.matmul(&w, &w).unwrap();
        t.relu(&h)
    });
    assert_eq!(tape.len(), before);
    assert!(y.is_constant());
    assert!(tape.is_recording());

    // constants-only inputs are never recorded either
    let c = tape.matmul(&Tensor::identity(2), &Tensor::identity(2)).unwrap();
    assert!(c.is_constant());
    assert_eq!(tape.len(), before);
}

#[test]
fn layer_marks_count_backward_passes() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::full([2], 1.0));
    let mut h = x.clone();
    for _ in 0..3 {
        h = tape.layer_mark(&h);
        h = tape.scale(&h, 2.0);
    }
    // a mark that does not lead to the loss is never visited
    let _dangling = tape.layer_mark(&x);
    let loss = tape.sum(&h);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.layer_backward_count(), 3);
    assert_eq!(g.get(&x).unwrap().data(), &[8.0, 8.0]);
}
