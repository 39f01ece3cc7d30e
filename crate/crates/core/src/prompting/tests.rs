use super::*;
use crate::encoder::{attention_probs, EncoderWeights};

fn cfg(n_layers: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads: 2,
        d_ff: 2 * d_model,
        vocab_size: 40,
        max_seq_len: 32,
    }
}

fn spec(method: Method, l: usize, k: usize, m: usize) -> PromptSpec {
    PromptSpec { method, l, k, m }
}

fn layout(batch: usize, seq_len: usize, valid: &[usize]) -> Layout {
    Layout {
        batch,
        seq_len,
        mask: valid
            .iter()
            .flat_map(|&v| (0..seq_len).map(move |i| i < v))
            .collect(),
    }
}

#[test]
fn counts_match_published_sizes() {
    let large = cfg(24, 1024);
    let xl = cfg(36, 1280);
    assert_eq!(count_tunable(&spec(Method::PT, 20, 1, 0), &large), 20_480);
    assert_eq!(count_tunable(&spec(Method::PT, 20, 1, 0), &xl), 25_600);
    assert_eq!(count_tunable(&spec(Method::Npg, 5, 13, 128), &large), 791_680);
    assert_eq!(count_tunable(&spec(Method::Npg, 5, 19, 128), &xl), 989_568);
    assert_eq!(count_tunable(&spec(Method::Appg, 5, 13, 128), &large), 263_296);
    assert_eq!(count_tunable(&spec(Method::Mppg, 5, 19, 128), &xl), 329_088);
    assert_eq!(count_tunable(&spec(Method::Npg, 5, 7, 16), &cfg(12, 64)), 16 * 64 + 16 + 320 * 16 + 320);
}

#[test]
fn pooling_counts_ignore_length_but_naive_counts_grow() {
    let c = cfg(12, 64);
    let ppg: Vec<usize> = (1..10).map(|l| count_tunable(&spec(Method::Appg, l, 7, 16), &c)).collect();
    let npg: Vec<usize> = (1..10).map(|l| count_tunable(&spec(Method::Npg, l, 7, 16), &c)).collect();
    assert!(ppg.windows(2).all(|w| w[0] == w[1]));
    assert!(npg.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn module_scalars_agree_with_closed_form() {
    let c = cfg(4, 8);
    for method in Method::ALL {
        let k = if method == Method::PT { 1 } else { 3 };
        let s = spec(method, 3, k, 4);
        let module = PromptModule::init(s, &c, 0).unwrap();
        assert_eq!(module.num_scalars(), count_tunable(&s, &c), "{method}");
    }
}

#[test]
fn middle_layer_default() {
    assert_eq!(default_prompt_layer(24), 13);
    assert_eq!(default_prompt_layer(36), 19);
    assert_eq!(default_prompt_layer(1), 1);
    assert_eq!(default_prompt_layer(12), 7);
    let d = PromptSpec::defaults(Method::Npg, 12);
    assert_eq!((d.l, d.k, d.m), (5, 7, 128));
    let d = PromptSpec::defaults(Method::PT, 12);
    assert_eq!((d.l, d.k), (20, 1));
}

#[test]
fn spec_validation() {
    let c = cfg(12, 64);
    assert!(spec(Method::PT, 20, 1, 0).validate(&c).is_ok());
    assert!(matches!(spec(Method::PT, 20, 5, 0).validate(&c), Err(Error::Config(_))));
    assert!(spec(Method::LateNoPg, 20, 12, 0).validate(&c).is_ok());
    assert!(spec(Method::LateNoPg, 20, 13, 0).validate(&c).is_err());
    assert!(spec(Method::LateNoPg, 20, 0, 0).validate(&c).is_err());
    assert!(spec(Method::Npg, 0, 7, 16).validate(&c).is_err());
    assert!(spec(Method::Appg, 5, 7, 0).validate(&c).is_err());
    assert_eq!(spec(Method::Npg, 5, 7, 16).backward_layers(&c), 6);
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
    }
    assert_eq!("late".parse::<Method>().unwrap(), Method::LateNoPg);
    assert!("IDPG".parse::<Method>().is_err());
}

#[test]
fn soft_prompt_init() {
    let p = init_soft_prompt(5, 16, 3).unwrap();
    assert_eq!(p.shape(), &[5, 16]);
    assert_eq!(p.len(), 80);
    assert_eq!(p, init_soft_prompt(5, 16, 3).unwrap());
    assert_ne!(p, init_soft_prompt(5, 16, 4).unwrap());

    let big = init_soft_prompt(1000, 100, 11).unwrap();
    let n = big.len() as f64;
    let mean = big.data().iter().sum::<f64>() / n;
    let std = (big.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.001, "{mean}");
    assert!((std - 0.02).abs() < 0.001, "{std}");
}

#[test]
fn npg_matches_hand_evaluation() {
    // d = 4, m = 2, l = 2
    let h = Tensor::from_rows(&[&[1.0, -1.0, 2.0, 0.0]]);
    let gw = GeneratorWeights {
        w1: Tensor::from_rows(&[&[1.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 1.0]]),
        b1: Tensor::new([2], [0.0, 1.0]).unwrap(),
        w2: Tensor::new([8, 2], (0..8).flat_map(|r| [r as f64 - 3.0, 2.0]).collect::<Vec<_>>()).unwrap(),
        b2: Tensor::full([8], 0.5),
    };
    // W1·h + b1 = [3, 0]; ReLU keeps it; row r of W2 gives 3(r-3) + 0.5
    let p = npg_generate(&mut Tape::new(), &h, &gw, 2).unwrap();
    assert_eq!(p.shape(), &[2, 4]);
    assert_eq!(p.data(), &[-8.5, -5.5, -2.5, 0.5, 3.5, 6.5, 9.5, 12.5]);
}

#[test]
fn npg_with_zero_projections_is_instance_independent() {
    let s = spec(Method::Npg, 3, 2, 4);
    let mut gw = GeneratorWeights::init(&s, 6, 1).unwrap();
    gw.w1 = Tensor::zeros([4, 6]);
    gw.w2 = Tensor::zeros([18, 4]);
    let h = Tensor::new([2, 6], (0..12).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
    let p = npg_generate(&mut Tape::new(), &h, &gw, 3).unwrap();
    assert_eq!(&p.data()[..18], gw.b2.data());
    assert_eq!(&p.data()[18..], gw.b2.data());
}

fn ppg_fixture() -> (Tensor, GeneratorWeights) {
    // n = 4, d = 2, m = 1, l = 2
    let h = Tensor::from_rows(&[&[1.0, 0.0], &[3.0, 1.0], &[0.0, 3.0], &[4.0, -1.0]]);
    let gw = GeneratorWeights {
        w1: Tensor::from_rows(&[&[1.0, -1.0]]),
        b1: Tensor::new([1], [0.5]).unwrap(),
        w2: Tensor::from_rows(&[&[2.0], &[-1.0]]),
        b2: Tensor::new([2], [0.1, 0.2]).unwrap(),
    };
    (h, gw)
}

#[test]
fn ppg_matches_hand_evaluation() {
    // down-projection: [1.5, 2.5, -2.5, 5.5]; buckets {0,1} and {2,3}
    let (h, gw) = ppg_fixture();
    let lay = layout(1, 4, &[4]);
    let avg = ppg_generate(&mut Tape::new(), &h, &lay, &gw, 2, PoolMode::Avg).unwrap();
    // pooled [2.0, 1.5]
    let expect_avg = [4.1, -1.8, 3.1, -1.3];
    assert!(avg.data().iter().zip(expect_avg).all(|(a, b)| (a - b).abs() < 1e-12), "{avg:?}");
    let max = ppg_generate(&mut Tape::new(), &h, &lay, &gw, 2, PoolMode::Max).unwrap();
    // pooled [2.5, 5.5]
    let expect_max = [5.1, -2.3, 11.1, -5.3];
    assert!(max.data().iter().zip(expect_max).all(|(a, b)| (a - b).abs() < 1e-12), "{max:?}");
}

#[test]
fn ppg_ignores_padding_rows() {
    let (h, gw) = ppg_fixture();
    let mut rows: Vec<f64> = h.to_vec();
    rows.extend([100.0, -100.0]);
    let padded = Tensor::new([5, 2], rows).unwrap();
    let a = ppg_generate(&mut Tape::new(), &h, &layout(1, 4, &[4]), &gw, 2, PoolMode::Max).unwrap();
    let b = ppg_generate(&mut Tape::new(), &padded, &layout(1, 5, &[4]), &gw, 2, PoolMode::Max).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ppg_negative_buckets_collapse_to_bias() {
    let (h, mut gw) = ppg_fixture();
    gw.b1 = Tensor::new([1], [-10.0]).unwrap();
    let p = ppg_generate(&mut Tape::new(), &h, &layout(1, 4, &[4]), &gw, 2, PoolMode::Avg).unwrap();
    assert_eq!(p.data(), &[0.1, 0.2, 0.1, 0.2]);
}

#[test]
fn ppg_with_zero_up_projection_repeats_bias() {
    let s = spec(Method::Appg, 3, 2, 4);
    let mut gw = GeneratorWeights::init(&s, 6, 2).unwrap();
    gw.w2 = Tensor::zeros([6, 4]);
    let h = Tensor::new([10, 6], (0..60).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap();
    let p = ppg_generate(&mut Tape::new(), &h, &layout(2, 5, &[5, 4]), &gw, 3, PoolMode::Avg).unwrap();
    assert_eq!(p.shape(), &[6, 6]);
    for row in 0..6 {
        assert_eq!(p.row(row), gw.b2.data());
    }
}

#[test]
fn ppg_rejects_inputs_shorter_than_the_prompt() {
    let (h, gw) = ppg_fixture();
    let err = ppg_generate(&mut Tape::new(), &h, &layout(1, 4, &[1]), &gw, 2, PoolMode::Avg).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)));
}

#[test]
fn generators_detach_their_inputs() {
    let mut tape = Tape::new();
    let s = spec(Method::Npg, 2, 2, 3);
    let gw = GeneratorWeights::init(&s, 4, 0).unwrap();
    let h = tape.leaf(&Tensor::full([1, 4], 0.3));
    let p = npg_generate(&mut tape, &h, &gw, 2).unwrap();
    // nothing trainable besides `h`, which was detached: nothing recorded
    assert!(p.is_constant());

    let module = PromptModule::init(s, &cfg(2, 4), 0).unwrap();
    let mut tape = Tape::new();
    let leaves = module.map(|t| tape.leaf(t));
    let h = tape.leaf(&Tensor::full([3, 4], 0.3));
    let p = leaves.prompts(&mut tape, &h, &layout(1, 3, &[3])).unwrap();
    let loss = tape.sum(&p);
    let grads = tape.backward(&loss).unwrap();
    assert!(grads.get(&h).is_none());
    assert_eq!(grads.leaf_keys().len(), 4);
}

#[test]
fn insertion_shifts_positions() {
    let mut tape = Tape::new();
    let hidden = Tensor::new([3, 2], [1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
    let prompt = Tensor::new([2, 2], [9.0, 9.0, 8.0, 8.0]).unwrap();
    let lay = layout(1, 3, &[3]);
    let (out, new_lay, shift) = insert_prompt(&mut tape, Some(&prompt), &hidden, &lay).unwrap();
    assert_eq!(shift, 2);
    assert_eq!(out.shape(), &[5, 2]);
    assert_eq!(new_lay.seq_len, 5);
    let mask_pos = 1;
    assert_eq!(out.row(mask_pos + shift), hidden.row(mask_pos));
    assert_eq!(out.data(), &[9.0, 9.0, 8.0, 8.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);

    let (same, same_lay, zero) = insert_prompt(&mut tape, None, &hidden, &lay).unwrap();
    assert_eq!((same, same_lay, zero), (hidden, lay, 0));
}

#[test]
fn insertion_interleaves_segments_and_marks_prompts_attendable() {
    let mut tape = Tape::new();
    let hidden = Tensor::new([6, 1], [1.0, 2.0, 0.0, 4.0, 5.0, 6.0]).unwrap();
    let prompt = Tensor::new([4, 1], [-1.0, -2.0, -3.0, -4.0]).unwrap();
    let (out, lay, _) = insert_prompt(&mut tape, Some(&prompt), &hidden, &layout(2, 3, &[2, 3])).unwrap();
    assert_eq!(out.data(), &[-1.0, -2.0, 1.0, 2.0, 0.0, -3.0, -4.0, 4.0, 5.0, 6.0]);
    assert_eq!(lay.mask, vec![true, true, true, true, false, true, true, true, true, true]);
}

#[test]
fn text_positions_attend_to_the_prompt() {
    let c = cfg(2, 8);
    let w = EncoderWeights::init(&c, 5).unwrap();
    let module = PromptModule::init(spec(Method::LateNoPg, 2, 2, 0), &c, 1).unwrap();
    let hidden = Tensor::new([3, 8], (0..24).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<_>>()).unwrap();
    let mut tape = Tape::new();
    let (x, lay, l) = module.prompted_input(&mut tape, &hidden, &layout(1, 3, &[3])).unwrap();
    let probs = attention_probs(&w, &c, 2, &x, &lay).unwrap();
    let n = lay.seq_len;
    for head in 0..c.n_heads {
        for q in l..n {
            let row = &probs[(head * n + q) * n..(head * n + q + 1) * n];
            assert!(row[..l].iter().all(|&p| p > 1e-6));
        }
    }
}

#[test]
fn generated_prompts_depend_on_the_instance() {
    let c = cfg(2, 8);
    let a = Tensor::new([4, 8], (0..32).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>()).unwrap();
    let b = Tensor::new([4, 8], (0..32).map(|i| (i as f64 * 0.5).cos()).collect::<Vec<_>>()).unwrap();
    for method in [Method::Npg, Method::Appg, Method::Mppg] {
        let module = PromptModule::init(spec(method, 2, 2, 4), &c, 9).unwrap();
        let lay = layout(1, 4, &[4]);
        let pa = module.prompts(&mut Tape::new(), &a, &lay).unwrap();
        let pb = module.prompts(&mut Tape::new(), &b, &lay).unwrap();
        assert_ne!(pa, pb, "{method}");
    }
    let soft = PromptModule::init(spec(Method::LateNoPg, 2, 2, 0), &c, 9).unwrap();
    let lay = layout(1, 4, &[4]);
    assert_eq!(
        soft.prompts(&mut Tape::new(), &a, &lay).unwrap(),
        soft.prompts(&mut Tape::new(), &b, &lay).unwrap()
    );
}

#[test]
fn named_round_trip() {
    let c = cfg(4, 8);
    for method in Method::ALL {
        let k = if method == Method::PT { 1 } else { 2 };
        let s = spec(method, 3, k, 4);
        let module = PromptModule::init(s, &c, 0).unwrap();
        let owned: Vec<(String, Tensor)> = module.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(PromptModule::from_named(s, &c, &owned).unwrap(), module);
        assert!(PromptModule::from_named(s, &c, &owned[1..]).is_err());
    }
}
