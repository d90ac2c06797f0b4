use rand::Rng;

use super::layers::{self, Binding, KvCache, TransformerLayer};
use super::*;
use crate::rng::rng_from_seed;

fn gradcheck<F>(params: &ParameterSet, f: F) -> f64
where
    F: Fn(&mut Tape, &ParameterSet) -> crate::Result<Var>,
{
    gradient_check(params, 1e-6, f).unwrap()
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> crate::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = rng_from_seed(seed);
    let w = tape.constant(random_tensor(&mut rng, &shape));
    let m = tape.mul(x, w)?;
    tape.sum(m)
}

#[test]
fn matmul_identity_and_zero_row() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let b = tape.constant(Tensor::matrix(2, 1, vec![0.0, 5.0]).unwrap());
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(out), &[0.0]);

    let bad = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(tape.matmul(a, bad), Err(crate::Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = rng_from_seed(1);
    let mut p = ParameterSet::new();
    p.insert("a", random_tensor(&mut rng, &[3, 4])).unwrap();
    p.insert("b", random_tensor(&mut rng, &[4, 2])).unwrap();
    let err = gradcheck(&p, |t, p| {
        let a = t.param(p, "a")?;
        let b = t.param(p, "b")?;
        let c = t.matmul(a, b)?;
        t.sum(c)
    });
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn elementwise_ops_gradients() {
    let mut rng = rng_from_seed(2);
    let mut p = ParameterSet::new();
    p.insert("x", random_tensor(&mut rng, &[3, 5])).unwrap();
    p.insert("r", random_tensor(&mut rng, &[1, 5])).unwrap();
    p.insert("y", random_tensor(&mut rng, &[5, 3])).unwrap();
    let err = gradcheck(&p, |t, p| {
        let x = t.param(p, "x")?;
        let r = t.param(p, "r")?;
        let y = t.param(p, "y")?;
        let a = t.add_row(x, r)?;
        let s = t.sigmoid(a)?;
        let yt = t.transpose(y)?;
        let m = t.mul(s, yt)?;
        let relu = t.relu(m)?;
        let sc = t.scale(relu, 1.7)?;
        let sh = t.add_scalar(sc, 2.0)?;
        let lg = t.log(sh)?;
        let cl = t.clamp(a, -0.5, 0.5)?;
        let both = t.concat_cols(&[lg, cl])?;
        let g = t.gather_rows(both, &[2, 0, 2])?;
        let stacked = t.concat_rows(&[g, both])?;
        let cs = t.sum_rows(stacked)?;
        weighted_sum(t, cs, 9)
    });
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn softmax_log_pipeline_gradient() {
    let mut rng = rng_from_seed(3);
    let mut p = ParameterSet::new();
    p.insert("z", random_tensor(&mut rng, &[1, 6])).unwrap();
    p.insert("e", random_tensor(&mut rng, &[5, 6])).unwrap();
    let err = gradcheck(&p, |t, p| {
        let z = t.param(p, "z")?;
        let e = t.param(p, "e")?;
        let zt = t.transpose(z)?;
        let logits = t.matmul(e, zt)?;
        let a = t.softmax(logits, 1.2)?;
        let at = t.transpose(a)?;
        let agg = t.matmul(at, e)?;
        let lp = t.log_softmax(logits, 0.3)?;
        let pick = t.pick(lp, 3)?;
        let s = weighted_sum(t, agg, 4)?;
        let pr = t.softmax(logits, 0.7)?;
        let lpr = t.log(pr)?;
        let s2 = t.pick(lpr, 1)?;
        let tot = t.add(s, pick)?;
        t.add(tot, s2)
    });
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn quadratic_and_constant_losses() {
    let mut p = ParameterSet::new();
    p.insert("w", Tensor::row(vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    p.insert("unused", Tensor::zeros(&[2])).unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&p, "w").unwrap();
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get("w").unwrap(), &[2.0, -4.0, 1.0]);
    grads.write_into(&mut p).unwrap();
    assert_eq!(p.get("unused").unwrap().grad().unwrap(), &[0.0, 0.0]);

    let mut tape = Tape::new();
    let _w = tape.param(&p, "w").unwrap();
    let c = tape.constant(Tensor::scalar(3.0));
    let grads = tape.backward(c).unwrap();
    assert_eq!(grads.max_abs(), 0.0);

    let mut tape = Tape::new();
    let w = tape.param(&p, "w").unwrap();
    assert!(matches!(tape.backward(w), Err(crate::Error::Argument(_))));
}

fn layer_params(d: usize, seed: u64) -> ParameterSet {
    let mut rng = rng_from_seed(seed);
    let mut p = ParameterSet::new();
    layers::init_transformer_layer(&mut p, "layer", d, &mut rng).unwrap();
    p
}

#[test]
fn attention_single_token_weight_is_one() {
    let p = layer_params(8, 5);
    let mut tape = Tape::new();
    let block = layers::AttentionBlock::bind(&mut tape, &p, "layer.attn", Binding::Frozen).unwrap();
    let mut rng = rng_from_seed(6);
    let x = tape.constant(random_tensor(&mut rng, &[1, 8]));
    for causal in [false, true] {
        let (_, att) = layers::masked_multi_head_attention(&mut tape, &block, x, 4, 1, causal).unwrap();
        assert!(tape.attention_probs(att).unwrap().iter().all(|&w| w == 1.0));
    }
}

#[test]
fn attention_identical_rows_are_uniform() {
    let p = layer_params(8, 7);
    let mut tape = Tape::new();
    let block = layers::AttentionBlock::bind(&mut tape, &p, "layer.attn", Binding::Frozen).unwrap();
    let row: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
    let x = tape.constant(Tensor::matrix(5, 8, row.repeat(5)).unwrap());
    let (_, att) = layers::masked_multi_head_attention(&mut tape, &block, x, 2, 1, false).unwrap();
    for w in tape.attention_probs(att).unwrap() {
        assert!((w - 0.2).abs() < 1e-15);
    }
    assert!(matches!(
        layers::masked_multi_head_attention(&mut tape, &block, x, 3, 1, false),
        Err(crate::Error::Argument(_))
    ));
}

#[test]
fn causal_attention_ignores_future_rows() {
    let p = layer_params(8, 8);
    let mut rng = rng_from_seed(9);
    let base = random_tensor(&mut rng, &[5, 8]);
    let run = |x: Tensor| {
        let mut tape = Tape::new();
        let layer = TransformerLayer::bind(&mut tape, &p, "layer", Binding::Frozen).unwrap();
        let x = tape.constant(x);
        let out = layer.decoder_forward(&mut tape, x, 4, 1).unwrap();
        tape.value(out).clone()
    };
    let before = run(base.clone());
    for t in 0..5 {
        let mut perturbed = base.clone();
        for j in 0..8 {
            perturbed.data_mut()[t * 8 + j] += 0.3 * (j as f64 + 1.0);
        }
        let after = run(perturbed);
        for r in 0..t {
            let a: Vec<u64> = before.row_slice(r).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = after.row_slice(r).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "row {r} changed when row {t} was perturbed");
        }
        assert_ne!(before.row_slice(t), after.row_slice(t));
    }
}

#[test]
fn transformer_layers_preserve_shape_and_gradients() {
    let mut p = layer_params(8, 10);
    let mut rng = rng_from_seed(11);
    p.insert("x", random_tensor(&mut rng, &[4, 8])).unwrap();
    for causal in [false, true] {
        let err = gradcheck(&p, |t, p| {
            let layer = TransformerLayer::bind(t, p, "layer", Binding::Trainable)?;
            let x = t.param(p, "x")?;
            let y = if causal {
                layer.decoder_forward(t, x, 2, 1)?
            } else {
                layer.encoder_forward(t, x, 2, 1)?
            };
            assert_eq!(t.value(y).shape(), &[4, 8]);
            weighted_sum(t, y, 12)
        });
        assert!(err <= 1e-6, "causal={causal}: relative error {err}");
    }
}

#[test]
fn batched_segments_match_separate_runs() {
    let p = layer_params(8, 13);
    let mut rng = rng_from_seed(14);
    let a = random_tensor(&mut rng, &[3, 8]);
    let b = random_tensor(&mut rng, &[3, 8]);
    let mut tape = Tape::new();
    let layer = TransformerLayer::bind(&mut tape, &p, "layer", Binding::Frozen).unwrap();
    let xa = tape.constant(a);
    let xb = tape.constant(b);
    let both = tape.concat_rows(&[xa, xb]).unwrap();
    let ya = layer.encoder_forward(&mut tape, xa, 4, 1).unwrap();
    let yb = layer.encoder_forward(&mut tape, xb, 4, 1).unwrap();
    let yab = layer.encoder_forward(&mut tape, both, 4, 2).unwrap();
    let sep: Vec<f64> = tape.data(ya).iter().chain(tape.data(yb)).copied().collect();
    for (x, y) in sep.iter().zip(tape.data(yab)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn incremental_decoding_matches_full_recompute() {
    let p = layer_params(16, 15);
    let mut rng = rng_from_seed(16);
    let rows = random_tensor(&mut rng, &[6, 16]);
    let mut tape = Tape::new();
    let layer = TransformerLayer::bind(&mut tape, &p, "layer", Binding::Frozen).unwrap();
    let all = tape.constant(rows.clone());
    let full = layer.decoder_forward(&mut tape, all, 8, 1).unwrap();
    let full = tape.value(full).clone();
    let mut cache = KvCache::default();
    for t in 0..6 {
        let tok = tape.constant(Tensor::row(rows.row_slice(t).to_vec()).unwrap());
        let out = layer.decoder_step(&mut tape, tok, &mut cache, 8).unwrap();
        for (x, y) in tape.data(out).iter().zip(full.row_slice(t)) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    assert_eq!(cache.len(), 6);
}

#[test]
fn forward_is_deterministic() {
    let p = layer_params(8, 17);
    let mut rng = rng_from_seed(18);
    let x = random_tensor(&mut rng, &[4, 8]);
    let run = || {
        let mut tape = Tape::new();
        let layer = TransformerLayer::bind(&mut tape, &p, "layer", Binding::Frozen).unwrap();
        let xv = tape.constant(x.clone());
        let y = layer.encoder_forward(&mut tape, xv, 2, 1).unwrap();
        tape.data(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-30.0f64..30.0, 1..20), tau in 0.1f64..20.0) {
            let p = softmax_with_temperature(&logits, tau).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn entropy_non_decreasing_in_temperature(logits in prop::collection::vec(-5.0f64..5.0, 2..12)) {
            prop_assume!(logits.iter().any(|&v| (v - logits[0]).abs() > 1e-6));
            let grid = [0.05, 0.1, 0.3, 0.6, 1.0, 1.5, 3.0, 10.0, 100.0];
            let hs: Vec<f64> = grid
                .iter()
                .map(|&t| entropy(&softmax_with_temperature(&logits, t).unwrap()))
                .collect();
            for w in hs.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12, "{hs:?}");
            }
        }
    }
}
