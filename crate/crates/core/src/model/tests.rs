use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use super::*;
use crate::encoders::{FrozenFusionEncoder, FrozenTextEncoder, FusionEncoderConfig, TextEncoderConfig};
use crate::math;
use crate::rng::{self, EngineRng};
use crate::tensorad::{check_gradients, Tape, Tensor};

fn small_text(d_lat: usize) -> Backbone {
    Backbone::Text(Arc::new(
        FrozenTextEncoder::new(TextEncoderConfig {
            vocab_size: 64,
            d_tok: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_mult: 4,
            d_lat,
            seed: 3,
        })
        .unwrap(),
    ))
}

fn small_fusion(d_lat: usize) -> Backbone {
    Backbone::Fusion(Arc::new(
        FrozenFusionEncoder::new(FusionEncoderConfig {
            vocab_size: 64,
            d_tok: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_mult: 4,
            d_lat,
            pseudo_tokens: 4,
            seed: 5,
        })
        .unwrap(),
    ))
}

fn random_rows(r: &mut EngineRng, n: usize, d: usize, std: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| rng::normal_vec(r, d, std)).collect()
}

fn features(backbone: &Backbone, n: usize, seed: u64) -> Features {
    let mut r = rng::stream(seed, 99);
    let rows = random_rows(&mut r, n, backbone.d_lat(), 1.0);
    backbone.features(&Tensor::from_rows(&rows).unwrap()).unwrap()
}

fn model(backbone: Backbone, k: usize, c: usize, m: usize, lambda: f64, seed: u64) -> (PtpModel, Features) {
    let feats = features(&backbone, 6, seed);
    let catalog = CategoryCatalog::synthetic(c, 64).unwrap();
    let config = ModelConfig {
        prompt_len: m,
        lambda,
        seed,
        ..ModelConfig::new(backbone.mode(), k)
    };
    (PtpModel::new(config, backbone, &catalog, &feats).unwrap(), feats)
}

/// Softmax with compensated summation, written independently of the engine.
fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| math::exp(l - max)).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for e in &exps {
        let t = sum + e;
        comp += if sum.abs() >= e.abs() { (sum - t) + e } else { (e - t) + sum };
        sum = t;
    }
    exps.iter().map(|e| e / (sum + comp)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn similarity_of_equal_dots_is_uniform() {
    let w = prototype_similarity(&[1.0, 0.0], &[vec![0.3, 1.0], vec![0.3, -2.0], vec![0.3, 5.0]]).unwrap();
    assert!(close(&w, &[1.0 / 3.0; 3], 1e-15));
}

#[test]
fn similarity_known_values() {
    let w = prototype_similarity(&[1.0], &[vec![0.0], vec![0.0], vec![math::ln(2.0)]]).unwrap();
    assert!(close(&w, &[0.25, 0.25, 0.5], 1e-15));
}

#[test]
fn similarity_matches_oracle() {
    let mut r = rng::stream(1, 1);
    for _ in 0..50 {
        let k = r.random_range(1..=10);
        let d = r.random_range(1..=10);
        let protos = random_rows(&mut r, k, d, 2.0);
        let x = rng::normal_vec(&mut r, d, 1.0);
        let dots: Vec<f64> = protos.iter().map(|p| dot(&x, p)).collect();
        assert!(close(&prototype_similarity(&x, &protos).unwrap(), &softmax_oracle(&dots), 1e-12));
    }
}

#[test]
fn similarity_rejects_non_finite_input() {
    let err = prototype_similarity(&[f64::NAN], &[vec![1.0]]).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
    assert!(prototype_similarity(&[1.0], &[]).is_err());
}

#[test]
fn biencoder_rows_are_shift_invariant() {
    let mut r = rng::stream(2, 2);
    let latents = Tensor::from_rows(&random_rows(&mut r, 3, 4, 1.0)).unwrap();
    let text = Tensor::new(&[2, 5, 4], rng::normal_vec(&mut r, 40, 0.1)).unwrap();
    let mut tape = Tape::new();
    let (x, t) = (tape.constant(latents), tape.constant(text));
    let m = biencoder_matches(&mut tape, x, t).unwrap();
    let shifted = tape.add_scalar(m, 3.75).unwrap();
    let logits_a = tape.scale(m, 1.0 / DEFAULT_TEMPERATURE).unwrap();
    let logits_b = tape.scale(shifted, 1.0 / DEFAULT_TEMPERATURE).unwrap();
    let a = tape.softmax_last(logits_a).unwrap();
    let b = tape.softmax_last(logits_b).unwrap();
    assert!(close(tape.value(a).data(), tape.value(b).data(), 1e-12));
}

#[test]
fn biencoder_single_category_is_certain() {
    let (model, feats) = model(small_text(6), 2, 1, 2, 1.0, 0);
    for p in model.predict(&feats).unwrap() {
        assert!(p.rows.iter().all(|row| row == &[1.0]));
        assert_eq!(p.predicted, 0);
    }
}

#[test]
fn biencoder_rows_match_explicit_encoding() {
    let backbone = small_text(6);
    let (model, feats) = model(backbone.clone(), 2, 3, 2, 1.0, 4);
    let Backbone::Text(enc) = &backbone else { unreachable!() };
    let preds = model.predict(&feats).unwrap();
    for (i, pred) in preds.iter().enumerate() {
        let x = feats.normalized.row(i);
        for k in 0..2 {
            let mut tape = Tape::new();
            let p = tape.constant(model.params().get(1 + k).tensor().clone());
            let logits: Vec<f64> = (0..3)
                .map(|c| {
                    let g = enc.encode_text(&mut tape, Some(p), &[enc.table().category_token(c)]).unwrap();
                    dot(x, tape.value(g).data()) / DEFAULT_TEMPERATURE
                })
                .collect();
            assert!(close(&pred.rows[k], &softmax_oracle(&logits), 1e-12));
        }
    }
}

#[test]
fn singleencoder_sigmoid_values() {
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::new(&[1, 1, 2], vec![0.0, -50.0]).unwrap());
    let s = singleencoder_probs(&mut tape, m).unwrap();
    assert_eq!(tape.value(s).data()[0], 0.5);
    assert!(tape.value(s).data()[1] < 1e-20);
}

#[test]
fn singleencoder_rows_match_explicit_fusion_scores() {
    let backbone = small_fusion(6);
    let (model, feats) = model(backbone.clone(), 2, 3, 2, 1.0, 1);
    let Backbone::Fusion(enc) = &backbone else { unreachable!() };
    let preds = model.predict(&feats).unwrap();
    for (i, pred) in preds.iter().enumerate().take(3) {
        for k in 0..2 {
            let mut tape = Tape::new();
            let p = tape.constant(model.params().get(1 + k).tensor().clone());
            let want: Vec<f64> = (0..3)
                .map(|c| {
                    let s = enc
                        .fusion_match(&mut tape, feats.raw.row(i), p, &[enc.table().category_token(c)])
                        .unwrap();
                    1.0 / (1.0 + math::exp(-tape.value(s).item()))
                })
                .collect();
            assert!(close(&pred.rows[k], &want, 1e-12));
        }
    }
}

#[test]
fn mixture_with_one_prototype_is_the_row() {
    let (model, feats) = model(small_text(6), 1, 4, 2, 0.0, 2);
    for p in model.predict(&feats).unwrap() {
        assert_eq!(p.weights, vec![1.0]);
        assert_eq!(p.scores, p.rows[0]);
    }
}

#[test]
fn mixture_tie_goes_to_lowest_index() {
    let p = mixture_predict(&[0.5, 0.5], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!(p.scores, vec![0.5, 0.5]);
    assert_eq!(p.predicted, 0);
}

#[test]
fn mixture_matches_double_loop() {
    let mut r = rng::stream(3, 3);
    for _ in 0..20 {
        let logits = rng::normal_vec(&mut r, 3, 1.0);
        let w = softmax_oracle(&logits);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| softmax_oracle(&rng::normal_vec(&mut r, 4, 1.0))).collect();
        let got = mixture_predict(&w, &rows).unwrap();
        let mut want = vec![0.0; 4];
        for (k, row) in rows.iter().enumerate() {
            for c in 0..4 {
                want[c] += w[k] * row[c];
            }
        }
        assert!(close(&got.scores, &want, 1e-12));
    }
}

#[test]
fn weights_sum_to_one_and_scores_are_probabilities() {
    let (model, _) = model(small_text(6), 3, 4, 2, 1.0, 5);
    let mut r = rng::stream(6, 6);
    let rows = random_rows(&mut r, 1000, 6, 3.0);
    let feats = model.backbone().features(&Tensor::from_rows(&rows).unwrap()).unwrap();
    for p in model.predict(&feats).unwrap() {
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(p.scores.iter().all(|s| (0.0..=1.0).contains(s)), "{:?}", p.scores);
    }
}

#[test]
fn r1_r2_known_values() {
    let protos = [vec![0.0], vec![4.0]];
    let latents = [vec![1.0], vec![3.0]];
    assert_eq!(r1_value(&protos, &latents).unwrap(), 1.0);
    assert_eq!(r2_value(&protos, &latents).unwrap(), 1.0);
    // A prototype sitting on a latent costs nothing.
    assert_eq!(r1_value(&[vec![3.0, 1.0]], &[vec![0.0, 0.0], vec![3.0, 1.0]]).unwrap(), 0.0);
    assert_eq!(r2_value(&protos, &[vec![4.0], vec![0.0], vec![4.0]]).unwrap(), 0.0);
    assert!(r1_value(&protos, &[]).is_err());
    assert!(r2_value(&protos, &[]).is_err());
}

#[test]
fn r2_with_one_prototype_is_mean_squared_distance() {
    let mut r = rng::stream(7, 7);
    let p = rng::normal_vec(&mut r, 5, 1.0);
    let xs = random_rows(&mut r, 8, 5, 1.0);
    let want = xs.iter().map(|x| sq(x, &p)).sum::<f64>() / 8.0;
    assert!((r2_value(&[p], &xs).unwrap() - want).abs() <= 1e-12);
}

#[test]
fn regularizers_match_double_loops() {
    let mut r = rng::stream(8, 8);
    for _ in 0..100 {
        let (n, k, d) = (r.random_range(1..=10), r.random_range(1..=10), r.random_range(1..=10));
        let protos = random_rows(&mut r, k, d, 1.0);
        let xs = random_rows(&mut r, n, d, 1.0);
        let r1 = protos
            .iter()
            .map(|p| xs.iter().map(|x| sq(p, x)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / k as f64;
        let r2 = xs
            .iter()
            .map(|x| protos.iter().map(|p| sq(x, p)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / n as f64;
        assert!((r1_value(&protos, &xs).unwrap() - r1).abs() <= 1e-12);
        assert!((r2_value(&protos, &xs).unwrap() - r2).abs() <= 1e-12);
    }
}

#[test]
fn uniform_predictor_costs_ln_c() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::full(&[3, 5], 0.2));
    let (ce, clamped) = cross_entropy(&mut tape, s, &[0, 4, 2]).unwrap();
    assert!((tape.value(ce).item() - math::ln(5.0)).abs() < 1e-12);
    assert_eq!(clamped, 0);
}

#[test]
fn zero_probability_is_clamped_and_counted() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(&[2, 2], vec![0.0, 1.0, 0.5, 0.5]).unwrap());
    let (ce, clamped) = cross_entropy(&mut tape, s, &[0, 1]).unwrap();
    assert_eq!(clamped, 1);
    let want = -(math::ln(PROB_FLOOR) + math::ln(0.5)) / 2.0;
    assert!((tape.value(ce).item() - want).abs() < 1e-12);
    assert!(cross_entropy(&mut tape, s, &[0, 2]).is_err());
}

#[test]
fn bce_edge_values() {
    let c = 4;
    let mut tape = Tape::new();
    let mut perfect = vec![0.0; 2 * c];
    perfect[1] = 1.0;
    perfect[c + 3] = 1.0;
    let s = tape.constant(Tensor::new(&[2, c], perfect).unwrap());
    let (bce, _) = binary_cross_entropy(&mut tape, s, &[1, 3]).unwrap();
    assert!(tape.value(bce).item() * c as f64 <= c as f64 * 1e-11);

    let s = tape.constant(Tensor::full(&[2, c], 0.5));
    let (bce, clamped) = binary_cross_entropy(&mut tape, s, &[1, 3]).unwrap();
    assert_eq!(clamped, 0);
    // Per-category average is ln 2, so the sum over categories is C ln 2.
    assert!((tape.value(bce).item() * c as f64 - c as f64 * math::ln(2.0)).abs() < 1e-12);
}

#[test]
fn bce_matches_double_loop() {
    let mut r = rng::stream(9, 9);
    let (b, c) = (5, 3);
    let scores: Vec<f64> = (0..b * c).map(|_| r.random_range(0.01..0.99)).collect();
    let labels = [0, 2, 1, 1, 0];
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(&[b, c], scores.clone()).unwrap());
    let (bce, _) = binary_cross_entropy(&mut tape, s, &labels).unwrap();
    let mut want = 0.0;
    for i in 0..b {
        for j in 0..c {
            let (p, t) = (scores[i * c + j], if labels[i] == j { 1.0 } else { 0.0 });
            want -= t * math::ln(p) + (1.0 - t) * math::ln(1.0 - p);
        }
    }
    assert!((tape.value(bce).item() - want / (b * c) as f64).abs() < 1e-12);
}

fn total_loss(model: &PtpModel, feats: &Features, rows: &[usize], labels: &[usize]) -> (f64, f64, f64, f64) {
    let mut tape = Tape::new();
    let vars = model.params().register(&mut tape);
    let t = model.loss(&mut tape, &vars, feats, rows, labels).unwrap();
    let v = |x| tape.value(x).item();
    (v(t.total), v(t.data), v(t.r1), v(t.r2))
}

#[test]
fn lambda_zero_loss_is_the_data_term() {
    let (model, feats) = model(small_text(6), 2, 3, 2, 0.0, 3);
    let (total, data, _, _) = total_loss(&model, &feats, &[0, 1, 2, 3], &[0, 1, 2, 0]);
    assert_eq!(total.to_bits(), data.to_bits());
}

#[test]
fn biencoder_loss_matches_recomputation() {
    for tau in [DEFAULT_TEMPERATURE, 1.0] {
        biencoder_loss_case(tau);
    }
}

fn biencoder_loss_case(tau: f64) {
    let backbone = small_text(6);
    let (mut model, feats) = model(backbone.clone(), 2, 3, 2, 0.7, 11);
    model.config.tau = tau;
    let Backbone::Text(enc) = &backbone else { unreachable!() };
    let (rows, labels) = ([5, 1, 3, 2], [2, 0, 1, 1]);
    let (total, ..) = total_loss(&model, &feats, &rows, &labels);

    let protos = model.prototypes();
    let mut tape = Tape::new();
    let text: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|k| {
            let p = tape.constant(model.params().get(1 + k).tensor().clone());
            (0..3)
                .map(|c| {
                    let g = enc.encode_text(&mut tape, Some(p), &[enc.table().category_token(c)]).unwrap();
                    tape.value(g).data().to_vec()
                })
                .collect()
        })
        .collect();
    let xs: Vec<&[f64]> = rows.iter().map(|&i| feats.normalized.row(i)).collect();
    let mut ce = 0.0;
    for (x, &y) in xs.iter().zip(&labels) {
        let w = softmax_oracle(&protos.iter().map(|p| dot(x, p)).collect::<Vec<_>>());
        let mut prob = 0.0;
        for k in 0..2 {
            let row = softmax_oracle(&text[k].iter().map(|g| dot(x, g) / tau).collect::<Vec<_>>());
            prob += w[k] * row[y];
        }
        ce -= math::ln(prob.max(PROB_FLOOR));
    }
    ce /= 4.0;
    let es: Vec<&[f64]> = rows.iter().map(|&i| feats.encoded.row(i)).collect();
    let r1 = protos.iter().map(|p| es.iter().map(|e| sq(p, e)).fold(f64::INFINITY, f64::min)).sum::<f64>() / 2.0;
    let r2 = es.iter().map(|e| protos.iter().map(|p| sq(e, p)).fold(f64::INFINITY, f64::min)).sum::<f64>() / 4.0;
    let want = ce + 0.7 * (r1 + r2);
    assert!((total - want).abs() <= 1e-10, "{total} vs {want}");
}

#[test]
fn r1_minimum_is_over_the_batch_only() {
    let (model, feats) = model(small_text(6), 2, 3, 2, 1.0, 12);
    let protos = model.prototypes();
    // The batch excludes the rows the prototypes were placed on, so the
    // batch minimum must exceed the global one.
    let on_proto: Vec<usize> = (0..feats.len()).filter(|&i| protos.iter().any(|p| p == feats.encoded.row(i))).collect();
    assert_eq!(on_proto.len(), 2);
    let batch: Vec<usize> = (0..feats.len()).filter(|i| !on_proto.contains(i)).collect();
    let labels = vec![0; batch.len()];
    let (_, _, r1, _) = total_loss(&model, &feats, &batch, &labels);
    let want = protos
        .iter()
        .map(|p| batch.iter().map(|&i| sq(p, feats.encoded.row(i))).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / 2.0;
    assert!(r1 > 0.0);
    assert!((r1 - want).abs() <= 1e-12);
}

fn gradcheck(model: &PtpModel, feats: &Features) {
    let rows = [0, 1, 2, 3];
    let labels = [0, 2, 1, 1];
    let report = check_gradients(model.params(), 1e-5, 1e-4, |tape, vars| {
        Ok(model.loss(tape, vars, feats, &rows, &labels)?.total)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn biencoder_loss_gradient_matches_finite_differences() {
    let (model, feats) = model(small_text(8), 2, 3, 2, 1.0, 13);
    gradcheck(&model, &feats);
}

#[test]
fn singleencoder_loss_gradient_matches_finite_differences() {
    let (model, feats) = model(small_fusion(8), 2, 3, 2, 1.0, 14);
    gradcheck(&model, &feats);
}

#[test]
fn real_offset_loss_gradient_matches_finite_differences() {
    let mut r = rng::stream(15, 15);
    let text = Tensor::from_rows(&random_rows(&mut r, 3, 8, 1.0)).unwrap();
    let backbone = Backbone::surrogate(EncoderMode::RealOffset, 8, Some(&text)).unwrap();
    let (mut model, feats) = model(backbone, 2, 3, 1, 1.0, 15);
    // Move the offsets off zero so every path is exercised.
    let i = model.params().position(OFFSET_PARAM).unwrap();
    model.params_mut().set_values(i, &rng::normal_vec(&mut r, 16, 0.3)).unwrap();
    gradcheck(&model, &feats);
}

#[test]
fn parameter_count_formula() {
    let enc = FrozenTextEncoder::new(TextEncoderConfig {
        d_tok: 512,
        d_lat: 512,
        ..TextEncoderConfig::default()
    })
    .unwrap();
    let backbone = Backbone::Text(Arc::new(enc));
    let feats = features(&backbone, 5, 0);
    let catalog = CategoryCatalog::synthetic(3, 1024).unwrap();
    let m = PtpModel::new(ModelConfig::new(EncoderMode::BiEncoder, 5), backbone, &catalog, &feats).unwrap();
    assert_eq!(m.param_count(), 43_520);
    assert_eq!(m.params().numel(), 43_520);
    assert_eq!(m.param_count(), (16 + 1) * 512 * 5);

    let tiny = Backbone::Text(Arc::new(
        FrozenTextEncoder::new(TextEncoderConfig {
            vocab_size: 16,
            d_tok: 2,
            n_heads: 1,
            d_lat: 2,
            ..TextEncoderConfig::default()
        })
        .unwrap(),
    ));
    let feats = features(&tiny, 1, 0);
    let config = ModelConfig {
        prompt_len: 1,
        ..ModelConfig::new(EncoderMode::BiEncoder, 1)
    };
    let m = PtpModel::new(config, tiny, &CategoryCatalog::synthetic(2, 16).unwrap(), &feats).unwrap();
    assert_eq!(m.param_count(), 4);
}

#[test]
fn real_offset_adds_one_offset_per_prototype() {
    let mut r = rng::stream(16, 16);
    let text = Tensor::from_rows(&random_rows(&mut r, 4, 12, 1.0)).unwrap();
    let backbone = Backbone::surrogate(EncoderMode::RealOffset, 12, Some(&text)).unwrap();
    let (k, m) = (3, 2);
    let (model, _) = model(backbone, k, 4, m, 1.0, 0);
    let enumerated: usize = model.params().iter().map(|p| p.tensor().len()).sum();
    assert_eq!(enumerated, m * 64 * k + k * 12 + k * 12);
    assert_eq!(model.param_count(), enumerated);
}

#[test]
fn prototypes_start_on_distinct_examples() {
    let (model, feats) = model(small_text(6), 3, 3, 2, 1.0, 17);
    let protos = model.prototypes();
    for (i, p) in protos.iter().enumerate() {
        assert!((0..feats.len()).any(|r| feats.encoded.row(r) == p.as_slice()));
        assert!(protos[i + 1..].iter().all(|q| q != p));
    }
    assert!(model.params().get(1).tensor().data().iter().all(|v| v.abs() < 0.2));
}

#[test]
fn shifting_one_prompts_matches_keeps_the_prediction() {
    let mut r = rng::stream(18, 18);
    let x = Tensor::from_rows(&random_rows(&mut r, 4, 6, 1.0)).unwrap();
    let text = Tensor::new(&[2, 3, 6], rng::normal_vec(&mut r, 36, 0.1)).unwrap();
    let protos = Tensor::from_rows(&random_rows(&mut r, 2, 6, 1.0)).unwrap();
    let run = |shift: f64| {
        let mut tape = Tape::new();
        let (xv, tv, pv) = (tape.constant(x.clone()), tape.constant(text.clone()), tape.constant(protos.clone()));
        let m = biencoder_matches(&mut tape, xv, tv).unwrap();
        let mut bump = vec![0.0; 4 * 2 * 3];
        for b in 0..4 {
            for c in 0..3 {
                bump[b * 6 + c] = shift;
            }
        }
        let bump = tape.constant(Tensor::new(&[4, 2, 3], bump).unwrap());
        let m = tape.add(m, bump).unwrap();
        let l = tape.scale(m, 1.0 / DEFAULT_TEMPERATURE).unwrap();
        let rows = tape.softmax_last(l).unwrap();
        let w = similarity_weights(&mut tape, xv, pv).unwrap();
        let s = mixture(&mut tape, w, rows).unwrap();
        let s = tape.value(s).clone();
        (0..4).map(|b| argmax_lowest(s.row(b))).collect::<Vec<_>>()
    };
    assert_eq!(run(0.0), run(0.37));
}

#[test]
fn checkpoint_parameters_must_fit() {
    let (model, _) = model(small_text(6), 2, 3, 2, 1.0, 0);
    let catalog = CategoryCatalog::synthetic(3, 64).unwrap();
    let again =
        PtpModel::from_parameters(model.config().clone(), model.backbone().clone(), &catalog, model.params().clone())
            .unwrap();
    assert_eq!(again.params(), model.params());
    let wrong = ModelConfig {
        k: 3,
        ..model.config().clone()
    };
    assert!(PtpModel::from_parameters(wrong, model.backbone().clone(), &catalog, model.params().clone()).is_err());
}
