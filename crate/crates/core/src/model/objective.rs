//! Building blocks of the mixture prediction and the training objective,
//! as tape operations plus value-level wrappers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensorad::{Tape, Tensor, Var};

/// Probabilities are clamped to at least this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax over prototypes of `latent · P_k`: `[B, d] × [K, d] → [B, K]`.
pub fn similarity_weights(tape: &mut Tape, latents: Var, prototypes: Var) -> Result<Var> {
    let dots = tape.matmul_nt(latents, prototypes)?;
    tape.softmax_last(dots)
}

/// Per-prompt category distributions for a bi-encoder:
/// softmax over categories of `latent · text / tau`. `text` is `[K, C, d]`,
/// the result `[B, K, C]`.
pub fn biencoder_probs(tape: &mut Tape, latents: Var, text: Var, tau: f64) -> Result<Var> {
    let (sl, st) = (tape.shape(latents).to_vec(), tape.shape(text).to_vec());
    if sl.len() != 2 || st.len() != 3 || sl[1] != st[2] {
        return Err(Error::shape("biencoder_probs", &[&sl, &st]));
    }
    let matches = biencoder_matches(tape, latents, text)?;
    let logits = tape.scale(matches, 1.0 / tau)?;
    tape.softmax_last(logits)
}

/// Raw `latent · text` matches, `[B, K, C]`.
pub fn biencoder_matches(tape: &mut Tape, latents: Var, text: Var) -> Result<Var> {
    let (sl, st) = (tape.shape(latents).to_vec(), tape.shape(text).to_vec());
    if sl.len() != 2 || st.len() != 3 || sl[1] != st[2] {
        return Err(Error::shape("biencoder_matches", &[&sl, &st]));
    }
    let flat = tape.reshape(text, &[st[0] * st[1], st[2]])?;
    let m = tape.matmul_nt(latents, flat)?;
    tape.reshape(m, &[sl[0], st[0], st[1]])
}

/// Per-prompt scores for a single encoder: elementwise sigmoid of matches.
pub fn singleencoder_probs(tape: &mut Tape, matches: Var) -> Result<Var> {
    tape.sigmoid(matches)
}

/// `Σ_k weights[b, k] · rows[b, k, :]`: `[B, K] × [B, K, C] → [B, C]`.
///
/// Rows are probabilities, so the result is clamped to `[0, 1]`; rounding
/// alone can otherwise land one ulp above 1.
pub fn mixture(tape: &mut Tape, weights: Var, rows: Var) -> Result<Var> {
    let (sw, sr) = (tape.shape(weights).to_vec(), tape.shape(rows).to_vec());
    if sw.len() != 2 || sr.len() != 3 || sw[0] != sr[0] || sw[1] != sr[1] {
        return Err(Error::shape("mixture", &[&sw, &sr]));
    }
    let w = tape.reshape(weights, &[sw[0], 1, sw[1]])?;
    let mixed = tape.bmm(w, rows, false)?;
    let mixed = tape.reshape(mixed, &[sr[0], sr[2]])?;
    tape.clamp(mixed, 0.0, 1.0)
}

/// Mean over prototypes of the squared distance to the nearest latent in
/// the batch.
pub fn regularizer_r1(tape: &mut Tape, prototypes: Var, latents: Var) -> Result<Var> {
    let d = tape.sq_dist(prototypes, latents)?;
    let nearest = tape.min_last(d)?;
    tape.mean_all(nearest)
}

/// Mean over the batch of the squared distance to the nearest prototype.
pub fn regularizer_r2(tape: &mut Tape, prototypes: Var, latents: Var) -> Result<Var> {
    let d = tape.sq_dist(latents, prototypes)?;
    let nearest = tape.min_last(d)?;
    tape.mean_all(nearest)
}

fn check_labels(tape: &Tape, scores: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let s = tape.shape(scores);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("loss", &[s, &[labels.len()]]));
    }
    let c = s[1];
    if let Some(y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::contract(alloc::format!("label {y} outside {c} categories")));
    }
    Ok((s[0], c))
}

/// Mean negative log score of the true category. Returns the loss and the
/// number of scores that had to be clamped.
pub fn cross_entropy(tape: &mut Tape, scores: Var, labels: &[usize]) -> Result<(Var, usize)> {
    let (b, c) = check_labels(tape, scores, labels)?;
    let flat = tape.reshape(scores, &[b * c])?;
    let index: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let picked = tape.index_select(flat, &index)?;
    let clamped = tape.value(picked).data().iter().filter(|&&p| p < PROB_FLOOR).count();
    let safe = tape.clamp(picked, PROB_FLOOR, f64::INFINITY)?;
    let logs = tape.log(safe)?;
    let mean = tape.mean_all(logs)?;
    Ok((tape.neg(mean)?, clamped))
}

/// One-vs-rest binary cross-entropy averaged over batch and categories.
pub fn binary_cross_entropy(tape: &mut Tape, scores: Var, labels: &[usize]) -> Result<(Var, usize)> {
    let (b, c) = check_labels(tape, scores, labels)?;
    let clamped = tape
        .value(scores)
        .data()
        .iter()
        .filter(|&&s| !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&s))
        .count();
    let mut target = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        target[i * c + y] = 1.0;
    }
    let complement: Vec<f64> = target.iter().map(|t| 1.0 - t).collect();
    let target = tape.constant(Tensor::new(&[b, c], target)?);
    let complement = tape.constant(Tensor::new(&[b, c], complement)?);

    let s = tape.clamp(scores, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let log_s = tape.log(s)?;
    let neg_s = tape.neg(s)?;
    let one_minus = tape.add_scalar(neg_s, 1.0)?;
    let log_one_minus = tape.log(one_minus)?;
    let pos = tape.mul(target, log_s)?;
    let neg = tape.mul(complement, log_one_minus)?;
    let total = tape.add(pos, neg)?;
    let mean = tape.mean_all(total)?;
    Ok((tape.neg(mean)?, clamped))
}

/// Breakdown of one mixture prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBreakdown {
    /// Similarity weight of each prototype.
    pub weights: Vec<f64>,
    /// Per-prototype category scores, `K × C`.
    pub rows: Vec<Vec<f64>>,
    /// Mixed category scores.
    pub scores: Vec<f64>,
    pub predicted: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = j;
        }
    }
    best
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::contract(alloc::format!("{what} is empty")));
    }
    Tensor::from_rows(rows)
}

/// Similarity weights of one latent against `K` prototypes.
pub fn prototype_similarity(latent: &[f64], prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = tape.constant(matrix(prototypes, "prototype set")?);
    let x = tape.constant(Tensor::new(&[1, latent.len()], latent.to_vec())?);
    let w = similarity_weights(&mut tape, x, p)?;
    Ok(tape.value(w).data().to_vec())
}

/// Value of [`regularizer_r1`] for explicit prototypes and batch latents.
pub fn r1_value(prototypes: &[Vec<f64>], latents: &[Vec<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(matrix(prototypes, "prototype set")?);
    let x = tape.constant(matrix(latents, "batch")?);
    let r = regularizer_r1(&mut tape, p, x)?;
    Ok(tape.value(r).item())
}

/// Value of [`regularizer_r2`] for explicit prototypes and batch latents.
pub fn r2_value(prototypes: &[Vec<f64>], latents: &[Vec<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(matrix(prototypes, "prototype set")?);
    let x = tape.constant(matrix(latents, "batch")?);
    let r = regularizer_r2(&mut tape, p, x)?;
    Ok(tape.value(r).item())
}

/// Mixes explicit per-prototype rows with explicit weights.
pub fn mixture_predict(weights: &[f64], rows: &[Vec<f64>]) -> Result<PredictionBreakdown> {
    let k = weights.len();
    if k == 0 || rows.len() != k {
        return Err(Error::contract("one row per prototype weight is required"));
    }
    let c = rows[0].len();
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::new(&[1, k], weights.to_vec())?);
    let r = matrix(rows, "row set")?;
    let r = tape.constant(r.reshaped(&[1, k, c])?);
    let s = mixture(&mut tape, w, r)?;
    let scores = tape.value(s).data().to_vec();
    Ok(PredictionBreakdown {
        weights: weights.to_vec(),
        rows: rows.to_vec(),
        predicted: argmax_lowest(&scores),
        scores,
    })
}
