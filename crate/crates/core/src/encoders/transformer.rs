use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, EngineRng};
use crate::tensorad::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
struct LayerNormWeights {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNormWeights {
    fn identity(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.constant(self.gain.clone());
        let b = tape.constant(self.bias.clone());
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln_attn: LayerNormWeights,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln_ffn: LayerNormWeights,
    w_up: Tensor,
    w_down: Tensor,
}

/// Frozen pre-norm transformer encoder with sinusoidal positions.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Transformer {
    d_model: usize,
    n_heads: usize,
    blocks: Vec<Block>,
    ln_final: LayerNormWeights,
}

pub(crate) fn gaussian(rng: &mut EngineRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng::normal_vec(rng, n, std)).expect("positive extents")
}

/// Sinusoidal position table `[len, d]`.
pub fn positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = math::pow(10_000.0, (2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { math::sin(angle) } else { math::cos(angle) };
        }
    }
    Tensor::new(&[len, d], data).expect("positive extents")
}

impl Transformer {
    /// Weights are drawn i.i.d. from N(0, (1/√d_model)²).
    pub(crate) fn random(
        rng: &mut EngineRng,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_ffn: usize,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::contract(format!(
                "model width {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let std = 1.0 / math::sqrt(d_model as f64);
        let blocks = (0..n_layers)
            .map(|_| Block {
                ln_attn: LayerNormWeights::identity(d_model),
                wq: gaussian(rng, &[d_model, d_model], std),
                wk: gaussian(rng, &[d_model, d_model], std),
                wv: gaussian(rng, &[d_model, d_model], std),
                wo: gaussian(rng, &[d_model, d_model], std),
                ln_ffn: LayerNormWeights::identity(d_model),
                w_up: gaussian(rng, &[d_model, d_ffn], std),
                w_down: gaussian(rng, &[d_ffn, d_model], std),
            })
            .collect();
        Ok(Self {
            d_model,
            n_heads,
            blocks,
            ln_final: LayerNormWeights::identity(d_model),
        })
    }

    /// `x` is `[S, L, d]`; positions are added here.
    pub(crate) fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(Error::shape("transformer", &[&shape]));
        }
        let (s, l, d) = (shape[0], shape[1], shape[2]);
        let pos = tape.constant(positions(l, d));
        let mut h = tape.add_broadcast(x, pos)?;
        for block in &self.blocks {
            let a = block.ln_attn.apply(tape, h)?;
            let att = self.attention(tape, block, a, s, l)?;
            h = tape.add(h, att)?;
            let f = block.ln_ffn.apply(tape, h)?;
            let up = tape.constant(block.w_up.clone());
            let down = tape.constant(block.w_down.clone());
            let f = tape.matmul(f, up)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, down)?;
            h = tape.add(h, f)?;
        }
        self.ln_final.apply(tape, h)
    }

    fn attention(&self, tape: &mut Tape, block: &Block, x: Var, s: usize, l: usize) -> Result<Var> {
        let (h, dh) = (self.n_heads, self.d_model / self.n_heads);
        let mut heads = |w: &Tensor| -> Result<Var> {
            let wv = tape.constant(w.clone());
            let y = tape.matmul(x, wv)?;
            let y = tape.reshape(y, &[s, l, h, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[s * h, l, dh])
        };
        let q = heads(&block.wq)?;
        let k = heads(&block.wk)?;
        let v = heads(&block.wv)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / math::sqrt(dh as f64))?;
        let probs = tape.softmax_last(scores)?;
        let ctx = tape.bmm(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[s, h, l, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[s, l, self.d_model])?;
        let wo = tape.constant(block.wo.clone());
        tape.matmul(ctx, wo)
    }

    pub(crate) fn named_weights<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.block{i}");
            out.push((format!("{p}.ln_attn.gain"), &b.ln_attn.gain));
            out.push((format!("{p}.ln_attn.bias"), &b.ln_attn.bias));
            out.push((format!("{p}.wq"), &b.wq));
            out.push((format!("{p}.wk"), &b.wk));
            out.push((format!("{p}.wv"), &b.wv));
            out.push((format!("{p}.wo"), &b.wo));
            out.push((format!("{p}.ln_ffn.gain"), &b.ln_ffn.gain));
            out.push((format!("{p}.ln_ffn.bias"), &b.ln_ffn.bias));
            out.push((format!("{p}.w_up"), &b.w_up));
            out.push((format!("{p}.w_down"), &b.w_down));
        }
        out.push((format!("{prefix}.ln_final.gain"), &self.ln_final.gain));
        out.push((format!("{prefix}.ln_final.bias"), &self.ln_final.bias));
    }
}
