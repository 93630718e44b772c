use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::tokens::{TokenEmbeddingTable, TokenId};
use super::transformer::{gaussian, Transformer};
use super::{category_block, group_by_length, reorder, stack_prompts};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, purpose};
use crate::tensorad::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionEncoderConfig {
    pub vocab_size: usize,
    pub d_tok: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub d_lat: usize,
    pub pseudo_tokens: usize,
    pub seed: u64,
}

impl Default for FusionEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            d_tok: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            d_lat: 64,
            pseudo_tokens: 4,
            seed: 0,
        }
    }
}

/// Frozen single-encoder surrogate. An image latent is projected to a few
/// pseudo-tokens and fused with text tokens in one transformer; the first
/// position feeds a `tanh` pooler and a scalar match head.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenFusionEncoder {
    config: FusionEncoderConfig,
    table: TokenEmbeddingTable,
    image_projection: Tensor,
    transformer: Transformer,
    pooler_weight: Tensor,
    pooler_bias: Tensor,
    match_weight: Tensor,
    match_bias: Tensor,
}

impl FrozenFusionEncoder {
    pub fn new(config: FusionEncoderConfig) -> Result<Self> {
        if config.pseudo_tokens == 0 {
            return Err(Error::contract("fusion encoder needs at least one pseudo-token"));
        }
        let table = TokenEmbeddingTable::random(config.vocab_size, config.d_tok, config.seed)?;
        let mut r = rng::stream(config.seed, purpose::FUSION_ENCODER);
        let (d_tok, d_lat, p) = (config.d_tok, config.d_lat, config.pseudo_tokens);
        let image_projection = gaussian(&mut r, &[d_lat, p * d_tok], 1.0 / math::sqrt(d_lat as f64));
        let transformer = Transformer::random(&mut r, d_tok, config.n_heads, config.n_layers, config.ffn_mult * d_tok)?;
        let pooler_weight = gaussian(&mut r, &[d_tok, d_lat], 1.0 / math::sqrt(d_tok as f64));
        let match_weight = gaussian(&mut r, &[d_lat, 1], 1.0 / math::sqrt(d_lat as f64));
        Ok(Self {
            config,
            table,
            image_projection,
            transformer,
            pooler_weight,
            pooler_bias: Tensor::zeros(&[d_lat]),
            match_weight,
            match_bias: Tensor::zeros(&[1]),
        })
    }

    pub fn config(&self) -> &FusionEncoderConfig {
        &self.config
    }

    pub fn table(&self) -> &TokenEmbeddingTable {
        &self.table
    }

    pub fn d_tok(&self) -> usize {
        self.config.d_tok
    }

    pub fn d_lat(&self) -> usize {
        self.config.d_lat
    }

    /// Projects `[B, d_lat]` latents to `[B, p, d_tok]` pseudo-tokens.
    pub fn pseudo_tokens(&self, tape: &mut Tape, latents: Var) -> Result<Var> {
        let shape = tape.shape(latents).to_vec();
        if shape.len() != 2 || shape[1] != self.d_lat() {
            return Err(Error::shape("pseudo_tokens", &[&shape]));
        }
        let w = tape.constant(self.image_projection.clone());
        let z = tape.matmul(latents, w)?;
        tape.reshape(z, &[shape[0], self.config.pseudo_tokens, self.d_tok()])
    }

    fn special(&self, tape: &mut Tape, id: TokenId, s: usize) -> Result<Var> {
        let e = self.table.embed(&[id])?;
        let data: Vec<f64> = core::iter::repeat_n(e.data(), s).flatten().copied().collect();
        Ok(tape.constant(Tensor::new(&[s, 1, self.d_tok()], data)?))
    }

    /// First-position output of `[S, L, d_tok]` through the pooler head.
    fn pool(&self, tape: &mut Tape, seqs: Var) -> Result<Var> {
        let s = tape.shape(seqs)[0];
        let h = self.transformer.forward(tape, seqs)?;
        let first = tape.narrow(h, 1, 0, 1)?;
        let first = tape.reshape(first, &[s, self.d_tok()])?;
        let w = tape.constant(self.pooler_weight.clone());
        let b = tape.constant(self.pooler_bias.clone());
        let z = tape.matmul(first, w)?;
        let z = tape.add_broadcast(z, b)?;
        tape.tanh(z)
    }

    /// Pooler output with empty text: `[CLS] image [SEP]`. `[B, d_lat]`.
    pub fn pooled(&self, tape: &mut Tape, latents: Var) -> Result<Var> {
        let pseudo = self.pseudo_tokens(tape, latents)?;
        let b = tape.shape(pseudo)[0];
        let cls = self.special(tape, self.table.cls, b)?;
        let sep = self.special(tape, self.table.sep, b)?;
        let seqs = tape.concat(&[cls, pseudo, sep], 1)?;
        self.pool(tape, seqs)
    }

    /// Match scores for every (image, prompt, category): `[B, K, C]`.
    pub fn match_scores(
        &self,
        tape: &mut Tape,
        latents: Var,
        prompts: &[Var],
        categories: &[Vec<TokenId>],
    ) -> Result<Var> {
        let pseudo = self.pseudo_tokens(tape, latents)?;
        self.match_from_pseudo(tape, pseudo, prompts, categories)
    }

    /// As [`Self::match_scores`], from explicit `[B, p, d_tok]` pseudo-tokens.
    pub fn match_from_pseudo(
        &self,
        tape: &mut Tape,
        pseudo: Var,
        prompts: &[Var],
        categories: &[Vec<TokenId>],
    ) -> Result<Var> {
        if categories.is_empty() {
            return Err(Error::contract("empty category catalog"));
        }
        if categories.iter().any(Vec::is_empty) {
            return Err(Error::contract("category has no tokens"));
        }
        let shape = tape.shape(pseudo).to_vec();
        if shape.len() != 3 || shape[2] != self.d_tok() {
            return Err(Error::shape("match_from_pseudo", &[&shape]));
        }
        let batch = shape[0];
        let (stacked, m) = stack_prompts(tape, prompts, self.d_tok())?;
        let k = prompts.len();
        let c_total = categories.len();
        let mut pieces = Vec::new();
        let mut order = Vec::new();
        for (len, members) in group_by_length(categories) {
            let g = members.len();
            let s = batch * k * g;
            let mut b_idx = Vec::with_capacity(s);
            let mut k_idx = Vec::with_capacity(s);
            for b in 0..batch {
                for p in 0..k {
                    for &c in &members {
                        b_idx.push(b);
                        k_idx.push(p);
                        order.push((b * k + p, c));
                    }
                }
            }
            let cls = self.special(tape, self.table.cls, s)?;
            let img = tape.index_select(pseudo, &b_idx)?;
            let sep = self.special(tape, self.table.sep, s)?;
            let pr = tape.index_select(stacked, &k_idx)?;
            let pr = tape.reshape(pr, &[s, m, self.d_tok()])?;
            let cats = category_block(&self.table, categories, &members, batch * k, len)?;
            let cats = tape.constant(cats);
            let seqs = tape.concat(&[cls, img, sep, pr, cats], 1)?;
            let pooled = self.pool(tape, seqs)?;
            let w = tape.constant(self.match_weight.clone());
            let bias = tape.constant(self.match_bias.clone());
            let score = tape.matmul(pooled, w)?;
            pieces.push(tape.add_broadcast(score, bias)?);
        }
        let flat = reorder(tape, &pieces, &order, c_total)?;
        tape.reshape(flat, &[batch, k, c_total])
    }

    /// Scalar match for one image latent, one prompt and one category.
    pub fn fusion_match(
        &self,
        tape: &mut Tape,
        latent: &[f64],
        prompt: Var,
        category: &[TokenId],
    ) -> Result<Var> {
        let x = tape.constant(Tensor::new(&[1, latent.len()], latent.to_vec())?);
        let s = self.match_scores(tape, x, &[prompt], &[category.to_vec()])?;
        tape.reshape(s, &[])
    }

    pub fn named_weights(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (String::from("fusion.token_table"), self.table.matrix()),
            (String::from("fusion.image_projection"), &self.image_projection),
        ];
        self.transformer.named_weights("fusion", &mut out);
        out.push((String::from("fusion.pooler_weight"), &self.pooler_weight));
        out.push((String::from("fusion.pooler_bias"), &self.pooler_bias));
        out.push((String::from("fusion.match_weight"), &self.match_weight));
        out.push((String::from("fusion.match_bias"), &self.match_bias));
        out
    }
}
