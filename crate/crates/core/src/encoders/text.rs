use alloc::string::String;
use alloc::vec::Vec;

use super::tokens::{TokenEmbeddingTable, TokenId};
use super::transformer::{gaussian, Transformer};
use super::{category_block, group_by_length, reorder, stack_prompts};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, purpose};
use crate::tensorad::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_tok: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub d_lat: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            d_tok: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            d_lat: 64,
            seed: 0,
        }
    }
}

/// Frozen surrogate text tower `g(·)`: token/prompt vectors → transformer →
/// mean pool → projection → unit vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTextEncoder {
    config: TextEncoderConfig,
    table: TokenEmbeddingTable,
    transformer: Transformer,
    projection: Tensor,
}

impl FrozenTextEncoder {
    pub fn new(config: TextEncoderConfig) -> Result<Self> {
        let table = TokenEmbeddingTable::random(config.vocab_size, config.d_tok, config.seed)?;
        let mut r = rng::stream(config.seed, purpose::TEXT_ENCODER);
        let transformer = Transformer::random(
            &mut r,
            config.d_tok,
            config.n_heads,
            config.n_layers,
            config.ffn_mult * config.d_tok,
        )?;
        let projection = gaussian(&mut r, &[config.d_tok, config.d_lat], 1.0 / math::sqrt(config.d_tok as f64));
        Ok(Self {
            config,
            table,
            transformer,
            projection,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
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

    /// Encodes `[S, L, d_tok]` sequences into `[S, d_lat]` unit vectors.
    fn encode_sequences(&self, tape: &mut Tape, seqs: Var) -> Result<Var> {
        let h = self.transformer.forward(tape, seqs)?;
        let pooled = tape.mean_axis(h, 1)?;
        let proj = tape.constant(self.projection.clone());
        let z = tape.matmul(pooled, proj)?;
        tape.l2_normalize(z)
    }

    /// `g(prompt ++ category)` for a single prompt (`[m, d_tok]`, or none).
    pub fn encode_text(&self, tape: &mut Tape, prompt: Option<Var>, category: &[TokenId]) -> Result<Var> {
        if category.is_empty() {
            return Err(Error::contract(if prompt.is_none() {
                "empty total sequence"
            } else {
                "category has no tokens"
            }));
        }
        let out = match prompt {
            Some(p) => self.encode_prompted(tape, &[p], &[category.to_vec()])?,
            None => {
                let emb = self.table.embed(category)?;
                let seq = tape.constant(emb.reshaped(&[1, category.len(), self.d_tok()])?);
                self.encode_sequences(tape, seq)?
            }
        };
        tape.reshape(out, &[self.d_lat()])
    }

    /// Encodes every (prompt, category) pair: `[K, C, d_lat]`.
    ///
    /// All prompts must share the shape `[m, d_tok]`.
    pub fn encode_prompted(&self, tape: &mut Tape, prompts: &[Var], categories: &[Vec<TokenId>]) -> Result<Var> {
        if categories.is_empty() {
            return Err(Error::contract("empty category catalog"));
        }
        if categories.iter().any(Vec::is_empty) {
            return Err(Error::contract("category has no tokens"));
        }
        let (stacked, m) = stack_prompts(tape, prompts, self.d_tok())?;
        let k = prompts.len();
        let mut pieces = Vec::new();
        let mut order = Vec::new();
        for (len, members) in group_by_length(categories) {
            let s = k * members.len();
            let idx: Vec<usize> = (0..k).flat_map(|p| core::iter::repeat_n(p, members.len())).collect();
            let pr = tape.index_select(stacked, &idx)?;
            let pr = tape.reshape(pr, &[s, m, self.d_tok()])?;
            let cats = category_block(&self.table, categories, &members, k, len)?;
            let cats = tape.constant(cats);
            let seqs = tape.concat(&[pr, cats], 1)?;
            pieces.push(self.encode_sequences(tape, seqs)?);
            order.extend((0..k).flat_map(|p| members.iter().map(move |&c| (p, c))));
        }
        let flat = reorder(tape, &pieces, &order, categories.len())?;
        tape.reshape(flat, &[k, categories.len(), self.d_lat()])
    }

    pub fn named_weights(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push((String::from("text.token_table"), self.table.matrix()));
        self.transformer.named_weights("text", &mut out);
        out.push((String::from("text.projection"), &self.projection));
        out
    }
}
