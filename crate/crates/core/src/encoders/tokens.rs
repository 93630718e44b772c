use alloc::format;
use alloc::vec::Vec;

use super::transformer::gaussian;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::tensorad::Tensor;

pub type TokenId = u32;

/// Number of reserved ids at the start of the vocabulary.
pub const SPECIAL_TOKENS: u32 = 3;
/// Length of the fixed hand-written prompt used by the manual-prompt baseline.
pub const MANUAL_PROMPT_LEN: usize = 4;

/// Frozen vocabulary embeddings, `vocab_size × d_tok`, entries ~ N(0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddingTable {
    matrix: Tensor,
    pub cls: TokenId,
    pub sep: TokenId,
    pub pad: TokenId,
}

impl TokenEmbeddingTable {
    pub fn random(vocab_size: usize, d_tok: usize, seed: u64) -> Result<Self> {
        if vocab_size <= SPECIAL_TOKENS as usize + MANUAL_PROMPT_LEN || d_tok == 0 {
            return Err(Error::contract(format!(
                "vocabulary of {vocab_size} tokens with width {d_tok} is too small"
            )));
        }
        let mut r = rng::stream(seed, purpose::TOKEN_TABLE);
        Ok(Self {
            matrix: gaussian(&mut r, &[vocab_size, d_tok], 1.0),
            cls: 0,
            sep: 1,
            pad: 2,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn d_tok(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// Token for category index `j`: ids wrap past the specials.
    pub fn category_token(&self, j: usize) -> TokenId {
        let usable = self.vocab_size() as u32 - SPECIAL_TOKENS;
        SPECIAL_TOKENS + (j as u32 % usable)
    }

    /// The frozen manual prompt: the last few ids of the vocabulary.
    pub fn manual_prompt(&self) -> Vec<TokenId> {
        let v = self.vocab_size() as u32;
        (v - MANUAL_PROMPT_LEN as u32..v).collect()
    }

    /// Embeddings of `ids` as `[ids.len(), d_tok]`.
    pub fn embed(&self, ids: &[TokenId]) -> Result<Tensor> {
        let d = self.d_tok();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= self.vocab_size() {
                return Err(Error::contract(format!("token id {id} outside vocabulary")));
            }
            data.extend_from_slice(self.matrix.row(id as usize));
        }
        Tensor::new(&[ids.len(), d], data)
    }
}
