//! Frozen encoder surrogates.
//!
//! None of these types expose learnable state: every forward pass places the
//! weights on the tape as constants, so gradients can only reach the prompt
//! vectors the caller passes in.

mod fusion;
mod image;
mod text;
mod tokens;
mod transformer;

pub use fusion::{FrozenFusionEncoder, FusionEncoderConfig};
pub use image::{FrozenImageEncoder, ImageEncoderMode, LatentVector};
pub use text::{FrozenTextEncoder, TextEncoderConfig};
pub use tokens::{TokenEmbeddingTable, TokenId, MANUAL_PROMPT_LEN, SPECIAL_TOKENS};
pub use transformer::positions as sinusoidal_positions;

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensorad::{Tape, Tensor, Var};

/// Stacks `[m, d]` prompts into `[K, m·d]`.
fn stack_prompts(tape: &mut Tape, prompts: &[Var], d: usize) -> Result<(Var, usize)> {
    let first = prompts.first().ok_or_else(|| Error::contract("no prompts given"))?;
    let shape = tape.shape(*first).to_vec();
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::shape("prompt", &[&shape]));
    }
    let m = shape[0];
    let mut rows = Vec::with_capacity(prompts.len());
    for p in prompts {
        if tape.shape(*p) != shape.as_slice() {
            return Err(Error::shape("prompt", &[&shape, tape.shape(*p)]));
        }
        rows.push(tape.reshape(*p, &[1, m * d])?);
    }
    let stacked = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
    Ok((stacked, m))
}

/// Category indices grouped by token count, each group in catalog order.
fn group_by_length(categories: &[Vec<TokenId>]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (c, toks) in categories.iter().enumerate() {
        groups.entry(toks.len()).or_default().push(c);
    }
    groups.into_iter().collect()
}

/// `[repeat · members, len, d]` embeddings, cycling `members` fastest.
fn category_block(
    table: &TokenEmbeddingTable,
    categories: &[Vec<TokenId>],
    members: &[usize],
    repeat: usize,
    len: usize,
) -> Result<Tensor> {
    let embedded: Vec<Tensor> = members.iter().map(|&c| table.embed(&categories[c])).collect::<Result<_>>()?;
    let d = table.d_tok();
    let mut data = Vec::with_capacity(repeat * members.len() * len * d);
    for _ in 0..repeat {
        for e in &embedded {
            data.extend_from_slice(e.data());
        }
    }
    Tensor::new(&[repeat * members.len(), len, d], data)
}

/// Concatenates `pieces` along axis 0 and permutes rows so that row
/// `r·C + c` holds the row tagged `(r, c)` in `order`.
fn reorder(tape: &mut Tape, pieces: &[Var], order: &[(usize, usize)], c_total: usize) -> Result<Var> {
    let identity = pieces.len() == 1 && order.iter().enumerate().all(|(i, &(r, c))| r * c_total + c == i);
    if identity {
        return Ok(pieces[0]);
    }
    let all = if pieces.len() == 1 { pieces[0] } else { tape.concat(pieces, 0)? };
    let mut src = vec![0; order.len()];
    for (i, &(r, c)) in order.iter().enumerate() {
        src[r * c_total + c] = i;
    }
    tape.index_select(all, &src)
}
