use alloc::vec::Vec;

use super::fusion::FrozenFusionEncoder;
use crate::error::{Error, Result};
use crate::tensorad::{Tape, Tensor};

/// A point in the shared image/text embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageEncoderMode {
    /// `f(x)` is a row of a precomputed embedding matrix.
    Lookup,
    /// `f(x)` is the fusion encoder's pooler output over `[CLS] x [SEP]`.
    PooledFusion,
}

/// Frozen image encoder over a table of example latents, addressed by id.
/// Example ids start at `id_offset`.
#[derive(Clone, Copy, Debug)]
pub struct FrozenImageEncoder<'a> {
    rows: &'a Tensor,
    id_offset: u64,
    fusion: Option<&'a FrozenFusionEncoder>,
}

impl<'a> FrozenImageEncoder<'a> {
    pub fn lookup(rows: &'a Tensor, id_offset: u64) -> Self {
        Self {
            rows,
            id_offset,
            fusion: None,
        }
    }

    pub fn pooled_fusion(rows: &'a Tensor, id_offset: u64, fusion: &'a FrozenFusionEncoder) -> Self {
        Self {
            rows,
            id_offset,
            fusion: Some(fusion),
        }
    }

    pub fn mode(&self) -> ImageEncoderMode {
        if self.fusion.is_some() {
            ImageEncoderMode::PooledFusion
        } else {
            ImageEncoderMode::Lookup
        }
    }

    fn raw(&self, id: u64) -> Result<&'a [f64]> {
        let row = id
            .checked_sub(self.id_offset)
            .filter(|&r| (r as usize) < self.rows.rows())
            .ok_or(Error::MissingExample { id })?;
        Ok(self.rows.row(row as usize))
    }

    pub fn encode_image(&self, id: u64) -> Result<LatentVector> {
        let raw = self.raw(id)?;
        match self.fusion {
            None => Ok(LatentVector(raw.to_vec())),
            Some(f) => {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new(&[1, raw.len()], raw.to_vec())?);
                let pooled = f.pooled(&mut tape, x)?;
                Ok(LatentVector(tape.value(pooled).data().to_vec()))
            }
        }
    }
}
