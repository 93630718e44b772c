//! Datasets, the synthetic Gaussian-mixture testbed and n-shot episodes.

mod gmm;

pub use gmm::{gen_synthetic_gmm, GmmDataset, SyntheticGmmConfig};

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::encoders::{TokenId, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::tensorad::Tensor;

/// Ordered category names; position defines the label index.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryCatalog {
    names: Vec<String>,
    tokens: Vec<Vec<TokenId>>,
}

impl CategoryCatalog {
    pub fn new(names: Vec<String>, tokens: Vec<Vec<TokenId>>) -> Result<Self> {
        if names.len() != tokens.len() {
            return Err(Error::contract("one token sequence per category name is required"));
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::contract(format!("duplicate category name `{name}`")));
            }
        }
        if let Some(c) = tokens.iter().position(Vec::is_empty) {
            return Err(Error::contract(format!("category {c} has no tokens")));
        }
        Ok(Self { names, tokens })
    }

    /// Names tokenised by position: category `j` becomes a single token
    /// wrapping past the reserved ids.
    pub fn with_positional_tokens(names: Vec<String>, vocab_size: usize) -> Result<Self> {
        let usable = vocab_size.saturating_sub(SPECIAL_TOKENS as usize);
        if usable == 0 {
            return Err(Error::contract("vocabulary has no room for category tokens"));
        }
        let tokens = (0..names.len())
            .map(|j| alloc::vec![SPECIAL_TOKENS + (j % usable) as TokenId])
            .collect();
        Self::new(names, tokens)
    }

    /// `category_0 .. category_{count-1}`.
    pub fn synthetic(count: usize, vocab_size: usize) -> Result<Self> {
        Self::with_positional_tokens((0..count).map(|j| format!("category_{j}")).collect(), vocab_size)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tokens(&self) -> &[Vec<TokenId>] {
        &self.tokens
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitTag::Train),
            "test" => Some(SplitTag::Test),
            _ => None,
        }
    }
}

/// Labelled examples with their raw latents stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    tag: SplitTag,
    dim: usize,
    ids: Vec<u64>,
    labels: Vec<usize>,
    latents: Vec<f64>,
}

impl DatasetSplit {
    pub fn new(tag: SplitTag, dim: usize, ids: Vec<u64>, labels: Vec<usize>, latents: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("latent dimension must be positive"));
        }
        if ids.len() != labels.len() || latents.len() != ids.len() * dim {
            return Err(Error::contract(format!(
                "{} ids, {} labels and {} latent values do not describe a {dim}-wide split",
                ids.len(),
                labels.len(),
                latents.len()
            )));
        }
        if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
            return Err(Error::contract("example ids must be unique within a split"));
        }
        Ok(Self {
            tag,
            dim,
            ids,
            labels,
            latents,
        })
    }

    pub fn tag(&self) -> SplitTag {
        self.tag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn latents(&self) -> &[f64] {
        &self.latents
    }

    pub fn latent(&self, i: usize) -> &[f64] {
        &self.latents[i * self.dim..(i + 1) * self.dim]
    }

    /// All latents as an `[N, dim]` tensor. Fails on an empty split.
    pub fn latent_matrix(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::contract("split is empty"));
        }
        Tensor::new(&[self.len(), self.dim], self.latents.clone())
    }

    /// Number of examples per label, for `categories` labels.
    pub fn counts(&self, categories: usize) -> Vec<usize> {
        let mut counts = alloc::vec![0; categories];
        for &y in &self.labels {
            if y < categories {
                counts[y] += 1;
            }
        }
        counts
    }

    /// Checks every label against a catalog of `categories` entries.
    pub fn check_labels(&self, categories: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= categories) {
            Some(y) => Err(Error::contract(format!("label {y} outside a catalog of {categories} categories"))),
            None => Ok(()),
        }
    }

    /// Sub-split made of the given row positions, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut latents = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            latents.extend_from_slice(self.latent(r));
        }
        Self {
            tag: self.tag,
            dim: self.dim,
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            latents,
        }
    }
}

/// An n-shot training subset plus the untouched test split.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotEpisode {
    pub shots: usize,
    pub support: DatasetSplit,
    pub test: DatasetSplit,
}

/// Draws exactly `shots` training examples per category, without
/// replacement. The support set is ordered by category, then by draw order.
pub fn sample_few_shot(
    train: &DatasetSplit,
    test: &DatasetSplit,
    categories: usize,
    shots: usize,
    seed: u64,
) -> Result<FewShotEpisode> {
    if shots == 0 {
        return Err(Error::contract("shots must be positive"));
    }
    train.check_labels(categories)?;
    test.check_labels(categories)?;
    let mut by_category: Vec<Vec<usize>> = alloc::vec![Vec::new(); categories];
    for (i, &y) in train.labels().iter().enumerate() {
        by_category[y].push(i);
    }
    let deficient: Vec<(usize, usize)> = by_category
        .iter()
        .enumerate()
        .filter(|(_, rows)| rows.len() < shots)
        .map(|(c, rows)| (c, rows.len()))
        .collect();
    if !deficient.is_empty() {
        return Err(Error::InsufficientSupport {
            needed: shots,
            deficient,
        });
    }
    let mut rng = rng::stream(seed, purpose::EPISODE);
    let mut chosen = Vec::with_capacity(categories * shots);
    for rows in &mut by_category {
        let (picked, _) = rows.partial_shuffle(&mut rng, shots);
        chosen.extend_from_slice(picked);
    }
    Ok(FewShotEpisode {
        shots,
        support: train.select(&chosen),
        test: test.clone(),
    })
}
