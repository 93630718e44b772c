//! The prototype mixture model: `K` image prototypes paired with `K` soft
//! prompts, mixed by similarity to the image latent.

mod objective;

#[cfg(test)]
mod tests;

pub use objective::*;

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use rand::seq::index;

use crate::data::CategoryCatalog;
use crate::encoders::{FrozenFusionEncoder, FrozenTextEncoder, FusionEncoderConfig, TextEncoderConfig, TokenId};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::tensorad::{ParameterSet, Tape, Tensor, Var};

/// Logit scale of the frozen bi-encoder, as a divisor.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

pub const PROTOTYPE_PARAM: &str = "image_prototypes";
pub const OFFSET_PARAM: &str = "prompt_offsets";

pub fn prompt_param(k: usize) -> String {
    format!("prompt.{k}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    /// Separate image and text towers; dot-product matching with a softmax.
    BiEncoder,
    /// One fusion transformer scoring each (image, text) pair; sigmoid scores.
    SingleEncoder,
    /// Fixed exported text embeddings shifted by a learnable per-prototype
    /// offset.
    RealOffset,
}

impl EncoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderMode::BiEncoder => "bi",
            EncoderMode::SingleEncoder => "single",
            EncoderMode::RealOffset => "real-offset",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bi" => Some(EncoderMode::BiEncoder),
            "single" => Some(EncoderMode::SingleEncoder),
            "real-offset" => Some(EncoderMode::RealOffset),
            _ => None,
        }
    }

    /// Default number of learnable tokens per prompt.
    pub fn default_prompt_len(self) -> usize {
        match self {
            EncoderMode::SingleEncoder => 5,
            EncoderMode::BiEncoder | EncoderMode::RealOffset => 16,
        }
    }
}

/// The frozen encoders a model scores with.
#[derive(Clone, Debug)]
pub enum Backbone {
    Text(Arc<FrozenTextEncoder>),
    Fusion(Arc<FrozenFusionEncoder>),
    /// Exported per-category text embeddings, `[C, d_lat]`.
    Fixed(Arc<Tensor>),
}

impl Backbone {
    /// The default surrogate for `mode`. Real-offset mode needs the exported
    /// text embeddings.
    pub fn surrogate(mode: EncoderMode, d_lat: usize, text: Option<&Tensor>) -> Result<Self> {
        Ok(match mode {
            EncoderMode::BiEncoder => Backbone::Text(Arc::new(FrozenTextEncoder::new(TextEncoderConfig {
                d_lat,
                ..TextEncoderConfig::default()
            })?)),
            EncoderMode::SingleEncoder => Backbone::Fusion(Arc::new(FrozenFusionEncoder::new(FusionEncoderConfig {
                d_lat,
                ..FusionEncoderConfig::default()
            })?)),
            EncoderMode::RealOffset => {
                let text = text.ok_or_else(|| Error::contract("real-offset mode needs text embeddings"))?;
                if text.rank() != 2 || text.shape()[1] != d_lat {
                    return Err(Error::shape("text embeddings", &[text.shape(), &[d_lat]]));
                }
                Backbone::Fixed(Arc::new(Tensor::new(text.shape(), text.data().to_vec())?))
            }
        })
    }

    pub fn mode(&self) -> EncoderMode {
        match self {
            Backbone::Text(_) => EncoderMode::BiEncoder,
            Backbone::Fusion(_) => EncoderMode::SingleEncoder,
            Backbone::Fixed(_) => EncoderMode::RealOffset,
        }
    }

    pub fn d_lat(&self) -> usize {
        match self {
            Backbone::Text(e) => e.d_lat(),
            Backbone::Fusion(e) => e.d_lat(),
            Backbone::Fixed(t) => t.shape()[1],
        }
    }

    /// Width of prompt vectors. With fixed text embeddings there is no
    /// token space, so the surrogate default is used.
    pub fn d_tok(&self) -> usize {
        match self {
            Backbone::Text(e) => e.d_tok(),
            Backbone::Fusion(e) => e.d_tok(),
            Backbone::Fixed(_) => TextEncoderConfig::default().d_tok,
        }
    }

    /// Every frozen weight, in a fixed order.
    pub fn named_weights(&self) -> Vec<(String, &Tensor)> {
        match self {
            Backbone::Text(e) => e.named_weights(),
            Backbone::Fusion(e) => e.named_weights(),
            Backbone::Fixed(t) => alloc::vec![(String::from("text_embeddings"), t.as_ref())],
        }
    }

    /// Frozen image features for `[N, d]` raw latents.
    pub fn features(&self, latents: &Tensor) -> Result<Features> {
        if latents.rank() != 2 || latents.shape()[1] != self.d_lat() {
            return Err(Error::shape("features", &[latents.shape(), &[self.d_lat()]]));
        }
        let encoded = match self {
            Backbone::Fusion(f) => pooled_in_chunks(f, latents)?,
            _ => latents.clone(),
        };
        let mut tape = Tape::new();
        let x = tape.constant(encoded);
        let n = tape.l2_normalize(x)?;
        Ok(Features {
            normalized: tape.value(n).clone(),
            encoded: tape.value(x).clone(),
            raw: latents.clone(),
        })
    }
}

fn pooled_in_chunks(fusion: &FrozenFusionEncoder, latents: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let (n, d) = (latents.shape()[0], latents.shape()[1]);
    let mut out = Vec::with_capacity(n * fusion.d_lat());
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let mut tape = Tape::new();
        let chunk = Tensor::new(&[len, d], latents.data()[start * d..(start + len) * d].to_vec())?;
        let x = tape.constant(chunk);
        let p = fusion.pooled(&mut tape, x)?;
        out.extend_from_slice(tape.value(p).data());
    }
    Tensor::new(&[n, fusion.d_lat()], out)
}

/// Frozen per-example inputs. `encoded` is `f(x)`, the space image
/// prototypes live in and are regularized against; `normalized` is its unit
/// version used for matching and prototype similarity; `raw` feeds the
/// fusion encoder's pseudo-tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub normalized: Tensor,
    pub encoded: Tensor,
    pub raw: Tensor,
}

impl Features {
    pub fn len(&self) -> usize {
        self.normalized.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let d = t.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= t.shape()[0] {
                return Err(Error::contract(format!("row {r} outside {} features", t.shape()[0])));
            }
            data.extend_from_slice(t.row(r));
        }
        Tensor::new(&[rows.len(), d], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of prototype components.
    pub k: usize,
    /// Learnable tokens per prompt.
    pub prompt_len: usize,
    pub tau: f64,
    /// Weight of the regularizers.
    pub lambda: f64,
    pub seed: u64,
    /// When false the image prototypes are held fixed and left out of the
    /// learnable count.
    pub train_prototypes: bool,
}

impl ModelConfig {
    pub fn new(mode: EncoderMode, k: usize) -> Self {
        Self {
            k,
            prompt_len: mode.default_prompt_len(),
            tau: DEFAULT_TEMPERATURE,
            lambda: 1.0,
            seed: 0,
            train_prototypes: true,
        }
    }
}

/// Tape values of one forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, K]`
    pub weights: Var,
    /// `[B, K, C]`
    pub rows: Var,
    /// `[B, C]`
    pub scores: Var,
    /// `[B, d_lat]` normalized latents of the batch.
    pub latents: Var,
    /// `[B, d_lat]` unnormalized `f(x)` of the batch.
    pub encoded: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Cross-entropy (bi-encoder) or binary cross-entropy (single encoder).
    pub data: Var,
    pub r1: Var,
    pub r2: Var,
    /// Scores clamped before taking logs.
    pub clamped: usize,
}

#[derive(Clone, Debug)]
pub struct PtpModel {
    config: ModelConfig,
    backbone: Backbone,
    categories: Vec<Vec<TokenId>>,
    params: ParameterSet,
}

impl PtpModel {
    /// Builds a model with prototypes placed on distinct examples of `init`
    /// and prompt vectors drawn from N(0, 0.02²).
    pub fn new(config: ModelConfig, backbone: Backbone, catalog: &CategoryCatalog, init: &Features) -> Result<Self> {
        Self::check_config(&config, &backbone, catalog)?;
        let n = init.len();
        if n < config.k {
            return Err(Error::contract(format!(
                "{} prototypes need at least as many distinct examples, got {n}",
                config.k
            )));
        }
        let d_lat = backbone.d_lat();
        if init.encoded.shape()[1] != d_lat {
            return Err(Error::shape("prototype init", &[init.encoded.shape(), &[d_lat]]));
        }
        let mut pick = rng::stream(config.seed, purpose::PROTOTYPE_INIT);
        let rows: Vec<usize> = index::sample(&mut pick, n, config.k).into_vec();
        let mut params = ParameterSet::new();
        params.insert(PROTOTYPE_PARAM, Features::gather(&init.encoded, &rows)?)?;
        let mut prompt_rng = rng::stream(config.seed, purpose::PROMPT_INIT);
        let d_tok = backbone.d_tok();
        for k in 0..config.k {
            let values = rng::normal_vec(&mut prompt_rng, config.prompt_len * d_tok, 0.02);
            params.insert(prompt_param(k), Tensor::new(&[config.prompt_len, d_tok], values)?)?;
        }
        if backbone.mode() == EncoderMode::RealOffset {
            params.insert(OFFSET_PARAM, Tensor::zeros(&[config.k, d_lat]))?;
        }
        Ok(Self {
            config,
            backbone,
            categories: catalog.tokens().to_vec(),
            params,
        })
    }

    /// Rebuilds a model from stored parameters; names and shapes must match
    /// what [`PtpModel::new`] would create.
    pub fn from_parameters(
        config: ModelConfig,
        backbone: Backbone,
        catalog: &CategoryCatalog,
        params: ParameterSet,
    ) -> Result<Self> {
        Self::check_config(&config, &backbone, catalog)?;
        let (d_lat, d_tok) = (backbone.d_lat(), backbone.d_tok());
        let mut expected = alloc::vec![(String::from(PROTOTYPE_PARAM), alloc::vec![config.k, d_lat])];
        expected.extend((0..config.k).map(|k| (prompt_param(k), alloc::vec![config.prompt_len, d_tok])));
        if backbone.mode() == EncoderMode::RealOffset {
            expected.push((String::from(OFFSET_PARAM), alloc::vec![config.k, d_lat]));
        }
        let actual: Vec<(&str, &[usize])> = params.iter().map(|p| (p.name(), p.shape())).collect();
        let matches = actual.len() == expected.len()
            && actual.iter().zip(&expected).all(|(a, e)| a.0 == e.0 && a.1 == e.1.as_slice());
        if !matches {
            return Err(Error::contract(format!("parameters {actual:?} do not fit the model; expected {expected:?}")));
        }
        Ok(Self {
            config,
            backbone,
            categories: catalog.tokens().to_vec(),
            params,
        })
    }

    fn check_config(config: &ModelConfig, backbone: &Backbone, catalog: &CategoryCatalog) -> Result<()> {
        if config.k == 0 || config.prompt_len == 0 {
            return Err(Error::contract("K and the prompt length must be positive"));
        }
        if !(config.tau > 0.0 && config.tau.is_finite()) || !(config.lambda >= 0.0 && config.lambda.is_finite()) {
            return Err(Error::contract("tau must be positive and lambda non-negative"));
        }
        if catalog.is_empty() {
            return Err(Error::contract("empty category catalog"));
        }
        if let Backbone::Fixed(t) = backbone {
            if t.shape()[0] != catalog.len() {
                return Err(Error::contract(format!(
                    "{} text embeddings for {} categories",
                    t.shape()[0],
                    catalog.len()
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn mode(&self) -> EncoderMode {
        self.backbone.mode()
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn categories(&self) -> usize {
        self.categories.len()
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Whether parameter `i` is updated during training.
    pub fn is_trainable(&self, i: usize) -> bool {
        self.config.train_prototypes || self.params.get(i).name() != PROTOTYPE_PARAM
    }

    pub fn is_prototype(&self, i: usize) -> bool {
        self.params.get(i).name() == PROTOTYPE_PARAM
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        (0..self.params.len())
            .filter(|&i| self.is_trainable(i))
            .map(|i| self.params.get(i).len())
            .sum()
    }

    /// Places every parameter on `tape` as a constant, for inference.
    pub fn constant_vars(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.tensor().clone())).collect()
    }

    /// Forward pass for the feature rows `rows`. `vars` are the model's
    /// parameters on `tape`, in [`ParameterSet`] order.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], features: &Features, rows: &[usize]) -> Result<Forward> {
        if rows.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if vars.len() != self.params.len() {
            return Err(Error::contract("one tape value per parameter is required"));
        }
        let k = self.config.k;
        let prototypes = vars[0];
        let prompts = &vars[1..=k];
        let latents = tape.constant(Features::gather(&features.normalized, rows)?);
        let encoded = tape.constant(Features::gather(&features.encoded, rows)?);
        let weights = similarity_weights(tape, latents, prototypes)?;
        let rows_probs = match &self.backbone {
            Backbone::Text(enc) => {
                let text = enc.encode_prompted(tape, prompts, &self.categories)?;
                biencoder_probs(tape, latents, text, self.config.tau)?
            }
            Backbone::Fusion(enc) => {
                let raw = tape.constant(Features::gather(&features.raw, rows)?);
                let matches = enc.match_scores(tape, raw, prompts, &self.categories)?;
                singleencoder_probs(tape, matches)?
            }
            Backbone::Fixed(base) => {
                let text = offset_text(tape, base, vars[k + 1])?;
                biencoder_probs(tape, latents, text, self.config.tau)?
            }
        };
        let scores = mixture(tape, weights, rows_probs)?;
        Ok(Forward {
            weights,
            rows: rows_probs,
            scores,
            latents,
            encoded,
        })
    }

    /// Training objective on a batch: data term plus `lambda · (R1 + R2)`,
    /// with both regularizers taken over the batch's unnormalized `f(x)`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        features: &Features,
        rows: &[usize],
        labels: &[usize],
    ) -> Result<LossTerms> {
        if labels.len() != rows.len() {
            return Err(Error::contract("one label per batch row is required"));
        }
        let fwd = self.forward(tape, vars, features, rows)?;
        let (data, clamped) = match self.mode() {
            EncoderMode::SingleEncoder => binary_cross_entropy(tape, fwd.scores, labels)?,
            _ => cross_entropy(tape, fwd.scores, labels)?,
        };
        let r1 = regularizer_r1(tape, vars[0], fwd.encoded)?;
        let r2 = regularizer_r2(tape, vars[0], fwd.encoded)?;
        let reg = tape.add(r1, r2)?;
        let reg = tape.scale(reg, self.config.lambda)?;
        let total = tape.add(data, reg)?;
        Ok(LossTerms {
            total,
            data,
            r1,
            r2,
            clamped,
        })
    }

    /// Mixture predictions for every feature row.
    pub fn predict(&self, features: &Features) -> Result<Vec<PredictionBreakdown>> {
        let chunk = match self.mode() {
            EncoderMode::SingleEncoder => 16,
            _ => 512,
        };
        let (k, c) = (self.k(), self.categories());
        let mut out = Vec::with_capacity(features.len());
        let all: Vec<usize> = (0..features.len()).collect();
        for rows in all.chunks(chunk) {
            let mut tape = Tape::new();
            let vars = self.constant_vars(&mut tape);
            let fwd = self.forward(&mut tape, &vars, features, rows)?;
            let (w, r, s) = (tape.value(fwd.weights), tape.value(fwd.rows), tape.value(fwd.scores));
            for b in 0..rows.len() {
                let scores = s.row(b).to_vec();
                out.push(PredictionBreakdown {
                    weights: w.row(b).to_vec(),
                    rows: (0..k).map(|j| r.data()[(b * k + j) * c..(b * k + j + 1) * c].to_vec()).collect(),
                    predicted: argmax_lowest(&scores),
                    scores,
                });
            }
        }
        Ok(out)
    }

    /// Current prototypes as rows.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let p = self.params.get(0).tensor();
        (0..p.shape()[0]).map(|i| p.row(i).to_vec()).collect()
    }
}

/// `normalize(base_c + offset_k)` for every pair: `[K, C, d]`.
fn offset_text(tape: &mut Tape, base: &Tensor, offsets: Var) -> Result<Var> {
    let (c, d) = (base.shape()[0], base.shape()[1]);
    let k = tape.shape(offsets)[0];
    let base = tape.constant(base.clone());
    let base_idx: Vec<usize> = (0..k).flat_map(|_| 0..c).collect();
    let off_idx: Vec<usize> = (0..k).flat_map(|j| core::iter::repeat_n(j, c)).collect();
    let b = tape.index_select(base, &base_idx)?;
    let o = tape.index_select(offsets, &off_idx)?;
    let shifted = tape.add(b, o)?;
    let unit = tape.l2_normalize(shifted)?;
    tape.reshape(unit, &[k, c, d])
}
