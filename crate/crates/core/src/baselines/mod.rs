//! Comparison methods: a fixed hand-written prompt, nearest class mean,
//! a linear probe and a single soft prompt.


use alloc::format;
use alloc::vec::Vec;

use crate::data::CategoryCatalog;
use crate::encoders::TokenId;
use crate::error::{Error, Result};
use crate::model::{argmax_lowest, cross_entropy, Backbone, Features, ModelConfig, PtpModel};
use crate::rng;
use crate::tensorad::{ParameterSet, Tape, Tensor, Var};
use crate::trainer::{adamw_step, epoch_batches, lr_at, OptimState, TrainConfig};

/// Zero-parameter classifier matching images against the categories under
/// one frozen prompt.
#[derive(Clone, Debug)]
pub struct ManualPrompt {
    backbone: Backbone,
    categories: Vec<Vec<TokenId>>,
}

impl ManualPrompt {
    pub fn new(backbone: Backbone, catalog: &CategoryCatalog) -> Result<Self> {
        if catalog.is_empty() {
            return Err(Error::contract("empty category catalog"));
        }
        if let Backbone::Fixed(t) = &backbone {
            if t.shape()[0] != catalog.len() {
                return Err(Error::contract(format!(
                    "{} template embeddings for {} categories",
                    t.shape()[0],
                    catalog.len()
                )));
            }
        }
        Ok(Self {
            backbone,
            categories: catalog.tokens().to_vec(),
        })
    }

    pub fn param_count(&self) -> usize {
        0
    }

    /// Unit text embedding of every category under the fixed template,
    /// `[C, d_lat]`. `None` for the fusion encoder, which has no text tower.
    pub fn template_embeddings(&self) -> Result<Option<Tensor>> {
        match &self.backbone {
            Backbone::Text(enc) => {
                let mut tape = Tape::new();
                let prompt = enc.table().embed(&enc.table().manual_prompt())?;
                let p = tape.constant(prompt);
                let g = enc.encode_prompted(&mut tape, &[p], &self.categories)?;
                Ok(Some(tape.value(g).reshaped(&[self.categories.len(), enc.d_lat()])?))
            }
            Backbone::Fixed(t) => Ok(Some((**t).clone())),
            Backbone::Fusion(_) => Ok(None),
        }
    }

    /// Match scores, `[N, C]`.
    pub fn scores(&self, features: &Features) -> Result<Tensor> {
        let c = self.categories.len();
        let Some(text) = self.template_embeddings()? else {
            let Backbone::Fusion(enc) = &self.backbone else {
                unreachable!("only the fusion encoder lacks template embeddings")
            };
            let n = features.len();
            let mut out = Vec::with_capacity(n * c);
            for start in (0..n).step_by(16) {
                let rows: Vec<usize> = (start..n.min(start + 16)).collect();
                let mut tape = Tape::new();
                let prompt = tape.constant(enc.table().embed(&enc.table().manual_prompt())?);
                let raw = tape.constant(gather(&features.raw, &rows)?);
                let s = enc.match_scores(&mut tape, raw, &[prompt], &self.categories)?;
                out.extend_from_slice(tape.value(s).data());
            }
            return Tensor::new(&[n, c], out);
        };
        let mut tape = Tape::new();
        let x = tape.constant(features.normalized.clone());
        let g = tape.constant(text);
        let s = tape.matmul_nt(x, g)?;
        Ok(tape.value(s).clone())
    }

    pub fn predict(&self, features: &Features) -> Result<Vec<usize>> {
        Ok(rows_argmax(&self.scores(features)?))
    }
}

fn gather(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * t.shape()[1]);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), t.shape()[1]], data)
}

fn rows_argmax(scores: &Tensor) -> Vec<usize> {
    (0..scores.shape()[0]).map(|i| argmax_lowest(scores.row(i))).collect()
}

fn check_support(labels: &[usize], categories: usize) -> Result<Vec<usize>> {
    let mut counts = alloc::vec![0; categories];
    for &y in labels {
        if y >= categories {
            return Err(Error::contract(format!("label {y} outside {categories} categories")));
        }
        counts[y] += 1;
    }
    let deficient: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .filter(|(_, n)| **n == 0)
        .map(|(c, _)| (c, 0))
        .collect();
    if deficient.is_empty() {
        Ok(counts)
    } else {
        Err(Error::InsufficientSupport { needed: 1, deficient })
    }
}

/// Per-category means of the normalized support latents.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMeanBank {
    means: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl ClassMeanBank {
    pub fn fit(features: &Features, labels: &[usize], categories: usize) -> Result<Self> {
        if labels.len() != features.len() {
            return Err(Error::contract("one label per example is required"));
        }
        let counts = check_support(labels, categories)?;
        let d = features.normalized.shape()[1];
        let mut means = alloc::vec![alloc::vec![0.0; d]; categories];
        for (i, &y) in labels.iter().enumerate() {
            for (m, x) in means[y].iter_mut().zip(features.normalized.row(i)) {
                *m += x;
            }
        }
        for (mean, &n) in means.iter_mut().zip(&counts) {
            mean.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(Self { means, counts })
    }

    /// Rebuilds a bank from stored means; `counts` is the support behind
    /// each mean.
    pub fn from_means(means: Vec<Vec<f64>>, counts: Vec<usize>) -> Result<Self> {
        let d = means.first().map_or(0, Vec::len);
        if means.is_empty() || d == 0 || means.iter().any(|m| m.len() != d) || counts.len() != means.len() {
            return Err(Error::contract("class means must be a non-empty matrix with one count per row"));
        }
        Ok(Self { means, counts })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn param_count(&self) -> usize {
        0
    }

    /// `f̂(x) · normalize(mean_c)`, `[N, C]`.
    pub fn scores(&self, features: &Features) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.normalized.clone());
        let m = tape.constant(Tensor::from_rows(&self.means)?);
        let m = tape.l2_normalize(m)?;
        let s = tape.matmul_nt(x, m)?;
        Ok(tape.value(s).clone())
    }

    pub fn predict(&self, features: &Features) -> Result<Vec<usize>> {
        Ok(rows_argmax(&self.scores(features)?))
    }
}

pub const PROBE_WEIGHT: &str = "probe.weight";
pub const PROBE_BIAS: &str = "probe.bias";

/// Linear classifier on frozen normalized latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbeHead {
    params: ParameterSet,
}

impl LinearProbeHead {
    /// A zero-initialized head.
    pub fn zeros(d_lat: usize, categories: usize, bias: bool) -> Result<Self> {
        if d_lat == 0 || categories == 0 {
            return Err(Error::contract("probe dimensions must be positive"));
        }
        let mut params = ParameterSet::new();
        params.insert(PROBE_WEIGHT, Tensor::zeros(&[d_lat, categories]))?;
        if bias {
            params.insert(PROBE_BIAS, Tensor::zeros(&[categories]))?;
        }
        Ok(Self { params })
    }

    /// Trains a zero-initialized head by cross-entropy with AdamW.
    pub fn fit(
        features: &Features,
        labels: &[usize],
        categories: usize,
        bias: bool,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if labels.len() != features.len() {
            return Err(Error::contract("one label per example is required"));
        }
        check_support(labels, categories)?;
        let mut head = Self::zeros(features.normalized.shape()[1], categories, bias)?;
        // The bias is not decayed.
        let selected: Vec<(usize, bool)> = (0..head.params.len()).map(|i| (i, i == 0)).collect();
        let mut state = OptimState::new(&head.params, &selected);
        let n = features.len();
        let total = n.div_ceil(config.batch_size) * config.epochs;
        let mut shuffle = rng::stream(config.seed, rng::purpose::SHUFFLE);
        let mut step = 0;
        for _ in 0..config.epochs {
            for rows in epoch_batches(n, config.batch_size, &mut shuffle) {
                let batch_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
                let mut tape = Tape::new();
                let vars = head.params.register(&mut tape);
                let x = tape.constant(gather(&features.normalized, &rows)?);
                let logits = head.logits(&mut tape, x, &vars)?;
                let probs = tape.softmax_last(logits)?;
                let (loss, _) = cross_entropy(&mut tape, probs, &batch_labels)?;
                tape.backward(loss)?;
                let lr = lr_at(step, total, config);
                adamw_step(&mut head.params, tape.gradients(), &vars, &mut state, lr, &config.optimizer)?;
                step += 1;
            }
        }
        Ok(head)
    }

    fn logits(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Var> {
        let z = tape.matmul(x, vars[0])?;
        match vars.get(1) {
            Some(&b) => tape.add_broadcast(z, b),
            None => Ok(z),
        }
    }

    /// Rebuilds a head from stored parameters named as [`LinearProbeHead::zeros`]
    /// would create them.
    pub fn from_params(params: ParameterSet) -> Result<Self> {
        let weight = params
            .by_name(PROBE_WEIGHT)
            .ok_or_else(|| Error::contract("probe weight missing"))?;
        if weight.shape().len() != 2 {
            return Err(Error::contract("probe weight must be a matrix"));
        }
        let c = weight.shape()[1];
        let bias_ok = match params.by_name(PROBE_BIAS) {
            Some(b) => b.shape() == [c] && params.len() == 2,
            None => params.len() == 1,
        };
        if !bias_ok {
            return Err(Error::contract("probe parameters do not fit a linear head"));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// `d_lat · C`, plus `C` with a bias.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Logits, `[N, C]`.
    pub fn scores(&self, features: &Features) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<_> = self.params.iter().map(|p| tape.constant(p.tensor().clone())).collect();
        let x = tape.constant(features.normalized.clone());
        let z = self.logits(&mut tape, x, &vars)?;
        Ok(tape.value(z).clone())
    }

    pub fn predict(&self, features: &Features) -> Result<Vec<usize>> {
        Ok(rows_argmax(&self.scores(features)?))
    }
}

/// A single universal soft prompt: one prototype component, no
/// regularization, and a prototype that is never trained.
pub fn sp_build(
    backbone: Backbone,
    catalog: &CategoryCatalog,
    init: &Features,
    prompt_len: usize,
    seed: u64,
) -> Result<PtpModel> {
    let config = ModelConfig {
        k: 1,
        prompt_len,
        lambda: 0.0,
        seed,
        train_prototypes: false,
        ..ModelConfig::new(backbone.mode(), 1)
    };
    PtpModel::new(config, backbone, catalog, init)
}
