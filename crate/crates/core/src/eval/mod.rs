//! Accuracy metrics and the multi-seed evaluation protocol.


use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::baselines::{sp_build, ClassMeanBank, LinearProbeHead, ManualPrompt};
use crate::data::{sample_few_shot, CategoryCatalog, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{regularizer_r2, Backbone, EncoderMode, Features, ModelConfig, PtpModel, DEFAULT_TEMPERATURE};
use crate::tensorad::{Tape, Tensor};
use crate::trainer::{train, EpochStats, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub overall: f64,
    pub correct: usize,
    pub total: usize,
    /// Accuracy per category; `None` where the split has no examples.
    pub per_category: Vec<Option<f64>>,
    pub support: Vec<usize>,
}

/// Fraction of predictions equal to the label, overall and per category.
pub fn evaluate_accuracy(predictions: &[usize], labels: &[usize], categories: usize) -> Result<Accuracy> {
    if labels.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty split"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::contract("one prediction per label is required"));
    }
    if let Some(v) = labels.iter().chain(predictions).find(|&&v| v >= categories) {
        return Err(Error::contract(format!("category {v} outside a catalog of {categories}")));
    }
    let mut support = alloc::vec![0; categories];
    let mut hits = alloc::vec![0; categories];
    for (&p, &y) in predictions.iter().zip(labels) {
        support[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Accuracy {
        overall: correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
        per_category: hits
            .iter()
            .zip(&support)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
        support,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Ptp,
    Sp,
    Mcp,
    Vm,
    Lp,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ptp => "ptp",
            Method::Sp => "sp",
            Method::Mcp => "mcp",
            Method::Vm => "vm",
            Method::Lp => "lp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::Ptp, Method::Sp, Method::Mcp, Method::Vm, Method::Lp]
            .into_iter()
            .find(|m| m.as_str() == s)
    }

    /// Whether the method learns prototype components.
    pub fn is_prompted(self) -> bool {
        matches!(self, Method::Ptp | Method::Sp)
    }
}

/// Everything that identifies how one method is trained and evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSpec {
    pub method: Method,
    pub mode: EncoderMode,
    pub k: usize,
    pub lambda: f64,
    pub prompt_len: usize,
    pub tau: f64,
    /// `None` picks the budget for the shot count.
    pub epochs: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub decay_prototypes: bool,
    pub probe_bias: bool,
}

impl MethodSpec {
    pub fn new(method: Method, mode: EncoderMode) -> Self {
        Self {
            method,
            mode,
            k: 5,
            lambda: 1.0,
            prompt_len: mode.default_prompt_len(),
            tau: DEFAULT_TEMPERATURE,
            epochs: None,
            lr: 3e-3,
            batch_size: 32,
            decay_prototypes: false,
            probe_bias: false,
        }
    }

    /// Components actually used: SP always has one.
    pub fn effective_k(&self) -> Option<usize> {
        match self.method {
            Method::Ptp => Some(self.k),
            Method::Sp => Some(1),
            _ => None,
        }
    }

    pub fn effective_lambda(&self) -> Option<f64> {
        match self.method {
            Method::Ptp => Some(self.lambda),
            Method::Sp => Some(0.0),
            _ => None,
        }
    }

    pub fn train_config(&self, shots: usize, seed: u64) -> TrainConfig {
        let base = TrainConfig::for_shots(self.mode, shots);
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs.unwrap_or(base.epochs),
            decay_prototypes: self.decay_prototypes,
            seed,
            ..base
        }
    }
}

/// A labelled dataset ready for episodes. `text_embeddings` holds exported
/// per-category text vectors for runs on real embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub catalog: CategoryCatalog,
    pub text_embeddings: Option<Tensor>,
}

impl Dataset {
    pub fn d_lat(&self) -> usize {
        self.train.dim()
    }

    pub fn backbone(&self, mode: EncoderMode) -> Result<Backbone> {
        Backbone::surrogate(mode, self.d_lat(), self.text_embeddings.as_ref())
    }
}

/// Whatever a method learned from its episode.
#[derive(Clone, Debug)]
pub enum Fitted {
    Prompted(PtpModel),
    ClassMeans(ClassMeanBank),
    Probe(LinearProbeHead),
    Manual,
}

impl Fitted {
    pub fn model(&self) -> Option<&PtpModel> {
        match self {
            Fitted::Prompted(m) => Some(m),
            _ => None,
        }
    }

    /// Learnable entries, as each method counts them.
    pub fn param_count(&self) -> usize {
        match self {
            Fitted::Prompted(m) => m.param_count(),
            Fitted::ClassMeans(b) => b.param_count(),
            Fitted::Probe(h) => h.param_count(),
            Fitted::Manual => 0,
        }
    }

    /// Predicted category per feature row. `backbone` and `catalog` are only
    /// consulted by the manual prompt.
    pub fn predict(&self, backbone: &Backbone, catalog: &CategoryCatalog, features: &Features) -> Result<Vec<usize>> {
        match self {
            Fitted::Prompted(m) => Ok(m.predict(features)?.into_iter().map(|p| p.predicted).collect()),
            Fitted::ClassMeans(b) => b.predict(features),
            Fitted::Probe(h) => h.predict(features),
            Fitted::Manual => ManualPrompt::new(backbone.clone(), catalog)?.predict(features),
        }
    }
}

/// One seed of one method.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub accuracy: Accuracy,
    pub params: usize,
    pub predictions: Vec<usize>,
    pub trace: Vec<EpochStats>,
    pub clamped: usize,
    pub fitted: Fitted,
    /// Mean distance from each training latent to its nearest prototype
    /// after training, for prompted methods.
    pub train_r2: Option<f64>,
}

/// Samples an episode with `seed`, fits the method and evaluates it on the
/// full test split.
pub fn run_seed(spec: &MethodSpec, dataset: &Dataset, shots: usize, seed: u64) -> Result<SeedRun> {
    let categories = dataset.catalog.len();
    if dataset.test.is_empty() {
        return Err(Error::contract("test split is empty"));
    }
    if dataset.train.dim() != dataset.test.dim() {
        return Err(Error::contract("train and test latents differ in width"));
    }
    let backbone = dataset.backbone(spec.mode)?;
    let test = backbone.features(&dataset.test.latent_matrix()?)?;

    let mut trace = Vec::new();
    let mut clamped = 0;
    let (fitted, params) = if spec.method == Method::Mcp {
        let mcp = ManualPrompt::new(backbone.clone(), &dataset.catalog)?;
        (Fitted::Manual, mcp.param_count())
    } else {
        let episode = sample_few_shot(&dataset.train, &dataset.test, categories, shots, seed)?;
        let support = backbone.features(&episode.support.latent_matrix()?)?;
        let labels = episode.support.labels();
        match spec.method {
            Method::Vm => {
                let bank = ClassMeanBank::fit(&support, labels, categories)?;
                let n = bank.param_count();
                (Fitted::ClassMeans(bank), n)
            }
            Method::Lp => {
                let config = spec.train_config(shots, seed);
                let head = LinearProbeHead::fit(&support, labels, categories, spec.probe_bias, &config)?;
                let n = head.param_count();
                (Fitted::Probe(head), n)
            }
            _ => {
                let mut m = if spec.method == Method::Sp {
                    sp_build(backbone.clone(), &dataset.catalog, &support, spec.prompt_len, seed)?
                } else {
                    let config = ModelConfig {
                        k: spec.k,
                        prompt_len: spec.prompt_len,
                        tau: spec.tau,
                        lambda: spec.lambda,
                        seed,
                        train_prototypes: true,
                    };
                    PtpModel::new(config, backbone.clone(), &dataset.catalog, &support)?
                };
                let outcome = train(&mut m, &support, labels, &spec.train_config(shots, seed)).map_err(|f| f.error)?;
                trace = outcome.trace;
                clamped = outcome.clamped;
                let n = m.param_count();
                (Fitted::Prompted(m), n)
            }
        }
    };
    let predictions = fitted.predict(&backbone, &dataset.catalog, &test)?;
    let accuracy = evaluate_accuracy(&predictions, dataset.test.labels(), categories)?;
    let train_r2 = match fitted.model() {
        Some(m) => {
            let all = m.backbone().features(&dataset.train.latent_matrix()?)?;
            Some(prototype_r2(m, &all)?)
        }
        None => None,
    };
    Ok(SeedRun {
        seed,
        accuracy,
        params,
        predictions,
        trace,
        clamped,
        fitted,
        train_r2,
    })
}

/// Mean squared distance from every `f(x)` row to its nearest prototype.
pub fn prototype_r2(model: &PtpModel, features: &Features) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(model.params().get(0).tensor().clone());
    let x = tape.constant(features.encoded.clone());
    let r = regularizer_r2(&mut tape, p, x)?;
    Ok(tape.value(r).item())
}

/// Seed-averaged outcome of one method on one dataset and shot count.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub dataset: String,
    pub method: Method,
    pub mode: EncoderMode,
    pub shots: usize,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub seeds: Vec<u64>,
    pub acc_per_seed: Vec<f64>,
    pub acc_mean: f64,
    /// Per-category accuracy averaged over seeds.
    pub acc_per_class: Vec<Option<f64>>,
    pub params: usize,
    pub wall_ms: u64,
}

/// Averages per-seed runs. `runs` must be non-empty.
pub fn aggregate(spec: &MethodSpec, dataset: &str, shots: usize, runs: &[SeedRun]) -> Result<RunResult> {
    let first = runs.first().ok_or_else(|| Error::contract("no runs to aggregate"))?;
    let n = runs.len() as f64;
    let acc_per_seed: Vec<f64> = runs.iter().map(|r| r.accuracy.overall).collect();
    let acc_per_class = (0..first.accuracy.per_category.len())
        .map(|c| {
            let vals: Option<Vec<f64>> = runs.iter().map(|r| r.accuracy.per_category[c]).collect();
            vals.map(|v| v.iter().sum::<f64>() / n)
        })
        .collect();
    Ok(RunResult {
        dataset: String::from(dataset),
        method: spec.method,
        mode: spec.mode,
        shots,
        k: spec.effective_k(),
        lambda: spec.effective_lambda(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        acc_mean: acc_per_seed.iter().sum::<f64>() / n,
        acc_per_seed,
        acc_per_class,
        params: first.params,
        wall_ms: 0,
    })
}

/// Per-seed failures of a protocol run, with the runs that did complete.
#[derive(Clone, Debug)]
pub struct ProtocolFailure {
    pub failed: Vec<(u64, Error)>,
    pub completed: Vec<SeedRun>,
}

impl core::fmt::Display for ProtocolFailure {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{} of {} seeds failed:", self.failed.len(), self.failed.len() + self.completed.len())?;
        for (seed, e) in &self.failed {
            write!(f, " [seed {seed}: {e}]")?;
        }
        Ok(())
    }
}

impl core::error::Error for ProtocolFailure {}

/// Runs every seed independently, then averages.
pub fn run_protocol(
    spec: &MethodSpec,
    dataset: &Dataset,
    shots: usize,
    seeds: &[u64],
) -> core::result::Result<(RunResult, Vec<SeedRun>), ProtocolFailure> {
    if seeds.is_empty() {
        return Err(ProtocolFailure {
            failed: alloc::vec![(0, Error::contract("no seeds given"))],
            completed: Vec::new(),
        });
    }
    let mut completed = Vec::new();
    let mut failed = Vec::new();
    for &seed in seeds {
        match run_seed(spec, dataset, shots, seed) {
            Ok(run) => completed.push(run),
            Err(e) => failed.push((seed, e)),
        }
    }
    if !failed.is_empty() {
        return Err(ProtocolFailure { failed, completed });
    }
    let result = aggregate(spec, &dataset.name, shots, &completed).map_err(|e| ProtocolFailure {
        failed: alloc::vec![(seeds[0], e)],
        completed: Vec::new(),
    })?;
    Ok((result, completed))
}

/// Cartesian grid over shots, K and lambda, with shared seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub shots: Vec<usize>,
    pub ks: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub shots: usize,
    pub k: usize,
    pub lambda: f64,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.ks.is_empty() || self.lambdas.is_empty() || self.seeds.is_empty() {
            return Err(Error::contract("every sweep axis needs at least one value"));
        }
        Ok(())
    }

    /// Points in shots-major, then K, then lambda order.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.shots.len() * self.ks.len() * self.lambdas.len());
        for &shots in &self.shots {
            for &k in &self.ks {
                for &lambda in &self.lambdas {
                    out.push(GridPoint { shots, k, lambda });
                }
            }
        }
        out
    }
}
