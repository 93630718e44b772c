//! Checkpoint directories: `checkpoint.json` plus one f64 store per learned
//! matrix. Encoder snapshots use the same layout under `encoder.json`.

use std::fs;
use std::path::Path;

use ptp_core::baselines::{ClassMeanBank, LinearProbeHead};
use ptp_core::eval::{Dataset, Fitted, Method};
use ptp_core::model::{Backbone, EncoderMode, ModelConfig, PtpModel};
use ptp_core::tensorad::{ParameterSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::store::{read_matrix, write_atomic, write_matrix, Dtype, Matrix};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ENCODER_FILE: &str = "encoder.json";
const CLASS_MEANS: &str = "class_means";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub method: String,
    pub mode: String,
    pub seed: u64,
    pub shots: usize,
    pub d_lat: usize,
    pub categories: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub d_tok: Option<usize>,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub train_prototypes: Option<bool>,
    /// Support per category behind stored class means.
    pub counts: Option<Vec<usize>>,
    pub params: Vec<MatrixEntry>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(&serde_json::to_value(value).expect("serializable"))
        .expect("json value serializes");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_tensors<'a>(
    dir: &Path,
    tensors: impl Iterator<Item = (String, &'a Tensor)>,
) -> Result<Vec<MatrixEntry>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    tensors
        .map(|(name, t)| {
            let file = format!("{name}.ptpe");
            write_matrix(&dir.join(&file), &Matrix::from_tensor(t, Dtype::F64))?;
            Ok(MatrixEntry {
                name,
                shape: t.shape().to_vec(),
                file,
            })
        })
        .collect()
}

fn read_tensor(dir: &Path, entry: &MatrixEntry) -> Result<Tensor, CliError> {
    let m = read_matrix(&dir.join(&entry.file))?;
    Tensor::new(&entry.shape, m.data).map_err(|_| {
        CliError::Data(format!(
            "{}: stored matrix does not have shape {:?}",
            dir.join(&entry.file).display(),
            entry.shape
        ))
    })
}

/// Writes the state of one fitted run.
pub fn save_checkpoint(
    dir: &Path,
    method: Method,
    mode: EncoderMode,
    seed: u64,
    shots: usize,
    dataset: &Dataset,
    fitted: &Fitted,
) -> Result<CheckpointManifest, CliError> {
    let mut manifest = CheckpointManifest {
        method: method.as_str().to_string(),
        mode: mode.as_str().to_string(),
        seed,
        shots,
        d_lat: dataset.d_lat(),
        categories: dataset.catalog.len(),
        k: None,
        m: None,
        d_tok: None,
        tau: None,
        lambda: None,
        train_prototypes: None,
        counts: None,
        params: Vec::new(),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    match fitted {
        Fitted::Prompted(model) => {
            let c = model.config();
            manifest.k = Some(c.k);
            manifest.m = Some(c.prompt_len);
            manifest.d_tok = Some(model.backbone().d_tok());
            manifest.tau = Some(c.tau);
            manifest.lambda = Some(c.lambda);
            manifest.train_prototypes = Some(c.train_prototypes);
            manifest.params = write_tensors(dir, model.params().iter().map(|p| (p.name().to_string(), p.tensor())))?;
        }
        Fitted::ClassMeans(bank) => {
            let means = Tensor::from_rows(bank.means())?;
            manifest.counts = Some(bank.counts().to_vec());
            manifest.params = write_tensors(dir, std::iter::once((CLASS_MEANS.to_string(), &means)))?;
        }
        Fitted::Probe(head) => {
            manifest.params = write_tensors(dir, head.params().iter().map(|p| (p.name().to_string(), p.tensor())))?;
        }
        Fitted::Manual => {}
    }
    write_json(&dir.join(CHECKPOINT_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, CliError> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_slice(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Rebuilds a fitted method against `dataset`, whose catalog and latent
/// width must match the checkpoint.
pub fn load_checkpoint(dir: &Path, dataset: &Dataset) -> Result<(CheckpointManifest, Fitted), CliError> {
    let manifest = read_manifest(dir)?;
    let bad = |what: &str| CliError::Data(format!("{}: {what}", dir.join(CHECKPOINT_FILE).display()));
    if manifest.d_lat != dataset.d_lat() || manifest.categories != dataset.catalog.len() {
        return Err(bad("checkpoint does not match the dataset's width or categories"));
    }
    let method = Method::parse(&manifest.method).ok_or_else(|| bad("unknown method"))?;
    let mode = EncoderMode::parse(&manifest.mode).ok_or_else(|| bad("unknown mode"))?;
    let fitted = match method {
        Method::Ptp | Method::Sp => {
            let (Some(k), Some(m), Some(tau), Some(lambda), Some(train_prototypes)) = (
                manifest.k,
                manifest.m,
                manifest.tau,
                manifest.lambda,
                manifest.train_prototypes,
            ) else {
                return Err(bad("prompted checkpoint is missing model settings"));
            };
            let mut params = ParameterSet::new();
            for entry in &manifest.params {
                params.insert(entry.name.clone(), read_tensor(dir, entry)?)?;
            }
            let config = ModelConfig {
                k,
                prompt_len: m,
                tau,
                lambda,
                seed: manifest.seed,
                train_prototypes,
            };
            let backbone: Backbone = dataset.backbone(mode)?;
            Fitted::Prompted(PtpModel::from_parameters(config, backbone, &dataset.catalog, params)?)
        }
        Method::Vm => {
            let entry = manifest
                .params
                .iter()
                .find(|e| e.name == CLASS_MEANS)
                .ok_or_else(|| bad("class means missing"))?;
            let t = read_tensor(dir, entry)?;
            let means = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
            let counts = manifest.counts.clone().ok_or_else(|| bad("class counts missing"))?;
            Fitted::ClassMeans(ClassMeanBank::from_means(means, counts)?)
        }
        Method::Lp => {
            let mut params = ParameterSet::new();
            for entry in &manifest.params {
                params.insert(entry.name.clone(), read_tensor(dir, entry)?)?;
            }
            Fitted::Probe(LinearProbeHead::from_params(params)?)
        }
        Method::Mcp => Fitted::Manual,
    };
    Ok((manifest, fitted))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSnapshot {
    pub mode: String,
    pub weights: Vec<MatrixEntry>,
}

/// Writes every frozen encoder weight of `backbone` under `dir`.
pub fn save_encoder_snapshot(dir: &Path, backbone: &Backbone) -> Result<EncoderSnapshot, CliError> {
    let snapshot = EncoderSnapshot {
        mode: backbone.mode().as_str().to_string(),
        weights: write_tensors(dir, backbone.named_weights().into_iter())?,
    };
    write_json(&dir.join(ENCODER_FILE), &snapshot)?;
    Ok(snapshot)
}
