//! Dataset directories: `train.ptpe`, `test.ptpe` and optionally `text.ptpe`,
//! each with its sidecar manifest.

use std::fs;
use std::path::Path;

use ptp_core::data::{gen_synthetic_gmm, CategoryCatalog, DatasetSplit, SplitTag, SyntheticGmmConfig};
use ptp_core::eval::Dataset;
use ptp_core::tensorad::Tensor;

use crate::error::CliError;
use crate::store::{load_store, save_store, Dtype, EmbeddingStore, Manifest, Matrix, StoreError};

/// Vocabulary used to tokenize category names positionally.
pub const CATALOG_VOCAB: usize = 1024;

/// Builds a preset synthetic dataset in memory. `seed` overrides the preset's
/// generator seed.
pub fn synthetic(preset: &str, seed: Option<u64>) -> Result<(Dataset, SyntheticGmmConfig), CliError> {
    let mut config = SyntheticGmmConfig::preset(preset)
        .ok_or_else(|| CliError::Usage(format!("unknown preset `{preset}` (known: separable, tiny)")))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let g = gen_synthetic_gmm(&config)?;
    Ok((
        Dataset {
            name: preset.to_string(),
            train: g.train,
            test: g.test,
            catalog: g.catalog,
            text_embeddings: None,
        },
        config,
    ))
}

fn split_store(split: &DatasetSplit, catalog: &CategoryCatalog, encoder: &str) -> EmbeddingStore {
    EmbeddingStore {
        matrix: Matrix::new(split.len(), split.dim(), Dtype::F32, split.latents().to_vec()),
        manifest: Manifest {
            classes: catalog.names().to_vec(),
            labels: split.labels().to_vec(),
            split: split.tag().as_str().to_string(),
            encoder: encoder.to_string(),
            l2_normalized: false,
        },
    }
}

/// Writes a dataset directory. Latents are stored as f32.
pub fn write_dataset(dir: &Path, data: &Dataset, encoder: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    save_store(&dir.join("train.ptpe"), &split_store(&data.train, &data.catalog, encoder))?;
    save_store(&dir.join("test.ptpe"), &split_store(&data.test, &data.catalog, encoder))?;
    if let Some(text) = &data.text_embeddings {
        let store = EmbeddingStore {
            matrix: Matrix::from_tensor(text, Dtype::F32),
            manifest: Manifest {
                classes: data.catalog.names().to_vec(),
                labels: (0..data.catalog.len()).collect(),
                split: "text".to_string(),
                encoder: encoder.to_string(),
                l2_normalized: true,
            },
        };
        save_store(&dir.join("text.ptpe"), &store)?;
    }
    Ok(())
}

fn to_split(store: &EmbeddingStore, tag: SplitTag, first_id: u64, path: &Path) -> Result<DatasetSplit, CliError> {
    if store.manifest.split != tag.as_str() {
        return Err(CliError::Data(format!(
            "{}: manifest split `{}`, expected `{}`",
            path.display(),
            store.manifest.split,
            tag.as_str()
        )));
    }
    let n = store.matrix.rows as u64;
    Ok(DatasetSplit::new(
        tag,
        store.matrix.dim,
        (first_id..first_id + n).collect(),
        store.manifest.labels.clone(),
        store.matrix.data.clone(),
    )?)
}

/// Reads a dataset directory written by [`write_dataset`] or an exporter.
/// Training rows get ids `0..N_train`, test rows continue after them.
pub fn read_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let train_path = dir.join("train.ptpe");
    let train = load_store(&train_path, None)?;
    let d = train.matrix.dim;
    let test_path = dir.join("test.ptpe");
    let test = load_store(&test_path, Some(d))?;
    if train.manifest.classes != test.manifest.classes {
        return Err(CliError::Data(format!(
            "{} and {} list different classes",
            train_path.display(),
            test_path.display()
        )));
    }
    let catalog = CategoryCatalog::with_positional_tokens(train.manifest.classes.clone(), CATALOG_VOCAB)?;
    let text_path = dir.join("text.ptpe");
    let text_embeddings = if text_path.exists() {
        let text = load_store(&text_path, Some(d))?;
        if text.matrix.rows != catalog.len() || text.manifest.classes != train.manifest.classes {
            return Err(CliError::Store(StoreError::LabelMismatch {
                path: text_path,
                rows: text.matrix.rows,
                labels: catalog.len(),
            }));
        }
        Some(Tensor::new(&[text.matrix.rows, d], text.matrix.data)?)
    } else {
        None
    };
    let train_split = to_split(&train, SplitTag::Train, 0, &train_path)?;
    let test_split = to_split(&test, SplitTag::Test, train_split.len() as u64, &test_path)?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".to_string());
    Ok(Dataset {
        name,
        train: train_split,
        test: test_split,
        catalog,
        text_embeddings,
    })
}
