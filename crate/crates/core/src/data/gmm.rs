use alloc::format;
use alloc::vec::Vec;

use super::{CategoryCatalog, DatasetSplit, SplitTag};
use crate::encoders::TextEncoderConfig;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, purpose};
use crate::tensorad::sq_dist_rows;

const MAX_CENTROID_ATTEMPTS: usize = 10_000;

/// Gaussian-mixture testbed: categories share clusters, so images of
/// categories in one cluster look alike.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGmmConfig {
    pub clusters: usize,
    pub categories: usize,
    pub d_lat: usize,
    pub train_per_category: usize,
    pub test_per_category: usize,
    /// Minimum pairwise distance between cluster centroids.
    pub separation: f64,
    /// Std of each category mean around its centroid.
    pub class_scale: f64,
    /// Std of each sample around its category mean.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticGmmConfig {
    pub fn separable() -> Self {
        Self {
            clusters: 5,
            categories: 10,
            d_lat: 64,
            train_per_category: 32,
            test_per_category: 50,
            separation: 10.0,
            class_scale: 0.5,
            noise_scale: 0.3,
            seed: 0,
        }
    }

    /// Small and fast, for smoke runs.
    pub fn tiny() -> Self {
        Self {
            clusters: 2,
            categories: 4,
            d_lat: 16,
            train_per_category: 8,
            test_per_category: 10,
            separation: 6.0,
            class_scale: 0.3,
            noise_scale: 0.2,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "separable" => Some(Self::separable()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// True when the centroid gap dominates the within-cluster spread.
    pub fn is_separable(&self) -> bool {
        self.separation > 4.0 * (self.class_scale + self.noise_scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.categories == 0 || self.d_lat == 0 {
            return Err(Error::contract("clusters, categories and d_lat must be positive"));
        }
        if !self.categories.is_multiple_of(self.clusters) {
            return Err(Error::contract(format!(
                "{} categories cannot be split evenly over {} clusters",
                self.categories, self.clusters
            )));
        }
        let scales = [self.separation, self.class_scale, self.noise_scale];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::contract("scales must be finite and non-negative"));
        }
        Ok(())
    }

    /// Cluster of category `j`.
    pub fn cluster_of(&self, j: usize) -> usize {
        j % self.clusters
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmDataset {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub catalog: CategoryCatalog,
    /// Ground-truth cluster of each category.
    pub cluster_of: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

/// Generates train and test splits. Train ids are `0..N_train`; test ids
/// continue from `N_train`.
pub fn gen_synthetic_gmm(config: &SyntheticGmmConfig) -> Result<GmmDataset> {
    config.validate()?;
    let d = config.d_lat;
    let centroids = sample_centroids(config)?;

    let mut class_rng = rng::stream(config.seed, purpose::GMM_CLASS);
    let means: Vec<Vec<f64>> = (0..config.categories)
        .map(|j| {
            let offset = rng::normal_vec(&mut class_rng, d, config.class_scale);
            centroids[config.cluster_of(j)].iter().zip(offset).map(|(c, o)| c + o).collect()
        })
        .collect();

    let mut noise_rng = rng::stream(config.seed, purpose::GMM_NOISE);
    let mut draw = |tag: SplitTag, per_category: usize, first_id: u64| -> Result<DatasetSplit> {
        let n = per_category * config.categories;
        let mut latents = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (j, mean) in means.iter().enumerate() {
            for _ in 0..per_category {
                let noise = rng::normal_vec(&mut noise_rng, d, config.noise_scale);
                latents.extend(mean.iter().zip(noise).map(|(m, e)| m + e));
                labels.push(j);
            }
        }
        DatasetSplit::new(tag, d, (first_id..first_id + n as u64).collect(), labels, latents)
    };
    let train = draw(SplitTag::Train, config.train_per_category, 0)?;
    let test = draw(SplitTag::Test, config.test_per_category, train.len() as u64)?;

    Ok(GmmDataset {
        train,
        test,
        catalog: CategoryCatalog::synthetic(config.categories, TextEncoderConfig::default().vocab_size)?,
        cluster_of: (0..config.categories).map(|j| config.cluster_of(j)).collect(),
        centroids,
    })
}

/// Rejection-samples centroids until every pair is at least `separation` apart.
fn sample_centroids(config: &SyntheticGmmConfig) -> Result<Vec<Vec<f64>>> {
    let mut r = rng::stream(config.seed, purpose::GMM_CENTROIDS);
    let std = config.separation / math::sqrt(config.d_lat as f64);
    let min_sq = config.separation * config.separation;
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(config.clusters);
    let mut attempts = 0;
    while centroids.len() < config.clusters {
        if attempts == MAX_CENTROID_ATTEMPTS {
            return Err(Error::Infeasible(format!(
                "could not place {} centroids {} apart in {} dimensions after {MAX_CENTROID_ATTEMPTS} attempts",
                config.clusters, config.separation, config.d_lat
            )));
        }
        attempts += 1;
        let candidate = rng::normal_vec(&mut r, config.d_lat, std);
        if centroids.iter().all(|c| sq_dist_rows(c, &candidate) >= min_sq) {
            centroids.push(candidate);
        }
    }
    Ok(centroids)
}
