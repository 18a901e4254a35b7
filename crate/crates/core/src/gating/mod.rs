//! Hard one-hot gating: region features are reduced by PCA and assigned to
//! the nearest k-means centroid, which selects the expert.

pub mod kmeans;
pub mod pca;

use std::fs;
use std::path::{Path, PathBuf};

use crate::decompose::Region;
use crate::error::{Error, Result};

pub use kmeans::{fit_kmeans, KMeansFit};
pub use pca::{fit_pca, PcaModel};

/// Feature dimension kept after PCA.
pub const PCA_DIM: usize = 256;

/// How a region is turned into a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureExtractor {
    /// Row-major pixel values.
    RawPixels,
    /// Precomputed `f32` LE embeddings of length `dim`, one file per region.
    ExternalEmbeddings { dim: usize },
}

pub fn embedding_file_path(dir: &Path, region_index: usize) -> PathBuf {
    dir.join(format!("emb_{region_index}.f32"))
}

/// Feature vector of the `region_index`-th region of an image.
/// `embeddings` names the directory holding `emb_{index}.f32` files.
pub fn extract_features(
    region: &Region,
    region_index: usize,
    extractor: FeatureExtractor,
    embeddings: Option<&Path>,
) -> Result<Vec<f32>> {
    match extractor {
        FeatureExtractor::RawPixels => Ok(region.data.clone()),
        FeatureExtractor::ExternalEmbeddings { dim } => {
            let dir = embeddings.ok_or_else(|| {
                Error::InvalidConfig("external embeddings need an embedding directory".into())
            })?;
            let path = embedding_file_path(dir, region_index);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != 4 * dim {
                return Err(Error::format(
                    bytes.len().min(4 * dim) as u64,
                    format!(
                        "{} holds {} bytes, expected {}",
                        path.display(),
                        bytes.len(),
                        4 * dim
                    ),
                ));
            }
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::format(4 * i as u64, "non-finite embedding value"));
            }
            Ok(v)
        }
    }
}

/// Fitted gate: extractor, PCA basis, and `k` centroids in PCA space.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingModel {
    pub extractor: FeatureExtractor,
    pub pca: PcaModel,
    /// Row-major `k × pca.out_dim`.
    pub centroids: Vec<f32>,
    pub k: usize,
}

/// Result of gating one region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gate {
    pub cluster: usize,
    pub onehot: Vec<u8>,
}

impl GatingModel {
    /// Fit PCA then k-means on training features.
    pub fn fit(
        features: &[Vec<f32>],
        extractor: FeatureExtractor,
        k: usize,
        seed: u64,
    ) -> Result<(GatingModel, KMeansFit)> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if features.len() < k {
            return Err(Error::NotEnoughSamples {
                needed: k,
                got: features.len(),
            });
        }
        let pca = fit_pca(features, PCA_DIM)?;
        let projected: Vec<Vec<f64>> = crate::par::map(features, |f| {
            pca.project(f)
                .map(|z| z.into_iter().map(|v| v as f64).collect::<Vec<f64>>())
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let fit = fit_kmeans(&projected, k, seed)?;
        let centroids = fit.centroids.iter().flatten().map(|&v| v as f32).collect();
        Ok((
            GatingModel {
                extractor,
                pca,
                centroids,
                k,
            },
            fit,
        ))
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        let d = self.pca.out_dim;
        &self.centroids[i * d..(i + 1) * d]
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.centroids.len() != self.k * self.pca.out_dim {
            return Err(Error::Unfitted(format!(
                "gating has k = {} and {} centroid values for dim {}",
                self.k,
                self.centroids.len(),
                self.pca.out_dim
            )));
        }
        if self.pca.components.len() != self.pca.out_dim * self.pca.in_dim
            || self.pca.mean.len() != self.pca.in_dim
        {
            return Err(Error::Unfitted("PCA basis has inconsistent shape".into()));
        }
        if self.centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig("non-finite centroid".into()));
        }
        Ok(())
    }

    /// Nearest centroid to an already extracted feature vector.
    pub fn gate_features(&self, features: &[f32]) -> Result<Gate> {
        self.validate()?;
        let z = self.pca.project(features)?;
        let mut best = (0usize, f64::INFINITY);
        for i in 0..self.k {
            let d: f64 = self
                .centroid(i)
                .iter()
                .zip(&z)
                .map(|(&c, &v)| (c as f64 - v as f64).powi(2))
                .sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        let mut onehot = vec![0u8; self.k];
        onehot[best.0] = 1;
        Ok(Gate {
            cluster: best.0,
            onehot,
        })
    }

    pub fn gate(
        &self,
        region: &Region,
        region_index: usize,
        embeddings: Option<&Path>,
    ) -> Result<Gate> {
        let f = extract_features(region, region_index, self.extractor, embeddings)?;
        self.gate_features(&f)
    }
}
