//! JSON serialization of fitted models.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datastore::{DesignRow, FactorSchema, PopulationKey};
use crate::error::{Error, Result};
use crate::kernels::{cross_correlation, KernelSpec, MaternParams, ModelFamily};
use crate::gp_core::{FittedModel, ModelParams, TrendAdjustment};

/// Incremented whenever the layout changes incompatibly.
pub const ARTIFACT_FORMAT: u32 = 1;

/// Square matrix with row/column labels, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl LabelledMatrix {
    pub fn new(labels: Vec<String>, m: &DMatrix<f64>) -> Self {
        let values = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        Self { labels, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// One pair for ICM-type kernels, one per latent function for SLFM.
    pub lengthscales: Vec<MaternParams>,
    pub sigma: Vec<f64>,
    pub coregionalization: LabelledMatrix,
    /// Per-dimension B̃_p, multi-level models only.
    pub factor_coregionalization: Vec<LabelledMatrix>,
    pub correlation: LabelledMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCoefficients {
    pub population: String,
    pub intercept: f64,
    pub age: f64,
    pub age_squared: f64,
    pub year: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentRecord {
    pub label: String,
    /// Index into `populations`.
    pub population: usize,
    pub scale: f64,
    pub pivot_year: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub rows: Vec<DesignRow>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub library_version: String,
    pub seed: u64,
    pub family: ModelFamily,
    pub schema: FactorSchema,
    pub populations: Vec<PopulationKey>,
    pub population_labels: Vec<String>,
    pub shared_intercept: bool,
    pub hyperparameters: Hyperparameters,
    /// Exact kernel and noise parameters used to rebuild the model.
    pub params: ModelParams,
    /// GLS trend coefficients in basis order.
    pub beta: Vec<f64>,
    pub trend: Vec<TrendCoefficients>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub kernel_param_count: usize,
    pub total_param_count: usize,
    pub n_obs: usize,
    pub adjustments: Vec<AdjustmentRecord>,
    pub training: TrainingData,
}

impl ModelArtifact {
    pub fn from_model(model: &FittedModel, seed: u64) -> Result<Self> {
        let labels: Vec<String> = (0..model.populations().len()).map(|l| model.population_label(l)).collect();
        let kernel = &model.params().kernel;
        let lengthscales = match kernel {
            KernelSpec::Slfm { latent, .. } => latent.clone(),
            KernelSpec::Sogp { matern, .. } | KernelSpec::Icm { matern, .. } | KernelSpec::MultiLevelIcm { matern, .. } => {
                vec![*matern]
            }
        };
        let factor_coregionalization = kernel
            .factor_coregionalization()
            .map(|bs| bs.iter().zip(model.schema().levels()).map(|(b, lv)| LabelledMatrix::new(lv.clone(), b)).collect())
            .unwrap_or_default();
        let beta = model.beta();
        let trend = (0..labels.len())
            .map(|l| {
                let c = model.basis().columns(l);
                TrendCoefficients {
                    population: labels[l].clone(),
                    intercept: beta[c[0]],
                    age: beta[c[1]],
                    age_squared: beta[c[2]],
                    year: beta[c[3]],
                }
            })
            .collect();
        Ok(Self {
            format_version: ARTIFACT_FORMAT,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            family: kernel.family(),
            schema: model.schema().clone(),
            populations: model.populations().to_vec(),
            hyperparameters: Hyperparameters {
                lengthscales,
                sigma: model.params().noise.sigma.clone(),
                coregionalization: LabelledMatrix::new(labels.clone(), &kernel.coregionalization()),
                factor_coregionalization,
                correlation: LabelledMatrix::new(labels.clone(), &cross_correlation(kernel)?),
            },
            params: model.params().clone(),
            beta: beta.iter().copied().collect(),
            trend,
            log_likelihood: model.log_likelihood(),
            bic: model.bic(),
            kernel_param_count: model.kernel_param_count(),
            total_param_count: model.total_param_count(),
            n_obs: model.n_obs(),
            adjustments: model
                .adjustments()
                .iter()
                .map(|a| AdjustmentRecord {
                    label: labels[a.population].clone(),
                    population: a.population,
                    scale: a.scale,
                    pivot_year: a.pivot_year,
                })
                .collect(),
            training: TrainingData { rows: model.rows().to_vec(), y: model.y().iter().copied().collect() },
            shared_intercept: model.basis().shared_intercept,
            population_labels: labels,
        })
    }

    /// Rebuilds the model with the stored trend coefficients.
    pub fn to_model(&self) -> Result<FittedModel> {
        if self.format_version != ARTIFACT_FORMAT {
            return Err(Error::Artifact(format!(
                "artifact format {} is not supported (expected {ARTIFACT_FORMAT})",
                self.format_version
            )));
        }
        let model = FittedModel::from_parts(
            self.schema.clone(),
            self.populations.clone(),
            self.params.clone(),
            self.shared_intercept,
            self.training.rows.clone(),
            self.training.y.clone(),
            Some(self.beta.clone()),
        )?;
        let n = self.populations.len();
        if let Some(a) = self.adjustments.iter().find(|a| a.population >= n) {
            return Err(Error::Artifact(format!("adjustment refers to unknown population {}", a.label)));
        }
        let adjustments = self
            .adjustments
            .iter()
            .map(|a| TrendAdjustment { population: a.population, scale: a.scale, pivot_year: a.pivot_year })
            .collect();
        Ok(model.with_adjustments(adjustments))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    /// Reads an artifact, checking the format version before the body.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == ARTIFACT_FORMAT as u64 => {}
            Some(v) => {
                return Err(Error::Artifact(format!(
                    "{} has format {v}, this build reads format {ARTIFACT_FORMAT}",
                    path.display()
                )))
            }
            None => return Err(Error::Artifact(format!("{} has no format_version", path.display()))),
        }
        Ok(serde_json::from_value(value)?)
    }
}
