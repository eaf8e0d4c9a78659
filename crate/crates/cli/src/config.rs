//! JSON run configuration: one document with `network`, `train`,
//! `integrate`, `certify`, and `perturb` sections. Unknown keys are
//! rejected everywhere.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use stbl_core::cert::PowerOpts;
use stbl_core::data::{load_idx_dataset, Dataset, SplitDataset, SyntheticSpec};
use stbl_core::inclusion::{EnvelopeKind, InclusionProblem, InclusionVariant, Schedule};
use stbl_core::network::NetworkSpec;
use stbl_core::robustness::{NoiseKind, NoiseSpec};
use stbl_core::train::TrainConfig;
use stbl_core::{Error, Feature64, Result};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: Option<NetworkSpec>,
    pub train: Option<TrainSection>,
    pub integrate: Option<IntegrateSection>,
    pub certify: Option<CertifySection>,
    pub perturb: Option<PerturbSection>,
}

impl RunConfig {
    pub fn power_opts(&self) -> PowerOpts {
        let c = self.certify_section();
        PowerOpts {
            tol: c.tol,
            max_iter: c.max_iter,
        }
    }

    pub fn certify_section(&self) -> CertifySection {
        self.certify.clone().unwrap_or_default()
    }

    pub fn init_seed(&self) -> u64 {
        self.train.as_ref().map(|t| t.optimizer.seed).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: TrainConfig,
    pub dataset: DatasetSection,
    /// Apply per-channel mean/std normalization (statistics from the
    /// training split) before training and evaluation.
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSection {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
    },
}

impl DatasetSection {
    pub fn load(&self) -> Result<SplitDataset> {
        match self {
            DatasetSection::Synthetic(spec) => spec.generate(),
            DatasetSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => Ok(SplitDataset {
                train: load_idx_dataset(train_images, train_labels, *classes)?,
                test: load_idx_dataset(test_images, test_labels, *classes)?,
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Random inputs for the growth campaign.
    #[serde(default = "default_campaign")]
    pub growth_inputs: usize,
    /// Random pairs for the sensitivity campaign.
    #[serde(default = "default_campaign")]
    pub sensitivity_pairs: usize,
    /// Amplitude of the random campaign inputs.
    #[serde(default = "default_scale")]
    pub input_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_tol() -> f64 {
    1e-9
}
fn default_max_iter() -> usize {
    5000
}
fn default_campaign() -> usize {
    10
}
fn default_scale() -> f64 {
    1.0
}

impl Default for CertifySection {
    fn default() -> Self {
        CertifySection {
            tol: default_tol(),
            max_iter: default_max_iter(),
            growth_inputs: default_campaign(),
            sensitivity_pairs: default_campaign(),
            input_scale: default_scale(),
            seed: 0,
        }
    }
}

/// Piecewise-constant schedule in JSON form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection<V> {
    pub times: Vec<f64>,
    pub values: Vec<V>,
}

type MatrixRows = Vec<Vec<f64>>;

impl ScheduleSection<MatrixRows> {
    fn build(&self, dim: usize) -> Result<Schedule<DMatrix<f64>>> {
        let mut values = Vec::with_capacity(self.values.len());
        for rows in &self.values {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::Config(format!(
                    "schedule matrices must be {dim}x{dim}"
                )));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            values.push(DMatrix::from_row_slice(dim, dim, &flat));
        }
        Schedule::new(self.times.clone(), values)
    }
}

impl ScheduleSection<Vec<f64>> {
    fn build_vec(&self, dim: usize) -> Result<Schedule<DVector<f64>>> {
        let mut values = Vec::with_capacity(self.values.len());
        for v in &self.values {
            if v.len() != dim {
                return Err(Error::Config(format!(
                    "schedule vectors must have length {dim}"
                )));
            }
            values.push(DVector::from_column_slice(v));
        }
        Schedule::new(self.times.clone(), values)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrateSection {
    pub variant: InclusionVariant,
    pub horizon: f64,
    pub tau: f64,
    pub x0: Vec<f64>,
    /// First weight schedule (the only one for the symmetric form).
    pub a1: ScheduleSection<MatrixRows>,
    /// Second weight schedule; required for the general and decay forms,
    /// ignored by the symmetric form.
    pub a2: Option<ScheduleSection<MatrixRows>>,
    pub b1: ScheduleSection<Vec<f64>>,
    pub b2: ScheduleSection<Vec<f64>>,
    /// Bounds to check along the trajectory.
    #[serde(default)]
    pub envelopes: Vec<EnvelopeKind>,
    /// Second initial state for sensitivity envelopes.
    pub y0: Option<Vec<f64>>,
}

impl IntegrateSection {
    pub fn build_problem(&self) -> Result<InclusionProblem> {
        let dim = self.x0.len();
        let x0 = DVector::from_column_slice(&self.x0);
        let a1 = self.a1.build(dim)?;
        let b1 = self.b1.build_vec(dim)?;
        let b2 = self.b2.build_vec(dim)?;
        match self.variant {
            InclusionVariant::Symmetric => {
                InclusionProblem::symmetric(a1, b1, b2, self.horizon, x0)
            }
            InclusionVariant::General | InclusionVariant::Decay => {
                let a2 = self
                    .a2
                    .as_ref()
                    .ok_or_else(|| {
                        Error::Config("general and decay forms need the a2 schedule".into())
                    })?
                    .build(dim)?;
                if self.variant == InclusionVariant::Decay {
                    InclusionProblem::decay(a1, a2, b1, b2, self.horizon, x0)
                } else {
                    InclusionProblem::general(a1, a2, b1, b2, self.horizon, x0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    pub noise: Vec<NoiseSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseSection {
    Unstructured {
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    Structured {
        epsilon: f64,
        /// Index of a test image to use as the structured pattern...
        #[serde(default)]
        x0_test_index: Option<usize>,
        /// ...or a tensor file holding it.
        #[serde(default)]
        x0_path: Option<PathBuf>,
        #[serde(default)]
        seed: u64,
    },
}

impl NoiseSection {
    pub fn build(&self, test: &Dataset, seed_override: Option<u64>) -> Result<NoiseSpec> {
        match self {
            NoiseSection::Unstructured { sigma, seed } => Ok(NoiseSpec {
                kind: NoiseKind::Unstructured { sigma: *sigma },
                seed: seed_override.unwrap_or(*seed),
            }),
            NoiseSection::Structured {
                epsilon,
                x0_test_index,
                x0_path,
                seed,
            } => {
                let x0 = match (x0_test_index, x0_path) {
                    (Some(idx), None) => test
                        .images
                        .get(*idx)
                        .cloned()
                        .ok_or_else(|| {
                            Error::Config(format!("x0_test_index {idx} is out of range"))
                        })?,
                    (None, Some(path)) => {
                        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
                        Feature64::read_stbl(&mut f)?
                    }
                    _ => {
                        return Err(Error::Config(
                            "structured noise needs exactly one of x0_test_index or x0_path"
                                .into(),
                        ))
                    }
                };
                Ok(NoiseSpec {
                    kind: NoiseKind::Structured {
                        epsilon: *epsilon,
                        x0,
                    },
                    seed: seed_override.unwrap_or(*seed),
                })
            }
        }
    }
}
