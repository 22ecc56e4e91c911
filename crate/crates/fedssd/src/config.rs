//! Run specifications in TOML. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use fedssd_core::data::{dirichlet_partition, stratified_subset, ClientPartition, Dataset, GaussianMixture};
use fedssd_core::federation::FedConfig;
use fedssd_core::metrics::{EvalConfig, MetricTarget, ProbeConfig};
use fedssd_core::numerics::Rng;
use serde::{Deserialize, Serialize};

use crate::formats::{load_binary_dataset, load_csv_dataset};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub federation: FedConfig,
    pub data: DataSpec,
    pub partition: PartitionSpec,
    pub evaluation: EvaluationSpec,
    pub output: OutputSpec,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            federation: FedConfig {
                num_clients: 4,
                batch_size: 64,
                ..FedConfig::default()
            },
            data: DataSpec::default(),
            partition: PartitionSpec::default(),
            evaluation: EvaluationSpec::default(),
            output: OutputSpec::default(),
        }
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Train and test sets drawn from the same Gaussian mixture.
    Synthetic {
        classes: usize,
        samples_per_class: usize,
        test_samples_per_class: usize,
        input_dim: usize,
        center_spread: f64,
        within_std: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        /// Held-out file; when absent a stratified `test_fraction` split of
        /// `path` is used.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    Binary {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic {
            classes: 4,
            samples_per_class: 200,
            test_samples_per_class: 200,
            input_dim: 32,
            center_spread: 1.0,
            within_std: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSpec {
    /// Concentration of the per-class Dirichlet split; the client count is
    /// `federation.num_clients`.
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec { dirichlet_alpha: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSpec {
    pub target: MetricTarget,
    pub probe: ProbeConfig,
    pub probe_fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        let d = EvalConfig::default();
        EvaluationSpec { target: d.target, probe: d.probe, probe_fractions: d.probe_fractions, seed: d.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: PathBuf::from("runs/latest") }
    }
}

/// Training data, held-out data and the client split.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: ClientPartition,
}

impl RunSpec {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config { path: origin.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    /// Canonical TOML with every default filled in. Fails for seeds above
    /// `i64::MAX`, which TOML cannot represent.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config { path: PathBuf::from("<resolved>"), message: e.to_string() })
    }

    pub fn eval_config(&self, target: MetricTarget) -> EvalConfig {
        EvalConfig {
            target,
            temperature: self.federation.weights.temperature,
            probe: self.evaluation.probe,
            probe_fractions: self.evaluation.probe_fractions.clone(),
            augment: self.federation.augment,
            seed: self.evaluation.seed,
        }
    }

    /// Loads or generates the data and partitions the training set.
    pub fn prepare(&self) -> Result<Prepared> {
        let (train, test) = match &self.data {
            DataSpec::Synthetic { classes, samples_per_class, test_samples_per_class, input_dim, center_spread, within_std, seed } => {
                if *samples_per_class == 0 || *test_samples_per_class == 0 {
                    return Err(Error::Usage("synthetic data needs at least one sample per class".into()));
                }
                let root = Rng::new(*seed);
                let mixture = GaussianMixture::new(&mut root.fork(&[0]), *classes, *input_dim, *center_spread, *within_std)?;
                (
                    mixture.sample(&mut root.fork(&[1]), *samples_per_class),
                    mixture.sample(&mut root.fork(&[2]), *test_samples_per_class),
                )
            }
            DataSpec::Csv { path, label_column, test_path, test_fraction, seed } => {
                let all = load_csv_dataset(path, label_column)?;
                match test_path {
                    Some(t) => (all, load_csv_dataset(t, label_column)?),
                    None => split(all, *test_fraction, *seed)?,
                }
            }
            DataSpec::Binary { path, test_path, test_fraction, seed } => {
                let all = load_binary_dataset(path)?;
                match test_path {
                    Some(t) => (all, load_binary_dataset(t)?),
                    None => split(all, *test_fraction, *seed)?,
                }
            }
        };
        let partition = dirichlet_partition(
            &mut Rng::new(self.partition.seed),
            &train.labels,
            self.federation.num_clients,
            self.partition.dirichlet_alpha,
        )?;
        Ok(Prepared { train, test, partition })
    }
}

/// Stratified hold-out: `fraction` of every class goes to the test set.
fn split(all: Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let test_idx = stratified_subset(&mut Rng::new(seed), &all.labels, fraction)?;
    let mut is_test = vec![false; all.len()];
    for &i in &test_idx {
        is_test[i] = true;
    }
    let train_idx: Vec<usize> = (0..all.len()).filter(|&i| !is_test[i]).collect();
    if train_idx.is_empty() {
        return Err(Error::Usage(format!("test_fraction {fraction} leaves no training samples")));
    }
    Ok((all.subset(&train_idx), all.subset(&test_idx)))
}
