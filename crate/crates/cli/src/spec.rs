//! Declarative run specification: a sectioned TOML file describing the
//! dataset, model, training settings, and output directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use vardfs_core::concrete::TemperatureSchedule;
use vardfs_core::dataio::{
    build_bow_instances, build_image_dataset, build_image_dataset_for_epoch,
    build_synthetic_dataset, load_embeddings, load_idx_images, Dataset, EmbeddingFormat,
    SyntheticConfig,
};
use vardfs_core::concrete::Rng;
use vardfs_core::dfsengine::RunConfig;
use vardfs_core::error::{CoreError, Result};
use vardfs_core::oracle::NaiveBayesSpec;
use vardfs_core::setmodel::{EncoderArch, PoolingMode, SetEncoderConfig};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpecFile {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    ImageIdx,
    Bow,
    SyntheticOracle,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    // image-idx
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub sample_count: Option<usize>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub resample_per_epoch: bool,
    // bow
    pub corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub embedding_format: Option<EmbeddingFormat>,
    #[serde(default)]
    pub log_counts: bool,
    // synthetic-oracle
    pub classes: Option<usize>,
    pub features: Option<usize>,
    pub train_instances: Option<usize>,
    pub test_instances: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: EncoderArch,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    pub pooling: PoolingMode,
}

fn default_heads() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub budget: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl RunSpecFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::Config(format!("spec file {}: {e}", path.display()))
        })?;
        let spec: RunSpecFile = toml::from_str(&text)
            .map_err(|e| CoreError::Config(format!("spec file {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let need_file = |field: &str, p: &Option<PathBuf>| -> Result<()> {
            match p {
                None => Err(CoreError::Config(format!("dataset.{field} is required"))),
                Some(p) if !p.exists() => Err(CoreError::Config(format!(
                    "dataset.{field}: path {} does not exist",
                    p.display()
                ))),
                _ => Ok(()),
            }
        };
        match d.kind {
            DatasetKind::ImageIdx => {
                need_file("train_images", &d.train_images)?;
                need_file("train_labels", &d.train_labels)?;
                need_file("test_images", &d.test_images)?;
                need_file("test_labels", &d.test_labels)?;
                if d.sample_count.unwrap_or(0) == 0 {
                    return Err(CoreError::Config("dataset.sample_count must be ≥ 1".into()));
                }
            }
            DatasetKind::Bow => {
                need_file("corpus", &d.corpus)?;
                need_file("test_corpus", &d.test_corpus)?;
                need_file("embeddings", &d.embeddings)?;
                if d.embedding_format.is_none() {
                    return Err(CoreError::Config("dataset.embedding_format is required".into()));
                }
                if d.sample_count.unwrap_or(0) == 0 {
                    return Err(CoreError::Config("dataset.sample_count must be ≥ 1".into()));
                }
            }
            DatasetKind::SyntheticOracle => {
                if d.classes.unwrap_or(0) < 2 {
                    return Err(CoreError::Config("dataset.classes must be ≥ 2".into()));
                }
                if d.features.unwrap_or(0) == 0 || d.train_instances.unwrap_or(0) == 0 {
                    return Err(CoreError::Config(
                        "dataset.features and dataset.train_instances must be ≥ 1".into(),
                    ));
                }
            }
        }
        if self.train.budget == 0 {
            return Err(CoreError::Config("train.budget must be ≥ 1".into()));
        }
        self.encoder_config().validate()?;
        self.run_config()?.validate()?;
        Ok(())
    }

    pub fn encoder_config(&self) -> SetEncoderConfig {
        SetEncoderConfig {
            arch: self.model.arch,
            hidden_dim: self.model.hidden_dim,
            num_blocks: self.model.num_blocks,
            num_heads: self.model.num_heads,
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let t = &self.train;
        Ok(RunConfig {
            budget: t.budget,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: t.seed,
            schedule: TemperatureSchedule::geometric(
                t.temperature_start,
                t.temperature_end,
                t.epochs,
            )?,
            policy_encoder: self.encoder_config(),
            predictor_encoder: self.encoder_config(),
            validation_fraction: t.validation_fraction,
        })
    }

    pub fn build_train_dataset(&self) -> Result<Dataset> {
        self.build_dataset(Split::Train, 0)
    }

    /// Training data for a given epoch; differs across epochs only when
    /// `resample_per_epoch` is set on an image dataset.
    pub fn build_train_dataset_for_epoch(&self, epoch: u64) -> Result<Dataset> {
        self.build_dataset(Split::Train, epoch)
    }

    pub fn build_test_dataset(&self) -> Result<Dataset> {
        self.build_dataset(Split::Test, 0)
    }

    /// Per-instance generative specs aligned with the synthetic test set.
    pub fn build_test_specs(&self) -> Result<(Dataset, Vec<NaiveBayesSpec>)> {
        let d = &self.dataset;
        if d.kind != DatasetKind::SyntheticOracle {
            return Err(CoreError::Config("oracle checks need a synthetic-oracle dataset".into()));
        }
        let cfg = SyntheticConfig {
            n_classes: d.classes.unwrap(),
            n_features: d.features.unwrap(),
            n_instances: d.test_instances.unwrap_or(1000),
            seed: self.train.seed ^ 0x7357,
        };
        build_synthetic_dataset(&cfg)
    }

    fn build_dataset(&self, split: Split, epoch: u64) -> Result<Dataset> {
        let d = &self.dataset;
        let seed = match split {
            Split::Train => self.train.seed,
            Split::Test => self.train.seed.wrapping_add(1),
        };
        match d.kind {
            DatasetKind::ImageIdx => {
                let (images, labels, limit) = match split {
                    Split::Train => (
                        d.train_images.as_ref().unwrap(),
                        d.train_labels.as_ref().unwrap(),
                        d.train_limit,
                    ),
                    Split::Test => (
                        d.test_images.as_ref().unwrap(),
                        d.test_labels.as_ref().unwrap(),
                        d.test_limit,
                    ),
                };
                let set = load_idx_images(images, labels)?;
                let count = d.sample_count.unwrap();
                if matches!(split, Split::Train) && d.resample_per_epoch {
                    build_image_dataset_for_epoch(&set, count, seed, epoch, limit)
                } else {
                    build_image_dataset(&set, count, seed, limit)
                }
            }
            DatasetKind::Bow => {
                let corpus = match split {
                    Split::Train => d.corpus.as_ref().unwrap(),
                    Split::Test => d.test_corpus.as_ref().unwrap(),
                };
                let table =
                    load_embeddings(d.embeddings.as_ref().unwrap(), d.embedding_format.unwrap())?;
                let rng = Rng::new(seed);
                build_bow_instances(corpus, &table, d.sample_count.unwrap(), d.log_counts, &rng)
            }
            DatasetKind::SyntheticOracle => {
                let n_instances = match split {
                    Split::Train => d.train_instances.unwrap(),
                    Split::Test => d.test_instances.unwrap_or(1000),
                };
                let cfg = SyntheticConfig {
                    n_classes: d.classes.unwrap(),
                    n_features: d.features.unwrap(),
                    n_instances,
                    seed: match split {
                        Split::Train => self.train.seed,
                        Split::Test => self.train.seed ^ 0x7357,
                    },
                };
                Ok(build_synthetic_dataset(&cfg)?.0)
            }
        }
    }
}

enum Split {
    Train,
    Test,
}
