//! Run configuration: one TOML file fully determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cam::CamConfig;
use crate::classifier::{ClassifierConfig, ClassifierTrainConfig};
use crate::dataset::DatasetConfig;
use crate::error::{io_err, Error, Result};
use crate::metrics::MetricsConfig;
use crate::postprocess::PostprocessConfig;
use crate::segmenter::SegmenterConfig;
use crate::synthetic::SynthSpec;
use crate::training::StageConfig;
use crate::weights::LoadMode;

/// Environment variable overriding `paths.data_root`.
pub const ENV_DATA_ROOT: &str = "GRADEPROMPT_DATA_ROOT";
/// Environment variable overriding `paths.work_dir`.
pub const ENV_WORK_DIR: &str = "GRADEPROMPT_WORK_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// GlaS-layout dataset directory.
    pub data_root: PathBuf,
    /// Parent of all run directories.
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data/glas"),
            work_dir: PathBuf::from("work"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub model: ClassifierConfig,
    pub train: ClassifierTrainConfig,
    /// Optional externally trained weights to start from.
    pub init_weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub gland: StageConfig,
    pub contour: StageConfig,
    /// Optional manifest loaded before the gland stage (e.g. converted
    /// pretrained weights). Loaded permissively unless `--strict-weights`.
    pub init_weights: Option<PathBuf>,
    /// Copy gland prompt-encoder/decoder weights from `init_weights` into
    /// the contour branch as well.
    pub duplicate_into_contour: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            gland: StageConfig::default(),
            contour: StageConfig::default(),
            init_weights: None,
            duplicate_into_contour: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub run_id: String,
    pub paths: PathsConfig,
    pub synthetic: SynthSpec,
    pub dataset: DatasetConfig,
    pub classifier: ClassifierSection,
    pub cam: CamConfig,
    pub segmenter: SegmenterConfig,
    pub training: TrainingSection,
    pub postprocess: PostprocessConfig,
    pub metrics: MetricsConfig,
    /// Weight loading mode for checkpoints and init weights.
    pub weight_loading: LoadMode,
    /// Batch size for inference commands.
    pub inference_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            run_id: "default".into(),
            paths: PathsConfig::default(),
            synthetic: SynthSpec::default(),
            dataset: DatasetConfig::default(),
            classifier: ClassifierSection::default(),
            cam: CamConfig::default(),
            segmenter: SegmenterConfig::default(),
            training: TrainingSection::default(),
            postprocess: PostprocessConfig::default(),
            metrics: MetricsConfig::default(),
            weight_loading: LoadMode::Permissive,
            inference_batch: 4,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.paths.data_root = resolve(base, &cfg.paths.data_root);
            cfg.paths.work_dir = resolve(base, &cfg.paths.work_dir);
            for p in [&mut cfg.training.init_weights, &mut cfg.classifier.init_weights].into_iter().flatten() {
                *p = resolve(base, p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Applies `GRADEPROMPT_DATA_ROOT` / `GRADEPROMPT_WORK_DIR`.
    pub fn apply_env(&mut self) {
        self.apply_overrides(std::env::var_os(ENV_DATA_ROOT).map(PathBuf::from), std::env::var_os(ENV_WORK_DIR).map(PathBuf::from));
    }

    pub fn apply_overrides(&mut self, data_root: Option<PathBuf>, work_dir: Option<PathBuf>) {
        if let Some(p) = data_root {
            self.paths.data_root = p;
        }
        if let Some(p) = work_dir {
            self.paths.work_dir = p;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id == ".." {
            return Err(Error::Config(format!("run_id `{}` must be a plain directory name", self.run_id)));
        }
        if self.dataset.patch_size != self.classifier.model.image_size || self.dataset.patch_size != self.segmenter.image_size {
            return Err(Error::Config(format!(
                "patch size {} must equal classifier image_size {} and segmenter image_size {}",
                self.dataset.patch_size, self.classifier.model.image_size, self.segmenter.image_size
            )));
        }
        self.classifier.model.validate()?;
        self.segmenter.validate()?;
        if self.inference_batch == 0 {
            return Err(Error::Config("inference_batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.work_dir.join(&self.run_id)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
