use std::path::{Path, PathBuf};

use chansparse::connectivity::{ArchSpec, TransformKind, TransformSpec};
use chansparse::training::{
    load_mnist, synth_dataset, Dataset, DensifySchedule, SynthSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Architecture given inline or as a path to a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSource {
    Path(PathBuf),
    Inline(ArchSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synth {
        #[serde(flatten)]
        spec: SynthSpec,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Fractions of the dense conv-parameter count.
    pub budgets: Vec<f64>,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<TransformKind>,
}

fn default_kinds() -> Vec<TransformKind> {
    vec![TransformKind::DepthMultiplier, TransformKind::SparseRandom]
}

fn default_threads() -> usize {
    1
}

/// One experiment, fully described by a single JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub arch: ArchSource,
    #[serde(default = "TransformSpec::dense")]
    pub transform: TransformSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub densify: Option<DensifySchedule>,
    pub dataset: DatasetSpec,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl ExperimentConfig {
    /// Parses a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg =
            Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ArchSource::Path(p) = &mut self.arch {
            fix(p);
        }
        if let DatasetSpec::Mnist { dir, .. } = &mut self.dataset {
            fix(dir);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        if self.threads == 0 {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        self.train.validate().map_err(config_err)?;
        self.transform.validate().map_err(config_err)?;
        if let Some(d) = &self.densify {
            d.validate().map_err(config_err)?;
        }
        if let Some(s) = &self.sweep {
            if s.budgets.is_empty() || s.kinds.is_empty() {
                return Err(CliError::Config("sweep needs budgets and kinds".into()));
            }
            if let Some(b) = s.budgets.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
                return Err(CliError::Config(format!("budget {b} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<ArchSpec, CliError> {
        load_arch(&self.arch)
    }
}

pub fn load_arch(src: &ArchSource) -> Result<ArchSpec, CliError> {
    match src {
        ArchSource::Inline(a) => {
            a.validate().map_err(config_err)?;
            Ok(a.clone())
        }
        ArchSource::Path(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            ArchSpec::from_json(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn config_err(e: chansparse::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// Loads the train and test sets named by `spec`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset), CliError> {
    match spec {
        DatasetSpec::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            if !dir.is_dir() {
                return Err(CliError::Config(format!(
                    "dataset directory {} does not exist",
                    dir.display()
                )));
            }
            for (images, labels) in chansparse::training::mnist_paths(dir) {
                for p in [images, labels] {
                    if !p.is_file() {
                        return Err(CliError::Config(format!(
                            "dataset file {} does not exist",
                            p.display()
                        )));
                    }
                }
            }
            let (mut train, mut test) =
                load_mnist(dir).map_err(|e| CliError::Artifact(e.to_string()))?;
            if let Some(n) = train_limit {
                train = train.take(*n);
            }
            if let Some(n) = test_limit {
                test = test.take(*n);
            }
            Ok((train, test))
        }
        DatasetSpec::Synth { spec, seed } => synth_dataset(spec, *seed).map_err(config_err),
    }
}
