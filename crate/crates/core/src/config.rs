//! Experiment configuration: JSON file schema, flag overrides and resolution.
//!
//! Every field has a default, so `{}` is a valid file. Example:
//!
//! ```json
//! {
//!   "dataset": {"kind": "synthetic", "name": "two_moons", "n_train": 500, "n_test": 500, "noise": 0.1},
//!   "architectures": [{"family": "mlp", "hidden_widths": [32, 32]}],
//!   "method": "fbpc",
//!   "ipc": 10,
//!   "seeds": [0, 1, 2, 3, 4],
//!   "fbpc": {"iterations": 100},
//!   "sghmc": {"epochs": 1000}
//! }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array_io::read_json;
use crate::baselines::BpcConfig;
use crate::data::{
    make_image_toy_with, make_synthetic, CorruptionKind, Dataset, ImageToyConfig, SyntheticKind,
};
use crate::error::{FbpcError, Result};
use crate::fbpc::FbpcConfig;
use crate::models::{Activation, ArchitectureSpec, Family, Normalization};
use crate::posteriors::ExpertConfig;
use crate::sghmc::SghmcConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Fbpc,
    FbpcIsotropic,
    BpcFkl,
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Fbpc,
        Method::FbpcIsotropic,
        Method::BpcFkl,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fbpc => "fbpc",
            Method::FbpcIsotropic => "fbpc_isotropic",
            Method::BpcFkl => "bpc_fkl",
            Method::Random => "random",
        }
    }

    pub fn needs_pool(self) -> bool {
        self != Method::Random
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = FbpcError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| FbpcError::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        name: SyntheticKind,
        #[serde(default = "two")]
        num_classes: usize,
        n_train: usize,
        n_test: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    ImageToy {
        #[serde(flatten)]
        image: ImageToyConfig,
        #[serde(default)]
        seed: u64,
    },
    /// A dataset previously written in the array-container format.
    File { path: PathBuf },
}

fn two() -> usize {
    2
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            name: SyntheticKind::TwoMoons,
            num_classes: 2,
            n_train: 500,
            n_test: 500,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn build(&self) -> Result<Dataset> {
        match self {
            DatasetConfig::Synthetic {
                name,
                num_classes,
                n_train,
                n_test,
                noise,
                seed,
            } => make_synthetic(*name, *num_classes, *n_train, *n_test, *noise, *seed),
            DatasetConfig::ImageToy { image, seed } => make_image_toy_with(image, *seed),
            DatasetConfig::File { path } => Dataset::load(path),
        }
    }

    /// Directory-safe key that changes whenever the dataset definition does.
    pub fn key(&self) -> String {
        let json = serde_json::to_vec(self).expect("dataset config serializes");
        let digest = Sha256::digest(&json);
        let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        let name = match self {
            DatasetConfig::Synthetic { name, .. } => name.name(),
            DatasetConfig::ImageToy { .. } => "image_toy",
            DatasetConfig::File { .. } => "file",
        };
        format!("{name}-{hex}")
    }
}

/// Architecture without the data-dependent input shape and class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub family: Family,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            family: Family::Mlp,
            hidden_widths: vec![32, 32],
            normalization: Normalization::None,
        }
    }
}

impl ArchitectureConfig {
    pub fn resolve(&self, dataset: &Dataset) -> Result<ArchitectureSpec> {
        let spec = ArchitectureSpec {
            family: self.family,
            hidden_widths: self.hidden_widths.clone(),
            activation: Activation::Relu,
            normalization: self.normalization,
            input_shape: dataset.input_shape().to_vec(),
            num_classes: dataset.num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub architectures: Vec<ArchitectureConfig>,
    pub method: Method,
    pub ipc: usize,
    pub seeds: Vec<u64>,
    /// Seed of the expert trajectory pools.
    pub expert_seed: u64,
    pub experts: ExpertConfig,
    pub fbpc: FbpcConfig,
    pub bpc: BpcConfig,
    pub sghmc: SghmcConfig,
    /// `KIND:SEVERITY` entries evaluated after the clean test set.
    pub corruptions: Vec<String>,
    pub output: PathBuf,
    /// Root of the pool cache; `FBPC_LAB_CACHE` or `<output>/pools` when unset.
    pub pool_root: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            architectures: vec![ArchitectureConfig::default()],
            method: Method::Fbpc,
            ipc: 10,
            seeds: vec![0],
            expert_seed: 0,
            experts: ExpertConfig::default(),
            fbpc: FbpcConfig::default(),
            bpc: BpcConfig::default(),
            sghmc: SghmcConfig::default(),
            corruptions: Vec::new(),
            output: PathBuf::from("fbpc-run"),
            pool_root: None,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub method: Option<Method>,
    pub ipc: Option<usize>,
    pub corruptions: Vec<String>,
    pub output: Option<PathBuf>,
    pub pool_root: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FbpcError::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| FbpcError::Config(format!("{}: {e}", path.display())))
    }

    /// File (if any) and defaults, then flags on top.
    pub fn resolve(file: Option<&Path>, overrides: Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if !overrides.seeds.is_empty() {
            cfg.seeds = overrides.seeds;
        }
        if let Some(m) = overrides.method {
            cfg.method = m;
        }
        if let Some(i) = overrides.ipc {
            cfg.ipc = i;
        }
        if !overrides.corruptions.is_empty() {
            cfg.corruptions = overrides.corruptions;
        }
        if let Some(o) = overrides.output {
            cfg.output = o;
        }
        if overrides.pool_root.is_some() {
            cfg.pool_root = overrides.pool_root;
        }
        if cfg.method == Method::FbpcIsotropic {
            cfg.fbpc.isotropic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(FbpcError::Config("seed list is empty".into()));
        }
        if self.architectures.is_empty() {
            return Err(FbpcError::Config("no architectures listed".into()));
        }
        if self.ipc == 0 {
            return Err(FbpcError::Config("ipc must be at least 1".into()));
        }
        if let DatasetConfig::File { path } = &self.dataset {
            if !path.is_file() {
                return Err(FbpcError::Config(format!(
                    "dataset file {} does not exist",
                    path.display()
                )));
            }
        }
        self.parsed_corruptions()?;
        self.fbpc.validate()?;
        self.bpc.validate()?;
        self.sghmc.validate()?;
        Ok(())
    }

    pub fn parsed_corruptions(&self) -> Result<Vec<(CorruptionKind, u8)>> {
        self.corruptions
            .iter()
            .map(|c| parse_corruption(c))
            .collect()
    }

    pub fn pool_root(&self) -> PathBuf {
        self.pool_root
            .clone()
            .unwrap_or_else(|| self.output.join("pools"))
    }

    /// Pool directory for one architecture.
    pub fn pool_dir(&self, spec: &ArchitectureSpec) -> PathBuf {
        self.pool_root().join(self.dataset.key()).join(format!(
            "{}-seed{}",
            spec.id(),
            self.expert_seed
        ))
    }
}

/// `gaussian_noise:3` → `(GaussianNoise, 3)`.
pub fn parse_corruption(s: &str) -> Result<(CorruptionKind, u8)> {
    let (kind, sev) = s
        .split_once(':')
        .ok_or_else(|| FbpcError::Config(format!("corruption `{s}` is not KIND:SEVERITY")))?;
    let severity: u8 = sev
        .parse()
        .map_err(|_| FbpcError::Config(format!("bad severity in `{s}`")))?;
    let kind: CorruptionKind = kind.parse()?;
    kind.intensity(severity)?;
    Ok((kind, severity))
}

/// Read back a snapshot written by a previous command.
pub fn load_snapshot(path: &Path) -> Result<ExperimentConfig> {
    read_json(path)
}
