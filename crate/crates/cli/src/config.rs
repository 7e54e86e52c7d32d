use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use trrisk::convex_terms::NonsmoothTerm;
use trrisk::dual_prox::SpgConfig;
use trrisk::problems::burgers::BurgersConfig;
use trrisk::problems::elliptic::EllipticConfig;
use trrisk::problems::synthetic::SyntheticKind;
use trrisk::tr_engine::{Inexactness, TrConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unsupported config extension for {0} (expected .toml or .json)")]
    Extension(PathBuf),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// One experiment: problem, solver settings and where to put the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub tr: TrConfig,
    #[serde(default)]
    pub spg: SpgConfig,
    /// Overrides `tr.mode` when set.
    #[serde(default)]
    pub mode: Option<Inexactness>,
    #[serde(default)]
    pub output: OutputConfig,
    /// Seed of the random problem data (synthetic and Burgers).
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Synthetic(SyntheticParams),
    Burgers(BurgersParams),
    Elliptic(EllipticConfig),
}

impl ProblemConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemConfig::Synthetic(_) => "synthetic",
            ProblemConfig::Burgers(_) => "burgers",
            ProblemConfig::Elliptic(_) => "elliptic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub dim_x: usize,
    pub dim_y: usize,
    pub form: SyntheticKind,
    pub phi: NonsmoothTerm,
    /// Risk envelope `lambda E + (1 - lambda) AVaR_p`.
    pub lambda: f64,
    pub p: f64,
    /// Constant initial guess.
    pub x0: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            dim_x: 8,
            dim_y: 10,
            form: SyntheticKind::ConvexQuadratic,
            phi: NonsmoothTerm::L1PlusBox { tau: 0.05, lo: -2.0, hi: 2.0 },
            lambda: 0.75,
            p: 0.9,
            x0: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurgersParams {
    pub n_cells: usize,
    pub n_samples: usize,
    pub lambda: f64,
    pub p: f64,
    pub tau: f64,
}

impl Default for BurgersParams {
    fn default() -> Self {
        let d = BurgersConfig::default();
        Self {
            n_cells: d.n_cells,
            n_samples: d.n_samples,
            lambda: d.lambda,
            p: d.p,
            tau: d.tau,
        }
    }
}

impl BurgersParams {
    pub fn with_seed(&self, seed: u64) -> BurgersConfig {
        BurgersConfig {
            n_cells: self.n_cells,
            n_samples: self.n_samples,
            seed,
            lambda: self.lambda,
            p: self.p,
            tau: self.tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// File stem of the artifacts; the config file stem when absent.
    pub name: Option<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            name: None,
        }
    }
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub mode: Option<Inexactness>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parse = |message: String| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| parse(e.to_string()))?,
            Some("json") => serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?,
            _ => return Err(ConfigError::Extension(path.to_path_buf())),
        };
        if cfg.output.name.is_none() {
            cfg.output.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(dir) = &o.out_dir {
            self.output.dir = dir.clone();
        }
        if let Some(mode) = o.mode {
            self.mode = Some(mode);
        }
    }

    /// Trust-region settings with the mode override folded in.
    pub fn tr_config(&self) -> TrConfig {
        let mut tr = self.tr;
        if let Some(mode) = self.mode {
            tr.mode = mode;
        }
        tr
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.tr_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.spg.tol > 0.0) || self.spg.max_iter == 0 {
            return Err(ConfigError::Invalid("spg.tol and spg.max_iter must be positive".into()));
        }
        if let ProblemConfig::Synthetic(s) = &self.problem {
            s.phi.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn stem(&self) -> String {
        self.output.name.clone().unwrap_or_else(|| self.problem.name().to_string())
    }

    pub fn csv_path(&self) -> PathBuf {
        self.output.dir.join(format!("{}.csv", self.stem()))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.output.dir.join(format!("{}.json", self.stem()))
    }
}
