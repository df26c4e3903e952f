//! The run configuration file.

use std::path::{Path, PathBuf};

use hbp::data::{idx_dataset, load_cifar10_binary, load_idx, synthetic_classification_with, Dataset, Standardizer};
use hbp::engine::DEFAULT_MEMORY_CAP;
use hbp::optim::{NewtonOptimizer, Optimizer, SubBlocks, UpdateConfig};
use hbp::oracle::{VerifyTolerances, DEFAULT_FD_CAP, DEFAULT_HESS_STEP};
use hbp::solver::CgConfig;
use hbp::train::TrainSettings;
use hbp::{BatchMode, CurvatureKind, NetworkSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Idx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Newton,
    Sgd,
    Adam,
}

/// Every key is optional except `network`; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkSpec,

    pub dataset: DataSource,
    /// CIFAR-10 batch file, or IDX image file.
    pub train_path: Option<PathBuf>,
    /// IDX label file.
    pub train_labels_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub test_labels_path: Option<PathBuf>,
    /// CIFAR-10 labels to keep, relabelled in ascending order.
    pub class_filter: Option<Vec<u8>>,
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    /// Defaults to the network input size.
    pub synthetic_features: Option<usize>,
    /// Defaults to the network output size.
    pub synthetic_classes: Option<usize>,
    pub synthetic_spacing: f64,
    pub synthetic_noise: f64,
    pub data_seed: u64,
    pub standardize: bool,

    pub optimizer: OptimizerKind,
    pub alpha: f64,
    pub gamma: f64,
    pub kind: CurvatureKind,
    pub mode: BatchMode,
    pub subblocks: SubBlocks,
    pub cg_max_iter: usize,
    pub cg_rel_tol: f64,
    pub cg_abort_on_negative_curvature: bool,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub memory_cap: usize,

    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Size of the train-loss subset; defaults to the test set size, or the
    /// whole training set without one.
    pub eval_subset: Option<usize>,
    pub shuffle: bool,

    pub verify_samples: usize,
    pub fd_rel_tol: f64,
    pub mvp_rel_tol: f64,
    pub ggn_rel_tol: f64,
    pub min_eig_tol: f64,
    pub hess_step: f64,
    pub fd_cap: usize,

    pub bench_repetitions: usize,
    pub bench_modes: Vec<BatchMode>,

    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tol = VerifyTolerances::default();
        let cg = CgConfig::default();
        RunConfig {
            network: NetworkSpec { input: Vec::new(), layers: Vec::new(), loss: hbp::layers::LossKind::SoftmaxCrossEntropy },
            dataset: DataSource::Synthetic,
            train_path: None,
            train_labels_path: None,
            test_path: None,
            test_labels_path: None,
            class_filter: None,
            max_train: None,
            max_test: None,
            synthetic_train: 200,
            synthetic_test: 100,
            synthetic_features: None,
            synthetic_classes: None,
            synthetic_spacing: 1.0,
            synthetic_noise: 0.5,
            data_seed: 0,
            standardize: true,
            optimizer: OptimizerKind::Newton,
            alpha: 0.1,
            gamma: 0.5,
            kind: CurvatureKind::PchAbs,
            mode: BatchMode::AvgSandwich,
            subblocks: SubBlocks::Count(1),
            cg_max_iter: cg.max_iter,
            cg_rel_tol: cg.rel_tol,
            cg_abort_on_negative_curvature: cg.abort_on_negative_curvature,
            lr: 0.1,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            memory_cap: DEFAULT_MEMORY_CAP,
            seeds: vec![0],
            iterations: 100,
            batch_size: 32,
            eval_every: 10,
            eval_subset: None,
            shuffle: true,
            verify_samples: 1,
            fd_rel_tol: tol.fd_rel,
            mvp_rel_tol: tol.mvp_rel,
            ggn_rel_tol: tol.ggn_rel,
            min_eig_tol: tol.min_eig,
            hess_step: DEFAULT_HESS_STEP,
            fd_cap: DEFAULT_FD_CAP,
            bench_repetitions: 5,
            bench_modes: vec![BatchMode::ExactPerSample, BatchMode::AvgSandwich, BatchMode::AvgJacobian],
            out_dir: PathBuf::from("out"),
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn require_file(p: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    let p = p.clone().ok_or_else(|| bad(format!("{key} is required for this dataset")))?;
    if !p.is_file() {
        return Err(bad(format!("{key} {} does not exist", p.display())));
    }
    Ok(p)
}

fn check_optional(p: &Option<PathBuf>, key: &str) -> Result<(), CliError> {
    match p {
        Some(p) if !p.is_file() => Err(bad(format!("{key} {} does not exist", p.display()))),
        _ => Ok(()),
    }
}

impl RunConfig {
    /// Reads a config. Relative paths inside it resolve against the
    /// current directory.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| bad(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.network.layers.is_empty() {
            return Err(bad("config must define network layers"));
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds must not be empty"));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(bad("batch_size and eval_every must be at least 1"));
        }
        if self.verify_samples == 0 || self.bench_repetitions == 0 {
            return Err(bad("verify_samples and bench_repetitions must be at least 1"));
        }
        if self.bench_modes.is_empty() {
            return Err(bad("bench_modes must not be empty"));
        }
        match self.dataset {
            DataSource::Synthetic => {}
            DataSource::Cifar10 => {
                require_file(&self.train_path, "train_path")?;
                check_optional(&self.test_path, "test_path")?;
            }
            DataSource::Idx => {
                require_file(&self.train_path, "train_path")?;
                require_file(&self.train_labels_path, "train_labels_path")?;
                check_optional(&self.test_path, "test_path")?;
                if self.test_path.is_some() {
                    require_file(&self.test_labels_path, "test_labels_path")?;
                }
            }
        }
        self.update().validate()?;
        self.cg().validate()?;
        Ok(())
    }

    pub fn update(&self) -> UpdateConfig {
        UpdateConfig { alpha: self.alpha, gamma: self.gamma, kind: self.kind, mode: self.mode, subblocks: self.subblocks }
    }

    pub fn cg(&self) -> CgConfig {
        CgConfig {
            max_iter: self.cg_max_iter,
            rel_tol: self.cg_rel_tol,
            abort_on_negative_curvature: self.cg_abort_on_negative_curvature,
        }
    }

    pub fn tolerances(&self) -> VerifyTolerances {
        VerifyTolerances {
            fd_rel: self.fd_rel_tol,
            mvp_rel: self.mvp_rel_tol,
            ggn_rel: self.ggn_rel_tol,
            min_eig: self.min_eig_tol,
            hess_step: self.hess_step,
            fd_cap: self.fd_cap,
        }
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            iterations: self.iterations,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            shuffle: self.shuffle,
        }
    }

    pub fn optimizer(&self) -> Result<Optimizer, CliError> {
        Ok(match self.optimizer {
            OptimizerKind::Newton => {
                let mut n = NewtonOptimizer::new(self.update(), self.cg())?;
                n.memory_cap = self.memory_cap;
                Optimizer::Newton(n)
            }
            OptimizerKind::Sgd => Optimizer::Sgd { lr: self.lr, momentum: self.momentum, state: Default::default() },
            OptimizerKind::Adam => {
                Optimizer::Adam { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, state: Default::default() }
            }
        })
    }

    fn cap(ds: Dataset, max: Option<usize>) -> Result<Dataset, CliError> {
        match max {
            Some(m) if m < ds.len() => Ok(ds.subset(&(0..m).collect::<Vec<_>>())?),
            _ => Ok(ds),
        }
    }

    /// Training and optional test set, standardized with the training
    /// statistics when `standardize` is set.
    pub fn datasets(&self) -> Result<(Dataset, Option<Dataset>), CliError> {
        let filter = self.class_filter.as_deref();
        let (train, test) = match self.dataset {
            DataSource::Synthetic => {
                let d = self.synthetic_features.unwrap_or_else(|| self.network.input.iter().product());
                let c = match self.synthetic_classes {
                    Some(c) => c,
                    None => hbp::Network::from_spec(&self.network, 0)?.output_shape().len(),
                };
                let gen = |seed, n| synthetic_classification_with(seed, n, d, c, self.synthetic_spacing, self.synthetic_noise);
                let train = gen(self.data_seed, self.synthetic_train)?;
                let test =
                    if self.synthetic_test > 0 { Some(gen(self.data_seed.wrapping_add(1), self.synthetic_test)?) } else { None };
                (train, test)
            }
            DataSource::Cifar10 => {
                let train = load_cifar10_binary(&require_file(&self.train_path, "train_path")?, self.max_train, filter)?;
                let test = match &self.test_path {
                    Some(p) => Some(load_cifar10_binary(p, self.max_test, filter)?),
                    None => None,
                };
                (train, test)
            }
            DataSource::Idx => {
                let images = load_idx(&require_file(&self.train_path, "train_path")?)?;
                let labels = load_idx(&require_file(&self.train_labels_path, "train_labels_path")?)?;
                let train = Self::cap(idx_dataset(&images, &labels)?, self.max_train)?;
                let test = match &self.test_path {
                    Some(p) => {
                        let images = load_idx(p)?;
                        let labels = load_idx(&require_file(&self.test_labels_path, "test_labels_path")?)?;
                        Some(Self::cap(idx_dataset(&images, &labels)?, self.max_test)?)
                    }
                    None => None,
                };
                (train, test)
            }
        };
        if !self.standardize {
            return Ok((train, test));
        }
        let s = Standardizer::fit(&train);
        let test = test.map(|t| s.apply(&t)).transpose()?;
        Ok((s.apply(&train)?, test))
    }
}
