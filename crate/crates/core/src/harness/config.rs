//! Experiment configuration. A file may list several values for the run axes
//! (seeds, strategies, regimes, β) and the grid axes (λ_tgt, learning rates);
//! expansion yields one fully resolved [`RunConfig`] per combination.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::AnchorMode;
use crate::model::ModelSpec;
use crate::param_space::Regime;
use crate::unlearning::Strategy;

/// λ_tgt values searched when a grid is requested without explicit values.
pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5];

/// A scalar or a list in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            OneOrMany::One(_) => 1,
            OneOrMany::Many(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T> From<T> for OneOrMany<T> {
    fn from(v: T) -> Self {
        OneOrMany::One(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_classes: usize,
    /// Client pool size per class (synthetic).
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub pretrain_samples_per_class: usize,
    pub global_test_samples_per_class: usize,
    /// Client pool (csv).
    pub path: Option<PathBuf>,
    pub pretrain_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// The highest-numbered classes, held only by the target. 0 gives a plain
    /// Dirichlet split.
    pub exclusive_classes: usize,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_classes: 10,
            samples_per_class: 120,
            class_separation: 3.0,
            pretrain_samples_per_class: 20,
            global_test_samples_per_class: 50,
            path: None,
            pretrain_path: None,
            test_path: None,
            exclusive_classes: 2,
            test_fraction: 0.2,
        }
    }
}

impl DataConfig {
    pub fn exclusive_class_ids(&self) -> Vec<usize> {
        (self.num_classes.saturating_sub(self.exclusive_classes)..self.num_classes).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseRounds {
    pub fl: usize,
    pub fu: usize,
    pub pu: usize,
}

impl Default for PhaseRounds {
    fn default() -> Self {
        Self { fl: 3, fu: 3, pu: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr_main: OneOrMany<f64>,
    pub lr_standalone: OneOrMany<f64>,
    pub weight_decay: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub calibration_epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs_per_round: 3,
            batch_size: 32,
            lr_main: 5e-3.into(),
            lr_standalone: 5e-3.into(),
            weight_decay: 0.01,
            pretrain_epochs: 5,
            pretrain_lr: 5e-3,
            calibration_epochs: 1,
        }
    }
}

/// The config file as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub num_clients: usize,
    pub target_id: usize,
    #[serde(alias = "seed")]
    pub seeds: OneOrMany<u64>,
    pub beta: OneOrMany<f64>,
    pub strategy: OneOrMany<Strategy>,
    pub regime: OneOrMany<Regime>,
    pub anchor: AnchorMode,
    pub lambda_tgt: OneOrMany<f64>,
    /// Extend PU so every strategy sees the same total number of rounds.
    pub parity: bool,
    pub percent_plots: bool,
    /// Allowed drop of final global accuracy below the grid's best when
    /// selecting a grid point.
    pub grid_slack: f64,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub phases: PhaseRounds,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            num_clients: 5,
            target_id: 0,
            seeds: OneOrMany::Many(vec![0]),
            beta: 0.1.into(),
            strategy: Strategy::Sata.into(),
            regime: Regime::Ntk.into(),
            anchor: AnchorMode::Round,
            lambda_tgt: 1.0.into(),
            parity: true,
            percent_plots: false,
            grid_slack: 0.05,
            model: ModelSpec::default(),
            data: DataConfig::default(),
            phases: PhaseRounds::default(),
            training: TrainingConfig::default(),
        }
    }
}

/// Training hyperparameters of one resolved run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPoint {
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_standalone: f64,
    pub weight_decay: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub calibration_epochs: usize,
}

/// One point of the grid axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub lambda_tgt: f64,
    pub lr_main: f64,
    pub lr_standalone: f64,
}

/// A single fully determined run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub num_clients: usize,
    pub target_id: usize,
    pub seed: u64,
    pub beta: f64,
    pub strategy: Strategy,
    pub regime: Regime,
    pub anchor: AnchorMode,
    pub lambda_tgt: f64,
    pub parity: bool,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub phases: PhaseRounds,
    pub training: TrainingPoint,
}

impl RunConfig {
    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Identifier unique within one expansion of an experiment.
    pub fn run_id(&self) -> String {
        format!(
            "{}_{}_b{}_l{}_lm{}_ls{}_s{}",
            self.strategy,
            self.regime,
            self.beta,
            self.lambda_tgt,
            self.training.lr_main,
            self.training.lr_standalone,
            self.seed
        )
    }

    pub fn grid_point(&self) -> GridPoint {
        GridPoint {
            lambda_tgt: self.lambda_tgt,
            lr_main: self.training.lr_main,
            lr_standalone: self.training.lr_standalone,
        }
    }

    /// `(fu, pu)` actually executed. Under parity, single-round strategies move
    /// their spare FU rounds into PU and FedEraser's replay (one round per
    /// stored FL round) counts against the FU + PU budget.
    pub fn effective_rounds(&self) -> (usize, usize) {
        let PhaseRounds { fl, fu, pu } = self.phases;
        if fu == 0 {
            return (0, pu);
        }
        match self.strategy {
            Strategy::Sata | Strategy::Safa if self.parity => (1, pu + fu - 1),
            Strategy::Sata | Strategy::Safa => (1, pu),
            Strategy::FedEraser if self.parity => (fl, (fu + pu).saturating_sub(fl)),
            Strategy::FedEraser => (fl, pu),
            Strategy::Tfs | Strategy::Ctt => (fu, pu),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msgs) => Error::Config(
                msgs.into_iter()
                    .map(|m| format!("{}: {m}", path.display()))
                    .collect(),
            ),
            other => other,
        })?;
        // csv paths are relative to the config file
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.path, &mut cfg.data.pretrain_path, &mut cfg.data.test_path]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(self.num_clients >= 2, format!("num_clients: need at least 2, got {}", self.num_clients));
        check(
            self.target_id < self.num_clients,
            format!("target_id: {} is not below num_clients {}", self.target_id, self.num_clients),
        );
        check(!self.seeds.is_empty(), "seeds: empty list".into());
        check(!self.strategy.is_empty(), "strategy: empty list".into());
        check(!self.regime.is_empty(), "regime: empty list".into());
        check(!self.beta.is_empty(), "beta: empty list".into());
        for b in self.beta.to_vec() {
            check(b > 0.0 && b.is_finite(), format!("beta: must be positive and finite, got {b}"));
        }
        check(!self.lambda_tgt.is_empty(), "lambda_tgt: empty grid".into());
        for l in self.lambda_tgt.to_vec() {
            check(l.is_finite(), format!("lambda_tgt: must be finite, got {l}"));
        }
        check(
            self.grid_slack >= 0.0 && self.grid_slack.is_finite(),
            format!("grid_slack: must be non-negative, got {}", self.grid_slack),
        );

        if let Err(e) = self.model.validate() {
            check(false, format!("model: {e}"));
        }

        let d = &self.data;
        check(
            d.num_classes == self.model.num_classes,
            format!(
                "data.num_classes: {} differs from model.num_classes {}",
                d.num_classes, self.model.num_classes
            ),
        );
        check(
            d.exclusive_classes < d.num_classes,
            format!(
                "data.exclusive_classes: {} leaves no class for the other clients",
                d.exclusive_classes
            ),
        );
        check(
            d.test_fraction > 0.0 && d.test_fraction < 1.0,
            format!("data.test_fraction: must lie in (0, 1), got {}", d.test_fraction),
        );
        match d.source {
            DataSource::Synthetic => {
                check(d.samples_per_class >= 1, "data.samples_per_class: must be positive".into());
                check(
                    d.class_separation > 0.0 && d.class_separation.is_finite(),
                    format!("data.class_separation: must be positive, got {}", d.class_separation),
                );
                check(
                    d.pretrain_samples_per_class >= 1,
                    "data.pretrain_samples_per_class: must be positive".into(),
                );
                check(
                    d.global_test_samples_per_class >= 1,
                    "data.global_test_samples_per_class: must be positive".into(),
                );
            }
            DataSource::Csv => {
                check(d.path.is_some(), "data.path: required for csv data".into());
                check(d.pretrain_path.is_some(), "data.pretrain_path: required for csv data".into());
                check(d.test_path.is_some(), "data.test_path: required for csv data".into());
            }
        }

        let p = &self.phases;
        check(p.fl >= 1, "phases.fl: need at least one FL round".into());
        check(
            p.fu > 0 || p.pu == 0,
            "phases.pu: PU rounds follow unlearning, so fu = 0 requires pu = 0".into(),
        );

        let t = &self.training;
        check(t.epochs_per_round >= 1, "training.epochs_per_round: must be positive".into());
        check(t.batch_size >= 1, "training.batch_size: must be positive".into());
        check(t.calibration_epochs >= 1, "training.calibration_epochs: must be positive".into());
        for (field, grid) in [("lr_main", &t.lr_main), ("lr_standalone", &t.lr_standalone)] {
            check(!grid.is_empty(), format!("training.{field}: empty grid"));
            for lr in grid.to_vec() {
                check(
                    lr >= 0.0 && lr.is_finite(),
                    format!("training.{field}: must be non-negative, got {lr}"),
                );
            }
        }
        check(
            t.pretrain_lr >= 0.0 && t.pretrain_lr.is_finite(),
            format!("training.pretrain_lr: must be non-negative, got {}", t.pretrain_lr),
        );
        check(
            t.weight_decay >= 0.0 && t.weight_decay.is_finite(),
            format!("training.weight_decay: must be non-negative, got {}", t.weight_decay),
        );

        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn grid_points(&self) -> Vec<GridPoint> {
        let mut points = Vec::new();
        for lambda_tgt in self.lambda_tgt.to_vec() {
            for lr_main in self.training.lr_main.to_vec() {
                for lr_standalone in self.training.lr_standalone.to_vec() {
                    points.push(GridPoint {
                        lambda_tgt,
                        lr_main,
                        lr_standalone,
                    });
                }
            }
        }
        points
    }

    pub fn has_grid(&self) -> bool {
        self.grid_points().len() > 1
    }

    /// Every run of the experiment, ordered by strategy, regime, β, grid point,
    /// then seed.
    pub fn expand(&self) -> Result<Vec<RunConfig>> {
        self.validate()?;
        let mut runs = Vec::new();
        for strategy in self.strategy.to_vec() {
            for regime in self.regime.to_vec() {
                for beta in self.beta.to_vec() {
                    for point in self.grid_points() {
                        for seed in self.seeds.to_vec() {
                            runs.push(self.resolve(strategy, regime, beta, point, seed));
                        }
                    }
                }
            }
        }
        Ok(runs)
    }

    pub fn resolve(&self, strategy: Strategy, regime: Regime, beta: f64, point: GridPoint, seed: u64) -> RunConfig {
        let t = &self.training;
        RunConfig {
            name: self.name.clone(),
            num_clients: self.num_clients,
            target_id: self.target_id,
            seed,
            beta,
            strategy,
            regime,
            anchor: self.anchor,
            lambda_tgt: point.lambda_tgt,
            parity: self.parity,
            model: self.model.clone(),
            data: self.data.clone(),
            phases: self.phases,
            training: TrainingPoint {
                epochs_per_round: t.epochs_per_round,
                batch_size: t.batch_size,
                lr_main: point.lr_main,
                lr_standalone: point.lr_standalone,
                weight_decay: t.weight_decay,
                pretrain_epochs: t.pretrain_epochs,
                pretrain_lr: t.pretrain_lr,
                calibration_epochs: t.calibration_epochs,
            },
        }
    }
}
